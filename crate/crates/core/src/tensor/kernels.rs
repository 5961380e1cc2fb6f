//! Slice-level numeric kernels shared by the value API and the tape.
//!
//! All reductions run sequentially in index order, so results do not depend
//! on how callers schedule work.

use super::{lit, Element};
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · bᵀ` where `b` is stored as `[n×k]`.
pub fn matmul_bt_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is stored as `[m×k]` and `b` as `[m×n]`.
pub fn matmul_at_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn row_max<T: Element>(row: &[T], inv_t: T) -> Result<T> {
    let mx = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v * inv_t > m { v * inv_t } else { m });
    if mx == T::neg_infinity() || mx.is_nan() {
        return Err(Error::Domain("softmax row has no finite entry".into()));
    }
    Ok(mx)
}

/// Temperature softmax over each row of width `cols`, max-subtracted.
pub fn softmax_rows<T: Element>(x: &[T], cols: usize, temperature: f64) -> Result<Vec<T>> {
    let inv_t = lit::<T>(1.0 / temperature);
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = row_max(row, inv_t)?;
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v * inv_t - mx).exp();
            sum += *d;
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(out)
}

/// Temperature log-softmax over each row, via log-sum-exp with max shift.
pub fn log_softmax_rows<T: Element>(x: &[T], cols: usize, temperature: f64) -> Result<Vec<T>> {
    let inv_t = lit::<T>(1.0 / temperature);
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = row_max(row, inv_t)?;
        let sum: T = row.iter().map(|&v| (v * inv_t - mx).exp()).sum();
        let lse = mx + sum.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v * inv_t - lse;
        }
    }
    Ok(out)
}

/// Returns `(y, xhat, rstd)` with `rstd` one entry per row.
pub fn layer_norm<T: Element>(x: &[T], gain: &[T], bias: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = lit::<T>(cols as f64);
    let eps = lit::<T>(eps);
    let rows = x.len() / cols;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let u = lit::<T>(GELU_K) * (x + lit::<T>(GELU_C) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let k = lit::<T>(GELU_K);
    let c = lit::<T>(GELU_C);
    let half = lit::<T>(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * x * x)
}
