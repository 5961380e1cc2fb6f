//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain value: shape, data, and an optional gradient
//! buffer that only accumulates when `requires_grad` is set. Differentiable
//! computation goes through a [`Tape`], which records each operation together
//! with what its backward rule needs, and replays the record in reverse.
//!
//! Numeric width is a type parameter. Training runs in `f32`; gradient checks
//! run the same code in `f64`.

mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, max_relative_error};
pub use tape::{Tape, Var};

/// Storage code written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Element:
    num_traits::Float
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(bytes);
        f32::from_le_bytes(b)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(bytes);
        f64::from_le_bytes(b)
    }
}

/// Shorthand for lifting an `f64` literal into the element type.
#[inline]
pub(crate) fn lit<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("new", &shape, &[data.len()]));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_f64(vec![r, c], &data)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(vec![1], v)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place parameter updates (optimizer, EMA).
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix view: all leading axes are folded into rows.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Value-only copy: same shape and data, no gradient state.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer. A tensor that does not require
    /// gradients ignores the call.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        if !self.requires_grad {
            return Ok(());
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }
}

/// `c = a · b` for matrices; one-dimensional inputs are treated as row vectors.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    kernels::matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.matrix_dims("transpose")?;
    Tensor::new(vec![n, m], kernels::transpose(&a.data, m, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Pointwise combination of two equally shaped tensors.
pub fn elementwise<T: Element>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("elementwise", a.shape(), b.shape()));
    }
    let f = match op {
        BinaryOp::Add => |x: T, y: T| x + y,
        BinaryOp::Sub => |x: T, y: T| x - y,
        BinaryOp::Mul => |x: T, y: T| x * y,
    };
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn scale<T: Element>(a: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| x * c).collect(),
        requires_grad: false,
        grad: None,
    }
}

pub fn softmax_rows<T: Element>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let data = kernels::softmax_rows(&x.data, x.cols(), temperature)?;
    Tensor::new(x.shape.clone(), data)
}

pub fn log_softmax_rows<T: Element>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    let data = kernels::log_softmax_rows(&x.data, x.cols(), temperature)?;
    Tensor::new(x.shape.clone(), data)
}

pub fn layer_norm<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_layer_norm(x, gain, bias, eps)?;
    let (y, _, _) = kernels::layer_norm(&x.data, &gain.data, &bias.data, x.cols(), eps);
    Tensor::new(x.shape.clone(), y)
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| kernels::gelu(v)).collect(),
        requires_grad: false,
        grad: None,
    }
}

pub fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {t}")))
    }
}

pub(crate) fn check_layer_norm<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<()> {
    if eps <= 0.0 {
        return Err(Error::Domain(format!("layer norm eps must be positive, got {eps}")));
    }
    let d = x.cols();
    if gain.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    if bias.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), bias.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap().data(), a.data());

        let sel = t(&[vec![1.0, 0.0]]);
        assert_eq!(matmul(&sel, &Tensor::eye(2)).unwrap().data(), &[1.0, 0.0]);

        let b = t(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), triple_loop(&a, &b).as_slice());
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::<f64>::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let z = Tensor::<f64>::zeros(vec![2]);
        assert_eq!(elementwise(BinaryOp::Add, &a, &z).unwrap().data(), &[1.0, 2.0]);

        let s = Tensor::<f64>::from_f64(vec![2], &[2.0, 4.0]).unwrap();
        assert_eq!(scale(&s, 1.0 / 4f64.sqrt()).data(), &[1.0, 2.0]);

        let x = Tensor::<f64>::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::<f64>::from_f64(vec![3], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(elementwise(BinaryOp::Mul, &x, &y).unwrap().data(), &[4.0, 10.0, 18.0]);
        assert!(elementwise(BinaryOp::Add, &x, &a).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&t(&[vec![0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(u.data(), &[0.5, 0.5]);

        let s = softmax_rows(&t(&[vec![1.0, 0.0]]), 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.8808).abs() < 1e-4);
        assert!((s.data()[1] - 0.1192).abs() < 1e-4);

        let big = softmax_rows(&t(&[vec![1000.0, 999.0]]), 1.0).unwrap();
        assert!((big.data()[0] - 0.7311).abs() < 1e-4);
        assert!((big.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_domain_errors() {
        let x = t(&[vec![1.0, 2.0]]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Domain(_))));
        let ninf = t(&[vec![f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        assert!(matches!(softmax_rows(&ninf, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::ones(vec![3]);
        let zero = Tensor::<f64>::zeros(vec![3]);
        let y = layer_norm(&one, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::from_f64(vec![2], &[0.0, 2.0]).unwrap();
        let g = Tensor::<f64>::ones(vec![2]);
        let b = Tensor::<f64>::zeros(vec![2]);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let b5 = Tensor::<f64>::full(vec![2], 5.0);
        let g0 = Tensor::<f64>::zeros(vec![2]);
        assert_eq!(layer_norm(&x, &g0, &b5, 1e-5).unwrap().data(), &[5.0, 5.0]);
        assert!(layer_norm(&x, &g, &b, 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        let x = Tensor::<f64>::from_f64(vec![3], &[0.0, 10.0, 1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let oracle = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
        assert!((y.data()[2] - oracle).abs() < 1e-12);
        assert!((y.data()[2] - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn gelu_monotone_on_grid() {
        let xs: Vec<f64> = (-100..=300).map(|i| i as f64 * 0.02).collect();
        let y = gelu(&Tensor::<f64>::from_f64(vec![xs.len()], &xs).unwrap());
        // tanh-GELU has its minimum near -0.75; monotone increasing beyond it
        let start = xs.iter().position(|&x| x >= -0.7).unwrap();
        assert!(y.data()[start..].windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn grad_only_when_required() {
        let mut a = Tensor::<f32>::zeros(vec![2]);
        a.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(a.grad().is_none());
        let mut b = Tensor::<f32>::zeros(vec![2]).with_requires_grad(true);
        b.accumulate_grad(&[1.0, 2.0]).unwrap();
        b.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(b.grad().unwrap(), &[2.0, 4.0]);
        assert!(b.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
