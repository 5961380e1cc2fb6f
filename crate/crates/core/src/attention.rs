//! Scaled dot-product attention and its multi-head composition.
//!
//! Head projections are stored per head (`w_q[i]`, `w_k[i]`, `w_v[i]`). The
//! query/key/value projections carry no bias; the output projection `w_o`
//! does (`b_o`).

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P> {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub w_q: Vec<P>,
    pub w_k: Vec<P>,
    pub w_v: Vec<P>,
    /// `(heads·d_v) × d_model`
    pub w_o: P,
    pub b_o: P,
}

impl<P> AttentionParams<P> {
    pub fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> AttentionParams<Q> {
        let mut per_head = |name: &str, ws: &'a [P]| -> Vec<Q> {
            ws.iter()
                .enumerate()
                .map(|(i, w)| f(&format!("{prefix}.{name}.{i}"), w))
                .collect()
        };
        let w_q = per_head("w_q", &self.w_q);
        let w_k = per_head("w_k", &self.w_k);
        let w_v = per_head("w_v", &self.w_v);
        AttentionParams {
            heads: self.heads,
            d_model: self.d_model,
            d_k: self.d_k,
            d_v: self.d_v,
            w_q,
            w_k,
            w_v,
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
            b_o: f(&format!("{prefix}.b_o"), &self.b_o),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (name, ws) in [("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)] {
            for (i, w) in ws.iter_mut().enumerate() {
                f(&format!("{prefix}.{name}.{i}"), w);
            }
        }
        f(&format!("{prefix}.w_o"), &mut self.w_o);
        f(&format!("{prefix}.b_o"), &mut self.b_o);
    }
}

impl<T: Element> AttentionParams<Tensor<T>> {
    /// Checks every weight shape against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let h = self.heads;
        if h == 0 || self.d_k == 0 || self.d_v == 0 || self.d_model == 0 {
            return Err(Error::Contract("attention dims must be at least 1".into()));
        }
        if self.w_q.len() != h || self.w_k.len() != h || self.w_v.len() != h {
            return Err(Error::Contract(format!("expected {h} projections per kind")));
        }
        let expect = |t: &Tensor<T>, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape("attention params", t.shape(), shape))
            }
        };
        for i in 0..h {
            expect(&self.w_q[i], &[self.d_model, self.d_k])?;
            expect(&self.w_k[i], &[self.d_model, self.d_k])?;
            expect(&self.w_v[i], &[self.d_model, self.d_v])?;
        }
        expect(&self.w_o, &[h * self.d_v, self.d_model])?;
        expect(&self.b_o, &[self.d_model])
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str) -> AttentionParams<Var> {
        self.map(prefix, &mut |name, t| tape.param(name, t))
    }
}

/// Records `softmax(q·kᵀ/√d_k)·v`; returns `(output, weights)`.
pub fn attend<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[1] != ks[1] {
        return Err(Error::shape("attention q/k", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("attention k/v", &ks, &vs));
    }
    let d_k = qs[1] as f64;
    let scores = tape.matmul_bt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    let weights = tape.softmax_rows(scaled, 1.0)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Records multi-head attention; returns the output and per-head weights.
pub fn multi_head<T: Element>(
    tape: &mut Tape<T>,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams<Var>,
) -> Result<(Var, Vec<Var>)> {
    for x in [x_q, x_kv] {
        let t = tape.value(x);
        if t.ndim() != 2 || t.cols() != p.d_model {
            return Err(Error::shape("multi_head_attention", t.shape(), &[p.d_model]));
        }
    }
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let q = tape.matmul(x_q, p.w_q[i])?;
        let k = tape.matmul(x_kv, p.w_k[i])?;
        let v = tape.matmul(x_kv, p.w_v[i])?;
        let (h, w) = attend(tape, q, k, v)?;
        heads.push(h);
        weights.push(w);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let proj = tape.matmul(cat, p.w_o)?;
    let out = tape.add_row(proj, p.b_o)?;
    Ok((out, weights))
}

/// Value-only scaled dot-product attention: `(output m×d_v, weights m×n)`.
pub fn scaled_dot_product_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::no_grad();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (o, w) = attend(&mut tape, qv, kv, vv)?;
    Ok((tape.value(o).clone(), tape.value(w).clone()))
}

/// Value-only multi-head attention, output `m × d_model`.
pub fn multi_head_attention<T: Element>(
    x_q: &Tensor<T>,
    x_kv: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    p.validate()?;
    let mut tape = Tape::no_grad();
    let bound = p.bind(&mut tape, "attn");
    let (xq, xkv) = (tape.constant(x_q.clone()), tape.constant(x_kv.clone()));
    let (o, _) = multi_head(&mut tape, xq, xkv, &bound)?;
    Ok(tape.value(o).clone())
}
