use super::{check_layer_norm, kernels, lit, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    /// `x[m×n] + b[n]`, bias broadcast over rows.
    AddRow(usize, usize),
    Softmax {
        x: usize,
        inv_t: T,
    },
    LogSoftmax {
        x: usize,
        inv_t: T,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Ordered record of executed operations.
///
/// Inputs always precede outputs, so node order is a topological order and
/// backward is a single reverse sweep. A tape supports one backward pass;
/// call [`Tape::reset`] before reusing it.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// A tape that computes values only. Every leaf is a constant and
    /// `backward` is rejected.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf. It is tracked for gradients only when the
    /// tensor itself requires them and the tape is recording.
    pub fn param(&mut self, label: impl Into<String>, t: &Tensor<T>) -> Var {
        let v = self.push(t.detached(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].label = Some(label.into());
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Labels of every gradient-tracked leaf, in registration order.
    pub fn tracked_leaves(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .filter_map(|n| n.label.as_deref())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 || self.value(a).ndim() > 2 || self.value(b).ndim() > 2 {
            return Err(Error::shape("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = super::transpose(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::elementwise(super::BinaryOp::Add, self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::elementwise(super::BinaryOp::Sub, self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::elementwise(super::BinaryOp::Mul, self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = super::scale(self.value(a), c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, lit(c)), rg)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(bias);
        let cols = xt.cols();
        if bt.numel() != cols {
            return Err(Error::shape("add_row", xt.shape(), bt.shape()));
        }
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(bt.data()).for_each(|(d, &b)| *d += b);
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x.0, bias.0), rg))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = super::softmax_rows(self.value(x), temperature)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Softmax {
                x: x.0,
                inv_t: lit(1.0 / temperature),
            },
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = super::log_softmax_rows(self.value(x), temperature)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::LogSoftmax {
                x: x.0,
                inv_t: lit(1.0 / temperature),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        check_layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let xt = self.value(x);
        let (y, xhat, rstd) = kernels::layer_norm(
            xt.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            xt.cols(),
            eps,
        );
        let value = Tensor::new(xt.shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (xhat, rstd) = if rg && self.recording {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = super::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x.0), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / lit(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let c = t.cols();
        let value = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x: x.0, start }, rg))
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract("loss is not connected to any tracked leaf".into()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].value.numel();
        let buf = self.grads[target].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily take the op so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |da| kernels::matmul_bt_acc(g, &bv, da, m, n, k));
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |db| kernels::matmul_at_acc(&av, g, db, m, k, n));
                }
            }
            &Op::MatMulBt(a, b) => {
                // c[m×n] = a[m×k] · b[n×k]ᵀ; da = g·b, db = gᵀ·a
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.rows();
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |da| kernels::matmul_acc(g, &bv, da, m, n, k));
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |db| kernels::matmul_at_acc(g, &av, db, m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let gt = kernels::transpose(g, n, m);
                self.acc(a, |da| add_into(da, &gt));
            }
            &Op::Add(a, b) => {
                self.acc(a, |da| add_into(da, g));
                self.acc(b, |db| add_into(db, g));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |da| add_into(da, g));
                self.acc(b, |db| db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |da| {
                        for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&bv) {
                            *d += gv * x;
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |db| {
                        for ((d, &gv), &x) in db.iter_mut().zip(g).zip(&av) {
                            *d += gv * x;
                        }
                    });
                }
            }
            &Op::Scale(a, c) => {
                self.acc(a, |da| da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c));
            }
            &Op::AddRow(x, b) => {
                self.acc(x, |dx| add_into(dx, g));
                let cols = self.nodes[b].value.numel();
                self.acc(b, |db| {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Softmax { x, inv_t } => {
                let cols = self.nodes[i].value.cols();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |dx| {
                    for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d += inv_t * yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, inv_t } => {
                let cols = self.nodes[i].value.cols();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |dx| {
                    for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let gsum: T = gr.iter().copied().sum();
                        for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d += inv_t * (gv - yv.exp() * gsum);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let cols = self.nodes[x].value.cols();
                let n = lit::<T>(cols as f64);
                if self.nodes[x].requires_grad {
                    let gv = self.nodes[gain].value.data().to_vec();
                    self.acc(x, |dx| {
                        for (r, (dxr, gr)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                            let hr = &xhat[r * cols..(r + 1) * cols];
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for c in 0..cols {
                                let dh = gr[c] * gv[c];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[c];
                            }
                            mean_dh = mean_dh / n;
                            mean_dh_h = mean_dh_h / n;
                            for c in 0..cols {
                                let dh = gr[c] * gv[c];
                                dxr[c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                            }
                        }
                    });
                }
                self.acc(gain, |dg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &gv), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gv * h;
                        }
                    }
                });
                self.acc(bias, |db| {
                    for gr in g.chunks(cols) {
                        add_into(db, gr);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.nodes[x].value.data().to_vec();
                self.acc(x, |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(&xv) {
                        *d += gv * kernels::gelu_grad(v);
                    }
                });
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                self.acc(x, |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            &Op::Mean(x) => {
                let n = lit::<T>(self.nodes[x].value.numel() as f64);
                let g0 = g[0] / n;
                self.acc(x, |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    self.acc(p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    self.acc(p, |dp| {
                        for (r, dr) in dp.chunks_mut(c).enumerate() {
                            add_into(dr, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.nodes[x].value.cols();
                let len = g.len();
                self.acc(x, |dx| add_into(&mut dx[start * c..start * c + len], g));
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
