//! Gradient buffers and SGD with momentum.

use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tape, Tensor, Var};
use crate::vit::ViTWeights;

/// Per-leaf gradient sums in canonical leaf order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Element> GradBuffer<T> {
    pub fn zeros_like(weights: &ViTWeights<Tensor<T>>) -> Self {
        GradBuffer {
            grads: weights
                .leaves()
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect(),
        }
    }

    /// Adds the tape gradients of every bound leaf.
    pub fn accumulate(&mut self, tape: &Tape<T>, bound: &ViTWeights<Var>) {
        for (acc, (_, &v)) in self.grads.iter_mut().zip(bound.leaves()) {
            if let Some(g) = tape.grad(v) {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm` (0 disables).
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.norm();
        if max_norm > 0.0 && n > max_norm {
            let c = lit::<T>(max_norm / n);
            self.grads.iter_mut().flatten().for_each(|g| *g *= c);
        }
    }
}

/// `v ← μ·v + g + wd·p;  p ← p − lr·v`
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: sizes.into_iter().map(|n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_weights(momentum: f64, weight_decay: f64, weights: &ViTWeights<Tensor<T>>) -> Self {
        Self::new(momentum, weight_decay, weights.leaves().iter().map(|(_, t)| t.numel()))
    }

    /// Updates parameter slot `index`.
    pub fn update(&mut self, index: usize, param: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        let buf = self
            .buffers
            .get_mut(index)
            .ok_or_else(|| Error::Contract(format!("no optimizer slot {index}")))?;
        if buf.len() != param.len() || grad.len() != param.len() {
            return Err(Error::shape("sgd update", &[param.len()], &[grad.len(), buf.len()]));
        }
        let (mu, wd, lr) = (lit::<T>(self.momentum), lit::<T>(self.weight_decay), lit::<T>(lr));
        for ((p, v), &g) in param.iter_mut().zip(buf.iter_mut()).zip(grad) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
        Ok(())
    }

    pub fn step_weights(&mut self, weights: &mut ViTWeights<Tensor<T>>, grads: &GradBuffer<T>, lr: f64) -> Result<()> {
        let mut i = 0;
        let mut result = Ok(());
        weights.visit_mut("", &mut |_, t| {
            if result.is_ok() {
                result = self.update(i, t.data_mut(), &grads.grads[i], lr);
            }
            i += 1;
        });
        result
    }
}

/// Cosine decay from `base` at step 0 to `min` at step `total`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_by_hand() {
        let mut opt = Sgd::<f64>::new(0.9, 0.0, [2]);
        let mut p = vec![1.0, -1.0];
        opt.update(0, &mut p, &[1.0, 2.0], 0.1).unwrap();
        assert_eq!(p, vec![0.9, -1.2]);
        opt.update(0, &mut p, &[1.0, 2.0], 0.1).unwrap();
        // v = 0.9·1 + 1 = 1.9
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
        assert!(opt.update(1, &mut p, &[0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 0.1, 10, 10) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.0, 5, 10) - 0.5).abs() < 1e-15);
    }
}
