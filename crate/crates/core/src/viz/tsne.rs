//! Exact t-SNE.
//!
//! Conditional affinities use a Gaussian kernel whose precision is found per
//! point by bisection in log space until the entropy matches
//! `log2(perplexity)`. The embedding minimizes `KL(P || Q)` with a Student-t
//! kernel by gradient descent with momentum and per-coordinate gains.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Element, Tensor};

/// Entropy tolerance of the perplexity search, in bits.
pub const ENTROPY_TOL: f64 = 1e-6;
const SEARCH_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Standard deviation of the Gaussian initial layout.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            learning_rate: 200.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 2.0 && self.perplexity.is_finite()) {
            return Err(Error::Config(format!("perplexity {} must be >= 2", self.perplexity)));
        }
        if !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) || !(self.init_std > 0.0) {
            return Err(Error::Config(
                "t-SNE learning rate, exaggeration and init std must be positive".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::Config("t-SNE needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneRun {
    pub points: Vec<[f64; 2]>,
    /// `KL(P || Q)` after every iteration, always against the unexaggerated P.
    pub kl: Vec<f64>,
}

fn sq_distances<T: Element>(x: &Tensor<T>) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional row for precision `beta` and its entropy in bits.
/// Distances are shifted by their minimum so the exponent never underflows
/// for the nearest neighbour.
fn conditional(dist: &[f64], beta: f64, row: &mut [f64]) -> f64 {
    let dmin = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (p, &d) in row.iter_mut().zip(dist) {
        *p = (-beta * (d - dmin)).exp();
        sum += *p;
        weighted += (d - dmin) * *p;
    }
    row.iter_mut().for_each(|p| *p /= sum);
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

/// Conditional distribution of one point over the others, found by
/// bisecting `ln beta`. Returns the row and the attained entropy.
fn search_row(dist: &[f64], target: f64) -> (Vec<f64>, f64) {
    let mut row = vec![0.0; dist.len()];
    let mean = dist.iter().sum::<f64>() / dist.len() as f64;
    let scale = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    let mut best = (f64::INFINITY, Vec::new(), f64::NAN);
    for _ in 0..SEARCH_STEPS {
        let mid = 0.5 * (lo + hi);
        let h = conditional(dist, scale * mid.exp(), &mut row);
        let gap = (h - target).abs();
        if gap < best.0 {
            best = (gap, row.clone(), h);
        }
        if gap < ENTROPY_TOL {
            break;
        }
        // entropy falls as the precision grows
        if h > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (best.1, best.2)
}

/// Symmetric joint affinities `P_ij = (p_j|i + p_i|j) / 2N`.
pub fn joint_affinities<T: Element>(x: &Tensor<T>, perplexity: f64) -> Result<Tensor<f64>> {
    if x.ndim() != 2 {
        return Err(Error::shape("joint_affinities", x.shape(), &[0, 0]));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::Domain(format!("t-SNE needs at least 2 points, got {n}")));
    }
    if x.data().iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::NonFinite("t-SNE input".into()));
    }
    let dist = sq_distances(x);
    if dist.iter().all(|&d| d == 0.0) {
        return Err(Error::Domain("all points coincide".into()));
    }
    let mut cond = vec![0.0; n * n];
    if n == 2 {
        // each point has one neighbour, so its conditional is forced
        cond[1] = 1.0;
        cond[2] = 1.0;
    } else {
        if !(perplexity < n as f64) {
            return Err(Error::Domain(format!(
                "perplexity {perplexity} must be below the point count {n}"
            )));
        }
        let target = perplexity.log2();
        for i in 0..n {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            let (row, h) = search_row(&others, target);
            if !((h - target).abs() < ENTROPY_TOL) {
                return Err(Error::Perplexity {
                    point: i,
                    entropy: h,
                    target,
                });
            }
            let mut it = row.into_iter();
            for j in (0..n).filter(|&j| j != i) {
                cond[i * n + j] = it.next().expect("row length n-1");
            }
        }
    }
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
        }
    }
    Tensor::new(vec![n, n], p)
}

/// Attained entropy in bits of every point's conditional distribution.
pub fn conditional_entropies<T: Element>(x: &Tensor<T>, perplexity: f64) -> Result<Vec<f64>> {
    let n = x.rows();
    let dist = sq_distances(x);
    let target = perplexity.log2();
    Ok((0..n)
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            search_row(&others, target).1
        })
        .collect())
}

/// Student-t affinities of the layout: unnormalized kernel and its sum.
fn student_kernel(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let v = 1.0 / (1.0 + d);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    total
}

fn kl_divergence(p: &[f64], num: &[f64], total: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &k)| pij * (pij / (k / total).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne_embed<T: Element>(x: &Tensor<T>, cfg: &TsneConfig) -> Result<TsneRun> {
    cfg.validate()?;
    let p = joint_affinities(x, cfg.perplexity)?;
    let p = p.data();
    let n = x.rows();

    let mut rng = rng_for(cfg.seed, &[]);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let total = student_kernel(&y, &mut num);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = num[i * n + j];
                let coeff = (exag * p[i * n + j] - k / total) * k;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                let grad = 4.0 * g[c];
                let gain = &mut gains[i][c];
                *gain = if (grad > 0.0) != (velocity[i][c] > 0.0) {
                    *gain + 0.2
                } else {
                    (*gain * 0.8).max(0.01)
                };
                velocity[i][c] = momentum * velocity[i][c] - cfg.learning_rate * *gain * grad;
            }
        }
        // all gradients use the old layout; positions move together
        let mut mean = [0.0; 2];
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
            mean[0] += yi[0] / n as f64;
            mean[1] += yi[1] / n as f64;
        }
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
        if y.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::NonFinite(format!("t-SNE diverged at iteration {it}")));
        }
        let total = student_kernel(&y, &mut num);
        kl.push(kl_divergence(p, &num, total));
    }
    Ok(TsneRun { points: y, kl })
}
