//! Teacher-student self-distillation.
//!
//! The teacher sees global views through a sharp temperature softmax, the
//! student sees local views, and the student minimizes the cross-entropy to
//! the teacher averaged over every (global, local) pair. The teacher is never
//! differentiated; it follows the student by exponential moving average.

pub mod checkpoint;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, lit, Element, Tape, Tensor, Var};
use crate::vit::ViTModel;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use trainer::{prepare_images, EpochStats, TrainerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaGranularity {
    PerEpoch,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub tau_t: f64,
    pub tau_s: f64,
    pub ema_lambda: f64,
    pub ema_granularity: EmaGranularity,
    pub centering: bool,
    pub center_momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to `lr_min` on a cosine over all steps.
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Also feed global views to the student.
    pub student_globals: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_t: 0.04,
            tau_s: 0.1,
            ema_lambda: 0.9,
            ema_granularity: EmaGranularity::PerEpoch,
            centering: true,
            center_momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            lr_min: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: 3.0,
            student_globals: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau_t > 0.0 && self.tau_t <= self.tau_s) {
            return bad(format!(
                "temperatures need 0 < tau_t <= tau_s (tau_t={}, tau_s={})",
                self.tau_t, self.tau_s
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return bad(format!("ema_lambda={} outside [0, 1]", self.ema_lambda));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad(format!("center_momentum={} outside [0, 1)", self.center_momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!(
                "need 0 <= lr_min <= lr and lr > 0 (lr={}, lr_min={})",
                self.lr, self.lr_min
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("momentum in [0, 1), weight_decay >= 0 and grad_clip >= 0 required".into());
        }
        Ok(())
    }
}

/// `softmax((logits − center) / τ_t)` row-wise. `center` has length K.
pub fn teacher_probs<T: Element>(logits: &Tensor<T>, tau_t: f64, center: Option<&[T]>) -> Result<Tensor<T>> {
    tensor::check_temperature(tau_t)?;
    match center {
        None => tensor::softmax_rows(logits, tau_t),
        Some(c) => {
            if c.len() != logits.cols() {
                return Err(Error::shape("teacher center", logits.shape(), &[c.len()]));
            }
            let mut shifted = logits.detached();
            for row in shifted.data_mut().chunks_mut(c.len()) {
                row.iter_mut().zip(c).for_each(|(v, &m)| *v -= m);
            }
            tensor::softmax_rows(&shifted, tau_t)
        }
    }
}

pub fn student_log_probs<T: Element>(logits: &Tensor<T>, tau_s: f64) -> Result<Tensor<T>> {
    tensor::log_softmax_rows(logits, tau_s)
}

/// Mean over view pairs and rows of `−Σ_k P_t · log P_s`, computed pair by
/// pair from teacher probabilities and student log-probabilities.
pub fn distill_loss<T: Element>(teacher: &[Tensor<T>], student_log: &[Tensor<T>]) -> Result<f64> {
    check_views(teacher, student_log)?;
    let mut total = 0.0;
    for t in teacher {
        for s in student_log {
            for (&p, &l) in t.data().iter().zip(s.data()) {
                total -= p.as_f64() * l.as_f64();
            }
        }
    }
    let rows = teacher[0].rows();
    Ok(total / (teacher.len() * student_log.len() * rows) as f64)
}

fn check_views<T: Element>(teacher: &[Tensor<T>], student: &[Tensor<T>]) -> Result<()> {
    if teacher.is_empty() || student.is_empty() {
        return Err(Error::Contract("distillation needs at least one view per side".into()));
    }
    let shape = teacher[0].shape();
    if let Some(t) = teacher
        .iter()
        .chain(student)
        .find(|t| t.shape() != shape || t.ndim() != 2)
    {
        return Err(Error::shape("distill views", shape, t.shape()));
    }
    Ok(())
}

/// Records the distillation loss on `tape` for student logits (before
/// temperature). Uses `Σ_g Σ_l H(t_g, s_l) = −Σ_k (Σ_g t_g)(Σ_l log s_l)`,
/// so the cost is linear in the view counts.
pub fn distill_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    teacher: &[Tensor<T>],
    student_logits: &[Var],
    tau_s: f64,
) -> Result<Var> {
    if teacher.is_empty() || student_logits.is_empty() {
        return Err(Error::Contract("distillation needs at least one view per side".into()));
    }
    let shape = teacher[0].shape().to_vec();
    let mut t_sum = Tensor::<T>::zeros(shape.clone());
    for t in teacher {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("distill views", &shape, t.shape()));
        }
        t_sum.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
    }
    let mut s_sum = None;
    for &s in student_logits {
        if tape.value(s).shape() != shape.as_slice() {
            return Err(Error::shape("distill views", &shape, tape.value(s).shape()));
        }
        let ls = tape.log_softmax_rows(s, tau_s)?;
        s_sum = Some(match s_sum {
            None => ls,
            Some(acc) => tape.add(acc, ls)?,
        });
    }
    let tv = tape.constant(t_sum);
    let prod = tape.mul(tv, s_sum.expect("nonempty"))?;
    let total = tape.sum(prod);
    let pairs = (teacher.len() * student_logits.len() * shape[0]) as f64;
    Ok(tape.scale(total, -1.0 / pairs))
}

/// Shannon entropy in nats of each row of a probability matrix.
pub fn row_entropy<T: Element>(probs: &Tensor<T>) -> Vec<f64> {
    probs
        .data()
        .chunks(probs.cols())
        .map(|row| {
            -row.iter()
                .map(|&p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// `p_t ← λ·p_t + (1−λ)·p_s` for every parameter.
pub fn ema_update<T: Element>(teacher: &mut ViTModel<T>, student: &ViTModel<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("ema lambda {lambda} outside [0, 1]")));
    }
    if teacher.config() != student.config() {
        return Err(Error::Contract("teacher and student configs differ".into()));
    }
    let src = student.weights().leaves();
    let mut i = 0;
    let mut err = None;
    let (l, r) = (lit::<T>(lambda), lit::<T>(1.0 - lambda));
    teacher.weights_mut().visit_mut("", &mut |name, t| {
        let (sname, s) = &src[i];
        i += 1;
        if sname != name || s.shape() != t.shape() {
            err.get_or_insert_with(|| Error::Contract(format!("ema shape mismatch at {name}")));
            return;
        }
        if lambda == 1.0 {
            return;
        }
        for (p, &q) in t.data_mut().iter_mut().zip(s.data()) {
            *p = if lambda == 0.0 { q } else { l * *p + r * q };
        }
    });
    err.map_or(Ok(()), Err)
}

/// `center ← m·center + (1−m)·mean_rows(logits)`.
pub fn update_center<T: Element>(center: &mut [T], logits: &Tensor<T>, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("center momentum {momentum} outside [0, 1)")));
    }
    if logits.cols() != center.len() || logits.ndim() != 2 {
        return Err(Error::shape("update_center", logits.shape(), &[center.len()]));
    }
    let rows = logits.rows() as f64;
    for (k, c) in center.iter_mut().enumerate() {
        let mean = (0..logits.rows()).map(|r| logits.get(r, k).as_f64()).sum::<f64>() / rows;
        *c = lit(momentum * c.as_f64() + (1.0 - momentum) * mean);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use crate::vit::ViTConfig;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn teacher_probs_examples() {
        let p = teacher_probs(&t(&[vec![0.0, 0.0]]), 1.0, None).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = teacher_probs(&t(&[vec![1.0, 0.0]]), 0.5, None).unwrap();
        assert!((p.data()[0] - 0.8808).abs() < 1e-4 && (p.data()[1] - 0.1192).abs() < 1e-4);
        let logits = t(&[vec![3.0, -1.0, 0.5]]);
        let p = teacher_probs(&logits, 0.04, Some(logits.data())).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(teacher_probs(&logits, 0.0, None).is_err());
    }

    #[test]
    fn student_log_probs_examples() {
        let l = student_log_probs(&t(&[vec![0.0, 0.0]]), 1.0).unwrap();
        assert!(l.data().iter().all(|&v| (v + std::f64::consts::LN_2).abs() < 1e-12));
        let l = student_log_probs(&t(&[vec![1.0, 0.0]]), 1.0).unwrap();
        assert!((l.data()[0] + 0.3133).abs() < 1e-4 && (l.data()[1] + 1.3133).abs() < 1e-4);
        assert!(student_log_probs(&t(&[vec![1.0]]), -1.0).is_err());
    }

    #[test]
    fn uniform_pair_is_log_k() {
        let u = t(&[vec![0.5, 0.5]]);
        let lu = t(&[vec![0.5f64.ln(), 0.5f64.ln()]]);
        let loss = distill_loss(&[u], &[lu]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(distill_loss::<f64>(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_loss_matches_pairwise_mean() {
        let teachers = [t(&[vec![0.2, 0.5, 0.3]]), t(&[vec![0.7, 0.1, 0.2]])];
        let students = [vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.1], vec![-0.4, 0.9, 1.5]];
        let mut pairwise = 0.0;
        for tp in &teachers {
            for s in &students {
                let ls = student_log_probs(&t(std::slice::from_ref(s)), 0.1).unwrap();
                pairwise -= tp.data().iter().zip(ls.data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        pairwise /= 6.0;
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = students
            .iter()
            .map(|s| tape.constant(t(std::slice::from_ref(s))))
            .collect();
        let loss = distill_loss_on_tape(&mut tape, &teachers, &vars, 0.1).unwrap();
        assert!((tape.value(loss).item() - pairwise).abs() < 1e-12);
        let logs: Vec<_> = students
            .iter()
            .map(|s| student_log_probs(&t(std::slice::from_ref(s)), 0.1).unwrap())
            .collect();
        assert!((distill_loss(&teachers, &logs).unwrap() - pairwise).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_gradient() {
        let teachers = [t(&[vec![0.2, 0.5, 0.3], vec![0.1, 0.1, 0.8]])];
        let x = t(&[vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.1]]);
        let err = finite_diff_check(
            |tape, v| {
                let other = tape.scale(v, 0.5);
                distill_loss_on_tape(tape, &teachers, &[v, other], 0.1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            d_model: 4,
            heads: 2,
            head_hidden: 4,
            proto_dim: 3,
            ..ViTConfig::tiny()
        }
    }

    #[test]
    fn ema_endpoints_and_scalar() {
        let s = ViTModel::<f64>::new(tiny(), 1).unwrap();
        let t0 = ViTModel::<f64>::new(tiny(), 2).unwrap();
        let mut t1 = t0.clone();
        ema_update(&mut t1, &s, 1.0).unwrap();
        assert_eq!(t1, t0);
        ema_update(&mut t1, &s, 0.0).unwrap();
        assert_eq!(t1.weights(), s.weights());

        let mut teacher = ViTModel::<f64>::new(tiny(), 3).unwrap();
        let mut student = teacher.clone();
        teacher.weights_mut().visit_mut("", &mut |_, w| w.data_mut().fill(1.0));
        student.weights_mut().visit_mut("", &mut |_, w| w.data_mut().fill(0.0));
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert!((teacher.weights().cls.data()[0] - 0.9).abs() < 1e-12);
        // affine: twice with λ equals once with λ² when the student is zero
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert!((teacher.weights().cls.data()[0] - 0.81).abs() < 1e-12);

        let other = ViTModel::<f64>::new(ViTConfig { proto_dim: 5, ..tiny() }, 1).unwrap();
        assert!(ema_update(&mut teacher, &other, 0.5).is_err());
    }

    #[test]
    fn center_update() {
        let batch = t(&[vec![1.0, 2.0], vec![3.0, 6.0]]);
        let mut c = vec![10.0, 10.0];
        update_center(&mut c, &batch, 0.0).unwrap();
        assert_eq!(c, vec![2.0, 4.0]);
        let mut c = vec![0.0, 0.0];
        let m = 0.99;
        for n in 1..=500 {
            update_center(&mut c, &batch, m).unwrap();
            let want = 2.0 * (1.0 - m.powi(n));
            assert!((c[0] - want).abs() < 1e-9);
        }
        let mut z = vec![0.0; 2];
        for _ in 0..10 {
            update_center(&mut z, &Tensor::zeros(vec![3, 2]), 0.9).unwrap();
        }
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        DistillConfig::default().validate().unwrap();
        let bad = DistillConfig {
            tau_t: -1.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            tau_t: 0.2,
            tau_s: 0.1,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn entropy_of_uniform_is_log_k() {
        let p = Tensor::<f64>::full(vec![2, 4], 0.25);
        for h in row_entropy(&p) {
            assert!((h - 4f64.ln()).abs() < 1e-12);
        }
    }
}
