use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest `|analytic − numeric| / max(|analytic|, 1e-8)` over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of scalar `f` at `x` against the five-point
/// central difference with step `h` (error O(h⁴)), returning the max
/// relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let leaf = x.detached().with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.param("x", &leaf);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.constant(probe.clone());
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.detached();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
