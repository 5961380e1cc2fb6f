//! Stratified train/validation/test splitting.
//!
//! Per class, the split sizes come from the largest-remainder rule: each
//! split first gets `floor(fraction · count)`, then the leftover samples go
//! one at a time to the splits with the largest fractional parts, ties
//! broken in the order train, val, test. Class members are shuffled with a
//! per-class generator before being dealt out; every output keeps the input
//! record order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const MIN_PER_CLASS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: [0.6, 0.2, 0.2],
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    /// Fractions must be nonnegative and sum to 1 within 1e-9.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} must be >= 0 and sum to 1",
                self.fractions
            )));
        }
        Ok(())
    }
}

/// Split sizes for `n` items by the largest-remainder rule.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // stable sort keeps index order among equal remainders
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Record indices per class (or one group when `stratified` is off).
fn groups(labels: &[usize], stratified: bool) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(if stratified { l } else { 0 }).or_default().push(i);
    }
    g
}

/// Index sets `[train, val, test]`, each ascending.
pub fn split_indices(labels: &[usize], spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    let groups = groups(labels, spec.stratified);
    for (&class, members) in &groups {
        if spec.stratified && members.len() < MIN_PER_CLASS {
            return Err(Error::SmallClass {
                class,
                count: members.len(),
                need: MIN_PER_CLASS,
            });
        }
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for (&class, members) in &groups {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_for(spec.seed, &[class as u64]));
        let sizes = largest_remainder(members.len(), &spec.fractions);
        let mut rest = shuffled.as_slice();
        for (part, &size) in out.iter_mut().zip(&sizes) {
            let (head, tail) = rest.split_at(size);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<[Manifest; 3]> {
    let [a, b, c] = split_indices(&manifest.labels(), spec)?;
    Ok([manifest.subset(&a), manifest.subset(&b), manifest.subset(&c)])
}

/// Keeps `round(fraction · count)` items of each class. Returns `None` when a
/// class present in `labels` would vanish.
pub fn subsample_indices(labels: &[usize], fraction: f64, seed: u64) -> Option<Vec<usize>> {
    let mut keep = Vec::new();
    for (&class, members) in &groups(labels, true) {
        let k = (fraction * members.len() as f64).round() as usize;
        if k == 0 {
            return None;
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_for(seed, &[class as u64]));
        keep.extend_from_slice(&shuffled[..k.min(members.len())]);
    }
    keep.sort_unstable();
    Some(keep)
}
