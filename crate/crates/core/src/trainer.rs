//! Deterministic trainer stub.
//!
//! Each occurrence of key `e` in example `i` contributes
//! `c_value * v_e + c_label * (label_i - 0.5)` to every component of `e`'s gradient.
//! Gradients depend on the values read, so a stale read changes the final state.
//! All arithmetic is `f32` in a fixed order: occurrences in example order within a
//! rank, then ranks in ascending order.

use std::collections::BTreeMap;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::cache::DynamicCache;
use crate::error::{Error, Result};
use crate::trace::{EmbeddingKey, Example};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubModelConfig {
    pub lr: f32,
    pub c_value: f32,
    pub c_label: f32,
}

impl Default for StubModelConfig {
    fn default() -> Self {
        Self { lr: 0.01, c_value: 0.01, c_label: 0.001 }
    }
}

impl StubModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr > 0.0 && self.lr.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)))
        }
    }
}

pub type GradientMap = BTreeMap<EmbeddingKey, Vec<f32>>;

/// Contiguous split of a global batch across `num_trainers` ranks:
/// rank `r` gets examples `[r*B/T, (r+1)*B/T)`.
pub fn split_batch(examples: &[Example], num_trainers: usize) -> Vec<&[Example]> {
    let b = examples.len();
    (0..num_trainers).map(|r| &examples[r * b / num_trainers..(r + 1) * b / num_trainers]).collect()
}

pub fn local_gradients<'v>(
    sub_batch: &[Example],
    values: impl Fn(&EmbeddingKey) -> Option<&'v [f32]>,
    cfg: &StubModelConfig,
) -> Result<GradientMap> {
    let mut grads = GradientMap::new();
    for ex in sub_batch {
        let label_term = cfg.c_label * (f32::from(ex.label) - 0.5);
        for key in &ex.sparse {
            let v = values(key).ok_or_else(|| Error::Consistency(format!("no value for {key} while computing gradients")))?;
            match grads.get_mut(key) {
                Some(g) => {
                    for (gj, vj) in g.iter_mut().zip(v) {
                        *gj += cfg.c_value * vj + label_term;
                    }
                }
                None => {
                    grads.insert(*key, v.iter().map(|vj| cfg.c_value * vj + label_term).collect());
                }
            }
        }
    }
    Ok(grads)
}

/// Sums per-rank gradients in ascending rank order. The order is part of the
/// contract: reordering can change low bits.
pub fn combine_gradients(per_trainer: &[GradientMap]) -> GradientMap {
    let mut out = GradientMap::new();
    for grads in per_trainer {
        for (k, g) in grads {
            match out.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
                None => {
                    out.insert(*k, g.clone());
                }
            }
        }
    }
    out
}

/// Plain SGD in place. Returns false, leaving the value untouched, for an all-zero gradient.
pub fn sgd_step(value: &mut [f32], grad: &[f32], lr: f32) -> bool {
    if grad.iter().all(|g| *g == 0.0) {
        return false;
    }
    for (v, g) in value.iter_mut().zip(grad) {
        *v -= lr * g;
    }
    true
}

/// Applies combined gradients to a cache; returns the keys that changed, sorted.
pub fn apply_updates(cache: &mut DynamicCache, combined: &GradientMap, cfg: &StubModelConfig) -> Result<Vec<EmbeddingKey>> {
    let mut updated = Vec::new();
    for (k, g) in combined {
        if cache.update_with(*k, |v| sgd_step(v, g, cfg.lr))? {
            updated.push(*k);
        }
    }
    Ok(updated)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SyncSplit {
    /// Updated keys the next batch reads; synchronised on the critical path.
    pub critical: Vec<EmbeddingKey>,
    /// Everything else; synchronised in the background.
    pub background: Vec<EmbeddingKey>,
}

pub fn split_sync_sets(updated: &[EmbeddingKey], next_batch_keys: &FxHashSet<EmbeddingKey>) -> SyncSplit {
    let (mut critical, mut background): (Vec<_>, Vec<_>) = updated.iter().partition(|k| next_batch_keys.contains(k));
    critical.sort_unstable();
    critical.dedup();
    background.sort_unstable();
    background.dedup();
    SyncSplit { critical, background }
}
