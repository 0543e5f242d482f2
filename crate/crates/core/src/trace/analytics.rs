//! Access-skew analytics over example streams.

use std::borrow::Borrow;
use std::io::Write;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use super::{EmbeddingKey, Example};
use crate::error::{Error, Result};

/// Up to this many distinct keys the CDF carries one point per key.
const PER_KEY_RESOLUTION: usize = 10_000;
const COARSE_POINTS: usize = 1_000;
const MARKER_FRACTIONS: [f64; 5] = [0.0001, 0.001, 0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CdfPoint {
    pub embedding_fraction: f64,
    pub access_fraction: f64,
    /// Number of most-accessed keys covered by this point.
    pub keys: u64,
    pub accesses: u64,
}

fn count_keys<E: Borrow<Example>>(stream: impl IntoIterator<Item = E>) -> (FxHashMap<EmbeddingKey, u64>, u64) {
    let mut counts: FxHashMap<EmbeddingKey, u64> = FxHashMap::default();
    let mut total = 0;
    for ex in stream {
        for k in &ex.borrow().sparse {
            *counts.entry(*k).or_default() += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Keys by descending count, ties by key.
fn ranked(counts: &FxHashMap<EmbeddingKey, u64>) -> Vec<(EmbeddingKey, u64)> {
    let mut v: Vec<_> = counts.iter().map(|(k, c)| (*k, *c)).collect();
    v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

fn top_set(counts: &FxHashMap<EmbeddingKey, u64>, top_fraction: f64) -> FxHashSet<EmbeddingKey> {
    let n = top_count(counts.len(), top_fraction);
    ranked(counts).into_iter().take(n).map(|(k, _)| k).collect()
}

fn top_count(distinct: usize, fraction: f64) -> usize {
    ((fraction * distinct as f64).ceil() as usize).clamp(1, distinct.max(1))
}

fn check_fraction(top_fraction: f64) -> Result<()> {
    if top_fraction > 0.0 && top_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("top fraction must be in (0, 1], got {top_fraction}")))
    }
}

/// Cumulative share of accesses covered by the most popular keys.
pub fn access_cdf<E: Borrow<Example>>(stream: impl IntoIterator<Item = E>) -> Result<Vec<CdfPoint>> {
    let (counts, total) = count_keys(stream);
    if total == 0 {
        return Err(Error::Empty("access_cdf needs at least one access"));
    }
    let ranked = ranked(&counts);
    let k_total = ranked.len();
    let mut prefix = Vec::with_capacity(k_total);
    let mut acc = 0u64;
    for (_, c) in &ranked {
        acc += c;
        prefix.push(acc);
    }

    let mut ks: Vec<usize> = if k_total <= PER_KEY_RESOLUTION {
        (1..=k_total).collect()
    } else {
        (1..=COARSE_POINTS).map(|i| (i * k_total).div_ceil(COARSE_POINTS)).collect()
    };
    ks.extend(MARKER_FRACTIONS.iter().map(|f| top_count(k_total, *f)));
    ks.sort_unstable();
    ks.dedup();

    Ok(ks
        .into_iter()
        .map(|k| CdfPoint {
            embedding_fraction: k as f64 / k_total as f64,
            access_fraction: prefix[k - 1] as f64 / total as f64,
            keys: k as u64,
            accesses: prefix[k - 1],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftSegment {
    pub segment: usize,
    pub start: u64,
    pub end: u64,
    pub accesses: u64,
    pub top_hits: u64,
    pub coverage: f64,
}

/// `n` examples split into `segments` near-equal contiguous segments; returns the
/// interior boundaries accepted by [`popularity_drift`].
pub fn equal_segments(n: u64, segments: u64) -> Vec<u64> {
    (1..segments).map(|d| d * n / segments).collect()
}

/// Coverage of each segment by the top keys of segment 0.
///
/// `boundaries` are the example indices where segments 1.. start; segment 0 starts at
/// index 0 and the last segment runs to the end of the stream.
pub fn popularity_drift<E: Borrow<Example>>(
    stream: impl IntoIterator<Item = E>,
    boundaries: &[u64],
    top_fraction: f64,
) -> Result<Vec<DriftSegment>> {
    check_fraction(top_fraction)?;
    if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.first() == Some(&0) {
        return Err(Error::Config("segment boundaries must be strictly increasing and positive".into()));
    }
    let mut per_segment: Vec<FxHashMap<EmbeddingKey, u64>> = vec![FxHashMap::default(); boundaries.len() + 1];
    let mut seg = 0;
    let mut n = 0u64;
    for ex in stream {
        while seg < boundaries.len() && n >= boundaries[seg] {
            seg += 1;
        }
        for k in &ex.borrow().sparse {
            *per_segment[seg].entry(*k).or_default() += 1;
        }
        n += 1;
    }
    let mut starts = vec![0];
    starts.extend_from_slice(boundaries);
    let mut ends = boundaries.to_vec();
    ends.push(n);
    if let Some(d) = (0..starts.len()).find(|&d| starts[d] >= ends[d] || per_segment[d].is_empty()) {
        return Err(Error::Config(format!("segment {d} is empty")));
    }

    let top = top_set(&per_segment[0], top_fraction);
    Ok(per_segment
        .iter()
        .enumerate()
        .map(|(d, counts)| {
            let accesses: u64 = counts.values().sum();
            let top_hits: u64 = counts.iter().filter(|(k, _)| top.contains(k)).map(|(_, c)| c).sum();
            DriftSegment {
                segment: d,
                start: starts[d],
                end: ends[d],
                accesses,
                top_hits,
                coverage: top_hits as f64 / accesses as f64,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub batch_size: usize,
    pub top_fraction: f64,
    pub batches: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-batch share of unique keys that fall in the whole-stream top set.
pub fn coverage_vs_batch_size(examples: &[Example], batch_size: usize, top_fraction: f64) -> Result<CoverageSummary> {
    check_fraction(top_fraction)?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let (counts, total) = count_keys(examples);
    if total == 0 {
        return Err(Error::Empty("coverage_vs_batch_size needs at least one access"));
    }
    let top = top_set(&counts, top_fraction);
    let mut ratios: Vec<f64> = examples
        .chunks(batch_size)
        .map(|chunk| {
            let unique: FxHashSet<EmbeddingKey> = chunk.iter().flat_map(|e| e.sparse.iter().copied()).collect();
            let hot = unique.iter().filter(|k| top.contains(k)).count();
            hot as f64 / unique.len() as f64
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ratios.sort_unstable_by(f64::total_cmp);
    Ok(CoverageSummary {
        batch_size,
        top_fraction,
        batches: ratios.len(),
        min: ratios[0],
        q1: quantile(&ratios, 0.25),
        median: quantile(&ratios, 0.5),
        q3: quantile(&ratios, 0.75),
        max: ratios[ratios.len() - 1],
        mean,
    })
}

/// Header: `embedding_fraction,access_fraction,keys,accesses`.
pub fn write_cdf_csv(out: impl Write, points: &[CdfPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `segment,start,end,accesses,top_hits,coverage,top_fraction,approximate_days`.
/// `approximate_days` is true when segments are equal-size slices standing in for days.
pub fn write_drift_csv(out: impl Write, segments: &[DriftSegment], top_fraction: f64, approximate_days: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["segment", "start", "end", "accesses", "top_hits", "coverage", "top_fraction", "approximate_days"])?;
    for seg in segments {
        w.write_record([
            seg.segment.to_string(),
            seg.start.to_string(),
            seg.end.to_string(),
            seg.accesses.to_string(),
            seg.top_hits.to_string(),
            seg.coverage.to_string(),
            top_fraction.to_string(),
            approximate_days.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header: `batch_size,top_fraction,batches,min,q1,median,q3,max,mean`.
pub fn write_coverage_csv(out: impl Write, rows: &[CoverageSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
