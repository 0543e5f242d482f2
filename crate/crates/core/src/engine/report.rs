use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EngineConfig;
use crate::error::Result;
use crate::lookahead::Halving;
use crate::store::StoreTraffic;
use crate::trace::{EmbeddingKey, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Bagpipe,
    Baseline,
}

/// One iteration of the simulated timeline. Times are in simulated units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub lookahead: usize,
    /// Pipeline still filling (iteration < initial lookahead); stalls are expected.
    pub warmup: bool,
    pub start: f64,
    pub blocked_on_eviction: f64,
    pub blocked_on_prefetch: f64,
    pub compute: f64,
    pub sync_point_wait: f64,
    pub critical_sync: f64,
    /// Overlapped with the next iteration's compute.
    pub background_sync: f64,
    pub end: f64,
    /// Cache entries resident while the batch trained.
    pub occupancy: usize,
    pub resident_after: usize,
    pub prefetched: usize,
    pub evicted: usize,
    pub churn: usize,
    pub updated: usize,
    pub critical: usize,
    pub background: usize,
    /// Rows written to the store after this iteration.
    pub flushed: usize,
    pub forced_flush: bool,
}

/// Cache events of one iteration, in the order they were applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationEvents {
    pub iteration: u64,
    pub prefetched: Vec<EmbeddingKey>,
    pub ttl_updates: Vec<(EmbeddingKey, u64)>,
    pub evicted: Vec<EmbeddingKey>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub iterations: u64,
    pub total_time: f64,
    pub compute: f64,
    pub critical_sync: f64,
    pub background_sync: f64,
    pub sync_point_wait: f64,
    pub blocked_on_prefetch: f64,
    pub blocked_on_eviction: f64,
    pub blocked_on_prefetch_after_warmup: f64,
    pub prefetched: u64,
    pub evicted: u64,
    pub churn: u64,
    pub peak_occupancy: usize,
    pub mean_updated: f64,
    pub mean_critical: f64,
    pub flushes: u64,
    pub forced_flushes: u64,
    /// Write-back requests sent by each trainer rank.
    pub flushes_per_rank: Vec<u64>,
    pub cache_misses: u64,
    pub gate_violations: u64,
    pub store: StoreTraffic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub config: EngineConfig,
    pub schema: Schema,
    /// SHA-256 over the batch contents; runs are comparable only on equal traces.
    pub trace_fingerprint: String,
    pub initial_lookahead: usize,
    pub final_lookahead: usize,
    pub halvings: Vec<Halving>,
    pub iterations: Vec<IterationRecord>,
    pub totals: RunTotals,
    pub final_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<IterationEvents>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<Vec<(EmbeddingKey, Vec<f32>)>>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per iteration; the header is the [`IterationRecord`] field names.
    pub fn write_iterations_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.iterations {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub(crate) fn summarize(iterations: &[IterationRecord], num_trainers: usize) -> RunTotals {
        let n = iterations.len().max(1) as f64;
        let mut t = RunTotals { flushes_per_rank: vec![0; num_trainers], ..Default::default() };
        for r in iterations {
            t.iterations += 1;
            t.compute += r.compute;
            t.critical_sync += r.critical_sync;
            t.background_sync += r.background_sync;
            t.sync_point_wait += r.sync_point_wait;
            t.blocked_on_prefetch += r.blocked_on_prefetch;
            t.blocked_on_eviction += r.blocked_on_eviction;
            if !r.warmup {
                t.blocked_on_prefetch_after_warmup += r.blocked_on_prefetch;
            }
            t.prefetched += r.prefetched as u64;
            t.evicted += r.evicted as u64;
            t.churn += r.churn as u64;
            t.peak_occupancy = t.peak_occupancy.max(r.occupancy);
            t.mean_updated += r.updated as f64 / n;
            t.mean_critical += r.critical as f64 / n;
            t.forced_flushes += u64::from(r.forced_flush);
        }
        t.total_time = iterations.last().map_or(0.0, |r| r.end);
        t
    }
}
