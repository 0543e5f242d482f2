use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::StubModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Every stage runs on the calling thread in a fixed order.
    #[default]
    Sequential,
    /// Data processor, planner and flusher run on their own threads behind bounded
    /// queues; per-rank gradients are computed in parallel.
    Concurrent,
}

fn default_true() -> bool {
    true
}

fn default_queue_depth() -> usize {
    8
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Engine configuration; the JSON form uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Batches in the planner window, current one included; 0 picks it from the cache size.
    pub lookahead: usize,
    /// Cache entries per trainer.
    pub cache_capacity: usize,
    pub batch_size: usize,
    pub num_trainers: usize,
    pub num_shards: usize,
    /// Eviction write-backs are flushed every `max(1, ceil(p * L))` iterations.
    pub rpc_batch_proportion: f64,
    /// Simulated time of one store round trip (fetch or write-back).
    pub fetch_latency: f64,
    /// Simulated forward/backward time per iteration.
    pub compute_latency: f64,
    /// Cache entries synchronised per unit of simulated time.
    pub sync_bandwidth: f64,
    pub lr: f32,
    pub c_value: f32,
    pub c_label: f32,
    pub seed: u64,
    /// Iterations to run; 0 runs the whole trace.
    pub iterations: usize,
    /// Synchronise only next-batch keys on the critical path.
    #[serde(default = "default_true")]
    pub split_sync: bool,
    #[serde(default)]
    pub scheduler: Scheduler,
    /// Capacity of the bounded queues between pipeline stages.
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
    /// Embed every written row in the report so mismatches can be listed key by key.
    #[serde(default)]
    pub record_final_state: bool,
    /// Keep the per-iteration prefetch, TTL and eviction log in the report.
    #[serde(default, skip_serializing_if = "is_false")]
    pub record_events: bool,
    /// Fault injection: dispatch prefetches without waiting for write-backs.
    #[serde(default, skip_serializing_if = "is_false")]
    pub disable_gate: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let stub = StubModelConfig::default();
        Self {
            lookahead: 8,
            cache_capacity: 100_000,
            batch_size: 512,
            num_trainers: 1,
            num_shards: 4,
            rpc_batch_proportion: 0.25,
            fetch_latency: 2.0,
            compute_latency: 5.0,
            sync_bandwidth: 1000.0,
            lr: stub.lr,
            c_value: stub.c_value,
            c_label: stub.c_label,
            seed: 0,
            iterations: 0,
            split_sync: true,
            scheduler: Scheduler::Sequential,
            queue_depth: default_queue_depth(),
            record_final_state: false,
            record_events: false,
            disable_gate: false,
        }
    }
}

impl EngineConfig {
    pub fn stub(&self) -> StubModelConfig {
        StubModelConfig { lr: self.lr, c_value: self.c_value, c_label: self.c_label }
    }

    pub fn flush_interval(&self, lookahead: usize) -> usize {
        ((self.rpc_batch_proportion * lookahead as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.cache_capacity < 1 {
            return bad("cache_capacity must be at least 1".into());
        }
        if self.batch_size < 1 || self.num_trainers < 1 || self.num_shards < 1 || self.queue_depth < 1 {
            return bad("batch_size, num_trainers, num_shards and queue_depth must be at least 1".into());
        }
        if !(self.rpc_batch_proportion > 0.0 && self.rpc_batch_proportion <= 1.0) {
            return bad(format!("rpc_batch_proportion must be in (0, 1], got {}", self.rpc_batch_proportion));
        }
        for (name, v) in [("fetch_latency", self.fetch_latency), ("compute_latency", self.compute_latency)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.sync_bandwidth > 0.0 && self.sync_bandwidth.is_finite()) {
            return bad(format!("sync_bandwidth must be positive, got {}", self.sync_bandwidth));
        }
        self.stub().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flush_interval_from_proportion() {
        let cfg = EngineConfig { rpc_batch_proportion: 0.25, ..Default::default() };
        assert_eq!(cfg.flush_interval(200), 50);
        assert_eq!(cfg.flush_interval(1), 1);
        assert_eq!(cfg.flush_interval(7), 2);
        let cfg = EngineConfig { rpc_batch_proportion: 1.0, ..Default::default() };
        assert_eq!(cfg.flush_interval(64), 64);
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = EngineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(!text.contains("disable_gate"));
        let back: EngineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal = r#"{"lookahead":0,"cache_capacity":10,"batch_size":4,"num_trainers":2,"num_shards":1,
            "rpc_batch_proportion":1.0,"fetch_latency":1,"compute_latency":2,"sync_bandwidth":5,
            "lr":0.01,"c_value":0.01,"c_label":0.001,"seed":3,"iterations":0}"#;
        let cfg: EngineConfig = serde_json::from_str(minimal).unwrap();
        assert!(cfg.split_sync);
        assert_eq!(cfg.scheduler, Scheduler::Sequential);
        assert!(serde_json::from_str::<EngineConfig>(&minimal.replace("\"seed\"", "\"sneed\"")).is_err());
    }

    #[test]
    fn validation() {
        assert!(EngineConfig::default().validate().is_ok());
        assert!(EngineConfig { rpc_batch_proportion: 0.0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { rpc_batch_proportion: 1.5, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { num_trainers: 0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { sync_bandwidth: 0.0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { fetch_latency: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
