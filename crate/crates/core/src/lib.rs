//! Lookahead-planned embedding caching for recommendation-model training.
//!
//! The crate is organised around the roles of the training pipeline:
//!
//! * [`trace`] ingests or synthesises training examples and computes access-skew analytics.
//! * [`lookahead`] is the planner: it looks a fixed number of batches ahead and emits,
//!   per iteration, which embeddings to prefetch and how long cached rows must live.
//! * [`cache`] is the trainer-resident replicated cache driven by those plans.
//! * [`store`] is the sharded embedding server (in-process, plus a framed wire protocol).
//! * [`trainer`] is a deterministic gradient stub with rank-ordered combination.
//! * [`engine`] wires everything together under a simulated-time latency model and runs
//!   the synchronous fetch-train-write-back baseline used as the correctness oracle.

pub mod cache;
pub mod engine;
pub mod error;
pub mod hashing;
pub mod lookahead;
pub mod store;
pub mod trace;
pub mod trainer;

pub use cache::{CacheEntry, DynamicCache, Evicted};
pub use engine::{
    run_bagpipe, run_synchronous_baseline, verify_equivalence, EngineConfig, Equivalence,
    IterationRecord, RunOutcome, RunReport, Scheduler,
};
pub use error::{Error, Result};
pub use lookahead::{auto_lookahead, plan_trace, CachePlan, LookaheadState};
pub use store::{ShardedStore, StoreDigest};
pub use trace::{batchify, Batch, EmbeddingKey, Example, Schema, ZipfSpec};
pub use trainer::{GradientMap, StubModelConfig, SyncSplit};
