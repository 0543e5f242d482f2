//! Training engine. Drives the planner, the per-trainer caches, the stub model and
//! the store on a simulated clock, and runs the cache-free synchronous baseline
//! that every cached run must match bit for bit.

mod config;
mod pipeline;
mod report;

pub use config::{EngineConfig, Scheduler};
pub use report::{IterationEvents, IterationRecord, RunMode, RunReport, RunTotals};

use std::collections::VecDeque;
use std::sync::mpsc;
use std::thread;

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::DynamicCache;
use crate::error::{Error, Result};
use crate::lookahead::{auto_lookahead, plan_trace, CachePlan, Halving};
use crate::store::{bits_equal, init_value, ShardedStore, ValueDiff};
use crate::trace::{Batch, EmbeddingKey, Schema};
use crate::trainer::{
    apply_updates, combine_gradients, local_gradients, sgd_step, split_batch, split_sync_sets, GradientMap,
    StubModelConfig, SyncSplit,
};
use pipeline::{ChannelPlans, FlushSink, InlineFlusher, InlinePlans, PlanSource, Rows, ThreadedFlusher};

/// Mismatching rows listed by [`verify_equivalence`].
pub const DIFF_LIMIT: usize = 100;

const NOTES: &[&str] = &[
    "replicated caches: per-rank gradients are summed in rank order and every replica applies the same update",
    "sync cost is simulated from the critical and background key counts; background sync of iteration x must finish before the sync point of x+1",
    "clean evictions are dropped without a write-back",
    "warm-up covers iterations below the initial lookahead",
];

pub struct RunOutcome {
    pub report: RunReport,
    /// The store after the final flush.
    pub store: ShardedStore,
}

fn select_batches<'a>(cfg: &EngineConfig, schema: &Schema, batches: &'a [Batch]) -> Result<&'a [Batch]> {
    let batches = match cfg.iterations {
        0 => batches,
        n => &batches[..n.min(batches.len())],
    };
    if batches.is_empty() {
        return Err(Error::Empty("the trace has no batches"));
    }
    for (i, b) in batches.iter().enumerate() {
        if b.iteration != i as u64 {
            return Err(Error::NonConsecutive { expected: i as u64, got: b.iteration });
        }
        for ex in &b.examples {
            ex.check(schema)?;
        }
    }
    Ok(batches)
}

/// SHA-256 over the batch structure and every example.
pub fn trace_fingerprint(batches: &[Batch]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        h.update(b.iteration.to_le_bytes());
        h.update((b.examples.len() as u64).to_le_bytes());
        for ex in &b.examples {
            h.update([ex.label]);
            for d in &ex.dense {
                h.update(d.to_le_bytes());
            }
            for k in &ex.sparse {
                h.update(k.table.to_le_bytes());
                h.update(k.row.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn sub_batch_keys(sub: &[crate::trace::Example]) -> Vec<EmbeddingKey> {
    let mut seen = FxHashSet::default();
    sub.iter().flat_map(|ex| ex.sparse.iter().copied()).filter(|k| seen.insert(*k)).collect()
}

pub fn run_bagpipe(cfg: &EngineConfig, schema: &Schema, batches: &[Batch]) -> Result<RunOutcome> {
    cfg.validate()?;
    schema.validate()?;
    let batches = select_batches(cfg, schema, batches)?;
    let lookahead = match cfg.lookahead {
        0 => auto_lookahead(batches.iter(), cfg.cache_capacity)?,
        l => l,
    };
    let store = ShardedStore::new(schema.clone(), cfg.num_shards, cfg.seed)?;

    let (out, halvings, final_lookahead) = match cfg.scheduler {
        Scheduler::Sequential => {
            let mut plans = InlinePlans { stream: plan_trace(batches.iter(), lookahead, cfg.cache_capacity)? };
            let mut flusher = InlineFlusher { store: &store, submitted: 0 };
            let out = Driver::new(cfg, schema, batches, &store, lookahead).run(&mut plans, &mut flusher)?;
            let (halvings, l) = plans.summary();
            (out, halvings, l)
        }
        Scheduler::Concurrent => run_threaded(cfg, schema, batches, &store, lookahead)?,
    };

    let mut totals = RunReport::summarize(&out.records, cfg.num_trainers);
    totals.flushes = out.flushes;
    totals.flushes_per_rank = out.flushes_per_rank;
    totals.gate_violations = out.gate_violations;
    totals.store = store.traffic();
    let report = RunReport {
        mode: RunMode::Bagpipe,
        config: cfg.clone(),
        schema: schema.clone(),
        trace_fingerprint: trace_fingerprint(batches),
        initial_lookahead: lookahead,
        final_lookahead,
        halvings,
        iterations: out.records,
        totals,
        final_digest: Some(store.snapshot_digest().0),
        events: out.events,
        final_state: cfg.record_final_state.then(|| store.materialized().into_iter().collect()),
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    };
    Ok(RunOutcome { report, store })
}

/// Data processor, planner and flusher on their own threads, linked by bounded queues.
fn run_threaded(
    cfg: &EngineConfig,
    schema: &Schema,
    batches: &[Batch],
    store: &ShardedStore,
    lookahead: usize,
) -> Result<(DriverOutput, Vec<Halving>, usize)> {
    let capacity = cfg.cache_capacity;
    thread::scope(|s| {
        let (batch_tx, batch_rx) = mpsc::sync_channel::<&Batch>(cfg.queue_depth);
        let (plan_tx, plan_rx) = mpsc::sync_channel::<Result<CachePlan>>(cfg.queue_depth);
        let (flush_tx, flush_rx) = mpsc::sync_channel::<(u64, Rows)>(cfg.queue_depth);
        let (ack_tx, ack_rx) = mpsc::channel();

        s.spawn(move || {
            for b in batches {
                if batch_tx.send(b).is_err() {
                    break;
                }
            }
        });
        let planner = s.spawn(move || {
            let mut stream = match plan_trace(batch_rx, lookahead, capacity) {
                Ok(stream) => stream,
                Err(e) => {
                    let _ = plan_tx.send(Err(e));
                    return (Vec::new(), lookahead);
                }
            };
            for plan in stream.by_ref() {
                if plan_tx.send(plan).is_err() {
                    break;
                }
            }
            (stream.state().halvings().to_vec(), stream.state().lookahead())
        });
        s.spawn(move || pipeline::flusher_loop(store, flush_rx, ack_tx));

        let mut plans = ChannelPlans { rx: plan_rx };
        let mut flusher = ThreadedFlusher { tx: Some(flush_tx), acks: ack_rx, submitted: 0, acked: 0 };
        let result = Driver::new(cfg, schema, batches, store, lookahead)
            .run(&mut plans, &mut flusher)
            .and_then(|out| flusher.close().map(|()| out));
        drop(plans);
        drop(flusher);
        let (halvings, final_lookahead) =
            planner.join().map_err(|_| Error::Consistency("planner thread panicked".into()))?;
        Ok((result?, halvings, final_lookahead))
    })
}

struct Dispatched {
    values: Rows,
    at: f64,
    ready: f64,
}

struct Pending {
    plan: CachePlan,
    /// Time the window first reached this plan; the earliest an ungated prefetch could start.
    eligible_at: Option<f64>,
    dispatched: Option<Dispatched>,
}

struct DriverOutput {
    records: Vec<IterationRecord>,
    events: Option<Vec<IterationEvents>>,
    flushes: u64,
    flushes_per_rank: Vec<u64>,
    gate_violations: u64,
}

struct Driver<'a> {
    cfg: &'a EngineConfig,
    stub: StubModelConfig,
    batches: &'a [Batch],
    store: &'a ShardedStore,
    initial_lookahead: usize,
    caches: Vec<DynamicCache>,
    pending: VecDeque<Pending>,
    plans_done: bool,
    next_plan: u64,
    clock: f64,
    bg_done: f64,
    // Dirty evictions not yet handed to the flusher.
    buffer: Rows,
    buffer_min_ttl: Option<u64>,
    evicted_through: Option<u64>,
    // Gate for iteration j: (time its write-backs are durable, flush ticket to wait for).
    opened: Vec<(f64, u64)>,
    last_flush_done: f64,
    last_ticket: u64,
    next_flush_rank: usize,
    flushes: u64,
    flushes_per_rank: Vec<u64>,
    gate_violations: u64,
    records: Vec<IterationRecord>,
    events: Option<Vec<IterationEvents>>,
}

impl<'a> Driver<'a> {
    fn new(cfg: &'a EngineConfig, schema: &Schema, batches: &'a [Batch], store: &'a ShardedStore, lookahead: usize) -> Self {
        Self {
            cfg,
            stub: cfg.stub(),
            batches,
            store,
            initial_lookahead: lookahead,
            caches: (0..cfg.num_trainers).map(|_| DynamicCache::new(cfg.cache_capacity, schema.emb_dim)).collect(),
            pending: VecDeque::new(),
            plans_done: false,
            next_plan: 0,
            clock: 0.0,
            bg_done: 0.0,
            buffer: Vec::new(),
            buffer_min_ttl: None,
            evicted_through: None,
            opened: Vec::new(),
            last_flush_done: 0.0,
            last_ticket: 0,
            next_flush_rank: 0,
            flushes: 0,
            flushes_per_rank: vec![0; cfg.num_trainers],
            gate_violations: 0,
            records: Vec::with_capacity(batches.len()),
            events: cfg.record_events.then(Vec::new),
        }
    }

    fn concurrent(&self) -> bool {
        self.cfg.scheduler == Scheduler::Concurrent
    }

    fn in_window(plan: &CachePlan, c: u64) -> bool {
        plan.iteration < c + plan.lookahead as u64
    }

    /// Last iteration whose write-backs must be durable before `plan` may prefetch.
    fn gate_iteration(plan: &CachePlan) -> Option<u64> {
        plan.iteration.checked_sub(plan.lookahead as u64)
    }

    fn gate(&self, plan: &CachePlan) -> Option<(f64, u64)> {
        match Self::gate_iteration(plan) {
            None => Some((0.0, 0)),
            Some(j) => self.opened.get(j as usize).copied(),
        }
    }

    /// Independent check of the gate: is any write-back with ttl <= j still missing?
    fn gate_violated(&self, plan: &CachePlan) -> bool {
        let Some(j) = Self::gate_iteration(plan) else { return false };
        self.evicted_through.is_none_or(|e| e < j) || self.buffer_min_ttl.is_some_and(|t| t <= j)
    }

    fn pull_plans(&mut self, plans: &mut dyn PlanSource, c: u64) -> Result<()> {
        while !self.plans_done && self.pending.back().is_none_or(|p| Self::in_window(&p.plan, c)) {
            match plans.next_plan() {
                None => self.plans_done = true,
                Some(plan) => {
                    let plan = plan?;
                    if plan.iteration != self.next_plan {
                        return Err(Error::NonConsecutive { expected: self.next_plan, got: plan.iteration });
                    }
                    self.next_plan += 1;
                    self.pending.push_back(Pending { plan, eligible_at: None, dispatched: None });
                }
            }
        }
        Ok(())
    }

    /// Dispatches, in order, every undispatched plan in the window whose gate is open.
    fn dispatch_ready(&mut self, flusher: &mut dyn FlushSink, c: u64, now: f64) -> Result<()> {
        for i in 0..self.pending.len() {
            let p = &mut self.pending[i];
            if !Self::in_window(&p.plan, c) {
                break;
            }
            p.eligible_at.get_or_insert(now);
            if p.dispatched.is_none() && !self.dispatch(i, flusher, now)? {
                break;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, i: usize, flusher: &mut dyn FlushSink, now: f64) -> Result<bool> {
        let plan = &self.pending[i].plan;
        let violated = self.gate_violated(plan);
        let (gate_time, ticket) = match self.gate(plan) {
            Some(g) => g,
            None if self.cfg.disable_gate => (now, 0),
            None => return Ok(false),
        };
        if violated {
            if !self.cfg.disable_gate {
                return Err(Error::Consistency(format!(
                    "prefetch for iteration {} would read rows with unflushed write-backs",
                    plan.iteration
                )));
            }
            self.gate_violations += 1;
        }
        flusher.wait(ticket)?;
        let at = now.max(gate_time);
        let (values, ready) = if plan.prefetch.is_empty() {
            (Vec::new(), at)
        } else {
            let fetched = self.store.fetch(&plan.prefetch)?;
            (plan.prefetch.iter().copied().zip(fetched).collect(), at + self.cfg.fetch_latency)
        };
        self.pending[i].dispatched = Some(Dispatched { values, at, ready });
        Ok(true)
    }

    fn submit(&mut self, flusher: &mut dyn FlushSink, rows: Rows, now: f64) -> Result<()> {
        self.last_ticket = flusher.submit(rows)?;
        self.last_flush_done = now + self.cfg.fetch_latency;
        self.flushes += 1;
        self.flushes_per_rank[self.next_flush_rank] += 1;
        self.next_flush_rank = (self.next_flush_rank + 1) % self.cfg.num_trainers;
        Ok(())
    }

    /// Sends the buffered write-backs from the next rank in turn. Returns the rows sent.
    fn flush(&mut self, flusher: &mut dyn FlushSink, now: f64) -> Result<usize> {
        let n = self.buffer.len();
        if n > 0 {
            let rows = std::mem::take(&mut self.buffer);
            self.buffer_min_ttl = None;
            self.submit(flusher, rows, now)?;
        }
        self.open_gates(now);
        Ok(n)
    }

    /// Opens the gates of every evicted iteration once nothing is buffered.
    fn open_gates(&mut self, now: f64) {
        if !self.buffer.is_empty() {
            return;
        }
        let Some(through) = self.evicted_through else { return };
        let entry = (now.max(self.last_flush_done), self.last_ticket);
        while self.opened.len() as u64 <= through {
            self.opened.push(entry);
        }
    }

    fn run(mut self, plans: &mut dyn PlanSource, flusher: &mut dyn FlushSink) -> Result<DriverOutput> {
        for c in 0..self.batches.len() as u64 {
            self.iteration(c, plans, flusher)?;
        }
        self.pull_plans(plans, self.batches.len() as u64)?;
        if let Some(extra) = self.pending.front() {
            return Err(Error::Consistency(format!("planner emitted a plan for iteration {} past the trace", extra.plan.iteration)));
        }

        // Final flush: buffered evictions, then whatever is still cached.
        let now = self.clock;
        self.flush(flusher, now)?;
        let mut drained: Vec<_> = self.caches.iter_mut().map(|c| c.drain()).collect();
        let rows: Rows = drained.swap_remove(0).into_iter().filter(|e| e.dirty).map(|e| (e.key, e.value)).collect();
        if !rows.is_empty() {
            self.submit(flusher, rows, now)?;
        }
        flusher.wait(self.last_ticket)?;

        Ok(DriverOutput {
            records: self.records,
            events: self.events,
            flushes: self.flushes,
            flushes_per_rank: self.flushes_per_rank,
            gate_violations: self.gate_violations,
        })
    }

    fn iteration(&mut self, c: u64, plans: &mut dyn PlanSource, flusher: &mut dyn FlushSink) -> Result<()> {
        let cfg = self.cfg;
        let start = self.clock;
        self.pull_plans(plans, c)?;
        self.dispatch_ready(flusher, c, start)?;

        let front = self
            .pending
            .front()
            .ok_or_else(|| Error::Consistency(format!("no plan for iteration {c}")))?;
        if front.plan.iteration != c {
            return Err(Error::NonConsecutive { expected: c, got: front.plan.iteration });
        }
        let mut flushed = 0;
        let forced_flush = front.dispatched.is_none();
        if forced_flush {
            flushed += self.flush(flusher, start)?;
            if !self.dispatch(0, flusher, start)? {
                return Err(Error::Consistency(format!("gate for iteration {c} still closed after a full flush")));
            }
            self.dispatch_ready(flusher, c, start)?;
        }
        let Pending { plan, eligible_at, dispatched } = self.pending.pop_front().expect("front checked above");
        let Dispatched { values, at, ready } = dispatched.expect("dispatched above");

        // Stalls: the part an ungated fetch would also have paid is blocked-on-prefetch,
        // anything beyond it waited on write-backs.
        let (blocked_on_eviction, blocked_on_prefetch) = if plan.prefetch.is_empty() {
            (0.0, 0.0)
        } else {
            let total = (ready - start).max(0.0);
            let ungated = (eligible_at.unwrap_or(start) + cfg.fetch_latency - start).clamp(0.0, total);
            debug_assert!(at >= eligible_at.unwrap_or(start));
            (total - ungated, ungated)
        };
        let t0 = start + blocked_on_eviction + blocked_on_prefetch;

        // (2) every replica applies the plan.
        let ttls = plan.ttl_map();
        let last = self.caches.len() - 1;
        let mut values = Some(values);
        for (r, cache) in self.caches.iter_mut().enumerate() {
            let v = if r == last { values.take().expect("last replica") } else { values.clone().expect("values") };
            cache.apply_prefetch(v, &ttls)?;
            cache.apply_ttl_updates(&plan.ttl_updates)?;
        }
        let occupancy = self.caches[0].len();
        if occupancy != plan.occupancy {
            return Err(Error::Consistency(format!(
                "iteration {c}: cache holds {occupancy} entries, plan expected {}",
                plan.occupancy
            )));
        }

        // (3) local gradients, rank-order combine, identical update everywhere.
        let batch = &self.batches[c as usize];
        let parts = split_batch(&batch.examples, cfg.num_trainers);
        let stub = self.stub;
        let caches = &self.caches;
        let local = |r: usize| -> Result<GradientMap> {
            let keys = sub_batch_keys(parts[r]);
            let values = caches[r].lookup_batch(&keys, c)?;
            let lookup: FxHashMap<EmbeddingKey, &[f32]> = keys.into_iter().zip(values).collect();
            local_gradients(parts[r], |k| lookup.get(k).copied(), &stub)
        };
        let per_rank: Vec<GradientMap> = if self.concurrent() {
            (0..cfg.num_trainers).into_par_iter().map(local).collect::<Result<_>>()?
        } else {
            (0..cfg.num_trainers).map(local).collect::<Result<_>>()?
        };
        let combined = combine_gradients(&per_rank);
        let mut updated_per_rank: Vec<Vec<EmbeddingKey>> = if self.concurrent() {
            self.caches.par_iter_mut().map(|cache| apply_updates(cache, &combined, &stub)).collect::<Result<_>>()?
        } else {
            self.caches.iter_mut().map(|cache| apply_updates(cache, &combined, &stub)).collect::<Result<_>>()?
        };
        let updated = updated_per_rank.swap_remove(0);
        if updated_per_rank.iter().any(|u| *u != updated) {
            return Err(Error::Consistency(format!("iteration {c}: replicas disagree on the updated set")));
        }

        // (4) split synchronisation.
        let split = if cfg.split_sync {
            let next: FxHashSet<EmbeddingKey> =
                self.batches.get(c as usize + 1).map(|b| b.unique_keys().into_iter().collect()).unwrap_or_default();
            split_sync_sets(&updated, &next)
        } else {
            SyncSplit { critical: updated.clone(), background: Vec::new() }
        };
        let mut parts: Vec<EmbeddingKey> = split.critical.iter().chain(&split.background).copied().collect();
        parts.sort_unstable();
        if parts != updated {
            return Err(Error::Consistency(format!("iteration {c}: sync sets do not partition the updated set")));
        }
        let compute_end = t0 + cfg.compute_latency;
        let sync_point_wait = (self.bg_done - compute_end).max(0.0);
        let critical_sync = split.critical.len() as f64 / cfg.sync_bandwidth;
        let background_sync = split.background.len() as f64 / cfg.sync_bandwidth;
        let end = compute_end + sync_point_wait + critical_sync;
        self.bg_done = end + background_sync;

        // (5) maintenance.
        let mut evicted_per_rank: Vec<_> = self.caches.iter_mut().map(|cache| cache.evict_expired(c)).collect();
        let content = self.caches[0].content_digest();
        if self.caches.iter().any(|cache| cache.content_digest() != content) {
            return Err(Error::Consistency(format!("iteration {c}: replica caches diverged")));
        }
        if self.caches[0].key_digest() != plan.mirror {
            return Err(Error::Consistency(format!("iteration {c}: cache keys diverged from the planner mirror")));
        }
        let evicted = evicted_per_rank.swap_remove(0);
        let evicted_count = evicted.len();
        let evicted_keys: Option<Vec<EmbeddingKey>> = self.events.is_some().then(|| evicted.iter().map(|e| e.key).collect());
        for e in evicted {
            if e.dirty {
                self.buffer_min_ttl = Some(self.buffer_min_ttl.map_or(e.ttl, |t| t.min(e.ttl)));
                self.buffer.push((e.key, e.value));
            }
        }
        self.evicted_through = Some(c);
        if (c + 1).is_multiple_of(cfg.flush_interval(plan.lookahead) as u64) {
            flushed += self.flush(flusher, end)?;
        }
        self.open_gates(end);
        self.clock = end;

        self.records.push(IterationRecord {
            iteration: c,
            lookahead: plan.lookahead,
            warmup: c < self.initial_lookahead as u64,
            start,
            blocked_on_eviction,
            blocked_on_prefetch,
            compute: cfg.compute_latency,
            sync_point_wait,
            critical_sync,
            background_sync,
            end,
            occupancy,
            resident_after: self.caches[0].len(),
            prefetched: plan.prefetch.len(),
            evicted: evicted_count,
            churn: plan.prefetch.len() + evicted_count,
            updated: updated.len(),
            critical: split.critical.len(),
            background: split.background.len(),
            flushed,
            forced_flush,
        });
        if let (Some(events), Some(evicted)) = (self.events.as_mut(), evicted_keys) {
            events.push(IterationEvents { iteration: c, prefetched: plan.prefetch, ttl_updates: plan.ttl_updates, evicted });
        }
        Ok(())
    }
}

/// Fetch, train, write back; no cache and no pipeline.
pub fn run_synchronous_baseline(cfg: &EngineConfig, schema: &Schema, batches: &[Batch]) -> Result<RunOutcome> {
    cfg.validate()?;
    schema.validate()?;
    let batches = select_batches(cfg, schema, batches)?;
    let store = ShardedStore::new(schema.clone(), cfg.num_shards, cfg.seed)?;
    let stub = cfg.stub();
    let mut clock = 0.0;
    let mut records = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut keys = batch.unique_keys();
        keys.sort_unstable();
        let fetched = store.fetch(&keys)?;
        let mut values: FxHashMap<EmbeddingKey, Vec<f32>> = keys.iter().copied().zip(fetched).collect();
        let per_rank = split_batch(&batch.examples, cfg.num_trainers)
            .into_iter()
            .map(|sub| local_gradients(sub, |k| values.get(k).map(Vec::as_slice), &stub))
            .collect::<Result<Vec<_>>>()?;
        let combined = combine_gradients(&per_rank);
        let mut changed = Rows::new();
        for (k, g) in &combined {
            let v = values.get_mut(k).expect("fetched above");
            if sgd_step(v, g, stub.lr) {
                changed.push((*k, v.clone()));
            }
        }
        if !changed.is_empty() {
            store.write_back(&changed)?;
        }

        let start = clock;
        let critical_sync = changed.len() as f64 / cfg.sync_bandwidth;
        let write_back = if changed.is_empty() { 0.0 } else { cfg.fetch_latency };
        let end = start + cfg.fetch_latency + cfg.compute_latency + critical_sync + write_back;
        clock = end;
        records.push(IterationRecord {
            iteration: batch.iteration,
            lookahead: 0,
            warmup: false,
            start,
            blocked_on_eviction: write_back,
            blocked_on_prefetch: cfg.fetch_latency,
            compute: cfg.compute_latency,
            sync_point_wait: 0.0,
            critical_sync,
            background_sync: 0.0,
            end,
            occupancy: keys.len(),
            resident_after: 0,
            prefetched: keys.len(),
            evicted: keys.len(),
            churn: 2 * keys.len(),
            updated: changed.len(),
            critical: changed.len(),
            background: 0,
            flushed: changed.len(),
            forced_flush: false,
        });
    }
    let mut totals = RunReport::summarize(&records, cfg.num_trainers);
    totals.store = store.traffic();
    let report = RunReport {
        mode: RunMode::Baseline,
        config: cfg.clone(),
        schema: schema.clone(),
        trace_fingerprint: trace_fingerprint(batches),
        initial_lookahead: 0,
        final_lookahead: 0,
        halvings: Vec::new(),
        iterations: records,
        totals,
        final_digest: Some(store.snapshot_digest().0),
        events: None,
        final_state: cfg.record_final_state.then(|| store.materialized().into_iter().collect()),
        notes: vec![NOTES[0].to_string()],
    };
    Ok(RunOutcome { report, store })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Equivalence {
    Equal {
        digest: String,
    },
    Different {
        left: String,
        right: String,
        /// Number of differing rows, when both reports carry their final state.
        differing: Option<usize>,
        /// The first [`DIFF_LIMIT`] differing rows in key order.
        diffs: Vec<ValueDiff>,
    },
}

impl Equivalence {
    pub fn is_equal(&self) -> bool {
        matches!(self, Equivalence::Equal { .. })
    }
}

/// Compares the final store digests of two completed runs of the same training problem.
pub fn verify_equivalence(a: &RunReport, b: &RunReport) -> Result<Equivalence> {
    let mismatch = |what: &str| Err(Error::Incomparable(format!("runs differ in {what}")));
    if a.trace_fingerprint != b.trace_fingerprint {
        return mismatch("trace");
    }
    if a.schema != b.schema {
        return mismatch("schema");
    }
    if a.config.seed != b.config.seed {
        return mismatch("seed");
    }
    if a.config.stub() != b.config.stub() {
        return mismatch("stub model coefficients");
    }
    if a.config.num_trainers != b.config.num_trainers {
        return mismatch("number of trainers");
    }
    let (Some(left), Some(right)) = (&a.final_digest, &b.final_digest) else {
        return Err(Error::Incomparable("a run did not complete".into()));
    };
    if left == right {
        return Ok(Equivalence::Equal { digest: left.clone() });
    }
    let (differing, diffs) = match (&a.final_state, &b.final_state) {
        (Some(l), Some(r)) => {
            let all = diff_states(l, r, a.config.seed, a.schema.emb_dim);
            (Some(all.len()), all.into_iter().take(DIFF_LIMIT).collect())
        }
        _ => (None, Vec::new()),
    };
    Ok(Equivalence::Different { left: left.clone(), right: right.clone(), differing, diffs })
}

/// Rows absent from one side read as their initial value.
fn diff_states(
    left: &[(EmbeddingKey, Vec<f32>)],
    right: &[(EmbeddingKey, Vec<f32>)],
    seed: u64,
    emb_dim: usize,
) -> Vec<ValueDiff> {
    let l: FxHashMap<_, _> = left.iter().map(|(k, v)| (*k, v)).collect();
    let r: FxHashMap<_, _> = right.iter().map(|(k, v)| (*k, v)).collect();
    let mut keys: Vec<EmbeddingKey> = l.keys().chain(r.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .filter_map(|k| {
            let lv = l.get(&k).map_or_else(|| init_value(seed, k, emb_dim), |v| v.to_vec());
            let rv = r.get(&k).map_or_else(|| init_value(seed, k, emb_dim), |v| v.to_vec());
            (!bits_equal(&lv, &rv)).then_some(ValueDiff { key: k, left: lv, right: rv })
        })
        .collect()
}
