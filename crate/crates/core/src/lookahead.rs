//! Oracle planner.
//!
//! The planner keeps a window of the next `L` batches (the current one included) and
//! remembers, for every key it tracks, the last iteration in the window that uses it.
//! Popping the front batch yields a [`CachePlan`]: keys that must be prefetched because
//! the trainer caches will not hold them, and one TTL per unique key telling the
//! caches how long the row must stay resident.
//!
//! A key stays cached across two occurrences exactly when the later one was already
//! inside the window when the earlier one was popped. Consequently a prefetch of `e`
//! for iteration `x` implies `e` occurs in no batch of `[x - L, x)`, which is what
//! makes out-of-order prefetching safe once those batches' evictions are written back.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::KeySetDigest;
use crate::trace::{Batch, EmbeddingKey};

/// Anything the planner can consume: an iteration number and its unique keys.
pub trait PlanInput {
    fn iteration(&self) -> u64;
    /// Distinct keys in first-occurrence order.
    fn unique_keys(&self) -> Vec<EmbeddingKey>;
}

impl PlanInput for Batch {
    fn iteration(&self) -> u64 {
        self.iteration
    }
    fn unique_keys(&self) -> Vec<EmbeddingKey> {
        Batch::unique_keys(self)
    }
}

impl<T: PlanInput + ?Sized> PlanInput for &T {
    fn iteration(&self) -> u64 {
        (**self).iteration()
    }
    fn unique_keys(&self) -> Vec<EmbeddingKey> {
        (**self).unique_keys()
    }
}

impl<T: PlanInput + ?Sized> PlanInput for std::sync::Arc<T> {
    fn iteration(&self) -> u64 {
        (**self).iteration()
    }
    fn unique_keys(&self) -> Vec<EmbeddingKey> {
        (**self).unique_keys()
    }
}

/// `(iteration, keys)`; keys are deduplicated in first-occurrence order.
impl PlanInput for (u64, Vec<EmbeddingKey>) {
    fn iteration(&self) -> u64 {
        self.0
    }
    fn unique_keys(&self) -> Vec<EmbeddingKey> {
        let mut seen = FxHashSet::default();
        self.1.iter().copied().filter(|k| seen.insert(*k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePlan {
    pub iteration: u64,
    /// Lookahead in force when the plan was emitted; bounds the consistency window.
    pub lookahead: usize,
    /// Keys missing from the caches, sorted by (table, row).
    pub prefetch: Vec<EmbeddingKey>,
    /// One `(key, last use)` per unique key of the batch, first-occurrence order.
    pub ttl_updates: Vec<(EmbeddingKey, u64)>,
    /// Cache entries resident while this iteration trains.
    pub occupancy: usize,
    /// Digest of the planner's cached-key mirror after this iteration's evictions.
    pub mirror: KeySetDigest,
}

impl CachePlan {
    pub fn ttl_map(&self) -> FxHashMap<EmbeddingKey, u64> {
        self.ttl_updates.iter().copied().collect()
    }
}

fn join<T>(items: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    items.into_iter().map(f).collect::<Vec<_>>().join(",")
}

/// `iter=<n> prefetch=<t:r,...> ttl=<t:r@ttl,...>`
impl fmt::Display for CachePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} prefetch={} ttl={}",
            self.iteration,
            join(&self.prefetch, |k| k.to_string()),
            join(&self.ttl_updates, |(k, t)| format!("{k}@{t}")),
        )
    }
}

/// The parts of a plan carried by the text record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanRecord {
    pub iteration: u64,
    pub prefetch: Vec<EmbeddingKey>,
    pub ttl_updates: Vec<(EmbeddingKey, u64)>,
}

impl From<&CachePlan> for PlanRecord {
    fn from(p: &CachePlan) -> Self {
        Self { iteration: p.iteration, prefetch: p.prefetch.clone(), ttl_updates: p.ttl_updates.clone() }
    }
}

impl FromStr for PlanRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed plan record {line:?}"));
        let mut parts = line.split(' ');
        let mut field = |name: &str| -> Result<&str> {
            parts.next().and_then(|p| p.strip_prefix(name)).and_then(|p| p.strip_prefix('=')).ok_or_else(bad)
        };
        let iteration = field("iter")?.parse().map_err(|_| bad())?;
        let list = |s: &str| s.split(',').filter(|t| !t.is_empty()).map(str::to_owned).collect::<Vec<_>>();
        let prefetch = list(field("prefetch")?)
            .iter()
            .map(|t| t.parse())
            .collect::<Result<Vec<EmbeddingKey>>>()?;
        let ttl_updates = list(field("ttl")?)
            .iter()
            .map(|t| {
                let (k, ttl) = t.split_once('@').ok_or_else(bad)?;
                Ok((k.parse()?, ttl.parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { iteration, prefetch, ttl_updates })
    }
}

#[derive(Clone, Debug)]
struct Pending {
    iteration: u64,
    keys: Vec<EmbeddingKey>,
}

/// Record of a lookahead reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Halving {
    /// Next iteration to be emitted when the reduction happened.
    pub before_iteration: u64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug)]
pub struct LookaheadState {
    lookahead: usize,
    capacity: usize,
    window: VecDeque<Pending>,
    /// A batch pulled from the source but held back under cache pressure.
    deferred: Option<Pending>,
    latest: FxHashMap<EmbeddingKey, u64>,
    in_cache: FxHashSet<EmbeddingKey>,
    mirror: KeySetDigest,
    next_expected: Option<u64>,
    next_emit: u64,
    halvings: Vec<Halving>,
}

impl LookaheadState {
    pub fn new(lookahead: usize, cache_capacity: usize) -> Result<Self> {
        if lookahead < 1 {
            return Err(Error::Config("lookahead must be at least 1".into()));
        }
        if cache_capacity < 1 {
            return Err(Error::Config("cache capacity must be at least 1".into()));
        }
        Ok(Self {
            lookahead,
            capacity: cache_capacity,
            window: VecDeque::new(),
            deferred: None,
            latest: FxHashMap::default(),
            in_cache: FxHashSet::default(),
            mirror: KeySetDigest::default(),
            next_expected: None,
            next_emit: 0,
            halvings: Vec::new(),
        })
    }

    pub fn lookahead(&self) -> usize {
        self.lookahead
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Lowers (or raises) the cache budget; pressure is re-evaluated on the next
    /// emission or [`adapt_on_pressure`](Self::adapt_on_pressure) call.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<()> {
        if capacity < 1 {
            return Err(Error::Config("cache capacity must be at least 1".into()));
        }
        self.capacity = capacity;
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn in_cache(&self) -> &FxHashSet<EmbeddingKey> {
        &self.in_cache
    }

    pub fn mirror(&self) -> KeySetDigest {
        self.mirror
    }

    /// Tracked keys: everything cached plus everything the window will still touch.
    /// Upper bound on cache occupancy until the window grows again.
    pub fn projected_occupancy(&self) -> usize {
        self.latest.len()
    }

    pub fn halvings(&self) -> &[Halving] {
        &self.halvings
    }

    fn halve(&mut self) {
        let from = self.lookahead;
        self.lookahead = (self.lookahead / 2).max(1);
        if self.lookahead != from {
            self.halvings.push(Halving { before_iteration: self.next_emit, from, to: self.lookahead });
        }
    }

    /// Halves the lookahead when projected occupancy exceeds capacity. Already
    /// emitted TTLs stay valid; the window simply stops refilling until it has
    /// shrunk below the new value.
    pub fn adapt_on_pressure(&mut self) {
        if self.projected_occupancy() > self.capacity {
            self.halve();
        }
    }

    fn load(&mut self, batch: Pending) {
        for k in &batch.keys {
            self.latest.insert(*k, batch.iteration);
        }
        self.window.push_back(batch);
    }

    fn refill<I: Iterator>(&mut self, source: &mut I) -> Result<()>
    where
        I::Item: PlanInput,
    {
        while self.window.len() < self.lookahead {
            let next = match self.deferred.take() {
                Some(p) => p,
                None => match source.next() {
                    Some(b) => {
                        let p = Pending { iteration: b.iteration(), keys: b.unique_keys() };
                        if let Some(expected) = self.next_expected {
                            if p.iteration != expected {
                                return Err(Error::NonConsecutive { expected, got: p.iteration });
                            }
                        } else {
                            self.next_emit = p.iteration;
                        }
                        self.next_expected = Some(p.iteration + 1);
                        p
                    }
                    None => break,
                },
            };
            if self.window.is_empty() {
                // Nothing is cached when the window is empty, so the batch alone decides.
                if next.keys.len() > self.capacity {
                    return Err(Error::CapacityBelowBatch {
                        iteration: next.iteration,
                        unique: next.keys.len(),
                        capacity: self.capacity,
                    });
                }
            } else {
                let growth = next.keys.iter().filter(|k| !self.latest.contains_key(k)).count();
                if self.latest.len() + growth > self.capacity {
                    self.deferred = Some(next);
                    while self.lookahead > self.window.len() {
                        self.halve();
                    }
                    break;
                }
            }
            self.load(next);
        }
        Ok(())
    }

    /// Refills the window, pops the front batch and plans it. `None` at end of stream.
    pub fn emit_next_plan<I: Iterator>(&mut self, source: &mut I) -> Result<Option<CachePlan>>
    where
        I::Item: PlanInput,
    {
        self.refill(source)?;
        let Some(current) = self.window.pop_front() else {
            return Ok(None);
        };
        let lookahead = self.lookahead;
        let resident_before = self.in_cache.len();
        let mut prefetch = Vec::new();
        let mut ttl_updates = Vec::with_capacity(current.keys.len());
        for &key in &current.keys {
            let ttl = self.latest[&key];
            ttl_updates.push((key, ttl));
            if self.in_cache.insert(key) {
                prefetch.push(key);
                self.mirror.insert(key);
            }
            if ttl == current.iteration {
                self.in_cache.remove(&key);
                self.mirror.remove(key);
                self.latest.remove(&key);
            }
        }
        prefetch.sort_unstable();
        self.next_emit = current.iteration + 1;
        let plan = CachePlan {
            iteration: current.iteration,
            lookahead,
            occupancy: resident_before + prefetch.len(),
            prefetch,
            ttl_updates,
            mirror: self.mirror,
        };
        self.adapt_on_pressure();
        Ok(Some(plan))
    }
}

/// Streams one plan per input batch.
pub struct PlanStream<I> {
    state: LookaheadState,
    source: I,
    failed: bool,
}

impl<I> PlanStream<I> {
    pub fn state(&self) -> &LookaheadState {
        &self.state
    }
}

impl<I: Iterator> Iterator for PlanStream<I>
where
    I::Item: PlanInput,
{
    type Item = Result<CachePlan>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.state.emit_next_plan(&mut self.source) {
            Ok(p) => p.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

pub fn plan_trace<S>(source: S, lookahead: usize, cache_capacity: usize) -> Result<PlanStream<S::IntoIter>>
where
    S: IntoIterator,
    S::Item: PlanInput,
{
    Ok(PlanStream { state: LookaheadState::new(lookahead, cache_capacity)?, source: source.into_iter(), failed: false })
}

/// Number of leading batches whose combined unique keys fit in the cache.
pub fn auto_lookahead<S>(source_prefix: S, cache_capacity: usize) -> Result<usize>
where
    S: IntoIterator,
    S::Item: PlanInput,
{
    let mut union = FxHashSet::default();
    let mut n = 0;
    for b in source_prefix {
        let keys = b.unique_keys();
        if n == 0 && keys.len() > cache_capacity {
            return Err(Error::CapacityBelowBatch { iteration: b.iteration(), unique: keys.len(), capacity: cache_capacity });
        }
        union.extend(keys);
        if union.len() > cache_capacity {
            break;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("auto_lookahead needs at least one batch"));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(row: u64) -> EmbeddingKey {
        EmbeddingKey::new(0, row)
    }

    fn batches(first: u64, rows: &[&[u64]]) -> Vec<(u64, Vec<EmbeddingKey>)> {
        rows.iter().enumerate().map(|(i, r)| (first + i as u64, r.iter().map(|&x| k(x)).collect())).collect()
    }

    fn fig5() -> Vec<(u64, Vec<EmbeddingKey>)> {
        batches(1, &[&[3, 9], &[3, 4], &[3, 6], &[1, 6]])
    }

    fn rows(keys: &[EmbeddingKey]) -> Vec<u64> {
        keys.iter().map(|k| k.row).collect()
    }

    fn ttls(p: &CachePlan) -> Vec<(u64, u64)> {
        p.ttl_updates.iter().map(|(k, t)| (k.row, *t)).collect()
    }

    #[test]
    fn new_state_validation() {
        let s = LookaheadState::new(2, 100).unwrap();
        assert_eq!((s.lookahead(), s.window_len(), s.projected_occupancy()), (2, 0, 0));
        assert!(LookaheadState::new(0, 100).is_err());
        assert!(LookaheadState::new(1, 0).is_err());
        assert!(LookaheadState::new(200, 1_000_000).unwrap().in_cache().is_empty());
    }

    #[test]
    fn worked_example_step_by_step() {
        let mut state = LookaheadState::new(2, 100).unwrap();
        let mut src = fig5().into_iter();

        let p1 = state.emit_next_plan(&mut src).unwrap().unwrap();
        assert_eq!(rows(&p1.prefetch), [3, 9]);
        assert_eq!(ttls(&p1), [(3, 2), (9, 1)]);
        assert_eq!(state.in_cache(), &FxHashSet::from_iter([k(3)]));

        let p2 = state.emit_next_plan(&mut src).unwrap().unwrap();
        assert_eq!(rows(&p2.prefetch), [4]);
        assert_eq!(ttls(&p2), [(3, 3), (4, 2)]);

        let p3 = state.emit_next_plan(&mut src).unwrap().unwrap();
        assert_eq!(rows(&p3.prefetch), [6]);
        assert_eq!(ttls(&p3), [(3, 3), (6, 4)]);
        assert_eq!(state.in_cache(), &FxHashSet::from_iter([k(6)]));

        let p4 = state.emit_next_plan(&mut src).unwrap().unwrap();
        assert_eq!(rows(&p4.prefetch), [1]);
        assert_eq!(ttls(&p4), [(1, 4), (6, 4)]);
        assert!(state.in_cache().is_empty());
        assert_eq!(state.projected_occupancy(), 0);

        assert!(state.emit_next_plan(&mut src).unwrap().is_none());
    }

    #[test]
    fn record_format_round_trip() {
        let plans: Vec<_> = plan_trace(fig5(), 2, 100).unwrap().collect::<Result<_>>().unwrap();
        let text: Vec<String> = plans.iter().map(|p| p.to_string()).collect();
        assert_eq!(text[0], "iter=1 prefetch=0:3,0:9 ttl=0:3@2,0:9@1");
        assert_eq!(text[1], "iter=2 prefetch=0:4 ttl=0:3@3,0:4@2");
        for (line, plan) in text.iter().zip(&plans) {
            assert_eq!(line.parse::<PlanRecord>().unwrap(), PlanRecord::from(plan));
        }
        let empty: PlanRecord = "iter=5 prefetch= ttl=".parse().unwrap();
        assert!(empty.prefetch.is_empty() && empty.ttl_updates.is_empty());
        assert!("iter=x prefetch= ttl=".parse::<PlanRecord>().is_err());
        assert!("iter=1 ttl= prefetch=".parse::<PlanRecord>().is_err());
    }

    #[test]
    fn disjoint_batches_never_cache() {
        let src = batches(0, &[&[1, 2], &[3], &[4, 5, 6], &[7]]);
        let mut stream = plan_trace(src.clone(), 3, 100).unwrap();
        for (it, keys) in &src {
            let p = stream.next().unwrap().unwrap();
            assert_eq!(p.prefetch, *keys);
            assert!(p.ttl_updates.iter().all(|(_, t)| t == it));
            assert!(stream.state().in_cache().is_empty());
        }
    }

    #[test]
    fn repeated_batch_prefetches_once() {
        let l = 4;
        let src: Vec<_> = (0..l as u64 + 5).map(|i| (i, vec![k(1), k(2), k(1)])).collect();
        let plans: Vec<_> = plan_trace(src, l, 100).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(plans.len(), l + 5);
        assert_eq!(rows(&plans[0].prefetch), [1, 2]);
        assert_eq!(plans[0].ttl_updates.len(), 2, "duplicates are planned once");
        assert!(plans[1..].iter().all(|p| p.prefetch.is_empty()));
    }

    #[test]
    fn non_consecutive_batches_are_rejected() {
        let src = vec![(0, vec![k(1)]), (2, vec![k(1)])];
        let out: Vec<_> = plan_trace(src, 4, 10).unwrap().collect();
        assert!(matches!(out.last(), Some(Err(Error::NonConsecutive { expected: 1, got: 2 }))));
    }

    #[test]
    fn auto_lookahead_examples() {
        let fresh: Vec<_> = (0..10u64).map(|i| (i, (0..10).map(|j| k(i * 10 + j)).collect())).collect();
        assert_eq!(auto_lookahead(fresh.clone(), 35).unwrap(), 3);
        let same: Vec<_> = (0..100u64).map(|i| (i, (0..10).map(k).collect())).collect();
        assert_eq!(auto_lookahead(same, 35).unwrap(), 100);
        assert!(matches!(auto_lookahead(fresh, 9), Err(Error::CapacityBelowBatch { .. })));
    }

    #[test]
    fn pressure_halves_to_floor_one() {
        let mut s = LookaheadState::new(200, 1_000).unwrap();
        let mut src = (0..120u64).map(|i| (i, vec![k(i)])).collect::<Vec<_>>().into_iter();
        s.emit_next_plan(&mut src).unwrap();
        // 119 keys remain tracked in the window.
        assert_eq!(s.projected_occupancy(), 119);
        s.adapt_on_pressure();
        assert_eq!(s.lookahead(), 200, "no pressure, no change");

        s.set_capacity(100).unwrap();
        s.adapt_on_pressure();
        assert_eq!(s.lookahead(), 100);
        for _ in 0..20 {
            s.adapt_on_pressure();
        }
        assert_eq!(s.lookahead(), 1);
        assert_eq!(s.halvings().len(), 7);
    }

    #[test]
    fn refill_guard_keeps_tracker_within_capacity() {
        // Each batch brings 10 new keys; capacity 35 allows at most 3 batches tracked.
        let src: Vec<_> = (0..20u64).map(|i| (i, (0..10).map(|j| k(i * 10 + j)).collect())).collect();
        let mut stream = plan_trace(src, 8, 35).unwrap();
        while let Some(p) = stream.next() {
            let p = p.unwrap();
            assert!(p.occupancy <= 35);
            assert!(stream.state().projected_occupancy() <= 35);
        }
        assert_eq!(stream.state().lookahead(), 2);
    }

    #[test]
    fn oversized_first_batch_errors() {
        let src = vec![(0u64, (0..5).map(k).collect::<Vec<_>>())];
        let out: Vec<_> = plan_trace(src, 2, 4).unwrap().collect();
        assert!(matches!(out[0], Err(Error::CapacityBelowBatch { unique: 5, .. })));
    }
}
