//! Plan sources and write-back sinks used by the run loop, in inline and threaded form.

use std::sync::mpsc::{Receiver, Sender, SyncSender};

use crate::error::{Error, Result};
use crate::lookahead::{CachePlan, Halving, PlanStream};
use crate::store::ShardedStore;
use crate::trace::{Batch, EmbeddingKey};

pub(crate) type Rows = Vec<(EmbeddingKey, Vec<f32>)>;

pub(crate) trait PlanSource {
    fn next_plan(&mut self) -> Option<Result<CachePlan>>;
}

pub(crate) struct InlinePlans<'a> {
    pub stream: PlanStream<std::slice::Iter<'a, Batch>>,
}

impl PlanSource for InlinePlans<'_> {
    fn next_plan(&mut self) -> Option<Result<CachePlan>> {
        self.stream.next()
    }
}

impl InlinePlans<'_> {
    pub fn summary(&self) -> (Vec<Halving>, usize) {
        let s = self.stream.state();
        (s.halvings().to_vec(), s.lookahead())
    }
}

pub(crate) struct ChannelPlans {
    pub rx: Receiver<Result<CachePlan>>,
}

impl PlanSource for ChannelPlans {
    fn next_plan(&mut self) -> Option<Result<CachePlan>> {
        self.rx.recv().ok()
    }
}

/// Receives eviction write-backs. Tickets increase by one per submitted request.
pub(crate) trait FlushSink {
    fn submit(&mut self, rows: Rows) -> Result<u64>;
    /// Blocks until request `ticket` (and every earlier one) is durable.
    fn wait(&mut self, ticket: u64) -> Result<()>;
}

pub(crate) struct InlineFlusher<'s> {
    pub store: &'s ShardedStore,
    pub submitted: u64,
}

impl FlushSink for InlineFlusher<'_> {
    fn submit(&mut self, rows: Rows) -> Result<u64> {
        self.store.write_back(&rows)?;
        self.submitted += 1;
        Ok(self.submitted)
    }

    fn wait(&mut self, _ticket: u64) -> Result<()> {
        Ok(())
    }
}

pub(crate) struct ThreadedFlusher {
    pub tx: Option<SyncSender<(u64, Rows)>>,
    pub acks: Receiver<Result<u64>>,
    pub submitted: u64,
    pub acked: u64,
}

impl FlushSink for ThreadedFlusher {
    fn submit(&mut self, rows: Rows) -> Result<u64> {
        self.submitted += 1;
        let tx = self.tx.as_ref().ok_or_else(|| Error::Protocol("flusher already closed".into()))?;
        tx.send((self.submitted, rows)).map_err(|_| Error::Protocol("flusher thread exited".into()))?;
        Ok(self.submitted)
    }

    fn wait(&mut self, ticket: u64) -> Result<()> {
        while self.acked < ticket {
            let acked = self.acks.recv().map_err(|_| Error::Protocol("flusher thread exited".into()))??;
            self.acked = self.acked.max(acked);
        }
        Ok(())
    }
}

impl ThreadedFlusher {
    pub fn close(&mut self) -> Result<()> {
        self.wait(self.submitted)?;
        self.tx = None;
        Ok(())
    }
}

/// Body of the flusher thread: applies requests in order and acknowledges each.
/// The ack channel is unbounded so the flusher never blocks on a busy trainer.
pub(crate) fn flusher_loop(store: &ShardedStore, requests: Receiver<(u64, Rows)>, acks: Sender<Result<u64>>) {
    for (ticket, rows) in requests {
        let res = store.write_back(&rows).map(|()| ticket);
        let failed = res.is_err();
        if acks.send(res).is_err() || failed {
            return;
        }
    }
}
