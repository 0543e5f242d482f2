//! Training trace model, ingestion, synthesis and access-pattern analytics.

mod analytics;
mod criteo;
mod format;
mod synth;

use std::fmt;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use analytics::{
    access_cdf, coverage_vs_batch_size, equal_segments, popularity_drift, write_cdf_csv,
    write_coverage_csv, write_drift_csv, CdfPoint, CoverageSummary, DriftSegment,
};
pub use criteo::{hash_categorical, parse_criteo_tsv, parse_hex_token, CriteoReader};
pub use format::{read_trace, read_id_lines, write_trace, TraceReader, TraceWriter, TRACE_MAGIC};
pub use synth::{generate_synthetic_trace, SyntheticTrace, ZipfSpec};

/// Shape of the embedding tables and the dense feature vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub rows_per_table: Vec<u64>,
    pub num_dense: usize,
    pub emb_dim: usize,
}

impl Schema {
    pub fn new(rows_per_table: Vec<u64>, num_dense: usize, emb_dim: usize) -> Result<Self> {
        let schema = Self { rows_per_table, num_dense, emb_dim };
        schema.validate()?;
        Ok(schema)
    }

    /// `num_tables` tables of `rows` rows each.
    pub fn uniform(num_tables: usize, rows: u64, num_dense: usize, emb_dim: usize) -> Result<Self> {
        Self::new(vec![rows; num_tables], num_dense, emb_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows_per_table.is_empty() {
            return Err(Error::Schema("at least one table is required".into()));
        }
        if let Some(t) = self.rows_per_table.iter().position(|&r| r == 0) {
            return Err(Error::Schema(format!("table {t} has no rows")));
        }
        if u32::try_from(self.rows_per_table.len()).is_err() {
            return Err(Error::Schema("too many tables".into()));
        }
        if self.emb_dim == 0 {
            return Err(Error::Schema("embedding dimension must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_tables(&self) -> usize {
        self.rows_per_table.len()
    }

    pub fn total_rows(&self) -> u64 {
        self.rows_per_table.iter().sum()
    }

    pub fn contains(&self, key: EmbeddingKey) -> bool {
        self.rows_per_table
            .get(key.table as usize)
            .is_some_and(|&rows| key.row < rows)
    }

    pub fn check_key(&self, key: EmbeddingKey) -> Result<()> {
        if self.contains(key) {
            Ok(())
        } else {
            Err(Error::OutOfSchema { key })
        }
    }

    /// Every key of the schema in canonical (table, row) order.
    pub fn keys(&self) -> impl Iterator<Item = EmbeddingKey> + '_ {
        self.rows_per_table
            .iter()
            .enumerate()
            .flat_map(|(t, &rows)| (0..rows).map(move |r| EmbeddingKey::new(t as u32, r)))
    }
}

/// One row of one embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EmbeddingKey {
    pub table: u32,
    pub row: u64,
}

impl EmbeddingKey {
    pub const fn new(table: u32, row: u64) -> Self {
        Self { table, row }
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.table, self.row)
    }
}

impl std::str::FromStr for EmbeddingKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad key {s:?}, expected <table>:<row>"));
        let (t, r) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self::new(t.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub label: u8,
    pub dense: Vec<f32>,
    /// One key per categorical feature; `sparse[i].table == i`.
    pub sparse: Vec<EmbeddingKey>,
}

impl Example {
    /// Builds an example from per-table row ids.
    pub fn from_rows(label: u8, dense: Vec<f32>, rows: &[u64]) -> Self {
        let sparse = rows
            .iter()
            .enumerate()
            .map(|(t, &r)| EmbeddingKey::new(t as u32, r))
            .collect();
        Self { label, dense, sparse }
    }

    pub fn check(&self, schema: &Schema) -> Result<()> {
        if self.sparse.len() != schema.num_tables() {
            return Err(Error::Schema(format!(
                "example has {} categorical features, schema has {} tables",
                self.sparse.len(),
                schema.num_tables()
            )));
        }
        if self.dense.len() != schema.num_dense {
            return Err(Error::Schema(format!(
                "example has {} dense features, schema has {}",
                self.dense.len(),
                schema.num_dense
            )));
        }
        for (i, k) in self.sparse.iter().enumerate() {
            if k.table as usize != i {
                return Err(Error::Schema(format!("feature {i} refers to table {}", k.table)));
            }
            schema.check_key(*k)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub iteration: u64,
    pub examples: Vec<Example>,
}

impl Batch {
    /// Distinct keys of the batch in first-occurrence order.
    pub fn unique_keys(&self) -> Vec<EmbeddingKey> {
        let mut seen = FxHashSet::default();
        self.examples
            .iter()
            .flat_map(|ex| ex.sparse.iter().copied())
            .filter(|k| seen.insert(*k))
            .collect()
    }
}

/// Groups consecutive examples into batches numbered from `first_iteration`.
pub struct Batchify<I> {
    inner: I,
    batch_size: usize,
    next_iteration: u64,
}

impl<I: Iterator<Item = Example>> Iterator for Batchify<I> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let examples: Vec<Example> = self.inner.by_ref().take(self.batch_size).collect();
        if examples.is_empty() {
            return None;
        }
        let iteration = self.next_iteration;
        self.next_iteration += 1;
        Some(Batch { iteration, examples })
    }
}

pub fn batchify<I>(stream: I, batch_size: usize) -> Result<Batchify<I::IntoIter>>
where
    I: IntoIterator<Item = Example>,
{
    batchify_from(stream, batch_size, 0)
}

pub fn batchify_from<I>(stream: I, batch_size: usize, first_iteration: u64) -> Result<Batchify<I::IntoIter>>
where
    I: IntoIterator<Item = Example>,
{
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batchify { inner: stream.into_iter(), batch_size, next_iteration: first_iteration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(row: u64) -> Example {
        Example::from_rows(0, vec![], &[row])
    }

    #[test]
    fn batchify_partial_tail() {
        let batches: Vec<_> = batchify((0..5).map(ex), 2).unwrap().collect();
        let sizes: Vec<_> = batches.iter().map(|b| b.examples.len()).collect();
        let iters: Vec<_> = batches.iter().map(|b| b.iteration).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert_eq!(iters, [0, 1, 2]);
    }

    #[test]
    fn batchify_exact_and_empty() {
        let batches: Vec<_> = batchify((0..4).map(ex), 4).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].iteration, 0);
        assert_eq!(batchify(std::iter::empty(), 3).unwrap().count(), 0);
        assert!(batchify(std::iter::empty(), 0).is_err());
    }

    #[test]
    fn unique_keys_first_occurrence_order() {
        let b = Batch { iteration: 0, examples: vec![ex(3), ex(9), ex(3), ex(1)] };
        let rows: Vec<_> = b.unique_keys().iter().map(|k| k.row).collect();
        assert_eq!(rows, [3, 9, 1]);
    }

    #[test]
    fn schema_invariants() {
        assert!(Schema::new(vec![], 0, 4).is_err());
        assert!(Schema::new(vec![3, 0], 0, 4).is_err());
        assert!(Schema::new(vec![3], 0, 0).is_err());
        let s = Schema::new(vec![2, 3], 1, 4).unwrap();
        assert_eq!(s.keys().count(), 5);
        assert!(s.contains(EmbeddingKey::new(1, 2)));
        assert!(!s.contains(EmbeddingKey::new(1, 3)));
        assert!(!s.contains(EmbeddingKey::new(2, 0)));
    }

    proptest! {
        #[test]
        fn batchify_preserves_order_and_count(n in 0usize..200, bs in 1usize..17) {
            let input: Vec<_> = (0..n as u64).map(ex).collect();
            let batches: Vec<_> = batchify(input.clone(), bs).unwrap().collect();
            for (i, b) in batches.iter().enumerate() {
                prop_assert_eq!(b.iteration, i as u64);
                prop_assert!(!b.examples.is_empty());
            }
            let flat: Vec<_> = batches.into_iter().flat_map(|b| b.examples).collect();
            prop_assert_eq!(flat, input);
        }
    }
}
