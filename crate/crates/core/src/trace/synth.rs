use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{EmbeddingKey, Example, Schema};
use crate::error::{Error, Result};
use crate::hashing::splitmix64;

/// Parameters of a synthetic skewed trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfSpec {
    pub schema: Schema,
    pub exponent: f64,
    pub num_examples: u64,
    pub seed: u64,
}

impl ZipfSpec {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::Config(format!("zipf exponent must be positive, got {}", self.exponent)));
        }
        Ok(())
    }
}

/// Maps popularity rank to row id: `(a * rank + b) mod rows` with `gcd(a, rows) == 1`,
/// so each table gets its own hot rows without materialising a permutation.
#[derive(Clone, Copy, Debug)]
struct RowPermutation {
    a: u64,
    b: u64,
    rows: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl RowPermutation {
    fn draw(rows: u64, rng: &mut impl Rng) -> Self {
        if rows == 1 {
            return Self { a: 1, b: 0, rows };
        }
        let a = loop {
            let a = rng.random_range(1..rows);
            if gcd(a, rows) == 1 {
                break a;
            }
        };
        Self { a, b: rng.random_range(0..rows), rows }
    }

    fn apply(&self, rank: u64) -> u64 {
        ((u128::from(self.a) * u128::from(rank) + u128::from(self.b)) % u128::from(self.rows)) as u64
    }
}

struct TableSampler {
    zipf: Zipf<f64>,
    perm: RowPermutation,
    rows: u64,
}

pub struct SyntheticTrace {
    spec: ZipfSpec,
    tables: Vec<TableSampler>,
    rng: ChaCha8Rng,
    index: u64,
}

impl SyntheticTrace {
    pub fn schema(&self) -> &Schema {
        &self.spec.schema
    }

    /// Row at popularity rank `rank` (0 = hottest) of `table`.
    pub fn row_at_rank(&self, table: usize, rank: u64) -> u64 {
        self.tables[table].perm.apply(rank)
    }
}

pub fn generate_synthetic_trace(spec: &ZipfSpec) -> Result<SyntheticTrace> {
    spec.validate()?;
    let tables = spec
        .schema
        .rows_per_table
        .iter()
        .enumerate()
        .map(|(t, &rows)| {
            let mut perm_rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ splitmix64(t as u64 + 1)));
            let zipf = Zipf::new(rows as f64, spec.exponent)
                .map_err(|e| Error::Config(format!("zipf table {t}: {e}")))?;
            Ok(TableSampler { zipf, perm: RowPermutation::draw(rows, &mut perm_rng), rows })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticTrace {
        spec: spec.clone(),
        tables,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        index: 0,
    })
}

impl Iterator for SyntheticTrace {
    type Item = Example;

    fn next(&mut self) -> Option<Example> {
        if self.index >= self.spec.num_examples {
            return None;
        }
        let idx = self.index;
        self.index += 1;
        let seed = self.spec.seed;
        let label = ((idx + seed) & 1) as u8;
        let dense = (0..self.spec.schema.num_dense as u64)
            .map(|j| {
                let h = splitmix64(seed ^ splitmix64(idx.wrapping_mul(1 << 16).wrapping_add(j)));
                (h >> 40) as f32 / (1u32 << 24) as f32 * 4.0
            })
            .collect();
        let sparse = self
            .tables
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let rank = (s.zipf.sample(&mut self.rng) as u64).clamp(1, s.rows) - 1;
                EmbeddingKey::new(t as u32, s.perm.apply(rank))
            })
            .collect();
        Some(Example { label, dense, sparse })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.spec.num_examples - self.index) as usize;
        (left, Some(left))
    }
}
