//! Criteo click-log TSV ingestion.
//!
//! Row layout: label, `num_dense` integer columns, `num_tables` hex categorical
//! columns, TAB-separated. Empty cells are allowed everywhere except the label.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{EmbeddingKey, Example, Schema};
use crate::error::{Error, Result};
use crate::hashing::fnv1a64;

/// Parses a hex token into its low 64 bits.
pub fn parse_hex_token(token: &str) -> Result<u64> {
    if token.is_empty() {
        return Err(Error::Hex(token.to_owned()));
    }
    token.chars().try_fold(0u64, |acc, c| {
        let d = c.to_digit(16).ok_or_else(|| Error::Hex(token.to_owned()))?;
        Ok((acc << 4) | u64::from(d))
    })
}

/// FNV-1a 64 over the token's 8 little-endian bytes, reduced modulo `table_rows`.
pub fn hash_categorical(token: &str, table_rows: u64) -> Result<u64> {
    let value = parse_hex_token(token)?;
    if table_rows == 0 {
        return Err(Error::Schema("table has no rows".into()));
    }
    Ok(fnv1a64(&value.to_le_bytes()) % table_rows)
}

pub struct CriteoReader<R> {
    lines: std::io::Lines<R>,
    schema: Schema,
    line_no: u64,
    failed: bool,
}

impl<R: BufRead> CriteoReader<R> {
    pub fn new(reader: R, schema: Schema) -> Self {
        Self { lines: reader.lines(), schema, line_no: 0, failed: false }
    }

    fn parse_line(&self, line: &str) -> Result<Example> {
        let cols: Vec<&str> = line.split('\t').collect();
        let expected = 1 + self.schema.num_dense + self.schema.num_tables();
        if cols.len() != expected {
            return Err(Error::Schema(format!(
                "line {}: {} columns, expected {expected}",
                self.line_no,
                cols.len()
            )));
        }
        let record = |msg: String| Error::Record { line: self.line_no, msg };

        let label = match cols[0] {
            "0" => 0,
            "1" => 1,
            other => return Err(record(format!("label {other:?} is not 0 or 1"))),
        };
        let mut dense = Vec::with_capacity(self.schema.num_dense);
        for cell in &cols[1..=self.schema.num_dense] {
            if cell.is_empty() {
                dense.push(0.0);
                continue;
            }
            let d: i64 = cell
                .parse()
                .map_err(|_| record(format!("dense value {cell:?} is not an integer")))?;
            dense.push((d.max(0) as f64).ln_1p() as f32);
        }
        let mut sparse = Vec::with_capacity(self.schema.num_tables());
        for (t, cell) in cols[1 + self.schema.num_dense..].iter().enumerate() {
            let rows = self.schema.rows_per_table[t];
            let row = if cell.is_empty() {
                0
            } else {
                hash_categorical(cell, rows).map_err(|e| record(e.to_string()))?
            };
            sparse.push(EmbeddingKey::new(t as u32, row));
        }
        Ok(Example { label, dense, sparse })
    }
}

impl<R: BufRead> Iterator for CriteoReader<R> {
    type Item = Result<Example>;

    /// Record-level problems are yielded and parsing continues; a column-count
    /// mismatch or IO failure is yielded once and ends the stream.
    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let line = match self.lines.next()? {
            Ok(l) => l,
            Err(e) => {
                self.failed = true;
                return Some(Err(e.into()));
            }
        };
        self.line_no += 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let parsed = self.parse_line(line);
        if matches!(parsed, Err(Error::Schema(_))) {
            self.failed = true;
        }
        Some(parsed)
    }
}

pub fn parse_criteo_tsv(path: impl AsRef<Path>, schema: Schema) -> Result<CriteoReader<BufReader<File>>> {
    schema.validate()?;
    let file = File::open(path)?;
    Ok(CriteoReader::new(BufReader::new(file), schema))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent FNV-1a 64 reference (byte loop over an explicit array).
    fn reference_fnv(value: u64) -> u64 {
        let bytes: [u8; 8] = [
            value as u8,
            (value >> 8) as u8,
            (value >> 16) as u8,
            (value >> 24) as u8,
            (value >> 32) as u8,
            (value >> 40) as u8,
            (value >> 48) as u8,
            (value >> 56) as u8,
        ];
        let mut h: u64 = 14695981039346656037;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    fn criteo_schema(rows: u64) -> Schema {
        Schema::uniform(26, rows, 13, 4).unwrap()
    }

    #[test]
    fn zero_token_matches_reference() {
        // FNV-1a of eight zero bytes is 0xa8c7f832281a39c5; mod 7 = 5.
        assert_eq!(reference_fnv(0), 0xa8c7_f832_281a_39c5);
        assert_eq!(hash_categorical("0", 7).unwrap(), 5);
        assert_eq!(hash_categorical("0", 7).unwrap(), reference_fnv(0) % 7);
    }

    #[test]
    fn hash_single_row_and_determinism() {
        assert_eq!(hash_categorical("68fd1e64", 1).unwrap(), 0);
        assert_eq!(
            hash_categorical("68fd1e64", 1000).unwrap(),
            hash_categorical("68fd1e64", 1000).unwrap()
        );
        assert_eq!(hash_categorical("68FD1E64", 1000).unwrap(), 706);
    }

    #[test]
    fn long_tokens_keep_low_bits() {
        assert_eq!(parse_hex_token("1ffffffffffffffff").unwrap(), u64::MAX);
        assert_eq!(hash_categorical("ffffffffffffffffff", 97).unwrap(), 27);
    }

    #[test]
    fn non_hex_is_rejected() {
        assert!(matches!(hash_categorical("xyz", 10), Err(Error::Hex(_))));
        assert!(parse_hex_token("").is_err());
    }

    fn row(label: &str, dense0: &str, cat0: &str) -> String {
        let mut cols = vec![label.to_string(), dense0.to_string()];
        cols.extend(std::iter::repeat_n(String::new(), 12));
        cols.push(cat0.to_string());
        cols.extend(std::iter::repeat_n(String::new(), 25));
        cols.join("\t")
    }

    #[test]
    fn parses_documented_row() {
        let text = row("1", "5", "68fd1e64") + "\n";
        let ex: Vec<_> = CriteoReader::new(text.as_bytes(), criteo_schema(100_000)).collect();
        let ex = ex.into_iter().next().unwrap().unwrap();
        assert_eq!(ex.label, 1);
        assert_eq!(ex.dense[0], 6f64.ln() as f32);
        assert_eq!(ex.dense[1], 0.0);
        assert_eq!(ex.sparse[0], EmbeddingKey::new(0, reference_fnv(0x68fd1e64) % 100_000));
        assert_eq!(ex.sparse[0].row, 60706);
        // empty categorical cell maps to the row-0 sentinel
        assert_eq!(ex.sparse[1], EmbeddingKey::new(1, 0));
        assert_eq!(ex.sparse[25], EmbeddingKey::new(25, 0));
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert_eq!(CriteoReader::new(&b""[..], criteo_schema(10)).count(), 0);
    }

    #[test]
    fn record_errors_carry_line_numbers_and_continue() {
        let text = format!("{}\n{}\n{}\n", row("1", "1", "a"), row("1", "x", "a"), row("0", "", "zz"));
        let out: Vec<_> = CriteoReader::new(text.as_bytes(), criteo_schema(10)).collect();
        assert_eq!(out.len(), 3);
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(Error::Record { line: 2, .. })));
        assert!(matches!(out[2], Err(Error::Record { line: 3, .. })));
    }

    #[test]
    fn wrong_column_count_is_fatal() {
        let text = format!("1\t2\t3\n{}\n", row("1", "1", "a"));
        let out: Vec<_> = CriteoReader::new(text.as_bytes(), criteo_schema(10)).collect();
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0], Err(Error::Schema(_))));
    }

    #[test]
    fn negative_dense_clamps_to_zero() {
        let text = row("0", "-2", "") + "\n";
        let ex = CriteoReader::new(text.as_bytes(), criteo_schema(10)).next().unwrap().unwrap();
        assert_eq!(ex.dense[0], 0.0);
    }
}
