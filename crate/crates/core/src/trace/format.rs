//! Canonical binary trace format.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! header:  magic "BPTRACE1" (8 bytes)
//!          num_tables u32 | num_dense u32 | emb_dim u32
//!          rows_per_table u64 * num_tables
//! record:  label u8 | dense f32 * num_dense | row u64 * num_tables
//! ```
//!
//! Records run to end of file; a truncated record is an error.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Example, Schema};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"BPTRACE1";

pub struct TraceWriter<W: Write> {
    out: W,
    schema: Schema,
    written: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, schema: &Schema) -> Result<Self> {
        schema.validate()?;
        out.write_all(TRACE_MAGIC)?;
        out.write_all(&(schema.num_tables() as u32).to_le_bytes())?;
        out.write_all(&(schema.num_dense as u32).to_le_bytes())?;
        out.write_all(&(schema.emb_dim as u32).to_le_bytes())?;
        for rows in &schema.rows_per_table {
            out.write_all(&rows.to_le_bytes())?;
        }
        Ok(Self { out, schema: schema.clone(), written: 0 })
    }

    pub fn write(&mut self, ex: &Example) -> Result<()> {
        ex.check(&self.schema)?;
        self.out.write_all(&[ex.label])?;
        for d in &ex.dense {
            self.out.write_all(&d.to_le_bytes())?;
        }
        for k in &ex.sparse {
            self.out.write_all(&k.row.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }

    pub fn written(&self) -> u64 {
        self.written
    }
}

pub struct TraceReader<R> {
    input: R,
    schema: Schema,
    path: PathBuf,
    record: Vec<u8>,
    done: bool,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut input: R, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let bad = |msg: &str| Error::TraceFormat { path: path.clone(), msg: msg.to_owned() };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
        if &magic != TRACE_MAGIC {
            return Err(bad("bad magic"));
        }
        let num_tables = read_u32(&mut input).map_err(|_| bad("truncated header"))? as usize;
        let num_dense = read_u32(&mut input).map_err(|_| bad("truncated header"))? as usize;
        let emb_dim = read_u32(&mut input).map_err(|_| bad("truncated header"))? as usize;
        let rows = (0..num_tables)
            .map(|_| read_u64(&mut input))
            .collect::<io::Result<Vec<_>>>()
            .map_err(|_| bad("truncated header"))?;
        let schema = Schema::new(rows, num_dense, emb_dim)?;
        let record = vec![0u8; 1 + 4 * num_dense + 8 * num_tables];
        Ok(Self { input, schema, path, record, done: false })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    fn read_record(&mut self) -> Result<Option<Example>> {
        // Distinguish clean EOF (zero bytes) from a truncated record.
        let mut filled = 0;
        while filled < self.record.len() {
            match self.input.read(&mut self.record[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < self.record.len() {
            return Err(Error::TraceFormat { path: self.path.clone(), msg: "truncated record".into() });
        }
        let buf = &self.record;
        let label = buf[0];
        let mut off = 1;
        let dense = (0..self.schema.num_dense)
            .map(|_| {
                let v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
                off += 4;
                v
            })
            .collect();
        let rows: Vec<u64> = (0..self.schema.num_tables())
            .map(|_| {
                let v = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
                off += 8;
                v
            })
            .collect();
        let ex = Example::from_rows(label, dense, &rows);
        ex.check(&self.schema)?;
        Ok(Some(ex))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_record() {
            Ok(Some(ex)) => Some(Ok(ex)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Opens a trace file and returns its schema with an example stream.
pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceReader<BufReader<File>>> {
    let path = path.as_ref();
    TraceReader::new(BufReader::new(File::open(path)?), path)
}

pub fn write_trace<'a>(
    path: impl AsRef<Path>,
    schema: &Schema,
    examples: impl IntoIterator<Item = &'a Example>,
) -> Result<u64> {
    let mut w = TraceWriter::new(BufWriter::new(File::create(path)?), schema)?;
    for ex in examples {
        w.write(ex)?;
    }
    let n = w.written();
    w.finish()?;
    Ok(n)
}

/// Reads hand-written fixtures: one example per line, `<label> <row_0> ... <row_{T-1}>`
/// with decimal row ids. Blank lines and `#` comments are skipped; dense features are zero.
pub fn read_id_lines(reader: impl BufRead, schema: &Schema) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = |msg: String| Error::Record { line: i as u64 + 1, msg };
        let fields: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| record(format!("{t:?} is not an integer"))))
            .collect::<Result<_>>()?;
        if fields.len() != 1 + schema.num_tables() {
            return Err(record(format!(
                "{} fields, expected label plus {} row ids",
                fields.len(),
                schema.num_tables()
            )));
        }
        let label = u8::try_from(fields[0]).ok().filter(|l| *l <= 1).ok_or_else(|| record("label must be 0 or 1".into()))?;
        let ex = Example::from_rows(label, vec![0.0; schema.num_dense], &fields[1..]);
        ex.check(schema).map_err(|e| record(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}
