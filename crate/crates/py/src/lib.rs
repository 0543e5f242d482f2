//! Python bindings: traces, analytics, the planner and simulated runs.
//!
//! Keys cross the boundary as `(table, row)` tuples. Engine configurations and run
//! reports cross as JSON strings with the same layout the command-line tool uses.

use std::fs::File;
use std::io::BufReader;

use bagpipe_core::trace::{
    access_cdf, coverage_vs_batch_size, equal_segments, generate_synthetic_trace, parse_criteo_tsv, popularity_drift,
    read_id_lines, read_trace, write_trace,
};
use bagpipe_core::{
    batchify, plan_trace, run_bagpipe, run_synchronous_baseline, verify_equivalence, EngineConfig, Error, Example,
    RunReport, Schema, ZipfSpec,
};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Key = (u32, u64);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::CacheMiss { .. }
        | Error::CacheOverflow { .. }
        | Error::DuplicateInsert { .. }
        | Error::NotCached { .. }
        | Error::StaleTtl { .. }
        | Error::Consistency(_)
        | Error::Protocol(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Row of a hexadecimal categorical token in a table of `rows` rows.
#[pyfunction]
fn hash_categorical(token: &str, rows: u64) -> PyResult<u64> {
    bagpipe_core::trace::hash_categorical(token, rows).map_err(to_py)
}

/// An in-memory trace: a schema and its examples in order.
#[pyclass(module = "bagpipe", frozen)]
struct Trace {
    schema: Schema,
    examples: Vec<Example>,
}

fn schema(rows_per_table: Vec<u64>, num_dense: usize, emb_dim: usize) -> PyResult<Schema> {
    Schema::new(rows_per_table, num_dense, emb_dim).map_err(to_py)
}

fn plan_dict<'py>(py: Python<'py>, plan: &bagpipe_core::CachePlan) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", plan.iteration)?;
    d.set_item("lookahead", plan.lookahead)?;
    d.set_item("prefetch", plan.prefetch.iter().map(|k| (k.table, k.row)).collect::<Vec<Key>>())?;
    d.set_item(
        "ttl_updates",
        plan.ttl_updates.iter().map(|(k, t)| ((k.table, k.row), *t)).collect::<Vec<(Key, u64)>>(),
    )?;
    d.set_item("occupancy", plan.occupancy)?;
    d.set_item("text", plan.to_string())?;
    Ok(d)
}

#[pymethods]
impl Trace {
    /// Synthetic trace with Zipf-distributed rows in every table.
    #[staticmethod]
    #[pyo3(signature = (rows_per_table, exponent, num_examples, seed=0, num_dense=0, emb_dim=8))]
    fn zipf(
        py: Python<'_>,
        rows_per_table: Vec<u64>,
        exponent: f64,
        num_examples: u64,
        seed: u64,
        num_dense: usize,
        emb_dim: usize,
    ) -> PyResult<Self> {
        let schema = schema(rows_per_table, num_dense, emb_dim)?;
        let spec = ZipfSpec { schema: schema.clone(), exponent, num_examples, seed };
        let examples = py.detach(|| generate_synthetic_trace(&spec).map(|t| t.collect())).map_err(to_py)?;
        Ok(Self { schema, examples })
    }

    /// Examples given as `(label, [row per table])`.
    #[staticmethod]
    #[pyo3(signature = (rows_per_table, examples, emb_dim=8))]
    fn from_rows(rows_per_table: Vec<u64>, examples: Vec<(u8, Vec<u64>)>, emb_dim: usize) -> PyResult<Self> {
        let schema = schema(rows_per_table, 0, emb_dim)?;
        let examples: Vec<Example> = examples.into_iter().map(|(label, rows)| Example::from_rows(label, vec![], &rows)).collect();
        for ex in &examples {
            ex.check(&schema).map_err(to_py)?;
        }
        Ok(Self { schema, examples })
    }

    /// Reads a trace file written by `save` or the command-line tool.
    #[staticmethod]
    fn load(py: Python<'_>, path: &str) -> PyResult<Self> {
        py.detach(|| {
            let reader = read_trace(path)?;
            let schema = reader.schema().clone();
            Ok(Self { schema, examples: reader.collect::<Result<_, _>>()? })
        })
        .map_err(to_py)
    }

    /// Text file with one `<label> <row>...` example per line.
    #[staticmethod]
    #[pyo3(signature = (path, rows_per_table, emb_dim=8))]
    fn load_ids(path: &str, rows_per_table: Vec<u64>, emb_dim: usize) -> PyResult<Self> {
        let schema = schema(rows_per_table, 0, emb_dim)?;
        let file = File::open(path).map_err(|e| to_py(e.into()))?;
        let examples = read_id_lines(BufReader::new(file), &schema).map_err(to_py)?;
        Ok(Self { schema, examples })
    }

    /// Criteo-format TSV. Malformed records are skipped; returns the trace and the skip count.
    #[staticmethod]
    #[pyo3(signature = (path, rows_per_table, num_dense=13, emb_dim=8, limit=None))]
    fn load_criteo(
        py: Python<'_>,
        path: &str,
        rows_per_table: Vec<u64>,
        num_dense: usize,
        emb_dim: usize,
        limit: Option<usize>,
    ) -> PyResult<(Self, u64)> {
        let schema = schema(rows_per_table, num_dense, emb_dim)?;
        py.detach(|| {
            let mut examples = Vec::new();
            let mut skipped = 0;
            for item in parse_criteo_tsv(path, schema.clone())? {
                if examples.len() == limit.unwrap_or(usize::MAX) {
                    break;
                }
                match item {
                    Ok(ex) => examples.push(ex),
                    Err(Error::Record { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((Self { schema, examples }, skipped))
        })
        .map_err(to_py)
    }

    /// Writes the trace file; returns the number of examples written.
    fn save(&self, path: &str) -> PyResult<u64> {
        write_trace(path, &self.schema, &self.examples).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.examples.len()
    }

    fn __repr__(&self) -> String {
        format!("Trace({} examples, {} tables, dim {})", self.examples.len(), self.schema.num_tables(), self.schema.emb_dim)
    }

    #[getter]
    fn rows_per_table(&self) -> Vec<u64> {
        self.schema.rows_per_table.clone()
    }

    #[getter]
    fn emb_dim(&self) -> usize {
        self.schema.emb_dim
    }

    /// `(label, dense, keys)` of one example.
    fn example(&self, index: usize) -> PyResult<(u8, Vec<f32>, Vec<Key>)> {
        let ex = self.examples.get(index).ok_or_else(|| PyValueError::new_err(format!("no example {index}")))?;
        Ok((ex.label, ex.dense.clone(), ex.sparse.iter().map(|k| (k.table, k.row)).collect()))
    }

    /// `(embedding_fraction, access_fraction, keys, accesses)` per popularity rank.
    fn access_cdf(&self) -> PyResult<Vec<(f64, f64, u64, u64)>> {
        let points = access_cdf(&self.examples).map_err(to_py)?;
        Ok(points.into_iter().map(|p| (p.embedding_fraction, p.access_fraction, p.keys, p.accesses)).collect())
    }

    /// Coverage of equal segments by the popular set of the first; one dict per segment.
    #[pyo3(signature = (top_fraction=0.001, segments=10))]
    fn drift<'py>(&self, py: Python<'py>, top_fraction: f64, segments: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let bounds = equal_segments(self.examples.len() as u64, segments);
        let rows = popularity_drift(&self.examples, &bounds, top_fraction).map_err(to_py)?;
        rows.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("segment", r.segment)?;
                d.set_item("start", r.start)?;
                d.set_item("end", r.end)?;
                d.set_item("accesses", r.accesses)?;
                d.set_item("top_hits", r.top_hits)?;
                d.set_item("coverage", r.coverage)?;
                Ok(d)
            })
            .collect()
    }

    /// Per-batch share of unique keys that are popular, summarised.
    #[pyo3(signature = (batch_size, top_fraction=0.001))]
    fn coverage<'py>(&self, py: Python<'py>, batch_size: usize, top_fraction: f64) -> PyResult<Bound<'py, PyDict>> {
        let c = coverage_vs_batch_size(&self.examples, batch_size, top_fraction).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("batch_size", c.batch_size)?;
        d.set_item("top_fraction", c.top_fraction)?;
        d.set_item("batches", c.batches)?;
        for (name, v) in [("min", c.min), ("q1", c.q1), ("median", c.median), ("q3", c.q3), ("max", c.max), ("mean", c.mean)] {
            d.set_item(name, v)?;
        }
        Ok(d)
    }

    /// One plan dict per batch.
    #[pyo3(signature = (lookahead, capacity, batch_size, first_iteration=0))]
    fn plans<'py>(
        &self,
        py: Python<'py>,
        lookahead: usize,
        capacity: usize,
        batch_size: usize,
        first_iteration: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let batches = bagpipe_core::trace::batchify_from(self.examples.iter().cloned(), batch_size, first_iteration).map_err(to_py)?;
        let plans: Vec<_> = plan_trace(batches, lookahead, capacity).and_then(|p| p.collect()).map_err(to_py)?;
        plans.iter().map(|p| plan_dict(py, p)).collect()
    }

    /// Simulated training run; returns the report as JSON.
    #[pyo3(signature = (config_json, baseline=false))]
    fn run(&self, py: Python<'_>, config_json: &str, baseline: bool) -> PyResult<String> {
        let cfg: EngineConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        py.detach(|| {
            cfg.validate()?;
            let limit = if cfg.iterations > 0 { cfg.iterations * cfg.batch_size } else { usize::MAX };
            let batches: Vec<_> = batchify(self.examples.iter().take(limit).cloned(), cfg.batch_size)?.collect();
            let outcome = if baseline {
                run_synchronous_baseline(&cfg, &self.schema, &batches)?
            } else {
                run_bagpipe(&cfg, &self.schema, &batches)?
            };
            outcome.report.to_json()
        })
        .map_err(to_py)
    }
}

/// Plans for explicit batches of `(table, row)` keys, numbered from `first_iteration`.
#[pyfunction]
#[pyo3(signature = (batches, lookahead, capacity, first_iteration=0))]
fn plan<'py>(
    py: Python<'py>,
    batches: Vec<Vec<Key>>,
    lookahead: usize,
    capacity: usize,
    first_iteration: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let input: Vec<(u64, Vec<bagpipe_core::EmbeddingKey>)> = batches
        .into_iter()
        .enumerate()
        .map(|(i, keys)| {
            let mut seen = std::collections::HashSet::new();
            let keys = keys.into_iter().map(|(t, r)| bagpipe_core::EmbeddingKey::new(t, r)).filter(|k| seen.insert(*k)).collect();
            (first_iteration + i as u64, keys)
        })
        .collect();
    let plans: Vec<_> = plan_trace(input, lookahead, capacity).and_then(|p| p.collect()).map_err(to_py)?;
    plans.iter().map(|p| plan_dict(py, p)).collect()
}

/// Default engine configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string(&EngineConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Compares two run reports (JSON); returns the comparison as JSON with a `result` field.
#[pyfunction]
fn verify(a_json: &str, b_json: &str) -> PyResult<String> {
    let a = RunReport::from_json(a_json).map_err(to_py)?;
    let b = RunReport::from_json(b_json).map_err(to_py)?;
    let eq = verify_equivalence(&a, &b).map_err(to_py)?;
    serde_json::to_string(&eq).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn bagpipe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trace>()?;
    m.add_function(wrap_pyfunction!(hash_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
