//! `bagpipe` command-line tool: trace generation and analytics, planning, simulated
//! training runs and run verification.
//!
//! Exit codes: 0 success (or equal runs), 1 runs differ, 2 usage error, 3 runtime error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bagpipe_core::engine::{IterationRecord, RunReport};
use bagpipe_core::trace::{
    access_cdf, coverage_vs_batch_size, equal_segments, generate_synthetic_trace, parse_criteo_tsv, popularity_drift,
    read_id_lines, read_trace, write_cdf_csv, write_coverage_csv, write_drift_csv, TraceWriter,
};
use bagpipe_core::{
    batchify, plan_trace, run_bagpipe, run_synchronous_baseline, verify_equivalence, EngineConfig, Equivalence,
    Example, Schema, ZipfSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIFF: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "bagpipe", version, about = "Lookahead embedding cache planning and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a trace file from a synthetic Zipf generator, a Criteo TSV file or an id list.
    GenTrace(GenTraceArgs),
    /// Cumulative access share of the most popular embeddings.
    AnalyzeCdf(CdfArgs),
    /// Coverage of later segments by the popular set of the first segment.
    AnalyzeDrift(DriftArgs),
    /// Per-batch share of unique embeddings that are popular, for several batch sizes.
    AnalyzeCoverage(CoverageArgs),
    /// Emit one plan record per batch.
    Plan(PlanArgs),
    /// Simulate training with the lookahead cache.
    Run(RunArgs),
    /// Simulate fetch-train-write-back training without a cache.
    Baseline(RunArgs),
    /// Compare the final store digests of two run reports.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false)]
struct Source {
    /// Zipf exponent of a synthetic trace.
    #[arg(long)]
    zipf: Option<f64>,
    /// Criteo-format TSV file (label, dense integers, hex categoricals).
    #[arg(long)]
    criteo: Option<PathBuf>,
    /// Text file with one `<label> <row>...` example per line.
    #[arg(long)]
    ids: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    #[command(flatten)]
    source: Source,
    /// `<tables>x<rows>[:dense=N][:dim=D]`, `<rows>,<rows>,...[:dense=N][:dim=D]`, or a JSON file.
    #[arg(long)]
    schema: String,
    /// Examples to generate (Zipf) or the maximum to read (Criteo, ids).
    #[arg(long)]
    examples: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CdfArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DriftArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    top_fraction: f64,
    /// Example indices where segments 1.. start, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "segments")]
    boundaries: Vec<u64>,
    /// Number of equal-size segments when no boundaries are given.
    #[arg(long, default_value_t = 10)]
    segments: u64,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    top_fraction: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    batch_sizes: Vec<usize>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    lookahead: usize,
    #[arg(long)]
    capacity: usize,
    #[arg(long)]
    batch_size: usize,
    /// Number given to the first batch.
    #[arg(long, default_value_t = 0)]
    first_iteration: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Engine configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Run report (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Per-iteration records (CSV).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        // A closed stdout (`bagpipe plan ... | head`) is not a failure.
        Err(e) if is_broken_pipe(&e) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        let io = match cause.downcast_ref::<bagpipe_core::Error>() {
            Some(bagpipe_core::Error::Io(io)) => Some(io),
            _ => cause.downcast_ref::<io::Error>(),
        };
        io.is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenTrace(a) => gen_trace(a),
        Command::AnalyzeCdf(a) => {
            let examples = load_examples(&a.trace, None)?;
            let points = access_cdf(&examples)?;
            write_cdf_csv(output(a.out.as_deref())?, &points)?;
            Ok(EXIT_OK)
        }
        Command::AnalyzeDrift(a) => {
            let examples = load_examples(&a.trace, None)?;
            let approximate_days = a.boundaries.is_empty();
            let boundaries = if approximate_days { equal_segments(examples.len() as u64, a.segments) } else { a.boundaries };
            let segments = popularity_drift(&examples, &boundaries, a.top_fraction)?;
            write_drift_csv(output(a.out.as_deref())?, &segments, a.top_fraction, approximate_days)?;
            Ok(EXIT_OK)
        }
        Command::AnalyzeCoverage(a) => {
            let examples = load_examples(&a.trace, None)?;
            let rows = a
                .batch_sizes
                .iter()
                .map(|&bs| coverage_vs_batch_size(&examples, bs, a.top_fraction))
                .collect::<bagpipe_core::Result<Vec<_>>>()?;
            write_coverage_csv(output(a.out.as_deref())?, &rows)?;
            Ok(EXIT_OK)
        }
        Command::Plan(a) => plan(a),
        Command::Run(a) => simulate(a, false),
        Command::Baseline(a) => simulate(a, true),
        Command::Verify(a) => verify(a),
    }
}

/// Parses the inline schema forms, or reads a JSON file.
pub fn parse_schema(spec: &str) -> Result<Schema> {
    let path = Path::new(spec);
    if path.is_file() {
        let schema: Schema = serde_json::from_reader(BufReader::new(File::open(path)?))
            .with_context(|| format!("reading schema {}", path.display()))?;
        schema.validate()?;
        return Ok(schema);
    }
    let mut parts = spec.split(':');
    let tables = parts.next().unwrap_or_default();
    let rows: Vec<u64> = if let Some((n, rows)) = tables.split_once('x') {
        let n: usize = n.parse().with_context(|| format!("bad table count in schema {spec:?}"))?;
        vec![rows.parse().with_context(|| format!("bad row count in schema {spec:?}"))?; n]
    } else {
        tables
            .split(',')
            .map(|r| r.parse().with_context(|| format!("bad row count {r:?} in schema {spec:?}")))
            .collect::<Result<_>>()?
    };
    let (mut dense, mut dim) = (0, 8);
    for opt in parts {
        match opt.split_once('=') {
            Some(("dense", v)) => dense = v.parse().with_context(|| format!("bad dense count in {spec:?}"))?,
            Some(("dim", v)) => dim = v.parse().with_context(|| format!("bad dimension in {spec:?}"))?,
            _ => bail!("unknown schema option {opt:?}; expected dense=N or dim=D"),
        }
    }
    Ok(Schema::new(rows, dense, dim)?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Reads a trace file, keeping at most `limit` examples.
fn load_trace(path: &Path, limit: Option<u64>) -> Result<(Schema, Vec<Example>)> {
    let reader = read_trace(path).with_context(|| format!("opening trace {}", path.display()))?;
    let schema = reader.schema().clone();
    let examples = reader
        .take(limit.map_or(usize::MAX, |n| n as usize))
        .collect::<bagpipe_core::Result<Vec<_>>>()
        .with_context(|| format!("reading trace {}", path.display()))?;
    Ok((schema, examples))
}

fn load_examples(path: &Path, limit: Option<u64>) -> Result<Vec<Example>> {
    Ok(load_trace(path, limit)?.1)
}

fn gen_trace(a: GenTraceArgs) -> Result<i32> {
    let schema = parse_schema(&a.schema)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut writer = TraceWriter::new(BufWriter::new(file), &schema)?;
    let limit = a.examples.map_or(usize::MAX, |n| n as usize);
    if let Some(exponent) = a.source.zipf {
        let Some(num_examples) = a.examples else { bail!("--examples is required with --zipf") };
        let spec = ZipfSpec { schema: schema.clone(), exponent, num_examples, seed: a.seed };
        for ex in generate_synthetic_trace(&spec)? {
            writer.write(&ex)?;
        }
    } else if let Some(path) = &a.source.criteo {
        let mut skipped = 0u64;
        for item in parse_criteo_tsv(path, schema.clone())?.take(limit) {
            match item {
                Ok(ex) => writer.write(&ex)?,
                Err(e @ bagpipe_core::Error::Record { .. }) => {
                    skipped += 1;
                    if skipped <= 10 {
                        eprintln!("warning: skipping record: {e}");
                    }
                }
                Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
            }
        }
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} malformed records");
        }
    } else if let Some(path) = &a.source.ids {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        for ex in read_id_lines(BufReader::new(file), &schema)?.iter().take(limit) {
            writer.write(ex)?;
        }
    }
    let written = writer.written();
    writer.finish()?.flush()?;
    eprintln!("wrote {written} examples to {}", a.out.display());
    Ok(EXIT_OK)
}

fn plan(a: PlanArgs) -> Result<i32> {
    let examples = load_examples(&a.trace, None)?;
    let batches = bagpipe_core::trace::batchify_from(examples, a.batch_size, a.first_iteration)?;
    let mut out = output(a.out.as_deref())?;
    for plan in plan_trace(batches, a.lookahead, a.capacity)? {
        writeln!(out, "{}", plan?)?;
    }
    out.flush()?;
    Ok(EXIT_OK)
}

fn read_config(path: &Path) -> Result<EngineConfig> {
    let cfg: EngineConfig = serde_json::from_reader(BufReader::new(
        File::open(path).with_context(|| format!("opening config {}", path.display()))?,
    ))
    .with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(a: RunArgs, baseline: bool) -> Result<i32> {
    let cfg = read_config(&a.config)?;
    let limit = (cfg.iterations > 0).then(|| (cfg.iterations * cfg.batch_size) as u64);
    let (schema, examples) = load_trace(&a.trace, limit)?;
    let batches: Vec<_> = batchify(examples, cfg.batch_size)?.collect();
    let outcome = if baseline {
        run_synchronous_baseline(&cfg, &schema, &batches)?
    } else {
        run_bagpipe(&cfg, &schema, &batches)?
    };
    let report = &outcome.report;
    let mut out = output(Some(&a.report))?;
    out.write_all(report.to_json()?.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    if let Some(csv) = &a.csv {
        report.write_iterations_csv(output(Some(csv))?)?;
    }
    eprintln!("{}", summary_line(report));
    Ok(EXIT_OK)
}

fn summary_line(report: &RunReport) -> String {
    let t = &report.totals;
    let stalls: f64 = report.iterations.iter().map(|r: &IterationRecord| r.blocked_on_eviction + r.blocked_on_prefetch).sum();
    format!(
        "{} iterations, simulated time {:.3}, stalls {:.3}, churn {}, peak occupancy {}, digest {}",
        t.iterations,
        t.total_time,
        stalls,
        t.churn,
        t.peak_occupancy,
        report.final_digest.as_deref().unwrap_or("-")
    )
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    RunReport::from_json(&text).with_context(|| format!("parsing report {}", path.display()))
}

fn verify(a: VerifyArgs) -> Result<i32> {
    let left = read_report(&a.a)?;
    let right = read_report(&a.b)?;
    match verify_equivalence(&left, &right)? {
        Equivalence::Equal { digest } => {
            println!("equal {digest}");
            Ok(EXIT_OK)
        }
        Equivalence::Different { left, right, differing, diffs } => {
            println!("different {left} {right}");
            match differing {
                Some(n) => println!("{n} rows differ"),
                None => println!("reports carry no final state; rerun with record_final_state for a row diff"),
            }
            for d in diffs {
                println!("{} {:?} {:?}", d.key, d.left, d.right);
            }
            Ok(EXIT_DIFF)
        }
    }
}
