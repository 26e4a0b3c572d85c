//! `kronfrac` command-line tool.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 verification failure.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use kronfrac::analytics::{
    empirical_memory_estimate, empirical_stats, max_ranked_difference, predict_expanded_sums, ranked_report,
    sample_expanded_ratings, EmpiricalOptions, StatReport, DEFAULT_TOP_N,
};
use kronfrac::expander::{dry_run, expand, read_shard, DirectorySink, ExpansionPlan, Manifest, ShardSink, Variant, MANIFEST_FILE};
use kronfrac::io::{ingest, write_movielens, MatrixFile};
use kronfrac::matrix::center_and_rescale;
use kronfrac::reducer::{reduce, ReducedMatrix};
use kronfrac::spectra::{truncated_svd, SvdParams};
use kronfrac::synthetic::desk_ratings;
use kronfrac::Error;

const DEFAULT_MEMORY_BUDGET: &str = "4GiB";

#[derive(Parser)]
#[command(name = "kronfrac", version, about = "Kronecker fractal expansion of sparse rating matrices")]
struct Cli {
    /// Log level for messages on stderr.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a MovieLens ratings CSV, center and rescale it into [-1, 1].
    Ingest(IngestArgs),
    /// Build a small dense factor from the leading singular structure of a matrix.
    Reduce(ReduceArgs),
    /// Write the Kronecker expansion of a reduced factor and a base matrix as CSV shards.
    Expand(ExpandArgs),
    /// Ranked row sums, column sums and singular values.
    Stats(StatsArgs),
    /// Sample rating values of an expansion without materializing it.
    Sample(SampleArgs),
    /// Re-check an expansion against its manifest.
    Verify(VerifyArgs),
}

#[derive(Args, Serialize)]
struct IngestArgs {
    /// MovieLens ratings file with header `userId,movieId,rating,timestamp`.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Use the bundled 1000x1700 power-law dataset instead of a file.
    #[arg(long)]
    synthetic: bool,
    /// Seed for the synthetic dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the synthetic ratings as MovieLens CSV.
    #[arg(long, requires = "synthetic")]
    #[serde(skip)]
    emit_csv: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct SvdArgs {
    /// Seed for the SVD start block.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative residual tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    #[arg(long, default_value_t = 8)]
    oversample: usize,
}

impl SvdArgs {
    fn params(&self, rank: usize) -> SvdParams {
        SvdParams::new(rank)
            .with_seed(self.seed)
            .with_tol(self.tol)
            .with_max_iter(self.max_iter)
            .with_oversample(self.oversample)
    }
}

#[derive(Args, Serialize)]
struct ReduceArgs {
    /// Ingested matrix file.
    #[arg(long)]
    matrix: PathBuf,
    /// Rows of the reduced factor.
    #[arg(long)]
    rows: usize,
    /// Columns of the reduced factor.
    #[arg(long)]
    cols: usize,
    #[command(flatten)]
    #[serde(flatten)]
    svd: SvdArgs,
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct ExpandArgs {
    /// Reduced factor file.
    #[arg(long)]
    reduced: PathBuf,
    /// Ingested base matrix file.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value = "plain")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows sampled per block for the sketch variant.
    #[arg(long, requires = "sketch_cols")]
    sketch_rows: Option<usize>,
    /// Columns sampled per block for the sketch variant.
    #[arg(long, requires = "sketch_rows")]
    sketch_cols: Option<usize>,
    /// Write the manifest only.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads. Output does not depend on this.
    #[arg(long, default_value_t = default_workers())]
    #[serde(skip)]
    workers: usize,
    /// Output directory for shards and manifest.json.
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Analytic,
    Empirical,
}

#[derive(Args, Serialize)]
struct StatsArgs {
    /// Matrix file, reduced file, manifest.json or expansion directory.
    #[arg(long)]
    target: PathBuf,
    /// For expansions: predict from the factors or read the shards.
    #[arg(long, value_enum, default_value = "empirical")]
    mode: Mode,
    /// Number of leading singular values; 0 skips the spectrum.
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Reduced factor for analytic mode; defaults to the one recorded in the manifest.
    #[arg(long)]
    reduced: Option<PathBuf>,
    /// Base matrix for analytic mode; defaults to the one recorded in the manifest.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Keep at most this many values of very large predicted multisets.
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top_n: usize,
    /// Keep non-positive values in the ranked tables.
    #[arg(long)]
    keep_nonpositive: bool,
    #[arg(long, value_parser = parse_bytes, default_value = DEFAULT_MEMORY_BUDGET)]
    memory_budget: u64,
    #[command(flatten)]
    #[serde(flatten)]
    svd: SvdArgs,
    /// Directory for the TSV tables and report.json.
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    reduced: PathBuf,
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TSV of sampled values ranked non-increasing; a `.json` sidecar is written next to it.
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// manifest.json or the expansion directory.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    reduced: Option<PathBuf>,
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Allowed difference between predicted and observed sums, relative to the largest sum.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, value_parser = parse_bytes, default_value = DEFAULT_MEMORY_BUDGET)]
    memory_budget: u64,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, unit) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("'{s}' is not a byte count"))?;
    let mult: u64 = match unit.trim() {
        "" | "B" => 1,
        "K" | "KiB" => 1 << 10,
        "M" | "MiB" => 1 << 20,
        "G" | "GiB" => 1 << 30,
        "T" | "TiB" => 1 << 40,
        other => return Err(format!("unknown unit '{other}'")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("'{s}' overflows"))
}

enum Failure {
    Usage(String),
    Data(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn run_config(command: &str, args: &impl Serialize) -> Value {
    json!({
        "tool": "kronfrac",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": args,
    })
}

fn print_json(value: &Value) -> Outcome {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_ingest(args: &IngestArgs) -> Outcome {
    let config = run_config("ingest", args);
    let (file, ratings) = match &args.input {
        Some(path) => {
            let file = ingest(path)?;
            let n = file.matrix.nnz() + file.dropped_at_mean;
            (file, n)
        }
        None => {
            let raw = desk_ratings(args.seed);
            if let Some(csv) = &args.emit_csv {
                let mut w = BufWriter::new(File::create(csv)?);
                write_movielens(&raw, &mut w)?;
                w.flush()?;
            }
            (MatrixFile::from(center_and_rescale(&raw)?), raw.len())
        }
    };
    let file = file.with_config(config.clone());
    file.save(&args.output)?;
    print_json(&json!({
        "rows": file.matrix.n_rows(),
        "cols": file.matrix.n_cols(),
        "nnz": file.matrix.nnz(),
        "ratings": ratings,
        "global_mean": file.scale.global_mean,
        "divisor": file.scale.divisor,
        "dropped_at_mean": file.dropped_at_mean,
        "config": config,
    }))
}

fn cmd_reduce(args: &ReduceArgs) -> Outcome {
    let config = run_config("reduce", args);
    let base = MatrixFile::load(&args.matrix)?;
    let k = args.rows.min(args.cols);
    let reduction = reduce(&base.matrix, args.rows, args.cols, &args.svd.params(k))?;
    let reduced = reduction.reduced.with_config(config.clone());
    reduced.save(&args.output)?;
    let provenance = reduced.provenance().expect("reduce records provenance");
    print_json(&json!({
        "rows": reduced.n_rows(),
        "cols": reduced.n_cols(),
        "nnz": reduced.nnz(),
        "k": provenance.k,
        "sigma": reduction.sigma,
        "rescale_min": provenance.rescale_min,
        "rescale_max": provenance.rescale_max,
        "config": config,
    }))
}

fn cmd_expand(args: &ExpandArgs) -> Outcome {
    if args.workers == 0 {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    let config = run_config("expand", args);
    let reduced = ReducedMatrix::load(&args.reduced)?;
    let base = MatrixFile::load(&args.matrix)?;
    let mut plan = ExpansionPlan::new(&reduced, &base.matrix, args.variant, args.seed)
        .with_rating_scale(base.scale)
        .with_config(config);
    if let (Some(r), Some(c)) = (args.sketch_rows, args.sketch_cols) {
        plan = plan.with_sketch_dims(r, c);
    }
    let sink = DirectorySink::create(&args.output)?;
    let manifest = if args.dry_run {
        let manifest = dry_run(&plan)?;
        sink.put_manifest(&manifest)?;
        manifest
    } else {
        expand(&plan, &sink, args.workers)?
    };
    print_json(&json!({
        "dims": manifest.dims,
        "nnz_total": manifest.nnz_total,
        "shards": manifest.shards.len(),
        "skipped_zero_blocks": manifest.skipped_zero_blocks,
        "dry_run": manifest.dry_run,
        "manifest": args.output.join(MANIFEST_FILE),
    }))
}

enum Target {
    Matrix,
    Reduced,
    Manifest(PathBuf),
}

fn classify(path: &Path) -> Result<Target, Failure> {
    if path.is_dir() {
        return Ok(Target::Manifest(path.to_path_buf()));
    }
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let first = first.trim_start();
    if first.starts_with("kronfrac-sparse") {
        Ok(Target::Matrix)
    } else if first.starts_with("kronfrac-reduced") {
        Ok(Target::Reduced)
    } else if first.starts_with('{') {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Target::Manifest(dir))
    } else {
        Err(Failure::Data(format!("{}: not a matrix, reduced factor or manifest", path.display())))
    }
}

/// Input path recorded in an expansion's run config, unless overridden.
fn recorded_input(manifest: &Manifest, key: &str, explicit: &Option<PathBuf>) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        manifest
            .config
            .as_ref()
            .and_then(|c| c.pointer(&format!("/args/{key}")))
            .and_then(Value::as_str)
            .map(PathBuf::from)
    })
}

fn load_factors(manifest: &Manifest, reduced: &Option<PathBuf>, matrix: &Option<PathBuf>) -> Result<(ReducedMatrix, MatrixFile), Failure> {
    let reduced = recorded_input(manifest, "reduced", reduced)
        .ok_or_else(|| Failure::Usage("no reduced factor recorded in the manifest; pass --reduced".into()))?;
    let matrix = recorded_input(manifest, "matrix", matrix)
        .ok_or_else(|| Failure::Usage("no base matrix recorded in the manifest; pass --matrix".into()))?;
    let reduced = ReducedMatrix::load(reduced)?;
    let base = MatrixFile::load(matrix)?;
    if [reduced.n_rows() as u64 * base.matrix.n_rows() as u64, reduced.n_cols() as u64 * base.matrix.n_cols() as u64] != manifest.dims {
        return Err(Failure::Data("factor dimensions do not match the manifest".into()));
    }
    Ok((reduced, base))
}

fn cmd_stats(args: &StatsArgs) -> Outcome {
    let config = run_config("stats", args);
    let spectrum = (args.k > 0).then(|| args.svd.params(args.k));
    let report = match classify(&args.target)? {
        Target::Matrix => StatReport::of_matrix(&MatrixFile::load(&args.target)?.matrix, spectrum.as_ref())?,
        Target::Reduced => StatReport::of_reduced(ReducedMatrix::load(&args.target)?.matrix()),
        Target::Manifest(dir) => {
            let manifest = Manifest::load(&dir)?;
            match args.mode {
                Mode::Empirical => {
                    let options = EmpiricalOptions {
                        memory_budget: args.memory_budget,
                        svd: spectrum,
                    };
                    empirical_stats(&dir, &options)?
                }
                Mode::Analytic => {
                    if manifest.variant != Variant::Plain {
                        return Err(Failure::Usage(format!(
                            "analytic statistics hold for the plain variant only, manifest is {}",
                            manifest.variant
                        )));
                    }
                    let Some(params) = spectrum else {
                        return Err(Failure::Usage("analytic mode needs --k of at least 1".into()));
                    };
                    let (reduced, base) = load_factors(&manifest, &args.reduced, &args.matrix)?;
                    let sigma_r = truncated_svd(&base.matrix, &params)?.sigma;
                    StatReport::analytic(reduced.matrix(), &base.matrix, &sigma_r, args.top_n)?
                }
            }
        }
    };
    let sidecar = report.write_tsv(&args.output, !args.keep_nonpositive, Some(config))?;
    print_json(&serde_json::to_value(&sidecar)?)
}

fn cmd_sample(args: &SampleArgs) -> Outcome {
    let config = run_config("sample", args);
    let reduced = ReducedMatrix::load(&args.reduced)?;
    let base = MatrixFile::load(&args.matrix)?;
    let values = sample_expanded_ratings(reduced.matrix(), &base.matrix, args.count, args.seed)?;
    let table = ranked_report(&values, false);
    let mut w = BufWriter::new(File::create(&args.output)?);
    writeln!(w, "rank\tvalue")?;
    for (rank, value) in &table.rows {
        writeln!(w, "{rank}\t{value:?}")?;
    }
    w.flush()?;

    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let below_half = values.iter().filter(|v| v.abs() < 0.5 * max_abs).count();
    let summary = json!({
        "count": values.len(),
        "max_abs": max_abs,
        "fraction_below_half_max": below_half as f64 / values.len() as f64,
        "config": config,
    });
    fs::write(args.output.with_extension("json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_json(&summary)
}

struct Checks {
    failed: bool,
}

impl Checks {
    fn report(&mut self, check: &str, status: &str, detail: impl Into<String>) {
        if status == "fail" {
            self.failed = true;
        }
        println!("{}", json!({ "check": check, "status": status, "detail": detail.into() }));
    }
}

fn cmd_verify(args: &VerifyArgs) -> Outcome {
    let manifest = Manifest::load(&args.manifest)?;
    let dir = if args.manifest.is_dir() {
        args.manifest.clone()
    } else {
        args.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let mut checks = Checks { failed: false };
    if manifest.dry_run {
        checks.report("shards", "fail", "manifest comes from a dry run; nothing to verify");
        return Err(Failure::Verification);
    }

    let fits = empirical_memory_estimate(&manifest, false) <= args.memory_budget;
    let observed = if fits {
        let options = EmpiricalOptions {
            memory_budget: args.memory_budget,
            svd: None,
        };
        match empirical_stats(&dir, &options) {
            Ok(report) => {
                checks.report("checksums", "pass", format!("{} shards", manifest.shards.len()));
                checks.report("nnz", "pass", format!("{} entries", manifest.nnz_total));
                Some(report)
            }
            Err(e) => {
                checks.report("shards", "fail", e.to_string());
                None
            }
        }
    } else {
        verify_shards_only(&dir, &manifest, &mut checks);
        None
    };

    match observed {
        Some(_) if manifest.variant != Variant::Plain => {
            checks.report("sums", "skipped", format!("{} variant does not conserve sums", manifest.variant))
        }
        Some(observed) => match load_factors(&manifest, &args.reduced, &args.matrix) {
            Ok((reduced, base)) => {
                let predicted = predict_expanded_sums(reduced.matrix(), &base.matrix, DEFAULT_TOP_N);
                for (name, want, got) in [
                    ("row_sums", &predicted.row_sums, &observed.row_sums),
                    ("col_sums", &predicted.col_sums, &observed.col_sums),
                ] {
                    let n = want.values.len().min(got.values.len());
                    let scale = got.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    match max_ranked_difference(&want.values[..n], &got.values[..n]) {
                        _ if want.total != got.total => checks.report(name, "fail", format!("{} predicted, {} observed", want.total, got.total)),
                        Some(d) if d <= args.tol * scale => checks.report(name, "pass", format!("max difference {d:e}")),
                        Some(d) => checks.report(name, "fail", format!("max difference {d:e}")),
                        None => checks.report(name, "fail", "length mismatch"),
                    }
                }
            }
            Err(Failure::Usage(msg) | Failure::Data(msg)) => checks.report("sums", "skipped", msg),
            Err(Failure::Verification) => unreachable!(),
        },
        None if fits => {}
        None => checks.report("sums", "skipped", "expansion dimensions exceed the memory budget"),
    }
    if checks.failed {
        Err(Failure::Verification)
    } else {
        Ok(())
    }
}

fn verify_shards_only(dir: &Path, manifest: &Manifest, checks: &mut Checks) {
    let mut total = 0u64;
    for shard in &manifest.shards {
        match read_shard(dir.join(&shard.name), |_, _, _| {}) {
            Ok((count, checksum)) if checksum == shard.checksum && count == shard.nnz => total += count,
            Ok((count, checksum)) => {
                return checks.report(
                    "checksums",
                    "fail",
                    format!("{}: {count} entries, checksum {checksum}; manifest {} / {}", shard.name, shard.nnz, shard.checksum),
                )
            }
            Err(e) => return checks.report("checksums", "fail", format!("{}: {e}", shard.name)),
        }
    }
    checks.report("checksums", "pass", format!("{} shards", manifest.shards.len()));
    if total == manifest.nnz_total {
        checks.report("nnz", "pass", format!("{total} entries"));
    } else {
        checks.report("nnz", "fail", format!("shards hold {total}, manifest says {}", manifest.nnz_total));
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();

    let outcome = match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Expand(a) => cmd_expand(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
    }
}
