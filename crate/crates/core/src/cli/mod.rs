//! Command-line surface: `run`, `sweep`, `record`, `replay`, `analyze`.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.

pub mod spec;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::analyze;
use crate::engine::{decode, decode_recorded, CostModel, DecodeMetrics};
use crate::error::{Error, Result};
use crate::models::{PerturbedDraft, SyntheticTarget};
use crate::trace::{read_trace, replay_verify, write_trace, TraceHeader};
use crate::verify::VerificationPolicy;

pub use spec::{ExperimentSpec, Job, PolicyKind, RunSeeds};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mars-lab",
    version,
    about = "Speculative-decoding verification lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode one grid point (all repetitions) and emit a metrics CSV.
    Run(ExperimentArgs),
    /// Decode every grid point and repetition; one CSV row each.
    Sweep(ExperimentArgs),
    /// Decode one grid point while writing a logit trace to --out.
    Record(ExperimentArgs),
    /// Re-verify a recorded trace under a policy.
    Replay(ReplayArgs),
    /// Logit / ratio / probability-ratio statistics of a trace.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    temperature: Option<Vec<f64>>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Draft step cost relative to a target pass.
    #[arg(long)]
    cost_ratio: Option<f64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// CSV path (run/sweep) or trace path (record).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "margin-aware")]
    policy: PolicyKind,
    #[arg(long, default_value_t = VerificationPolicy::DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long)]
    cost_ratio: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    #[arg(long, default_value_t = VerificationPolicy::DEFAULT_THETA)]
    theta: f64,
    /// Directory for the CSV set; omitted means summary only.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One metrics CSV row. Config columns a command does not use stay empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub policy: &'static str,
    pub theta: Option<f64>,
    pub k: usize,
    pub temperature: Option<f64>,
    pub max_tokens: Option<usize>,
    pub noise_scale: Option<f64>,
    pub repetition: Option<usize>,
    pub seed: Option<u64>,
    pub cycles: usize,
    pub total_committed: usize,
    pub tau: f64,
    pub exact_count: usize,
    pub relaxed_count: usize,
    pub rejected_count: usize,
    pub bonus_count: usize,
    pub target_passes: usize,
    pub draft_steps: usize,
    pub simulated_speedup: f64,
    pub agreement_rate: Option<f64>,
}

impl MetricsRow {
    fn new(policy: VerificationPolicy, k: usize, m: &DecodeMetrics) -> Self {
        Self {
            policy: policy.name(),
            theta: policy.theta(),
            k,
            temperature: None,
            max_tokens: None,
            noise_scale: None,
            repetition: None,
            seed: None,
            cycles: m.cycles,
            total_committed: m.total_committed,
            tau: m.tau,
            exact_count: m.exact_count,
            relaxed_count: m.relaxed_count,
            rejected_count: m.rejected_count,
            bonus_count: m.bonus_count,
            target_passes: m.target_passes,
            draft_steps: m.draft_steps,
            simulated_speedup: m.simulated_speedup,
            agreement_rate: m.agreement_rate,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::InvalidInput(_)
        | Error::UndefinedMetric(_)
        | Error::UnsupportedFormat(_)
        | Error::Validation { .. } => EXIT_VALIDATION,
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run(args) => {
            let spec = load_spec(&args)?;
            spec.require_single_point()?;
            let rows = execute(&spec)?;
            emit_rows(&rows, spec.output.csv.as_deref(), stdout, stderr)
        }
        Command::Sweep(args) => {
            let spec = load_spec(&args)?;
            let rows = execute(&spec)?;
            emit_rows(&rows, spec.output.csv.as_deref(), stdout, stderr)
        }
        Command::Record(args) => cmd_record(&args, stdout, stderr),
        Command::Replay(args) => cmd_replay(&args, stdout, stderr),
        Command::Analyze(args) => {
            let trace = read_trace(&args.trace)?;
            let report = analyze(&trace, args.theta)?;
            if let Some(dir) = &args.out {
                report.write_csv_set(dir)?;
            }
            write!(stdout, "{}", report.summary()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn load_spec(args: &ExperimentArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentSpec::from_toml(&text)?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(theta) = &args.theta {
        spec.decode.theta = theta.clone();
    }
    if let Some(k) = &args.k {
        spec.decode.k = k.clone();
    }
    if let Some(t) = &args.temperature {
        spec.decode.temperature = t.clone();
    }
    if let Some(n) = args.max_tokens {
        spec.decode.max_tokens = n;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(policy) = args.policy {
        spec.decode.policy = policy;
    }
    if let Some(ratio) = args.cost_ratio {
        spec.cost = CostModel::from_ratio(ratio)?;
    }
    if let Some(r) = args.repetitions {
        spec.repetitions = r;
    }
    if let Some(s) = args.noise_scale {
        spec.draft.noise_scale = s;
    }
    if let Some(out) = &args.out {
        spec.output.csv = Some(out.clone());
    }
    spec.validate()?;
    Ok(spec)
}

fn run_job(spec: &ExperimentSpec, job: &Job) -> Result<MetricsRow> {
    let target = SyntheticTarget::new(spec.target_config(job.seeds.target))?;
    let draft = PerturbedDraft::new(&target, spec.draft_config(job.seeds.noise))?;
    let config = spec.decode_config(job);
    let outcome = decode(&target, &draft, &config, &spec.prompt_tokens())?;
    Ok(MetricsRow {
        temperature: Some(job.temperature),
        max_tokens: Some(spec.decode.max_tokens),
        noise_scale: Some(spec.draft.noise_scale),
        repetition: Some(job.repetition),
        seed: Some(spec.seed),
        ..MetricsRow::new(config.policy, job.k, &outcome.metrics)
    })
}

/// Runs every job of the grid, in parallel, returning rows in grid order.
pub fn execute(spec: &ExperimentSpec) -> Result<Vec<MetricsRow>> {
    spec.jobs()
        .par_iter()
        .map(|job| run_job(spec, job))
        .collect()
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))
}

/// Mean tau / speedup / agreement per grid point, in row order.
pub fn summarize(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < rows.len() {
        let key = |r: &MetricsRow| {
            (
                r.policy,
                r.theta.map(f64::to_bits),
                r.k,
                r.temperature.map(f64::to_bits),
            )
        };
        let group: Vec<&MetricsRow> = rows[i..]
            .iter()
            .take_while(|r| key(r) == key(&rows[i]))
            .collect();
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&MetricsRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        let head = group[0];
        out.push_str(&format!(
            "{} theta={} k={} temperature={}: n={} mean_tau={:.6} mean_speedup={:.6}",
            head.policy,
            head.theta.map_or("-".into(), |t| t.to_string()),
            head.k,
            head.temperature.map_or("-".into(), |t| t.to_string()),
            group.len(),
            mean(&|r| r.tau),
            mean(&|r| r.simulated_speedup),
        ));
        if group.iter().all(|r| r.agreement_rate.is_some()) {
            out.push_str(&format!(
                " mean_agreement={:.6}",
                mean(&|r| r.agreement_rate.unwrap_or_default())
            ));
        }
        out.push('\n');
        i += group.len();
    }
    out
}

/// CSV to `csv_path` (summary on stdout) or to stdout (summary on stderr).
fn emit_rows(
    rows: &[MetricsRow],
    csv_path: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<()> {
    let bytes = rows_to_csv(rows)?;
    let summary = summarize(rows);
    let console = |e| Error::io("<console>", e);
    match csv_path {
        Some(path) => {
            std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
            stdout.write_all(summary.as_bytes()).map_err(console)
        }
        None => {
            stdout.write_all(&bytes).map_err(console)?;
            stderr.write_all(summary.as_bytes()).map_err(console)
        }
    }
}

fn cmd_record(args: &ExperimentArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let mut spec = load_spec(args)?;
    let trace_path = spec
        .output
        .csv
        .take()
        .ok_or_else(|| Error::invalid("record needs --out <trace path>"))?;
    spec.require_single_point()?;
    if spec.repetitions != 1 {
        return Err(Error::invalid("repetitions must be 1 for record"));
    }
    let job = &spec.jobs()[0];
    let target = SyntheticTarget::new(spec.target_config(job.seeds.target))?;
    let draft = PerturbedDraft::new(&target, spec.draft_config(job.seeds.noise))?;
    let config = spec.decode_config(job);
    let (outcome, records) = decode_recorded(&target, &draft, &config, &spec.prompt_tokens())?;
    let header = TraceHeader::new(
        spec.target.vocab_size,
        format!(
            "mars-lab {} record seed={}",
            env!("CARGO_PKG_VERSION"),
            spec.seed
        ),
    );
    write_trace(&trace_path, &header, &records)?;
    let row = MetricsRow {
        temperature: Some(job.temperature),
        max_tokens: Some(spec.decode.max_tokens),
        noise_scale: Some(spec.draft.noise_scale),
        repetition: Some(0),
        seed: Some(spec.seed),
        ..MetricsRow::new(config.policy, job.k, &outcome.metrics)
    };
    emit_rows(&[row], None, stdout, stderr)
}

fn cmd_replay(args: &ReplayArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let policy = match args.policy {
        PolicyKind::Strict => VerificationPolicy::Strict,
        PolicyKind::MarginAware => VerificationPolicy::margin_aware(args.theta)?,
    };
    let cost = match args.cost_ratio {
        Some(r) => CostModel::from_ratio(r)?,
        None => CostModel::default(),
    };
    let trace = read_trace(&args.trace)?;
    let outcome = replay_verify(&trace, policy, args.k, &cost)?;
    let row = MetricsRow::new(policy, args.k, &outcome.metrics);
    emit_rows(&[row], args.out.as_deref(), stdout, stderr)
}
