//! Command-line front end: `validate`, `describe`, `simulate`, `check`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{load_spec, CheckKind, ExperimentConfig, Prerequisite};
use crate::environment::{Environment, EnvironmentSpec, Window};
use crate::error::{Error, Result};
use crate::harness::CheckReport;
use crate::rng::{self, tag};
use crate::spectral::{summarize, SpectralConfig, SpectralSummary};
use crate::walker::{run_to_layer, write_trajectories, KernelTable, RunOptions, SiteState, TrajectoryRecord};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "strip-rwre",
    version,
    about = "Random walks in random environment on a strip"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a config or spec and check the layer law.
    Validate(Source),
    /// Print the spectral summary of a spec.
    Describe(Source),
    /// Write simulated trajectories as CSV.
    Simulate(SimulateArgs),
    /// Run the checks listed in a config.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Target layer.
    #[arg(long)]
    pub n: i64,
    #[arg(long, default_value_t = 10)]
    pub replicas: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1_000_000_000)]
    pub cap: u64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One ledger line.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct LedgerRow {
    pub check_id: String,
    pub spec_id: String,
    pub seed: u64,
    pub n: u64,
    pub replicas: u64,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub wall_time_s: f64,
}

impl From<&CheckReport> for LedgerRow {
    fn from(r: &CheckReport) -> Self {
        Self {
            check_id: r.check_id.clone(),
            spec_id: r.spec_id.clone(),
            seed: r.seed,
            n: r.n,
            replicas: r.replicas,
            statistic: r.statistic,
            threshold: r.threshold,
            pass: r.pass,
            wall_time_s: r.wall_time_s.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check_id: String,
    pub spec_id: String,
    pub pass: bool,
    pub negative_control: bool,
    pub as_expected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub detail_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub out: PathBuf,
    pub checks: Vec<CheckOutcome>,
    pub exit_code: u8,
}

/// Overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

fn kind_name(k: CheckKind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{k:?}"))
}

/// Loads, validates and runs every check of `config_path`: spectral
/// prerequisites first, then checks in file order. The ledger is appended
/// row by row so partial results survive a crash.
pub fn run_config(config_path: &Path, ov: &RunOverrides) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load(config_path)?;
    let seed = ov.seed.unwrap_or(cfg.seed);
    let out = ov
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory (`out` or --out)".into()))?;
    let pool = pool(ov.jobs.or(cfg.jobs))?;
    pool.install(|| execute(&cfg, seed, &out))
}

fn execute(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let specs = cfg.resolve_specs()?;
    let jobs = cfg.jobs(&specs)?;
    let ctx = cfg.context(seed);

    let spectral_cfg = cfg.spectral_config();
    let mut summaries: BTreeMap<String, SpectralSummary> = BTreeMap::new();
    for (job, entry) in &jobs {
        let pre = job.prerequisite();
        if pre == Prerequisite::None || entry.negative_control {
            continue;
        }
        if !summaries.contains_key(&entry.spec) {
            let s = summarize(&specs[&entry.spec], &spectral_cfg)?;
            summaries.insert(entry.spec.clone(), s);
        }
        pre.verify(&kind_name(entry.kind), &summaries[&entry.spec])
            .map_err(|e| Error::Config(e.to_string()))?;
    }

    fs::create_dir_all(out.join("details"))?;
    let records: Vec<_> = summaries.values().map(SpectralSummary::record).collect();
    fs::write(out.join("spectral.json"), serde_json::to_string_pretty(&records)?)?;
    let mut ledger = csv::Writer::from_path(out.join("ledger.csv"))?;
    if jobs.is_empty() {
        ledger.write_record([
            "check_id",
            "spec_id",
            "seed",
            "n",
            "replicas",
            "statistic",
            "threshold",
            "pass",
            "wall_time_s",
        ])?;
    }
    let mut outcomes = Vec::with_capacity(jobs.len());
    for (idx, (job, entry)) in jobs.iter().enumerate() {
        let spec = &specs[&entry.spec];
        let (mut report, error) = match job.run(spec, &ctx) {
            Ok(r) => (r, None),
            Err(e) => (failed_report(entry.kind, spec, seed, &e), Some(e.to_string())),
        };
        report.negative_control |= entry.negative_control;
        let detail_file = format!("details/{idx:03}_{}_{}.json", report.check_id, report.spec_id);
        fs::write(out.join(&detail_file), serde_json::to_string_pretty(&report)?)?;
        ledger.serialize(LedgerRow::from(&report))?;
        ledger.flush()?;
        outcomes.push(CheckOutcome {
            check_id: report.check_id.clone(),
            spec_id: report.spec_id.clone(),
            pass: report.pass,
            negative_control: report.negative_control,
            as_expected: report.as_expected(),
            error,
            detail_file,
        });
    }
    let exit_code = if outcomes.iter().all(|o| o.as_expected) {
        EXIT_OK
    } else {
        EXIT_FAIL
    };
    let summary = RunSummary {
        seed,
        out: out.to_path_buf(),
        checks: outcomes,
        exit_code,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn failed_report(kind: CheckKind, spec: &EnvironmentSpec, seed: u64, e: &Error) -> CheckReport {
    let mut details = BTreeMap::new();
    details.insert("error".into(), serde_json::json!(e.to_string()));
    CheckReport {
        check_id: kind_name(kind),
        claim: "check did not complete".into(),
        spec_id: spec.id().into(),
        seed,
        n: 0,
        replicas: 0,
        statistic: f64::NAN,
        threshold: f64::NAN,
        pass: false,
        negative_control: false,
        degraded: false,
        details,
        wall_time_s: Some(0.0),
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Structural(_) | Error::Dimension { .. } | Error::Range(_) | Error::Regime { .. } => {
            EXIT_CONFIG
        }
        _ => EXIT_FAIL,
    }
}

fn specs_from(src: &Source) -> Result<Vec<EnvironmentSpec>> {
    match (&src.config, &src.spec) {
        (Some(c), _) => {
            let cfg = ExperimentConfig::load(c)?;
            let specs = cfg.resolve_specs()?;
            cfg.jobs(&specs)?;
            Ok(specs.into_values().collect())
        }
        (None, Some(s)) => Ok(vec![load_spec(s)?]),
        (None, None) => Err(Error::Config("give --config or --spec".into())),
    }
}

fn spectral_cfg_from(src: &Source) -> Result<SpectralConfig> {
    match &src.config {
        Some(c) => Ok(ExperimentConfig::load(c)?.spectral_config()),
        None => Ok(SpectralConfig::default()),
    }
}

fn cmd_validate(src: &Source, json: bool) -> Result<u8> {
    let specs = specs_from(src)?;
    let mut ok = true;
    let mut rows = Vec::new();
    for spec in &specs {
        let rep = crate::config::run_validate(spec, &Default::default(), &Default::default())?;
        ok &= rep.pass;
        if !json {
            println!(
                "{} {}: {} of {} drawn layers fail",
                if rep.pass { "ok" } else { "FAIL" },
                spec.id(),
                rep.statistic,
                rep.n
            );
        }
        rows.push(rep);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_describe(src: &Source, json: bool) -> Result<u8> {
    let specs = specs_from(src)?;
    let cfg = spectral_cfg_from(src)?;
    let mut all = Vec::new();
    for spec in &specs {
        let s = summarize(spec, &cfg)?;
        if !json {
            print_summary(&s);
        }
        all.push(s);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&all)?);
    }
    Ok(EXIT_OK)
}

fn print_summary(s: &SpectralSummary) {
    println!("spec {}", s.spec_id);
    println!(
        "  lambda  {:.6} +- {:.2e} (N = {})",
        s.lambda.lambda, s.lambda.stderr, s.lambda.n
    );
    println!("  regime  {}", s.regime);
    println!("  s       {}", s.s.value());
    println!("  bp      {} (K = {:.4e})", s.bp.flag, s.bp.k_observed);
    let curve: Vec<String> = s
        .r_curve
        .iter()
        .map(|p| format!("r({}) = {:.6}", p.alpha, p.r))
        .collect();
    println!(
        "  {}{}",
        curve.join(", "),
        if s.exact_moments { " [exact]" } else { "" }
    );
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8> {
    if a.n < 1 {
        return Err(Error::Range("--n must be positive".into()));
    }
    let spec = load_spec(&a.spec)?;
    let env = Environment::new(Arc::new(spec), Window::new(-a.n, a.n)?)?;
    let table = KernelTable::new(&env);
    let opts = RunOptions {
        cap: a.cap,
        ..RunOptions::default()
    };
    let rows = crate::par::replicate(a.replicas, |k| -> Result<TrajectoryRecord> {
        let seed = rng::stream_key(a.seed, tag::WALK, k as u64);
        let mut r = rng::stream(a.seed, tag::WALK, k as u64);
        let s = run_to_layer(&table, SiteState::new(0, 1), a.n, &opts, &mut r)?;
        Ok(TrajectoryRecord::new(seed, &s))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => write_trajectories(File::create(p)?, &rows)?,
        None => write_trajectories(io::stdout().lock(), &rows)?,
    }
    Ok(EXIT_OK)
}

fn cmd_check(a: &CheckArgs, jobs: Option<usize>, json: bool) -> Result<u8> {
    let ov = RunOverrides {
        seed: a.seed,
        out: a.out.clone(),
        jobs,
    };
    let summary = run_config(&a.config, &ov)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        let mut stdout = io::stdout().lock();
        for o in &summary.checks {
            let verdict = match (o.as_expected, o.negative_control) {
                (true, false) => "PASS",
                (true, true) => "PASS (expected failure)",
                (false, _) => "FAIL",
            };
            let _ = writeln!(
                stdout,
                "{verdict} {} {}{}",
                o.check_id,
                o.spec_id,
                o.error.as_ref().map(|e| format!(": {e}")).unwrap_or_default()
            );
        }
        let _ = writeln!(stdout, "ledger: {}", summary.out.join("ledger.csv").display());
    }
    Ok(summary.exit_code)
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let result = match &cli.command {
        Command::Check(a) => cmd_check(a, cli.jobs, cli.json),
        other => pool(cli.jobs).and_then(|p| {
            p.install(|| match other {
                Command::Validate(s) => cmd_validate(s, cli.json),
                Command::Describe(s) => cmd_describe(s, cli.json),
                Command::Simulate(a) => cmd_simulate(a),
                Command::Check(_) => unreachable!(),
            })
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
