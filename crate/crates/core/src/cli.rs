//! Command-line front end.
//!
//! Exit status is 0 on success, 1 on a usage or configuration error and 2 on a
//! runtime error. Diagnostics go to stderr, one `error[config]:`,
//! `error[runtime]:`, `error[usage]:` or `info:` prefixed line each.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calib::LatencyProfile;
use crate::domain::{validate_config, EnvConfig};
use crate::harness::{
    budget_shock_experiment, calibrate_uniform, ceiling_grid, evaluate, latency_sweep, resolve_deciders, run_ablations,
    shift_check, AblationRow, CalibrationReport, CeilingRow, Checkpoint, EnvRef, ExperimentKind, ExperimentSpec,
    HarnessError, Resolution, Setup, ShiftRow, ShockRow, SweepRow, TrainedRun,
};
use crate::par::{init_workers, Execution};
use crate::ppo::{train_with, write_curve_csv, PpoConfig};
use crate::report::{
    compute_metrics, now_rfc3339, read_jsonl, spec_hash, write_json, write_std_csv, write_summary_csv, write_table,
    Manifest, MetricsSummary, SeedMetrics,
};
use crate::rollout::StepRecord;

#[derive(Debug, Parser)]
#[command(name = "orchestra", version, about = "Simulate, train and evaluate ACT/THINK orchestration policies")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// First seed; overrides the spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds; overrides the spec.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single worker, bitwise-reproducible outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an env config, train spec or experiment spec.
    Validate { cfg: PathBuf },
    /// Train learned policies from a train spec.
    Train { spec: PathBuf },
    /// Evaluate the spec's deciders.
    Eval { spec: PathBuf },
    /// Latency-variance sweep.
    Sweep { spec: PathBuf },
    /// Mid-episode budget shock.
    Shock { spec: PathBuf },
    /// Executor-strength by reasoning-effect grid.
    Ceiling { spec: PathBuf },
    /// Feature and head ablations.
    Ablate { spec: PathBuf },
    /// Reasoning latency and cost inflation without retraining.
    Shift { spec: PathBuf },
    /// Affine latency calibration for a profile id or a calibrate spec file.
    Calibrate { profile: String },
    /// Recompute summaries from a run directory's step logs.
    Report { run_dir: PathBuf },
}

/// Training job description read by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub env: EnvRef,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub seeds: usize,
    /// Also save a checkpoint every this many iterations; 0 saves only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(lines) => {
                for (i, l) in lines.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "error[config]: {l}")?;
                }
                Ok(())
            }
            CliError::Runtime(m) => write!(f, "error[runtime]: {m}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Validation(errs) => CliError::Config(errs.0.iter().map(|v| v.to_string()).collect()),
            e if e.is_config() => CliError::Config(vec![e.to_string()]),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(m: impl Into<String>) -> CliError {
    CliError::Config(vec![m.into()])
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let text = e.render().to_string();
                    let mut lines = text.lines();
                    if let Some(first) = lines.next() {
                        eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
                    }
                    for l in lines {
                        eprintln!("{l}");
                    }
                    1
                }
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let workers = if g.deterministic { 1 } else { g.workers };
    init_workers(workers);
    let exec = Execution::from_workers(workers, g.deterministic);
    match &cli.command {
        Command::Validate { cfg } => validate(cfg),
        Command::Train { spec } => train_cmd(spec, g, exec),
        Command::Eval { spec } => experiment(spec, Some(ExperimentKind::Eval), g, exec),
        Command::Sweep { spec } => experiment(spec, Some(ExperimentKind::LatencySweep), g, exec),
        Command::Shock { spec } => experiment(spec, Some(ExperimentKind::BudgetShock), g, exec),
        Command::Ceiling { spec } => experiment(spec, Some(ExperimentKind::CeilingGrid), g, exec),
        Command::Ablate { spec } => experiment(spec, Some(ExperimentKind::Ablation), g, exec),
        Command::Shift { spec } => experiment(spec, Some(ExperimentKind::ShiftCheck), g, exec),
        Command::Calibrate { profile } => calibrate_cmd(profile, g, exec),
        Command::Report { run_dir } => report_cmd(run_dir, g),
    }
}

fn read_json(path: &Path) -> Result<(String, Value), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config(format!("io-error: {}: {e}", path.display())))?;
    let value = serde_json::from_str(&text).map_err(|e| config(format!("parse-error: {}: {e}", path.display())))?;
    Ok((text, value))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, value: Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| config(format!("parse-error: {}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn validate(path: &Path) -> Result<(), CliError> {
    let (_, value) = read_json(path)?;
    let base = base_dir(path);
    let obj = value.as_object().ok_or_else(|| config(format!("parse-error: {}: expected a JSON object", path.display())))?;
    let what = if obj.contains_key("kind") {
        let spec: ExperimentSpec = parse(path, value)?;
        spec.check()?;
        spec.env.resolve(&base)?;
        "experiment-spec"
    } else if obj.contains_key("env") || obj.contains_key("ppo") {
        let spec: TrainSpec = parse(path, value)?;
        check_train_spec(&spec)?;
        spec.env.resolve(&base)?;
        "train-spec"
    } else {
        let cfg: EnvConfig = parse(path, value)?;
        validate_config(cfg).map_err(HarnessError::from)?;
        "env-config"
    };
    println!("ok: {what}: {}", path.display());
    Ok(())
}

fn check_train_spec(spec: &TrainSpec) -> Result<(), CliError> {
    spec.ppo.validate().map_err(|e| config(e.to_string()))?;
    if spec.seeds == 0 {
        return Err(config("seeds must be >= 1"));
    }
    Ok(())
}

fn out_dir(g: &GlobalOpts, label: &str, hash: &str) -> Result<PathBuf, CliError> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{label}-{}", &hash[..12])));
    std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("io-error: {}: {e}", dir.display())))?;
    Ok(dir)
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("io-error: {}: {e}", dir.display())))
}

/// Filesystem-safe form of a decider name.
fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn info(msg: impl fmt::Display) {
    eprintln!("info: {msg}");
}

fn write_manifest(dir: &Path, hash: String, seeds: Vec<u64>, started: String) -> Result<(), CliError> {
    let m = Manifest { spec_hash: hash, seeds, version: env!("CARGO_PKG_VERSION").to_string(), started, finished: now_rfc3339() };
    write_json(&dir.join("manifest.json"), &m).map_err(runtime)
}

fn effective_hash<T: Serialize>(spec: &T) -> Result<String, CliError> {
    let bytes = serde_json::to_vec(spec).map_err(runtime)?;
    Ok(spec_hash(&bytes))
}

fn train_cmd(path: &Path, g: &GlobalOpts, exec: Execution) -> Result<(), CliError> {
    let started = now_rfc3339();
    let (_, value) = read_json(path)?;
    let mut spec: TrainSpec = parse(path, value)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if let Some(n) = g.seeds {
        spec.seeds = n;
    }
    check_train_spec(&spec)?;
    let cfg = spec.env.resolve(&base_dir(path))?;
    let profile = crate::harness::profile_for(cfg.get())?;
    let hash = effective_hash(&spec)?;
    let dir = out_dir(g, "train", &hash)?;
    write_json(&dir.join("spec.json"), &spec).map_err(runtime)?;
    let seeds: Vec<u64> = (0..spec.seeds as u64).map(|i| spec.seed + i).collect();
    for &seed in &seeds {
        let sdir = dir.join(format!("seed_{seed}"));
        mkdir(&sdir)?;
        let mut saved: Result<(), CliError> = Ok(());
        let every = spec.checkpoint_every;
        let out = train_with(&spec.ppo, &cfg, &profile, seed, exec, |m, policy, opt| {
            if every > 0 && (m.iteration + 1) % every == 0 && saved.is_ok() {
                let ck = Checkpoint {
                    version: crate::harness::CHECKPOINT_VERSION,
                    iteration: m.iteration + 1,
                    policy: policy.clone(),
                    optimizer: opt.clone(),
                    env: cfg.get().clone(),
                    ppo: spec.ppo.clone(),
                    seed,
                    dual: m.dual_lambda,
                };
                saved = ck.save(&sdir.join(format!("checkpoint_{:05}.json", m.iteration + 1))).map_err(CliError::from);
            }
        })
        .map_err(|e| runtime(format!("train-error(seed {seed}): {e}")))?;
        saved?;
        write_curve_csv(&sdir.join("curve.csv"), &out.curve).map_err(runtime)?;
        Checkpoint::from_output(&out, &cfg, &spec.ppo, seed).save(&sdir.join("checkpoint.json"))?;
        let last = out.curve.last().map_or(0.0, |m| m.mean_return);
        info(format!("seed {seed}: {} iterations, final mean return {last:.4}", out.curve.len()));
    }
    write_manifest(&dir, hash, seeds, started)?;
    info(format!("wrote {}", dir.display()));
    Ok(())
}

fn load_experiment(path: &Path, g: &GlobalOpts, expected: Option<ExperimentKind>) -> Result<ExperimentSpec, CliError> {
    let (_, mut value) = read_json(path)?;
    // the subcommand names the kind, so specs may omit it
    if let (Some(kind), Some(obj)) = (expected, value.as_object_mut()) {
        if !obj.contains_key("kind") {
            obj.insert("kind".into(), serde_json::to_value(kind).map_err(runtime)?);
        }
    }
    let mut spec: ExperimentSpec = parse(path, value)?;
    if let Some(kind) = expected {
        if spec.kind != kind {
            return Err(config(format!("spec kind {:?} does not match the subcommand ({kind:?})", spec.kind)));
        }
    }
    if let Some(s) = g.seed {
        spec.base_seed = s;
    }
    if let Some(n) = g.seeds {
        spec.seeds = n;
    }
    spec.check()?;
    Ok(spec)
}

fn label(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Eval => "eval",
        ExperimentKind::LatencySweep => "sweep",
        ExperimentKind::BudgetShock => "shock",
        ExperimentKind::CeilingGrid => "ceiling",
        ExperimentKind::Ablation => "ablate",
        ExperimentKind::Calibrate => "calibrate",
        ExperimentKind::ShiftCheck => "shift",
    }
}

fn write_trained(dir: &Path, setup: &Setup, trained: &[TrainedRun]) -> Result<(), CliError> {
    if trained.is_empty() {
        return Ok(());
    }
    let curves = dir.join("curves");
    let checkpoints = dir.join("checkpoints");
    mkdir(&curves)?;
    mkdir(&checkpoints)?;
    for t in trained {
        let stem = format!("{}_seed{}", file_stem(&t.name), t.seed);
        write_curve_csv(&curves.join(format!("{stem}.csv")), &t.output.curve).map_err(runtime)?;
        Checkpoint::from_output(&t.output, &setup.cfg, &setup.ppo, t.seed).save(&checkpoints.join(format!("{stem}.json")))?;
    }
    Ok(())
}

fn write_tuning(dir: &Path, res: &Resolution) -> Result<(), CliError> {
    if res.tuning.is_empty() {
        return Ok(());
    }
    let rows: Vec<Vec<String>> = res
        .tuning
        .iter()
        .flat_map(|(name, pts)| {
            pts.iter().map(move |p| vec![name.clone(), format!("{:.6}", p.theta), format!("{:.6}", p.tsr), p.selected.to_string()])
        })
        .collect();
    write_table(&dir.join("tuning.csv"), &["decider", "theta", "validation_tsr", "selected"], &rows).map_err(runtime)
}

fn experiment(path: &Path, expected: Option<ExperimentKind>, g: &GlobalOpts, exec: Execution) -> Result<(), CliError> {
    let started = now_rfc3339();
    let spec = load_experiment(path, g, expected)?;
    let base = base_dir(path);
    let setup = Setup::from_spec(&spec, &base, exec)?;
    let hash = effective_hash(&spec)?;
    let dir = out_dir(g, label(spec.kind), &hash)?;
    write_json(&dir.join("spec.json"), &spec).map_err(runtime)?;
    let p = &spec.params;
    match spec.kind {
        ExperimentKind::Eval => {
            let res = resolve_deciders(&setup, &spec.deciders, p, &base)?;
            write_trained(&dir, &setup, &res.trained)?;
            write_tuning(&dir, &res)?;
            let out = evaluate(&setup, &res.deciders, p.logs)?;
            write_summary_csv(&dir.join("summary.csv"), &out.summaries).map_err(runtime)?;
            write_std_csv(&dir.join("summary_std.csv"), &out.summaries).map_err(runtime)?;
            if p.logs {
                let logs = dir.join("logs");
                mkdir(&logs)?;
                for (name, records) in &out.logs {
                    crate::report::write_jsonl(&logs.join(format!("{}.jsonl", file_stem(name))), records).map_err(runtime)?;
                }
            }
            for s in &out.summaries {
                info(format!("{}: tsr {:.4} rf {:.4} re {:.4}", s.decider, s.mean.tsr, s.mean.rf, s.mean.re));
            }
        }
        ExperimentKind::LatencySweep => {
            let res = resolve_deciders(&setup, &spec.deciders, p, &base)?;
            write_trained(&dir, &setup, &res.trained)?;
            write_tuning(&dir, &res)?;
            let rows = latency_sweep(&setup, &res.deciders, &p.std_levels)?;
            let table: Vec<_> = rows.iter().map(SweepRow::row).collect();
            write_table(&dir.join("sweep.csv"), &SweepRow::COLUMNS, &table).map_err(runtime)?;
        }
        ExperimentKind::BudgetShock => {
            let res = resolve_deciders(&setup, &spec.deciders, p, &base)?;
            write_trained(&dir, &setup, &res.trained)?;
            write_tuning(&dir, &res)?;
            let rows = budget_shock_experiment(&setup, &res.deciders, p.shock_fraction)?;
            let table: Vec<_> = rows.iter().map(ShockRow::row).collect();
            write_table(&dir.join("shock.csv"), &ShockRow::COLUMNS, &table).map_err(runtime)?;
        }
        ExperimentKind::CeilingGrid => {
            let rows = ceiling_grid(&setup, &spec.deciders, &p.q_levels, &p.eta_levels, p, &base)?;
            let table: Vec<_> = rows.iter().map(CeilingRow::row).collect();
            write_table(&dir.join("ceiling.csv"), &CeilingRow::COLUMNS, &table).map_err(runtime)?;
        }
        ExperimentKind::Ablation => {
            let (rows, trained) = run_ablations(&setup, &p.variants)?;
            write_trained(&dir, &setup, &trained)?;
            let table: Vec<_> = rows.iter().map(AblationRow::row).collect();
            write_table(&dir.join("ablation.csv"), &AblationRow::COLUMNS, &table).map_err(runtime)?;
        }
        ExperimentKind::ShiftCheck => {
            let res = resolve_deciders(&setup, &spec.deciders, p, &base)?;
            write_trained(&dir, &setup, &res.trained)?;
            write_tuning(&dir, &res)?;
            let rows = shift_check(&setup, &res.deciders, p.inflation)?;
            let table: Vec<_> = rows.iter().map(ShiftRow::row).collect();
            write_table(&dir.join("shift.csv"), &ShiftRow::COLUMNS, &table).map_err(runtime)?;
        }
        ExperimentKind::Calibrate => {
            let (lo, hi) = setup.cfg.think_cost;
            let report = calibrate_uniform(p.empirical, lo, hi, p.mc_samples, spec.base_seed, exec)?;
            write_calibration(&dir, &report)?;
        }
    }
    write_manifest(&dir, hash, spec.seed_list(), started)?;
    info(format!("wrote {}", dir.display()));
    Ok(())
}

fn write_calibration(dir: &Path, report: &CalibrationReport) -> Result<(), CliError> {
    write_table(&dir.join("calibration.csv"), &CalibrationReport::COLUMNS, &[report.row()]).map_err(runtime)?;
    info(format!(
        "a {:.6} b {:.6} token_scale {:.6}; monte-carlo mean {:.6} s std {:.6} s",
        report.calibration.a, report.calibration.b, report.calibration.token_scale, report.mc_mean_sec, report.mc_std_sec
    ));
    Ok(())
}

fn calibrate_cmd(profile: &str, g: &GlobalOpts, exec: Execution) -> Result<(), CliError> {
    let path = Path::new(profile);
    if path.is_file() {
        return experiment(path, Some(ExperimentKind::Calibrate), g, exec);
    }
    let started = now_rfc3339();
    let prof = LatencyProfile::by_id(profile).ok_or_else(|| config(format!("unknown-latency-profile({profile})")))?;
    let cfg = EnvConfig { latency: profile.to_string(), ..EnvConfig::default() };
    let (lo, hi) = cfg.think_cost;
    let seed = g.seed.unwrap_or(0);
    let defaults = crate::harness::KindParams::default();
    let report = calibrate_uniform(defaults.empirical, lo, hi, defaults.mc_samples, seed, exec)?;
    let hash = effective_hash(&prof)?;
    let dir = out_dir(g, "calibrate", &hash)?;
    write_json(&dir.join("profile.json"), &prof).map_err(runtime)?;
    write_calibration(&dir, &report)?;
    write_manifest(&dir, hash, vec![seed], started)?;
    info(format!("wrote {}", dir.display()));
    Ok(())
}

/// Per-decider summaries recomputed from the JSONL step logs of an eval run.
pub fn summaries_from_logs(run_dir: &Path) -> Result<Vec<MetricsSummary>, CliError> {
    let logs = run_dir.join("logs");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&logs)
        .map_err(|e| runtime(format!("io-error: {}: {e}", logs.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    // decider order follows the summary when one exists
    let order: Vec<String> = crate::report::read_summary_csv(&run_dir.join("summary.csv"))
        .map(|rows| {
            let mut names: Vec<String> = Vec::new();
            for (d, _, _) in rows {
                if !names.contains(&d) {
                    names.push(d);
                }
            }
            names
        })
        .unwrap_or_default();
    let mut out = Vec::new();
    for f in files {
        let records: Vec<StepRecord> = read_jsonl(&f).map_err(runtime)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let name = order.iter().find(|n| file_stem(n) == stem).cloned().unwrap_or(stem);
        let per_episode = compute_metrics(&records).map_err(|e| runtime(format!("{}: {e}", f.display())))?;
        let mut by_seed: BTreeMap<u64, Vec<_>> = BTreeMap::new();
        let mut seeds = Vec::new();
        for ((seed, _), m) in per_episode {
            if !by_seed.contains_key(&seed) {
                seeds.push(seed);
            }
            by_seed.entry(seed).or_default().push(m);
        }
        let per_seed: Vec<SeedMetrics> = seeds.iter().map(|s| SeedMetrics::from_episodes(&by_seed[s])).collect();
        out.push(MetricsSummary::from_seeds(&name, &seeds, per_seed));
    }
    out.sort_by_key(|s| order.iter().position(|n| *n == s.decider).unwrap_or(usize::MAX));
    Ok(out)
}

fn report_cmd(run_dir: &Path, g: &GlobalOpts) -> Result<(), CliError> {
    let summaries = summaries_from_logs(run_dir)?;
    if summaries.is_empty() {
        return Err(runtime(format!("no step logs under {}", run_dir.join("logs").display())));
    }
    let dir = g.out.clone().unwrap_or_else(|| run_dir.to_path_buf());
    mkdir(&dir)?;
    let path = dir.join("report_summary.csv");
    write_summary_csv(&path, &summaries).map_err(runtime)?;
    let original = run_dir.join("summary.csv");
    if original.is_file() {
        let a = std::fs::read(&original).map_err(runtime)?;
        let b = std::fs::read(&path).map_err(runtime)?;
        if a != b {
            return Err(runtime(format!("summary-mismatch: {} differs from {}", path.display(), original.display())));
        }
        info("summary reproduced from step logs");
    }
    println!("{:<24} {:>8} {:>10} {:>8} {:>8} {:>10}", "decider", "tsr", "el_steps", "re", "rf", "tokens");
    for s in &summaries {
        let m = &s.mean;
        println!("{:<24} {:>8.4} {:>10.3} {:>8.4} {:>8.4} {:>10.1}", s.decider, m.tsr, m.el_steps, m.re, m.rf, m.tokens);
    }
    info(format!("wrote {}", path.display()));
    Ok(())
}
