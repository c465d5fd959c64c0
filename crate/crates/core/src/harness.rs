//! Experiment orchestration: evaluation protocol, latency sweeps, budget shocks,
//! ceiling grids, ablations, heuristic tuning, calibration and shift checks.
//!
//! Every function here is a pure function of its inputs and seed list. Jobs are
//! fanned out with [`crate::par`] and reassembled in declaration order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::calib::{calibrate, CalibError, Calibration, EmpiricalStats, LatencyProfile, SourceMoments, MEASURED};
use crate::diffnet::Adam;
use crate::domain::{
    validate_config, BudgetLevel, ConfigErrors, EnvConfig, Purpose, ReasoningRole, RngStream, StreamKey, TaskFamily,
    ValidatedConfig,
};
use crate::par::{map_indexed, try_map_indexed, Execution};
use crate::policy::{AblationFlags, DeciderKind, LearnedPolicy, PolicyError};
use crate::ppo::{tail_mean, train, train_from, ConstraintConfig, PpoConfig, PpoError, TrainOutput};
use crate::report::{EpisodeMetrics, MetricsSummary, SeedMetrics};
use crate::rollout::{run_episode, EpisodeCtx, RolloutError, ShockSpec, ShockSplit, StepRecord};

/// Offset separating heuristic-tuning seeds from evaluation seeds.
pub const VALIDATION_SEED_OFFSET: u64 = 1_000_003;
/// Offset of the episode streams used when fine-tuning under a cost constraint.
pub const FINETUNE_SEED_OFFSET: u64 = 2_000_003;

/// Steps per unit when reporting invocation rates of shock segments.
pub const RI_STEPS: f64 = 50.0;

/// Training iterations averaged when reporting converged training statistics.
pub const CONVERGED_TAIL: usize = 20;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config-error: {0}")]
    Config(String),
    #[error("config-error: {0}")]
    Validation(#[from] ConfigErrors),
    #[error("decider-error({name}): {source}")]
    Decider { name: String, source: PolicyError },
    #[error("train-error({name}, seed {seed}): {source}")]
    Train { name: String, seed: u64, source: PpoError },
    #[error("rollout-error({name}): {source}")]
    Rollout { name: String, source: RolloutError },
    #[error("calibration-error: {0}")]
    Calibration(#[from] CalibError),
    #[error("io-error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Errors caused by the inputs rather than by the run.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Validation(_) | HarnessError::Calibration(_))
            || matches!(self, HarnessError::Decider { source: PolicyError::InvalidDecider(_) | PolicyError::ConflictingFlags, .. })
    }
}

/// Named environment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Delivery,
    StructuredNav,
    TaskDecomposition,
    MicroDelivery,
}

impl Preset {
    pub fn config(self) -> EnvConfig {
        match self {
            Preset::Delivery => EnvConfig::for_family(TaskFamily::Delivery),
            Preset::StructuredNav => EnvConfig::for_family(TaskFamily::StructuredNav),
            Preset::TaskDecomposition => EnvConfig::for_family(TaskFamily::TaskDecomposition),
            Preset::MicroDelivery => EnvConfig::micro_delivery(),
        }
    }
}

/// Reference to an environment config: a preset, optionally a JSON file
/// replacing it, and field overrides merged on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvRef {
    pub preset: Preset,
    pub path: Option<PathBuf>,
    pub overrides: Map<String, Value>,
}

impl Default for EnvRef {
    fn default() -> Self {
        Self { preset: Preset::Delivery, path: None, overrides: Map::new() }
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl EnvRef {
    /// Builds and validates the config; relative paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<ValidatedConfig, HarnessError> {
        let cfg = match &self.path {
            Some(p) => {
                let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                load_env_config(&full)?
            }
            None => self.preset.config(),
        };
        let mut value = serde_json::to_value(&cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut value, &Value::Object(self.overrides.clone()));
        let cfg: EnvConfig = serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("env overrides: {e}")))?;
        Ok(validate_config(cfg)?)
    }
}

/// Reads one env config document; unknown keys are rejected.
pub fn load_env_config(path: &Path) -> Result<EnvConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn profile_for(cfg: &EnvConfig) -> Result<LatencyProfile, HarnessError> {
    LatencyProfile::by_id(&cfg.latency).ok_or_else(|| HarnessError::Config(format!("unknown-latency-profile({})", cfg.latency)))
}

/// A decider as written in a spec; learned variants are trained per seed unless a checkpoint is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeciderSpec {
    NoReasoning,
    FullReasoning {
        #[serde(default = "default_role")]
        role: ReasoningRole,
        #[serde(default = "default_level")]
        budget: BudgetLevel,
    },
    FixedInterval {
        k: usize,
    },
    /// `theta: null` tunes the threshold on validation seeds.
    Heuristic {
        #[serde(default)]
        theta: Option<f64>,
    },
    Learned {
        #[serde(default)]
        ablation: AblationFlags,
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        #[serde(default)]
        greedy: bool,
    },
    /// `c_max` fixed, or a fraction of the unconstrained policy's converged cost.
    ConstrainedLearned {
        #[serde(default)]
        c_max: Option<f64>,
        #[serde(default)]
        c_max_fraction: Option<f64>,
        #[serde(default)]
        greedy: bool,
    },
}

fn default_role() -> ReasoningRole {
    ReasoningRole::Plan
}

fn default_level() -> BudgetLevel {
    BudgetLevel::LOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDecider {
    pub name: String,
    #[serde(flatten)]
    pub spec: DeciderSpec,
}

impl NamedDecider {
    pub fn new(name: &str, spec: DeciderSpec) -> Self {
        Self { name: name.to_string(), spec }
    }
}

/// The Table II decider set.
pub fn default_deciders() -> Vec<NamedDecider> {
    vec![
        NamedDecider::new("no_reasoning", DeciderSpec::NoReasoning),
        NamedDecider::new("full_reasoning", DeciderSpec::FullReasoning { role: ReasoningRole::Plan, budget: BudgetLevel::LOW }),
        NamedDecider::new("fixed_interval_3", DeciderSpec::FixedInterval { k: 3 }),
        NamedDecider::new("fixed_interval_5", DeciderSpec::FixedInterval { k: 5 }),
        NamedDecider::new("heuristic", DeciderSpec::Heuristic { theta: None }),
        NamedDecider::new("learned", DeciderSpec::Learned { ablation: AblationFlags::NONE, checkpoint: None, greedy: false }),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Eval,
    LatencySweep,
    BudgetShock,
    CeilingGrid,
    Ablation,
    Calibrate,
    ShiftCheck,
}

/// Parameters read only by some experiment kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KindParams {
    pub std_levels: Vec<f64>,
    pub shock_fraction: f64,
    pub q_levels: Vec<f64>,
    pub eta_levels: Vec<f64>,
    pub variants: Vec<AblationFlags>,
    pub inflation: f64,
    pub theta_grid: Vec<f64>,
    pub validation_seeds: usize,
    pub validation_episodes: usize,
    pub empirical: EmpiricalStats,
    /// Defaults to the uniform distribution over the env's think-cost range.
    pub source: Option<SourceMoments>,
    pub mc_samples: usize,
    /// Emit per-step episode logs.
    pub logs: bool,
}

pub fn ablation_set() -> Vec<AblationFlags> {
    let f = AblationFlags::NONE;
    vec![
        f,
        AblationFlags { no_budget_feature: true, ..f },
        AblationFlags { no_history_feature: true, ..f },
        AblationFlags { planner_only: true, ..f },
        AblationFlags { verifier_only: true, ..f },
        AblationFlags { fixed_budget: true, ..f },
    ]
}

impl Default for KindParams {
    fn default() -> Self {
        Self {
            std_levels: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            shock_fraction: 0.5,
            q_levels: vec![0.5, 0.7, 0.9],
            eta_levels: vec![0.2, 0.5, 0.8],
            variants: ablation_set(),
            inflation: 1.5,
            theta_grid: vec![0.3, 0.5, 0.7],
            validation_seeds: 3,
            validation_episodes: 200,
            empirical: MEASURED,
            source: None,
            mc_samples: 1_000_000,
            logs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub env: EnvRef,
    #[serde(default = "default_deciders")]
    pub deciders: Vec<NamedDecider>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub params: KindParams,
}

fn default_seeds() -> usize {
    5
}

fn default_episodes() -> usize {
    200
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            env: EnvRef::default(),
            deciders: default_deciders(),
            seeds: default_seeds(),
            base_seed: 0,
            episodes: default_episodes(),
            ppo: PpoConfig::default(),
            params: KindParams::default(),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }

    /// Structural checks that need no environment.
    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds == 0 {
            return bad("seeds must be >= 1".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be >= 1".into());
        }
        self.ppo.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let p = &self.params;
        if p.std_levels.windows(2).any(|w| w[0] > w[1]) || p.std_levels.iter().any(|v| !(*v >= 0.0)) {
            return bad("std_levels must be non-negative and sorted ascending".into());
        }
        if self.kind == ExperimentKind::BudgetShock && !(p.shock_fraction > 0.0 && p.shock_fraction < 1.0) {
            return bad(format!("shock_fraction {} outside (0, 1)", p.shock_fraction));
        }
        if self.kind == ExperimentKind::CeilingGrid && (p.q_levels.len() < 2 || p.eta_levels.len() < 2) {
            return bad("ceiling grid needs >= 2 levels per axis".into());
        }
        if !(p.inflation >= 0.0) {
            return bad(format!("inflation {} must be >= 0", p.inflation));
        }
        let mut names: Vec<&str> = self.deciders.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("decider names must be unique".into());
        }
        for d in &self.deciders {
            match &d.spec {
                DeciderSpec::FixedInterval { k: 0 } => return bad(format!("{}: k must be >= 1", d.name)),
                DeciderSpec::Heuristic { theta: Some(t) } if !(0.0..=1.0).contains(t) => {
                    return bad(format!("{}: theta {t} outside [0, 1]", d.name))
                }
                DeciderSpec::ConstrainedLearned { c_max: None, c_max_fraction: None, .. } => {
                    return bad(format!("{}: constrained decider needs c_max or c_max_fraction", d.name))
                }
                DeciderSpec::Learned { ablation, .. } if ablation.planner_only && ablation.verifier_only => {
                    return bad(format!("{}: planner_only and verifier_only are exclusive", d.name))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Everything an experiment needs besides the decider set.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub cfg: ValidatedConfig,
    pub profile: LatencyProfile,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub ppo: PpoConfig,
    pub exec: Execution,
}

impl Setup {
    pub fn new(cfg: ValidatedConfig, seeds: Vec<u64>, episodes: usize, ppo: PpoConfig, exec: Execution) -> Result<Self, HarnessError> {
        let profile = profile_for(cfg.get())?;
        Ok(Self { cfg, profile, seeds, episodes, ppo, exec })
    }

    pub fn from_spec(spec: &ExperimentSpec, base_dir: &Path, exec: Execution) -> Result<Self, HarnessError> {
        spec.check()?;
        Self::new(spec.env.resolve(base_dir)?, spec.seed_list(), spec.episodes, spec.ppo.clone(), exec)
    }

    /// Same setup on a modified environment.
    pub fn with_env(&self, f: impl FnOnce(&mut EnvConfig)) -> Result<Self, HarnessError> {
        let cfg = self.cfg.modify(f)?;
        Self::new(cfg, self.seeds.clone(), self.episodes, self.ppo.clone(), self.exec)
    }
}

/// One decider bound to a concrete policy per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub name: String,
    pub per_seed: Vec<DeciderKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub name: String,
    pub seed: u64,
    pub output: TrainOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningPoint {
    pub theta: f64,
    pub tsr: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Resolution {
    pub deciders: Vec<Resolved>,
    pub trained: Vec<TrainedRun>,
    pub tuning: Vec<(String, Vec<TuningPoint>)>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Saved learned policy and optimizer state together with what produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: usize,
    pub policy: LearnedPolicy,
    pub optimizer: Adam,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    pub dual: f64,
}

impl Checkpoint {
    pub fn from_output(out: &TrainOutput, cfg: &ValidatedConfig, ppo: &PpoConfig, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            iteration: out.curve.len(),
            policy: out.policy.clone(),
            optimizer: out.optimizer.clone(),
            env: cfg.get().clone(),
            ppo: ppo.clone(),
            seed,
            dual: out.dual,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Config(format!("{}: unsupported checkpoint version {}", path.display(), ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string(self).map_err(|e| HarnessError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }

    /// The policy bound to `cfg`, refusing mismatched ablation flags.
    pub fn bind(&self, cfg: &ValidatedConfig, requested: AblationFlags, name: &str) -> Result<LearnedPolicy, HarnessError> {
        let err = |source| HarnessError::Decider { name: name.to_string(), source };
        self.policy.check_flags(requested).map_err(err)?;
        self.policy.clone().bind(cfg.get()).map_err(err)
    }
}

pub fn train_variant(setup: &Setup, name: &str, ablation: AblationFlags, constraint: Option<ConstraintConfig>, seed: u64) -> Result<TrainOutput, HarnessError> {
    let ppo = PpoConfig { ablation, constraint, ..setup.ppo.clone() };
    train(&ppo, &setup.cfg, &setup.profile, seed, setup.exec)
        .map_err(|source| HarnessError::Train { name: name.to_string(), seed, source })
}

/// Constrained training that starts from an unconstrained reference policy.
pub fn train_constrained(setup: &Setup, name: &str, reference: &TrainOutput, c_max: f64, seed: u64) -> Result<TrainOutput, HarnessError> {
    let ppo = PpoConfig { constraint: Some(ConstraintConfig::new(c_max)), ..setup.ppo.clone() };
    let stream_seed = seed.wrapping_add(FINETUNE_SEED_OFFSET);
    train_from(reference.policy.clone(), &ppo, &setup.cfg, &setup.profile, stream_seed, setup.exec, |_, _, _| {})
        .map_err(|source| HarnessError::Train { name: name.to_string(), seed, source })
}

/// Mean reasoning cost over the last [`CONVERGED_TAIL`] training iterations.
pub fn converged_cost(out: &TrainOutput) -> f64 {
    let costs: Vec<f64> = out.curve.iter().map(|m| m.mean_cost).collect();
    tail_mean(&costs, CONVERGED_TAIL)
}

/// Episode outputs of one decider on one seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeedRun {
    pub metrics: SeedMetrics,
    pub episodes: Vec<EpisodeMetrics>,
    pub records: Vec<StepRecord>,
    pub shocks: Vec<ShockSplit>,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_seed(
    decider: &DeciderKind,
    cfg: &ValidatedConfig,
    profile: &LatencyProfile,
    seed: u64,
    episodes: usize,
    shock: Option<ShockSpec>,
    record: bool,
    exec: Execution,
) -> Result<SeedRun, RolloutError> {
    let outs = try_map_indexed(exec, episodes, |e| {
        let mut ctx = EpisodeCtx::eval(cfg, profile, seed, e as u64);
        ctx.shock = shock;
        ctx.record_steps = record;
        run_episode(decider, &ctx)
    })?;
    let mut run = SeedRun::default();
    for o in outs {
        run.episodes.push(o.metrics);
        run.records.extend(o.records);
        run.shocks.extend(o.shock);
    }
    run.metrics = SeedMetrics::from_episodes(&run.episodes);
    Ok(run)
}

fn eval_all_seeds(setup: &Setup, d: &Resolved, shock: Option<ShockSpec>, record: bool) -> Result<Vec<SeedRun>, HarnessError> {
    try_map_indexed(setup.exec, setup.seeds.len(), |i| {
        evaluate_seed(&d.per_seed[i], &setup.cfg, &setup.profile, setup.seeds[i], setup.episodes, shock, record, setup.exec)
    })
    .map_err(|source| HarnessError::Rollout { name: d.name.clone(), source })
}

/// Picks the threshold with the highest validation TSR; ties go to the earlier grid entry.
pub fn tune_heuristic(setup: &Setup, grid: &[f64], validation_seeds: usize, episodes: usize) -> Result<(f64, Vec<TuningPoint>), HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty theta grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &theta in grid {
        let d = DeciderKind::Heuristic { theta };
        let runs = try_map_indexed(setup.exec, validation_seeds, |i| {
            evaluate_seed(&d, &setup.cfg, &setup.profile, VALIDATION_SEED_OFFSET + i as u64, episodes, None, false, setup.exec)
        })
        .map_err(|source| HarnessError::Rollout { name: format!("heuristic({theta})"), source })?;
        let tsr = runs.iter().map(|r| r.metrics.tsr).sum::<f64>() / validation_seeds.max(1) as f64;
        points.push(TuningPoint { theta, tsr, selected: false });
    }
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.tsr > points[best].tsr {
            best = i;
        }
    }
    points[best].selected = true;
    Ok((points[best].theta, points))
}

/// Binds every decider spec to per-seed deciders, training learned ones as needed.
pub fn resolve_deciders(setup: &Setup, specs: &[NamedDecider], params: &KindParams, base_dir: &Path) -> Result<Resolution, HarnessError> {
    let mut res = Resolution::default();
    let n = setup.seeds.len();
    for nd in specs {
        let name = nd.name.clone();
        let same = |d: DeciderKind| vec![d; n];
        let per_seed = match &nd.spec {
            DeciderSpec::NoReasoning => same(DeciderKind::NoReasoning),
            DeciderSpec::FullReasoning { role, budget } => same(DeciderKind::FullReasoning { role: *role, budget: *budget }),
            DeciderSpec::FixedInterval { k } => same(DeciderKind::FixedInterval { k: *k }),
            DeciderSpec::Heuristic { theta: Some(theta) } => same(DeciderKind::Heuristic { theta: *theta }),
            DeciderSpec::Heuristic { theta: None } => {
                let (theta, points) = tune_heuristic(setup, &params.theta_grid, params.validation_seeds, params.validation_episodes)?;
                res.tuning.push((name.clone(), points));
                same(DeciderKind::Heuristic { theta })
            }
            DeciderSpec::Learned { ablation, checkpoint: Some(path), greedy } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let policy = Checkpoint::load(&full)?.bind(&setup.cfg, *ablation, &name)?;
                same(DeciderKind::Learned { policy: Box::new(policy), greedy: *greedy })
            }
            DeciderSpec::Learned { ablation, checkpoint: None, greedy } => {
                let outs = try_map_indexed(setup.exec, n, |i| train_variant(setup, &name, *ablation, None, setup.seeds[i]))?;
                let mut ds = Vec::with_capacity(n);
                for (seed, output) in setup.seeds.iter().zip(outs) {
                    ds.push(DeciderKind::Learned { policy: Box::new(output.policy.clone()), greedy: *greedy });
                    res.trained.push(TrainedRun { name: name.clone(), seed: *seed, output });
                }
                ds
            }
            DeciderSpec::ConstrainedLearned { c_max, c_max_fraction, greedy } => {
                let outs = try_map_indexed(setup.exec, n, |i| {
                    let seed = setup.seeds[i];
                    let reference = train_variant(setup, &format!("{name}_reference"), AblationFlags::NONE, None, seed)?;
                    let limit = match (c_max, c_max_fraction) {
                        (Some(c), _) => *c,
                        (None, Some(frac)) => frac * converged_cost(&reference),
                        (None, None) => return Err(HarnessError::Config(format!("{name}: needs c_max or c_max_fraction"))),
                    };
                    let out = train_constrained(setup, &name, &reference, limit, seed)?;
                    Ok((out, Some(reference)))
                })?;
                let mut ds = Vec::with_capacity(n);
                for (seed, (output, reference)) in setup.seeds.iter().zip(outs) {
                    ds.push(DeciderKind::ConstrainedLearned { policy: Box::new(output.policy.clone()), dual: output.dual, greedy: *greedy });
                    if let Some(r) = reference {
                        res.trained.push(TrainedRun { name: format!("{name}_reference"), seed: *seed, output: r });
                    }
                    res.trained.push(TrainedRun { name: name.clone(), seed: *seed, output });
                }
                ds
            }
        };
        for d in &per_seed {
            d.validate().map_err(|source| HarnessError::Decider { name: name.clone(), source })?;
        }
        res.deciders.push(Resolved { name, per_seed });
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub summaries: Vec<MetricsSummary>,
    /// Step logs per decider, seeds in order.
    pub logs: Vec<(String, Vec<StepRecord>)>,
}

pub fn evaluate(setup: &Setup, deciders: &[Resolved], record: bool) -> Result<EvalResult, HarnessError> {
    let mut out = EvalResult::default();
    for d in deciders {
        let runs = eval_all_seeds(setup, d, None, record)?;
        let per_seed = runs.iter().map(|r| r.metrics).collect();
        out.summaries.push(MetricsSummary::from_seeds(&d.name, &setup.seeds, per_seed));
        if record {
            out.logs.push((d.name.clone(), runs.into_iter().flat_map(|r| r.records).collect()));
        }
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub decider: String,
    pub std_scale: f64,
    pub tsr_mean: f64,
    pub tsr_std: f64,
    pub rf_mean: f64,
    pub tsr_per_seed: Vec<f64>,
}

impl SweepRow {
    pub const COLUMNS: [&'static str; 5] = ["decider", "std_scale", "tsr_mean", "tsr_std", "rf_mean"];

    pub fn row(&self) -> Vec<String> {
        vec![self.decider.clone(), f6(self.std_scale), f6(self.tsr_mean), f6(self.tsr_std), f6(self.rf_mean)]
    }
}

/// Evaluates each decider with every latency spread scaled by each level, means held fixed.
pub fn latency_sweep(setup: &Setup, deciders: &[Resolved], levels: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::Config("variance levels must be sorted ascending".into()));
    }
    let mut rows = Vec::with_capacity(levels.len() * deciders.len());
    for &level in levels {
        let s = setup.with_env(|c| c.latency_std_scale = level)?;
        for d in deciders {
            let runs = eval_all_seeds(&s, d, None, false)?;
            let tsr: Vec<f64> = runs.iter().map(|r| r.metrics.tsr).collect();
            let rf: Vec<f64> = runs.iter().map(|r| r.metrics.rf).collect();
            let (tsr_mean, tsr_std) = mean_std(&tsr);
            rows.push(SweepRow { decider: d.name.clone(), std_scale: level, tsr_mean, tsr_std, rf_mean: mean_std(&rf).0, tsr_per_seed: tsr });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockRow {
    pub decider: String,
    pub seed: u64,
    /// TSR of the same episodes without the shock.
    pub tsr_pre: f64,
    pub tsr_post: f64,
    /// Invocations per [`RI_STEPS`] steps before the shock step.
    pub ri_pre: f64,
    pub ri_post: f64,
}

impl ShockRow {
    pub const COLUMNS: [&'static str; 6] = ["decider", "seed", "tsr_pre", "tsr_post", "ri_pre", "ri_post"];

    pub fn row(&self) -> Vec<String> {
        vec![self.decider.clone(), self.seed.to_string(), f6(self.tsr_pre), f6(self.tsr_post), f6(self.ri_pre), f6(self.ri_post)]
    }
}

/// Pooled invocation rates of the pre- and post-shock segments, per [`RI_STEPS`] steps.
pub fn segment_rates(splits: &[ShockSplit]) -> (f64, f64) {
    let sum = |f: &dyn Fn(&ShockSplit) -> usize| splits.iter().map(f).sum::<usize>() as f64;
    let rate = |inv: f64, steps: f64| if steps > 0.0 { RI_STEPS * inv / steps } else { 0.0 };
    (
        rate(sum(&|s| s.invocations_pre), sum(&|s| s.steps_pre)),
        rate(sum(&|s| s.invocations_post), sum(&|s| s.steps_post)),
    )
}

pub fn budget_shock_experiment(setup: &Setup, deciders: &[Resolved], fraction: f64) -> Result<Vec<ShockRow>, HarnessError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(HarnessError::Config(format!("shock fraction {fraction} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for d in deciders {
        let base = eval_all_seeds(setup, d, None, false)?;
        let shocked = eval_all_seeds(setup, d, Some(ShockSpec { fraction }), false)?;
        for ((seed, b), s) in setup.seeds.iter().zip(&base).zip(&shocked) {
            let (ri_pre, ri_post) = segment_rates(&s.shocks);
            rows.push(ShockRow { decider: d.name.clone(), seed: *seed, tsr_pre: b.metrics.tsr, tsr_post: s.metrics.tsr, ri_pre, ri_post });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeilingRow {
    pub q_exec: f64,
    pub eta: f64,
    pub decider: String,
    pub tsr_mean: f64,
    pub tsr_std: f64,
    pub tsr_per_seed: Vec<f64>,
}

impl CeilingRow {
    pub const COLUMNS: [&'static str; 5] = ["q_exec", "eta", "decider", "tsr_mean", "tsr_std"];

    pub fn row(&self) -> Vec<String> {
        vec![f6(self.q_exec), f6(self.eta), self.decider.clone(), f6(self.tsr_mean), f6(self.tsr_std)]
    }
}

/// One row per (q_exec, eta, decider), q-major; deciders are re-resolved (and retrained) per cell.
pub fn ceiling_grid(
    setup: &Setup,
    specs: &[NamedDecider],
    q_levels: &[f64],
    eta_levels: &[f64],
    params: &KindParams,
    base_dir: &Path,
) -> Result<Vec<CeilingRow>, HarnessError> {
    if q_levels.len() < 2 || eta_levels.len() < 2 {
        return Err(HarnessError::Config("ceiling grid needs >= 2 levels per axis".into()));
    }
    let mut rows = Vec::with_capacity(q_levels.len() * eta_levels.len() * specs.len());
    for &q in q_levels {
        for &eta in eta_levels {
            let cell = setup.with_env(|c| {
                c.exec_strength = q;
                c.eta = eta;
            })?;
            let res = resolve_deciders(&cell, specs, params, base_dir)?;
            for d in &res.deciders {
                let runs = eval_all_seeds(&cell, d, None, false)?;
                let tsr: Vec<f64> = runs.iter().map(|r| r.metrics.tsr).collect();
                let (tsr_mean, tsr_std) = mean_std(&tsr);
                rows.push(CeilingRow { q_exec: q, eta, decider: d.name.clone(), tsr_mean, tsr_std, tsr_per_seed: tsr });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub tsr_mean: f64,
    pub tsr_std: f64,
    /// Reasoning invocations per episode.
    pub ri_mean: f64,
    pub cost_mean: f64,
    /// Mean cost relative to the first variant.
    pub cost_norm: f64,
    pub tsr_per_seed: Vec<f64>,
    pub ri_per_seed: Vec<f64>,
}

impl AblationRow {
    pub const COLUMNS: [&'static str; 6] = ["variant", "tsr_mean", "tsr_std", "ri_mean", "cost_mean", "cost_norm"];

    pub fn row(&self) -> Vec<String> {
        vec![self.variant.clone(), f6(self.tsr_mean), f6(self.tsr_std), f6(self.ri_mean), f6(self.cost_mean), f6(self.cost_norm)]
    }
}

/// Trains and evaluates every variant on the same seeds; cost is normalised by the first variant.
pub fn run_ablations(setup: &Setup, variants: &[AblationFlags]) -> Result<(Vec<AblationRow>, Vec<TrainedRun>), HarnessError> {
    let mut rows: Vec<AblationRow> = Vec::with_capacity(variants.len());
    let mut trained = Vec::new();
    for flags in variants {
        let name = flags.label().to_string();
        let spec = NamedDecider::new(&name, DeciderSpec::Learned { ablation: *flags, checkpoint: None, greedy: false });
        let res = resolve_deciders(setup, std::slice::from_ref(&spec), &KindParams::default(), Path::new("."))?;
        let runs = eval_all_seeds(setup, &res.deciders[0], None, false)?;
        let tsr: Vec<f64> = runs.iter().map(|r| r.metrics.tsr).collect();
        let ri: Vec<f64> = runs.iter().map(|r| r.metrics.rf).collect();
        let cost: Vec<f64> = runs.iter().map(|r| r.metrics.mean_cost).collect();
        let (tsr_mean, tsr_std) = mean_std(&tsr);
        let cost_mean = mean_std(&cost).0;
        let reference = rows.first().map_or(cost_mean, |r| r.cost_mean);
        let cost_norm = if reference > 0.0 { cost_mean / reference } else { 0.0 };
        rows.push(AblationRow { variant: name, tsr_mean, tsr_std, ri_mean: mean_std(&ri).0, cost_mean, cost_norm, tsr_per_seed: tsr, ri_per_seed: ri });
        trained.extend(res.trained);
    }
    Ok((rows, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub decider: String,
    pub seed: u64,
    pub tsr_base: f64,
    pub tsr_shift: f64,
    pub rf_base: f64,
    pub rf_shift: f64,
}

impl ShiftRow {
    pub const COLUMNS: [&'static str; 8] = ["decider", "seed", "tsr_base", "tsr_shift", "rf_base", "rf_shift", "delta_tsr", "delta_rf"];

    pub fn row(&self) -> Vec<String> {
        vec![
            self.decider.clone(),
            self.seed.to_string(),
            f6(self.tsr_base),
            f6(self.tsr_shift),
            f6(self.rf_base),
            f6(self.rf_shift),
            f6(self.tsr_shift - self.tsr_base),
            f6(self.rf_shift - self.rf_base),
        ]
    }
}

/// Evaluates the same deciders with reasoning latency and cost inflated, without retraining.
pub fn shift_check(setup: &Setup, deciders: &[Resolved], inflation: f64) -> Result<Vec<ShiftRow>, HarnessError> {
    let shifted = setup.with_env(|c| c.reasoning_inflation = inflation)?;
    let mut rows = Vec::new();
    for d in deciders {
        let base = eval_all_seeds(setup, d, None, false)?;
        let shift = eval_all_seeds(&shifted, d, None, false)?;
        for ((seed, b), s) in setup.seeds.iter().zip(&base).zip(&shift) {
            rows.push(ShiftRow {
                decider: d.name.clone(),
                seed: *seed,
                tsr_base: b.metrics.tsr,
                tsr_shift: s.metrics.tsr,
                rf_base: b.metrics.rf,
                rf_shift: s.metrics.rf,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub calibration: Calibration,
    pub target: EmpiricalStats,
    pub source: SourceMoments,
    pub samples: usize,
    pub mc_mean_sec: f64,
    pub mc_std_sec: f64,
}

impl CalibrationReport {
    pub const COLUMNS: [&'static str; 8] = ["a", "b", "token_scale", "target_mean_sec", "target_std_sec", "mc_mean_sec", "mc_std_sec", "samples"];

    pub fn row(&self) -> Vec<String> {
        let c = &self.calibration;
        vec![
            format!("{:.12}", c.a),
            format!("{:.12}", c.b),
            format!("{:.12}", c.token_scale),
            f6(self.target.mean_sec),
            f6(self.target.std_sec),
            f6(self.mc_mean_sec),
            f6(self.mc_std_sec),
            self.samples.to_string(),
        ]
    }
}

/// Affine calibration plus a Monte-Carlo check that maps uniform `[lo, hi]` draws through it.
pub fn calibrate_uniform(target: EmpiricalStats, lo: f64, hi: f64, samples: usize, seed: u64, exec: Execution) -> Result<CalibrationReport, HarnessError> {
    let source = SourceMoments::uniform(lo, hi);
    let calibration = calibrate(target, source)?;
    const CHUNK: usize = 65_536;
    let chunks = samples.div_ceil(CHUNK);
    let partial = map_indexed(exec, chunks, |c| {
        let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Calibration, 0, c as u64));
        let n = CHUNK.min(samples - c * CHUNK);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = calibration.seconds(rng.uniform_range(lo, hi));
            s1 += x;
            s2 += x * x;
        }
        (s1, s2)
    });
    let (s1, s2) = partial.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let n = samples.max(1) as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean) * n / (n - 1.0).max(1.0);
    Ok(CalibrationReport { calibration, target, source, samples, mc_mean_sec: mean, mc_std_sec: var.max(0.0).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(episodes: usize) -> Setup {
        let cfg = validate_config(EnvConfig::delivery()).unwrap();
        Setup::new(cfg, vec![0, 1], episodes, PpoConfig::default(), Execution::Sequential).unwrap()
    }

    fn fixed(name: &str, d: DeciderKind, n: usize) -> Resolved {
        Resolved { name: name.into(), per_seed: vec![d; n] }
    }

    #[test]
    fn spec_defaults_parse() {
        let spec: ExperimentSpec = serde_json::from_str(r#"{"kind": "budget-shock"}"#).unwrap();
        assert_eq!(spec.seeds, 5);
        assert_eq!(spec.episodes, 200);
        assert_eq!(spec.params.shock_fraction, 0.5);
        assert_eq!(spec.deciders.len(), 6);
        assert_eq!(spec.seed_list(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unknown_spec_key_rejected() {
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"kind": "eval", "sedes": 3}"#).is_err());
    }

    #[test]
    fn env_overrides_merge() {
        let mut r = EnvRef::default();
        r.overrides.insert("p_nav".into(), Value::from(0.3));
        r.overrides.insert("reward".into(), serde_json::json!({"mu": 0.25}));
        let cfg = r.resolve(Path::new(".")).unwrap();
        assert_eq!(cfg.get().p_nav, 0.3);
        assert_eq!(cfg.get().reward.mu, 0.25);
        assert_eq!(cfg.get().reward.lambda, 1.0);
    }

    #[test]
    fn bad_override_is_config_error() {
        let mut r = EnvRef::default();
        r.overrides.insert("p_nav".into(), Value::from(1.2));
        let err = r.resolve(Path::new(".")).unwrap_err();
        assert!(err.is_config());
        r.overrides.clear();
        r.overrides.insert("p_naw".into(), Value::from(0.1));
        assert!(r.resolve(Path::new(".")).unwrap_err().is_config());
    }

    #[test]
    fn no_reasoning_has_zero_rf_and_tokens() {
        let s = setup(30);
        let out = evaluate(&s, &[fixed("none", DeciderKind::NoReasoning, 2)], false).unwrap();
        assert_eq!(out.summaries[0].mean.rf, 0.0);
        assert_eq!(out.summaries[0].mean.tokens, 0.0);
    }

    #[test]
    fn full_reasoning_rf_bounded_by_horizon() {
        let s = setup(20);
        let d = DeciderKind::FullReasoning { role: ReasoningRole::Plan, budget: BudgetLevel::LOW };
        let out = evaluate(&s, &[fixed("full", d, 2)], false).unwrap();
        let m = &out.summaries[0].mean;
        assert!(m.rf <= 50.0);
        assert_eq!(m.rf, m.el_steps);
    }

    #[test]
    fn zero_shock_keeps_tsr() {
        let s = setup(40);
        let rows = budget_shock_experiment(&s, &[fixed("h", DeciderKind::Heuristic { theta: 0.5 }, 2)], 0.0).unwrap();
        for r in rows {
            assert_eq!(r.tsr_pre, r.tsr_post);
        }
    }

    #[test]
    fn sweep_level_one_matches_plain_eval() {
        let s = setup(30);
        let d = [fixed("h", DeciderKind::Heuristic { theta: 0.5 }, 2)];
        let plain = evaluate(&s, &d, false).unwrap();
        let rows = latency_sweep(&s, &d, &[1.0]).unwrap();
        assert_eq!(rows[0].tsr_mean, plain.summaries[0].mean.tsr);
        assert!(latency_sweep(&s, &d, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn unit_inflation_is_identity() {
        let s = setup(30);
        let rows = shift_check(&s, &[fixed("f", DeciderKind::FixedInterval { k: 3 }, 2)], 1.0).unwrap();
        for r in rows {
            assert_eq!((r.tsr_base, r.rf_base), (r.tsr_shift, r.rf_shift));
        }
    }

    #[test]
    fn tuning_marks_one_selection() {
        let s = setup(10);
        let (theta, pts) = tune_heuristic(&s, &[0.3, 0.5, 0.7], 2, 20).unwrap();
        assert_eq!(pts.iter().filter(|p| p.selected).count(), 1);
        assert!(pts.iter().any(|p| p.selected && p.theta == theta));
    }

    #[test]
    fn calibration_example() {
        let r = calibrate_uniform(MEASURED, 5.0, 20.0, 200_000, 1, Execution::Sequential).unwrap();
        assert!((r.calibration.a - 0.062355).abs() < 5e-6);
        assert!((r.calibration.b - 0.04056).abs() < 5e-5);
        assert!((r.mc_mean_sec - 0.82).abs() < 3e-3);
    }

    #[test]
    fn spec_check_catches_duplicates() {
        let mut spec = ExperimentSpec::new(ExperimentKind::Eval);
        spec.deciders.push(NamedDecider::new("learned", DeciderSpec::NoReasoning));
        assert!(spec.check().is_err());
    }
}
