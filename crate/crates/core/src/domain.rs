//! Shared value types, configuration records and the random-stream contract.

use std::fmt;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A low-level primitive the fixed executor can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "target")]
pub enum PrimitiveAction {
    Navigate(usize),
    Inspect,
    Pick,
    Deliver(usize),
    Wait,
}

/// Coarse primitive category, used for history encoding and role effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Navigate,
    Inspect,
    Pick,
    Deliver,
    Wait,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 5] = [
        PrimitiveKind::Navigate,
        PrimitiveKind::Inspect,
        PrimitiveKind::Pick,
        PrimitiveKind::Deliver,
        PrimitiveKind::Wait,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveKind::Navigate => "navigate",
            PrimitiveKind::Inspect => "inspect",
            PrimitiveKind::Pick => "pick",
            PrimitiveKind::Deliver => "deliver",
            PrimitiveKind::Wait => "wait",
        }
    }
}

impl PrimitiveAction {
    pub fn kind(self) -> PrimitiveKind {
        match self {
            PrimitiveAction::Navigate(_) => PrimitiveKind::Navigate,
            PrimitiveAction::Inspect => PrimitiveKind::Inspect,
            PrimitiveAction::Pick => PrimitiveKind::Pick,
            PrimitiveAction::Deliver(_) => PrimitiveKind::Deliver,
            PrimitiveAction::Wait => PrimitiveKind::Wait,
        }
    }
}

impl fmt::Display for PrimitiveAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrimitiveAction::Navigate(r) => write!(f, "navigate({r})"),
            PrimitiveAction::Deliver(z) => write!(f, "deliver({z})"),
            other => f.write_str(other.kind().as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningRole {
    Plan,
    Verify,
}

impl ReasoningRole {
    pub const ALL: [ReasoningRole; 2] = [ReasoningRole::Plan, ReasoningRole::Verify];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => ReasoningRole::Plan,
            _ => ReasoningRole::Verify,
        }
    }

    /// The role added as the second call at budget level 2.
    pub fn other(self) -> Self {
        match self {
            ReasoningRole::Plan => ReasoningRole::Verify,
            ReasoningRole::Verify => ReasoningRole::Plan,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningRole::Plan => "plan",
            ReasoningRole::Verify => "verify",
        }
    }
}

/// Discrete compute tier: 0 (no call), 1 (one capped call), 2 (two larger calls).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BudgetLevel(u8);

impl BudgetLevel {
    pub const NONE: BudgetLevel = BudgetLevel(0);
    pub const LOW: BudgetLevel = BudgetLevel(1);
    pub const HIGH: BudgetLevel = BudgetLevel(2);

    pub fn new(level: u8) -> Option<Self> {
        (level <= 2).then_some(BudgetLevel(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn invocation(self) -> InvocationConfig {
        budget_level_to_invocation(self)
    }
}

impl TryFrom<u8> for BudgetLevel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        BudgetLevel::new(v).ok_or_else(|| format!("budget level {v} outside 0..=2"))
    }
}

impl From<BudgetLevel> for u8 {
    fn from(b: BudgetLevel) -> u8 {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationConfig {
    pub call_count: u32,
    pub token_cap: u32,
}

impl InvocationConfig {
    pub fn total_tokens(&self) -> u32 {
        self.call_count * self.token_cap
    }
}

/// Maps a budget level to the concrete reasoning invocation it stands for.
pub fn budget_level_to_invocation(c: BudgetLevel) -> InvocationConfig {
    match c.0 {
        0 => InvocationConfig { call_count: 0, token_cap: 0 },
        1 => InvocationConfig { call_count: 1, token_cap: 256 },
        _ => InvocationConfig { call_count: 2, token_cap: 512 },
    }
}

/// The decider's choice for one decision step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAction", into = "RawAction")]
pub enum OrchestrationAction {
    Act,
    Think { role: ReasoningRole, budget: BudgetLevel },
}

impl OrchestrationAction {
    /// Builds a THINK action; level 0 is not a THINK and is rejected.
    pub fn think(role: ReasoningRole, budget: BudgetLevel) -> Option<Self> {
        (budget.level() >= 1).then_some(OrchestrationAction::Think { role, budget })
    }

    pub fn is_think(&self) -> bool {
        matches!(self, OrchestrationAction::Think { .. })
    }

    pub fn budget_level(&self) -> BudgetLevel {
        match self {
            OrchestrationAction::Act => BudgetLevel::NONE,
            OrchestrationAction::Think { budget, .. } => *budget,
        }
    }

    pub fn role(&self) -> Option<ReasoningRole> {
        match self {
            OrchestrationAction::Act => None,
            OrchestrationAction::Think { role, .. } => Some(*role),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
enum RawAction {
    Act,
    Think { role: ReasoningRole, budget: BudgetLevel },
}

impl TryFrom<RawAction> for OrchestrationAction {
    type Error = String;

    fn try_from(raw: RawAction) -> Result<Self, Self::Error> {
        match raw {
            RawAction::Act => Ok(OrchestrationAction::Act),
            RawAction::Think { role, budget } => OrchestrationAction::think(role, budget)
                .ok_or_else(|| "think requires budget level >= 1".to_string()),
        }
    }
}

impl From<OrchestrationAction> for RawAction {
    fn from(a: OrchestrationAction) -> Self {
        match a {
            OrchestrationAction::Act => RawAction::Act,
            OrchestrationAction::Think { role, budget } => RawAction::Think { role, budget },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Latency penalty weight.
    pub lambda: f64,
    /// Failure penalty.
    pub mu: f64,
    pub success_bonus: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda: 1.0, mu: 0.5, success_bonus: 5.0, gamma: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Delivery,
    StructuredNav,
    TaskDecomposition,
}

/// Per-role failure-reduction multipliers, indexed by primitive kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleEffects {
    pub plan: [f64; 5],
    pub verify: [f64; 5],
}

impl Default for RoleEffects {
    fn default() -> Self {
        // navigate, inspect, pick, deliver, wait
        Self { plan: [1.0, 0.0, 1.0, 1.0, 0.0], verify: [0.0, 1.0, 0.0, 0.0, 0.0] }
    }
}

impl RoleEffects {
    pub fn multiplier(&self, role: ReasoningRole, kind: PrimitiveKind) -> f64 {
        match role {
            ReasoningRole::Plan => self.plan[kind.index()],
            ReasoningRole::Verify => self.verify[kind.index()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task_family: TaskFamily,
    pub region_count: usize,
    pub zone_count: usize,
    /// Objects to deliver per episode (Delivery family).
    pub deliveries: usize,
    /// Chain length for the TaskDecomposition family.
    pub subgoals: usize,
    pub p_nav: f64,
    pub p_manip: f64,
    pub inspect_false_pos: f64,
    pub inspect_false_neg: f64,
    /// Probability that the episode's task region is cluttered.
    pub clutter_prob: f64,
    /// Failure floor for navigate/inspect/pick inside a cluttered task region.
    pub clutter_failure: f64,
    pub horizon: usize,
    pub initial_budget: (f64, f64),
    pub think_cost: (f64, f64),
    pub eta: f64,
    pub exec_strength: f64,
    pub history_window: usize,
    pub freshness_horizon: usize,
    /// Budget units consumed per unit of execution latency.
    pub exec_budget_rate: f64,
    /// Chance that a blind TaskDecomposition executor still picks the right primitive.
    pub blind_hint: f64,
    /// When set, a failed manipulation ends the episode in the failed-terminal phase.
    pub failure_terminal: bool,
    pub role_effects: RoleEffects,
    pub reward: RewardConfig,
    /// Latency profile id, resolved by [`crate::calib::LatencyProfile::by_id`].
    pub latency: String,
    pub latency_std_scale: f64,
    pub reasoning_inflation: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::delivery()
    }
}

impl EnvConfig {
    pub fn delivery() -> Self {
        Self {
            task_family: TaskFamily::Delivery,
            region_count: 3,
            zone_count: 1,
            deliveries: 3,
            subgoals: 6,
            p_nav: 0.1,
            p_manip: 0.1,
            inspect_false_pos: 0.05,
            inspect_false_neg: 0.10,
            clutter_prob: 0.6,
            clutter_failure: 0.75,
            horizon: 50,
            initial_budget: (25.0, 100.0),
            think_cost: (5.0, 20.0),
            eta: 0.6,
            exec_strength: 0.8,
            history_window: 5,
            freshness_horizon: 6,
            exec_budget_rate: 1.0,
            blind_hint: 0.4,
            failure_terminal: false,
            role_effects: RoleEffects::default(),
            reward: RewardConfig::default(),
            latency: "default".to_string(),
            latency_std_scale: 1.0,
            reasoning_inflation: 1.0,
        }
    }

    /// Two-region single delivery with fixed budget and costs and deterministic latencies.
    ///
    /// Guidance only conditions the primitive of the step it was issued in, and
    /// every quantity the dynamics depend on is observed, so the process is a
    /// small fully observed MDP.
    pub fn micro_delivery() -> Self {
        Self {
            region_count: 2,
            deliveries: 1,
            p_nav: 0.3,
            p_manip: 0.3,
            inspect_false_pos: 0.0,
            inspect_false_neg: 0.0,
            clutter_prob: 0.0,
            horizon: 10,
            initial_budget: (20.0, 20.0),
            think_cost: (5.0, 5.0),
            eta: 0.9,
            exec_strength: 1.0,
            history_window: 1,
            freshness_horizon: 0,
            exec_budget_rate: 0.0,
            reward: RewardConfig { lambda: 0.5, mu: 5.0, success_bonus: 10.0, gamma: 0.99 },
            latency: "deterministic".to_string(),
            ..Self::delivery()
        }
    }

    pub fn structured_nav() -> Self {
        Self { task_family: TaskFamily::StructuredNav, region_count: 8, ..Self::delivery() }
    }

    pub fn task_decomposition() -> Self {
        Self { task_family: TaskFamily::TaskDecomposition, ..Self::delivery() }
    }

    pub fn for_family(family: TaskFamily) -> Self {
        match family {
            TaskFamily::Delivery => Self::delivery(),
            TaskFamily::StructuredNav => Self::structured_nav(),
            TaskFamily::TaskDecomposition => Self::task_decomposition(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("probability-out-of-range({field}, {value})")]
    ProbabilityOutOfRange { field: &'static str, value: f64 },
    #[error("empty-range({field})")]
    EmptyRange { field: &'static str },
    #[error("negative-value({field}, {value})")]
    Negative { field: &'static str, value: f64 },
    #[error("too-small({field}, {value}, min {min})")]
    TooSmall { field: &'static str, value: usize, min: usize },
    #[error("discount-out-of-range(gamma, {0})")]
    Discount(f64),
    #[error("unknown-latency-profile({0})")]
    UnknownProfile(String),
    #[error("non-finite({field})")]
    NonFinite { field: &'static str },
}

/// The complete list of violations found in a config.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<ConfigError>);

/// An [`EnvConfig`] that passed [`validate_config`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedConfig(EnvConfig);

impl ValidatedConfig {
    pub fn get(&self) -> &EnvConfig {
        &self.0
    }

    pub fn into_inner(self) -> EnvConfig {
        self.0
    }

    /// Re-validates after a modification.
    pub fn modify(&self, f: impl FnOnce(&mut EnvConfig)) -> Result<Self, ConfigErrors> {
        let mut cfg = self.0.clone();
        f(&mut cfg);
        validate_config(cfg)
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = EnvConfig;

    fn deref(&self) -> &EnvConfig {
        &self.0
    }
}

impl<'de> Deserialize<'de> for ValidatedConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let cfg = EnvConfig::deserialize(d)?;
        validate_config(cfg).map_err(serde::de::Error::custom)
    }
}

pub fn validate_config(cfg: EnvConfig) -> Result<ValidatedConfig, ConfigErrors> {
    let mut errs = Vec::new();
    let probs: [(&'static str, f64); 9] = [
        ("p-nav", cfg.p_nav),
        ("p-manip", cfg.p_manip),
        ("inspect-false-pos", cfg.inspect_false_pos),
        ("inspect-false-neg", cfg.inspect_false_neg),
        ("clutter-prob", cfg.clutter_prob),
        ("clutter-failure", cfg.clutter_failure),
        ("eta", cfg.eta),
        ("exec-strength", cfg.exec_strength),
        ("blind-hint", cfg.blind_hint),
    ];
    for (field, value) in probs {
        if !(0.0..=1.0).contains(&value) {
            errs.push(ConfigError::ProbabilityOutOfRange { field, value });
        }
    }
    let ranges = [("initial-budget-range", cfg.initial_budget), ("think-cost-range", cfg.think_cost)];
    for (field, (lo, hi)) in ranges {
        if !lo.is_finite() || !hi.is_finite() {
            errs.push(ConfigError::NonFinite { field });
        } else if lo > hi {
            errs.push(ConfigError::EmptyRange { field });
        } else if lo < 0.0 {
            errs.push(ConfigError::Negative { field, value: lo });
        }
    }
    let counts = [
        ("horizon", cfg.horizon, 1),
        ("region-count", cfg.region_count, 2),
        ("zone-count", cfg.zone_count, 1),
        ("deliveries", cfg.deliveries, 1),
        ("subgoals", cfg.subgoals, 1),
        ("history-window", cfg.history_window, 1),
    ];
    for (field, value, min) in counts {
        if value < min {
            errs.push(ConfigError::TooSmall { field, value, min });
        }
    }
    let nonneg = [
        ("lambda", cfg.reward.lambda),
        ("mu", cfg.reward.mu),
        ("exec-budget-rate", cfg.exec_budget_rate),
        ("latency-std-scale", cfg.latency_std_scale),
        ("reasoning-inflation", cfg.reasoning_inflation),
    ];
    for (field, value) in nonneg {
        if !value.is_finite() {
            errs.push(ConfigError::NonFinite { field });
        } else if value < 0.0 {
            errs.push(ConfigError::Negative { field, value });
        }
    }
    if !cfg.reward.success_bonus.is_finite() {
        errs.push(ConfigError::NonFinite { field: "success-bonus" });
    }
    let g = cfg.reward.gamma;
    if !(g > 0.0 && g <= 1.0) {
        errs.push(ConfigError::Discount(g));
    }
    for m in cfg.role_effects.plan.iter().chain(cfg.role_effects.verify.iter()) {
        if !(0.0..=1.0).contains(m) {
            errs.push(ConfigError::ProbabilityOutOfRange { field: "role-effects", value: *m });
        }
    }
    if crate::calib::LatencyProfile::by_id(&cfg.latency).is_none() {
        errs.push(ConfigError::UnknownProfile(cfg.latency.clone()));
    }
    if errs.is_empty() {
        Ok(ValidatedConfig(cfg))
    } else {
        Err(ConfigErrors(errs))
    }
}

/// What a random stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Init,
    TrainEnv,
    TrainPolicy,
    EvalEnv,
    EvalPolicy,
    Shock,
    Minibatch,
    Calibration,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1f3a_0001,
            Purpose::TrainEnv => 0x1f3a_0002,
            Purpose::TrainPolicy => 0x1f3a_0003,
            Purpose::EvalEnv => 0x1f3a_0004,
            Purpose::EvalPolicy => 0x1f3a_0005,
            Purpose::Shock => 0x1f3a_0006,
            Purpose::Minibatch => 0x1f3a_0007,
            Purpose::Calibration => 0x1f3a_0008,
            Purpose::Test => 0x1f3a_0009,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub worker: u32,
    pub episode: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose, worker: u32, episode: u64) -> Self {
        Self { purpose, worker, episode }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A deterministic random stream derived from `(seed, key)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let words = [
            splitmix(seed),
            splitmix(seed ^ key.purpose.tag()),
            splitmix(key.purpose.tag() ^ ((key.worker as u64) << 32)),
            splitmix(key.episode ^ splitmix(seed.rotate_left(17))),
        ];
        let mut bytes = [0u8; 32];
        for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        Self { inner: ChaCha8Rng::from_seed(bytes) }
    }

    pub fn for_test(seed: u64) -> Self {
        Self::new(seed, StreamKey::new(Purpose::Test, 0, 0))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_delivery_validates() {
        let cfg = EnvConfig::delivery();
        assert_eq!(cfg.initial_budget, (25.0, 100.0));
        assert_eq!(cfg.think_cost, (5.0, 20.0));
        assert_eq!(cfg.horizon, 50);
        assert!(validate_config(cfg).is_ok());
    }

    #[test]
    fn bad_probability_is_named() {
        let cfg = EnvConfig { p_nav: 1.2, ..EnvConfig::delivery() };
        let errs = validate_config(cfg).unwrap_err();
        assert_eq!(errs.0.len(), 1);
        assert_eq!(errs.0[0].to_string(), "probability-out-of-range(p-nav, 1.2)");
    }

    #[test]
    fn empty_budget_range() {
        let cfg = EnvConfig { initial_budget: (60.0, 50.0), ..EnvConfig::delivery() };
        let errs = validate_config(cfg).unwrap_err();
        assert_eq!(errs.0[0].to_string(), "empty-range(initial-budget-range)");
    }

    #[test]
    fn all_violations_reported() {
        let cfg = EnvConfig {
            p_nav: -0.1,
            p_manip: 3.0,
            horizon: 0,
            think_cost: (9.0, 1.0),
            reward: RewardConfig { gamma: 0.0, ..Default::default() },
            ..EnvConfig::delivery()
        };
        let errs = validate_config(cfg).unwrap_err();
        assert_eq!(errs.0.len(), 5, "{errs}");
    }

    #[test]
    fn invocation_table() {
        let table: Vec<_> = (0..=2)
            .map(|l| budget_level_to_invocation(BudgetLevel::new(l).unwrap()))
            .map(|c| (c.call_count, c.token_cap))
            .collect();
        assert_eq!(table, vec![(0, 0), (1, 256), (2, 512)]);
        assert!(BudgetLevel::new(3).is_none());
    }

    #[test]
    fn think_rejects_level_zero() {
        assert!(OrchestrationAction::think(ReasoningRole::Plan, BudgetLevel::NONE).is_none());
        let bad = r#"{"mode":"think","role":"plan","budget":0}"#;
        assert!(serde_json::from_str::<OrchestrationAction>(bad).is_err());
        let good = r#"{"mode":"think","role":"verify","budget":2}"#;
        let a: OrchestrationAction = serde_json::from_str(good).unwrap();
        assert_eq!(a, OrchestrationAction::Think { role: ReasoningRole::Verify, budget: BudgetLevel::HIGH });
    }

    #[test]
    fn unknown_config_key_rejected() {
        let text = r#"{"p_nav": 0.1, "p_nvа": 0.2}"#;
        assert!(serde_json::from_str::<EnvConfig>(text).is_err());
    }

    #[test]
    fn streams_differ_by_key() {
        let mut a = RngStream::new(7, StreamKey::new(Purpose::EvalEnv, 0, 1));
        let mut b = RngStream::new(7, StreamKey::new(Purpose::EvalEnv, 0, 2));
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }
}
