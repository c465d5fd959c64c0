//! The orchestration decider: factored learned policy, masking, ablation filters,
//! non-learned baselines and the fixed low-level executor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{log_softmax, DenseNet, NetError};
use crate::domain::{BudgetLevel, EnvConfig, OrchestrationAction, PrimitiveAction, ReasoningRole, RngStream, TaskFamily};
use crate::envsim::{all_primitives, expected_primitive, EnvState, ObsLayout};
use crate::reasoning::fresh_alpha;

/// Output layout of the policy network: gate(2) role(2) budget(2) value(1).
pub const GATE: std::ops::Range<usize> = 0..2;
pub const ROLE: std::ops::Range<usize> = 2..4;
pub const BUDGET: std::ops::Range<usize> = 4..6;
pub const VALUE: usize = 6;
pub const OUTPUT_WIDTH: usize = 7;

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("feature-width-mismatch(expected {expected}, got {got})")]
    FeatureWidth { expected: usize, got: usize },
    #[error("masked-action({0:?})")]
    MaskedAction(OrchestrationAction),
    #[error("conflicting-flags(planner-only and verifier-only)")]
    ConflictingFlags,
    #[error("ablation-flags-mismatch(checkpoint {checkpoint:?}, requested {requested:?})")]
    FlagsMismatch { checkpoint: AblationFlags, requested: AblationFlags },
    #[error("invalid-decider({0})")]
    InvalidDecider(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_budget_feature: bool,
    pub no_history_feature: bool,
    pub planner_only: bool,
    pub verifier_only: bool,
    pub fixed_budget: bool,
}

impl AblationFlags {
    pub const NONE: AblationFlags = AblationFlags {
        no_budget_feature: false,
        no_history_feature: false,
        planner_only: false,
        verifier_only: false,
        fixed_budget: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.no_budget_feature, self.no_history_feature, self.planner_only, self.verifier_only, self.fixed_budget) {
            (false, false, false, false, false) => "full",
            (true, false, false, false, false) => "no_budget",
            (false, true, false, false, false) => "no_history",
            (false, false, true, false, false) => "planner_only",
            (false, false, false, true, false) => "verifier_only",
            (false, false, false, false, true) => "fixed_budget",
            _ => "custom",
        }
    }
}

/// Features zeroed before the network sees them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsFilter {
    pub no_budget: bool,
    pub no_history: bool,
}

impl ObsFilter {
    pub fn apply(&self, obs: &mut [f64], layout: &ObsLayout) {
        if self.no_budget {
            obs[layout.budget] = 0.0;
        }
        if self.no_history {
            obs[layout.history..layout.history + layout.history_len].fill(0.0);
            // u is a summary of the history window
            obs[layout.uncertainty] = 0.0;
        }
    }
}

/// Heads replaced by constants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadFreeze {
    pub role: Option<ReasoningRole>,
    pub budget: Option<BudgetLevel>,
}

pub fn ablation_variant(flags: AblationFlags) -> Result<(ObsFilter, HeadFreeze), PolicyError> {
    if flags.planner_only && flags.verifier_only {
        return Err(PolicyError::ConflictingFlags);
    }
    let role = if flags.planner_only {
        Some(ReasoningRole::Plan)
    } else if flags.verifier_only {
        Some(ReasoningRole::Verify)
    } else {
        None
    };
    let budget = flags.fixed_budget.then_some(BudgetLevel::LOW);
    Ok((
        ObsFilter { no_budget: flags.no_budget_feature, no_history: flags.no_history_feature },
        HeadFreeze { role, budget },
    ))
}

/// Shared trunk with gate, role, budget and value heads on one output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub net: DenseNet,
    pub flags: AblationFlags,
    pub filter: ObsFilter,
    pub freeze: HeadFreeze,
    #[serde(skip)]
    layout: Option<ObsLayout>,
}

/// Probabilities, log-probabilities and entropy of the factored heads for one output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDist {
    pub gate: [f64; 2],
    pub role: [f64; 2],
    pub budget: [f64; 2],
    pub value: f64,
    pub think_masked: bool,
}

fn lsm2(x: &[f64]) -> [f64; 2] {
    let v = log_softmax(x);
    [v[0], v[1]]
}

impl HeadDist {
    pub fn from_output(out: &[f64], think_masked: bool) -> Self {
        let gate_logits = [out[GATE.start], if think_masked { f64::NEG_INFINITY } else { out[GATE.start + 1] }];
        Self {
            gate: lsm2(&gate_logits),
            role: lsm2(&out[ROLE]),
            budget: lsm2(&out[BUDGET]),
            value: out[VALUE],
            think_masked,
        }
    }

    pub fn p_think(&self) -> f64 {
        self.gate[1].exp()
    }

    /// Joint log-probability of a factored action; frozen heads contribute nothing.
    pub fn logprob(&self, a: OrchestrationAction, freeze: &HeadFreeze) -> Result<f64, PolicyError> {
        match a {
            OrchestrationAction::Act => Ok(self.gate[0]),
            OrchestrationAction::Think { role, budget } => {
                if self.think_masked {
                    return Err(PolicyError::MaskedAction(a));
                }
                let mut lp = self.gate[1];
                match freeze.role {
                    Some(r) if r != role => return Err(PolicyError::MaskedAction(a)),
                    Some(_) => {}
                    None => lp += self.role[role.index()],
                }
                match freeze.budget {
                    Some(b) if b != budget => return Err(PolicyError::MaskedAction(a)),
                    Some(_) => {}
                    None => lp += self.budget[budget.level() as usize - 1],
                }
                Ok(lp)
            }
        }
    }

    fn head_entropy(lp: &[f64; 2]) -> f64 {
        lp.iter().filter(|v| v.is_finite()).map(|v| -v.exp() * v).sum()
    }

    /// Gate entropy plus the THINK-probability-weighted entropy of the free heads.
    pub fn entropy(&self, freeze: &HeadFreeze) -> f64 {
        let mut sub = 0.0;
        if freeze.role.is_none() {
            sub += Self::head_entropy(&self.role);
        }
        if freeze.budget.is_none() {
            sub += Self::head_entropy(&self.budget);
        }
        Self::head_entropy(&self.gate) + self.p_think() * sub
    }

    /// Gradients of the joint log-probability and of the entropy with respect to the output vector.
    pub fn grads(&self, a: OrchestrationAction, freeze: &HeadFreeze) -> ([f64; OUTPUT_WIDTH], [f64; OUTPUT_WIDTH]) {
        let mut dlp = [0.0; OUTPUT_WIDTH];
        let mut dh = [0.0; OUTPUT_WIDTH];
        if self.think_masked {
            return (dlp, dh);
        }
        let pg = [self.gate[0].exp(), self.gate[1].exp()];
        let pr = [self.role[0].exp(), self.role[1].exp()];
        let pb = [self.budget[0].exp(), self.budget[1].exp()];
        let gate_idx = usize::from(a.is_think());
        for j in 0..2 {
            dlp[GATE.start + j] = f64::from(u8::from(j == gate_idx)) - pg[j];
        }
        if let OrchestrationAction::Think { role, budget } = a {
            if freeze.role.is_none() {
                for j in 0..2 {
                    dlp[ROLE.start + j] = f64::from(u8::from(j == role.index())) - pr[j];
                }
            }
            if freeze.budget.is_none() {
                let bi = budget.level() as usize - 1;
                for j in 0..2 {
                    dlp[BUDGET.start + j] = f64::from(u8::from(j == bi)) - pb[j];
                }
            }
        }
        let hg = Self::head_entropy(&self.gate);
        let hr = if freeze.role.is_none() { Self::head_entropy(&self.role) } else { 0.0 };
        let hb = if freeze.budget.is_none() { Self::head_entropy(&self.budget) } else { 0.0 };
        for j in 0..2 {
            let think = f64::from(u8::from(j == 1));
            dh[GATE.start + j] = -pg[j] * (self.gate[j] + hg) + (hr + hb) * pg[1] * (think - pg[j]);
        }
        if freeze.role.is_none() {
            for j in 0..2 {
                dh[ROLE.start + j] = -pg[1] * pr[j] * (self.role[j] + hr);
            }
        }
        if freeze.budget.is_none() {
            for j in 0..2 {
                dh[BUDGET.start + j] = -pg[1] * pb[j] * (self.budget[j] + hb);
            }
        }
        (dlp, dh)
    }

    pub fn sample(&self, freeze: &HeadFreeze, rng: &mut RngStream) -> OrchestrationAction {
        let pick = |lp: &[f64; 2], rng: &mut RngStream| usize::from(rng.uniform() >= lp[0].exp());
        if pick(&self.gate, rng) == 0 {
            return OrchestrationAction::Act;
        }
        let role = freeze.role.unwrap_or_else(|| ReasoningRole::from_index(pick(&self.role, rng)));
        let budget = freeze
            .budget
            .unwrap_or_else(|| if pick(&self.budget, rng) == 0 { BudgetLevel::LOW } else { BudgetLevel::HIGH });
        OrchestrationAction::Think { role, budget }
    }

    pub fn mode(&self, freeze: &HeadFreeze) -> OrchestrationAction {
        if self.gate[0] >= self.gate[1] {
            return OrchestrationAction::Act;
        }
        let role = freeze
            .role
            .unwrap_or(if self.role[0] >= self.role[1] { ReasoningRole::Plan } else { ReasoningRole::Verify });
        let budget = freeze
            .budget
            .unwrap_or(if self.budget[0] >= self.budget[1] { BudgetLevel::LOW } else { BudgetLevel::HIGH });
        OrchestrationAction::Think { role, budget }
    }
}

impl LearnedPolicy {
    pub fn new(cfg: &EnvConfig, hidden: &[usize], flags: AblationFlags, rng: &mut RngStream) -> Result<Self, PolicyError> {
        let (filter, freeze) = ablation_variant(flags)?;
        let layout = ObsLayout::new(cfg);
        let mut sizes = vec![layout.width];
        sizes.extend_from_slice(hidden);
        sizes.push(OUTPUT_WIDTH);
        let mut net = DenseNet::new(&sizes, rng)?;
        net.scale_output_layer(0.01);
        Ok(Self { net, flags, filter, freeze, layout: Some(layout) })
    }

    /// Re-derives the observation layout after deserialization.
    pub fn bind(mut self, cfg: &EnvConfig) -> Result<Self, PolicyError> {
        let layout = ObsLayout::new(cfg);
        if layout.width != self.net.input_width() {
            return Err(PolicyError::FeatureWidth { expected: self.net.input_width(), got: layout.width });
        }
        self.layout = Some(layout);
        Ok(self)
    }

    /// Rejects use of a checkpoint under different ablation flags.
    pub fn check_flags(&self, requested: AblationFlags) -> Result<(), PolicyError> {
        if self.flags != requested {
            return Err(PolicyError::FlagsMismatch { checkpoint: self.flags, requested });
        }
        Ok(())
    }

    pub fn features(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if obs.len() != self.net.input_width() {
            return Err(PolicyError::FeatureWidth { expected: self.net.input_width(), got: obs.len() });
        }
        let mut x = obs.to_vec();
        if let Some(layout) = &self.layout {
            self.filter.apply(&mut x, layout);
        }
        Ok(x)
    }

    pub fn dist(&self, obs: &[f64], think_masked: bool) -> Result<HeadDist, PolicyError> {
        let x = self.features(obs)?;
        let out = self.net.predict(&x)?;
        Ok(HeadDist::from_output(&out, think_masked))
    }

    /// `(log-prob, entropy, value)` of a previously sampled action under current parameters.
    pub fn logprob_and_entropy(&self, obs: &[f64], think_masked: bool, a: OrchestrationAction) -> Result<(f64, f64, f64), PolicyError> {
        let d = self.dist(obs, think_masked)?;
        Ok((d.logprob(a, &self.freeze)?, d.entropy(&self.freeze), d.value))
    }
}

/// Minimum reasoning cost; THINK is masked below it.
pub fn think_floor(cfg: &EnvConfig) -> f64 {
    cfg.think_cost.0 * cfg.reasoning_inflation
}

pub fn think_masked(s: &EnvState, cfg: &EnvConfig) -> bool {
    s.budget < think_floor(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeciderKind {
    Learned { policy: Box<LearnedPolicy>, greedy: bool },
    NoReasoning,
    FullReasoning { role: ReasoningRole, budget: BudgetLevel },
    FixedInterval { k: usize },
    Heuristic { theta: f64 },
    ConstrainedLearned { policy: Box<LearnedPolicy>, dual: f64, greedy: bool },
}

impl DeciderKind {
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            DeciderKind::FixedInterval { k } if *k == 0 => Err(PolicyError::InvalidDecider("fixed-interval k must be >= 1".into())),
            DeciderKind::Heuristic { theta } if !(0.0..=1.0).contains(theta) => {
                Err(PolicyError::InvalidDecider(format!("heuristic theta {theta} outside [0,1]")))
            }
            DeciderKind::FullReasoning { budget, .. } if budget.level() == 0 => {
                Err(PolicyError::InvalidDecider("full reasoning needs budget level >= 1".into()))
            }
            DeciderKind::ConstrainedLearned { dual, .. } if *dual < 0.0 => {
                Err(PolicyError::InvalidDecider(format!("negative dual {dual}")))
            }
            _ => Ok(()),
        }
    }

    pub fn learned(&self) -> Option<&LearnedPolicy> {
        match self {
            DeciderKind::Learned { policy, .. } | DeciderKind::ConstrainedLearned { policy, .. } => Some(policy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: OrchestrationAction,
    pub logprob: f64,
    pub value: f64,
    pub think_masked: bool,
}

pub fn heuristic_decide(theta: f64, s: &EnvState, cfg: &EnvConfig) -> OrchestrationAction {
    if s.u > theta && !think_masked(s, cfg) {
        OrchestrationAction::Think { role: ReasoningRole::Plan, budget: BudgetLevel::LOW }
    } else {
        OrchestrationAction::Act
    }
}

pub fn decide(decider: &DeciderKind, obs: &[f64], s: &EnvState, cfg: &EnvConfig, rng: &mut RngStream) -> Result<Decision, PolicyError> {
    let masked = think_masked(s, cfg);
    let fixed = |action| Decision { action, logprob: 0.0, value: 0.0, think_masked: masked };
    Ok(match decider {
        DeciderKind::NoReasoning => fixed(OrchestrationAction::Act),
        DeciderKind::FullReasoning { role, budget } => fixed(OrchestrationAction::Think { role: *role, budget: *budget }),
        DeciderKind::FixedInterval { k } => fixed(if s.t.is_multiple_of(*k) {
            OrchestrationAction::Think { role: ReasoningRole::Plan, budget: BudgetLevel::LOW }
        } else {
            OrchestrationAction::Act
        }),
        DeciderKind::Heuristic { theta } => fixed(heuristic_decide(*theta, s, cfg)),
        DeciderKind::Learned { policy, greedy } | DeciderKind::ConstrainedLearned { policy, greedy, .. } => {
            let d = policy.dist(obs, masked)?;
            let action = if *greedy { d.mode(&policy.freeze) } else { d.sample(&policy.freeze, rng) };
            Decision { action, logprob: d.logprob(action, &policy.freeze)?, value: d.value, think_masked: masked }
        }
    })
}

/// The fixed executor: the phase-advancing primitive with probability `q_exec`, else a uniformly random other one.
///
/// Fresh guidance relevant to the expected primitive shrinks the error rate by its gain.
/// Without fresh Plan guidance a TaskDecomposition executor only sees the next subgoal
/// with probability `blind_hint`.
pub fn executor_select(s: &EnvState, cfg: &EnvConfig, rng: &mut RngStream) -> PrimitiveAction {
    let expected = expected_primitive(s, cfg);
    let mut q = cfg.exec_strength;
    if cfg.task_family == TaskFamily::TaskDecomposition && !s.guidance.has_fresh_role(ReasoningRole::Plan, s.t) {
        q *= cfg.blind_hint;
    }
    let alpha = fresh_alpha(s, expected.kind(), cfg);
    let p_wrong = (1.0 - q) * (1.0 - alpha);
    if !rng.bernoulli(p_wrong) {
        return expected;
    }
    let others: Vec<_> = all_primitives(cfg).into_iter().filter(|a| *a != expected).collect();
    others[rng.index(others.len())]
}
