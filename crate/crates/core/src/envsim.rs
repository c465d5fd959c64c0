//! Abstract embodied task processes with stochastic outcomes, latency and budget.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::LatencyProfile;
use crate::domain::{EnvConfig, PrimitiveAction, PrimitiveKind, RewardConfig, RngStream, TaskFamily, ValidatedConfig};
use crate::reasoning::{apply_guidance_effect, GuidanceBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPhase {
    AtStart,
    InTaskRegion,
    ObjectConfirmed,
    Holding,
    Delivered,
    FailedTerminal,
}

impl TaskPhase {
    pub const ALL: [TaskPhase; 6] = [
        TaskPhase::AtStart,
        TaskPhase::InTaskRegion,
        TaskPhase::ObjectConfirmed,
        TaskPhase::Holding,
        TaskPhase::Delivered,
        TaskPhase::FailedTerminal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskPhase::Delivered | TaskPhase::FailedTerminal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskPhase::AtStart => "at_start",
            TaskPhase::InTaskRegion => "in_task_region",
            TaskPhase::ObjectConfirmed => "object_confirmed",
            TaskPhase::Holding => "holding",
            TaskPhase::Delivered => "delivered",
            TaskPhase::FailedTerminal => "failed_terminal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: PrimitiveKind,
    pub failed: bool,
}

/// Episode facts the decider never observes directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLayout {
    pub task_region: usize,
    pub zone: usize,
    pub cluttered: bool,
    /// Inspection confirmed a decoy; the next pick fails.
    pub decoy: bool,
    /// Completed deliveries (Delivery) or subgoals (TaskDecomposition).
    pub progress: usize,
    pub subgoal_plan: Vec<PrimitiveAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub phase: TaskPhase,
    pub region: usize,
    pub object_seen: bool,
    pub object_confirmed: bool,
    pub history: VecDeque<HistoryEntry>,
    pub budget: f64,
    pub initial_budget: f64,
    /// Budget spent by reasoning and execution so far.
    pub consumed: f64,
    /// Budget removed by shocks so far.
    pub shock_removed: f64,
    pub t: usize,
    pub u: f64,
    pub guidance: GuidanceBuffer,
    pub task: TaskLayout,
}

impl EnvState {
    pub fn guidance_fresh(&self) -> bool {
        self.guidance.is_fresh(self.t)
    }

    pub fn is_done(&self, horizon: usize) -> bool {
        self.phase.is_terminal() || self.t >= horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub action_succeeded: bool,
    pub action_failed: bool,
    pub delivered: bool,
    pub cost_spent: f64,
    pub tokens_spent: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next: EnvState,
    pub delta: f64,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("episode-already-terminal(t={0})")]
    Terminal(usize),
    #[error("action-invalid-in-phase({action} in {phase:?})")]
    ActionInvalidInPhase { action: PrimitiveAction, phase: TaskPhase },
}

pub fn reset(cfg: &ValidatedConfig, rng: &mut RngStream) -> EnvState {
    let (lo, hi) = cfg.initial_budget;
    let budget = if lo == hi { lo } else { rng.uniform_range(lo, hi) };
    let mut task = TaskLayout {
        task_region: 1 + rng.index(cfg.region_count - 1),
        zone: rng.index(cfg.zone_count),
        cluttered: rng.bernoulli(cfg.clutter_prob),
        decoy: false,
        progress: 0,
        subgoal_plan: Vec::new(),
    };
    if cfg.task_family == TaskFamily::TaskDecomposition {
        task.subgoal_plan = (0..cfg.subgoals)
            .map(|_| match rng.index(4) {
                0 => PrimitiveAction::Navigate(rng.index(cfg.region_count)),
                1 => PrimitiveAction::Inspect,
                2 => PrimitiveAction::Pick,
                _ => PrimitiveAction::Deliver(rng.index(cfg.zone_count)),
            })
            .collect();
    }
    EnvState {
        phase: TaskPhase::AtStart,
        region: 0,
        object_seen: false,
        object_confirmed: false,
        history: VecDeque::with_capacity(cfg.history_window),
        budget,
        initial_budget: budget,
        consumed: 0.0,
        shock_removed: 0.0,
        t: 0,
        u: 0.0,
        guidance: GuidanceBuffer::new(cfg.freshness_horizon),
        task,
    }
}

/// Every primitive available under a config, in a fixed order.
pub fn all_primitives(cfg: &EnvConfig) -> Vec<PrimitiveAction> {
    let mut out: Vec<_> = (0..cfg.region_count).map(PrimitiveAction::Navigate).collect();
    out.push(PrimitiveAction::Inspect);
    out.push(PrimitiveAction::Pick);
    out.extend((0..cfg.zone_count).map(PrimitiveAction::Deliver));
    out.push(PrimitiveAction::Wait);
    out
}

/// Next hop from `from` towards `to` on a ring of `n` regions.
fn ring_step(from: usize, to: usize, n: usize) -> usize {
    let fwd = (to + n - from) % n;
    if fwd <= n - fwd {
        (from + 1) % n
    } else {
        (from + n - 1) % n
    }
}

/// The unique primitive that advances the task from `s`.
pub fn expected_primitive(s: &EnvState, cfg: &EnvConfig) -> PrimitiveAction {
    match cfg.task_family {
        TaskFamily::Delivery => match s.phase {
            TaskPhase::AtStart => PrimitiveAction::Navigate(s.task.task_region),
            TaskPhase::InTaskRegion => PrimitiveAction::Inspect,
            TaskPhase::ObjectConfirmed => PrimitiveAction::Pick,
            TaskPhase::Holding => PrimitiveAction::Deliver(s.task.zone),
            TaskPhase::Delivered | TaskPhase::FailedTerminal => PrimitiveAction::Wait,
        },
        TaskFamily::StructuredNav => {
            if s.phase.is_terminal() {
                PrimitiveAction::Wait
            } else {
                PrimitiveAction::Navigate(ring_step(s.region, s.task.task_region, cfg.region_count))
            }
        }
        TaskFamily::TaskDecomposition => s
            .task
            .subgoal_plan
            .get(s.task.progress)
            .copied()
            .unwrap_or(PrimitiveAction::Wait),
    }
}

/// Failure probability of the expected primitive before guidance.
pub fn base_failure(s: &EnvState, a: PrimitiveAction, cfg: &EnvConfig) -> f64 {
    let clutter = |p: f64| if s.task.cluttered { p.max(cfg.clutter_failure) } else { p };
    match cfg.task_family {
        TaskFamily::Delivery => match a {
            PrimitiveAction::Navigate(_) => clutter(cfg.p_nav),
            PrimitiveAction::Inspect => clutter(cfg.inspect_false_neg),
            PrimitiveAction::Pick => clutter(cfg.p_manip),
            PrimitiveAction::Deliver(_) => cfg.p_manip,
            PrimitiveAction::Wait => 0.0,
        },
        TaskFamily::StructuredNav => match a {
            PrimitiveAction::Navigate(_) => clutter(cfg.p_nav),
            _ => 0.0,
        },
        TaskFamily::TaskDecomposition => match a {
            PrimitiveAction::Navigate(_) => cfg.p_nav,
            PrimitiveAction::Inspect => cfg.inspect_false_neg,
            PrimitiveAction::Pick | PrimitiveAction::Deliver(_) => clutter(cfg.p_manip),
            PrimitiveAction::Wait => 0.0,
        },
    }
}

/// Additive reward: success bonus, latency penalty, failure penalty.
pub fn compose_reward(delivered: bool, failed: bool, delta: f64, reward: &RewardConfig) -> f64 {
    let bonus = if delivered { reward.success_bonus } else { 0.0 };
    let fail = if failed { reward.mu } else { 0.0 };
    bonus - reward.lambda * delta - fail
}

/// Fraction of failed outcomes in the last `k` entries (empty slots count as successes).
pub fn update_uncertainty(history: &VecDeque<HistoryEntry>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let fails = history.iter().rev().take(k).filter(|e| e.failed).count();
    fails as f64 / k as f64
}

pub fn apply_budget_shock(s: &EnvState, fraction: f64) -> EnvState {
    let f = fraction.clamp(0.0, 1.0);
    let mut next = s.clone();
    let removed = s.budget * f;
    next.budget = s.budget - removed;
    next.shock_removed += removed;
    next
}

pub fn obs_width(cfg: &EnvConfig) -> usize {
    TaskPhase::ALL.len() + cfg.region_count + 2 + cfg.history_window * (PrimitiveKind::ALL.len() + 2) + 4
}

/// Offsets of the named scalar features inside an observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub phase: usize,
    pub region: usize,
    pub flags: usize,
    pub history: usize,
    pub history_len: usize,
    pub budget: usize,
    pub uncertainty: usize,
    pub fresh: usize,
    pub time: usize,
    pub width: usize,
}

impl ObsLayout {
    pub fn new(cfg: &EnvConfig) -> Self {
        let phase = 0;
        let region = phase + TaskPhase::ALL.len();
        let flags = region + cfg.region_count;
        let history = flags + 2;
        let history_len = cfg.history_window * (PrimitiveKind::ALL.len() + 2);
        let budget = history + history_len;
        Self {
            phase,
            region,
            flags,
            history,
            history_len,
            budget,
            uncertainty: budget + 1,
            fresh: budget + 2,
            time: budget + 3,
            width: budget + 4,
        }
    }
}

fn observed_phase(s: &EnvState, cfg: &EnvConfig) -> TaskPhase {
    if cfg.task_family != TaskFamily::TaskDecomposition || s.phase.is_terminal() {
        return s.phase;
    }
    let quarter = (4 * s.task.progress) / cfg.subgoals.max(1);
    TaskPhase::ALL[quarter.min(3)]
}

/// Fixed-length feature vector; the width depends only on the config.
pub fn observe(s: &EnvState, cfg: &EnvConfig) -> Vec<f64> {
    let layout = ObsLayout::new(cfg);
    let mut x = vec![0.0; layout.width];
    x[layout.phase + observed_phase(s, cfg).index()] = 1.0;
    x[layout.region + s.region.min(cfg.region_count - 1)] = 1.0;
    x[layout.flags] = f64::from(s.object_seen);
    x[layout.flags + 1] = f64::from(s.object_confirmed);
    let slot = PrimitiveKind::ALL.len() + 2;
    // most recent entry first
    for (i, e) in s.history.iter().rev().take(cfg.history_window).enumerate() {
        let base = layout.history + i * slot;
        x[base + e.kind.index()] = 1.0;
        x[base + PrimitiveKind::ALL.len() + usize::from(e.failed)] = 1.0;
    }
    let b_hi = cfg.initial_budget.1;
    x[layout.budget] = if b_hi > 0.0 { (s.budget / b_hi).clamp(0.0, 1.0) } else { 0.0 };
    x[layout.uncertainty] = s.u;
    x[layout.fresh] = f64::from(s.guidance_fresh());
    x[layout.time] = s.t as f64 / cfg.horizon as f64;
    x
}

struct Transition {
    failed: bool,
    delivered: bool,
}

fn transition_delivery(next: &mut EnvState, a: PrimitiveAction, fail_p: f64, cfg: &EnvConfig, rng: &mut RngStream) -> Transition {
    let ok = !rng.bernoulli(fail_p);
    let mut delivered = false;
    match a {
        PrimitiveAction::Navigate(r) => {
            if ok {
                next.region = r;
                next.phase = TaskPhase::InTaskRegion;
            }
        }
        PrimitiveAction::Inspect => {
            if ok {
                next.object_seen = true;
                next.object_confirmed = true;
                next.phase = TaskPhase::ObjectConfirmed;
                let fp = apply_guidance_effect(cfg.inspect_false_pos, next, PrimitiveKind::Inspect, cfg);
                next.task.decoy = rng.bernoulli(fp);
            } else {
                next.object_seen = true;
            }
        }
        PrimitiveAction::Pick => {
            if ok && next.task.decoy {
                next.task.decoy = false;
                next.object_confirmed = false;
                next.phase = TaskPhase::InTaskRegion;
                return Transition { failed: true, delivered: false };
            } else if ok {
                next.phase = TaskPhase::Holding;
            } else if cfg.failure_terminal {
                next.phase = TaskPhase::FailedTerminal;
            }
        }
        PrimitiveAction::Deliver(_) => {
            if ok {
                next.task.progress += 1;
                if next.task.progress >= cfg.deliveries {
                    next.phase = TaskPhase::Delivered;
                    delivered = true;
                } else {
                    next.phase = TaskPhase::AtStart;
                    next.region = 0;
                    next.object_seen = false;
                    next.object_confirmed = false;
                }
            } else if cfg.failure_terminal {
                next.phase = TaskPhase::FailedTerminal;
            } else {
                next.phase = TaskPhase::ObjectConfirmed;
            }
        }
        PrimitiveAction::Wait => {}
    }
    Transition { failed: !ok, delivered }
}

fn transition_nav(next: &mut EnvState, a: PrimitiveAction, fail_p: f64, rng: &mut RngStream) -> Transition {
    let ok = !rng.bernoulli(fail_p);
    let mut delivered = false;
    if let (true, PrimitiveAction::Navigate(r)) = (ok, a) {
        next.region = r;
        if r == next.task.task_region {
            next.phase = TaskPhase::Delivered;
            delivered = true;
        }
    }
    Transition { failed: !ok, delivered }
}

fn transition_decomposition(next: &mut EnvState, a: PrimitiveAction, fail_p: f64, cfg: &EnvConfig, rng: &mut RngStream) -> Transition {
    let ok = !rng.bernoulli(fail_p);
    let mut delivered = false;
    if ok {
        if let PrimitiveAction::Navigate(r) = a {
            next.region = r;
        }
        next.task.progress += 1;
        if next.task.progress >= cfg.subgoals {
            next.phase = TaskPhase::Delivered;
            delivered = true;
        }
    } else if cfg.failure_terminal && matches!(a, PrimitiveAction::Pick | PrimitiveAction::Deliver(_)) {
        next.phase = TaskPhase::FailedTerminal;
    }
    Transition { failed: !ok, delivered }
}

/// Executes one primitive.
///
/// A primitive that cannot apply in the current phase is a failed action
/// (penalised, state unchanged), not an error. The returned reward covers
/// execution latency only; reasoning latency is added by the caller.
pub fn exec_primitive(
    s: &EnvState,
    a: PrimitiveAction,
    cfg: &EnvConfig,
    profile: &LatencyProfile,
    rng: &mut RngStream,
) -> Result<StepOutcome, EnvError> {
    if s.is_done(cfg.horizon) {
        return Err(EnvError::Terminal(s.t));
    }
    let mut next = s.clone();
    let expected = expected_primitive(s, cfg);
    let tr = if a == PrimitiveAction::Wait {
        Transition { failed: false, delivered: false }
    } else if a != expected {
        Transition { failed: true, delivered: false }
    } else {
        let base = base_failure(s, a, cfg);
        let fail_p = apply_guidance_effect(base, s, a.kind(), cfg);
        match cfg.task_family {
            TaskFamily::Delivery => transition_delivery(&mut next, a, fail_p, cfg, rng),
            TaskFamily::StructuredNav => transition_nav(&mut next, a, fail_p, rng),
            TaskFamily::TaskDecomposition => transition_decomposition(&mut next, a, fail_p, cfg, rng),
        }
    };
    let delta = profile.primitive_latency(a.kind(), cfg.latency_std_scale, rng);
    let spend = (delta * cfg.exec_budget_rate).min(next.budget);
    next.budget -= spend;
    next.consumed += spend;
    next.history.push_back(HistoryEntry { kind: a.kind(), failed: tr.failed });
    while next.history.len() > cfg.history_window {
        next.history.pop_front();
    }
    next.u = update_uncertainty(&next.history, cfg.history_window);
    next.t += 1;
    let done = next.is_done(cfg.horizon);
    Ok(StepOutcome {
        reward: compose_reward(tr.delivered, tr.failed, delta, &cfg.reward),
        next,
        delta,
        done,
        info: StepInfo {
            action_succeeded: !tr.failed,
            action_failed: tr.failed,
            delivered: tr.delivered,
            cost_spent: spend,
            tokens_spent: 0,
        },
    })
}

/// Checks whether `a` is the phase-advancing primitive; used by strict callers.
pub fn check_applicable(s: &EnvState, a: PrimitiveAction, cfg: &EnvConfig) -> Result<(), EnvError> {
    if a == PrimitiveAction::Wait || a == expected_primitive(s, cfg) {
        Ok(())
    } else {
        Err(EnvError::ActionInvalidInPhase { action: a, phase: s.phase })
    }
}
