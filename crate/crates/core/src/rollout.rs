//! Episode runner: decider, reasoning and executor composed into one decision loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::LatencyProfile;
use crate::domain::{OrchestrationAction, PrimitiveAction, Purpose, ReasoningRole, RngStream, StreamKey, ValidatedConfig};
use crate::envsim::{apply_budget_shock, compose_reward, exec_primitive, observe, reset, EnvError, EnvState, TaskPhase};
use crate::policy::{decide, executor_select, DeciderKind, PolicyError};
use crate::reasoning::{invoke_reasoning, ReasoningError};
use crate::report::EpisodeMetrics;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("seed {seed} episode {episode}: {source}")]
    Env { seed: u64, episode: u64, source: EnvError },
    #[error("seed {seed} episode {episode}: {source}")]
    Policy { seed: u64, episode: u64, source: PolicyError },
    #[error("seed {seed} episode {episode}: {source}")]
    Reasoning { seed: u64, episode: u64, source: ReasoningError },
    #[error("non-finite-reward(seed {seed}, episode {episode}, t {t})")]
    NonFiniteReward { seed: u64, episode: u64, t: usize },
}

/// One decision step as written to the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub seed: u64,
    pub episode: u64,
    pub t: usize,
    /// Phase after the step.
    pub phase: TaskPhase,
    pub action: OrchestrationAction,
    pub role: Option<ReasoningRole>,
    pub budget_level: u8,
    pub primitive: PrimitiveAction,
    pub reward: f64,
    pub delta: f64,
    /// Reasoning cost charged this step.
    pub cost: f64,
    pub tokens: u32,
    pub action_failed: bool,
    /// Whether the episode has been completed by the end of this step.
    pub success: bool,
    pub done: bool,
    pub budget_remaining: f64,
    pub budget_consumed: f64,
    pub budget_initial: f64,
    pub shock_removed: f64,
}

/// Data the trainer needs for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub think_masked: bool,
    pub action: OrchestrationAction,
    pub logprob: f64,
    pub value: f64,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub fraction: f64,
}

/// Invocation counts split at the shock step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockSplit {
    pub step: usize,
    pub steps_pre: usize,
    pub steps_post: usize,
    pub invocations_pre: usize,
    pub invocations_post: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeCtx<'a> {
    pub cfg: &'a ValidatedConfig,
    pub profile: &'a LatencyProfile,
    pub seed: u64,
    pub episode: u64,
    pub env_purpose: Purpose,
    pub policy_purpose: Purpose,
    pub shock: Option<ShockSpec>,
    pub record_steps: bool,
    pub record_transitions: bool,
    /// Subtracted per unit of reasoning cost from the reward handed to the trainer.
    pub cost_penalty: f64,
}

impl<'a> EpisodeCtx<'a> {
    pub fn eval(cfg: &'a ValidatedConfig, profile: &'a LatencyProfile, seed: u64, episode: u64) -> Self {
        Self {
            cfg,
            profile,
            seed,
            episode,
            env_purpose: Purpose::EvalEnv,
            policy_purpose: Purpose::EvalPolicy,
            shock: None,
            record_steps: false,
            record_transitions: false,
            cost_penalty: 0.0,
        }
    }

    pub fn train(cfg: &'a ValidatedConfig, profile: &'a LatencyProfile, seed: u64, episode: u64, cost_penalty: f64) -> Self {
        Self {
            env_purpose: Purpose::TrainEnv,
            policy_purpose: Purpose::TrainPolicy,
            record_transitions: true,
            cost_penalty,
            ..Self::eval(cfg, profile, seed, episode)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    pub metrics: EpisodeMetrics,
    pub records: Vec<StepRecord>,
    pub transitions: Vec<Transition>,
    pub shock: Option<ShockSplit>,
    pub final_state: EnvState,
}

/// Step at which a shock lands, uniform over `[T/4, 3T/4]`.
pub fn shock_step(seed: u64, episode: u64, horizon: usize) -> usize {
    let lo = horizon / 4;
    let hi = (3 * horizon) / 4;
    let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Shock, 0, episode));
    lo + rng.index(hi - lo + 1)
}

pub fn run_episode(decider: &DeciderKind, ctx: &EpisodeCtx<'_>) -> Result<EpisodeOutput, RolloutError> {
    let cfg = ctx.cfg;
    let (seed, episode) = (ctx.seed, ctx.episode);
    let mut env_rng = RngStream::new(seed, StreamKey::new(ctx.env_purpose, 0, episode));
    let mut pol_rng = RngStream::new(seed, StreamKey::new(ctx.policy_purpose, 0, episode));
    let mut s = reset(cfg, &mut env_rng);
    let shock_at = ctx.shock.map(|_| shock_step(seed, episode, cfg.horizon));

    let mut m = EpisodeMetrics::default();
    let mut records = Vec::new();
    let mut transitions = Vec::new();
    let mut split = shock_at.map(|step| ShockSplit { step, steps_pre: 0, steps_post: 0, invocations_pre: 0, invocations_post: 0 });

    while !s.is_done(cfg.horizon) {
        if let (Some(sh), Some(step)) = (ctx.shock, shock_at) {
            if s.t == step {
                s = apply_budget_shock(&s, sh.fraction);
            }
        }
        let obs = observe(&s, cfg);
        let d = decide(decider, &obs, &s, cfg, &mut pol_rng).map_err(|source| RolloutError::Policy { seed, episode, source })?;
        let (mut cost, mut tokens, mut think_delta) = (0.0, 0, 0.0);
        let after_think = match d.action {
            OrchestrationAction::Act => s.clone(),
            OrchestrationAction::Think { role, budget } => {
                let (next, out) = invoke_reasoning(&s, role, budget, cfg, ctx.profile, &mut env_rng)
                    .map_err(|source| RolloutError::Reasoning { seed, episode, source })?;
                cost = out.cost;
                tokens = out.tokens;
                think_delta = out.delta;
                next
            }
        };
        let primitive = executor_select(&after_think, cfg, &mut env_rng);
        let out = exec_primitive(&after_think, primitive, cfg, ctx.profile, &mut env_rng)
            .map_err(|source| RolloutError::Env { seed, episode, source })?;
        let delta = think_delta + out.delta;
        let reward = compose_reward(out.info.delivered, out.info.action_failed, delta, &cfg.reward);
        if !reward.is_finite() {
            return Err(RolloutError::NonFiniteReward { seed, episode, t: s.t });
        }
        let t = s.t;
        s = out.next;
        let done = out.done;

        m.steps += 1;
        m.seconds += delta;
        m.ret += reward;
        m.cost += cost;
        m.tokens += u64::from(tokens);
        if d.action.is_think() {
            m.invocations += 1;
        }
        if let Some(sp) = split.as_mut() {
            let think = usize::from(d.action.is_think());
            if t < sp.step {
                sp.steps_pre += 1;
                sp.invocations_pre += think;
            } else {
                sp.steps_post += 1;
                sp.invocations_post += think;
            }
        }
        if ctx.record_transitions {
            transitions.push(Transition {
                obs,
                think_masked: d.think_masked,
                action: d.action,
                logprob: d.logprob,
                value: d.value,
                reward: reward - ctx.cost_penalty * cost,
                cost,
                done,
            });
        }
        if ctx.record_steps {
            records.push(StepRecord {
                seed,
                episode,
                t,
                phase: s.phase,
                action: d.action,
                role: d.action.role(),
                budget_level: d.action.budget_level().level(),
                primitive,
                reward,
                delta,
                cost,
                tokens,
                action_failed: out.info.action_failed,
                success: s.phase == TaskPhase::Delivered,
                done,
                budget_remaining: s.budget,
                budget_consumed: s.consumed,
                budget_initial: s.initial_budget,
                shock_removed: s.shock_removed,
            });
        }
    }
    m.success = s.phase == TaskPhase::Delivered;
    m.consumed_fraction = if s.initial_budget > 0.0 { (s.consumed / s.initial_budget).min(1.0) } else { 0.0 };
    Ok(EpisodeOutput { metrics: m, records, transitions, shock: split, final_state: s })
}
