//! On-policy training of the decider: collection, GAE, clipped-surrogate updates
//! and the Lagrangian budget-constrained variant.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::LatencyProfile;
use crate::diffnet::{clip_grad_norm, Adam, NetError};
use crate::domain::{OrchestrationAction, Purpose, RngStream, StreamKey, ValidatedConfig};
use crate::par::{try_map_indexed, Execution};
use crate::policy::{AblationFlags, DeciderKind, HeadDist, LearnedPolicy, PolicyError, DEFAULT_HIDDEN, OUTPUT_WIDTH, VALUE};
use crate::report::{write_table, CURVE_COLUMNS};
use crate::rollout::{run_episode, EpisodeCtx, RolloutError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Target mean reasoning cost per episode.
    pub c_max: f64,
    pub dual_lr: f64,
    pub initial_dual: f64,
}

impl ConstraintConfig {
    pub fn new(c_max: f64) -> Self {
        Self { c_max, dual_lr: 0.01, initial_dual: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub lr: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub episodes_per_iter: usize,
    pub iterations: usize,
    pub value_weight: f64,
    pub entropy_weight: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub hidden: Vec<usize>,
    pub ablation: AblationFlags,
    pub constraint: Option<ConstraintConfig>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            lr: 3e-4,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 4,
            minibatch: 64,
            episodes_per_iter: 20,
            iterations: 300,
            value_weight: 0.5,
            entropy_weight: 0.01,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            hidden: DEFAULT_HIDDEN.to_vec(),
            ablation: AblationFlags::NONE,
            constraint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PpoError {
    #[error("invalid-ppo-config({0})")]
    Config(String),
    #[error("length-mismatch(rewards {rewards}, values {values}, dones {dones})")]
    LengthMismatch { rewards: usize, values: usize, dones: usize },
    #[error("non-finite-loss(iteration {iteration}, minibatch {minibatch})")]
    NonFiniteLoss { iteration: usize, minibatch: usize },
    #[error("iteration {iteration}: {source}")]
    Rollout { iteration: usize, source: RolloutError },
    #[error("iteration {iteration}: {source}")]
    Policy { iteration: usize, source: PolicyError },
    #[error("iteration {iteration}: {source}")]
    Net { iteration: usize, source: NetError },
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.minibatch == 0 || self.episodes_per_iter == 0 {
            return bad("lr, epochs, minibatch and episodes_per_iter must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if let Some(c) = &self.constraint {
            if !(c.dual_lr > 0.0) || c.initial_dual < 0.0 || !(c.c_max >= 0.0) {
                return bad("constraint needs dual_lr > 0, initial_dual >= 0, c_max >= 0");
            }
        }
        Ok(())
    }
}

/// Decisions of one iteration, flattened across episodes in episode order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs: Vec<Vec<f64>>,
    pub think_masked: Vec<bool>,
    pub actions: Vec<OrchestrationAction>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<(), PpoError> {
        let (adv, ret) = gae(&self.rewards, &self.values, &self.dones, gamma, lambda)?;
        self.advantages = Some(adv);
        self.returns = Some(ret);
        Ok(())
    }
}

/// Per-iteration statistics from the collected episodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    /// Mean undiscounted environment return (without the dual penalty).
    pub mean_return: f64,
    pub tsr: f64,
    pub rf: f64,
    pub mean_cost: f64,
    pub episodes: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn collect(
    policy: &LearnedPolicy,
    cfg: &ValidatedConfig,
    profile: &LatencyProfile,
    episodes: usize,
    seed: u64,
    first_episode: u64,
    cost_penalty: f64,
    exec: Execution,
) -> Result<(RolloutBuffer, CollectStats, Vec<f64>), RolloutError> {
    let decider = DeciderKind::Learned { policy: Box::new(policy.clone()), greedy: false };
    let outs = try_map_indexed(exec, episodes, |e| {
        let ctx = EpisodeCtx::train(cfg, profile, seed, first_episode + e as u64, cost_penalty);
        run_episode(&decider, &ctx)
    })?;
    let mut buf = RolloutBuffer::default();
    let mut stats = CollectStats { episodes, ..Default::default() };
    let mut returns = Vec::with_capacity(episodes);
    for out in outs {
        stats.mean_return += out.metrics.ret;
        stats.tsr += f64::from(u8::from(out.metrics.success));
        stats.rf += out.metrics.invocations as f64;
        stats.mean_cost += out.metrics.cost;
        returns.push(out.metrics.ret);
        for tr in out.transitions {
            buf.obs.push(tr.obs);
            buf.think_masked.push(tr.think_masked);
            buf.actions.push(tr.action);
            buf.logprobs.push(tr.logprob);
            buf.values.push(tr.value);
            buf.rewards.push(tr.reward);
            buf.costs.push(tr.cost);
            buf.dones.push(tr.done);
        }
    }
    let n = episodes.max(1) as f64;
    stats.mean_return /= n;
    stats.tsr /= n;
    stats.rf /= n;
    stats.mean_cost /= n;
    Ok((buf, stats, returns))
}

/// Generalised advantage estimates and returns; a step marked done bootstraps from 0.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::LengthMismatch { rewards: n, values: values.len(), dones: dones.len() });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// `min(rho * adv, clip(rho, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Projected dual ascent on the episode cost constraint.
pub fn constrained_dual_update(dual: f64, mean_cost: f64, c_max: f64, lr: f64) -> f64 {
    (dual + lr * (mean_cost - c_max)).max(0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Largest `|rho - 1|` seen in the first minibatch of the first epoch.
    pub first_ratio_dev: f64,
    pub minibatches: usize,
}

struct SampleGrad {
    grads: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    ratio_dev: f64,
}

const GRAD_CHUNK: usize = 16;

#[allow(clippy::too_many_arguments)]
fn minibatch_grad(
    policy: &LearnedPolicy,
    buf: &RolloutBuffer,
    adv: &[f64],
    ret: &[f64],
    idx: &[usize],
    cfg: &PpoConfig,
    exec: Execution,
) -> Result<SampleGrad, PolicyError> {
    let b = idx.len() as f64;
    let chunks: Vec<&[usize]> = idx.chunks(GRAD_CHUNK).collect();
    let parts = try_map_indexed(exec, chunks.len(), |c| -> Result<SampleGrad, PolicyError> {
        let mut acc = SampleGrad { grads: vec![0.0; policy.net.param_count()], policy_loss: 0.0, value_loss: 0.0, entropy: 0.0, ratio_dev: 0.0 };
        for &i in chunks[c] {
            let x = policy.features(&buf.obs[i])?;
            let cache = policy.net.forward(&x)?;
            let dist = HeadDist::from_output(cache.output(), buf.think_masked[i]);
            let a = buf.actions[i];
            let lp = dist.logprob(a, &policy.freeze)?;
            let rho = (lp - buf.logprobs[i]).exp();
            let unclipped = rho * adv[i];
            let clipped = rho.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv[i];
            let d_lp = if unclipped <= clipped { -unclipped } else { 0.0 };
            let h = dist.entropy(&policy.freeze);
            let v_err = dist.value - ret[i];
            let (g_lp, g_h) = dist.grads(a, &policy.freeze);
            let mut g_out = [0.0; OUTPUT_WIDTH];
            for j in 0..OUTPUT_WIDTH {
                g_out[j] = (d_lp * g_lp[j] - cfg.entropy_weight * g_h[j]) / b;
            }
            g_out[VALUE] += 2.0 * cfg.value_weight * v_err / b;
            policy.net.backward_into(&cache, &g_out, &mut acc.grads)?;
            acc.policy_loss -= unclipped.min(clipped) / b;
            acc.value_loss += v_err * v_err / b;
            acc.entropy += h / b;
            acc.ratio_dev = acc.ratio_dev.max((rho - 1.0).abs());
        }
        Ok(acc)
    })?;
    let mut total = SampleGrad { grads: vec![0.0; policy.net.param_count()], policy_loss: 0.0, value_loss: 0.0, entropy: 0.0, ratio_dev: 0.0 };
    for p in parts {
        for (t, g) in total.grads.iter_mut().zip(&p.grads) {
            *t += g;
        }
        total.policy_loss += p.policy_loss;
        total.value_loss += p.value_loss;
        total.entropy += p.entropy;
        total.ratio_dev = total.ratio_dev.max(p.ratio_dev);
    }
    Ok(total)
}

/// Total PPO loss of one minibatch and its gradient with respect to the network parameters.
pub fn minibatch_loss(
    policy: &LearnedPolicy,
    buf: &RolloutBuffer,
    adv: &[f64],
    ret: &[f64],
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let g = minibatch_grad(policy, buf, adv, ret, idx, cfg, Execution::Sequential)?;
    Ok((g.policy_loss + cfg.value_weight * g.value_loss - cfg.entropy_weight * g.entropy, g.grads))
}

fn normalized(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

fn shuffle(idx: &mut [usize], rng: &mut RngStream) {
    for i in (1..idx.len()).rev() {
        let j = rng.index(i + 1);
        idx.swap(i, j);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut LearnedPolicy,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    iteration: usize,
    rng: &mut RngStream,
    exec: Execution,
) -> Result<UpdateStats, PpoError> {
    let (Some(adv), Some(ret)) = (&buf.advantages, &buf.returns) else {
        return Err(PpoError::Config("buffer not finalized".into()));
    };
    let mut stats = UpdateStats::default();
    if buf.is_empty() {
        return Ok(stats);
    }
    let adv = if cfg.normalize_advantages { normalized(adv) } else { adv.clone() };
    let mut idx: Vec<usize> = (0..buf.len()).collect();
    let mut mb_index = 0;
    for epoch in 0..cfg.epochs {
        shuffle(&mut idx, rng);
        for (k, mb) in idx.chunks(cfg.minibatch).enumerate() {
            let mut g = minibatch_grad(policy, buf, &adv, ret, mb, cfg, exec)
                .map_err(|source| PpoError::Policy { iteration, source })?;
            let loss = g.policy_loss + cfg.value_weight * g.value_loss - cfg.entropy_weight * g.entropy;
            if !loss.is_finite() {
                return Err(PpoError::NonFiniteLoss { iteration, minibatch: mb_index });
            }
            if epoch == 0 && k == 0 {
                stats.first_ratio_dev = g.ratio_dev;
            }
            clip_grad_norm(&mut g.grads, cfg.max_grad_norm);
            opt.step(&mut policy.net, &g.grads).map_err(|source| PpoError::Net { iteration, source })?;
            stats.policy_loss += g.policy_loss;
            stats.value_loss += g.value_loss;
            stats.entropy += g.entropy;
            mb_index += 1;
        }
    }
    let n = mb_index.max(1) as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.minibatches = mb_index;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_return: f64,
    pub tsr: f64,
    pub rf: f64,
    pub mean_cost: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub dual_lambda: f64,
    pub first_ratio_dev: f64,
}

impl IterationMetrics {
    pub fn row(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.6}");
        vec![
            self.iteration.to_string(),
            f(self.mean_return),
            f(self.tsr),
            f(self.rf),
            f(self.mean_cost),
            f(self.policy_loss),
            f(self.value_loss),
            f(self.entropy),
            f(self.dual_lambda),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub policy: LearnedPolicy,
    pub optimizer: Adam,
    pub curve: Vec<IterationMetrics>,
    /// Undiscounted returns of every training episode, in order.
    pub episode_returns: Vec<f64>,
    pub dual: f64,
}

pub fn init_policy(cfg: &ValidatedConfig, ppo: &PpoConfig, seed: u64) -> Result<LearnedPolicy, PolicyError> {
    let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Init, 0, 0));
    LearnedPolicy::new(cfg, &ppo.hidden, ppo.ablation, &mut rng)
}

/// Full training loop; `on_iter` sees every iteration's metrics, the updated policy and the optimizer.
pub fn train_with(
    ppo: &PpoConfig,
    cfg: &ValidatedConfig,
    profile: &LatencyProfile,
    seed: u64,
    exec: Execution,
    on_iter: impl FnMut(&IterationMetrics, &LearnedPolicy, &Adam),
) -> Result<TrainOutput, PpoError> {
    ppo.validate()?;
    let policy = init_policy(cfg, ppo, seed).map_err(|source| PpoError::Policy { iteration: 0, source })?;
    train_from(policy, ppo, cfg, profile, seed, exec, on_iter)
}

/// Training loop starting from an existing policy with a fresh optimizer.
pub fn train_from(
    mut policy: LearnedPolicy,
    ppo: &PpoConfig,
    cfg: &ValidatedConfig,
    profile: &LatencyProfile,
    seed: u64,
    exec: Execution,
    mut on_iter: impl FnMut(&IterationMetrics, &LearnedPolicy, &Adam),
) -> Result<TrainOutput, PpoError> {
    ppo.validate()?;
    let mut opt = Adam::new(policy.net.param_count(), ppo.lr);
    let mut dual = ppo.constraint.as_ref().map_or(0.0, |c| c.initial_dual);
    let mut curve = Vec::with_capacity(ppo.iterations);
    let mut episode_returns = Vec::with_capacity(ppo.iterations * ppo.episodes_per_iter);
    for it in 0..ppo.iterations {
        let first = (it * ppo.episodes_per_iter) as u64;
        let penalty = if ppo.constraint.is_some() { dual } else { 0.0 };
        let (mut buf, stats, returns) = collect(&policy, cfg, profile, ppo.episodes_per_iter, seed, first, penalty, exec)
            .map_err(|source| PpoError::Rollout { iteration: it, source })?;
        episode_returns.extend(returns);
        buf.finalize(ppo.gamma, ppo.gae_lambda)?;
        let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Minibatch, 0, it as u64));
        let up = ppo_update(&mut policy, &mut opt, &buf, ppo, it, &mut rng, exec)?;
        if let Some(c) = &ppo.constraint {
            dual = constrained_dual_update(dual, stats.mean_cost, c.c_max, c.dual_lr);
        }
        let m = IterationMetrics {
            iteration: it,
            mean_return: stats.mean_return,
            tsr: stats.tsr,
            rf: stats.rf,
            mean_cost: stats.mean_cost,
            policy_loss: up.policy_loss,
            value_loss: up.value_loss,
            entropy: up.entropy,
            dual_lambda: dual,
            first_ratio_dev: up.first_ratio_dev,
        };
        on_iter(&m, &policy, &opt);
        curve.push(m);
    }
    Ok(TrainOutput { policy, optimizer: opt, curve, episode_returns, dual })
}

pub fn train(ppo: &PpoConfig, cfg: &ValidatedConfig, profile: &LatencyProfile, seed: u64, exec: Execution) -> Result<TrainOutput, PpoError> {
    train_with(ppo, cfg, profile, seed, exec, |_, _, _| {})
}

pub fn write_curve_csv(path: &Path, curve: &[IterationMetrics]) -> anyhow::Result<()> {
    let rows: Vec<_> = curve.iter().map(IterationMetrics::row).collect();
    write_table(path, &CURVE_COLUMNS, &rows)
}

/// Mean of the last `n` values.
pub fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_config, EnvConfig};

    #[test]
    fn gae_reward_to_go() {
        let (adv, _) = gae(&[1.0, 0.0, 1.0], &[0.0; 3], &[false, false, true], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn gae_single_step() {
        let (adv, ret) = gae(&[2.0], &[0.5], &[true], 0.99, 0.95).unwrap();
        assert_eq!(adv, vec![1.5]);
        assert_eq!(ret, vec![2.0]);
    }

    #[test]
    fn gae_length_mismatch() {
        assert!(matches!(gae(&[1.0], &[], &[true], 0.99, 0.95), Err(PpoError::LengthMismatch { .. })));
    }

    #[test]
    fn surrogate_cases() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn dual_cases() {
        assert!((constrained_dual_update(0.1, 30.0, 25.0, 0.01) - 0.15).abs() < 1e-15);
        assert_eq!(constrained_dual_update(0.02, 20.0, 25.0, 0.01), 0.0);
        assert_eq!(constrained_dual_update(0.3, 25.0, 25.0, 0.01), 0.3);
    }

    fn small() -> (PpoConfig, ValidatedConfig, LatencyProfile) {
        let ppo = PpoConfig { hidden: vec![16], iterations: 2, episodes_per_iter: 4, ..Default::default() };
        (ppo, validate_config(EnvConfig::delivery()).unwrap(), LatencyProfile::calibrated_default())
    }

    #[test]
    fn zero_iterations_is_noop() {
        let (ppo, cfg, profile) = small();
        let ppo = PpoConfig { iterations: 0, ..ppo };
        let out = train(&ppo, &cfg, &profile, 3, Execution::Sequential).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.policy.net, init_policy(&cfg, &ppo, 3).unwrap().net);
    }

    #[test]
    fn first_minibatch_ratio_is_one() {
        let (ppo, cfg, profile) = small();
        let out = train(&ppo, &cfg, &profile, 4, Execution::Sequential).unwrap();
        assert!(out.curve.iter().all(|m| m.first_ratio_dev < 1e-10));
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        let (ppo, cfg, profile) = small();
        let a = train(&ppo, &cfg, &profile, 5, Execution::Sequential).unwrap();
        let b = train(&ppo, &cfg, &profile, 5, Execution::Parallel).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy.net, b.policy.net);
    }

    #[test]
    fn collect_respects_horizon() {
        let (ppo, cfg, profile) = small();
        let p = init_policy(&cfg, &ppo, 1).unwrap();
        let (buf, _, _) = collect(&p, &cfg, &profile, 10, 1, 0, 0.0, Execution::Sequential).unwrap();
        assert!(buf.len() <= 10 * cfg.horizon);
        assert_eq!(buf.dones.iter().filter(|d| **d).count(), 10);
    }
}
