//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use orchestra::calib::LatencyProfile;
use orchestra::domain::EnvConfig;
use orchestra::ppo::PpoConfig;

/// PPO settings used by the experiment-level tests: defaults with a [64, 64] trunk.
pub fn desk_ppo() -> PpoConfig {
    PpoConfig { hidden: vec![64, 64], ..PpoConfig::default() }
}

/// Advantages by direct summation of discounted TD errors, truncated at episode ends.
pub fn gae_direct(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if dones[t] || t + 1 == n { 0.0 } else { values[t + 1] };
            rewards[t] + gamma * next - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                acc += w * delta[l];
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Fourth-order central difference of `f` along coordinate `i` of `x`.
pub fn central_diff4(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    let mut at = |d: f64| {
        x[i] = orig + d;
        f(x)
    };
    let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
    x[i] = orig;
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// navigate, inspect, pick, deliver, wait
const NAV: usize = 0;
const INSPECT: usize = 1;
const PICK: usize = 2;
const DELIVER: usize = 3;
const WAIT: usize = 4;

#[derive(Clone, PartialEq, Eq, Hash)]
struct MicroState {
    // 0 start, 1 in region, 2 confirmed, 3 holding, 4 delivered
    stage: u8,
    hist: Vec<(u8, bool)>,
    budget_bits: u64,
    t: usize,
}

/// Tabular expectimax over the MicroDelivery process, written from the model
/// description rather than from the simulator.
///
/// Requires fixed initial budget and think cost, a single task region, no clutter,
/// no decoys, freshness horizon 0 and deterministic latencies.
pub struct MicroOracle {
    cfg: EnvConfig,
    /// `None` maximises; `Some(choice)` always takes `choice`, THINK even when masked.
    fixed: Option<Option<(usize, u32)>>,
    prim_sec: [f64; 5],
    call_sec: f64,
    memo: HashMap<MicroState, f64>,
}

impl MicroOracle {
    pub fn new(cfg: &EnvConfig, profile: &LatencyProfile) -> Self {
        assert_eq!(cfg.region_count, 2);
        assert_eq!(cfg.zone_count, 1);
        assert_eq!(cfg.deliveries, 1);
        assert_eq!(cfg.initial_budget.0, cfg.initial_budget.1);
        assert_eq!(cfg.think_cost.0, cfg.think_cost.1);
        assert_eq!(cfg.clutter_prob, 0.0);
        assert_eq!(cfg.inspect_false_pos, 0.0);
        assert_eq!(cfg.freshness_horizon, 0);
        assert!(!cfg.failure_terminal);
        let prim_sec = std::array::from_fn(|k| {
            assert_eq!(profile.primitive[k].std * profile.variance_inflation, 0.0);
            profile.primitive[k].mean
        });
        assert_eq!(profile.reasoning.a * profile.variance_inflation, 0.0);
        let units = cfg.think_cost.0;
        Self {
            cfg: cfg.clone(),
            fixed: None,
            prim_sec,
            call_sec: profile.reasoning.seconds(units) * cfg.reasoning_inflation,
            memo: HashMap::new(),
        }
    }

    /// Evaluates a fixed choice, `None` for ACT or `Some((role, calls))` with role 0 = plan.
    pub fn fixed(cfg: &EnvConfig, profile: &LatencyProfile, choice: Option<(usize, u32)>) -> Self {
        Self { fixed: Some(choice), ..Self::new(cfg, profile) }
    }

    /// Optimal expected undiscounted return from the initial state.
    pub fn value(&mut self) -> f64 {
        let s0 = MicroState { stage: 0, hist: Vec::new(), budget_bits: self.cfg.initial_budget.0.to_bits(), t: 0 };
        self.v(&s0)
    }

    pub fn states(&self) -> usize {
        self.memo.len()
    }

    fn u(&self, hist: &[(u8, bool)]) -> f64 {
        hist.iter().filter(|(_, f)| *f).count() as f64 / self.cfg.history_window as f64
    }

    fn mult(&self, role: usize, kind: usize) -> f64 {
        if role == 0 {
            self.cfg.role_effects.plan[kind]
        } else {
            self.cfg.role_effects.verify[kind]
        }
    }

    fn v(&mut self, s: &MicroState) -> f64 {
        if s.stage == 4 || s.t >= self.cfg.horizon {
            return 0.0;
        }
        if let Some(v) = self.memo.get(s) {
            return *v;
        }
        let budget = f64::from_bits(s.budget_bits);
        let cost = self.cfg.think_cost.0 * self.cfg.reasoning_inflation;
        let mut options: Vec<Option<(usize, u32)>> = vec![None];
        if let Some(choice) = self.fixed {
            options = vec![choice];
        } else if budget >= cost {
            for role in 0..2 {
                for calls in 1..=2 {
                    options.push(Some((role, calls)));
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        for opt in options {
            let q = self.q(s, budget, cost, opt);
            best = best.max(q);
        }
        self.memo.insert(s.clone(), best);
        best
    }

    fn q(&mut self, s: &MicroState, budget: f64, cost: f64, think: Option<(usize, u32)>) -> f64 {
        let u = self.u(&s.hist);
        let mut alpha = [0.0f64; 5];
        let mut remaining = budget;
        let mut think_sec = 0.0;
        if let Some((role, calls)) = think {
            for c in 0..calls {
                think_sec += self.call_sec;
                if remaining < cost {
                    remaining = 0.0;
                    break;
                }
                remaining -= cost;
                let r = if c == 0 { role } else { 1 - role };
                for (k, a) in alpha.iter_mut().enumerate() {
                    *a = a.max((self.cfg.eta * u * self.mult(r, k)).clamp(0.0, 1.0));
                }
            }
        }
        // the primitive that advances the current stage
        let expected = [NAV, INSPECT, PICK, DELIVER][s.stage as usize];
        let base = match expected {
            NAV => self.cfg.p_nav,
            INSPECT => self.cfg.inspect_false_neg,
            _ => self.cfg.p_manip,
        };
        let p_fail = (1.0 - alpha[expected]) * base;
        // executor mistakes: uniform over the other primitives (2 navigates, inspect, pick, 1 deliver, wait)
        let p_wrong = (1.0 - self.cfg.exec_strength) * (1.0 - alpha[expected]);
        let mut others: Vec<usize> = vec![NAV, NAV, INSPECT, PICK, DELIVER, WAIT];
        let pos = others.iter().position(|&k| k == expected).expect("expected kind listed");
        others.remove(pos);
        let mut total = 0.0;
        let mut branch = |this: &mut Self, prob: f64, kind: usize, failed: bool, stage: u8, delivered: bool| {
            if prob == 0.0 {
                return;
            }
            let sec = think_sec + this.prim_sec[kind];
            let spend = (this.prim_sec[kind] * this.cfg.exec_budget_rate).min(remaining);
            let mut hist = s.hist.clone();
            hist.push((kind as u8, failed));
            if hist.len() > this.cfg.history_window {
                hist.remove(0);
            }
            let next = MicroState { stage, hist, budget_bits: (remaining - spend).to_bits(), t: s.t + 1 };
            let r = if delivered { this.cfg.reward.success_bonus } else { 0.0 }
                - this.cfg.reward.lambda * sec
                - if failed { this.cfg.reward.mu } else { 0.0 };
            total += prob * (r + this.v(&next));
        };
        let ok_stage = s.stage + 1;
        // a failed deliver drops the object back to the confirmed stage
        let fail_stage = if expected == DELIVER { 2 } else { s.stage };
        branch(self, (1.0 - p_wrong) * (1.0 - p_fail), expected, false, ok_stage, expected == DELIVER);
        branch(self, (1.0 - p_wrong) * p_fail, expected, true, fail_stage, false);
        let each = p_wrong / others.len() as f64;
        for k in others {
            branch(self, each, k, k != WAIT, s.stage, false);
        }
        total
    }
}
