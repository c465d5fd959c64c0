//! Simulated reasoning backend, guidance buffer and the THINK effect on execution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::LatencyProfile;
use crate::domain::{BudgetLevel, EnvConfig, PrimitiveKind, ReasoningRole, RngStream};
use crate::envsim::EnvState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEntry {
    pub role: ReasoningRole,
    pub issued_at: usize,
    /// Uncertainty captured when the guidance was produced.
    pub u_at_issue: f64,
    pub content_tag: u32,
}

/// Recent reasoning outputs; only fresh entries condition execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBuffer {
    entries: Vec<GuidanceEntry>,
    pub freshness_horizon: usize,
}

impl GuidanceBuffer {
    pub fn new(freshness_horizon: usize) -> Self {
        Self { entries: Vec::new(), freshness_horizon }
    }

    pub fn push(&mut self, entry: GuidanceEntry) {
        // entries older than the horizon can never become fresh again
        let horizon = self.freshness_horizon;
        let now = entry.issued_at;
        self.entries.retain(|e| now - e.issued_at <= horizon);
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[GuidanceEntry] {
        &self.entries
    }

    pub fn newest_age(&self, t: usize) -> Option<usize> {
        self.entries.iter().map(|e| t.saturating_sub(e.issued_at)).min()
    }

    pub fn is_fresh(&self, t: usize) -> bool {
        self.newest_age(t).is_some_and(|age| age <= self.freshness_horizon)
    }

    pub fn fresh(&self, t: usize) -> impl Iterator<Item = &GuidanceEntry> {
        let h = self.freshness_horizon;
        self.entries.iter().filter(move |e| t.saturating_sub(e.issued_at) <= h)
    }

    /// Whether fresh guidance from `role` exists at step `t`.
    pub fn has_fresh_role(&self, role: ReasoningRole, t: usize) -> bool {
        self.fresh(t).any(|e| e.role == role)
    }
}

/// Reasoning gain `eta * u`, scaled by the role multiplier; always in `[0, 1]`.
pub fn guidance_alpha(eta: f64, u: f64, multiplier: f64) -> f64 {
    (eta * u * multiplier).clamp(0.0, 1.0)
}

/// Largest gain any fresh guidance entry provides for a primitive kind.
pub fn fresh_alpha(s: &EnvState, kind: PrimitiveKind, cfg: &EnvConfig) -> f64 {
    s.guidance
        .fresh(s.t)
        .map(|e| guidance_alpha(cfg.eta, e.u_at_issue, cfg.role_effects.multiplier(e.role, kind)))
        .fold(0.0, f64::max)
}

/// Failure probability after fresh guidance: `(1 - alpha) * base`.
pub fn apply_guidance_effect(base_fail: f64, s: &EnvState, kind: PrimitiveKind, cfg: &EnvConfig) -> f64 {
    (1.0 - fresh_alpha(s, kind, cfg)) * base_fail
}

/// Primitive kinds a role's guidance improves under the given config.
pub fn role_effect_profile(role: ReasoningRole, cfg: &EnvConfig) -> Vec<(PrimitiveKind, f64)> {
    PrimitiveKind::ALL
        .iter()
        .map(|&k| (k, cfg.role_effects.multiplier(role, k)))
        .filter(|(_, m)| *m > 0.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReasoningError {
    #[error("budget-level-zero: THINK requires level >= 1")]
    LevelZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinkOutcome {
    /// Budget units charged; a call that does not fit takes what is left.
    pub cost: f64,
    /// Cost drawn for every call of the level, before exhaustion clamping.
    pub drawn_cost: f64,
    pub delta: f64,
    pub tokens: u32,
    /// Calls actually made; calls after an exhausting one are skipped.
    pub calls: u32,
    /// One entry per call that fit in the budget.
    pub guidance: Vec<GuidanceEntry>,
    /// Some call's cost exceeded the remaining budget.
    pub budget_exhausted: bool,
}

/// Boundary behind which a real remote reasoning client could sit.
pub trait ReasoningBackend: Send + Sync {
    fn invoke(
        &self,
        s: &EnvState,
        role: ReasoningRole,
        level: BudgetLevel,
        cfg: &EnvConfig,
        profile: &LatencyProfile,
        rng: &mut RngStream,
    ) -> Result<ThinkOutcome, ReasoningError>;
}

/// Draws costs, latency and tokens from the calibrated profile.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedBackend;

impl ReasoningBackend for SimulatedBackend {
    fn invoke(
        &self,
        s: &EnvState,
        role: ReasoningRole,
        level: BudgetLevel,
        cfg: &EnvConfig,
        profile: &LatencyProfile,
        rng: &mut RngStream,
    ) -> Result<ThinkOutcome, ReasoningError> {
        let inv = level.invocation();
        if inv.call_count == 0 {
            return Err(ReasoningError::LevelZero);
        }
        let (lo, hi) = cfg.think_cost;
        let mean_units = 0.5 * (lo + hi);
        let inflation = cfg.reasoning_inflation;
        let mut remaining = s.budget;
        let mut out = ThinkOutcome {
            cost: 0.0,
            drawn_cost: 0.0,
            delta: 0.0,
            tokens: 0,
            calls: 0,
            guidance: Vec::with_capacity(inv.call_count as usize),
            budget_exhausted: false,
        };
        for call in 0..inv.call_count {
            // every call is drawn so the stream position does not depend on the budget
            let units = rng.uniform_range(lo, hi);
            let charged = units * inflation;
            out.drawn_cost += charged;
            if out.budget_exhausted {
                continue;
            }
            out.calls += 1;
            out.delta += profile.reasoning_latency(units, mean_units, cfg.latency_std_scale) * inflation;
            out.tokens += profile.tokens(units, inv.token_cap);
            if remaining < charged {
                out.cost += remaining;
                remaining = 0.0;
                out.budget_exhausted = true;
                continue;
            }
            remaining -= charged;
            out.cost += charged;
            out.guidance.push(GuidanceEntry {
                role: if call == 0 { role } else { role.other() },
                issued_at: s.t,
                u_at_issue: s.u,
                content_tag: (s.t as u32) << 4 | call,
            });
        }
        Ok(out)
    }
}

/// Runs a THINK with the simulated backend and applies it to the state.
///
/// Only budget and guidance change; task phase, region and object flags are
/// left untouched.
pub fn invoke_reasoning(
    s: &EnvState,
    role: ReasoningRole,
    level: BudgetLevel,
    cfg: &EnvConfig,
    profile: &LatencyProfile,
    rng: &mut RngStream,
) -> Result<(EnvState, ThinkOutcome), ReasoningError> {
    let out = SimulatedBackend.invoke(s, role, level, cfg, profile, rng)?;
    Ok((apply_think(s, &out), out))
}

pub fn apply_think(s: &EnvState, out: &ThinkOutcome) -> EnvState {
    let mut next = s.clone();
    next.budget = (next.budget - out.cost).max(0.0);
    next.consumed += out.cost;
    for g in &out.guidance {
        next.guidance.push(*g);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_config;
    use crate::envsim::reset;

    fn state_with_u(u: f64, eta: f64) -> (EnvState, EnvConfig) {
        let cfg = EnvConfig { eta, ..EnvConfig::delivery() };
        let v = validate_config(cfg.clone()).unwrap();
        let mut s = reset(&v, &mut RngStream::for_test(0));
        s.u = u;
        (s, cfg)
    }

    fn with_guidance(mut s: EnvState, role: ReasoningRole) -> EnvState {
        s.guidance.push(GuidanceEntry { role, issued_at: s.t, u_at_issue: s.u, content_tag: 0 });
        s
    }

    #[test]
    fn eta_zero_has_no_effect() {
        let (s, cfg) = state_with_u(0.8, 0.0);
        let s = with_guidance(s, ReasoningRole::Plan);
        assert_eq!(apply_guidance_effect(0.3, &s, PrimitiveKind::Pick, &cfg), 0.3);
    }

    #[test]
    fn full_suppression() {
        let (s, cfg) = state_with_u(1.0, 1.0);
        let s = with_guidance(s, ReasoningRole::Plan);
        assert_eq!(apply_guidance_effect(0.3, &s, PrimitiveKind::Pick, &cfg), 0.0);
    }

    #[test]
    fn partial_suppression() {
        let (s, cfg) = state_with_u(0.4, 0.5);
        let s = with_guidance(s, ReasoningRole::Plan);
        let eff = apply_guidance_effect(0.3, &s, PrimitiveKind::Navigate, &cfg);
        assert!((eff - 0.24).abs() < 1e-15, "{eff}");
    }

    #[test]
    fn stale_guidance_expires() {
        let (s, cfg) = state_with_u(1.0, 1.0);
        let mut s = with_guidance(s, ReasoningRole::Plan);
        let h = s.guidance.freshness_horizon;
        s.t += h;
        assert_eq!(apply_guidance_effect(0.3, &s, PrimitiveKind::Pick, &cfg), 0.0);
        s.t += 1;
        assert_eq!(apply_guidance_effect(0.3, &s, PrimitiveKind::Pick, &cfg), 0.3);
    }

    #[test]
    fn default_role_profiles() {
        let cfg = EnvConfig::delivery();
        let kinds = |r| role_effect_profile(r, &cfg).into_iter().map(|(k, _)| k).collect::<Vec<_>>();
        assert_eq!(
            kinds(ReasoningRole::Plan),
            vec![PrimitiveKind::Navigate, PrimitiveKind::Pick, PrimitiveKind::Deliver]
        );
        assert_eq!(kinds(ReasoningRole::Verify), vec![PrimitiveKind::Inspect]);
    }

    #[test]
    fn verify_guidance_does_not_help_pick() {
        let (s, cfg) = state_with_u(1.0, 1.0);
        let s = with_guidance(s, ReasoningRole::Verify);
        assert_eq!(apply_guidance_effect(0.3, &s, PrimitiveKind::Pick, &cfg), 0.3);
        assert_eq!(apply_guidance_effect(0.3, &s, PrimitiveKind::Inspect, &cfg), 0.0);
    }

    #[test]
    fn two_calls_at_level_two() {
        let (s, cfg) = state_with_u(0.2, 0.6);
        let profile = LatencyProfile::calibrated_default();
        let mut rng = RngStream::for_test(5);
        for _ in 0..1000 {
            let (next, out) =
                invoke_reasoning(&s, ReasoningRole::Verify, BudgetLevel::HIGH, &cfg, &profile, &mut rng).unwrap();
            assert_eq!(out.calls, 2);
            assert!(!out.budget_exhausted);
            assert!(out.tokens <= 1024);
            assert!(out.drawn_cost >= 10.0 && out.drawn_cost <= 40.0);
            if !out.budget_exhausted {
                let roles: Vec<_> = out.guidance.iter().map(|g| g.role).collect();
                assert_eq!(roles, vec![ReasoningRole::Verify, ReasoningRole::Plan]);
            }
            assert_eq!(next.phase, s.phase);
            assert_eq!(next.region, s.region);
        }
    }

    #[test]
    fn degenerate_cost_range() {
        let (s, mut cfg) = state_with_u(0.0, 0.6);
        cfg.think_cost = (10.0, 10.0);
        let profile = LatencyProfile::calibrated_default();
        let out = SimulatedBackend
            .invoke(&s, ReasoningRole::Plan, BudgetLevel::LOW, &cfg, &profile, &mut RngStream::for_test(1))
            .unwrap();
        assert_eq!(out.cost, 10.0);
    }

    #[test]
    fn exhaustion_clamps_and_yields_no_guidance() {
        let (mut s, cfg) = state_with_u(0.5, 0.6);
        s.budget = 3.0;
        let profile = LatencyProfile::calibrated_default();
        let (next, out) =
            invoke_reasoning(&s, ReasoningRole::Plan, BudgetLevel::LOW, &cfg, &profile, &mut RngStream::for_test(2))
                .unwrap();
        assert!(out.budget_exhausted);
        assert!(out.guidance.is_empty());
        assert_eq!(out.cost, 3.0);
        assert_eq!(next.budget, 0.0);
    }

    #[test]
    fn second_call_can_exhaust_alone() {
        let (mut s, mut cfg) = state_with_u(0.5, 0.6);
        cfg.think_cost = (10.0, 10.0);
        s.budget = 15.0;
        let profile = LatencyProfile::calibrated_default();
        let (next, out) =
            invoke_reasoning(&s, ReasoningRole::Plan, BudgetLevel::HIGH, &cfg, &profile, &mut RngStream::for_test(2))
                .unwrap();
        assert!(out.budget_exhausted);
        assert_eq!(out.drawn_cost, 20.0);
        assert_eq!(out.cost, 15.0);
        assert_eq!(out.guidance.len(), 1);
        assert_eq!(out.guidance[0].role, ReasoningRole::Plan);
        assert_eq!(next.budget, 0.0);
    }

    #[test]
    fn level_zero_is_rejected() {
        let (s, cfg) = state_with_u(0.0, 0.6);
        let profile = LatencyProfile::calibrated_default();
        let r = SimulatedBackend.invoke(&s, ReasoningRole::Plan, BudgetLevel::NONE, &cfg, &profile, &mut RngStream::for_test(2));
        assert_eq!(r.unwrap_err(), ReasoningError::LevelZero);
    }
}
