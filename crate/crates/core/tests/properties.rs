mod common;

use common::gae_direct;
use orchestra::calib::LatencyProfile;
use orchestra::diffnet::DenseNet;
use orchestra::domain::{
    budget_level_to_invocation, validate_config, BudgetLevel, EnvConfig, OrchestrationAction, PrimitiveAction, Purpose,
    ReasoningRole, RngStream, StreamKey,
};
use orchestra::envsim::{exec_primitive, observe, reset, TaskPhase};
use orchestra::policy::{decide, think_masked, AblationFlags, DeciderKind, LearnedPolicy};
use orchestra::ppo::{clipped_surrogate, constrained_dual_update, gae, init_policy, PpoConfig};
use orchestra::reasoning::invoke_reasoning;
use orchestra::rollout::{run_episode, EpisodeCtx, ShockSpec};
use proptest::prelude::*;

fn delivery() -> (orchestra::domain::ValidatedConfig, LatencyProfile) {
    (validate_config(EnvConfig::delivery()).unwrap(), LatencyProfile::calibrated_default())
}

proptest! {
    #[test]
    fn gae_matches_direct_sum(
        steps in prop::collection::vec((-5.0f64..5.0, -10.0f64..10.0, prop::bool::weighted(0.2)), 1..50),
        gamma in 0.5f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, _) = gae(&r, &v, &d, gamma, lambda).unwrap();
        for (a, b) in adv.iter().zip(gae_direct(&r, &v, &d, gamma, lambda)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn surrogate_never_exceeds_clip_bound(rho in 0.0f64..5.0, adv in -10.0f64..10.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(rho, adv, eps);
        let bound = (rho * adv).max((1.0 + eps) * adv).max((1.0 - eps) * adv);
        prop_assert!(s <= bound + 1e-15);
        prop_assert!(s <= rho * adv + 1e-15);
    }

    #[test]
    fn dual_stays_non_negative(dual in 0.0f64..10.0, cost in 0.0f64..200.0, c_max in 0.0f64..100.0, lr in 0.0f64..1.0) {
        prop_assert!(constrained_dual_update(dual, cost, c_max, lr) >= 0.0);
    }
}

#[test]
fn invocation_table_is_strictly_increasing() {
    let levels = [BudgetLevel::NONE, BudgetLevel::LOW, BudgetLevel::HIGH].map(budget_level_to_invocation);
    for w in levels.windows(2) {
        assert!(w[1].call_count > w[0].call_count);
        assert!(w[1].total_tokens() > w[0].total_tokens());
    }
}

#[test]
fn rng_streams_replay_bitwise() {
    let key = StreamKey::new(Purpose::TrainEnv, 0, 17);
    let mut a = RngStream::new(99, key);
    let mut b = RngStream::new(99, key);
    for _ in 0..100_000 {
        assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
    }
}

#[test]
fn forward_is_pure() {
    let net = DenseNet::new(&[7, 16, 16, 3], &mut RngStream::for_test(3)).unwrap();
    let x = [0.1, -0.4, 0.3, 0.9, -1.2, 0.0, 2.5];
    let first = net.predict(&x).unwrap();
    for _ in 0..10 {
        let again = net.predict(&x).unwrap();
        assert!(first.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn phase_dag_is_respected_by_random_policies() {
    let (cfg, profile) = delivery();
    let policy = init_policy(&cfg, &PpoConfig { hidden: vec![16], ..PpoConfig::default() }, 1).unwrap();
    let d = DeciderKind::Learned { policy: Box::new(policy), greedy: false };
    let mut delivered = 0;
    for e in 0..10_000 {
        let mut ctx = EpisodeCtx::eval(&cfg, &profile, 8, e);
        ctx.record_steps = true;
        let out = run_episode(&d, &ctx).unwrap();
        let mut seen = [false; 6];
        seen[TaskPhase::AtStart.index()] = true;
        let mut prev = TaskPhase::AtStart;
        for r in &out.records {
            if r.phase == TaskPhase::Delivered {
                assert_eq!(prev, TaskPhase::Holding, "episode {e}");
                for p in [TaskPhase::InTaskRegion, TaskPhase::ObjectConfirmed, TaskPhase::Holding] {
                    assert!(seen[p.index()], "episode {e} skipped {p:?}");
                }
                delivered += 1;
            }
            seen[r.phase.index()] = true;
            prev = r.phase;
        }
    }
    assert!(delivered > 0);
}

fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    (hits as f64 / n as f64 - p).abs() <= 3.0 * sigma
}

#[test]
fn primitive_failure_rates_match_config() {
    let (cfg, profile) = delivery();
    let mut rng = RngStream::for_test(12);
    let mut s = reset(&cfg, &mut rng);
    s.task.cluttered = false;
    s.task.decoy = false;
    let n = 100_000;
    let nav = PrimitiveAction::Navigate(s.task.task_region);
    let fails = (0..n).filter(|_| exec_primitive(&s, nav, &cfg, &profile, &mut rng).unwrap().info.action_failed).count();
    assert!(within_3_sigma(fails, n, cfg.p_nav), "navigate {fails}/{n}");

    let mut at_object = s.clone();
    at_object.phase = TaskPhase::ObjectConfirmed;
    at_object.region = s.task.task_region;
    at_object.object_seen = true;
    at_object.object_confirmed = true;
    let fails = (0..n)
        .filter(|_| exec_primitive(&at_object, PrimitiveAction::Pick, &cfg, &profile, &mut rng).unwrap().info.action_failed)
        .count();
    assert!(within_3_sigma(fails, n, cfg.p_manip), "pick {fails}/{n}");
}

#[test]
fn deeper_reasoning_costs_more_in_expectation() {
    let (cfg, profile) = delivery();
    let mut rng = RngStream::for_test(4);
    let mut s = reset(&cfg, &mut rng);
    s.budget = 1e12;
    let mut means = Vec::new();
    for level in [BudgetLevel::LOW, BudgetLevel::HIGH] {
        let (mut cost, mut delta, mut tokens) = (0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let (_, out) = invoke_reasoning(&s, ReasoningRole::Plan, level, &cfg, &profile, &mut rng).unwrap();
            cost += out.cost;
            delta += out.delta;
            tokens += f64::from(out.tokens);
        }
        means.push((cost / 1e4, delta / 1e4, tokens / 1e4));
    }
    assert!(means[0].0 > 0.0 && means[0].1 > 0.0 && means[0].2 > 0.0);
    assert!(means[1].0 > means[0].0 && means[1].1 > means[0].1 && means[1].2 > means[0].2);
}

#[test]
fn shock_removes_exact_fraction_and_budget_never_rises() {
    let (cfg, profile) = delivery();
    let d = DeciderKind::Heuristic { theta: 0.2 };
    for e in 0..300 {
        let mut ctx = EpisodeCtx::eval(&cfg, &profile, 6, e);
        ctx.record_steps = true;
        ctx.shock = (e % 3 != 0).then_some(ShockSpec { fraction: 0.5 });
        let out = run_episode(&d, &ctx).unwrap();
        let mut budget = out.records.first().map_or(0.0, |r| r.budget_initial);
        let mut removed = 0.0;
        for r in &out.records {
            assert!(r.budget_remaining <= budget, "budget rose at t {}", r.t);
            if r.shock_removed != removed {
                assert_eq!(r.shock_removed - removed, budget * 0.5);
                removed = r.shock_removed;
            }
            budget = r.budget_remaining;
        }
        if ctx.shock.is_none() {
            assert_eq!(removed, 0.0);
        }
    }
}

fn all_actions() -> Vec<OrchestrationAction> {
    let mut v = vec![OrchestrationAction::Act];
    for role in [ReasoningRole::Plan, ReasoningRole::Verify] {
        for level in [BudgetLevel::LOW, BudgetLevel::HIGH] {
            v.push(OrchestrationAction::Think { role, budget: level });
        }
    }
    v
}

#[test]
fn factored_log_probs_sum_to_one() {
    let (cfg, _) = delivery();
    let mut rng = RngStream::for_test(21);
    for flags in [
        AblationFlags::NONE,
        AblationFlags { planner_only: true, ..AblationFlags::NONE },
        AblationFlags { fixed_budget: true, ..AblationFlags::NONE },
    ] {
        let policy = LearnedPolicy::new(&cfg, &[24, 24], flags, &mut rng).unwrap();
        for i in 0..200 {
            let mut s = reset(&cfg, &mut rng);
            s.u = rng.uniform();
            let masked = i % 4 == 0;
            let d = policy.dist(&observe(&s, &cfg), masked).unwrap();
            // actions outside a frozen head are rejected rather than given zero mass
            let total: f64 = all_actions().iter().filter_map(|a| d.logprob(*a, &policy.freeze).ok()).map(f64::exp).sum();
            assert!((total - 1.0).abs() <= 1e-10, "flags {flags:?}: {total}");
        }
    }
}

#[test]
fn baselines_are_pure_functions_of_state() {
    let (cfg, _) = delivery();
    let mut rng = RngStream::for_test(2);
    let deciders = [
        DeciderKind::NoReasoning,
        DeciderKind::FullReasoning { role: ReasoningRole::Verify, budget: BudgetLevel::HIGH },
        DeciderKind::FixedInterval { k: 3 },
        DeciderKind::Heuristic { theta: 0.4 },
    ];
    for t in 0..20 {
        let mut s = reset(&cfg, &mut rng);
        s.t = t;
        s.u = rng.uniform();
        let obs = observe(&s, &cfg);
        for d in &deciders {
            let a = decide(d, &obs, &s, &cfg, &mut RngStream::for_test(1)).unwrap();
            let b = decide(d, &obs, &s, &cfg, &mut RngStream::for_test(999)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.think_masked, think_masked(&s, &cfg));
        }
    }
}
