use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orchestra::domain::{validate_config, EnvConfig};
use orchestra::harness::{evaluate_seed, profile_for};
use orchestra::par::Execution;
use orchestra::policy::DeciderKind;
use orchestra::ppo::{collect, init_policy, PpoConfig};

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn eval_episodes(c: &mut Criterion) {
    let cfg = validate_config(EnvConfig::delivery()).unwrap();
    let profile = profile_for(&cfg).unwrap();
    let decider = DeciderKind::Heuristic { theta: 0.5 };
    let mut group = c.benchmark_group("eval_200_episodes");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_seed(&decider, &cfg, &profile, 0, 200, None, false, exec).unwrap())
        });
    }
    group.finish();
}

fn ppo_collect(c: &mut Criterion) {
    let cfg = validate_config(EnvConfig::delivery()).unwrap();
    let profile = profile_for(&cfg).unwrap();
    let ppo = PpoConfig::default();
    let policy = init_policy(&cfg, &ppo, 0).unwrap();
    let mut group = c.benchmark_group("collect_20_episodes");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| collect(&policy, &cfg, &profile, ppo.episodes_per_iter, 0, 0, 0.0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, eval_episodes, ppo_collect);
criterion_main!(benches);
