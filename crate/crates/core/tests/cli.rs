use std::path::Path;
use std::process::{Command, Output};

use orchestra::harness::{AblationRow, CeilingRow, ShiftRow, ShockRow, SweepRow};
use orchestra::report::{CURVE_COLUMNS, SUMMARY_COLUMNS};
use serde_json::json;

fn orchestra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orchestra")).args(args).output().expect("spawn orchestra")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, v: serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn quick_eval(dir: &Path) -> String {
    write(
        dir,
        "eval.json",
        json!({
            "kind": "eval",
            "env": { "preset": "micro_delivery" },
            "episodes": 20,
            "deciders": [
                { "name": "no_reasoning", "kind": "no_reasoning" },
                { "name": "fixed_interval_3", "kind": "fixed_interval", "k": 3 }
            ]
        }),
    )
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let o = orchestra(&["validate", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: "));
    }
}

#[test]
fn invalid_config_lists_each_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::to_value(orchestra::domain::EnvConfig::delivery()).unwrap();
    cfg["p_nav"] = json!(1.5);
    cfg["eta"] = json!(-0.1);
    let bad = write(tmp.path(), "bad.json", cfg);
    let o = orchestra(&["validate", &bad]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[config]:")).collect();
    assert!(lines.len() >= 2, "{err}");
    assert!(lines.iter().any(|l| l.contains("p-nav")), "{err}");
    assert!(lines.iter().any(|l| l.contains("eta")), "{err}");
}

#[test]
fn unknown_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.json", json!({ "kind": "eval", "episodez": 3 }));
    let o = orchestra(&["validate", &spec]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("episodez"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(orchestra(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(orchestra(&["validate", "x.json", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(orchestra(&["--help"]).status.code(), Some(0));
}

#[test]
fn report_without_logs_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orchestra(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[runtime]:"));
}

#[test]
fn eval_seeds_flag_and_report_reproduce_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = quick_eval(tmp.path());
    let out = tmp.path().join("run");
    let o = orchestra(&["eval", &spec, "--seeds", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "# re = tsr / max(mean(budget_consumed / budget_initial), 0.01)");
    assert_eq!(lines.next().unwrap(), SUMMARY_COLUMNS.join(","));
    for name in ["no_reasoning", "fixed_interval_3"] {
        let rows = summary.lines().filter(|l| l.starts_with(&format!("{name},"))).count();
        assert_eq!(rows, 6, "{name}: 5 seed rows and one aggregate");
    }

    let o = orchestra(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("report_summary.csv")).unwrap(), summary.as_bytes());

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], json!([0, 1, 2, 3, 4]));

    let log = std::fs::read_to_string(out.join("logs/no_reasoning.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut expected = vec![
        "seed", "episode", "t", "phase", "action", "role", "budget_level", "primitive", "reward", "delta", "cost", "tokens",
        "action_failed", "success", "done", "budget_remaining", "budget_consumed", "budget_initial", "shock_removed",
    ];
    expected.sort_unstable();
    assert_eq!(keys, expected);
}

#[test]
fn mismatched_kind_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = quick_eval(tmp.path());
    let o = orchestra(&["sweep", &spec, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_curve_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(
        tmp.path(),
        "train.json",
        json!({
            "env": { "preset": "micro_delivery" },
            "ppo": { "hidden": [16], "iterations": 4, "episodes_per_iter": 4 },
            "seed": 3,
            "checkpoint_every": 2
        }),
    );
    let out = tmp.path().join("run");
    let o = orchestra(&["train", &spec, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed_dir = out.join("seed_3");
    assert_eq!(header(&seed_dir.join("curve.csv")), CURVE_COLUMNS.join(","));
    assert_eq!(std::fs::read_to_string(seed_dir.join("curve.csv")).unwrap().lines().count(), 5);
    for f in ["checkpoint.json", "checkpoint_00002.json", "checkpoint_00004.json"] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }
    let ck: serde_json::Value = serde_json::from_slice(&std::fs::read(seed_dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["version"], json!(orchestra::harness::CHECKPOINT_VERSION));
    assert_eq!(ck["iteration"], json!(4));
}

#[test]
fn table_headers_are_stable() {
    assert_eq!(SUMMARY_COLUMNS.join(","), "decider,seed,tsr,el_steps,el_seconds,re,rf,tokens,mean_cost,episodes");
    assert_eq!(
        CURVE_COLUMNS.join(","),
        "iteration,mean_return,tsr,rf,mean_cost,policy_loss,value_loss,entropy,dual_lambda"
    );
    assert_eq!(SweepRow::COLUMNS.join(","), "decider,std_scale,tsr_mean,tsr_std,rf_mean");
    assert_eq!(ShockRow::COLUMNS.join(","), "decider,seed,tsr_pre,tsr_post,ri_pre,ri_post");
    assert_eq!(CeilingRow::COLUMNS.join(","), "q_exec,eta,decider,tsr_mean,tsr_std");
    assert_eq!(AblationRow::COLUMNS.join(","), "variant,tsr_mean,tsr_std,ri_mean,cost_mean,cost_norm");
    assert_eq!(ShiftRow::COLUMNS.join(","), "decider,seed,tsr_base,tsr_shift,rf_base,rf_shift,delta_tsr,delta_rf");
}
