//! Metric definitions, cross-seed aggregation and file emission.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rollout::StepRecord;

/// Lower bound on the mean consumed fraction in the resource-efficiency ratio.
pub const RE_FLOOR: f64 = 0.01;
pub const RE_FORMULA: &str = "# re = tsr / max(mean(budget_consumed / budget_initial), 0.01)";

pub const SUMMARY_COLUMNS: [&str; 10] =
    ["decider", "seed", "tsr", "el_steps", "el_seconds", "re", "rf", "tokens", "mean_cost", "episodes"];

pub const CURVE_COLUMNS: [&str; 9] =
    ["iteration", "mean_return", "tsr", "rf", "mean_cost", "policy_loss", "value_loss", "entropy", "dual_lambda"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("truncated-log(seed {seed}, episode {episode})")]
    TruncatedLog { seed: u64, episode: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub steps: usize,
    pub seconds: f64,
    pub invocations: usize,
    pub cost: f64,
    pub tokens: u64,
    pub consumed_fraction: f64,
    #[serde(rename = "return")]
    pub ret: f64,
}

/// Per-seed means of the reported metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub tsr: f64,
    pub el_steps: f64,
    pub el_seconds: f64,
    pub re: f64,
    pub rf: f64,
    pub tokens: f64,
    pub mean_cost: f64,
    pub mean_return: f64,
    pub episodes: usize,
    /// The consumed-fraction floor was applied.
    pub re_floored: bool,
}

impl SeedMetrics {
    pub fn from_episodes(eps: &[EpisodeMetrics]) -> Self {
        let n = eps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| eps.iter().map(f).sum::<f64>() / n;
        let tsr = mean(&|e| f64::from(u8::from(e.success)));
        let consumed = mean(&|e| e.consumed_fraction);
        Self {
            tsr,
            el_steps: mean(&|e| e.steps as f64),
            el_seconds: mean(&|e| e.seconds),
            re: tsr / consumed.max(RE_FLOOR),
            rf: mean(&|e| e.invocations as f64),
            tokens: mean(&|e| e.tokens as f64),
            mean_cost: mean(&|e| e.cost),
            mean_return: mean(&|e| e.ret),
            episodes: eps.len(),
            re_floored: consumed < RE_FLOOR,
        }
    }

    fn fields(&self) -> [f64; 8] {
        [self.tsr, self.el_steps, self.el_seconds, self.re, self.rf, self.tokens, self.mean_cost, self.mean_return]
    }

    fn from_fields(v: [f64; 8], episodes: usize, re_floored: bool) -> Self {
        Self {
            tsr: v[0],
            el_steps: v[1],
            el_seconds: v[2],
            re: v[3],
            rf: v[4],
            tokens: v[5],
            mean_cost: v[6],
            mean_return: v[7],
            episodes,
            re_floored,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub decider: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: SeedMetrics,
    /// Sample standard deviation across seed-level means.
    pub std: SeedMetrics,
}

impl MetricsSummary {
    pub fn from_seeds(decider: &str, seeds: &[u64], per_seed: Vec<SeedMetrics>) -> Self {
        let n = per_seed.len();
        let mut mean = [0.0; 8];
        for s in &per_seed {
            for (m, v) in mean.iter_mut().zip(s.fields()) {
                *m += v / n as f64;
            }
        }
        let mut var = [0.0; 8];
        if n > 1 {
            for s in &per_seed {
                for ((acc, v), m) in var.iter_mut().zip(s.fields()).zip(mean) {
                    *acc += (v - m).powi(2) / (n - 1) as f64;
                }
            }
        }
        let episodes = per_seed.iter().map(|s| s.episodes).sum();
        let floored = per_seed.iter().any(|s| s.re_floored);
        Self {
            decider: decider.to_string(),
            seeds: seeds.to_vec(),
            mean: SeedMetrics::from_fields(mean, episodes, floored),
            std: SeedMetrics::from_fields(var.map(f64::sqrt), episodes, floored),
            per_seed,
        }
    }
}

/// Episode metrics keyed by `(seed, episode)`.
pub type KeyedMetrics = Vec<((u64, u64), EpisodeMetrics)>;

/// Rebuilds per-episode metrics from a step log; every episode needs its terminal record.
pub fn compute_metrics(records: &[StepRecord]) -> Result<KeyedMetrics, ReportError> {
    let mut out: KeyedMetrics = Vec::new();
    let mut open: Option<(u64, u64)> = None;
    for r in records {
        let key = (r.seed, r.episode);
        if open != Some(key) {
            if let Some((seed, episode)) = open {
                return Err(ReportError::TruncatedLog { seed, episode });
            }
            out.push((key, EpisodeMetrics::default()));
            open = Some(key);
        }
        let m = &mut out.last_mut().expect("pushed above").1;
        m.steps += 1;
        m.seconds += r.delta;
        m.ret += r.reward;
        m.cost += r.cost;
        m.tokens += u64::from(r.tokens);
        m.invocations += usize::from(r.action.is_think());
        if r.done {
            m.success = r.success;
            m.consumed_fraction =
                if r.budget_initial > 0.0 { (r.budget_consumed / r.budget_initial).min(1.0) } else { 0.0 };
            open = None;
        }
    }
    if let Some((seed, episode)) = open {
        return Err(ReportError::TruncatedLog { seed, episode });
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn summary_row(decider: &str, seed: &str, m: &SeedMetrics) -> Vec<String> {
    vec![
        decider.to_string(),
        seed.to_string(),
        fmt(m.tsr),
        fmt(m.el_steps),
        fmt(m.el_seconds),
        fmt(m.re),
        fmt(m.rf),
        fmt(m.tokens),
        fmt(m.mean_cost),
        m.episodes.to_string(),
    ]
}

fn write_with_header(path: &Path, header_lines: &[&str], body: impl FnOnce(&mut csv::Writer<&mut BufWriter<File>>) -> Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for line in header_lines {
        writeln!(w, "{line}")?;
    }
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        body(&mut csv)?;
        csv.flush()?;
    }
    w.flush()?;
    Ok(())
}

/// One row per seed plus one `mean` row per decider.
pub fn write_summary_csv(path: &Path, summaries: &[MetricsSummary]) -> Result<()> {
    write_with_header(path, &[RE_FORMULA], |w| {
        w.write_record(SUMMARY_COLUMNS)?;
        for s in summaries {
            for (seed, m) in s.seeds.iter().zip(&s.per_seed) {
                w.write_record(summary_row(&s.decider, &seed.to_string(), m))?;
            }
            w.write_record(summary_row(&s.decider, "mean", &s.mean))?;
        }
        Ok(())
    })
}

/// Cross-seed standard deviations, same columns as the summary.
pub fn write_std_csv(path: &Path, summaries: &[MetricsSummary]) -> Result<()> {
    write_with_header(path, &[RE_FORMULA], |w| {
        w.write_record(SUMMARY_COLUMNS)?;
        for s in summaries {
            w.write_record(summary_row(&s.decider, "std", &s.std))?;
        }
        Ok(())
    })
}

/// Generic CSV table with a fixed header.
pub fn write_table(path: &Path, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_with_header(path, &[], |w| {
        w.write_record(columns)?;
        for r in rows {
            w.write_record(r)?;
        }
        Ok(())
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub started: String,
    pub finished: String,
}

pub fn spec_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Summary rows read back from a summary CSV, keyed by decider and seed label.
pub fn read_summary_csv(path: &Path) -> Result<Vec<(String, String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec.iter().skip(2).map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
        out.push((rec[0].to_string(), rec[1].to_string(), vals));
    }
    Ok(out)
}
