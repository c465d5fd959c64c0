//! Latency profiles and affine moment-matching calibration.
//!
//! Reasoning latency is an affine function of the abstract cost drawn for a
//! call, so the cost distribution and the latency distribution stay coupled:
//! `seconds = a * units + b`. Token usage is linear in units with a cap per
//! call.

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PrimitiveKind, RngStream};

/// Empirical runtime statistics of the reasoning backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalStats {
    pub mean_sec: f64,
    pub std_sec: f64,
    pub mean_tokens: f64,
}

/// Measured profile of the hosted reasoning model used as the default target.
pub const MEASURED: EmpiricalStats = EmpiricalStats { mean_sec: 0.82, std_sec: 0.27, mean_tokens: 380.0 };

/// First two moments of the abstract cost distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceMoments {
    pub mean: f64,
    pub std: f64,
}

impl SourceMoments {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self { mean: 0.5 * (lo + hi), std: (hi - lo) / 12f64.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// Seconds per abstract unit.
    pub a: f64,
    /// Seconds offset.
    pub b: f64,
    /// Tokens per abstract unit.
    pub token_scale: f64,
}

impl Calibration {
    pub fn seconds(&self, units: f64) -> f64 {
        self.a * units + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("zero-variance-source")]
    ZeroVarianceSource,
    #[error("zero-mean-source")]
    ZeroMeanSource,
}

/// Affine moment matching of abstract units onto measured seconds and tokens.
pub fn calibrate(target: EmpiricalStats, source: SourceMoments) -> Result<Calibration, CalibError> {
    if !(source.std > 0.0) {
        return Err(CalibError::ZeroVarianceSource);
    }
    if source.mean == 0.0 {
        return Err(CalibError::ZeroMeanSource);
    }
    let a = target.std_sec / source.std;
    let b = target.mean_sec - a * source.mean;
    Ok(Calibration { a, b, token_scale: target.mean_tokens / source.mean })
}

/// Non-negative latency distribution given by mean and standard deviation.
///
/// Log-normal when `std > 0`, a point mass otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyDist {
    pub mean: f64,
    pub std: f64,
}

impl LatencyDist {
    pub const fn fixed(mean: f64) -> Self {
        Self { mean, std: 0.0 }
    }

    pub fn sample(&self, std_scale: f64, rng: &mut RngStream) -> f64 {
        let std = self.std * std_scale;
        if std <= 0.0 || self.mean <= 0.0 {
            return self.mean.max(0.0);
        }
        let var_ratio = (std / self.mean).powi(2);
        let sigma2 = var_ratio.ln_1p();
        let mu = self.mean.ln() - 0.5 * sigma2;
        // parameters are finite and sigma > 0 here
        let ln = LogNormal::new(mu, sigma2.sqrt()).expect("valid log-normal parameters");
        ln.sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub id: String,
    /// Indexed by [`PrimitiveKind::index`].
    pub primitive: [LatencyDist; 5],
    pub reasoning: Calibration,
    /// Multiplies the spread of every latency draw; 1 leaves the profile as measured.
    pub variance_inflation: f64,
}

impl LatencyProfile {
    pub fn by_id(id: &str) -> Option<LatencyProfile> {
        match id {
            "default" => Some(Self::calibrated_default()),
            "deterministic" => Some(Self::deterministic()),
            _ => None,
        }
    }

    /// Reasoning calls matched to the measured backend from `U[5, 20]` costs.
    pub fn calibrated_default() -> Self {
        let reasoning = calibrate(MEASURED, SourceMoments::uniform(5.0, 20.0))
            .expect("uniform source has positive variance");
        Self {
            id: "default".into(),
            primitive: [
                LatencyDist { mean: 0.5, std: 0.15 },
                LatencyDist { mean: 0.25, std: 0.075 },
                LatencyDist { mean: 0.4, std: 0.12 },
                LatencyDist { mean: 0.4, std: 0.12 },
                LatencyDist { mean: 0.25, std: 0.075 },
            ],
            reasoning,
            variance_inflation: 1.0,
        }
    }

    /// Same means as the default profile with every draw collapsed to its mean.
    pub fn deterministic() -> Self {
        let d = Self::calibrated_default();
        Self {
            id: "deterministic".into(),
            primitive: d.primitive.map(|p| LatencyDist::fixed(p.mean)),
            reasoning: Calibration { a: 0.0, b: MEASURED.mean_sec, token_scale: d.reasoning.token_scale },
            variance_inflation: 0.0,
        }
    }

    pub fn primitive_latency(&self, kind: PrimitiveKind, std_scale: f64, rng: &mut RngStream) -> f64 {
        self.primitive[kind.index()].sample(std_scale * self.variance_inflation, rng)
    }

    /// Latency of one reasoning call with abstract cost `units`.
    ///
    /// `mean_units` anchors the spread scaling so the mean is preserved.
    pub fn reasoning_latency(&self, units: f64, mean_units: f64, std_scale: f64) -> f64 {
        let mean = self.reasoning.seconds(mean_units);
        let raw = self.reasoning.seconds(units);
        (mean + std_scale * self.variance_inflation * (raw - mean)).max(0.0)
    }

    pub fn tokens(&self, units: f64, cap: u32) -> u32 {
        let t = (self.reasoning.token_scale * units).round().max(0.0) as u32;
        t.min(cap)
    }
}
