//! Run configuration: one JSON document collecting the knobs the
//! command-line pipelines accept, validated against the preconditions of
//! the modules they feed.

use crate::diffusion::{ChurnConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mesh::MAX_REFINEMENT;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Metric names the verification pipeline understands.
pub const KNOWN_METRICS: &[&str] = &[
    "crps",
    "rmse",
    "spread",
    "spread_skill",
    "bias",
    "rank_histogram",
    "brier",
    "brier_skill",
];

/// Generative sampler settings (noise schedule plus stochastic churn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub s_churn: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub s_noise: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let sched = NoiseSchedule::default();
        let churn = ChurnConfig::default();
        SamplerSettings {
            sigma_max: sched.sigma_max,
            sigma_min: sched.sigma_min,
            rho: sched.rho,
            n_steps: sched.n_steps,
            s_churn: churn.s_churn,
            s_tmin: churn.s_tmin,
            s_tmax: churn.s_tmax,
            s_noise: churn.s_noise,
        }
    }
}

impl SamplerSettings {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_max: self.sigma_max,
            sigma_min: self.sigma_min,
            rho: self.rho,
            n_steps: self.n_steps,
        }
    }

    pub fn churn(&self) -> ChurnConfig {
        ChurnConfig {
            s_churn: self.s_churn,
            s_tmin: self.s_tmin,
            s_tmax: self.s_tmax,
            s_noise: self.s_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.churn().validate()
    }
}

/// Everything a pipeline run can be configured with. Unknown keys in the
/// JSON are rejected so typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Verification metrics to compute.
    pub metrics: Vec<String>,
    /// Climatological exceedance percentiles (in [0, 100]) for the
    /// binary-event metrics.
    pub percentiles: Vec<f64>,
    /// Mesh refinement levels for spatial pooling.
    pub pool_levels: Vec<u32>,
    /// Cost/loss ratios for economic-value curves, each in (0, 1].
    pub cost_loss_ratios: Vec<f64>,
    /// Base RNG seed for every randomized stage.
    pub seed: u64,
    /// Worker threads (0 = library default).
    pub threads: usize,
    /// Two-sided test level for significance testing.
    pub alpha: f64,
    /// Bootstrap resamples for significance testing.
    pub n_resamples: usize,
    /// Generative sampler settings.
    pub sampler: SamplerSettings,
    /// Per-channel weight table (label -> weight) for training losses.
    pub level_weights: BTreeMap<String, f64>,
    /// NaN fill values per variable applied when reading containers.
    pub nan_fill: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            metrics: vec![
                "crps".into(),
                "rmse".into(),
                "spread_skill".into(),
                "bias".into(),
            ],
            percentiles: vec![99.99],
            pool_levels: vec![3],
            cost_loss_ratios: (1..=20).map(|j| j as f64 / 21.0).collect(),
            seed: 0,
            threads: 0,
            alpha: 0.05,
            n_resamples: 1000,
            sampler: SamplerSettings::default(),
            level_weights: BTreeMap::new(),
            nan_fill: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a JSON document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a JSON config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("run config {}: {e}", path.display()))
        })?;
        Self::from_json_str(&text)
    }

    /// Check every field against the preconditions of the module it
    /// configures.
    pub fn validate(&self) -> Result<()> {
        for m in &self.metrics {
            if !KNOWN_METRICS.contains(&m.as_str()) {
                return Err(Error::config(format!(
                    "unknown metric {m:?}; known: {}",
                    KNOWN_METRICS.join(", ")
                )));
            }
        }
        for &p in &self.percentiles {
            if !(0.0..=100.0).contains(&p) || !p.is_finite() {
                return Err(Error::config(format!("percentile {p} outside [0, 100]")));
            }
        }
        for &l in &self.pool_levels {
            if l > MAX_REFINEMENT as u32 {
                return Err(Error::config(format!(
                    "pool level {l} exceeds the maximum refinement {MAX_REFINEMENT}"
                )));
            }
        }
        if self.cost_loss_ratios.is_empty() {
            return Err(Error::config("cost/loss ratio grid is empty"));
        }
        for &r in &self.cost_loss_ratios {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(format!(
                    "cost/loss ratio {r} outside (0, 1)"
                )));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "test level {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.n_resamples == 0 {
            return Err(Error::config("number of resamples must be positive"));
        }
        self.sampler.validate()?;
        for (label, &w) in &self.level_weights {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::config(format!(
                    "weight for {label:?} must be positive, got {w}"
                )));
            }
        }
        for (var, &f) in &self.nan_fill {
            if !f.is_finite() {
                return Err(Error::config(format!(
                    "NaN fill for {var:?} must be finite, got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialized form, hashed into reports.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }
}
