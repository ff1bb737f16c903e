//! Training configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{EdgeOrdering, Pooling};
use crate::error::{Error, Result};
use crate::graph::GraphConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub n: usize,
    #[serde(default)]
    pub rho: f64,
    /// Explicit per-trajectory edge budget, replacing `floor((1 - rho) E)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_override: Option<usize>,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub h_g: usize,
    pub h_c: usize,
    pub eps_explore_start: f64,
    pub eps_explore_end: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { h_g: 64, h_c: 64, eps_explore_start: 0.05, eps_explore_end: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub d_dim: usize,
    pub s_c: usize,
    pub gamma: f64,
    pub pooling: Pooling,
    pub ordering: EdgeOrdering,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self { d_dim: 32, s_c: 16, gamma: 0.5, pooling: Pooling::Mean, ordering: EdgeOrdering::Set }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub t_steps: usize,
    pub data_dim: usize,
    pub a_start: f64,
    pub a_end: f64,
    pub hidden: usize,
    pub freeze_denoiser: bool,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self { t_steps: 100, data_dim: 2, a_start: 0.999, a_end: 0.9, hidden: 64, freeze_denoiser: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub avg_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            max_steps: 1000,
            seed: 0,
            log_every: 100,
            checkpoint_every: 1000,
            avg_window: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    #[default]
    AnalyticMixture,
    DenoiserMse,
}

/// Mixture reward whose centers are the blended conditions of chosen
/// terminal edge sets ("anchors") at the start of policy training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub mode: RewardMode,
    /// Anchor edge sets; empty picks evenly spaced sets from the enumeration.
    pub anchors: Vec<Vec<usize>>,
    /// Number of anchors to pick when `anchors` is empty.
    pub num_modes: usize,
    /// Per-anchor weights; empty means all ones.
    pub weights: Vec<f64>,
    /// Shared component width; ignored when `ratio_target` is set.
    pub width: f64,
    /// Calibrate the width so that best / worst terminal reward equals this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_target: Option<f64>,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { mode: RewardMode::AnalyticMixture, anchors: Vec::new(), num_modes: 2, weights: Vec::new(), width: 0.1, ratio_target: Some(10.0) }
    }
}

/// Synthetic labelled data: one blob per reward mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub radius: f64,
    pub spread: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { radius: 2.0, spread: 0.1 }
    }
}

/// Supervised warm-up of decoder and denoiser on `(anchor k, blob k)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { steps: 0, lr: 3e-3, batch: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub enumeration_cap: u64,
    pub tv_threshold: f64,
    pub residual_threshold: f64,
    /// Terminal sets drawn for the empirical distribution.
    pub samples: usize,
    pub coverage_radius: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { enumeration_cap: 100_000, tv_threshold: 0.05, residual_threshold: 1e-2, samples: 20_000, coverage_radius: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub graph: GraphSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub decoder: DecoderSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn graph_config(&self) -> Result<GraphConfig> {
        let g = &self.graph;
        match g.s_override {
            Some(s) => GraphConfig::with_steps(g.n, g.rho, s, g.m),
            None => GraphConfig::new(g.n, g.rho, g.m),
        }
    }

    /// Checks every section; called before any training step.
    pub fn validate(&self) -> Result<()> {
        self.graph_config()?;
        let p = &self.policy;
        check(p.h_g > 0 && p.h_c > 0, || "policy widths must be positive".into())?;
        for (name, v) in [("eps_explore_start", p.eps_explore_start), ("eps_explore_end", p.eps_explore_end)] {
            check((0.0..=1.0).contains(&v), || format!("{name} = {v} outside [0, 1]"))?;
        }
        let d = &self.decoder;
        check(d.d_dim > 0 && d.s_c > 0, || "decoder widths must be positive".into())?;
        check((0.0..=1.0).contains(&d.gamma), || format!("gamma = {} outside [0, 1]", d.gamma))?;
        let f = &self.diffusion;
        check(f.t_steps > 0 && f.data_dim >= 2 && f.hidden > 0, || {
            "diffusion needs t_steps > 0, data_dim >= 2, hidden > 0".into()
        })?;
        check(f.a_end > 0.0 && f.a_end <= f.a_start && f.a_start <= 1.0, || {
            format!("schedule endpoints a_start = {}, a_end = {}", f.a_start, f.a_end)
        })?;
        let t = &self.train;
        check(t.alpha >= 0.0 && t.beta >= 0.0, || "loss weights must be non-negative".into())?;
        check(t.lr > 0.0 && t.lr.is_finite(), || format!("lr = {}", t.lr))?;
        check(t.avg_window > 0, || "avg_window must be positive".into())?;
        let r = &self.reward;
        check(r.anchors.is_empty() || r.num_modes == r.anchors.len() || r.num_modes == 0, || {
            format!("{} anchors but num_modes = {}", r.anchors.len(), r.num_modes)
        })?;
        check(!r.anchors.is_empty() || r.num_modes > 0, || "reward needs at least one mode".into())?;
        check(r.weights.is_empty() || r.weights.len() == self.num_modes(), || "one weight per mode".into())?;
        check(r.weights.iter().all(|&w| w > 0.0 && w.is_finite()), || "weights must be positive".into())?;
        check(r.width > 0.0, || format!("width = {}", r.width))?;
        if let Some(q) = r.ratio_target {
            check(q > 1.0 && q.is_finite(), || format!("ratio_target = {q} must exceed 1"))?;
        }
        check(self.data.radius > 0.0 && self.data.spread >= 0.0, || "data radius/spread".into())?;
        check(self.pretrain.lr > 0.0 && self.pretrain.batch > 0, || "pretrain lr/batch".into())?;
        let e = &self.eval;
        check(e.tv_threshold > 0.0 && e.residual_threshold > 0.0 && e.coverage_radius > 0.0, || {
            "eval thresholds must be positive".into()
        })?;
        check(e.samples > 0, || "eval samples must be positive".into())?;
        Ok(())
    }

    pub fn num_modes(&self) -> usize {
        if self.reward.anchors.is_empty() {
            self.reward.num_modes
        } else {
            self.reward.anchors.len()
        }
    }

    /// Exploration rate at `step`, annealed linearly over `max_steps`.
    pub fn explore_at(&self, step: u64) -> f64 {
        let p = &self.policy;
        let frac = if self.train.max_steps == 0 { 1.0 } else { (step as f64 / self.train.max_steps as f64).min(1.0) };
        p.eps_explore_start + (p.eps_explore_end - p.eps_explore_start) * frac
    }
}
