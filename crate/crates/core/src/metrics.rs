//! Verification and evaluation metrics: exact and empirical terminal
//! distributions, total variation, detailed-balance audits, Vendi score,
//! edge-frequency contrasts, mode coverage and the metrics report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::log_sum_exp;
use crate::error::{Error, Result};
use crate::graph::{binomial, enumerate_terminal_sequences, enumerate_terminal_sets};
use crate::tensor::Tensor;

const NORMALIZATION_TOL: f64 = 1e-9;
/// Eigenvalues in `[-EIGEN_FLOOR, 0]` are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Probabilities over terminal objects, keyed by their canonical edge tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalDistribution {
    support: Vec<Vec<usize>>,
    probs: Vec<f64>,
}

impl TerminalDistribution {
    /// Builds from `(key, weight)` pairs; weights are normalized. Keys are
    /// stored in lexicographic order and must be unique.
    pub fn from_weights(entries: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, w) in entries {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Numeric(format!("weight {w} for {k:?}")));
            }
            if map.insert(k.clone(), w).is_some() {
                return Err(Error::Contract(format!("duplicate support entry {k:?}")));
            }
        }
        let total: f64 = map.values().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateDistribution("all weights are zero".into()));
        }
        let (support, probs) = map.into_iter().map(|(k, w)| (k, w / total)).unzip();
        Ok(Self { support, probs })
    }

    /// Normalizes log-weights with a shared log-sum-exp.
    pub fn from_log_weights(support: Vec<Vec<usize>>, log_w: &[f64]) -> Result<Self> {
        if support.len() != log_w.len() {
            return Err(Error::Shape(format!("{} keys, {} log-weights", support.len(), log_w.len())));
        }
        if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("log-weight is NaN or +inf".into()));
        }
        let z = log_sum_exp(log_w);
        if z == f64::NEG_INFINITY {
            return Err(Error::DegenerateDistribution("all log-weights are -inf".into()));
        }
        Self::from_weights(support.into_iter().zip(log_w.iter().map(|v| (v - z).exp())).collect())
    }

    /// Frequencies of the observed keys.
    pub fn from_samples<I: IntoIterator<Item = Vec<usize>>>(samples: I) -> Result<Self> {
        let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
        for s in samples {
            *counts.entry(s).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Contract("no samples".into()));
        }
        Self::from_weights(counts.into_iter().map(|(k, c)| (k, c as f64)).collect())
    }

    pub fn support(&self) -> &[Vec<usize>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, key: &[usize]) -> f64 {
        match self.support.binary_search_by(|k| k.as_slice().cmp(key)) {
            Ok(i) => self.probs[i],
            Err(_) => 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    fn check_normalized(&self) -> Result<()> {
        let t = self.total();
        if (t - 1.0).abs() > NORMALIZATION_TOL || self.probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!("distribution sums to {t}")));
        }
        Ok(())
    }
}

/// Exact `R / Z` over every `size`-edge subset of `num_edges` edges, with
/// `log_reward` evaluated on the lexicographic enumeration.
pub fn target_distribution<F>(num_edges: usize, size: usize, cap: u128, log_reward: F) -> Result<TerminalDistribution>
where
    F: FnOnce(&[Vec<usize>]) -> Result<Vec<f64>>,
{
    let support = enumerate_terminal_sets(num_edges, size, cap)?;
    let lr = log_reward(&support)?;
    TerminalDistribution::from_log_weights(support, &lr)
}

/// Exact `R / Z` over every ordered `size`-edge sequence, for rewards that
/// depend on insertion order.
pub fn target_sequence_distribution<F>(num_edges: usize, size: usize, cap: u128, log_reward: F) -> Result<TerminalDistribution>
where
    F: FnOnce(&[Vec<usize>]) -> Result<Vec<f64>>,
{
    let support = enumerate_terminal_sequences(num_edges, size, cap)?;
    let lr = log_reward(&support)?;
    TerminalDistribution::from_log_weights(support, &lr)
}

/// `½ Σ |p - q|` over the union of supports.
pub fn tv_distance(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64> {
    p.check_normalized()?;
    q.check_normalized()?;
    let mut diff: BTreeMap<&[usize], f64> = BTreeMap::new();
    for (k, v) in p.support.iter().zip(&p.probs) {
        *diff.entry(k).or_default() += v;
    }
    for (k, v) in q.support.iter().zip(&q.probs) {
        *diff.entry(k).or_default() -= v;
    }
    Ok((0.5 * diff.values().map(|d| d.abs()).sum::<f64>()).min(1.0))
}

/// Policy quantities at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateScores {
    pub log_flow: f64,
    /// Length `E`; entry `e - 1` is `log P_F(s + e | s)`.
    pub log_forward: Vec<f64>,
    /// Length `E`; entry `e - 1` is `log P_B(s - e | s)`. `None` at the empty state.
    pub log_backward: Option<Vec<f64>>,
}

/// Anything that assigns flows and transition log-probabilities to
/// set-valued states.
pub trait TransitionModel {
    fn num_edges(&self) -> usize;
    fn budget(&self) -> usize;
    /// Scores for a batch of same-size, non-terminal states.
    fn scores(&self, states: &[Vec<usize>]) -> Result<Vec<StateScores>>;
    /// `log R` for a batch of terminal states.
    fn log_reward(&self, terminals: &[Vec<usize>]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbResiduals {
    pub max_abs: f64,
    pub mean_square: f64,
    pub transitions: usize,
}

/// Evaluates the detailed-balance log-ratio on every legal transition.
/// Transitions into terminal states compare against `log R` instead of the
/// child's flow and backward probability.
pub fn db_residuals<T: TransitionModel + ?Sized>(model: &T, cap: u128) -> Result<DbResiduals> {
    let (e, s) = (model.num_edges(), model.budget());
    let count: u128 = (0..=s).map(|k| binomial(e, k)).sum();
    if count > cap {
        return Err(Error::EnumerationTooLarge { count, cap });
    }
    let mut layer = enumerate_terminal_sets(e, 0, cap)?;
    let mut scores = model.scores(&layer)?;
    let (mut max_abs, mut sum_sq, mut n) = (0.0f64, 0.0, 0usize);
    for k in 0..s {
        let next = enumerate_terminal_sets(e, k + 1, cap)?;
        let index: BTreeMap<&[usize], usize> = next.iter().enumerate().map(|(i, x)| (x.as_slice(), i)).collect();
        let terminal = k + 1 == s;
        let (next_scores, rewards) = if terminal {
            (Vec::new(), model.log_reward(&next)?)
        } else {
            (model.scores(&next)?, Vec::new())
        };
        for (state, sc) in layer.iter().zip(&scores) {
            for edge in 1..=e {
                if state.contains(&edge) {
                    continue;
                }
                let mut child = state.clone();
                child.push(edge);
                child.sort_unstable();
                let ci = index[child.as_slice()];
                let lhs = sc.log_flow + sc.log_forward[edge - 1];
                let rhs = if terminal {
                    rewards[ci]
                } else {
                    let cs = &next_scores[ci];
                    let back = cs
                        .log_backward
                        .as_ref()
                        .ok_or_else(|| Error::Contract("non-empty state without backward scores".into()))?;
                    cs.log_flow + back[edge - 1]
                };
                let r = lhs - rhs;
                if !r.is_finite() {
                    return Err(Error::NonFinite(format!("residual at {state:?} + {edge}")));
                }
                max_abs = max_abs.max(r.abs());
                sum_sq += r * r;
                n += 1;
            }
        }
        layer = next;
        scores = next_scores;
    }
    Ok(DbResiduals { max_abs, mean_square: if n == 0 { 0.0 } else { sum_sq / n as f64 }, transitions: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// Cosine similarity of raw vectors.
    #[default]
    NormalizedLinear,
    /// `exp(-||x - y||² / (2 h²))`; `None` uses the median pairwise distance.
    Rbf(Option<f64>),
}

fn gram(samples: &Tensor, kernel: Kernel) -> Result<DMatrix<f64>> {
    let (n, _) = samples.dims()?;
    let rows: Vec<&[f64]> = (0..n).map(|r| samples.row_slice(r)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    match kernel {
        Kernel::NormalizedLinear => {
            let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
            if norms.iter().any(|&v| v == 0.0) {
                return Err(Error::Numeric("zero vector under the normalized linear kernel".into()));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    dot(rows[i], rows[j]) / (norms[i] * norms[j])
                }
            }))
        }
        Kernel::Rbf(bw) => {
            let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            let h = match bw {
                Some(h) if h > 0.0 => h,
                Some(h) => return Err(Error::InvalidConfig(format!("rbf bandwidth {h}"))),
                None => {
                    let mut dists: Vec<f64> =
                        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2(rows[i], rows[j]).sqrt()).collect();
                    dists.sort_by(f64::total_cmp);
                    match dists.len() {
                        0 => 1.0,
                        l if l % 2 == 1 => dists[l / 2],
                        l => 0.5 * (dists[l / 2 - 1] + dists[l / 2]),
                    }
                    .max(f64::MIN_POSITIVE)
                }
            };
            Ok(DMatrix::from_fn(n, n, |i, j| (-d2(rows[i], rows[j]) / (2.0 * h * h)).exp()))
        }
    }
}

/// `exp(-Σ λ log λ)` over the eigenvalues of `K / n`.
pub fn vendi_score(samples: &Tensor, kernel: Kernel) -> Result<f64> {
    let (n, _) = samples.dims()?;
    if !samples.all_finite() {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let k = gram(samples, kernel)? / n as f64;
    let eig = SymmetricEigen::new(k).eigenvalues;
    let mut entropy = 0.0;
    for &l in eig.iter() {
        if l < -EIGEN_FLOOR {
            return Err(Error::Numeric(format!("Gram eigenvalue {l} below floor")));
        }
        if l > 0.0 {
            entropy -= l * l.ln();
        }
    }
    Ok(entropy.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDelta {
    pub edge: usize,
    pub freq_a: f64,
    pub freq_b: f64,
    pub delta: f64,
}

fn inclusion_freq(trajs: &[Vec<usize>], num_edges: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_edges + 1];
    for t in trajs {
        let mut seen = vec![false; num_edges + 1];
        for &e in t {
            if e <= num_edges && !seen[e] {
                seen[e] = true;
                counts[e] += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / trajs.len() as f64).collect()
}

/// Top `k` edges by `freq(a) - freq(b)`, where `freq` is the fraction of
/// trajectories containing the edge. Ties go to the lower edge index.
pub fn edge_frequency_delta(a: &[Vec<usize>], b: &[Vec<usize>], num_edges: usize, k: usize) -> Result<Vec<EdgeDelta>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("edge frequency needs two non-empty trajectory sets".into()));
    }
    if k > num_edges {
        return Err(Error::Contract(format!("k = {k} exceeds {num_edges} edges")));
    }
    let fa = inclusion_freq(a, num_edges);
    let fb = inclusion_freq(b, num_edges);
    let mut rows: Vec<EdgeDelta> =
        (1..=num_edges).map(|e| EdgeDelta { edge: e, freq_a: fa[e], freq_b: fb[e], delta: fa[e] - fb[e] }).collect();
    rows.sort_by(|x, y| y.delta.total_cmp(&x.delta).then(x.edge.cmp(&y.edge)));
    rows.truncate(k);
    Ok(rows)
}

/// Fraction of `centers` with at least one sample within `radius`.
pub fn mode_coverage(samples: &Tensor, centers: &Tensor, radius: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("coverage radius {radius}")));
    }
    let (n, d) = samples.dims()?;
    let (k, dc) = centers.dims()?;
    if d != dc {
        return Err(Error::Shape(format!("samples width {d}, centers width {dc}")));
    }
    let hit = (0..k)
        .filter(|&c| {
            (0..n).any(|s| {
                let d2: f64 = samples.row_slice(s).iter().zip(centers.row_slice(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() <= radius
            })
        })
        .count();
    Ok(hit as f64 / k as f64)
}

/// One row of the metrics report. `value = None` marks a skipped metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub instance: String,
    pub seed: u64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<MetricRecord>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, instance: &str, seed: u64, value: f64) {
        self.records.push(MetricRecord { metric: metric.into(), instance: instance.into(), seed, value: Some(value) });
    }

    pub fn skip(&mut self, metric: &str, instance: &str, seed: u64) {
        self.records.push(MetricRecord { metric: metric.into(), instance: instance.into(), seed, value: None });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.records.iter().find(|r| r.metric == metric).and_then(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,instance,seed,value\n");
        for r in &self.records {
            let v = r.value.map_or_else(|| "skipped".to_string(), |v| format!("{v:?}"));
            let _ = writeln!(out, "{},{},{},{}", r.metric, r.instance, r.seed, v);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&json, self.to_json()?)?;
        Ok((csv, json))
    }
}
