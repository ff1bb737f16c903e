//! Toy conditional diffusion: a linear retention schedule, forward noising,
//! an MLP noise predictor conditioned on the blended condition, reverse
//! sampling, and the two reward oracles.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Width of the sinusoidal timestep features fed to the denoiser.
pub const TIME_FEATURES: usize = 8;

/// Retention coefficients `a_t` and their running products `ā_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    retention: Vec<f64>,
    /// `cumulative[t]` is `ā_t`; `cumulative[0] = 1`.
    cumulative: Vec<f64>,
}

/// Linear interpolation of retention from `a_first` (t = 1) to `a_last` (t = T).
pub fn make_schedule(steps: usize, a_first: f64, a_last: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("diffusion needs at least one step".into()));
    }
    if !(a_last > 0.0 && a_last <= a_first && a_first <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "retention endpoints must satisfy 0 < a_T <= a_1 <= 1, got a_1={a_first}, a_T={a_last}"
        )));
    }
    let retention: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                a_first
            } else {
                a_first + (a_last - a_first) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut cumulative = Vec::with_capacity(steps + 1);
    cumulative.push(1.0);
    for a in &retention {
        cumulative.push(cumulative.last().copied().unwrap_or(1.0) * a);
    }
    Ok(NoiseSchedule { retention, cumulative })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.retention.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `a_t` for `1 <= t <= T`.
    pub fn retention(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.retention[t - 1])
    }

    /// `ā_t` for `0 <= t <= T`.
    pub fn cumulative(&self, t: usize) -> Result<f64> {
        if t > self.steps() {
            return Err(Error::Index(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(self.cumulative[t])
    }
}

/// `sqrt(ā) z0 + sqrt(1 - ā) ε` for a given `ā`, returning `(z_t, ε)`.
pub fn noise_with<R: Rng + ?Sized>(z0: &[f64], abar: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = z0.iter().map(|_| StandardNormal.sample(rng)).collect();
    let (s, n) = (abar.sqrt(), (1.0 - abar).sqrt());
    let zt = z0.iter().zip(&eps).map(|(z, e)| s * z + n * e).collect();
    (zt, eps)
}

/// Closed-form forward noising to step `t`.
pub fn add_noise<R: Rng + ?Sized>(
    z0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check(t)?;
    Ok(noise_with(z0, sched.cumulative[t], rng))
}

/// Row-wise [`add_noise`] on an `M x D` batch sharing the step `t`.
pub fn add_noise_rows<R: Rng + ?Sized>(
    z0: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (m, d) = z0.dims()?;
    let mut zt = Vec::with_capacity(m * d);
    let mut eps = Vec::with_capacity(m * d);
    for r in 0..m {
        let (z, e) = add_noise(z0.row_slice(r), t, sched, rng)?;
        zt.extend(z);
        eps.extend(e);
    }
    Ok((Tensor::matrix(m, d, zt)?, Tensor::matrix(m, d, eps)?))
}

/// Sinusoidal features of `t / T` at octave-spaced frequencies.
pub fn time_features(t: usize, steps: usize) -> Vec<f64> {
    let x = t as f64 / steps.max(1) as f64;
    (0..TIME_FEATURES / 2)
        .flat_map(|i| {
            let a = PI * 2f64.powi(i as i32) * x;
            [a.sin(), a.cos()]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserDims {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
}

/// MLP noise predictor over `[z_t, time features, ĉ]`.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub dims: DenoiserDims,
    mlp: Mlp,
}

impl DenoiserNet {
    pub const PREFIX: &'static str = "denoiser";
    const DEPTH: usize = 3;

    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, dims: DenoiserDims, rng: &mut R) -> Result<Self> {
        let input = dims.data_dim + TIME_FEATURES + dims.cond_dim;
        let widths = [input, dims.hidden, dims.hidden, dims.data_dim];
        let mlp = Mlp::register(store, &format!("{}/mlp", Self::PREFIX), &widths, rng)?;
        Ok(Self { dims, mlp })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        let mlp = Mlp::lookup(store, &format!("{}/mlp", Self::PREFIX), Self::DEPTH)?;
        let first = mlp.layers[0];
        let data_dim = mlp.output_width();
        let cond_dim = first
            .fan_in
            .checked_sub(data_dim + TIME_FEATURES)
            .ok_or_else(|| Error::Format("denoiser input narrower than its output".into()))?;
        Ok(Self { dims: DenoiserDims { data_dim, cond_dim, hidden: first.fan_out }, mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("denoiser/")
    }

    /// `ε̂` for an `M x D` batch at a shared step `t` with `M x S_c` conditions.
    pub fn predict_noise(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        zt: Var,
        t: usize,
        steps: usize,
        cond: Var,
    ) -> Result<Var> {
        let (m, d) = tape.value(zt).dims()?;
        let (mc, c) = tape.value(cond).dims()?;
        if d != self.dims.data_dim || c != self.dims.cond_dim || mc != m {
            return Err(Error::Shape(format!(
                "denoiser expects M x {} data and M x {} conditions, got {m} x {d} and {mc} x {c}",
                self.dims.data_dim, self.dims.cond_dim
            )));
        }
        let tf = tape.constant(Tensor::row(time_features(t, steps)))?;
        let tf = tape.repeat_rows(tf, m)?;
        let input = tape.concat_cols(&[zt, tf, cond])?;
        self.mlp.forward(tape, bound, input)
    }
}

/// Per-trajectory denoising MSE (`M x 1`) and its mean (`1 x 1`).
pub fn ldm_loss(tape: &mut Tape, eps: Var, eps_hat: Var) -> Result<(Var, Var)> {
    let per = tape.row_mse(eps, eps_hat)?;
    let mean = tape.mean(per);
    Ok((per, mean))
}

/// `log R = -mse`, elementwise.
pub fn log_reward(mse: &[f64]) -> Result<Vec<f64>> {
    mse.iter()
        .map(|&v| {
            if !v.is_finite() {
                Err(Error::NonFinite("denoising mse".into()))
            } else if v < 0.0 {
                Err(Error::Contract(format!("negative mse {v}")))
            } else {
                Ok(-v)
            }
        })
        .collect()
}

/// Isotropic Gaussian mixture over condition space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        let k = self.centers.len();
        if k == 0 || self.widths.len() != k || self.weights.len() != k {
            return Err(Error::InvalidConfig(format!(
                "mixture needs matching centers/widths/weights, got {k}/{}/{}",
                self.widths.len(),
                self.weights.len()
            )));
        }
        let dim = self.centers[0].len();
        if self.centers.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidConfig("mixture centers differ in width".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("mixture weights must be positive".into()));
        }
        if self.widths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("mixture widths must be positive".into()));
        }
        Ok(())
    }

    pub fn with_width(&self, width: f64) -> Self {
        Self { widths: vec![width; self.centers.len()], ..self.clone() }
    }
}

/// Source of terminal rewards.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardOracle {
    /// `log R = -mse` of the denoiser under the blended condition.
    DenoiserMse,
    AnalyticMixture(Mixture),
}

/// `log Σ_k w_k exp(-||ĉ - μ_k||² / (2 σ_k²))` per row of `cond`.
pub fn analytic_log_reward(cond: &Tensor, mixture: &Mixture) -> Result<Vec<f64>> {
    mixture.validate()?;
    let (m, c) = cond.dims()?;
    if c != mixture.centers[0].len() {
        return Err(Error::Shape(format!("condition width {c}, mixture width {}", mixture.centers[0].len())));
    }
    if !cond.all_finite() {
        return Err(Error::Numeric("non-finite condition passed to the analytic reward".into()));
    }
    Ok((0..m)
        .map(|r| {
            let row = cond.row_slice(r);
            let terms: Vec<f64> = mixture
                .centers
                .iter()
                .zip(&mixture.widths)
                .zip(&mixture.weights)
                .map(|((mu, s), w)| {
                    let d2: f64 = row.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    w.ln() - d2 / (2.0 * s * s)
                })
                .collect();
            log_sum_exp(&terms)
        })
        .collect())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

/// Runs the reverse chain from `z_T` down to `z_0`. Noise is added on every
/// step except the last.
pub fn sample_reverse<R: Rng + ?Sized>(
    z_last: &Tensor,
    cond: &Tensor,
    net: &DenoiserNet,
    store: &ParamStore,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (m, d) = z_last.dims()?;
    let mut z = z_last.clone();
    let steps = sched.steps();
    for t in (1..=steps).rev() {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false)?;
        let zv = tape.constant(z.clone())?;
        let cv = tape.constant(cond.clone())?;
        let eps_hat = net.predict_noise(&mut tape, &bound, zv, t, steps, cv)?;
        let eps_hat = tape.value(eps_hat);
        let a = sched.retention(t)?;
        let abar = sched.cumulative(t)?;
        let coef = if abar < 1.0 { (1.0 - a) / (1.0 - abar).sqrt() } else { 0.0 };
        let inv = 1.0 / a.sqrt();
        let sigma = (1.0 - a).sqrt();
        let mut next = Vec::with_capacity(m * d);
        for (zi, ei) in z.data().iter().zip(eps_hat.data()) {
            let mean = inv * (zi - coef * ei);
            let noise = if t > 1 {
                let n: f64 = StandardNormal.sample(rng);
                sigma * n
            } else {
                0.0
            };
            next.push(mean + noise);
        }
        z = Tensor::matrix(m, d, next)?;
    }
    Ok(z)
}

/// Labelled Gaussian blobs evenly spaced on a circle in the first two
/// coordinates (remaining coordinates centred at zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeData {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

impl ModeData {
    pub fn on_circle(modes: usize, dim: usize, radius: f64, spread: f64) -> Result<Self> {
        if modes == 0 || dim < 2 {
            return Err(Error::InvalidConfig("mode data needs at least one mode and two dimensions".into()));
        }
        let centers = (0..modes)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / modes as f64;
                let mut c = vec![0.0; dim];
                c[0] = radius * th.cos();
                c[1] = radius * th.sin();
                c
            })
            .collect();
        Ok(Self { centers, spread })
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, mode: usize, rng: &mut R) -> Vec<f64> {
        self.centers[mode]
            .iter()
            .map(|c| {
                let n: f64 = StandardNormal.sample(rng);
                c + self.spread * n
            })
            .collect()
    }

    /// Points drawn from modes chosen uniformly at random.
    pub fn sample_mixed<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = rng.random_range(0..self.centers.len());
            data.extend(self.sample(k, rng));
        }
        Tensor::matrix(n, d, data)
    }

    pub fn centers_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.centers.len(), self.dim(), self.centers.concat())
    }
}
