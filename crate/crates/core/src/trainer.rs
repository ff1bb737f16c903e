//! Training state, the joint training step, checkpoint conversion, sampling
//! and evaluation suites.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerSnapshot, RngState};
use crate::config::{RewardMode, TrainConfig};
use crate::decoder::{append_and_decode, blend, blend_values, DecoderDims, DecoderNet, EdgeOrdering};
use crate::diffusion::{
    add_noise_rows, analytic_log_reward, ldm_loss, log_reward, make_schedule, sample_reverse, DenoiserDims,
    DenoiserNet, Mixture, ModeData, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::graph::{binomial, enumerate_terminal_sequences, enumerate_terminal_sets, falling_factorial, GraphConfig, TrajectorySet};
use crate::metrics::{
    db_residuals, mode_coverage, target_distribution, target_sequence_distribution, tv_distance, vendi_score, DbResiduals, Kernel, MetricsReport,
    StateScores, TerminalDistribution, TransitionModel,
};
use crate::params::{Bound, ParamId, ParamStore};
use crate::policy::{db_loss, replay, rollout, PolicyDims, PolicyNet};
use crate::tensor::{adam_step, grad_check_at, AdamConfig, GradCheckReport, OptimizerState, Tape, Tensor, Var};

pub const CONDITION: &str = "condition/base";
pub const REWARD_CENTERS: &str = "reward/centers";
pub const REWARD_WIDTHS: &str = "reward/widths";
pub const REWARD_WEIGHTS: &str = "reward/weights";
pub const DATA_CENTERS: &str = "data/centers";

/// Everything a run needs; a pure function of `(config, seed)` plus the
/// number of steps taken.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub graph: GraphConfig,
    pub store: ParamStore,
    pub policy: PolicyNet,
    pub decoder: DecoderNet,
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub optimizer: OptimizerState,
    trainable: Vec<ParamId>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_gfn: f64,
    pub l_ldm: f64,
    pub l_total: f64,
    pub log_rewards: Vec<f64>,
    pub trajectories: Vec<Vec<usize>>,
}

/// Whether a parameter receives updates under `config`.
pub fn is_trainable(config: &TrainConfig, name: &str) -> bool {
    if name.starts_with("policy/") {
        return true;
    }
    if config.reward.mode != RewardMode::DenoiserMse {
        return false;
    }
    name.starts_with("decoder/") || (DenoiserNet::is_param(name) && !config.diffusion.freeze_denoiser)
}

fn fixed_id(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
}

fn enumerable(graph: &GraphConfig, cap: u64) -> bool {
    binomial(graph.total_edges, graph.num_steps) <= cap as u128
}

/// Every terminal object the reward distinguishes: sets in set mode, ordered
/// sequences otherwise. `None` when there are more than `cap`.
fn terminal_support(graph: &GraphConfig, ordering: EdgeOrdering, cap: u64) -> Result<Option<Vec<Vec<usize>>>> {
    let (e, s) = (graph.total_edges, graph.num_steps);
    let count = match ordering {
        EdgeOrdering::Set => binomial(e, s),
        EdgeOrdering::Sequence => falling_factorial(e, s),
    };
    if count > cap as u128 {
        return Ok(None);
    }
    Ok(Some(match ordering {
        EdgeOrdering::Set => enumerate_terminal_sets(e, s, cap as u128)?,
        EdgeOrdering::Sequence => enumerate_terminal_sequences(e, s, cap as u128)?,
    }))
}

impl TrainState {
    /// Builds and initializes every network, runs the optional warm-up and
    /// fixes the reward.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let graph = config.graph_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let s_c = config.decoder.s_c;
        let policy = PolicyNet::register(
            &mut store,
            PolicyDims { num_edges: graph.total_edges, cond_dim: s_c, graph_hidden: config.policy.h_g, cond_hidden: config.policy.h_c },
            &mut rng,
        )?;
        let decoder = DecoderNet::register(
            &mut store,
            DecoderDims { num_edges: graph.total_edges, embed_dim: config.decoder.d_dim, cond_dim: s_c },
            config.decoder.pooling,
            config.decoder.ordering,
            &mut rng,
        )?;
        let denoiser = DenoiserNet::register(
            &mut store,
            DenoiserDims { data_dim: config.diffusion.data_dim, cond_dim: s_c, hidden: config.diffusion.hidden },
            &mut rng,
        )?;
        store.add(CONDITION, Tensor::randn(1, s_c, 1.0, &mut rng))?;
        let k = config.num_modes();
        let data = ModeData::on_circle(k, config.diffusion.data_dim, config.data.radius, config.data.spread)?;
        store.add(DATA_CENTERS, data.centers_tensor()?)?;
        let schedule = make_schedule(config.diffusion.t_steps, config.diffusion.a_start, config.diffusion.a_end)?;

        let anchors = choose_anchors(&config, &graph, &mut rng)?;
        if config.pretrain.steps > 0 {
            pretrain(&config, &mut store, &decoder, &denoiser, &schedule, &data, &anchors, &mut rng)?;
        }
        let cond = store.by_name(CONDITION).map(|t| t.data().to_vec()).unwrap_or_default();
        let centers = blend_values(&decoder.decode_values(&store, &anchors)?, &cond, config.decoder.gamma)?;
        let weights = if config.reward.weights.is_empty() { vec![1.0; k] } else { config.reward.weights.clone() };
        let mut mixture = Mixture {
            centers: (0..k).map(|i| centers.row_slice(i).to_vec()).collect(),
            widths: vec![config.reward.width; k],
            weights,
        };
        if let Some(ratio) = config.reward.ratio_target {
            if let Some(sets) = terminal_support(&graph, config.decoder.ordering, config.eval.enumeration_cap)? {
                let conds = blend_values(&decoder.decode_values(&store, &sets)?, &cond, config.decoder.gamma)?;
                mixture = calibrate_width(&mixture, &conds, ratio)?;
            }
        }
        store.add(REWARD_CENTERS, centers)?;
        store.add(REWARD_WIDTHS, Tensor::row(mixture.widths.clone()))?;
        store.add(REWARD_WEIGHTS, Tensor::row(mixture.weights.clone()))?;

        let trainable: Vec<ParamId> = store.ids().filter(|&id| is_trainable(&config, store.name(id))).collect();
        let optimizer = OptimizerState::new(
            AdamConfig { lr: config.train.lr, ..AdamConfig::default() },
            &trainable.iter().map(|&id| store.get(id)).collect::<Vec<_>>(),
        );
        Ok(Self { config, graph, store, policy, decoder, denoiser, schedule, optimizer, trainable, rng, step: 0 })
    }

    pub fn condition(&self) -> Vec<f64> {
        self.store.by_name(CONDITION).map(|t| t.data().to_vec()).unwrap_or_default()
    }

    pub fn mixture(&self) -> Result<Mixture> {
        let get = |n: &str| self.store.by_name(n).ok_or_else(|| Error::Format(format!("missing tensor `{n}`")));
        let c = get(REWARD_CENTERS)?;
        let k = c.rows();
        Ok(Mixture {
            centers: (0..k).map(|i| c.row_slice(i).to_vec()).collect(),
            widths: get(REWARD_WIDTHS)?.data().to_vec(),
            weights: get(REWARD_WEIGHTS)?.data().to_vec(),
        })
    }

    pub fn data(&self) -> Result<ModeData> {
        let c = self.store.by_name(DATA_CENTERS).ok_or_else(|| Error::Format(format!("missing `{DATA_CENTERS}`")))?;
        Ok(ModeData { centers: (0..c.rows()).map(|i| c.row_slice(i).to_vec()).collect(), spread: self.config.data.spread })
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    /// Blended conditions for arbitrary terminal edge sequences.
    pub fn blended_conditions(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let dec = self.decoder.decode_values(&self.store, seqs)?;
        blend_values(&dec, &self.condition(), self.config.decoder.gamma)
    }

    /// Exact analytic log-rewards of terminal edge sequences.
    pub fn analytic_log_rewards(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        analytic_log_reward(&self.blended_conditions(seqs)?, &self.mixture()?)
    }

    /// One rollout, decode, reward and optimizer update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let cfg = &self.config;
        let (alpha, beta, gamma) = (cfg.train.alpha, cfg.train.beta, cfg.decoder.gamma);
        let explore = cfg.explore_at(self.step);
        let mode = cfg.reward.mode;
        let config = cfg.clone();
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, |n| is_trainable(&config, n))?;
        let cond = bound.var(fixed_id(&self.store, CONDITION)?);
        let enc = self.policy.encode_condition(&mut tape, &bound, cond)?;
        let start = TrajectorySet::for_config(&self.graph)?;
        let mut roll = rollout(&self.policy, &mut tape, &bound, enc, start, explore, &mut self.rng)?;
        let decoded = self.decoder.decode(&mut tape, &bound, &roll.trajectories)?;
        let chat = blend(&mut tape, decoded, cond, gamma)?;

        let (log_r, l_ldm) = match mode {
            RewardMode::AnalyticMixture => (analytic_log_reward(tape.value(chat), &self.mixture()?)?, None),
            RewardMode::DenoiserMse => {
                let data = self.data()?;
                let m = self.graph.num_trajectories;
                let z0 = data.sample_mixed(m, &mut self.rng)?;
                let t = self.rng.random_range(1..=self.schedule.steps());
                let (zt, eps) = add_noise_rows(&z0, t, &self.schedule, &mut self.rng)?;
                let zt = tape.constant(zt)?;
                let eps = tape.constant(eps)?;
                let eps_hat = self.denoiser.predict_noise(&mut tape, &bound, zt, t, self.schedule.steps(), chat)?;
                let (per, mean) = ldm_loss(&mut tape, eps, eps_hat)?;
                (log_reward(tape.value(per).data())?, Some(mean))
            }
        };
        if let Some(i) = log_r.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log_reward[{i}]")));
        }
        let lr_var = tape.constant(Tensor::column(log_r.clone()))?;
        roll.ll_diff.apply_log_reward(&mut tape, lr_var)?;
        let l_gfn = db_loss(&mut tape, &roll.ll_diff)?;
        let weighted_gfn = tape.scale(l_gfn, alpha);
        let total = match l_ldm {
            Some(l) => {
                let weighted = tape.scale(l, beta);
                tape.add(weighted_gfn, weighted)?
            }
            None => weighted_gfn,
        };
        let l_gfn_v = tape.value(l_gfn).item()?;
        let l_ldm_v = match l_ldm {
            Some(l) => tape.value(l).item()?,
            None => 0.0,
        };
        let l_total_v = tape.value(total).item()?;
        for (name, v) in [("l_gfn", l_gfn_v), ("l_ldm", l_ldm_v), ("l_total", l_total_v)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }

        let grads = if tape.is_tracked(total) {
            tape.backward(total)?;
            self.trainable.iter().map(|&id| tape.grad(bound.var(id))).collect::<Result<Vec<_>>>()?
        } else {
            self.trainable.iter().map(|&id| Tensor::new(self.store.get(id).shape().to_vec(), vec![0.0; self.store.get(id).len()])).collect::<Result<Vec<_>>>()?
        };
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", self.store.name(self.trainable[i]))));
        }
        let mut params = self.store.select_mut(&self.trainable)?;
        adam_step(&mut params, &grads, &mut self.optimizer)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            l_gfn: l_gfn_v,
            l_ldm: l_ldm_v,
            l_total: l_total_v,
            log_rewards: log_r,
            trajectories: roll.trajectories.trajectories().to_vec(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_toml: self.config.to_toml()?,
            step: self.step,
            rng: RngState::capture(&self.rng),
            tensors: self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: Some(OptimizerSnapshot {
                config: self.optimizer.config,
                step: self.optimizer.step,
                moments: self
                    .trainable
                    .iter()
                    .zip(self.optimizer.first.iter().zip(&self.optimizer.second))
                    .map(|(&id, (m, v))| (self.store.name(id).to_string(), m.clone(), v.clone()))
                    .collect(),
            }),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ckpt.config_toml)?;
        let graph = config.graph_config()?;
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            store.add(name.clone(), t.clone())?;
        }
        let policy = PolicyNet::lookup(&store)?;
        let decoder = DecoderNet::lookup(&store, config.decoder.pooling, config.decoder.ordering)?;
        let denoiser = DenoiserNet::lookup(&store)?;
        if policy.dims.num_edges != graph.total_edges {
            return Err(Error::Format("policy width disagrees with the embedded config".into()));
        }
        for name in [CONDITION, REWARD_CENTERS, REWARD_WIDTHS, REWARD_WEIGHTS, DATA_CENTERS] {
            fixed_id(&store, name)?;
        }
        let schedule = make_schedule(config.diffusion.t_steps, config.diffusion.a_start, config.diffusion.a_end)?;
        let trainable: Vec<ParamId> = store.ids().filter(|&id| is_trainable(&config, store.name(id))).collect();
        let optimizer = match &ckpt.optimizer {
            Some(snap) => {
                if snap.moments.len() != trainable.len() {
                    return Err(Error::Format("optimizer moments do not match trainable parameters".into()));
                }
                let mut first = Vec::new();
                let mut second = Vec::new();
                for ((name, m, v), &id) in snap.moments.iter().zip(&trainable) {
                    if name != store.name(id) || m.shape() != store.get(id).shape() || v.shape() != m.shape() {
                        return Err(Error::Format(format!("optimizer entry `{name}` does not match parameters")));
                    }
                    first.push(m.clone());
                    second.push(v.clone());
                }
                OptimizerState { config: snap.config, step: snap.step, first, second }
            }
            None => OptimizerState::new(
                AdamConfig { lr: config.train.lr, ..AdamConfig::default() },
                &trainable.iter().map(|&id| store.get(id)).collect::<Vec<_>>(),
            ),
        };
        Ok(Self {
            config,
            graph,
            store,
            policy,
            decoder,
            denoiser,
            schedule,
            optimizer,
            trainable,
            rng: ckpt.rng.restore(),
            step: ckpt.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Pure-policy rollout of `m` trajectories (no exploration, no tracking).
    pub fn sample_trajectories<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<TrajectorySet> {
        let graph = self.graph.with_trajectories(m)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, |_| false)?;
        let cond = bound.var(fixed_id(&self.store, CONDITION)?);
        let enc = self.policy.encode_condition(&mut tape, &bound, cond)?;
        Ok(rollout(&self.policy, &mut tape, &bound, enc, TrajectorySet::for_config(&graph)?, 0.0, rng)?.trajectories)
    }

    /// Canonical identity of a terminal trajectory.
    pub fn terminal_key(&self, traj: &[usize]) -> Vec<usize> {
        let mut k = traj.to_vec();
        if self.config.decoder.ordering == EdgeOrdering::Set {
            k.sort_unstable();
        }
        k
    }

    /// Frequencies over exactly `num_samples` terminal objects drawn from
    /// `ceil(num_samples / M)` pure-policy rollouts.
    pub fn empirical_distribution<R: Rng + ?Sized>(&self, num_samples: usize, rng: &mut R) -> Result<TerminalDistribution> {
        if num_samples == 0 {
            return Err(Error::Contract("num_samples must be positive".into()));
        }
        let m = self.graph.num_trajectories;
        let mut keys = Vec::with_capacity(num_samples);
        while keys.len() < num_samples {
            let set = self.sample_trajectories(m, rng)?;
            keys.extend(set.trajectories().iter().map(|t| self.terminal_key(t)));
        }
        keys.truncate(num_samples);
        TerminalDistribution::from_samples(keys)
    }

    /// Exact `R / Z` over all terminal sets under the analytic reward.
    /// Exact `R / Z` over terminal sets, or over ordered sequences when the
    /// decoder reads edges in insertion order.
    pub fn target_distribution(&self) -> Result<TerminalDistribution> {
        self.require_analytic()?;
        let (e, s, cap) = (self.graph.total_edges, self.graph.num_steps, self.config.eval.enumeration_cap as u128);
        let reward = |seqs: &[Vec<usize>]| self.analytic_log_rewards(seqs);
        match self.config.decoder.ordering {
            EdgeOrdering::Set => target_distribution(e, s, cap, reward),
            EdgeOrdering::Sequence => target_sequence_distribution(e, s, cap, reward),
        }
    }

    fn require_analytic(&self) -> Result<()> {
        if self.config.reward.mode != RewardMode::AnalyticMixture {
            return Err(Error::Contract("exact audits require the analytic reward".into()));
        }
        Ok(())
    }

    fn require_set_analytic(&self) -> Result<()> {
        if self.config.decoder.ordering != EdgeOrdering::Set {
            return Err(Error::Contract("detailed-balance audits require set-mode decoding".into()));
        }
        self.require_analytic()
    }

    pub fn db_residuals(&self) -> Result<DbResiduals> {
        self.require_set_analytic()?;
        db_residuals(&PolicyTransitions { state: self }, self.config.eval.enumeration_cap as u128)
    }

    /// Trajectories, blended conditions and reverse-diffusion samples.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, extra_edges: &[usize], rng: &mut R) -> Result<SampleOutput> {
        let set = self.sample_trajectories(m, rng)?;
        let chat = append_and_decode(&self.decoder, &self.store, &set, extra_edges, &self.condition(), self.config.decoder.gamma)?;
        let generated = self.generate(&chat, rng)?;
        Ok(SampleOutput { trajectories: set.trajectories().to_vec(), conditions: chat, generated })
    }

    /// One reverse-diffusion sample per condition row.
    pub fn generate<R: Rng + ?Sized>(&self, conds: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (n, _) = conds.dims()?;
        let d = self.denoiser.dims.data_dim;
        let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        sample_reverse(&Tensor::matrix(n, d, z)?, conds, &self.denoiser, &self.store, &self.schedule, rng)
    }

    /// Diversity of generated data: each draw rolls out `M` trajectories and
    /// generates `per_draw` samples cycling over their conditions. Returns
    /// the mean Vendi score (normalized linear kernel) and mean coverage of
    /// the data modes.
    pub fn diversity<R: Rng + ?Sized>(&self, draws: usize, per_draw: usize, rng: &mut R) -> Result<DiversityReport> {
        if draws == 0 || per_draw == 0 {
            return Err(Error::Contract("diversity needs at least one draw and sample".into()));
        }
        let centers = self.data()?.centers_tensor()?;
        let (mut vs, mut cov) = (0.0, 0.0);
        for _ in 0..draws {
            let set = self.sample_trajectories(self.graph.num_trajectories, rng)?;
            let chat = self.blended_conditions(set.trajectories())?;
            let rows: Vec<usize> = (0..per_draw).map(|i| i % chat.rows()).collect();
            let data: Vec<f64> = rows.iter().flat_map(|&r| chat.row_slice(r).to_vec()).collect();
            let conds = Tensor::matrix(per_draw, chat.cols(), data)?;
            let x = self.generate(&conds, rng)?;
            vs += vendi_score(&x, Kernel::NormalizedLinear)?;
            cov += mode_coverage(&x, &centers, self.config.eval.coverage_radius)?;
        }
        Ok(DiversityReport { vendi: vs / draws as f64, coverage: cov / draws as f64 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub vendi: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub trajectories: Vec<Vec<usize>>,
    pub conditions: Tensor,
    pub generated: Tensor,
}

impl SampleOutput {
    /// One row per trajectory: space-separated edges, then `ĉ`, then the sample.
    pub fn to_csv(&self) -> String {
        let (sc, d) = (self.conditions.cols(), self.generated.cols());
        let mut out = String::from("trajectory,edges");
        for i in 0..sc {
            let _ = write!(out, ",c_{i}");
        }
        for i in 0..d {
            let _ = write!(out, ",x_{i}");
        }
        out.push('\n');
        for (r, t) in self.trajectories.iter().enumerate() {
            let edges: Vec<String> = t.iter().map(|e| e.to_string()).collect();
            let _ = write!(out, "{r},{}", edges.join(" "));
            for v in self.conditions.row_slice(r).iter().chain(self.generated.row_slice(r)) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

struct PolicyTransitions<'a> {
    state: &'a TrainState,
}

impl TransitionModel for PolicyTransitions<'_> {
    fn num_edges(&self) -> usize {
        self.state.graph.total_edges
    }

    fn budget(&self) -> usize {
        self.state.graph.num_steps
    }

    fn scores(&self, states: &[Vec<usize>]) -> Result<Vec<StateScores>> {
        let set = TrajectorySet::from_sequences(states, self.num_edges(), self.budget())?;
        let ev = self.state.policy.evaluate(&self.state.store, &self.state.condition(), &set)?;
        Ok((0..states.len())
            .map(|r| StateScores {
                log_flow: ev.log_flow.get(r, 0),
                log_forward: ev.log_forward.row_slice(r).to_vec(),
                log_backward: ev.log_backward.as_ref().map(|b| b.row_slice(r).to_vec()),
            })
            .collect())
    }

    fn log_reward(&self, terminals: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.state.analytic_log_rewards(terminals)
    }
}

/// Gradient check of `α L_GFN + β L_LDM` with respect to every policy,
/// decoder and denoiser tensor, on one fixed rollout and noise draw. The
/// log-reward is held at its value under the unperturbed parameters, as in
/// training. With `per_tensor = Some(k)`, tensors larger than `k` are probed
/// at `k` random coordinates instead of all of them.
pub fn composite_grad_check<R: Rng + ?Sized>(
    state: &TrainState,
    eps: f64,
    per_tensor: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let m = state.graph.num_trajectories;
    let done = state.sample_trajectories(m, rng)?;
    let z0 = state.data()?.sample_mixed(m, rng)?;
    let steps = state.schedule.steps();
    let t = rng.random_range(1..=steps);
    let (zt, noise) = add_noise_rows(&z0, t, &state.schedule, rng)?;
    let store = &state.store;
    let nets: Vec<ParamId> = store
        .ids()
        .filter(|&id| {
            let n = store.name(id);
            n.starts_with("policy/") || n.starts_with("decoder/") || DenoiserNet::is_param(n)
        })
        .collect();
    let (alpha, beta, gamma) = (state.config.train.alpha, state.config.train.beta, state.config.decoder.gamma);
    let cond_id = fixed_id(store, CONDITION)?;

    let build = |tape: &mut Tape, vars: &[Var], log_r: Option<&[f64]>| -> Result<(Var, Vec<f64>)> {
        let mut slot = 0;
        let mut all = Vec::with_capacity(store.len());
        for id in store.ids() {
            if nets.get(slot) == Some(&id) {
                all.push(vars[slot]);
                slot += 1;
            } else {
                all.push(tape.constant(store.get(id).clone())?);
            }
        }
        let bound = Bound::from_vars(all);
        let cond = bound.var(cond_id);
        let enc = state.policy.encode_condition(tape, &bound, cond)?;
        let mut acc = replay(&state.policy, tape, &bound, enc, &done)?;
        let dec = state.decoder.decode(tape, &bound, &done)?;
        let chat = blend(tape, dec, cond, gamma)?;
        let zv = tape.constant(zt.clone())?;
        let ev = tape.constant(noise.clone())?;
        let eps_hat = state.denoiser.predict_noise(tape, &bound, zv, t, steps, chat)?;
        let (per, l_ldm) = ldm_loss(tape, ev, eps_hat)?;
        let fresh = log_reward(tape.value(per).data())?;
        let lr = tape.constant(Tensor::column(log_r.map_or_else(|| fresh.clone(), <[f64]>::to_vec)))?;
        acc.apply_log_reward(tape, lr)?;
        let l_gfn = db_loss(tape, &acc)?;
        let a = tape.scale(l_gfn, alpha);
        let b = tape.scale(l_ldm, beta);
        Ok((tape.add(a, b)?, fresh))
    };
    let params: Vec<Tensor> = nets.iter().map(|&id| store.get(id).clone()).collect();
    let mut probe = Tape::new();
    let vars = params.iter().map(|p| probe.leaf(p.clone(), true)).collect::<Result<Vec<_>>>()?;
    let (_, base_reward) = build(&mut probe, &vars, None)?;
    let coords: Vec<Vec<usize>> = params
        .iter()
        .map(|p| match per_tensor {
            Some(k) if k < p.len() => {
                let mut c = rand::seq::index::sample(rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        })
        .collect();
    grad_check_at(|tape, vars| Ok(build(tape, vars, Some(&base_reward))?.0), &params, eps, &coords)
}

/// Anchor edge sets: configured, evenly spaced through the enumeration, or
/// random when the enumeration is too large.
fn choose_anchors(config: &TrainConfig, graph: &GraphConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let (e, s) = (graph.total_edges, graph.num_steps);
    if !config.reward.anchors.is_empty() {
        for a in &config.reward.anchors {
            TrajectorySet::from_sequences(std::slice::from_ref(a), e, s)?;
            if a.len() != s {
                return Err(Error::InvalidConfig(format!("anchor {a:?} must hold {s} edges")));
            }
        }
        return Ok(config.reward.anchors.clone());
    }
    let k = config.reward.num_modes;
    if enumerable(graph, config.eval.enumeration_cap) {
        let all = enumerate_terminal_sets(e, s, config.eval.enumeration_cap as u128)?;
        if k > all.len() {
            return Err(Error::InvalidConfig(format!("{k} modes but only {} terminal sets", all.len())));
        }
        return Ok((0..k).map(|i| all[i * all.len() / k + all.len() / (2 * k)].clone()).collect());
    }
    Ok((0..k)
        .map(|_| {
            let mut pool: Vec<usize> = (1..=e).collect();
            let mut pick: Vec<usize> = (0..s).map(|_| pool.swap_remove(rng.random_range(0..pool.len()))).collect();
            pick.sort_unstable();
            pick
        })
        .collect())
}

/// Sets the shared width so that the best-to-worst reward ratio over `conds`
/// equals `ratio`. Bisection on `log σ`.
pub fn calibrate_width(mixture: &Mixture, conds: &Tensor, ratio: f64) -> Result<Mixture> {
    let target = ratio.ln();
    let log_ratio = |w: f64| -> Result<f64> {
        let lr = analytic_log_reward(conds, &mixture.with_width(w))?;
        let hi = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = lr.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(hi - lo)
    };
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let (r_lo, r_hi) = (log_ratio(lo.exp())?, log_ratio(hi.exp())?);
    if !(r_lo > target && r_hi < target) {
        return Err(Error::InvalidConfig(format!(
            "reward ratio {ratio} unreachable: spans [{}, {}] over widths",
            r_hi.exp(),
            r_lo.exp()
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_ratio(mid.exp())? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mixture.with_width((0.5 * (lo + hi)).exp()))
}

/// Supervised warm-up: decoder and denoiser learn to denoise blob `k` under
/// the blended condition of anchor `k`.
#[allow(clippy::too_many_arguments)]
fn pretrain(
    config: &TrainConfig,
    store: &mut ParamStore,
    decoder: &DecoderNet,
    denoiser: &DenoiserNet,
    schedule: &NoiseSchedule,
    data: &ModeData,
    anchors: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let warm = |n: &str| n.starts_with("decoder/") || DenoiserNet::is_param(n);
    let ids: Vec<ParamId> = store.ids().filter(|&id| warm(store.name(id))).collect();
    let mut opt = OptimizerState::new(
        AdamConfig { lr: config.pretrain.lr, ..AdamConfig::default() },
        &ids.iter().map(|&id| store.get(id)).collect::<Vec<_>>(),
    );
    let b = config.pretrain.batch;
    let cond_id = fixed_id(store, CONDITION)?;
    for _ in 0..config.pretrain.steps {
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..anchors.len())).collect();
        let seqs: Vec<Vec<usize>> = labels.iter().map(|&k| anchors[k].clone()).collect();
        let z0: Vec<f64> = labels.iter().flat_map(|&k| data.sample(k, rng)).collect();
        let z0 = Tensor::matrix(b, data.dim(), z0)?;
        let t = rng.random_range(1..=schedule.steps());
        let (zt, eps) = add_noise_rows(&z0, t, schedule, rng)?;

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, warm)?;
        let dec = decoder.decode_sequences(&mut tape, &bound, &seqs)?;
        let chat = blend(&mut tape, dec, bound.var(cond_id), config.decoder.gamma)?;
        let zt = tape.constant(zt)?;
        let eps = tape.constant(eps)?;
        let eps_hat = denoiser.predict_noise(&mut tape, &bound, zt, t, schedule.steps(), chat)?;
        let (_, loss) = ldm_loss(&mut tape, eps, eps_hat)?;
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.grad(bound.var(id))).collect::<Result<Vec<_>>>()?;
        let mut params = store.select_mut(&ids)?;
        adam_step(&mut params, &grads, &mut opt)?;
    }
    Ok(())
}

/// Where and how often [`train`] writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub moving_average: Option<f64>,
    /// `max |L_total - (α L_GFN + β L_LDM)|` over all steps.
    pub decomposition_error: f64,
    pub log: String,
}

/// Runs until `config.train.max_steps`, logging and checkpointing on the
/// configured cadence. Resumed states continue from their stored step.
pub fn train(state: &mut TrainState, outputs: &TrainOutputs) -> Result<TrainSummary> {
    let cfg = state.config.train.clone();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.avg_window);
    let mut log = String::from("step,l_gfn,l_ldm,l_total,avg_total,mean_log_reward\n");
    let mut decomposition_error = 0.0f64;
    let mut last = None;
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir)?;
    }
    while state.step < cfg.max_steps {
        let r = state.train_step()?;
        decomposition_error = decomposition_error.max((r.l_total - (cfg.alpha * r.l_gfn + cfg.beta * r.l_ldm)).abs());
        if window.len() == cfg.avg_window {
            window.pop_front();
        }
        window.push_back(r.l_total);
        let avg = window.iter().sum::<f64>() / window.len() as f64;
        if cfg.log_every > 0 && (r.step % cfg.log_every == 0 || r.step == cfg.max_steps) {
            let mlr = r.log_rewards.iter().sum::<f64>() / r.log_rewards.len() as f64;
            let _ = writeln!(log, "{},{:?},{:?},{:?},{:?},{:?}", r.step, r.l_gfn, r.l_ldm, r.l_total, avg, mlr);
        }
        if let Some(dir) = &outputs.dir {
            if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
                state.save(&dir.join(format!("checkpoint_{:08}.bin", r.step)))?;
            }
        }
        last = Some((r.l_total, avg));
    }
    if let Some(dir) = &outputs.dir {
        state.save(&dir.join("checkpoint.bin"))?;
        std::fs::write(dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainSummary {
        steps: state.step,
        final_loss: last.map(|l| l.0),
        moving_average: last.map(|l| l.1),
        decomposition_error,
        log,
    })
}

/// Named evaluation suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Proportionality,
    Residuals,
    Diversity,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Proportionality, Suite::Residuals, Suite::Diversity];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Proportionality => "proportionality",
            Suite::Residuals => "residuals",
            Suite::Diversity => "diversity",
        }
    }
}

/// Evaluates `suites`, returning the report and whether every threshold held.
/// Suites that cannot run on this configuration are marked as skipped.
pub fn evaluate(state: &TrainState, suites: &[Suite], seed: u64) -> Result<(MetricsReport, bool)> {
    let mut report = MetricsReport::default();
    let mut pass = true;
    let g = &state.graph;
    let instance = format!("n{}-s{}-m{}", g.num_nodes, g.num_steps, g.num_trajectories);
    let cap = state.config.eval.enumeration_cap;
    let analytic = state.config.reward.mode == RewardMode::AnalyticMixture;
    let set_mode = state.config.decoder.ordering == EdgeOrdering::Set;
    let exact = analytic && terminal_support(g, state.config.decoder.ordering, cap)?.is_some();
    let exact_flows = analytic && set_mode && enumerable(g, cap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &suite in suites {
        match suite {
            Suite::Proportionality if exact => {
                let target = state.target_distribution()?;
                let emp = state.empirical_distribution(state.config.eval.samples, &mut rng)?;
                let tv = tv_distance(&emp, &target)?;
                report.push("tv_distance", &instance, seed, tv);
                pass &= tv < state.config.eval.tv_threshold;
            }
            Suite::Residuals if exact_flows => {
                let r = state.db_residuals()?;
                report.push("db_residual_max", &instance, seed, r.max_abs);
                report.push("db_residual_mean_square", &instance, seed, r.mean_square);
                pass &= r.mean_square < state.config.eval.residual_threshold;
            }
            Suite::Proportionality => report.skip("tv_distance", &instance, seed),
            Suite::Residuals => report.skip("db_residual_mean_square", &instance, seed),
            Suite::Diversity => {
                let d = state.diversity(10, 8, &mut rng)?;
                report.push("vendi_score", &instance, seed, d.vendi);
                report.push("mode_coverage", &instance, seed, d.coverage);
            }
        }
    }
    Ok((report, pass))
}
