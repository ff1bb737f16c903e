//! The graphs generator: condition and graph-state encoders, forward and
//! backward heads with a log-flow output, masked action sampling, and the
//! detailed-balance accounting of a rollout.
//!
//! A state is the set of edges added so far, fed to the graph encoder as an
//! `E`-dim multi-hot row. The forward head emits `E + 1` values: `E` edge
//! logits followed by the state's log-flow.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{append_edges, init_trajectories, TrajectorySet};
use crate::params::{Bound, Linear, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, Var, MASK_NEG};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyDims {
    pub num_edges: usize,
    pub cond_dim: usize,
    pub graph_hidden: usize,
    pub cond_hidden: usize,
}

impl PolicyDims {
    /// Width of the joint representation `h = h_g + h_c`, also used as the
    /// hidden width of both heads.
    pub fn joint(&self) -> usize {
        self.graph_hidden + self.cond_hidden
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub dims: PolicyDims,
    cond_encoder: Linear,
    graph_encoder: Linear,
    forward_head: Mlp,
    backward_head: Mlp,
}

/// Tape values produced by one policy evaluation over `M` states.
#[derive(Debug, Clone, Copy)]
pub struct PolicyOutputs {
    /// `M x E` log-distribution over addable edges.
    pub log_forward: Var,
    /// `M x E` log-distribution over removable edges; absent at the initial
    /// state, where nothing can be removed.
    pub log_backward: Option<Var>,
    /// `M x 1` log state-flow.
    pub log_flow: Var,
}

/// Detached values of [`PolicyOutputs`].
#[derive(Debug, Clone)]
pub struct StateEval {
    pub log_forward: Tensor,
    pub log_backward: Option<Tensor>,
    pub log_flow: Tensor,
}

impl PolicyNet {
    pub const PREFIX: &'static str = "policy";

    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, dims: PolicyDims, rng: &mut R) -> Result<Self> {
        let p = Self::PREFIX;
        let h = dims.joint();
        let e = dims.num_edges;
        Ok(Self {
            dims,
            cond_encoder: Linear::register(store, &format!("{p}/cond_encoder"), dims.cond_dim, dims.cond_hidden, rng)?,
            graph_encoder: Linear::register(store, &format!("{p}/graph_encoder"), e, dims.graph_hidden, rng)?,
            forward_head: Mlp::register(store, &format!("{p}/forward_head"), &[h, h, h, e + 1], rng)?,
            backward_head: Mlp::register(store, &format!("{p}/backward_head"), &[h, h, h, e], rng)?,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        let p = Self::PREFIX;
        let cond_encoder = Linear::lookup(store, &format!("{p}/cond_encoder"))?;
        let graph_encoder = Linear::lookup(store, &format!("{p}/graph_encoder"))?;
        let forward_head = Mlp::lookup(store, &format!("{p}/forward_head"), 3)?;
        let backward_head = Mlp::lookup(store, &format!("{p}/backward_head"), 3)?;
        let dims = PolicyDims {
            num_edges: graph_encoder.fan_in,
            cond_dim: cond_encoder.fan_in,
            graph_hidden: graph_encoder.fan_out,
            cond_hidden: cond_encoder.fan_out,
        };
        if forward_head.output_width() != dims.num_edges + 1 || backward_head.output_width() != dims.num_edges {
            return Err(Error::Format("policy head widths inconsistent with edge count".into()));
        }
        Ok(Self { dims, cond_encoder, graph_encoder, forward_head, backward_head })
    }

    /// `c' = tanh(c W + b)`, computed once per rollout.
    pub fn encode_condition(&self, tape: &mut Tape, bound: &Bound, cond: Var) -> Result<Var> {
        let (r, c) = tape.value(cond).dims()?;
        if r != 1 || c != self.dims.cond_dim {
            return Err(Error::Shape(format!(
                "condition must be 1 x {}, got {r} x {c}",
                self.dims.cond_dim
            )));
        }
        let z = self.cond_encoder.forward(tape, bound, cond)?;
        Ok(tape.tanh(z))
    }

    /// Evaluates all three heads at the current states of `set`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, set: &TrajectorySet, cond_enc: Var) -> Result<PolicyOutputs> {
        let m = set.len();
        let e = self.dims.num_edges;
        if set.num_edges() != e {
            return Err(Error::Shape(format!("policy built for {e} edges, set has {}", set.num_edges())));
        }
        if let Some(r) = set.lengths().iter().position(|&l| l >= set.budget()) {
            return Err(Error::Contract(format!("trajectory {r} is complete; no legal forward action")));
        }
        let hot = tape.constant(Tensor::matrix(m, e, set.multi_hot())?)?;
        let g = self.graph_encoder.forward(tape, bound, hot)?;
        let rep_g = tape.tanh(g);
        let rep_c = tape.repeat_rows(cond_enc, m)?;
        let rep = tape.concat_cols(&[rep_g, rep_c])?;

        let pred = self.forward_head.forward(tape, bound, rep)?;
        let logits = tape.slice_cols(pred, 0, e)?;
        let log_flow = tape.slice_cols(pred, e, e + 1)?;
        let added: Vec<bool> = (0..m).flat_map(|r| (1..=e).map(move |x| (r, x))).map(|(r, x)| set.is_added(r, x)).collect();
        let log_forward = tape.masked_log_softmax(logits, &added)?;

        let lengths = set.lengths();
        let log_backward = if lengths.iter().all(|&l| l > 0) {
            let back = self.backward_head.forward(tape, bound, rep)?;
            let not_added: Vec<bool> = added.iter().map(|a| !a).collect();
            Some(tape.masked_log_softmax(back, &not_added)?)
        } else if lengths.iter().all(|&l| l == 0) {
            None
        } else {
            return Err(Error::Contract("trajectories mix empty and non-empty states".into()));
        };
        Ok(PolicyOutputs { log_forward, log_backward, log_flow })
    }

    /// Detached evaluation at arbitrary states (all of the same size).
    pub fn evaluate(&self, store: &ParamStore, cond: &[f64], set: &TrajectorySet) -> Result<StateEval> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false)?;
        let c = tape.constant(Tensor::row(cond.to_vec()))?;
        let enc = self.encode_condition(&mut tape, &bound, c)?;
        let out = self.forward(&mut tape, &bound, set, enc)?;
        Ok(StateEval {
            log_forward: tape.value(out.log_forward).clone(),
            log_backward: out.log_backward.map(|v| tape.value(v).clone()),
            log_flow: tape.value(out.log_flow).clone(),
        })
    }
}

/// One multinomial draw per row of a masked log-distribution. Returns
/// 1-based edge indices.
pub fn sample_actions<R: Rng + ?Sized>(log_forward: &Tensor, rng: &mut R) -> Result<Vec<usize>> {
    sample_actions_explore(log_forward, 0.0, rng)
}

/// Draws from `(1 - eps) * policy + eps * uniform(legal edges)` per row.
pub fn sample_actions_explore<R: Rng + ?Sized>(log_forward: &Tensor, eps: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidConfig(format!("exploration rate {eps} outside [0, 1]")));
    }
    let (m, n) = log_forward.dims()?;
    let legal_floor = MASK_NEG / 2.0;
    let mut actions = Vec::with_capacity(m);
    for r in 0..m {
        let row = log_forward.row_slice(r);
        let legal = row.iter().filter(|&&v| v > legal_floor).count();
        if legal == 0 {
            return Err(Error::DegenerateDistribution(format!("row {r} has no legal action")));
        }
        let weights: Vec<f64> = row
            .iter()
            .map(|&v| if v > legal_floor { (1.0 - eps) * v.exp() + eps / legal as f64 } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegenerateDistribution(format!("row {r} sums to {total}")));
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (c, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            acc += w;
            pick = Some(c);
            if u < acc {
                break;
            }
        }
        actions.push(pick.expect("at least one legal column") + 1);
        debug_assert!(actions[r] <= n);
    }
    Ok(actions)
}

/// Per-transition log-ratio accumulator, `(S + 1) x M`; row 0 stays zero.
///
/// Row `i` collects `log F(s_{i-1}) + log P_F(s_i | s_{i-1})` when step `i`
/// is taken and loses `log F(s_i) + log P_B(s_{i-1} | s_i)` when step `i + 1`
/// evaluates the policy at `s_i`. Row `S` instead loses `log R(x)`.
#[derive(Debug, Clone)]
pub struct LlDiff {
    steps: usize,
    width: usize,
    rows: Vec<Option<Var>>,
    rewarded: bool,
}

impl LlDiff {
    pub fn new(steps: usize, width: usize) -> Self {
        Self { steps, width, rows: vec![None; steps + 1], rewarded: false }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn bump(&mut self, tape: &mut Tape, row: usize, delta: Var, negate: bool) -> Result<()> {
        let delta = if negate { tape.scale(delta, -1.0) } else { delta };
        self.rows[row] = Some(match self.rows[row] {
            Some(cur) => tape.add(cur, delta)?,
            None => delta,
        });
        Ok(())
    }

    /// Folds in the policy outputs evaluated at `s_{i-1}` for step `i`.
    /// `prev_actions` are the edges added at step `i - 1`, required for
    /// `i > 1`.
    pub fn accumulate(
        &mut self,
        tape: &mut Tape,
        step: usize,
        outputs: &PolicyOutputs,
        actions: &[usize],
        prev_actions: Option<&[usize]>,
    ) -> Result<()> {
        if step == 0 || step > self.steps {
            return Err(Error::Contract(format!("step {step} outside 1..={}", self.steps)));
        }
        if actions.len() != self.width {
            return Err(Error::Shape(format!("{} actions for width {}", actions.len(), self.width)));
        }
        let cols: Vec<usize> = actions.iter().map(|&a| a.wrapping_sub(1)).collect();
        let taken = tape.pick(outputs.log_forward, &cols)?;
        let fwd = tape.add(outputs.log_flow, taken)?;
        self.bump(tape, step, fwd, false)?;
        if step > 1 {
            let prev = prev_actions.ok_or_else(|| Error::Contract(format!("step {step} needs previous actions")))?;
            let back = outputs
                .log_backward
                .ok_or_else(|| Error::Contract(format!("step {step} has no backward distribution")))?;
            let prev_cols: Vec<usize> = prev.iter().map(|&a| a.wrapping_sub(1)).collect();
            let undone = tape.pick(back, &prev_cols)?;
            let into = tape.add(outputs.log_flow, undone)?;
            self.bump(tape, step - 1, into, true)?;
        }
        Ok(())
    }

    /// Subtracts the terminal log-reward (`M x 1`) from row `S`.
    pub fn apply_log_reward(&mut self, tape: &mut Tape, log_reward: Var) -> Result<()> {
        let (r, c) = tape.value(log_reward).dims()?;
        if r != self.width || c != 1 {
            return Err(Error::Shape(format!("log-reward must be {} x 1, got {r} x {c}", self.width)));
        }
        if self.rewarded {
            return Err(Error::Contract("terminal reward applied twice".into()));
        }
        self.bump(tape, self.steps, log_reward, true)?;
        self.rewarded = true;
        Ok(())
    }

    pub fn is_rewarded(&self) -> bool {
        self.rewarded
    }

    /// Stacks the accumulator as an `M x (S + 1)` tape value (row `k` of the
    /// accumulator is column `k`).
    pub fn assemble(&self, tape: &mut Tape) -> Result<Var> {
        let zeros = Tensor::zeros(self.width, 1);
        let cols = self
            .rows
            .iter()
            .map(|r| match r {
                Some(v) => Ok(*v),
                None => tape.constant(zeros.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&cols)
    }

    /// Current values as `(S + 1)` rows of `M` entries.
    pub fn values(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| match r {
                Some(v) => tape.value(*v).data().to_vec(),
                None => vec![0.0; self.width],
            })
            .collect()
    }
}

/// `mean(ll_diff^2)` over the whole `(S + 1) x M` accumulator.
pub fn db_loss(tape: &mut Tape, acc: &LlDiff) -> Result<Var> {
    let all = acc.assemble(tape)?;
    if !tape.value(all).all_finite() {
        return Err(Error::NonFinite("ll_diff".into()));
    }
    let sq = tape.square(all);
    Ok(tape.mean(sq))
}

/// A completed rollout and its (reward-free) detailed-balance accumulator.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectories: TrajectorySet,
    pub ll_diff: LlDiff,
}

/// Runs `S` policy steps from empty trajectories, drawing actions from the
/// policy mixed with `explore` uniform mass.
pub fn rollout<R: Rng + ?Sized>(
    policy: &PolicyNet,
    tape: &mut Tape,
    bound: &Bound,
    cond_enc: Var,
    start: TrajectorySet,
    explore: f64,
    rng: &mut R,
) -> Result<Rollout> {
    let steps = start.budget();
    let mut set = start;
    let mut acc = LlDiff::new(steps, set.len());
    let mut prev: Option<Vec<usize>> = None;
    for step in 1..=steps {
        let out = policy.forward(tape, bound, &set, cond_enc)?;
        let actions = sample_actions_explore(tape.value(out.log_forward), explore, rng)?;
        acc.accumulate(tape, step, &out, &actions, prev.as_deref())?;
        set = append_edges(&set, &actions)?;
        prev = Some(actions);
    }
    Ok(Rollout { trajectories: set, ll_diff: acc })
}

/// Recomputes the detailed-balance accumulator for already completed
/// trajectories, re-evaluating the policy along the recorded actions.
pub fn replay(
    policy: &PolicyNet,
    tape: &mut Tape,
    bound: &Bound,
    cond_enc: Var,
    done: &TrajectorySet,
) -> Result<LlDiff> {
    if !done.is_complete() {
        return Err(Error::Contract("replay needs complete trajectories".into()));
    }
    let steps = done.budget();
    let mut set = init_trajectories(done.len(), done.num_edges(), steps)?;
    let mut acc = LlDiff::new(steps, done.len());
    let mut prev: Option<Vec<usize>> = None;
    for step in 1..=steps {
        let out = policy.forward(tape, bound, &set, cond_enc)?;
        let actions: Vec<usize> = done.trajectories().iter().map(|t| t[step - 1]).collect();
        acc.accumulate(tape, step, &out, &actions, prev.as_deref())?;
        set = append_edges(&set, &actions)?;
        prev = Some(actions);
    }
    Ok(acc)
}
