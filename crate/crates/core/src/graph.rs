//! Combinatorics of the undirected latent graph.
//!
//! Edges of an `N`-node graph are numbered `1..=E` with `E = N(N-1)/2` in
//! row-major upper-triangular order; index `0` is the start sentinel every
//! trajectory begins from. A trajectory adds one new edge per step until it
//! holds `S` edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack applied before flooring `(1-rho)*E` so that decimal sparsities such
/// as `0.7` (stored as `0.69999..`) do not lose a whole edge to roundoff.
const BUDGET_SLACK: f64 = 1e-9;

/// Number of undirected non-self-loop edges of an `n`-node graph.
pub fn edge_count(n: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::InvalidGraph(format!("need at least 2 nodes, got {n}")));
    }
    Ok(n * (n - 1) / 2)
}

/// Per-trajectory edge budget `S = floor((1 - rho) * E)`.
pub fn step_budget(n: usize, rho: f64) -> Result<usize> {
    let e = edge_count(n)?;
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidSparsity(format!("rho must lie in [0, 1), got {rho}")));
    }
    let s = ((1.0 - rho) * e as f64 + BUDGET_SLACK).floor() as usize;
    if s == 0 {
        return Err(Error::InvalidSparsity(format!(
            "rho = {rho} leaves no edges for a {n}-node graph"
        )));
    }
    Ok(s.min(e))
}

/// Maps a 1-based edge index to its node pair `(i, j)` with `i < j`.
pub fn edge_to_pair(e: usize, n: usize) -> Result<(usize, usize)> {
    let total = edge_count(n)?;
    if e == 0 || e > total {
        return Err(Error::Index(format!("edge {e} outside 1..={total}")));
    }
    let mut rest = e;
    for i in 0..n - 1 {
        let row = n - 1 - i;
        if rest <= row {
            return Ok((i, i + rest));
        }
        rest -= row;
    }
    unreachable!("edge index validated against edge count")
}

/// Inverse of [`edge_to_pair`].
pub fn pair_to_edge(i: usize, j: usize, n: usize) -> Result<usize> {
    if i >= j || j >= n {
        return Err(Error::Index(format!("pair ({i}, {j}) invalid for {n} nodes")));
    }
    let offset = i * (n - 1) - i * i.saturating_sub(1) / 2;
    Ok(offset + (j - i))
}

/// `C(n, k)` in wide integers; saturates instead of overflowing.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Number of ordered length-`k` sequences of distinct items from `n`.
pub fn falling_factorial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).try_fold(1u128, |acc, i| acc.checked_mul((n - i) as u128)).unwrap_or(u128::MAX)
}

/// Structural configuration of the latent graph and the sampler's batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub num_nodes: usize,
    pub sparsity: f64,
    pub num_steps: usize,
    pub num_trajectories: usize,
    pub total_edges: usize,
}

impl GraphConfig {
    /// Builds a configuration with `S` derived from the sparsity.
    pub fn new(num_nodes: usize, sparsity: f64, num_trajectories: usize) -> Result<Self> {
        let num_steps = step_budget(num_nodes, sparsity)?;
        Self::build(num_nodes, sparsity, num_steps, num_trajectories)
    }

    /// Builds a configuration whose step count supersedes the sparsity formula.
    pub fn with_steps(
        num_nodes: usize,
        sparsity: f64,
        num_steps: usize,
        num_trajectories: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::InvalidSparsity(format!("rho must lie in [0, 1), got {sparsity}")));
        }
        Self::build(num_nodes, sparsity, num_steps, num_trajectories)
    }

    fn build(
        num_nodes: usize,
        sparsity: f64,
        num_steps: usize,
        num_trajectories: usize,
    ) -> Result<Self> {
        let total_edges = edge_count(num_nodes)?;
        if num_steps == 0 || num_steps > total_edges {
            return Err(Error::InvalidConfig(format!(
                "step count {num_steps} outside 1..={total_edges}"
            )));
        }
        if num_trajectories == 0 {
            return Err(Error::InvalidConfig("need at least one trajectory".into()));
        }
        Ok(Self { num_nodes, sparsity, num_steps, num_trajectories, total_edges })
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt =
            Self::with_steps(self.num_nodes, self.sparsity, self.num_steps, self.num_trajectories)?;
        if rebuilt.total_edges != self.total_edges {
            return Err(Error::InvalidConfig(format!(
                "total_edges {} inconsistent with {} nodes",
                self.total_edges, self.num_nodes
            )));
        }
        Ok(())
    }

    /// Same graph with a different number of parallel trajectories.
    pub fn with_trajectories(&self, m: usize) -> Result<Self> {
        Self::build(self.num_nodes, self.sparsity, self.num_steps, m)
    }
}

/// `M` partially built trajectories and their availability masks.
///
/// Masks follow the exclusion convention: `forward_mask[r][e] = 1` marks an
/// edge that may no longer be added, `backward_mask[r][e] = 1` marks an edge
/// that may not be removed. Initially the forward mask is all zeros and the
/// backward mask all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    edges: Vec<Vec<usize>>,
    forward_mask: Vec<Vec<bool>>,
    num_edges: usize,
    budget: usize,
}

/// Starts `m` empty trajectories for a graph with `num_edges` edges and a
/// per-trajectory budget of `budget` steps.
pub fn init_trajectories(m: usize, num_edges: usize, budget: usize) -> Result<TrajectorySet> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one trajectory".into()));
    }
    if num_edges == 0 || budget == 0 || budget > num_edges {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} invalid for {num_edges} edges"
        )));
    }
    Ok(TrajectorySet {
        edges: vec![Vec::with_capacity(budget); m],
        forward_mask: vec![vec![false; num_edges]; m],
        num_edges,
        budget,
    })
}

impl TrajectorySet {
    pub fn for_config(cfg: &GraphConfig) -> Result<Self> {
        init_trajectories(cfg.num_trajectories, cfg.total_edges, cfg.num_steps)
    }

    /// Rebuilds a set from explicit edge sequences, validating every append.
    pub fn from_sequences(seqs: &[Vec<usize>], num_edges: usize, budget: usize) -> Result<Self> {
        let mut set = init_trajectories(seqs.len(), num_edges, budget)?;
        for (r, seq) in seqs.iter().enumerate() {
            for &e in seq {
                set.push_edge(r, e)?;
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Added edges of trajectory `r`, in insertion order (sentinel omitted).
    pub fn trajectory(&self, r: usize) -> &[usize] {
        &self.edges[r]
    }

    pub fn trajectories(&self) -> &[Vec<usize>] {
        &self.edges
    }

    /// Current length; all trajectories advance in lockstep under
    /// [`append_edges`], but sets built from arbitrary sequences may differ.
    pub fn lengths(&self) -> Vec<usize> {
        self.edges.iter().map(Vec::len).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.edges.iter().all(|t| t.len() == self.budget)
    }

    pub fn is_added(&self, r: usize, e: usize) -> bool {
        e >= 1 && e <= self.num_edges && self.forward_mask[r][e - 1]
    }

    /// Row `r` of the forward exclusion mask (1 = already added).
    pub fn forward_mask_row(&self, r: usize) -> Vec<f64> {
        self.forward_mask[r].iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    /// Row `r` of the backward exclusion mask (1 = not removable).
    pub fn backward_mask_row(&self, r: usize) -> Vec<f64> {
        self.forward_mask[r].iter().map(|&a| if a { 0.0 } else { 1.0 }).collect()
    }

    /// Multi-hot encoding of the added edges, `M x E` row-major.
    pub fn multi_hot(&self) -> Vec<f64> {
        self.forward_mask
            .iter()
            .flat_map(|row| row.iter().map(|&a| if a { 1.0 } else { 0.0 }))
            .collect()
    }

    fn push_edge(&mut self, r: usize, e: usize) -> Result<()> {
        if e == 0 || e > self.num_edges {
            return Err(Error::Index(format!("edge {e} outside 1..={}", self.num_edges)));
        }
        if self.edges[r].len() >= self.budget {
            return Err(Error::Budget(format!(
                "trajectory {r} already holds {} edges",
                self.budget
            )));
        }
        if self.forward_mask[r][e - 1] {
            return Err(Error::MaskViolation(format!("edge {e} already in trajectory {r}")));
        }
        self.forward_mask[r][e - 1] = true;
        self.edges[r].push(e);
        Ok(())
    }

    /// Same trajectories with every trajectory's edges sorted ascending.
    pub fn sorted_edges(&self) -> Vec<Vec<usize>> {
        self.edges
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.sort_unstable();
                t
            })
            .collect()
    }
}

/// Extends every trajectory by one edge. `actions[r]` goes to trajectory `r`.
pub fn append_edges(set: &TrajectorySet, actions: &[usize]) -> Result<TrajectorySet> {
    if actions.len() != set.len() {
        return Err(Error::Shape(format!(
            "{} actions for {} trajectories",
            actions.len(),
            set.len()
        )));
    }
    let mut next = set.clone();
    for (r, &e) in actions.iter().enumerate() {
        next.push_edge(r, e)?;
    }
    Ok(next)
}

/// All size-`s` subsets of `{1..=e}` in lexicographic order.
pub fn enumerate_terminal_sets(e: usize, s: usize, cap: u128) -> Result<Vec<Vec<usize>>> {
    if s > e {
        return Err(Error::InvalidConfig(format!("cannot pick {s} of {e} edges")));
    }
    let count = binomial(e, s);
    if count > cap {
        return Err(Error::EnumerationTooLarge { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current: Vec<usize> = (1..=s).collect();
    loop {
        out.push(current.clone());
        // advance the rightmost position that still has room
        let mut pos = s;
        while pos > 0 && current[pos - 1] == e - s + pos {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        current[pos - 1] += 1;
        for k in pos..s {
            current[k] = current[k - 1] + 1;
        }
    }
    Ok(out)
}

/// All ordered length-`s` sequences of distinct edges from `{1..=e}`,
/// lexicographic. Used by the order-sensitive reward mode.
pub fn enumerate_terminal_sequences(e: usize, s: usize, cap: u128) -> Result<Vec<Vec<usize>>> {
    if s > e {
        return Err(Error::InvalidConfig(format!("cannot pick {s} of {e} edges")));
    }
    let count = falling_factorial(e, s);
    if count > cap {
        return Err(Error::EnumerationTooLarge { count, cap });
    }
    fn extend(e: usize, s: usize, prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == s {
            out.push(prefix.clone());
            return;
        }
        for edge in 1..=e {
            if !used[edge - 1] {
                used[edge - 1] = true;
                prefix.push(edge);
                extend(e, s, prefix, used, out);
                prefix.pop();
                used[edge - 1] = false;
            }
        }
    }
    let mut out = Vec::with_capacity(count as usize);
    extend(e, s, &mut Vec::with_capacity(s), &mut vec![false; e], &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_counts() {
        assert_eq!(edge_count(20).unwrap(), 190);
        assert_eq!(edge_count(8).unwrap(), 28);
        assert_eq!(edge_count(2).unwrap(), 1);
        assert!(matches!(edge_count(1), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn budgets() {
        assert_eq!(step_budget(20, 0.83).unwrap(), 32);
        assert_eq!(step_budget(8, 0.70).unwrap(), 8);
        assert_eq!(step_budget(4, 2.0 / 3.0).unwrap(), 2);
        assert!(matches!(step_budget(2, 0.5), Err(Error::InvalidSparsity(_))));
        assert!(matches!(step_budget(4, 1.0), Err(Error::InvalidSparsity(_))));
        assert!(matches!(step_budget(4, -0.1), Err(Error::InvalidSparsity(_))));
    }

    #[test]
    fn chest_xray_row_needs_override() {
        // (N=20, rho=0.82) floors to 34; the published configuration uses 33.
        assert_eq!(step_budget(20, 0.82).unwrap(), 34);
        let cfg = GraphConfig::with_steps(20, 0.82, 33, 10).unwrap();
        assert_eq!(cfg.num_steps, 33);
        assert_eq!(cfg.total_edges, 190);
    }

    #[test]
    fn edge_pair_examples() {
        assert_eq!(edge_to_pair(1, 4).unwrap(), (0, 1));
        assert_eq!(edge_to_pair(6, 4).unwrap(), (2, 3));
        assert_eq!(edge_to_pair(4, 4).unwrap(), (1, 2));
        assert_eq!(pair_to_edge(0, 1, 4).unwrap(), 1);
        assert_eq!(pair_to_edge(2, 3, 4).unwrap(), 6);
        assert!(matches!(edge_to_pair(0, 4), Err(Error::Index(_))));
        assert!(matches!(edge_to_pair(7, 4), Err(Error::Index(_))));
        assert!(matches!(pair_to_edge(2, 2, 4), Err(Error::Index(_))));
        assert!(matches!(pair_to_edge(1, 4, 4), Err(Error::Index(_))));
    }

    #[test]
    fn row_major_enumeration_oracle() {
        let n = 4;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        for (k, &p) in pairs.iter().enumerate() {
            assert_eq!(edge_to_pair(k + 1, n).unwrap(), p);
        }
    }

    #[test]
    fn init_sets() {
        for m in [1, 3, 40] {
            let t = init_trajectories(m, 6, 2).unwrap();
            assert_eq!(t.len(), m);
            assert!(t.lengths().iter().all(|&l| l == 0));
            for r in 0..m {
                assert!(t.forward_mask_row(r).iter().all(|&v| v == 0.0));
                assert!(t.backward_mask_row(r).iter().all(|&v| v == 1.0));
            }
        }
        assert!(matches!(init_trajectories(0, 6, 2), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn append_one_step() {
        let t = init_trajectories(3, 6, 2).unwrap();
        let t = append_edges(&t, &[2, 5, 2]).unwrap();
        assert_eq!(t.lengths(), vec![1, 1, 1]);
        assert_eq!(t.forward_mask_row(0)[1], 1.0);
        assert_eq!(t.forward_mask_row(1)[4], 1.0);
        assert_eq!(t.backward_mask_row(2)[1], 0.0);
        assert_eq!(t.forward_mask_row(0).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn append_errors() {
        let t = init_trajectories(2, 6, 2).unwrap();
        let t = append_edges(&t, &[1, 2]).unwrap();
        assert!(matches!(append_edges(&t, &[1, 3]), Err(Error::MaskViolation(_))));
        let t = append_edges(&t, &[3, 4]).unwrap();
        assert!(matches!(append_edges(&t, &[5, 5]), Err(Error::Budget(_))));
        let t0 = init_trajectories(2, 6, 2).unwrap();
        assert!(matches!(append_edges(&t0, &[0, 1]), Err(Error::Index(_))));
        assert!(matches!(append_edges(&t0, &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn full_rollout_reaches_budget() {
        let (e, s, m) = (10, 4, 3);
        let mut t = init_trajectories(m, e, s).unwrap();
        for step in 0..s {
            let actions: Vec<usize> = (0..m).map(|r| (r + 3 * step) % e + 1).collect();
            t = append_edges(&t, &actions).unwrap();
        }
        assert_eq!(t.lengths(), vec![s; m]);
        assert!(t.is_complete());
    }

    #[test]
    fn enumeration() {
        let sets = enumerate_terminal_sets(6, 2, 1000).unwrap();
        assert_eq!(sets.len(), 15);
        assert_eq!(sets[0], vec![1, 2]);
        assert_eq!(sets[14], vec![5, 6]);
        assert_eq!(enumerate_terminal_sets(3, 3, 10).unwrap(), vec![vec![1, 2, 3]]);
        assert_eq!(enumerate_terminal_sets(6, 0, 10).unwrap(), vec![Vec::<usize>::new()]);
        assert!(matches!(
            enumerate_terminal_sets(190, 32, 1_000_000),
            Err(Error::EnumerationTooLarge { .. })
        ));
        let seqs = enumerate_terminal_sequences(4, 2, 100).unwrap();
        assert_eq!(seqs.len(), 12);
        assert_eq!(seqs[0], vec![1, 2]);
        assert_eq!(seqs[1], vec![1, 3]);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(190, 32) > 1_000_000_000, true);
        assert_eq!(falling_factorial(6, 2), 30);
    }
}
