//! Graph decoder: edge embeddings, a gated recurrent pass, pooling and a
//! projection to the condition width, then the convex blend with the
//! original condition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TrajectorySet;
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// How the recurrent hidden states are reduced before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

/// Whether the decoder sees edges in insertion order or sorted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeOrdering {
    /// Sorted ascending: the decoded condition depends only on the edge set.
    #[default]
    Set,
    /// Insertion order.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderDims {
    pub num_edges: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
}

/// Single-layer gated recurrent cell; input and hidden share `embed_dim`.
#[derive(Debug, Clone, Copy)]
struct GruCell {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl GruCell {
    fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Result<Var> {
        let d = self.width;
        let gx = self.input.forward(tape, bound, x)?;
        let gh = self.hidden.forward(tape, bound, h)?;
        let xz = tape.slice_cols(gx, 0, d)?;
        let xr = tape.slice_cols(gx, d, 2 * d)?;
        let xn = tape.slice_cols(gx, 2 * d, 3 * d)?;
        let hz = tape.slice_cols(gh, 0, d)?;
        let hr = tape.slice_cols(gh, d, 2 * d)?;
        let hn = tape.slice_cols(gh, 2 * d, 3 * d)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let gated = tape.mul(r, hn)?;
        let n = tape.add(xn, gated)?;
        let n = tape.tanh(n);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let kept = tape.mul(z, diff)?;
        tape.add(n, kept)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderNet {
    pub dims: DecoderDims,
    pub pooling: Pooling,
    pub ordering: EdgeOrdering,
    embedding: ParamId,
    cell: GruCell,
    projection: Linear,
}

impl DecoderNet {
    pub const PREFIX: &'static str = "decoder";
    pub const EMBED_SCALE: f64 = 0.02;

    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: DecoderDims,
        pooling: Pooling,
        ordering: EdgeOrdering,
        rng: &mut R,
    ) -> Result<Self> {
        let p = Self::PREFIX;
        let d = dims.embed_dim;
        let embedding = store.add(
            format!("{p}/embedding"),
            Tensor::randn(dims.num_edges + 1, d, Self::EMBED_SCALE, rng),
        )?;
        let cell = GruCell {
            input: Linear::register(store, &format!("{p}/gru_input"), d, 3 * d, rng)?,
            hidden: Linear::register(store, &format!("{p}/gru_hidden"), d, 3 * d, rng)?,
            width: d,
        };
        let projection = Linear::register(store, &format!("{p}/projection"), d, dims.cond_dim, rng)?;
        Ok(Self { dims, pooling, ordering, embedding, cell, projection })
    }

    pub fn lookup(store: &ParamStore, pooling: Pooling, ordering: EdgeOrdering) -> Result<Self> {
        let p = Self::PREFIX;
        let embedding = store
            .id(&format!("{p}/embedding"))
            .ok_or_else(|| Error::Format("missing decoder embedding".into()))?;
        let (rows, d) = store.get(embedding).dims()?;
        let cell = GruCell {
            input: Linear::lookup(store, &format!("{p}/gru_input"))?,
            hidden: Linear::lookup(store, &format!("{p}/gru_hidden"))?,
            width: d,
        };
        let projection = Linear::lookup(store, &format!("{p}/projection"))?;
        let dims = DecoderDims { num_edges: rows - 1, embed_dim: d, cond_dim: projection.fan_out };
        Ok(Self { dims, pooling, ordering, embedding, cell, projection })
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn projection(&self) -> Linear {
        self.projection
    }

    fn ordered(&self, seq: &[usize]) -> Vec<usize> {
        let mut s = seq.to_vec();
        if self.ordering == EdgeOrdering::Set {
            s.sort_unstable();
        }
        s
    }

    fn check_indices(&self, seq: &[usize]) -> Result<()> {
        if let Some(bad) = seq.iter().find(|&&e| e == 0 || e > self.dims.num_edges) {
            return Err(Error::Index(format!("edge {bad} outside 1..={}", self.dims.num_edges)));
        }
        Ok(())
    }

    /// Embedding rows for one trajectory, `len x d`.
    pub fn embed_edges(&self, tape: &mut Tape, bound: &Bound, seq: &[usize]) -> Result<Var> {
        self.check_indices(seq)?;
        let ordered = self.ordered(seq);
        tape.gather_rows(bound.var(self.embedding), &ordered)
    }

    /// Decodes equal-length edge sequences into an `M x S_c` matrix.
    pub fn decode_sequences(&self, tape: &mut Tape, bound: &Bound, seqs: &[Vec<usize>]) -> Result<Var> {
        let len = seqs.first().map(Vec::len).ok_or_else(|| Error::Shape("no trajectories".into()))?;
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Contract("trajectories must share a nonzero length".into()));
        }
        for s in seqs {
            self.check_indices(s)?;
        }
        let ordered: Vec<Vec<usize>> = seqs.iter().map(|s| self.ordered(s)).collect();
        let m = seqs.len();
        let mut h = tape.constant(Tensor::zeros(m, self.dims.embed_dim))?;
        let mut pooled: Option<Var> = None;
        for t in 0..len {
            let idx: Vec<usize> = ordered.iter().map(|s| s[t]).collect();
            let x = tape.gather_rows(bound.var(self.embedding), &idx)?;
            h = self.cell.step(tape, bound, x, h)?;
            if self.pooling == Pooling::Mean {
                pooled = Some(match pooled {
                    Some(p) => tape.add(p, h)?,
                    None => h,
                });
            }
        }
        let summary = match (self.pooling, pooled) {
            (Pooling::Mean, Some(total)) => tape.scale(total, 1.0 / len as f64),
            _ => h,
        };
        self.projection.forward(tape, bound, summary)
    }

    /// Decodes a completed trajectory set.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, set: &TrajectorySet) -> Result<Var> {
        if !set.is_complete() {
            return Err(Error::Contract("decode requires complete trajectories".into()));
        }
        self.decode_sequences(tape, bound, set.trajectories())
    }

    /// Detached decode of plain sequences.
    pub fn decode_values(&self, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false)?;
        let out = self.decode_sequences(&mut tape, &bound, seqs)?;
        Ok(tape.value(out).clone())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("blend factor {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// `gamma * decoded + (1 - gamma) * cond`, row by row, on the tape.
pub fn blend(tape: &mut Tape, decoded: Var, cond: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let d = tape.scale(decoded, gamma);
    let c = tape.scale(cond, 1.0 - gamma);
    tape.add_row(d, c)
}

/// Detached form of [`blend`].
pub fn blend_values(decoded: &Tensor, cond: &[f64], gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    let (m, n) = decoded.dims()?;
    if cond.len() != n {
        return Err(Error::Shape(format!("condition of {} for width {n}", cond.len())));
    }
    let data = (0..m * n).map(|i| gamma * decoded.data()[i] + (1.0 - gamma) * cond[i % n]).collect();
    Tensor::matrix(m, n, data)
}

/// Appends `extra` to every trajectory (the original set is untouched),
/// then decodes and blends.
pub fn append_and_decode(
    decoder: &DecoderNet,
    store: &ParamStore,
    set: &TrajectorySet,
    extra: &[usize],
    cond: &[f64],
    gamma: f64,
) -> Result<Tensor> {
    let seqs = extend_sequences(set.trajectories(), extra, decoder.dims.num_edges)?;
    let decoded = decoder.decode_values(store, &seqs)?;
    blend_values(&decoded, cond, gamma)
}

/// Trajectories with `extra` appended, rejecting any repeated edge.
pub fn extend_sequences(seqs: &[Vec<usize>], extra: &[usize], num_edges: usize) -> Result<Vec<Vec<usize>>> {
    seqs.iter()
        .enumerate()
        .map(|(r, s)| {
            let mut seen = vec![false; num_edges + 1];
            let mut out = Vec::with_capacity(s.len() + extra.len());
            for &e in s.iter().chain(extra) {
                if e == 0 || e > num_edges {
                    return Err(Error::MaskViolation(format!("edge {e} outside 1..={num_edges}")));
                }
                if seen[e] {
                    return Err(Error::MaskViolation(format!("edge {e} repeated in trajectory {r}")));
                }
                seen[e] = true;
                out.push(e);
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(ordering: EdgeOrdering, pooling: Pooling) -> (ParamStore, DecoderNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let dims = DecoderDims { num_edges: 6, embed_dim: 5, cond_dim: 4 };
        let dec = DecoderNet::register(&mut store, dims, pooling, ordering, &mut rng).unwrap();
        (store, dec)
    }

    #[test]
    fn embedding_lookup_matches_table() {
        let (store, dec) = build(EdgeOrdering::Sequence, Pooling::Mean);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false).unwrap();
        let seq = [4, 1, 6];
        let emb = dec.embed_edges(&mut tape, &bound, &seq).unwrap();
        let table = store.get(dec.embedding_id());
        for (t, &e) in seq.iter().enumerate() {
            assert_eq!(tape.value(emb).row_slice(t), table.row_slice(e));
        }
        assert!(matches!(dec.embed_edges(&mut tape, &bound, &[7]), Err(Error::Index(_))));
        assert!(matches!(dec.embed_edges(&mut tape, &bound, &[0]), Err(Error::Index(_))));
    }

    #[test]
    fn tied_embeddings_give_constant_rows() {
        let (mut store, dec) = build(EdgeOrdering::Sequence, Pooling::Mean);
        let id = dec.embedding_id();
        let mut table = store.get(id).clone();
        let row: Vec<f64> = table.row_slice(1).to_vec();
        for e in 2..=6 {
            for (c, v) in row.iter().enumerate() {
                table.set(e, c, *v);
            }
        }
        store.set(id, table).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false).unwrap();
        let emb = dec.embed_edges(&mut tape, &bound, &[1, 3, 5]).unwrap();
        let v = tape.value(emb);
        assert_eq!(v.row_slice(0), v.row_slice(1));
        assert_eq!(v.row_slice(1), v.row_slice(2));
    }

    #[test]
    fn set_mode_is_order_free() {
        let (store, dec) = build(EdgeOrdering::Set, Pooling::Mean);
        let a = dec.decode_values(&store, &[vec![5, 2, 3]]).unwrap();
        let b = dec.decode_values(&store, &[vec![3, 5, 2]]).unwrap();
        assert_eq!(a, b);
        let (store, dec) = build(EdgeOrdering::Sequence, Pooling::Mean);
        let a = dec.decode_values(&store, &[vec![5, 2, 3]]).unwrap();
        let b = dec.decode_values(&store, &[vec![3, 5, 2]]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn batch_matches_single_decodes() {
        let (store, dec) = build(EdgeOrdering::Sequence, Pooling::Mean);
        let seqs = vec![vec![1, 2], vec![6, 3], vec![4, 5]];
        let batch = dec.decode_values(&store, &seqs).unwrap();
        assert_eq!(batch.shape(), &[3, 4]);
        for (r, s) in seqs.iter().enumerate() {
            let single = dec.decode_values(&store, std::slice::from_ref(s)).unwrap();
            assert_eq!(single.row_slice(0), batch.row_slice(r));
        }
    }

    #[test]
    fn zero_projection_returns_bias() {
        for pooling in [Pooling::Mean, Pooling::Last] {
            let (mut store, dec) = build(EdgeOrdering::Set, pooling);
            let proj = dec.projection();
            store.set(proj.weight, Tensor::zeros(5, 4)).unwrap();
            store.set(proj.bias, Tensor::row(vec![0.5, -1.0, 2.0, 0.25])).unwrap();
            let out = dec.decode_values(&store, &[vec![1, 2], vec![3, 4]]).unwrap();
            for r in 0..2 {
                assert_eq!(out.row_slice(r), &[0.5, -1.0, 2.0, 0.25]);
            }
        }
    }

    #[test]
    fn incomplete_set_rejected() {
        let (store, dec) = build(EdgeOrdering::Set, Pooling::Mean);
        let set = TrajectorySet::from_sequences(&[vec![1]], 6, 2).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false).unwrap();
        assert!(matches!(dec.decode(&mut tape, &bound, &set), Err(Error::Contract(_))));
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let d = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 7.0]).unwrap();
        let c = [0.3, -0.6, 0.9];
        let b0 = blend_values(&d, &c, 0.0).unwrap();
        for r in 0..2 {
            assert_eq!(b0.row_slice(r), &c);
        }
        assert_eq!(blend_values(&d, &c, 1.0).unwrap(), d);
        let half = blend_values(&d, &c, 0.5).unwrap();
        for r in 0..2 {
            for k in 0..3 {
                assert_eq!(half.get(r, k), (d.get(r, k) + c[k]) / 2.0);
            }
        }
        assert!(matches!(blend_values(&d, &c, 1.5), Err(Error::InvalidConfig(_))));

        let mut tape = Tape::new();
        let dv = tape.constant(d.clone()).unwrap();
        let cv = tape.constant(Tensor::row(c.to_vec())).unwrap();
        let bt = blend(&mut tape, dv, cv, 0.0).unwrap();
        assert_eq!(tape.value(bt), &b0);
        assert!(matches!(blend(&mut tape, dv, cv, -0.1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn append_and_decode_behaviour() {
        let (store, dec) = build(EdgeOrdering::Set, Pooling::Mean);
        let set = TrajectorySet::from_sequences(&[vec![1, 2], vec![3, 4]], 6, 2).unwrap();
        let c = [0.1, 0.2, 0.3, 0.4];
        let plain = blend_values(&dec.decode_values(&store, set.trajectories()).unwrap(), &c, 0.5).unwrap();
        assert_eq!(append_and_decode(&dec, &store, &set, &[], &c, 0.5).unwrap(), plain);
        let extended = append_and_decode(&dec, &store, &set, &[5, 6], &c, 0.5).unwrap();
        assert!(extended.max_abs_diff(&plain).unwrap() > 0.0);
        assert_eq!(set.trajectory(0), &[1, 2]);
        assert!(matches!(
            append_and_decode(&dec, &store, &set, &[2], &c, 0.5),
            Err(Error::MaskViolation(_))
        ));
    }
}
