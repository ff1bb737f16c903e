use super::Tensor;
use crate::error::{Error, Result};

/// Stand-in for `-inf` on masked logits; keeps softmax gradients NaN-free.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanOverRows(Var),
    MeanOverCols(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SliceCols(Var, usize),
    RepeatRows(Var),
    MaskedLogSoftmax(Var),
    Mse(Var, Var),
    RowMse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Single-use record of a forward pass.
///
/// Values are computed eagerly as ops are recorded; [`Tape::backward`] then
/// walks the record in reverse once. A second call errors until
/// [`Tape::zero_grad`] clears the gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn matrix(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims()
    }

    /// Records a leaf; gradients flow into it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.dims()?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a)?;
        let (k2, m) = self.matrix(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), tracked))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        let (r, n2) = self.matrix(row)?;
        if r != 1 || n != n2 {
            return Err(shape_err("add_row", self.value(a), self.value(row)));
        }
        let x = self.value(a).data();
        let b = self.value(row).data();
        let data = (0..m * n).map(|i| x[i] + b[i % n]).collect();
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, row), tracked))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| f(*x)).collect(),
        };
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Column-wise mean: `m x n -> 1 x n`.
    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::row(out), Op::MeanOverRows(a), tracked))
    }

    /// Row-wise mean: `m x n -> m x 1`.
    pub fn mean_over_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        let x = self.value(a).data();
        let out = (0..m).map(|r| x[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::column(out), Op::MeanOverCols(a), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = self.matrix(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = self.matrix(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix(p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Selects rows of `a` by index (embedding lookup, permutation).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if idx.is_empty() {
            return Err(Error::Shape("gather of no rows".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("row {bad} of {m}")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(x.row_slice(i));
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(idx.len(), n, out)?, Op::GatherRows(a, idx.to_vec()), tracked))
    }

    /// Picks column `cols[r]` from row `r`: `m x n -> m x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if cols.len() != m {
            return Err(Error::Shape(format!("pick: {} indices for {m} rows", cols.len())));
        }
        if let Some(bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Index(format!("column {bad} of {n}")));
        }
        let x = self.value(a);
        let out = cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::column(out), Op::Pick(a, cols.to_vec()), tracked))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if start >= end || end > n {
            return Err(Error::Index(format!("columns {start}..{end} of {n}")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(m, end - start, out)?, Op::SliceCols(a, start), tracked))
    }

    /// Stacks `m` copies of a `1 x n` row.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.matrix(a)?;
        if r != 1 || m == 0 {
            return Err(Error::Shape(format!("repeat_rows on {r} x {n} into {m}")));
        }
        let row = self.value(a).data().to_vec();
        let out = row.iter().copied().cycle().take(m * n).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::RepeatRows(a), tracked))
    }

    /// Row-wise log-softmax with `exclude[r*n + c] = true` entries pushed to
    /// [`MASK_NEG`]. Each row needs at least one admissible entry.
    pub fn masked_log_softmax(&mut self, a: Var, exclude: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix(a)?;
        if exclude.len() != m * n {
            return Err(Error::Shape(format!("mask of {} for {m} x {n}", exclude.len())));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mask = &exclude[r * n..(r + 1) * n];
            let peak = row
                .iter()
                .zip(mask)
                .filter(|(_, &ex)| !ex)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if peak == f64::NEG_INFINITY {
                return Err(Error::DegenerateDistribution(format!("row {r} fully masked")));
            }
            let total: f64 =
                row.iter().zip(mask).filter(|(_, &ex)| !ex).map(|(v, _)| (v - peak).exp()).sum();
            let lse = peak + total.ln();
            for c in 0..n {
                let shifted = if mask[c] { row[c] + MASK_NEG } else { row[c] };
                out[r * n + c] = shifted - lse;
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MaskedLogSoftmax(a), tracked))
    }

    /// Mean squared difference over all entries, `1 x 1`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", va, vb));
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / va.len() as f64;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), tracked))
    }

    /// Per-row mean squared difference, `m x 1`.
    pub fn row_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("row_mse", va, vb));
        }
        let (m, n) = va.dims()?;
        let out = (0..m)
            .map(|r| {
                va.row_slice(r).iter().zip(vb.row_slice(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                    / n as f64
            })
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::column(out), Op::RowMse(a, b), tracked))
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice without zero_grad".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !self.node(loss).tracked {
            return Err(Error::Contract("loss does not depend on any tracked value".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass w.r.t. a tracked value; zeros when
    /// the loss did not depend on it.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        if !self.backward_done {
            return Err(Error::Contract("no backward pass recorded".into()));
        }
        if !self.node(v).tracked {
            return Err(Error::Contract(format!("value {} is not tracked", v.0)));
        }
        Ok(match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let shape = self.node(v).value.shape().to_vec();
                let n = shape.iter().product();
                Tensor { shape, data: vec![0.0; n] }
            }
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.data.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor { shape: self.nodes[v.0].value.shape().to_vec(), data: contrib });
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims()?;
                let m = self.value(*b).cols();
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].tracked {
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += gd[r * m + c] * y[p * m + c];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        for p in 0..k {
                            let xv = x[r * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                gb[p * m + c] += xv * gd[r * m + c];
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(y).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, gd.to_vec());
                let n = out.cols();
                let mut gr = vec![0.0; n];
                for (idx, g) in gd.iter().enumerate() {
                    gr[idx % n] += g;
                }
                acc(*row, gr);
            }
            Op::Scale(a, k) => acc(*a, gd.iter().map(|g| g * k).collect()),
            Op::AddScalar(a) => acc(*a, gd.to_vec()),
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims()?;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(*p, gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                acc(*a, gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Sigmoid(a) => {
                acc(*a, gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Exp(a) => acc(*a, gd.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![gd[0] / n as f64; n]);
            }
            Op::MeanOverRows(a) => {
                let (m, n) = self.value(*a).dims()?;
                acc(*a, (0..m * n).map(|idx| gd[idx % n] / m as f64).collect());
            }
            Op::MeanOverCols(a) => {
                let (m, n) = self.value(*a).dims()?;
                acc(*a, (0..m * n).map(|idx| gd[idx / n] / n as f64).collect());
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.value(*a).dims()?;
                let mut ga = vec![0.0; m * n];
                for (k, &src) in idx.iter().enumerate() {
                    for c in 0..n {
                        ga[src * n + c] += gd[k * n + c];
                    }
                }
                acc(*a, ga);
            }
            Op::Pick(a, cols) => {
                let (m, n) = self.value(*a).dims()?;
                let mut ga = vec![0.0; m * n];
                for (r, &c) in cols.iter().enumerate() {
                    ga[r * n + c] = gd[r];
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims()?;
                let w = out.cols();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*a, ga);
            }
            Op::RepeatRows(a) => {
                let n = self.value(*a).cols();
                let mut ga = vec![0.0; n];
                for (idx, g) in gd.iter().enumerate() {
                    ga[idx % n] += g;
                }
                acc(*a, ga);
            }
            Op::MaskedLogSoftmax(a) => {
                let (m, n) = out.dims()?;
                let y = out.data();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let gsum: f64 = gd[r * n..(r + 1) * n].iter().sum();
                    for c in 0..n {
                        let p = y[r * n + c].exp();
                        ga[r * n + c] = gd[r * n + c] - p * gsum;
                    }
                }
                acc(*a, ga);
            }
            Op::Mse(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / x.len() as f64;
                acc(*a, x.iter().zip(z).map(|(x, z)| k * (x - z)).collect());
                acc(*b, x.iter().zip(z).map(|(x, z)| -k * (x - z)).collect());
            }
            Op::RowMse(a, b) => {
                let (m, n) = self.value(*a).dims()?;
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                let diff: Vec<f64> = (0..m * n).map(|idx| 2.0 * gd[idx / n] / n as f64 * (x[idx] - z[idx])).collect();
                acc(*b, diff.iter().map(|d| -d).collect());
                acc(*a, diff);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(t: Tensor) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(t, true).unwrap();
        (tape, v)
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        // identity padded with a zero row
        let b = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 4.0, 5.0]);
        let d = tape.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(tape.matmul(a, d), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_of_self_is_zero() {
        let (mut tape, x) = tape_with(Tensor::row(vec![1.0, -2.0, 3.5]));
        let l = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn gather_permutes_rows() {
        let t = Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap();
        let (mut tape, x) = tape_with(t);
        let g = tape.gather_rows(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(g).row_slice(0), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(tape.value(g).row_slice(1), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(tape.value(g).row_slice(2), &[4.0, 5.0, 6.0, 7.0]);
        assert!(matches!(tape.gather_rows(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::matrix(2, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        let (mut tape, x) = tape_with(w.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, wv) in g.data().iter().zip(w.data()) {
            assert_eq!(*gv, 2.0 * wv);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row(vec![1.0, 2.0]), true).unwrap();
        let b = tape.leaf(Tensor::row(vec![3.0, 4.0]), true).unwrap();
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_contracts() {
        let (mut tape, x) = tape_with(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
        tape.zero_grad();
        tape.backward(l).unwrap();
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let (mut tape, x) = tape_with(Tensor::row(vec![f64::NAN]));
        let l = tape.sum(x);
        assert!(matches!(tape.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_log_softmax_cases() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0]).unwrap()).unwrap();
        let mask = [true, false, true, false, true, false];
        let y = tape.masked_log_softmax(logits, &mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!(v.get(0, 0) <= MASK_NEG);
        assert!((v.get(1, 0) - (0.5f64).ln()).abs() < 1e-15);
        assert!((v.get(1, 2) - (0.5f64).ln()).abs() < 1e-15);
        let all = [true; 6];
        assert!(matches!(tape.masked_log_softmax(logits, &all), Err(Error::DegenerateDistribution(_))));
    }

    #[test]
    fn uniform_logits_give_log_one_over_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::filled(1, 5, 0.7)).unwrap();
        let mask = [false, true, false, false, true];
        let y = tape.masked_log_softmax(logits, &mask).unwrap();
        for c in [0, 2, 3] {
            assert!((tape.value(y).get(0, c) - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }
}
