//! Named parameter storage and the dense layers built on it.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by the optimizer and the checkpoint writer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("parameter `{name}` registered twice")));
        }
        value.dims()?;
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a tensor's contents; the shape must stay the same.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "`{}`: {:?} vs {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Mutable handles to several tensors at once; `ids` must be strictly
    /// increasing.
    pub fn select_mut(&mut self, ids: &[ParamId]) -> Result<Vec<&mut Tensor>> {
        if ids.windows(2).any(|w| w[0].0 >= w[1].0) || ids.last().is_some_and(|l| l.0 >= self.tensors.len()) {
            return Err(Error::Contract("parameter selection must be increasing and in range".into()));
        }
        let mut wanted = ids.iter().peekable();
        let mut out = Vec::with_capacity(ids.len());
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if wanted.peek().is_some_and(|id| id.0 == i) {
                wanted.next();
                out.push(t);
            }
        }
        Ok(out)
    }

    /// Records every parameter as a tape leaf; those matching `trainable`
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| tape.leaf(t.clone(), trainable(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), Tensor::xavier(fan_in, fan_out, rng))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(1, fan_out))?;
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    /// Looks up an existing layer by prefix.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .id(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Format(format!("missing parameter `{prefix}.{suffix}`")))
        };
        let weight = find("weight")?;
        let bias = find("bias")?;
        let (fan_in, fan_out) = store.get(weight).dims()?;
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(xw, bound.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with `tanh` between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidConfig(format!("MLP `{prefix}` needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Linear::lookup(store, &format!("{prefix}.{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, x)?;
            if i < last {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}
