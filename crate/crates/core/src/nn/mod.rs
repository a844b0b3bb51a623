//! Parameter storage, affine layers and MLPs on top of the autodiff tape.

mod checkpoint;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{Optimizer, OptimizerKind};

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Parameter {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    populated: bool,
}

/// Owns every trainable tensor of a model together with its gradient buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique and free of whitespace
    /// (they become checkpoint manifest entries).
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "invalid parameter name {name:?}"
        );
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        let n = value.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            populated: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Gradient buffer, or `None` when no backward pass has touched the
    /// parameter since the last [`ParamStore::zero_grad`].
    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        let p = &self.params[id.0];
        p.populated.then_some(p.grad.as_slice())
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(Error::shape("set_grad", p.value.shape(), &[grad.len()]));
        }
        p.grad = grad;
        p.populated = true;
        Ok(())
    }

    /// Places the parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.params[id.0].value)
    }

    /// Moves the gradients accumulated on `tape` into the store. Parameters
    /// bound to the tape but unreached by backward receive zero.
    pub fn absorb_grads(&mut self, tape: &mut Tape) {
        let leaves: Vec<(usize, Var)> = tape.param_leaves().collect();
        for (key, var) in leaves {
            let p = &mut self.params[key];
            if let Some(g) = tape.take_grad(var) {
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            p.populated = true;
        }
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for id in ids {
            let p = &mut self.params[id.0];
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.populated = false;
        }
    }

    pub fn zero_grad_all(&mut self) {
        let ids: Vec<ParamId> = self.ids().collect();
        self.zero_grad(&ids);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }
}

/// Runs backward from `loss` and moves the parameter gradients into `store`.
pub fn backward(tape: &mut Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    tape.backward(loss)?;
    store.absorb_grads(tape);
    Ok(())
}

/// Affine map `y = x W^T + b` with `W: [out, in]`, `b: [out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Registers zero-initialised weight and bias under `name.weight` / `name.bias`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(&format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("linear", shape, &[self.out_dim, self.in_dim]));
        }
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        let wt = tape.transpose(w)?;
        let xw = tape.matmul(x, wt)?;
        tape.add_bias(xw, b)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let s = glorot_bound(self.in_dim, self.out_dim);
        for w in store.value_mut(self.weight).data_mut() {
            *w = rng.random_range(-s..=s);
        }
        store
            .value_mut(self.bias)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = 0.0);
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Chain of [`Linear`] layers with ReLU between consecutive layers and no
/// activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`; needs at least two entries.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for layer in &self.layers {
            layer.init(store, rng);
        }
    }
}
