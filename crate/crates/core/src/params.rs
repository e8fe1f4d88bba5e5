//! Named parameter storage with deterministic initialization, plus the
//! per-tape binding that exposes parameters as autodiff leaves.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// All trainable tensors of a model, keyed by hierarchical name
/// (e.g. "enc.l3.ffn1.w1.weight"). Iteration follows registration order so
/// checkpoints and optimizer traversals are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn num_tensors(&self) -> usize {
        self.values.len()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Sum of element counts over names with the given prefix.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

/// Deterministic initializer: one sequential stream, so a (config, seed) pair
/// always produces the same parameters regardless of platform.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Xavier-uniform linear weight, stored [in, out].
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| self.rng.gen_range(-a..a)).collect();
        store.register(name, Tensor::new(vec![d_in, d_out], data)?)
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, shape: Vec<usize>) -> Result<()> {
        store.register(name, Tensor::filled(shape, 0.0))
    }

    pub fn ones(&mut self, store: &mut ParamStore, name: &str, shape: Vec<usize>) -> Result<()> {
        store.register(name, Tensor::filled(shape, 1.0))
    }

    /// Uniform tensor with Xavier-style bound derived from the given fans.
    pub fn uniform_fan(&mut self, store: &mut ParamStore, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        store.register(name, Tensor::new(shape, data)?)
    }
}

/// Connects a store to one tape: parameters become leaves on first use, and
/// gradients are read back by name after `backward`.
pub struct Binding<'s> {
    store: &'s ParamStore,
    ids: HashMap<String, NodeId>,
    trainable: bool,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binding { store, ids: HashMap::new(), trainable }
    }

    /// Node for a named parameter, registering a leaf on first use.
    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let id = tape.leaf(value.clone(), self.trainable);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of every parameter touched on this tape, by name. Parameters
    /// never used in the forward pass are absent.
    pub fn grads(&self, tape: &Tape) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, &id) in &self.ids {
            if let Some(g) = tape.grad(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
