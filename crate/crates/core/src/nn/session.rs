use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::graph::{Gradients, Graph, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape bound to a parameter store, a mode and a
/// seeded generator for dropout.
pub struct Session<'a, S> {
    pub graph: Graph<S>,
    store: &'a mut ParamStore<S>,
    mode: Mode,
    rng: ChaCha8Rng,
    leaves: HashMap<ParamId, Var>,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            leaves: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Borrow the tape and the generator together, for random operations.
    pub fn graph_and_rng(&mut self) -> (&mut Graph<S>, &mut ChaCha8Rng) {
        (&mut self.graph, &mut self.rng)
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval {
            if !(0.0..1.0).contains(&p) {
                return Err(crate::Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
            }
            return Ok(x);
        }
        self.graph.dropout(x, p, &mut self.rng)
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.param_leaf(id, p.value.clone(), p.trainable);
        self.leaves.insert(id, v);
        v
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.graph.backward(loss)
    }

    /// Backpropagate and add the parameter gradients into the store.
    pub fn backward_into_store(&mut self, loss: Var) -> Result<()> {
        let grads = self.graph.backward(loss)?;
        self.store.accumulate(&grads);
        Ok(())
    }
}
