use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// One forward pass over a frozen [`ParamStore`]: a fresh tape, the
/// parameters bound lazily as leaves, and optional dropout.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
    trace: Option<Vec<Var>>,
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss never touched.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

impl<'a> Forward<'a> {
    /// Parameters bound as gradient-carrying leaves, no dropout.
    pub fn new(params: &'a ParamStore) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable: true,
            dropout: None,
            trace: None,
        }
    }

    /// Parameters bound as constants; nothing is differentiable.
    pub fn inference(params: &'a ParamStore) -> Self {
        Forward {
            trainable: false,
            ..Self::new(params)
        }
    }

    pub fn training(params: &'a ParamStore, dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Forward {
            dropout: (dropout > 0.0).then_some((dropout, rng)),
            ..Self::new(params)
        }
    }

    /// Record every attention-weight matrix produced from here on.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<Var> {
        self.trace.take().unwrap_or_default()
    }

    pub(crate) fn record_attention(&mut self, weights: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push(weights);
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.params.value(id).clone(), self.trainable);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let n = self.tape.value(x).len();
        let factor = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mul_const(x, factor)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take_raw(v)))
            .collect())
    }
}
