use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State for one forward pass: the tape it records on, the mode, the dropout
/// RNG and the batch-norm statistics to fold into running estimates.
pub struct Pass<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    mode: Mode,
    rng: Option<&'t mut ChaCha8Rng>,
    track_params: bool,
    bindings: Vec<Option<Var>>,
    stat_updates: Vec<(usize, BatchStats<T>)>,
}

impl<'t, T: Scalar> Pass<'t, T> {
    /// Training pass. Dropout is active only when an RNG is supplied.
    pub fn train(tape: &'t mut Tape<T>, rng: Option<&'t mut ChaCha8Rng>) -> Self {
        Self { tape, mode: Mode::Train, rng, track_params: true, bindings: Vec::new(), stat_updates: Vec::new() }
    }

    /// Inference pass: parameters enter the tape as constants.
    pub fn eval(tape: &'t mut Tape<T>) -> Self {
        Self { tape, mode: Mode::Eval, rng: None, track_params: false, bindings: Vec::new(), stat_updates: Vec::new() }
    }

    /// Eval-mode pass whose parameters still require gradients.
    pub fn eval_tracked(tape: &'t mut Tape<T>) -> Self {
        Self { track_params: true, ..Self::eval(tape) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Uses `var` for parameter `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: usize, var: Var) {
        if self.bindings.len() <= id {
            self.bindings.resize(id + 1, None);
        }
        self.bindings[id] = Some(var);
    }

    /// Tape node carrying `param`'s value, created on first use.
    pub fn param(&mut self, param: &Param<T>) -> Result<Var> {
        if let Some(Some(v)) = self.bindings.get(param.id) {
            return Ok(*v);
        }
        let var = self.tape.leaf(param.value.clone(), self.track_params)?;
        self.bind(param.id, var);
        Ok(var)
    }

    /// The tape node bound to parameter `id`, if the forward pass used it.
    pub fn binding(&self, id: usize) -> Option<Var> {
        self.bindings.get(id).copied().flatten()
    }

    pub(crate) fn record_stats(&mut self, slot: usize, stats: BatchStats<T>) {
        self.stat_updates.push((slot, stats));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(usize, BatchStats<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Inverted-dropout mask: zero with probability `rate`, `1/(1-rate)`
    /// otherwise. `None` when dropout is inactive for this pass.
    pub(crate) fn dropout_mask(&mut self, shape: &[usize], rate: f64) -> Option<Tensor<T>> {
        if self.mode != Mode::Train || rate == 0.0 {
            return None;
        }
        let rng = self.rng.as_deref_mut()?;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        Some(Tensor::new(shape.to_vec(), data).expect("mask shape"))
    }
}
