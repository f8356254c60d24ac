//! Small building blocks shared by both classifiers.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Dropout state for one forward pass: `Some(rng)` means training mode.
pub struct Dropout<'r> {
    pub ratio: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Dropout { ratio: 0.0, rng: None }
    }

    pub fn train(ratio: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { ratio, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, self.ratio, true, rng),
            None => Ok(x),
        }
    }
}

/// Puts a parameter on the tape, as a constant when `frozen`.
pub(crate) fn param(tape: &mut Tape, store: &ParamStore, id: ParamId, frozen: bool) -> Var {
    if frozen {
        tape.frozen_param(store, id)
    } else {
        tape.param(store, id)
    }
}

/// `x · weight + bias` with the bias broadcast over rows.
pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
    let w = tape.param(store, weight);
    let b = tape.param(store, bias);
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Summed negative log-likelihood of gold classes over a batch of
/// probability rows: `-Σ_i log p[i, gold_i]`.
pub fn nll_loss(tape: &mut Tape, probs: Var, gold: &[usize]) -> Result<Var> {
    tape.nll(probs, gold)
}
