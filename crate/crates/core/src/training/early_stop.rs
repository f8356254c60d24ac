//! Patience-based early stopping on dev loss.

use serde::{Deserialize, Serialize};

/// What the trainer should do after an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; snapshot the parameters.
    Improved,
    Continue,
    Stop,
}

/// Tracks the best dev loss. Only a strict decrease counts as improvement,
/// so ties and NaN losses use up patience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    patience: usize,
    evaluations: usize,
    best: Option<(usize, f64)>,
    bad_streak: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            evaluations: 0,
            best: None,
            bad_streak: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.evaluations += 1;
        let improved = match self.best {
            None => !loss.is_nan(),
            Some((_, best)) => loss < best,
        };
        if improved {
            self.best = Some((self.evaluations, loss));
            self.bad_streak = 0;
            return StopDecision::Improved;
        }
        self.bad_streak += 1;
        if self.bad_streak >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// Number of evaluations observed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// 1-based evaluation index and loss of the best evaluation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Replays a loss sequence; returns the evaluation at which training stops
/// (or the sequence length) and the best evaluation index.
pub fn simulate(losses: &[f64], patience: usize) -> (usize, Option<usize>) {
    let mut es = EarlyStopping::new(patience);
    for &l in losses {
        if es.observe(l) == StopDecision::Stop {
            break;
        }
    }
    (es.evaluations(), es.best().map(|b| b.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_four_sequence() {
        let losses = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.1];
        assert_eq!(simulate(&losses, 4), (6, Some(2)));
    }

    #[test]
    fn patience_one_rising() {
        assert_eq!(simulate(&[1.0, 1.1, 0.5], 1), (2, Some(1)));
    }

    #[test]
    fn ties_do_not_improve() {
        assert_eq!(simulate(&[1.0, 1.0, 1.0], 2), (3, Some(1)));
    }

    #[test]
    fn nan_never_becomes_best() {
        let mut es = EarlyStopping::new(3);
        assert_eq!(es.observe(f64::NAN), StopDecision::Continue);
        assert_eq!(es.observe(2.0), StopDecision::Improved);
        assert_eq!(es.observe(f64::NAN), StopDecision::Continue);
        assert_eq!(es.best(), Some((2, 2.0)));
    }
}
