//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! oracle independent of every backward rule it checks.

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Magnitudes below this are treated as this value when forming relative errors.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Input (or parameter) index and the flat entry inside it.
    pub tensor: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck {
            checked: 0,
            max_relative_error: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, tensor: usize, entry: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = Some(Mismatch {
                tensor,
                entry,
                analytic,
                numeric,
            });
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a fresh tape.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck::new();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let (t, _, o) = run(&work)?;
            let plus = scalar_of(&t, o);
            work[i].data_mut()[k] = orig - h;
            let (t, _, o) = run(&work)?;
            let minus = scalar_of(&t, o);
            work[i].data_mut()[k] = orig;
            report.record(i, k, analytic[k], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every parameter in `store`.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    drop(tape);
    let mut report = GradCheck::new();
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = grads.param(id).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            let mut eval = |value: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = value;
                let mut tape = Tape::new();
                let o = f(&mut tape, &work)?;
                Ok(scalar_of(&tape, o))
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            work.get_mut(id).data_mut()[k] = orig;
            report.record(id.index(), k, analytic[k], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
