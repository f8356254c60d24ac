//! Adam and global-norm gradient clipping over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates, one buffer pair per parameter.
///
/// Parameters that have never received a gradient keep empty buffers and
/// are skipped by [`Adam::step`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            step: 0,
            m: vec![Vec::new(); store.len()],
            v: vec![Vec::new(); store.len()],
        }
    }

    /// One bias-corrected update. `grads[i] = None` leaves parameter `i`
    /// and its moments untouched (frozen or unused this step).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != store.get(id).len() {
                    return Err(Error::Contract(format!(
                        "gradient for {} has {} entries, expected {}",
                        store.name(id),
                        g.len(),
                        store.get(id).len()
                    )));
                }
                if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient {} at entry {bad} of parameter {}",
                        g[bad],
                        store.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every present gradient.
pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `threshold / norm` when the global norm exceeds
/// `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Vec<f64>>], threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
