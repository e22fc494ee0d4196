//! Adam with bias correction and global-norm gradient clipping.

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Parameters;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling; `<= 0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

/// First/second moment estimates per trainable tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub(crate) fn step(
        &mut self,
        params: &mut Parameters,
        grads: &IndexMap<String, ArrayD<f64>>,
        hyper: &TrainHyper,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (name, grad) in grads {
            let tensor = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown tensor {name}"));
            debug_assert!(tensor.trainable, "gradient for frozen tensor {name}");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            m.zip_mut_with(grad, |mi, gi| *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi);
            v.zip_mut_with(grad, |vi, gi| {
                *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi
            });
            ndarray::Zip::from(&mut tensor.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
                });
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `clip`.
pub(crate) fn clip_global_norm(grads: &mut IndexMap<String, ArrayD<f64>>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let sq_sum: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq_sum.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            *g *= scale;
        }
    }
}
