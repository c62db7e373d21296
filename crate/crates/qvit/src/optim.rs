//! Optimizers: LAMB (Adam moments plus a per-tensor trust ratio) and plain
//! Adam as the desk-scale fallback. Weight decay defaults to 0.

use serde::{Deserialize, Serialize};

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adam,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_OPT: f64 = 1e-6;
/// LAMB trust ratio is clamped to [0, 10]; tiny tensors (scalar gains,
/// step sizes) produce wild raw ratios otherwise.
pub const TRUST_CLAMP: f64 = 10.0;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    weight_decay: f64,
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, weight_decay: f64, param_count: usize) -> Self {
        OptimizerState {
            kind,
            weight_decay,
            moments: vec![None; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step. Parameters without a gradient entry stay put.
    pub fn step(
        &mut self,
        params: &mut [Parameter],
        grads: &GradientMap,
        lr: f64,
    ) -> Result<()> {
        if grads.has_non_finite() {
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, g)| g.has_non_finite())
                .map(|(i, _)| params.get(i).map(|p| p.name.as_str()).unwrap_or("?"))
                .collect();
            return Err(Error::Internal(format!(
                "non-finite gradient for parameters: {}",
                bad.join(", ")
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);

        for (idx, param) in params.iter_mut().enumerate() {
            let Some(grad) = grads.get(idx) else { continue };
            if grad.shape() != param.value.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    grad.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            let n = grad.numel();
            let moments = self.moments[idx].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });

            let w = param.value.data();
            let g = grad.data();
            let mut update = vec![0.0f64; n];
            for i in 0..n {
                moments.m[i] = BETA1 * moments.m[i] + (1.0 - BETA1) * g[i];
                moments.v[i] = BETA2 * moments.v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = moments.m[i] / bc1;
                let v_hat = moments.v[i] / bc2;
                update[i] = m_hat / (v_hat.sqrt() + EPS_OPT) + self.weight_decay * w[i];
            }

            let trust = match self.kind {
                OptimizerKind::Adam => 1.0,
                OptimizerKind::Lamb => {
                    let w_norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let u_norm = update.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if w_norm == 0.0 || u_norm == 0.0 {
                        1.0
                    } else {
                        (w_norm / u_norm).clamp(0.0, TRUST_CLAMP)
                    }
                }
            };

            let step = lr * trust;
            let new_data: Vec<f64> = w
                .iter()
                .zip(&update)
                .map(|(wi, ui)| wi - step * ui)
                .collect();
            param.value = Tensor::new(param.value.shape().to_vec(), new_data)?;
        }
        Ok(())
    }
}

/// Cosine decay to zero over `total_steps`, no warm-up.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let progress = (step.min(total_steps)) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so their global l2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut GradientMap, max_norm: f64) {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        let ids: Vec<usize> = grads.iter().map(|(i, _)| i).collect();
        for id in ids {
            let scaled = grads.get(id).unwrap().map(|v| v * scale);
            grads.insert(id, scaled);
        }
    }
}
