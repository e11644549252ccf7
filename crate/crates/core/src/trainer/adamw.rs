//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ·(1 − lr·λ)                  (weight matrices only)
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! θ ← θ − lr·m̂ / (√v̂ + ε),   m̂ = m/(1 − β1^t),  v̂ = v/(1 − β2^t)
//! ```

use ndarray::{ArrayD, Zip};

use super::{TrainConfig, TrainError};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Updates one flat tensor in place. `step` is 1-based.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hp: &AdamWHyper,
    decay: bool,
) {
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let shrink = if decay { 1.0 - hp.learning_rate * hp.weight_decay } else { 1.0 };
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *p *= shrink;
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Optimizer state shadowing every tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, hyper: AdamWHyper) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            hyper,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Fails without touching `params` if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<(), TrainError> {
        let grads = grads.named_tensors();
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Numeric {
                epoch: 0,
                step: self.step + 1,
                message: format!("non-finite gradient in {name}"),
            });
        }
        self.step += 1;
        let hp = self.hyper;
        let t = self.step;
        for (((_, mut p), (_, g)), (m, v)) in params
            .named_tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            // rank-2 tensors are weight matrices; biases and LayerNorm params skip decay
            let decay = p.ndim() == 2;
            let shrink = if decay { 1.0 - hp.learning_rate * hp.weight_decay } else { 1.0 };
            let bc1 = 1.0 - hp.beta1.powi(t as i32);
            let bc2 = 1.0 - hp.beta2.powi(t as i32);
            Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= shrink;
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                *p -= hp.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + hp.eps);
            });
        }
        Ok(())
    }
}
