//! Frame classifier with hand-written backpropagation.
//!
//! ```text
//! h_t  = ReLU(W_enc x_t + b_enc)
//! h'_t = h_t                                   (context-free)
//! h'_t = g_t + W_o Σ_s softmax_s(q_t·k_s/√a) v_s,  g_t = h_t + PE(t)   (attention)
//! z_t  = W_3 σ(LN(W_2 σ(LN(W_1 h'_t + b_1)) + b_2)) + b_3
//! ```
//!
//! with q, k, v projected from a LayerNorm of `g`. Dropout follows each hidden
//! activation of the head in train mode.

mod net;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use net::{
    backward, forward, forward_eval, loss_and_grad, positional_encoding, ForwardTrace, Mode,
};


pub const LN_EPS: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("label {label} out of range for {num_classes} classes")]
    Index { label: usize, num_classes: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    ContextFree,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub head_dims: (usize, usize),
    pub num_classes: usize,
    pub temporal_mode: TemporalMode,
    pub attention_dim: usize,
    pub dropout_rates: (f64, f64),
    pub init_seed: u64,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, num_classes: usize, temporal_mode: TemporalMode) -> Self {
        Self {
            feature_dim,
            hidden_dim: 32,
            head_dims: (16, 8),
            num_classes,
            temporal_mode,
            attention_dim: 16,
            dropout_rates: (0.5, 0.3),
            init_seed: 0,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("head_dims.0", self.head_dims.0),
            ("head_dims.1", self.head_dims.1),
            ("num_classes", self.num_classes),
            ("attention_dim", self.attention_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be >= 1")));
        }
        for r in [self.dropout_rates.0, self.dropout_rates.1] {
            if !(0.0..1.0).contains(&r) {
                return Err(ModelError::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config(format!("init_scale {} must be positive", self.init_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    fn identity(n: usize) -> Self {
        Self {
            gain: Array1::ones(n),
            bias: Array1::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub norm: LayerNormParams,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
    pub attention: Option<AttentionParams>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub ln1: LayerNormParams,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2: LayerNormParams,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl ModelParams {
    /// Tensors in canonical order with stable names. Rank-2 tensors are the
    /// weight matrices; everything else is a bias or LayerNorm parameter.
    pub fn named_tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("enc.weight", self.enc_w.view().into_dyn()),
            ("enc.bias", self.enc_b.view().into_dyn()),
        ];
        if let Some(a) = &self.attention {
            out.extend([
                ("attn.norm.gain", a.norm.gain.view().into_dyn()),
                ("attn.norm.bias", a.norm.bias.view().into_dyn()),
                ("attn.query", a.query.view().into_dyn()),
                ("attn.key", a.key.view().into_dyn()),
                ("attn.value", a.value.view().into_dyn()),
                ("attn.output", a.output.view().into_dyn()),
            ]);
        }
        out.extend([
            ("head.fc1.weight", self.w1.view().into_dyn()),
            ("head.fc1.bias", self.b1.view().into_dyn()),
            ("head.ln1.gain", self.ln1.gain.view().into_dyn()),
            ("head.ln1.bias", self.ln1.bias.view().into_dyn()),
            ("head.fc2.weight", self.w2.view().into_dyn()),
            ("head.fc2.bias", self.b2.view().into_dyn()),
            ("head.ln2.gain", self.ln2.gain.view().into_dyn()),
            ("head.ln2.bias", self.ln2.bias.view().into_dyn()),
            ("head.fc3.weight", self.w3.view().into_dyn()),
            ("head.fc3.bias", self.b3.view().into_dyn()),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("enc.weight", self.enc_w.view_mut().into_dyn()),
            ("enc.bias", self.enc_b.view_mut().into_dyn()),
        ];
        if let Some(a) = &mut self.attention {
            out.extend([
                ("attn.norm.gain", a.norm.gain.view_mut().into_dyn()),
                ("attn.norm.bias", a.norm.bias.view_mut().into_dyn()),
                ("attn.query", a.query.view_mut().into_dyn()),
                ("attn.key", a.key.view_mut().into_dyn()),
                ("attn.value", a.value.view_mut().into_dyn()),
                ("attn.output", a.output.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("head.fc1.weight", self.w1.view_mut().into_dyn()),
            ("head.fc1.bias", self.b1.view_mut().into_dyn()),
            ("head.ln1.gain", self.ln1.gain.view_mut().into_dyn()),
            ("head.ln1.bias", self.ln1.bias.view_mut().into_dyn()),
            ("head.fc2.weight", self.w2.view_mut().into_dyn()),
            ("head.fc2.bias", self.b2.view_mut().into_dyn()),
            ("head.ln2.gain", self.ln2.gain.view_mut().into_dyn()),
            ("head.ln2.bias", self.ln2.bias.view_mut().into_dyn()),
            ("head.fc3.weight", self.w3.view_mut().into_dyn()),
            ("head.fc3.bias", self.b3.view_mut().into_dyn()),
        ]);
        out
    }

    /// All-zero tensors shaped like `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, (h1, h2), c, a) = (
            cfg.feature_dim,
            cfg.hidden_dim,
            cfg.head_dims,
            cfg.num_classes,
            cfg.attention_dim,
        );
        let zln = |n| LayerNormParams {
            gain: Array1::zeros(n),
            bias: Array1::zeros(n),
        };
        Self {
            enc_w: Array2::zeros((h, d)),
            enc_b: Array1::zeros(h),
            attention: (cfg.temporal_mode == TemporalMode::Attention).then(|| AttentionParams {
                norm: zln(h),
                query: Array2::zeros((a, h)),
                key: Array2::zeros((a, h)),
                value: Array2::zeros((a, h)),
                output: Array2::zeros((h, a)),
            }),
            w1: Array2::zeros((h1, h)),
            b1: Array1::zeros(h1),
            ln1: zln(h1),
            w2: Array2::zeros((h2, h1)),
            b2: Array1::zeros(h2),
            ln2: zln(h2),
            w3: Array2::zeros((c, h2)),
            b3: Array1::zeros(c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.named_tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        let have = self.named_tensors();
        let expected = want.named_tensors();
        if have.len() != expected.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                have.len()
            )));
        }
        for ((name, t), (_, e)) in have.iter().zip(&expected) {
            if t.shape() != e.shape() {
                return Err(ModelError::Shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Weights uniform in ±init_scale/√fan_in, biases zero, LayerNorm gains one.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut weight = |rows: usize, cols: usize| {
        let bound = cfg.init_scale / (cols as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
    };
    let (d, h, (h1, h2), c, a) = (
        cfg.feature_dim,
        cfg.hidden_dim,
        cfg.head_dims,
        cfg.num_classes,
        cfg.attention_dim,
    );
    let enc_w = weight(h, d);
    let attention = match cfg.temporal_mode {
        TemporalMode::ContextFree => None,
        TemporalMode::Attention => Some(AttentionParams {
            norm: LayerNormParams::identity(h),
            query: weight(a, h),
            key: weight(a, h),
            value: weight(a, h),
            output: weight(h, a),
        }),
    };
    Ok(ModelParams {
        enc_w,
        enc_b: Array1::zeros(h),
        attention,
        w1: weight(h1, h),
        b1: Array1::zeros(h1),
        ln1: LayerNormParams::identity(h1),
        w2: weight(h2, h1),
        b2: Array1::zeros(h2),
        ln2: LayerNormParams::identity(h2),
        w3: weight(c, h2),
        b3: Array1::zeros(c),
    })
}

/// `alpha[label] * -ln(max(p[label], 1e-12))`.
pub fn weighted_ce(probs_row: &[f64], label: usize, alpha: &[f64]) -> Result<f64> {
    if label >= probs_row.len() || label >= alpha.len() {
        return Err(ModelError::Index {
            label,
            num_classes: probs_row.len(),
        });
    }
    Ok(alpha[label] * -probs_row[label].max(PROB_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_follows_rules() {
        for mode in [TemporalMode::ContextFree, TemporalMode::Attention] {
            let cfg = ModelConfig::new(16, 6, mode);
            let a = init_params(&cfg).unwrap();
            let b = init_params(&cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.attention.is_some(), mode == TemporalMode::Attention);
            for (name, t) in a.named_tensors() {
                if name.ends_with(".bias") {
                    assert!(t.iter().all(|&v| v == 0.0), "{name}");
                } else if name.ends_with(".gain") {
                    assert!(t.iter().all(|&v| v == 1.0), "{name}");
                } else {
                    let fan_in = t.shape()[1] as f64;
                    let bound = cfg.init_scale / fan_in.sqrt();
                    assert!(t.iter().all(|&v| v.abs() <= bound), "{name}");
                    assert!(t.iter().any(|&v| v != 0.0), "{name}");
                }
            }
            a.check_shapes(&cfg).unwrap();
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut cfg = ModelConfig::new(4, 3, TemporalMode::ContextFree);
        let a = init_params(&cfg).unwrap();
        cfg.init_seed = 1;
        assert_ne!(a, init_params(&cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(4, 3, TemporalMode::ContextFree);
        cfg.dropout_rates = (1.0, 0.0);
        assert!(init_params(&cfg).is_err());
        let mut cfg = ModelConfig::new(4, 3, TemporalMode::ContextFree);
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weighted_ce_values() {
        let uniform = [0.25; 4];
        let ce = weighted_ce(&uniform, 2, &[1.0; 4]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);
        assert_eq!(weighted_ce(&[0.0, 1.0], 1, &[1.0, 1.0]).unwrap(), 0.0);
        let ce = weighted_ce(&[0.5, 0.5], 0, &[2.0, 1.0]).unwrap();
        assert!((ce - 2.0 * 2f64.ln()).abs() < 1e-12);
        // clamped at 1e-12
        let ce = weighted_ce(&[1.0, 0.0], 1, &[1.0, 1.0]).unwrap();
        assert!((ce - 12.0 * 10f64.ln()).abs() < 1e-9);
        assert!(matches!(
            weighted_ce(&uniform, 4, &[1.0; 4]),
            Err(ModelError::Index { label: 4, .. })
        ));
    }

    #[test]
    fn unit_weights_give_plain_cross_entropy() {
        let p = [0.1, 0.6, 0.3];
        for y in 0..3 {
            assert_eq!(weighted_ce(&p, y, &[1.0; 3]).unwrap(), -p[y].ln());
        }
    }
}
