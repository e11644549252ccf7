//! Class weighting, the AdamW training loop and the on-disk checkpoint store.

mod adamw;
mod store;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{init_params, loss_and_grad, Mode, ModelConfig, ModelError, ModelParams};
use crate::seqdata::io::{dataset_fingerprint, grammar_fingerprint};
use crate::seqdata::Dataset;

pub use adamw::{adamw_update, AdamW, AdamWHyper};
pub use store::{read_manifest, 
    decode_snapshot, encode_snapshot, load_store, save_store, snapshot_file_name, CheckpointStore,
    EpochEntry, Manifest, Snapshot, StoreError, StoreWriter, MANIFEST_FILE, MANIFEST_FORMAT,
    SNAPSHOT_MAGIC,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("class {class} never appears in the training labels")]
    Coverage { class: usize },
    #[error("numeric failure at epoch {epoch}, step {step}: {message}")]
    Numeric { epoch: usize, step: u64, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self { alpha: vec![1.0; num_classes] }
    }
}

/// Inverse-frequency weights from raw counts, scaled so their mean is 1.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<ClassWeights> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::Coverage { class });
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(ClassWeights {
        alpha: inv.iter().map(|v| v / mean).collect(),
    })
}

pub fn compute_class_weights(ds: &Dataset) -> Result<ClassWeights> {
    class_weights_from_counts(&ds.class_counts())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub shuffle_seed: u64,
    pub checkpoint_stride: usize,
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            shuffle_seed: 0,
            checkpoint_stride: 1,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.checkpoint_stride == 0 {
            return bad("checkpoint_stride must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn snapshot_epochs(&self) -> Vec<usize> {
        (1..=self.epochs).filter(|e| e % self.checkpoint_stride == 0).collect()
    }
}

/// Rounds every parameter to f32 precision, which is what snapshots store.
pub fn round_to_f32(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for (_, mut t) in out.named_tensors_mut() {
        t.mapv_inplace(|v| v as f32 as f64);
    }
    out
}

pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    store_dir: &Path,
) -> Result<CheckpointStore> {
    train_with_progress(ds, model_cfg, train_cfg, Some(store_dir), |_, _| {})
}

/// Same as [`train`] but keeps snapshots in memory only.
pub fn train_in_memory(ds: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<CheckpointStore> {
    train_with_progress(ds, model_cfg, train_cfg, None, |_, _| {})
}

/// Runs the full loop. `on_epoch(epoch, mean_loss)` fires after every epoch.
/// When `store_dir` is given, each snapshot is written and the manifest
/// refreshed before the next epoch starts.
pub fn train_with_progress(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    store_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<CheckpointStore> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if ds.grammar.num_classes != model_cfg.num_classes || ds.grammar.feature_dim != model_cfg.feature_dim {
        return Err(TrainError::Config(format!(
            "dataset has {} classes and {} features, model expects {} and {}",
            ds.grammar.num_classes, ds.grammar.feature_dim, model_cfg.num_classes, model_cfg.feature_dim
        )));
    }
    let weights = compute_class_weights(ds)?;
    let manifest = Manifest::new(
        model_cfg.clone(),
        train_cfg.clone(),
        weights.clone(),
        dataset_fingerprint(ds),
        grammar_fingerprint(&ds.grammar),
    );
    let mut writer = store_dir.map(|d| StoreWriter::create(d, manifest.clone())).transpose()?;
    let mut store = CheckpointStore {
        manifest,
        snapshots: Vec::new(),
    };

    let mut params = init_params(model_cfg)?;
    let mut opt = AdamW::new(&params, AdamWHyper::from(train_cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.shuffle_seed);
    let mode = if train_cfg.dropout { Mode::Train } else { Mode::Eval };
    let mut order: Vec<usize> = (0..ds.samples.len()).collect();

    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &ds.samples[i];
            let step = opt.step_count() + 1;
            let (loss, grad) = loss_and_grad(&params, model_cfg, &s.frames, &s.labels, &weights.alpha, mode, &mut rng)
                .map_err(|e| match e {
                    ModelError::Numeric(m) => TrainError::Numeric { epoch, step, message: m },
                    other => other.into(),
                })?;
            if !loss.is_finite() {
                return Err(TrainError::Numeric {
                    epoch,
                    step,
                    message: format!("loss {loss} on {}", s.id),
                });
            }
            opt.step(&mut params, &grad).map_err(|e| match e {
                TrainError::Numeric { step, message, .. } => TrainError::Numeric { epoch, step, message },
                other => other,
            })?;
            total += loss;
        }
        let mean_loss = total / ds.samples.len() as f64;
        on_epoch(epoch, mean_loss);
        if epoch % train_cfg.checkpoint_stride == 0 {
            let snap = Snapshot {
                epoch,
                params: round_to_f32(&params),
                train_loss: mean_loss,
            };
            if let Some(w) = writer.as_mut() {
                w.append(&snap)?;
            }
            store.manifest.epochs.push(EpochEntry {
                epoch,
                file: snapshot_file_name(epoch),
                train_loss: mean_loss,
            });
            store.snapshots.push(snap);
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TemporalMode;
    use crate::seqdata::{generate_dataset, PhaseGrammar, Split};

    #[test]
    fn class_weight_examples() {
        let w = class_weights_from_counts(&[10, 30, 60]).unwrap().alpha;
        for (a, b) in w.iter().zip([2.0, 2.0 / 3.0, 1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = class_weights_from_counts(&[1, 99]).unwrap().alpha;
        assert!((w[0] - 1.98).abs() < 1e-12 && (w[1] - 0.02).abs() < 1e-12);
        assert_eq!(class_weights_from_counts(&[7, 7, 7]).unwrap().alpha, vec![1.0; 3]);
        assert!(matches!(class_weights_from_counts(&[3, 0, 2]), Err(TrainError::Coverage { class: 1 })));
    }

    #[test]
    fn weights_reverse_count_order() {
        let counts = [5, 17, 2, 40, 9];
        let w = class_weights_from_counts(&counts).unwrap().alpha;
        assert!((w.iter().sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
        for i in 0..5 {
            for j in 0..5 {
                if counts[i] < counts[j] {
                    assert!(w[i] > w[j]);
                }
            }
        }
    }

    fn small_setup() -> (Dataset, ModelConfig) {
        let g = PhaseGrammar::axis_aligned(3, 4, 4.0, 0.5, (4, 6), 0).unwrap();
        let ds = generate_dataset(&g, 4, Split::Train, 3).unwrap();
        let mut cfg = ModelConfig::new(4, 3, TemporalMode::Attention);
        cfg.hidden_dim = 8;
        cfg.head_dims = (6, 4);
        cfg.attention_dim = 4;
        (ds, cfg)
    }

    #[test]
    fn snapshot_epochs_follow_stride() {
        let (ds, cfg) = small_setup();
        let tc = TrainConfig { epochs: 5, ..Default::default() };
        let s = train_in_memory(&ds, &cfg, &tc).unwrap();
        assert_eq!(s.epochs(), vec![1, 2, 3, 4, 5]);
        let tc = TrainConfig { epochs: 10, checkpoint_stride: 2, ..Default::default() };
        let s = train_in_memory(&ds, &cfg, &tc).unwrap();
        assert_eq!(s.epochs(), vec![2, 4, 6, 8, 10]);
        assert_eq!(tc.snapshot_epochs(), vec![2, 4, 6, 8, 10]);
        let tc = TrainConfig { epochs: 7, checkpoint_stride: 3, ..Default::default() };
        assert_eq!(train_in_memory(&ds, &cfg, &tc).unwrap().snapshots.len(), 7 / 3);
    }

    #[test]
    fn training_reduces_loss_and_is_finite() {
        let (ds, cfg) = small_setup();
        let tc = TrainConfig { epochs: 30, learning_rate: 5e-3, ..Default::default() };
        let s = train_in_memory(&ds, &cfg, &tc).unwrap();
        let losses: Vec<f64> = s.snapshots.iter().map(|s| s.train_loss).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses[29] < losses[0]);
    }

    #[test]
    fn same_seed_same_snapshots() {
        let (ds, cfg) = small_setup();
        let tc = TrainConfig { epochs: 3, learning_rate: 1e-3, ..Default::default() };
        let a = train_in_memory(&ds, &cfg, &tc).unwrap();
        let b = train_in_memory(&ds, &cfg, &tc).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        let c = train_in_memory(&ds, &cfg, &TrainConfig { shuffle_seed: 1, ..tc }).unwrap();
        assert_ne!(a.snapshots[2].params, c.snapshots[2].params);
    }

    #[test]
    fn missing_class_is_reported() {
        let (mut ds, cfg) = small_setup();
        for s in &mut ds.samples {
            for y in &mut s.labels {
                if *y == 2 {
                    *y = 1;
                }
            }
        }
        let err = train_in_memory(&ds, &cfg, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::Coverage { class: 2 }));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { checkpoint_stride: 0, ..ok }.validate().is_err());
    }
}
