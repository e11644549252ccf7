use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{profile_from_trajectory, AuditLoss, CslError, CslProfile, DetectionConfig, LossTrajectory, Result};
use crate::model::forward_eval;
use crate::seqdata::io::grammar_fingerprint;
use crate::seqdata::{Dataset, SequenceSample};
use crate::trainer::CheckpointStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub trajectory: LossTrajectory,
    pub profile: CslProfile,
}

fn incompatible(store: &CheckpointStore, id: &str, reason: String) -> CslError {
    CslError::Compatibility {
        video_id: id.to_string(),
        fingerprint: store.manifest.dataset_fingerprint.clone(),
        reason,
    }
}

/// Checks that `sample` can be scored by the store's model.
pub fn check_compatibility(store: &CheckpointStore, sample: &SequenceSample) -> Result<()> {
    let cfg = store.model_config();
    if store.is_empty() {
        return Err(incompatible(store, &sample.id, "store holds no snapshots".into()));
    }
    if sample.frames.ncols() != cfg.feature_dim {
        return Err(incompatible(
            store,
            &sample.id,
            format!("{} features per frame, model expects {}", sample.frames.ncols(), cfg.feature_dim),
        ));
    }
    if sample.frames.nrows() != sample.labels.len() || sample.labels.is_empty() {
        return Err(incompatible(store, &sample.id, "frame and label counts disagree or are zero".into()));
    }
    if let Some(&y) = sample.labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(incompatible(
            store,
            &sample.id,
            format!("label {y} outside the model's {} classes", cfg.num_classes),
        ));
    }
    Ok(())
}

/// One eval-mode forward per snapshot; row `e` holds the per-frame losses of
/// snapshot `e` against the annotated labels.
pub fn eval_loss_trajectory(store: &CheckpointStore, sample: &SequenceSample, cfg: &DetectionConfig) -> Result<LossTrajectory> {
    check_compatibility(store, sample)?;
    let model = store.model_config();
    let alpha = match cfg.audit_loss {
        AuditLoss::Unweighted => vec![1.0; model.num_classes],
        AuditLoss::TrainWeighted => store.manifest.class_weights.alpha.clone(),
    };
    let t_len = sample.len();
    let mut losses = Array2::zeros((store.len(), t_len));
    for (e, snap) in store.snapshots.iter().enumerate() {
        let trace = forward_eval(&snap.params, model, &sample.frames)?;
        let row = trace.frame_losses(&sample.labels, &alpha)?;
        losses.row_mut(e).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(LossTrajectory {
        video_id: sample.id.clone(),
        epochs: store.epochs(),
        losses,
    })
}

pub fn audit_with_trajectory(store: &CheckpointStore, sample: &SequenceSample, cfg: &DetectionConfig) -> Result<AuditRecord> {
    let trajectory = eval_loss_trajectory(store, sample, cfg)?;
    let profile = profile_from_trajectory(&trajectory, cfg)?;
    Ok(AuditRecord { trajectory, profile })
}

pub fn audit_sequence(store: &CheckpointStore, sample: &SequenceSample, cfg: &DetectionConfig) -> Result<CslProfile> {
    audit_with_trajectory(store, sample, cfg).map(|r| r.profile)
}

/// Audits every sample of `ds` on up to `workers` threads. Records come back
/// in dataset order whatever the schedule.
pub fn audit_dataset(store: &CheckpointStore, ds: &Dataset, cfg: &DetectionConfig, workers: usize) -> Result<Vec<AuditRecord>> {
    cfg.validate()?;
    let train_grammar = &store.manifest.grammar_fingerprint;
    let here = grammar_fingerprint(&ds.grammar);
    if &here != train_grammar {
        return Err(CslError::Compatibility {
            video_id: ds.samples.first().map(|s| s.id.clone()).unwrap_or_default(),
            fingerprint: store.manifest.dataset_fingerprint.clone(),
            reason: format!("dataset grammar fingerprint {here} differs from training grammar {train_grammar}"),
        });
    }
    if workers <= 1 {
        return ds.samples.iter().map(|s| audit_with_trajectory(store, s, cfg)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CslError::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| ds.samples.par_iter().map(|s| audit_with_trajectory(store, s, cfg)).collect())
}
