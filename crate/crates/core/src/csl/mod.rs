//! Per-frame loss trajectories, their mean over checkpoints (CSL), smoothing,
//! flagging and segment extraction.

mod audit;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use audit::{audit_dataset, audit_sequence, audit_with_trajectory, check_compatibility, eval_loss_trajectory, AuditRecord};

#[derive(Debug, Error)]
pub enum CslError {
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("sample {video_id} is incompatible with the checkpoint store (manifest dataset fingerprint {fingerprint}): {reason}")]
    Compatibility {
        video_id: String,
        fingerprint: String,
        reason: String,
    },
    #[error("curvature needs at least 3 epochs, trajectory has {epochs}")]
    InsufficientEpochs { epochs: usize },
    #[error("tau calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CslError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlagMode {
    Threshold { tau: f64 },
    Percentile { k_percent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditLoss {
    #[default]
    Unweighted,
    TrainWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub mode: FlagMode,
    pub window: usize,
    #[serde(default)]
    pub audit_loss: AuditLoss,
    pub min_segment_len: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            mode: FlagMode::Percentile { k_percent: 10.0 },
            window: 5,
            audit_loss: AuditLoss::Unweighted,
            min_segment_len: 1,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            FlagMode::Threshold { tau } if !tau.is_finite() => {
                Err(CslError::Config(format!("tau must be finite, got {tau}")))
            }
            FlagMode::Percentile { k_percent } if !(k_percent > 0.0 && k_percent <= 100.0) => {
                Err(CslError::Config(format!("k_percent must lie in (0, 100], got {k_percent}")))
            }
            _ => Ok(()),
        }
    }
}

/// `E x T` audit losses; row `e` belongs to `epochs[e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub video_id: String,
    pub epochs: Vec<usize>,
    #[serde(with = "matrix_rows")]
    pub losses: Array2<f64>,
}

impl LossTrajectory {
    pub fn num_epochs(&self) -> usize {
        self.losses.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.losses.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CslProfile {
    pub video_id: String,
    pub csl: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub window: usize,
    pub flags: Vec<bool>,
    pub segments: Vec<(usize, usize)>,
    pub mode: FlagMode,
}

impl CslProfile {
    pub fn len(&self) -> usize {
        self.csl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.csl.is_empty()
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Columnwise mean over epochs.
pub fn compute_csl(traj: &LossTrajectory) -> Vec<f64> {
    traj.losses
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}

/// Mean over `[t-w, t+w]` clipped to the sequence.
pub fn smooth_csl(csl: &[f64], w: usize) -> Vec<f64> {
    let n = csl.len();
    (0..n)
        .map(|t| {
            let win = &csl[t.saturating_sub(w)..(t + w + 1).min(n)];
            let mean = win.iter().sum::<f64>() / win.len() as f64;
            // rounding can push the mean an ulp outside the window range
            let lo = win.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = win.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mean.clamp(lo, hi)
        })
        .collect()
}

pub fn flag_threshold(smoothed: &[f64], tau: f64) -> Vec<bool> {
    smoothed.iter().map(|&s| s > tau).collect()
}

/// Number of frames flagged by top-k% selection over `len` frames.
pub fn percentile_count(len: usize, k_percent: f64) -> usize {
    if len == 0 {
        return 0;
    }
    // k·T/100 keeps integer products exact; the guard absorbs residual rounding
    let x = k_percent * len as f64 / 100.0;
    ((x - 1e-9).ceil().max(1.0) as usize).min(len)
}

/// Flags the `ceil(k/100·T)` highest frames, lower index first among ties.
pub fn flag_percentile(smoothed: &[f64], k_percent: f64) -> Vec<bool> {
    let m = percentile_count(smoothed.len(), k_percent);
    let mut order: Vec<usize> = (0..smoothed.len()).collect();
    order.sort_by(|&a, &b| smoothed[b].total_cmp(&smoothed[a]).then(a.cmp(&b)));
    let mut flags = vec![false; smoothed.len()];
    for &i in &order[..m] {
        flags[i] = true;
    }
    flags
}

pub fn apply_mode(smoothed: &[f64], mode: FlagMode) -> Vec<bool> {
    match mode {
        FlagMode::Threshold { tau } => flag_threshold(smoothed, tau),
        FlagMode::Percentile { k_percent } => flag_percentile(smoothed, k_percent),
    }
}

/// Linear-interpolation quantile of a non-empty pool.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CslError::Calibration("empty value pool".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(CslError::Calibration(format!("quantile must lie in (0, 1), got {q}")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(CslError::Calibration(format!("non-finite value {v} in pool")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// `q`-quantile of smoothed CSL pooled over every frame of `validation`.
pub fn calibrate_tau(validation: &[CslProfile], q: f64) -> Result<f64> {
    let pool: Vec<f64> = validation.iter().flat_map(|p| p.smoothed.iter().copied()).collect();
    quantile(&pool, q)
}

/// Maximal runs of `true` as half-open ranges, dropping runs shorter than
/// `min_len`.
pub fn frames_to_segments(flags: &[bool], min_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_len {
                    out.push((s, t));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Mean absolute second difference over epochs, per frame.
pub fn trajectory_curvature(traj: &LossTrajectory) -> Result<Vec<f64>> {
    let e = traj.num_epochs();
    if e < 3 {
        return Err(CslError::InsufficientEpochs { epochs: e });
    }
    let l = &traj.losses;
    Ok((0..traj.num_frames())
        .map(|t| {
            (1..e - 1)
                .map(|i| (l[[i + 1, t]] - 2.0 * l[[i, t]] + l[[i - 1, t]]).abs())
                .sum::<f64>()
                / (e - 2) as f64
        })
        .collect())
}

/// Everything downstream of the trajectory: CSL, smoothing, flags, segments.
pub fn profile_from_trajectory(traj: &LossTrajectory, cfg: &DetectionConfig) -> Result<CslProfile> {
    cfg.validate()?;
    let csl = compute_csl(traj);
    let smoothed = smooth_csl(&csl, cfg.window);
    let flags = apply_mode(&smoothed, cfg.mode);
    let segments = frames_to_segments(&flags, cfg.min_segment_len);
    Ok(CslProfile {
        video_id: traj.video_id.clone(),
        csl,
        smoothed,
        window: cfg.window,
        flags,
        segments,
        mode: cfg.mode,
    })
}

mod matrix_rows {
    use ndarray::Array2;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), cols), flat).map_err(D::Error::custom)
    }
}
