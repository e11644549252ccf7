//! Frame-level micro-AUC and segment-level error detection accuracy (EDA).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csl::{flag_percentile, frames_to_segments, percentile_count, CslProfile};
use crate::seqdata::Dataset;

pub const REPORT_FORMAT: &str = "csl-report/1";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC undefined: {positives} positive and {negatives} negative frames")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("EDA undefined: no ground-truth error segments")]
    UndefinedEda,
    #[error("{0}")]
    Shape(String),
    #[error("profiles do not match the dataset: {0}")]
    Join(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_inputs(scores: &[f64], gt: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != gt.len() {
        return Err(MetricsError::Shape(format!("{} scores for {} labels", scores.len(), gt.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::Shape("NaN score".into()));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::UndefinedAuc { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Probability that a random positive outscores a random negative, ties
/// counting half. Sort-based, `O(n log n)`.
pub fn micro_auc(scores: &[f64], gt: &[bool]) -> Result<f64> {
    let (p, n) = check_inputs(scores, gt)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled credit keeps every partial sum an integer
    let mut credit2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if gt[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        credit2 += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok(credit2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Explicit enumeration of every positive/negative pair.
pub fn auc_bruteforce(scores: &[f64], gt: &[bool]) -> Result<f64> {
    let (p, n) = check_inputs(scores, gt)?;
    let mut credit2: u128 = 0;
    for (&si, _) in scores.iter().zip(gt).filter(|(_, &g)| g) {
        for (&sj, _) in scores.iter().zip(gt).filter(|(_, &g)| !g) {
            credit2 += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(credit2 as f64 / (2.0 * p as f64 * n as f64))
}

/// Where the top-k% ranking for EDA is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdaPool {
    #[default]
    PerVideo,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalVideo {
    pub id: String,
    pub scores: Vec<f64>,
    pub gt_mask: Vec<bool>,
}

impl EvalVideo {
    pub fn gt_segments(&self) -> Vec<(usize, usize)> {
        frames_to_segments(&self.gt_mask, 1)
    }
}

/// Per-video `(gt_segments, detected_segments)` under top-k% flagging.
pub fn eda_counts(videos: &[EvalVideo], k_percent: f64, pool: EdaPool) -> Result<Vec<(usize, usize)>> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(MetricsError::Shape(format!("k_percent must lie in (0, 100], got {k_percent}")));
    }
    for v in videos {
        if v.scores.len() != v.gt_mask.len() {
            return Err(MetricsError::Shape(format!("video {}: score and mask lengths differ", v.id)));
        }
    }
    let flags: Vec<Vec<bool>> = match pool {
        EdaPool::PerVideo => videos.iter().map(|v| flag_percentile(&v.scores, k_percent)).collect(),
        EdaPool::Global => {
            let pooled: Vec<f64> = videos.iter().flat_map(|v| v.scores.iter().copied()).collect();
            let flat = flag_percentile(&pooled, k_percent);
            let mut it = flat.into_iter();
            videos.iter().map(|v| it.by_ref().take(v.scores.len()).collect()).collect()
        }
    };
    Ok(videos
        .iter()
        .zip(&flags)
        .map(|(v, f)| {
            let segs = v.gt_segments();
            let hit = segs.iter().filter(|&&(s, e)| f[s..e].iter().any(|&x| x)).count();
            (segs.len(), hit)
        })
        .collect())
}

/// Fraction of ground-truth error segments with at least one flagged frame.
pub fn eda(videos: &[EvalVideo], k_percent: f64, pool: EdaPool) -> Result<f64> {
    let counts = eda_counts(videos, k_percent, pool)?;
    let total: usize = counts.iter().map(|c| c.0).sum();
    if total == 0 {
        return Err(MetricsError::UndefinedEda);
    }
    Ok(counts.iter().map(|c| c.1).sum::<usize>() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub auc: Option<f64>,
    pub n_gt_segments: u32,
    pub n_detected: u32,
    pub frames: usize,
    pub corrupted_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub videos: usize,
    pub frames: usize,
    pub corrupted_frames: usize,
    pub gt_segments: usize,
    pub flagged_frames_per_video_top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub eda: Option<f64>,
    pub micro_auc: Option<f64>,
    pub k_percent: f64,
    pub eda_pool: EdaPool,
    pub per_video: Vec<VideoMetrics>,
    pub counts: ReportCounts,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let r: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if r.format != REPORT_FORMAT {
            return Err(format!("unsupported report format {:?}", r.format));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSettings {
    pub k_percent: f64,
    pub eda_pool: EdaPool,
    pub config: serde_json::Value,
}

/// Joins profiles to `ds` by id and scores smoothed CSL against the error
/// masks. Undefined metrics become `None` plus a warning.
pub fn build_report(profiles: &[CslProfile], ds: &Dataset, settings: &ReportSettings) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &CslProfile> = profiles.iter().map(|p| (p.video_id.as_str(), p)).collect();
    if by_id.len() != profiles.len() {
        return Err(MetricsError::Join("duplicate profile ids".into()));
    }
    let mut videos = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let p = by_id
            .get(s.id.as_str())
            .ok_or_else(|| MetricsError::Join(format!("no profile for video {}", s.id)))?;
        if p.smoothed.len() != s.len() {
            return Err(MetricsError::Join(format!(
                "video {}: profile has {} frames, dataset has {}",
                s.id,
                p.smoothed.len(),
                s.len()
            )));
        }
        videos.push(EvalVideo {
            id: s.id.clone(),
            scores: p.smoothed.clone(),
            gt_mask: s.error_mask.clone(),
        });
    }
    if profiles.len() != ds.samples.len() {
        let extra: Vec<&str> = profiles
            .iter()
            .filter(|p| ds.get(&p.video_id).is_none())
            .map(|p| p.video_id.as_str())
            .collect();
        return Err(MetricsError::Join(format!("profiles for unknown videos: {extra:?}")));
    }

    let mut warnings = Vec::new();
    let all_scores: Vec<f64> = videos.iter().flat_map(|v| v.scores.iter().copied()).collect();
    let all_gt: Vec<bool> = videos.iter().flat_map(|v| v.gt_mask.iter().copied()).collect();
    let micro = match micro_auc(&all_scores, &all_gt) {
        Ok(a) => Some(a),
        Err(e @ MetricsError::UndefinedAuc { .. }) => {
            warnings.push(format!("micro_auc: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let counts = eda_counts(&videos, settings.k_percent, settings.eda_pool)?;
    let gt_total: usize = counts.iter().map(|c| c.0).sum();
    let eda_value = if gt_total == 0 {
        warnings.push(format!("eda: {}", MetricsError::UndefinedEda));
        None
    } else {
        Some(counts.iter().map(|c| c.1).sum::<usize>() as f64 / gt_total as f64)
    };

    let per_video: Vec<VideoMetrics> = videos
        .iter()
        .zip(&counts)
        .map(|(v, &(n_gt, n_hit))| VideoMetrics {
            id: v.id.clone(),
            auc: micro_auc(&v.scores, &v.gt_mask).ok(),
            n_gt_segments: n_gt as u32,
            n_detected: n_hit as u32,
            frames: v.scores.len(),
            corrupted_frames: v.gt_mask.iter().filter(|&&g| g).count(),
        })
        .collect();

    Ok(MetricsReport {
        format: REPORT_FORMAT.to_string(),
        eda: eda_value,
        micro_auc: micro,
        k_percent: settings.k_percent,
        eda_pool: settings.eda_pool,
        counts: ReportCounts {
            videos: videos.len(),
            frames: all_scores.len(),
            corrupted_frames: all_gt.iter().filter(|&&g| g).count(),
            gt_segments: gt_total,
            flagged_frames_per_video_top_k: videos.iter().map(|v| percentile_count(v.scores.len(), settings.k_percent)).sum(),
        },
        per_video,
        warnings,
        config: settings.config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(micro_auc(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(auc_bruteforce(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(micro_auc(&[5.0, 1.0, 2.0], &b(&[1, 0, 0])).unwrap(), 1.0);
        assert_eq!(micro_auc(&[0.3; 6], &b(&[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        assert_eq!(auc_bruteforce(&[1.0, 0.0], &b(&[1, 0])).unwrap(), 1.0);
        assert_eq!(auc_bruteforce(&[0.0, 1.0], &b(&[1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn auc_undefined_for_single_class() {
        assert_eq!(
            micro_auc(&[1.0, 2.0], &b(&[0, 0])),
            Err(MetricsError::UndefinedAuc { positives: 0, negatives: 2 })
        );
        assert!(auc_bruteforce(&[1.0], &b(&[1])).is_err());
        assert!(micro_auc(&[1.0], &b(&[1, 0])).is_err());
    }

    fn video(gt: &[u8], hot: &[usize]) -> EvalVideo {
        let mut scores = vec![0.0; gt.len()];
        for &h in hot {
            scores[h] = 1.0 + h as f64;
        }
        EvalVideo {
            id: "v".into(),
            scores,
            gt_mask: b(gt),
        }
    }

    #[test]
    fn eda_examples() {
        let mut gt = vec![0u8; 20];
        for t in (0..5).chain(10..15) {
            gt[t] = 1;
        }
        // one of 20 frames flagged at k=5: frame 2, which lies in the first segment
        let v = video(&gt, &[2]);
        assert_eq!(eda(std::slice::from_ref(&v), 5.0, EdaPool::PerVideo).unwrap(), 0.5);
        assert_eq!(eda(&[v], 100.0, EdaPool::PerVideo).unwrap(), 1.0);
        assert_eq!(eda(&[video(&gt, &[7])], 5.0, EdaPool::PerVideo).unwrap(), 0.0);
        assert_eq!(eda(&[video(&[0, 0, 0], &[])], 50.0, EdaPool::PerVideo), Err(MetricsError::UndefinedEda));
    }

    #[test]
    fn global_pool_differs_from_per_video() {
        // video a has far higher scores, so a global top-10% starves video b
        let a = EvalVideo {
            id: "a".into(),
            scores: (0..10).map(|t| 100.0 + t as f64).collect(),
            gt_mask: b(&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1]),
        };
        let bv = EvalVideo {
            id: "b".into(),
            scores: (0..10).map(|t| t as f64).collect(),
            gt_mask: b(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 1]),
        };
        let vids = [a, bv];
        assert_eq!(eda(&vids, 10.0, EdaPool::PerVideo).unwrap(), 1.0);
        assert_eq!(eda(&vids, 10.0, EdaPool::Global).unwrap(), 0.5);
    }
}
