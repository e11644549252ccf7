//! Annotation-error injection.
//!
//! Two corruption kinds are supported. Mislabeling overwrites one contiguous
//! segment with a wrong class. Disordering swaps two adjacent phase blocks so
//! the annotation transcript runs out of canonical order.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_runs, Corruption, DataError, Dataset, Result, SequenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Mislabel,
    Disorder,
}

impl std::str::FromStr for CorruptionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mislabel" => Ok(Self::Mislabel),
            "disorder" => Ok(Self::Disorder),
            other => Err(DataError::Config(format!("unknown corruption kind `{other}`"))),
        }
    }
}

/// How a disordering swap treats frame content.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisorderMode {
    /// Swap whole blocks: frames travel with their labels, so every frame stays
    /// correctly labelled and only the phase order is wrong.
    #[default]
    SwapContent,
    /// Swap only the label blocks over unchanged frames.
    SwapLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub video_fraction: f64,
    pub segment_len_min: usize,
    pub segment_len_max: usize,
    pub seed: u64,
    #[serde(default)]
    pub disorder_mode: DisorderMode,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.video_fraction > 0.0 && self.video_fraction <= 1.0) {
            return Err(DataError::Config(format!(
                "video_fraction must lie in (0, 1], got {}",
                self.video_fraction
            )));
        }
        if self.kind == CorruptionKind::Mislabel
            && (self.segment_len_min < 1 || self.segment_len_min > self.segment_len_max)
        {
            return Err(DataError::Config(format!(
                "segment length range [{}, {}] is invalid",
                self.segment_len_min, self.segment_len_max
            )));
        }
        Ok(())
    }
}

fn ensure_clean(sample: &SequenceSample) -> Result<()> {
    if sample.corruption.is_some() {
        return Err(DataError::Usage(format!(
            "sample `{}` is already corrupted",
            sample.id
        )));
    }
    Ok(())
}

/// Relabels `[start, end)` as `to_class`.
pub fn apply_mislabel(
    sample: &SequenceSample,
    start: usize,
    end: usize,
    to_class: usize,
) -> Result<SequenceSample> {
    ensure_clean(sample)?;
    if start >= end || end > sample.len() {
        return Err(DataError::Usage(format!(
            "segment [{start}, {end}) outside sequence of length {}",
            sample.len()
        )));
    }
    let mut out = sample.clone();
    let from_class = sample.labels[start];
    for t in start..end {
        out.labels[t] = to_class;
        out.error_mask[t] = true;
    }
    out.corruption = Some(Corruption::Mislabel {
        start,
        end,
        from_class,
        to_class,
    });
    Ok(out)
}

pub fn inject_mislabeling<R: Rng>(
    sample: &SequenceSample,
    spec: &CorruptionSpec,
    num_classes: usize,
    rng: &mut R,
) -> Result<SequenceSample> {
    if spec.kind != CorruptionKind::Mislabel {
        return Err(DataError::Usage("spec kind is not mislabel".into()));
    }
    spec.validate()?;
    ensure_clean(sample)?;
    let t = sample.len();
    if t < spec.segment_len_min {
        return Err(DataError::TooShort {
            id: sample.id.clone(),
            reason: format!("length {t} below segment_len_min {}", spec.segment_len_min),
        });
    }
    let len = rng
        .gen_range(spec.segment_len_min..=spec.segment_len_max)
        .min(t);
    let start = rng.gen_range(0..=t - len);
    let from = sample.labels[start];
    // uniform over the C - 1 classes other than `from`
    let mut to = rng.gen_range(0..num_classes - 1);
    if to >= from {
        to += 1;
    }
    apply_mislabel(sample, start, start + len, to)
}

/// Swaps label run `pair` with run `pair + 1`.
pub fn apply_disorder(
    sample: &SequenceSample,
    pair: usize,
    mode: DisorderMode,
) -> Result<SequenceSample> {
    ensure_clean(sample)?;
    let runs = label_runs(&sample.labels);
    if runs.len() < 2 {
        return Err(DataError::TooShort {
            id: sample.id.clone(),
            reason: format!("{} label run(s), need at least 2", runs.len()),
        });
    }
    if pair + 1 >= runs.len() {
        return Err(DataError::Usage(format!(
            "run pair {pair} out of range for {} runs",
            runs.len()
        )));
    }
    let (a, b) = (runs[pair], runs[pair + 1]);
    // new order over [a.start, b.end): B's positions first, then A's
    let order: Vec<usize> = (b.start..b.end).chain(a.start..a.end).collect();

    let mut out = sample.clone();
    for (offset, &src) in order.iter().enumerate() {
        let dst = a.start + offset;
        out.labels[dst] = sample.labels[src];
        if mode == DisorderMode::SwapContent {
            out.frames.row_mut(dst).assign(&sample.frames.row(src));
        }
        out.error_mask[dst] = true;
    }
    out.corruption = Some(Corruption::Disorder {
        start_a: a.start,
        end_a: a.end,
        start_b: b.start,
        end_b: b.end,
    });
    Ok(out)
}

pub fn inject_disordering<R: Rng>(
    sample: &SequenceSample,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<SequenceSample> {
    if spec.kind != CorruptionKind::Disorder {
        return Err(DataError::Usage("spec kind is not disorder".into()));
    }
    spec.validate()?;
    let runs = label_runs(&sample.labels).len();
    if runs < 2 {
        return Err(DataError::TooShort {
            id: sample.id.clone(),
            reason: format!("{runs} label run(s), need at least 2"),
        });
    }
    let pair = rng.gen_range(0..runs - 1);
    apply_disorder(sample, pair, spec.disorder_mode)
}

/// Corrupts `round(video_fraction * N)` samples chosen without replacement.
pub fn corrupt_dataset(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = ds.samples.len();
    let count = ((spec.video_fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut out = ds.clone();
    for i in chosen {
        let sample = &ds.samples[i];
        out.samples[i] = match spec.kind {
            CorruptionKind::Mislabel => {
                inject_mislabeling(sample, spec, ds.grammar.num_classes, &mut rng)?
            }
            CorruptionKind::Disorder => inject_disordering(sample, spec, &mut rng)?,
        };
    }
    out.corruption = Some(spec.clone());
    Ok(out)
}
