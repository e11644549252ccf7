//! Synthetic phase-annotated sequences.
//!
//! A [`PhaseGrammar`] describes a procedure: every sequence walks through all
//! classes in `phase_order`, each phase lasting a random number of frames.
//! Frame features are the phase's class mean plus isotropic Gaussian noise,
//! with the first `boundary_blend` frames of each phase interpolating from
//! the previous phase's mean.
//!
//! Corruption (see [`corrupt`]) plants annotation errors with a ground-truth
//! mask, and [`io`] persists datasets as JSON Lines.

pub mod corrupt;
pub mod io;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corrupt::{
    corrupt_dataset, inject_disordering, inject_mislabeling, CorruptionKind, CorruptionSpec,
    DisorderMode,
};
pub use io::{read_dataset, write_dataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("sequence `{id}` too short: {reason}")]
    TooShort { id: String, reason: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error in sample `{id}`: {message}")]
    Schema { id: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrammar {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub feature_noise_sigma: f64,
    pub phase_order: Vec<usize>,
    pub duration_min: usize,
    pub duration_max: usize,
    pub boundary_blend: usize,
}

impl PhaseGrammar {
    /// Grammar whose class means sit on scaled coordinate axes, so every pair
    /// of means is exactly `separation` apart. Requires `feature_dim >= num_classes`.
    pub fn axis_aligned(
        num_classes: usize,
        feature_dim: usize,
        separation: f64,
        feature_noise_sigma: f64,
        duration: (usize, usize),
        boundary_blend: usize,
    ) -> Result<Self> {
        if feature_dim < num_classes {
            return Err(DataError::Config(format!(
                "axis-aligned means need feature_dim >= num_classes ({feature_dim} < {num_classes})"
            )));
        }
        let scale = separation / std::f64::consts::SQRT_2;
        let class_means = (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c] = scale;
                m
            })
            .collect();
        let grammar = Self {
            num_classes,
            feature_dim,
            class_means,
            feature_noise_sigma,
            phase_order: (0..num_classes).collect(),
            duration_min: duration.0,
            duration_max: duration.1,
            boundary_blend,
        };
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.duration_min < 1 || self.duration_min > self.duration_max {
            return bad(format!(
                "duration range [{}, {}] is invalid",
                self.duration_min, self.duration_max
            ));
        }
        if self.boundary_blend >= self.duration_min {
            return bad(format!(
                "boundary_blend ({}) must be below duration_min ({})",
                self.boundary_blend, self.duration_min
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return bad(format!("feature_noise_sigma {} invalid", self.feature_noise_sigma));
        }
        if self.class_means.len() != self.num_classes {
            return bad(format!(
                "expected {} class means, got {}",
                self.num_classes,
                self.class_means.len()
            ));
        }
        for (c, m) in self.class_means.iter().enumerate() {
            if m.len() != self.feature_dim {
                return bad(format!("class mean {c} has length {}", m.len()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return bad(format!("class mean {c} is not finite"));
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.class_means[a] == self.class_means[b] {
                    return bad(format!("class means {a} and {b} coincide"));
                }
            }
        }
        let mut seen = vec![false; self.num_classes];
        if self.phase_order.len() != self.num_classes {
            return bad("phase_order must list every class exactly once".into());
        }
        for &c in &self.phase_order {
            if c >= self.num_classes || seen[c] {
                return bad("phase_order must be a permutation of 0..C".into());
            }
            seen[c] = true;
        }
        Ok(())
    }

    /// Smallest pairwise distance between class means.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let d: f64 = self.class_means[a]
                    .iter()
                    .zip(&self.class_means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// True when the label runs visit classes in canonical phase order.
    pub fn is_order_consistent(&self, labels: &[usize]) -> bool {
        let mut rank = vec![0usize; self.num_classes];
        for (i, &c) in self.phase_order.iter().enumerate() {
            rank[c] = i;
        }
        label_runs(labels)
            .windows(2)
            .all(|w| rank[w[0].label] < rank[w[1].label])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Ground-truth record of what a corruption did to a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    Mislabel {
        start: usize,
        end: usize,
        from_class: usize,
        to_class: usize,
    },
    Disorder {
        start_a: usize,
        end_a: usize,
        start_b: usize,
        end_b: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    /// `T x d` frame features.
    pub frames: Array2<f64>,
    pub labels: Vec<usize>,
    pub error_mask: Vec<bool>,
    pub corruption: Option<Corruption>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, t: usize) -> Array1<f64> {
        self.frames.row(t).to_owned()
    }

    pub fn error_count(&self) -> usize {
        self.error_mask.iter().filter(|&&e| e).count()
    }

    /// Checks the structural invariants against a grammar's dimensions.
    pub fn validate(&self, grammar: &PhaseGrammar) -> Result<()> {
        let schema = |message: String| {
            Err(DataError::Schema {
                id: self.id.clone(),
                message,
            })
        };
        let t = self.frames.nrows();
        if self.labels.len() != t {
            return schema(format!(
                "labels length {} differs from frame count {t}",
                self.labels.len()
            ));
        }
        if self.error_mask.len() != t {
            return schema(format!(
                "error_mask length {} differs from frame count {t}",
                self.error_mask.len()
            ));
        }
        if self.frames.ncols() != grammar.feature_dim {
            return schema(format!(
                "frame width {} differs from feature_dim {}",
                self.frames.ncols(),
                grammar.feature_dim
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= grammar.num_classes) {
            return schema(format!("label {bad} outside 0..{}", grammar.num_classes));
        }
        if self.corruption.is_none() && self.error_mask.iter().any(|&e| e) {
            return schema("uncorrupted sample has a nonzero error mask".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grammar: PhaseGrammar,
    pub samples: Vec<SequenceSample>,
    pub split: Split,
    pub seed: u64,
    /// Spec of the corruption pass that produced this dataset, if any.
    pub corruption: Option<CorruptionSpec>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::Schema {
                    id: s.id.clone(),
                    message: "duplicate sample id".into(),
                });
            }
            s.validate(&self.grammar)?;
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.samples.iter().map(SequenceSample::len).sum()
    }

    /// Per-class label counts over all samples.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.grammar.num_classes];
        for s in &self.samples {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn get(&self, id: &str) -> Option<&SequenceSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// A maximal run of identical labels, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRun {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

pub fn label_runs(labels: &[usize]) -> Vec<LabelRun> {
    let mut runs: Vec<LabelRun> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.label == l => run.end = t + 1,
            _ => runs.push(LabelRun {
                label: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    runs
}

pub fn generate_dataset(
    grammar: &PhaseGrammar,
    n_videos: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    grammar.validate()?;
    if n_videos == 0 {
        return Err(DataError::Config("n_videos must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_videos)
        .map(|i| generate_sample(grammar, format!("{}-{i:04}", split.as_str()), &mut rng))
        .collect();
    Ok(Dataset {
        grammar: grammar.clone(),
        samples,
        split,
        seed,
        corruption: None,
    })
}

fn generate_sample(grammar: &PhaseGrammar, id: String, rng: &mut ChaCha8Rng) -> SequenceSample {
    let durations: Vec<usize> = grammar
        .phase_order
        .iter()
        .map(|_| rng.gen_range(grammar.duration_min..=grammar.duration_max))
        .collect();
    let total: usize = durations.iter().sum();
    let d = grammar.feature_dim;
    let noise = Normal::new(0.0, grammar.feature_noise_sigma).expect("sigma validated");

    let mut frames = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut t = 0;
    for (p, (&class, &dur)) in grammar.phase_order.iter().zip(&durations).enumerate() {
        let mean = &grammar.class_means[class];
        let prev = (p > 0).then(|| &grammar.class_means[grammar.phase_order[p - 1]]);
        for j in 0..dur {
            let mut row = frames.row_mut(t);
            match prev {
                Some(prev) if j < grammar.boundary_blend => {
                    let lambda = (j + 1) as f64 / (grammar.boundary_blend + 1) as f64;
                    for k in 0..d {
                        row[k] = prev[k] + lambda * (mean[k] - prev[k]);
                    }
                }
                _ => row.assign(&ndarray::ArrayView1::from(mean.as_slice())),
            }
            if grammar.feature_noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
            labels.push(class);
            t += 1;
        }
    }
    SequenceSample {
        id,
        frames,
        labels,
        error_mask: vec![false; total],
        corruption: None,
    }
}
