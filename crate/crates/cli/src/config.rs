//! The TOML run configuration. Every section has defaults, so an empty file
//! describes the reference benchmark.

use std::path::{Path, PathBuf};

use csl_core::csl::{AuditLoss, DetectionConfig, FlagMode};
use csl_core::metrics::EdaPool;
use csl_core::model::{ModelConfig, TemporalMode};
use csl_core::seqdata::{CorruptionKind, CorruptionSpec, DisorderMode, PhaseGrammar, Split};
use csl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub grammar: GrammarSection,
    pub generate: GenerateSection,
    pub corruption: CorruptionSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub detection: DetectionSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            grammar: GrammarSection::default(),
            generate: GenerateSection::default(),
            corruption: CorruptionSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            detection: DetectionSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Axis-aligned class means at the given pairwise separation unless
/// `class_means` spells them out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarSection {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub feature_noise_sigma: f64,
    pub duration_min: usize,
    pub duration_max: usize,
    pub boundary_blend: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_means: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_order: Option<Vec<usize>>,
}

impl Default for GrammarSection {
    fn default() -> Self {
        Self {
            num_classes: 6,
            feature_dim: 16,
            separation: 4.0,
            feature_noise_sigma: 1.0,
            duration_min: 15,
            duration_max: 25,
            boundary_blend: 2,
            class_means: None,
            phase_order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { train: 40, val: 10, test: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub kind: CorruptionKind,
    pub video_fraction: f64,
    pub split: Split,
    pub segment_len_min: usize,
    pub segment_len_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub disorder_mode: DisorderMode,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::Mislabel,
            video_fraction: 0.5,
            split: Split::Test,
            segment_len_min: 10,
            segment_len_max: 25,
            seed: None,
            disorder_mode: DisorderMode::SwapContent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub temporal_mode: TemporalMode,
    pub hidden_dim: usize,
    pub head_dims: (usize, usize),
    pub attention_dim: usize,
    pub dropout_rates: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            temporal_mode: TemporalMode::Attention,
            hidden_dim: 32,
            head_dims: (16, 8),
            attention_dim: 16,
            dropout_rates: (0.5, 0.3),
            init_seed: None,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
    pub checkpoint_stride: usize,
    pub dropout: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            shuffle_seed: None,
            checkpoint_stride: t.checkpoint_stride,
            dropout: t.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    Percentile,
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    pub mode: FlagKind,
    pub k_percent: f64,
    /// Fixed threshold; when absent in threshold mode, tau is calibrated on the
    /// validation split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub calibration_quantile: f64,
    pub window: usize,
    pub audit_loss: AuditLoss,
    pub min_segment_len: usize,
    pub eda_k_percent: f64,
    pub eda_pool: EdaPool,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self {
            mode: FlagKind::Percentile,
            k_percent: 10.0,
            tau: None,
            calibration_quantile: 0.95,
            window: 5,
            audit_loss: AuditLoss::Unweighted,
            min_segment_len: 1,
            eda_k_percent: 10.0,
            eda_pool: EdaPool::PerVideo,
        }
    }
}

/// Relative paths resolve against `root`, which `--out` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Where this run lives on disk; left out of echoed configs so outputs do
    /// not depend on the checkout location.
    #[serde(skip_serializing)]
    pub root: PathBuf,
    pub data: PathBuf,
    pub store: PathBuf,
    pub out: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub audit: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            data: PathBuf::from("data"),
            store: PathBuf::from("store"),
            out: PathBuf::from("out"),
            train: PathBuf::from("data/train.jsonl"),
            val: PathBuf::from("data/val.jsonl"),
            audit: PathBuf::from("data/test.jsonl"),
        }
    }
}

impl PathsSection {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split_file(&self, split: Split) -> PathBuf {
        self.resolve(&self.data.join(format!("{}.jsonl", split.as_str())))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.grammar().map_err(|e| cfg_err(&e))?;
        self.model_config().validate().map_err(|e| cfg_err(&e))?;
        self.train_config().validate().map_err(|e| cfg_err(&e))?;
        self.corruption_spec(None, None).validate().map_err(|e| cfg_err(&e))?;
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let d = &self.detection;
        if !(d.calibration_quantile > 0.0 && d.calibration_quantile < 1.0) {
            return Err(CliError::Config("calibration_quantile must lie in (0, 1)".into()));
        }
        if !(d.eda_k_percent > 0.0 && d.eda_k_percent <= 100.0) {
            return Err(CliError::Config("eda_k_percent must lie in (0, 100]".into()));
        }
        if d.min_segment_len == 0 {
            return Err(CliError::Config("min_segment_len must be at least 1".into()));
        }
        let probe = self.detection_config(d.tau.unwrap_or(0.0));
        probe.validate().map_err(|e| cfg_err(&e))?;
        Ok(())
    }

    pub fn grammar(&self) -> Result<PhaseGrammar, CliError> {
        let g = &self.grammar;
        let mut grammar = PhaseGrammar::axis_aligned(
            g.num_classes,
            g.feature_dim,
            g.separation,
            g.feature_noise_sigma,
            (g.duration_min, g.duration_max),
            g.boundary_blend,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(means) = &g.class_means {
            grammar.class_means = means.clone();
        }
        if let Some(order) = &g.phase_order {
            grammar.phase_order = order.clone();
        }
        grammar.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(grammar)
    }

    /// Seed for generating `split`; splits draw from disjoint streams.
    pub fn split_seed(&self, split: Split) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        self.seed.wrapping_mul(1000).wrapping_add(offset)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            feature_dim: self.grammar.feature_dim,
            hidden_dim: m.hidden_dim,
            head_dims: m.head_dims,
            num_classes: self.grammar.num_classes,
            temporal_mode: m.temporal_mode,
            attention_dim: m.attention_dim,
            dropout_rates: m.dropout_rates,
            init_seed: m.init_seed.unwrap_or(self.seed),
            init_scale: m.init_scale,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            shuffle_seed: t.shuffle_seed.unwrap_or(self.seed),
            checkpoint_stride: t.checkpoint_stride,
            dropout: t.dropout,
        }
    }

    pub fn corruption_spec(&self, kind: Option<CorruptionKind>, fraction: Option<f64>) -> CorruptionSpec {
        let c = &self.corruption;
        CorruptionSpec {
            kind: kind.unwrap_or(c.kind),
            video_fraction: fraction.unwrap_or(c.video_fraction),
            segment_len_min: c.segment_len_min,
            segment_len_max: c.segment_len_max,
            seed: c.seed.unwrap_or(self.seed.wrapping_mul(1000).wrapping_add(3)),
            disorder_mode: c.disorder_mode,
        }
    }

    pub fn detection_config(&self, tau: f64) -> DetectionConfig {
        let d = &self.detection;
        DetectionConfig {
            mode: match d.mode {
                FlagKind::Percentile => FlagMode::Percentile { k_percent: d.k_percent },
                FlagKind::Threshold => FlagMode::Threshold { tau },
            },
            window: d.window,
            audit_loss: d.audit_loss,
            min_segment_len: d.min_segment_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_benchmark() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let g = cfg.grammar().unwrap();
        assert_eq!((g.num_classes, g.feature_dim), (6, 16));
        assert!(g.min_separation() >= 4.0 * g.feature_noise_sigma - 1e-12);
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
            seed = 9
            workers = 3
            [model]
            temporal_mode = "context_free"
            head_dims = [12, 6]
            [train]
            epochs = 5
            learning_rate = 0.002
            [detection]
            mode = "threshold"
            audit_loss = "train_weighted"
            [corruption]
            kind = "disorder"
            disorder_mode = "swap_labels"
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model_config().temporal_mode, TemporalMode::ContextFree);
        assert_eq!(cfg.model_config().init_seed, 9);
        assert_eq!(cfg.train_config().shuffle_seed, 9);
        assert_eq!(cfg.corruption_spec(None, None).kind, CorruptionKind::Disorder);
        let back = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            "workers = 0",
            "[train]\nepochs = 0",
            "[grammar]\nduration_min = 0",
            "[detection]\nk_percent = 0.0",
            "[detection]\ncalibration_quantile = 1.0",
            "[corruption]\nvideo_fraction = 1.5",
            "[model]\nhiddn_dim = 3",
            "seed = \"x\"",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn seeds_are_derived_not_clocked() {
        let cfg = RunConfig { seed: 4, ..Default::default() };
        assert_eq!(cfg.split_seed(Split::Train), 4000);
        assert_eq!(cfg.split_seed(Split::Test), 4002);
        assert_eq!(cfg.corruption_spec(None, None).seed, 4003);
        assert_eq!(cfg.corruption_spec(None, Some(0.1)).video_fraction, 0.1);
    }
}
