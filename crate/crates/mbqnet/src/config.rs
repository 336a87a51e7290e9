//! Run configuration: a TOML document with defaults for everything except
//! dataset paths, strict unknown-key rejection, field-naming validation, and a
//! content hash that artifacts embed for provenance.

use crate::data::{
    load_cifar10_bin, load_mnist_idx, synth_blobs, synth_digits, Dataset,
};
use crate::error::{Error, Result};
use crate::model::{Arch, BitRanges, BnPolicy, ModelSpec};
use crate::quant::{QuantScheme, QuantSpec, ScalingAxes, DEFAULT_EPSILON};
use crate::scoring::{ScoreMethod, DEFAULT_SCORE_EPOCHS, DEFAULT_SCORE_WINDOW};
use crate::train::{LrSchedule, TrainConfig, TrainScheme};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SynthBlobs,
    SynthDigits,
    MnistIdx,
    Cifar10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// IDX image/label files (mnist-idx only).
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Binary batch files (cifar10 only).
    pub files: Vec<PathBuf>,
    /// Sample count for synthetic datasets.
    pub n: usize,
    /// Cap on file-backed datasets; 0 = use everything.
    pub limit: usize,
    /// Blob geometry (synth-blobs only).
    pub dim: usize,
    pub classes: usize,
    pub separation: f32,
    /// Fraction of samples held out for evaluation.
    pub val_fraction: f32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::SynthDigits,
            images: None,
            labels: None,
            files: Vec::new(),
            n: 2000,
            limit: 0,
            dim: 16,
            classes: 10,
            separation: 6.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Mlp,
    SmallCnn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// MLP geometry.
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// CNN geometry.
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub classes: usize,
    pub trained_bits: Vec<u8>,
    /// Empty = same as trained_bits.
    pub switchable_bits: Vec<u8>,
    pub bn_policy: BnPolicy,
    pub axes: ScalingAxes,
    pub keep_first_last_fp: bool,
    pub per_channel_correction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::SmallCnn,
            input_dim: 16,
            hidden: vec![64, 64],
            in_channels: 1,
            channels: vec![8, 12, 16, 16],
            classes: 10,
            trained_bits: vec![1, 2, 4, 8, 32],
            switchable_bits: Vec::new(),
            bn_policy: BnPolicy::HybridOneBitSeparate,
            axes: ScalingAxes::PerLeadingDim,
            keep_first_last_fp: true,
            per_channel_correction: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub scheme: QuantScheme,
    pub activation_bits: u8,
    pub epsilon: f32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            scheme: QuantScheme::DoReFa,
            activation_bits: 4,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub scheme: TrainScheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_schedule: LrSchedule,
    pub bias_correction: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            scheme: t.scheme,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_schedule: t.lr_schedule,
            bias_correction: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub method: ScoreMethod,
    pub epochs: usize,
    pub window: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            method: ScoreMethod::Dynamics,
            epochs: DEFAULT_SCORE_EPOCHS,
            window: DEFAULT_SCORE_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetConfig {
    pub pruning_rate: f32,
    pub temperature: f32,
    pub floor: f32,
    /// Fraction of samples whose scores are kept on disk (storage filter).
    pub keep_fraction: f32,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        CoresetConfig {
            pruning_rate: 0.8,
            temperature: crate::coreset::DEFAULT_TEMPERATURE,
            floor: crate::coreset::DEFAULT_FLOOR,
            keep_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub train: TrainSection,
    pub scoring: ScoringConfig,
    pub coreset: CoresetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            quant: QuantConfig::default(),
            train: TrainSection::default(),
            scoring: ScoringConfig::default(),
            coreset: CoresetConfig::default(),
        }
    }
}

/// Parse, normalize, and validate a TOML document. Every violation is
/// reported with the offending field's path.
pub fn validate_config(document: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig =
        toml::from_str(document).map_err(|e| Error::Config(e.to_string()))?;
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Fill derived defaults: empty switchable range copies the trained one;
    /// bit lists are sorted and deduplicated.
    pub fn normalize(&mut self) {
        let m = &mut self.model;
        m.trained_bits.sort_unstable();
        m.trained_bits.dedup();
        if m.switchable_bits.is_empty() {
            m.switchable_bits = m.trained_bits.clone();
        }
        m.switchable_bits.sort_unstable();
        m.switchable_bits.dedup();
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut check = |ok: bool, field: &str, reason: &str| {
            if !ok {
                errs.push(format!("{}: {}", field, reason));
            }
        };

        let d = &self.dataset;
        match d.kind {
            DatasetKind::MnistIdx => {
                check(d.images.is_some(), "dataset.images", "required for kind mnist-idx");
                check(d.labels.is_some(), "dataset.labels", "required for kind mnist-idx");
            }
            DatasetKind::Cifar10 => {
                check(!d.files.is_empty(), "dataset.files", "required for kind cifar10");
            }
            DatasetKind::SynthBlobs => {
                check(d.dim >= 2, "dataset.dim", "must be >= 2");
                check(
                    d.classes >= 2 && d.classes <= d.dim,
                    "dataset.classes",
                    "must satisfy 2 <= classes <= dim",
                );
            }
            DatasetKind::SynthDigits => {}
        }
        check(d.n >= 4, "dataset.n", "must be >= 4");
        check(
            d.val_fraction > 0.0 && d.val_fraction < 1.0,
            "dataset.val_fraction",
            "must be in (0, 1)",
        );

        let m = &self.model;
        check(m.classes >= 2, "model.classes", "must be >= 2");
        match m.arch {
            ArchKind::Mlp => {
                check(!m.hidden.is_empty(), "model.hidden", "must be non-empty");
                check(m.input_dim >= 1, "model.input_dim", "must be >= 1");
            }
            ArchKind::SmallCnn => {
                check(!m.channels.is_empty(), "model.channels", "must be non-empty");
                check(m.in_channels >= 1, "model.in_channels", "must be >= 1");
            }
        }
        check(!m.trained_bits.is_empty(), "model.trained_bits", "must be non-empty");
        for &b in m.trained_bits.iter().chain(&m.switchable_bits) {
            check(
                (1..=32).contains(&b),
                "model.trained_bits",
                "bit-widths must lie in [1, 32]",
            );
        }
        check(
            m.trained_bits.iter().all(|b| m.switchable_bits.contains(b)),
            "model.switchable_bits",
            "must contain every trained bit-width (B ⊆ R)",
        );

        let q = &self.quant;
        check(
            (1..=32).contains(&q.activation_bits),
            "quant.activation_bits",
            "must lie in [1, 32]",
        );
        check(q.epsilon > 0.0, "quant.epsilon", "must be > 0");

        let t = &self.train;
        check(t.epochs >= 1, "train.epochs", "must be >= 1");
        check(t.batch_size >= 1, "train.batch_size", "must be >= 1");
        check(t.lr > 0.0, "train.lr", "must be > 0");
        check(
            (0.0..1.0).contains(&t.momentum),
            "train.momentum",
            "must be in [0, 1)",
        );
        check(t.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");

        let s = &self.scoring;
        check(s.epochs >= 2, "scoring.epochs", "must be >= 2");
        check(
            s.window >= 1 && s.window < s.epochs,
            "scoring.window",
            "must satisfy 1 <= window < scoring.epochs",
        );

        let c = &self.coreset;
        check(
            (0.0..1.0).contains(&c.pruning_rate),
            "coreset.pruning_rate",
            "must be in [0, 1)",
        );
        check(c.temperature > 0.0, "coreset.temperature", "must be > 0");
        check(c.floor > 0.0, "coreset.floor", "must be > 0");
        check(
            c.keep_fraction > 0.0 && c.keep_fraction <= 1.0,
            "coreset.keep_fraction",
            "must be in (0, 1]",
        );

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// SHA-256 over the canonical (normalized, JSON) form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let arch = match m.arch {
            ArchKind::Mlp => Arch::Mlp {
                input_dim: m.input_dim,
                hidden: m.hidden.clone(),
                classes: m.classes,
            },
            ArchKind::SmallCnn => Arch::SmallCnn {
                in_channels: m.in_channels,
                channels: m.channels.clone(),
                classes: m.classes,
            },
        };
        Ok(ModelSpec {
            arch,
            ranges: BitRanges::new(m.trained_bits.clone(), m.switchable_bits.clone())?,
            policy: m.bn_policy,
            quant: QuantSpec {
                weight_bits: 32,
                scheme: self.quant.scheme,
                activation_bits: self.quant.activation_bits,
                epsilon: self.quant.epsilon,
            },
            axes: m.axes,
            keep_first_last_fp: m.keep_first_last_fp,
            per_channel_correction: m.per_channel_correction,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            scheme: t.scheme,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_schedule: t.lr_schedule.clone(),
            seed: self.seed,
        }
    }

    /// Load (train, eval) splits, normalized with statistics of the train
    /// split. Fails if the dataset's class count disagrees with the model's.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let mut full = match d.kind {
            DatasetKind::SynthBlobs => {
                synth_blobs(d.n, d.dim, d.classes, d.separation, d.seed)?
            }
            DatasetKind::SynthDigits => synth_digits(d.n, d.seed)?,
            DatasetKind::MnistIdx => load_mnist_idx(
                d.images.as_ref().expect("validated"),
                d.labels.as_ref().expect("validated"),
            )?,
            DatasetKind::Cifar10 => load_cifar10_bin(&d.files)?,
        };
        if d.limit > 0 && d.limit < full.len() {
            let idx: Vec<u32> = (0..d.limit as u32).collect();
            full = full.subset(&idx, full.split.clone().as_str());
        }
        if full.classes != self.model.classes {
            return Err(Error::Config(format!(
                "model.classes = {} but dataset has {} classes",
                self.model.classes, full.classes
            )));
        }
        let n_train = full.len() - ((full.len() as f64 * d.val_fraction as f64).round() as usize).max(1);
        let (train, val) = full.split_at(n_train, "train", "val")?;
        let stats = train.compute_norm_stats();
        Ok((train.normalized(&stats), val.normalized(&stats)))
    }
}

/// Apply `key.path=value` overrides to a TOML document, returning the merged
/// document. Values parse as TOML scalars/arrays; anything unparseable is
/// taken as a bare string.
pub fn apply_overrides(document: &str, overrides: &[String]) -> Result<String> {
    let mut table: toml::Table =
        document.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", ov)))?;
        let value = format!("v = {}", raw.trim())
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let parts: Vec<&str> = path.trim().split('.').collect();
        let mut node = &mut table;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{}' is not a table in '{}'", p, path)))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
}
