//! Experiment configuration: JSON with an explicit schema version, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use faultdiag::dnn::{Architecture, FinetuneLoss, PipelineConfig, TrainingConfig};
use faultdiag::mrmr::{MrmrConfig, SelectionMethod, DEFAULT_BINS};
use faultdiag::nn::SparsityConfig;
use faultdiag::transfer::TransferOptions;
use faultdiag::{ingest, rng};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Dnn,
    DnnMrmr,
    Dtl,
    DtlMrmr,
}

impl Mode {
    pub fn uses_mrmr(self) -> bool {
        matches!(self, Mode::DnnMrmr | Mode::DtlMrmr)
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, Mode::Dtl | Mode::DtlMrmr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dnn => "dnn",
            Mode::DnnMrmr => "dnn-mrmr",
            Mode::Dtl => "dtl",
            Mode::DtlMrmr => "dtl-mrmr",
        }
    }
}

/// A table CSV (one segment per row plus a label column) or a list of raw
/// signal CSVs to be segmented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Table(PathBuf),
    Signals {
        signals: Vec<PathBuf>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<DataSource>,
    pub test: Option<DataSource>,
    pub source_train: Option<DataSource>,
    pub source_model: Option<PathBuf>,
    pub target_train: Option<DataSource>,
    pub target_test: Option<DataSource>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_label_column() -> String {
    ingest::LABEL_COLUMN.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrmrSection {
    /// Defaults to on for the `-mrmr` modes and off otherwise; setting it
    /// against the mode is an error.
    pub enabled: Option<bool>,
    pub m: usize,
    pub bins: usize,
    pub method: SelectionMethod,
}

impl Default for MrmrSection {
    fn default() -> Self {
        let d = MrmrConfig::default();
        Self {
            enabled: None,
            m: d.m,
            bins: DEFAULT_BINS,
            method: d.method,
        }
    }
}

/// Training settings without a seed; every seed derives from the top-level
/// one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub learning_rate: f64,
    pub epochs_pretrain: usize,
    pub epochs_softmax: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub finetune_loss: FinetuneLoss,
    pub frozen_layers: Vec<usize>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs_pretrain: d.epochs_pretrain,
            epochs_softmax: d.epochs_softmax,
            epochs_finetune: d.epochs_finetune,
            batch_size: d.batch_size,
            finetune_loss: d.finetune_loss,
            frozen_layers: d.frozen_layers,
        }
    }
}

impl TrainerSection {
    pub fn resolve(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            epochs_pretrain: self.epochs_pretrain,
            epochs_softmax: self.epochs_softmax,
            epochs_finetune: self.epochs_finetune,
            batch_size: self.batch_size,
            seed,
            finetune_loss: self.finetune_loss,
            frozen_layers: self.frozen_layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub k: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub data: DataPaths,
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
    /// Defaults to `segment_len` (no overlap).
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub mrmr: MrmrSection,
    /// Layer widths `[input, h1, ..., hL]`.
    pub architecture: Vec<usize>,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub rho_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub transfer: TransferOptions,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_segment_len() -> usize {
    ingest::DEFAULT_SEGMENT_LEN
}

/// Seeds for every random phase of a run, all derived from one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub top: u64,
    pub cv: u64,
    pub source: u64,
    pub target: u64,
}

impl Seeds {
    pub fn from_top(top: u64) -> Self {
        Self {
            top,
            cv: rng::derive(top, "cv"),
            source: rng::derive(top, "source-training"),
            target: rng::derive(top, "target-training"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|f| Failure::config(format!("{}: {}", path.display(), f.message)))
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Failure::config(format!("invalid JSON: {e}")))?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CONFIG_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Failure::config(format!(
                    "schema_version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})"
                )))
            }
            None => return Err(Failure::config("missing field `schema_version`")),
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Failure::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.segment_len)
    }

    pub fn mrmr_enabled(&self) -> bool {
        self.mrmr.enabled.unwrap_or(self.mode.uses_mrmr())
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<(), Failure> {
        let need = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Failure::config(format!(
                    "mode {} requires `{field}`",
                    self.mode.name()
                )))
            }
        };
        if self.mode.is_transfer() {
            need("data.target_train", self.data.target_train.is_some())?;
            if self.data.source_model.is_none() && self.data.source_train.is_none() {
                return Err(Failure::config(format!(
                    "mode {} requires `data.source_model` or `data.source_train`",
                    self.mode.name()
                )));
            }
            if self.data.source_model.is_some() && self.data.source_train.is_some() {
                return Err(Failure::config(
                    "give either `data.source_model` or `data.source_train`, not both",
                ));
            }
        } else {
            need("data.train", self.data.train.is_some())?;
        }
        if self.mrmr.enabled.is_some_and(|e| e != self.mode.uses_mrmr()) {
            return Err(Failure::config(format!(
                "`mrmr.enabled` contradicts mode {}",
                self.mode.name()
            )));
        }
        if self.segment_len < 2 {
            return Err(Failure::config("`segment_len` must be at least 2"));
        }
        if self.stride() == 0 || self.stride() > self.segment_len {
            return Err(Failure::config("`stride` must be in 1..=segment_len"));
        }
        if self.mrmr_enabled() {
            if self.mrmr.m == 0 || self.mrmr.m > self.segment_len {
                return Err(Failure::config(format!(
                    "`mrmr.m` = {} must be in 1..=segment_len ({})",
                    self.mrmr.m, self.segment_len
                )));
            }
            if self.mrmr.bins < 2 {
                return Err(Failure::config("`mrmr.bins` must be at least 2"));
            }
        }
        if self.cv.k < 2 {
            return Err(Failure::config("`cv.k` must be at least 2"));
        }
        let expected_input = if self.mrmr_enabled() {
            self.mrmr.m
        } else {
            self.segment_len
        };
        match self.architecture.first() {
            Some(&d) if d == expected_input => {}
            Some(&d) => {
                return Err(Failure::config(format!(
                    "`architecture[0]` = {d} but the network input has {expected_input} features"
                )))
            }
            None => return Err(Failure::config("`architecture` is empty")),
        }
        self.pipeline(0).arch.validate().map_err(|e| Failure::config(e.to_string()))?;
        if let Some(rhos) = &self.rho_sweep {
            PipelineConfig {
                rho_sweep: Some(rhos.clone()),
                ..self.pipeline(0)
            }
            .validate(self.segment_len)
            .map_err(|e| Failure::config(e.to_string()))?;
        }
        Ok(())
    }

    /// From-scratch pipeline with the given training seed.
    pub fn pipeline(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            mrmr: self.mrmr_enabled().then(|| MrmrConfig {
                m: self.mrmr.m,
                bins: self.mrmr.bins,
                method: self.mrmr.method,
            }),
            arch: Architecture {
                layer_dims: self.architecture.clone(),
                sparsity: self.sparsity,
                trainer: self.trainer.resolve(seed),
            },
            rho_sweep: self.rho_sweep.clone(),
        }
    }
}

/// Training settings for the single-step subcommands (`pretrain`,
/// `finetune`, `transfer`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsFile {
    pub schema_version: u32,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub transfer: TransferOptions,
}

impl SettingsFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        if file.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Failure::config(format!(
                "{}: schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                path.display(),
                file.schema_version
            )));
        }
        Ok(file)
    }
}
