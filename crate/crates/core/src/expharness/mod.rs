//! Experiment protocols: label-subset sweeps, the cross-domain
//! pretrain/fine-tune matrix and the label-corruption ablation, with CSV and
//! JSON reports and qualitative overlays.

mod data;
mod overlay;
mod report;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::imagery::{CorruptionSpec, ImageryError};
use crate::losses::LossConfig;
use crate::model::{ArchConfig, ModelError};
use crate::train::{TrainConfig, TrainError};

pub use data::{corrupt_labels, generate_dataset, load_source, SyntheticSpec};
pub use overlay::{export_overlay, overlay_image, AGREE_TINT, PRED_ONLY_TINT, TRUTH_ONLY_TINT};
pub use report::{emit_report, Aggregate, ReportRow, TableReport, CSV_HEADER};
pub use run::{
    run_corruption_ablation, run_cross_domain, run_experiment, run_subset_sweep, PretrainCache,
    RunOptions, SweepOutcome,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: TrainError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SubsetSweep,
    CrossDomain,
    CorruptionAblation,
}

/// Weight initialization of a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    SslPretrained,
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Scratch => "scratch",
            Init::SslPretrained => "ssl_pretrained",
        })
    }
}

/// Where a domain's tiles come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Path { name: String, root: PathBuf },
}

impl DataSource {
    pub fn name(&self) -> &str {
        match self {
            DataSource::Synthetic(s) => &s.name,
            DataSource::Path { name, .. } => name,
        }
    }
}

fn default_fractions() -> Vec<f64> {
    vec![0.6, 0.7, 0.8, 1.0]
}

fn default_inits() -> Vec<Init> {
    vec![Init::Scratch, Init::SslPretrained]
}

fn default_replicates() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// One domain, or two for the cross-domain matrix.
    pub domains: Vec<DataSource>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_inits")]
    pub inits: Vec<Init>,
    /// Corruption grid of the ablation; ignored by the other kinds.
    #[serde(default)]
    pub corruption: Vec<CorruptionSpec>,
    /// Seeds `1..=replicates` unless `seeds` is given.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Seed of the (fixed, per-dataset) label corruption.
    #[serde(default)]
    pub corruption_seed: u64,
}

impl ExperimentSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (1..=self.replicates as u64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad(format!(
                "fractions {:?} must be non-empty and inside (0, 1]",
                self.fractions
            ));
        }
        if self.inits.is_empty() {
            return bad("inits is empty".into());
        }
        if self.seeds.is_none() && self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return bad("seeds is empty".into());
        }
        let want_domains = match self.kind {
            ExperimentKind::CrossDomain => 2,
            _ => 1,
        };
        if self.domains.len() != want_domains {
            return bad(format!(
                "{:?} needs {want_domains} domain(s), got {}",
                self.kind,
                self.domains.len()
            ));
        }
        if self.domains.len() == 2 && self.domains[0].name() == self.domains[1].name() {
            return bad("domain names must differ".into());
        }
        if self.kind == ExperimentKind::CorruptionAblation && self.corruption.is_empty() {
            return bad("corruption_ablation needs a corruption grid".into());
        }
        for c in &self.corruption {
            c.validate()?;
        }
        for d in &self.domains {
            if let DataSource::Synthetic(s) = d {
                s.validate()?;
            }
        }
        Ok(())
    }
}

/// Pretraining epochs when the config does not set them.
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 30;

/// Scalar overrides applied to the fine-tuning config for pretraining.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

/// The single JSON config document read by every CLI subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub policy: AugmentPolicy,
    #[serde(default)]
    pub pretrain: PretrainOverrides,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Fine-tuning config with the top-level loss and policy folded in.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            policy: self.policy,
            ..self.train
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let base = self.finetune_config();
        TrainConfig {
            epochs: self.pretrain.epochs.unwrap_or(DEFAULT_PRETRAIN_EPOCHS),
            lr: self.pretrain.lr.unwrap_or(base.lr),
            batch_size: self.pretrain.batch_size.unwrap_or(base.batch_size),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: TrainError| ExperimentError::InvalidSpec(e.to_string());
        self.arch.validate()?;
        self.finetune_config().validate().map_err(wrap)?;
        self.pretrain_config().validate().map_err(wrap)?;
        if let Some(x) = &self.experiment {
            x.validate()?;
            for d in &x.domains {
                if let DataSource::Synthetic(s) = d {
                    if s.scene.tile_size != self.arch.tile {
                        return Err(ExperimentError::InvalidSpec(format!(
                            "domain {} has tile {} but arch.tile is {}",
                            s.name, s.scene.tile_size, self.arch.tile
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
