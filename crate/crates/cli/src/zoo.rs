//! On-disk model zoo: one directory per (dataset, variant, seed).
//!
//! ```text
//! <models_dir>/<dataset>-<variant>-seed<seed>/model.ckpt
//!                                            /metrics.csv
//!                                            /config.toml
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jacguard::data::{DatasetName, Split};
use jacguard::nn::{load_checkpoint, CheckpointHeader};
use jacguard::training::TrainConfig;
use jacguard::Network32;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TRAIN_BATCH};
use crate::data::load_split;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    Jr { lambda: f64 },
    Uat { epsilon: f64 },
}

impl Variant {
    pub fn new(lambda_jr: f64, uat_eps: Option<f64>) -> Self {
        match uat_eps {
            Some(epsilon) => Variant::Uat { epsilon },
            None if lambda_jr > 0.0 => Variant::Jr { lambda: lambda_jr },
            None => Variant::Standard,
        }
    }

    pub fn lambda_jr(self) -> f64 {
        match self {
            Variant::Jr { lambda } => lambda,
            _ => 0.0,
        }
    }

    pub fn uat_eps(self) -> Option<f64> {
        match self {
            Variant::Uat { epsilon } => Some(epsilon),
            _ => None,
        }
    }

    /// `--lambda-jr` / `--uat-eps` flags that select this variant.
    pub fn flags(self) -> String {
        match self {
            Variant::Standard => String::new(),
            Variant::Jr { lambda } => format!(" --lambda-jr {lambda}"),
            Variant::Uat { epsilon } => format!(" --uat-eps {epsilon}"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Standard => f.write_str("standard"),
            Variant::Jr { lambda } => write!(f, "jr{lambda}"),
            Variant::Uat { epsilon } => write!(f, "uat{epsilon}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub dataset: DatasetName,
    pub variant: Variant,
    pub seed: u64,
}

/// Extra fields stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dataset: DatasetName,
    pub variant: Variant,
    pub seed: u64,
    pub train: TrainConfig,
    pub version: String,
}

impl ModelSpec {
    pub fn new(dataset: DatasetName, variant: Variant, seed: u64) -> Self {
        Self { dataset, variant, seed }
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}-seed{}", self.dataset, self.variant, self.seed)
    }

    pub fn dir(&self, models_dir: &Path) -> PathBuf {
        models_dir.join(self.dir_name())
    }

    pub fn checkpoint(&self, models_dir: &Path) -> PathBuf {
        self.dir(models_dir).join(CHECKPOINT_FILE)
    }

    /// The `train` invocation that produces this model.
    pub fn train_command(&self, models_dir: &Path) -> String {
        format!(
            "jacguard train --dataset {}{} --seed {} --out {}",
            self.dataset,
            self.variant.flags(),
            self.seed,
            self.dir(models_dir).display()
        )
    }

    /// Zoo models always use the default training batch.
    pub fn train_config(&self, cfg: &ExperimentConfig) -> TrainConfig {
        TrainConfig {
            batch_size: TRAIN_BATCH,
            ..cfg.train_config(self.variant.lambda_jr(), self.variant.uat_eps(), self.seed)
        }
    }
}

pub struct LoadedModel {
    pub network: Network32,
    pub header: CheckpointHeader,
    pub meta: Option<ModelMeta>,
    pub path: PathBuf,
    pub sha256: String,
}

impl LoadedModel {
    /// Short name for result rows: the zoo directory name or the file stem.
    pub fn label(&self) -> String {
        match &self.meta {
            Some(m) => ModelSpec::new(m.dataset, m.variant, m.seed).dir_name(),
            None => self
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }

    pub fn lambda_jr(&self) -> f64 {
        self.meta.as_ref().map_or(0.0, |m| m.variant.lambda_jr())
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (network, header, sha256) =
        load_checkpoint::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let meta = serde_json::from_value(header.metadata.clone()).ok();
    Ok(LoadedModel {
        network,
        header,
        meta,
        path: path.to_path_buf(),
        sha256,
    })
}

/// Loads a zoo model, training it first when `cfg.train_missing` is set.
pub fn ensure_model(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<LoadedModel> {
    let path = spec.checkpoint(&cfg.models_dir);
    if !path.exists() {
        if !cfg.train_missing {
            bail!(
                "missing checkpoint {}\n  train it with: {}\n  (or pass --train-missing)",
                path.display(),
                spec.train_command(&cfg.models_dir)
            );
        }
        log::info!("training missing model {}", spec.dir_name());
        let root = cfg.data_root()?;
        let train_set = load_split(&root, spec.dataset, Split::Train)?;
        let test_set = load_split(&root, spec.dataset, Split::Test)?;
        let zoo_cfg = ExperimentConfig {
            batch_size: None,
            ..cfg.clone()
        };
        crate::commands::train_and_save(&zoo_cfg, spec, &train_set, &test_set, &spec.dir(&cfg.models_dir))?;
    }
    let model = load_model(&path)?;
    if let Some(m) = &model.meta {
        if m.train != spec.train_config(cfg) {
            log::warn!(
                "{} was trained with different settings than the current configuration",
                path.display()
            );
        }
    }
    Ok(model)
}

/// The explicit `--checkpoint`, or the zoo model for `(dataset, lambda_jr, uat_eps, seed)`.
pub fn resolve_model(cfg: &ExperimentConfig, seed: u64) -> Result<LoadedModel> {
    match &cfg.checkpoint {
        Some(p) => load_model(p),
        None => ensure_model(
            cfg,
            &ModelSpec::new(cfg.dataset(), Variant::new(cfg.lambda_jr, cfg.uat_eps), seed),
        ),
    }
}
