//! Flat experiment configuration shared by every subcommand.
//!
//! Values are resolved as command line > config file > defaults. The
//! `config_hash` is the SHA-256 of the canonical JSON form of the fields that
//! influence results (paths, thread count and output switches are excluded).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jacguard::attacks::{AttackConfig, DEFAULT_EPS_GRID};
use jacguard::data::{DatasetName, Split};
use jacguard::jacobian::PairMode;
use jacguard::training::{JrMode, OptimizerKind, TrainConfig, UatConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "UAP_DATA_DIR";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Regularization strengths of the clean-accuracy sweep.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const TRAIN_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Sgd,
    Svd,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Untargeted,
    Targeted,
    Svd,
    /// Clean accuracy against the regularization strength.
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JrModeName {
    Exact,
    Proj,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `None` means MNIST for single-dataset commands and both for `reproduce`.
    pub dataset: Option<DatasetName>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub models_dir: PathBuf,
    pub perturbation: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: Option<usize>,

    pub lambda_jr: f64,
    pub jr_mode: JrModeName,
    pub n_proj: usize,
    pub uat_eps: Option<f64>,
    pub epochs: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,

    pub eps: f64,
    pub eps_grid: Vec<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub iters: usize,
    /// Training batch (100) or attack batch (200) when unset.
    pub batch_size: Option<usize>,
    pub step_size: Option<f64>,
    pub target: Option<usize>,
    pub attack: AttackMethod,
    pub sweep: SweepKind,
    pub craft_split: Split,
    pub clamp: bool,

    pub seed: u64,
    pub seeds: Option<Vec<u64>>,

    pub n_inputs: usize,
    pub bin_width: f64,
    pub pair_mode: PairMode,

    pub train_missing: bool,
    pub json: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            data_dir: None,
            checkpoint: None,
            models_dir: PathBuf::from("models"),
            perturbation: None,
            out: PathBuf::from("out"),
            threads: None,
            lambda_jr: 0.0,
            jr_mode: JrModeName::Proj,
            n_proj: 1,
            uat_eps: None,
            epochs: 20,
            optimizer: OptimizerName::Adam,
            lr: 1e-3,
            eps: 0.2,
            eps_grid: DEFAULT_EPS_GRID.to_vec(),
            lambda_grid: None,
            iters: 100,
            batch_size: None,
            step_size: None,
            target: None,
            attack: AttackMethod::Sgd,
            sweep: SweepKind::Untargeted,
            craft_split: Split::Train,
            clamp: true,
            seed: 1,
            seeds: None,
            n_inputs: 1000,
            bin_width: jacguard::jacobian::DEFAULT_BIN_WIDTH,
            pair_mode: PairMode::Ordered,
            train_missing: false,
            json: false,
        }
    }
}

/// Keys that never change results and are left out of the hash.
const UNHASHED: [&str; 8] = [
    "data_dir",
    "models_dir",
    "out",
    "threads",
    "train_missing",
    "json",
    "checkpoint",
    "perturbation",
];

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn dataset(&self) -> DatasetName {
        self.dataset.unwrap_or(DatasetName::Mnist)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    /// `--data-dir`, then `UAP_DATA_DIR`.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => bail!("no dataset location: pass --data-dir <dir> or set {DATA_DIR_ENV}"),
        }
    }

    /// Canonical JSON of the result-relevant fields plus the command name.
    /// `serde_json` maps are key-sorted, so the text is canonical.
    pub fn canonical(&self, command: &str) -> String {
        let mut v = serde_json::to_value(self).expect("config is serializable");
        let map = v.as_object_mut().expect("struct serializes to a map");
        for k in UNHASHED {
            map.remove(k);
        }
        map.insert("command".into(), command.into());
        serde_json::to_string(&v).expect("serializable")
    }

    pub fn hash(&self, command: &str) -> String {
        hex::encode(Sha256::digest(self.canonical(command).as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_grid.is_empty() {
            bail!("--eps-grid must list at least one epsilon");
        }
        if self.eps_grid.windows(2).any(|w| w[1] < w[0]) {
            bail!("--eps-grid must be ascending");
        }
        if matches!(&self.lambda_grid, Some(g) if g.is_empty()) {
            bail!("--lambda-grid must list at least one value");
        }
        if matches!(&self.seeds, Some(s) if s.is_empty()) {
            bail!("--seeds must list at least one seed");
        }
        if self.n_inputs == 0 {
            bail!("--n-inputs must be positive");
        }
        if self.threads == Some(0) {
            bail!("--threads must be positive");
        }
        Ok(())
    }

    pub fn jr_mode(&self) -> JrMode {
        match self.jr_mode {
            JrModeName::Exact => JrMode::Exact,
            JrModeName::Proj => JrMode::Projection(self.n_proj),
        }
    }

    pub fn optimizer(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Adam => OptimizerKind::Adam {
                lr: self.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            OptimizerName::Sgd => OptimizerKind::SgdMomentum {
                lr: self.lr,
                momentum: 0.9,
            },
        }
    }

    /// Training settings for a model with the given regularization, UAT budget and seed.
    pub fn train_config(&self, lambda_jr: f64, uat_eps: Option<f64>, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size.unwrap_or(TRAIN_BATCH),
            optimizer: self.optimizer(),
            lambda_jr,
            jr_mode: self.jr_mode(),
            seed,
            uat: uat_eps.map(UatConfig::new),
        }
    }

    pub fn attack_config(&self, epsilon: f64, seed: u64) -> AttackConfig {
        let base = AttackConfig::default();
        AttackConfig {
            epsilon,
            iterations: self.iters,
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            step_size: self.step_size,
            target_class: self.target,
            seed,
            craft_split: self.craft_split,
            clamp_inputs: self.clamp,
            random_init: false,
        }
    }
}
