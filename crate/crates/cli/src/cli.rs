use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use jacguard::data::{DatasetName, Split};
use jacguard::jacobian::PairMode;

use crate::config::{AttackMethod, ExperimentConfig, JrModeName, OptimizerName, SweepKind};

#[derive(Debug, Parser)]
#[command(name = "jacguard", version, about = "Jacobian regularization against universal adversarial perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a standard, Jacobian-regularized or UAT model.
    Train(Flags),
    /// Craft one universal perturbation and score it on the test split.
    Attack(Flags),
    /// Clean error of a model, plus UER/TSR of a saved perturbation.
    Eval(Flags),
    /// Pairwise Jacobian cosine similarity histogram.
    Jacsim(Flags),
    /// Metric against epsilon (or clean accuracy against lambda).
    Sweep(Flags),
    /// Standard / UAT / JR table on both datasets.
    Reproduce(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Eval(_) => "eval",
            Command::Jacsim(_) => "jacsim",
            Command::Sweep(_) => "sweep",
            Command::Reproduce(_) => "reproduce",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::Train(f)
            | Command::Attack(f)
            | Command::Eval(f)
            | Command::Jacsim(f)
            | Command::Sweep(f)
            | Command::Reproduce(f) => f,
        }
    }
}

fn parse_dataset(s: &str) -> Result<DatasetName, String> {
    s.parse().map_err(|e: jacguard::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: jacguard::Error| e.to_string())
}

fn parse_pair_mode(s: &str) -> Result<PairMode, String> {
    s.parse().map_err(|e: jacguard::Error| e.to_string())
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("invalid value `{s}`"))
}

/// Flags shared by all subcommands; unset flags fall back to the config file, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Flat TOML file with any of the settings below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dataset, help = "mnist | fashion-mnist")]
    pub dataset: Option<DatasetName>,
    /// Directory holding <dataset>/{train,t10k}-*-ubyte[.gz]; falls back to UAP_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model zoo directory used when --checkpoint is absent.
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    /// Perturbation file (`perturbation.bin`) for `eval`.
    #[arg(long)]
    pub perturbation: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,

    #[arg(long)]
    pub lambda_jr: Option<f64>,
    #[arg(long, value_parser = parse_enum::<JrModeName>, help = "exact | proj")]
    pub jr_mode: Option<JrModeName>,
    #[arg(long)]
    pub n_proj: Option<usize>,
    /// Train with universal adversarial training at this budget.
    #[arg(long)]
    pub uat_eps: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_enum::<OptimizerName>, help = "adam | sgd")]
    pub optimizer: Option<OptimizerName>,
    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub eps_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, value_parser = parse_enum::<AttackMethod>, help = "sgd | svd | random")]
    pub attack: Option<AttackMethod>,
    #[arg(long, value_parser = parse_enum::<SweepKind>, help = "untargeted | targeted | svd | clean")]
    pub sweep: Option<SweepKind>,
    #[arg(long, value_parser = parse_split, help = "train | test")]
    pub craft_split: Option<Split>,
    /// Do not clamp perturbed inputs to [0, 1].
    #[arg(long)]
    pub no_clamp: bool,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,

    /// Test inputs for `jacsim` (class balanced).
    #[arg(long)]
    pub n_inputs: Option<usize>,
    #[arg(long)]
    pub bin_width: Option<f64>,
    #[arg(long, value_parser = parse_pair_mode, help = "ordered | unordered | all")]
    pub pair_mode: Option<PairMode>,

    /// Train zoo models that are not on disk instead of failing.
    #[arg(long)]
    pub train_missing: bool,
    /// Also write a JSON summary.
    #[arg(long)]
    pub json: bool,
}

macro_rules! overlay {
    ($cfg:ident, $flags:ident; $($field:ident),* ; $($opt:ident),*) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v; })*
        $(if let Some(v) = $flags.$opt.clone() { $cfg.$opt = Some(v); })*
    };
}

impl Flags {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_toml_file(p)?,
            None => ExperimentConfig::default(),
        };
        let f = self;
        overlay!(cfg, f;
            models_dir, out, lambda_jr, jr_mode, n_proj, epochs, optimizer, lr, eps, eps_grid, iters,
            attack, sweep, craft_split, seed, n_inputs, bin_width, pair_mode;
            dataset, data_dir, checkpoint, perturbation, threads, uat_eps, lambda_grid, batch_size,
            step_size, target, seeds);
        if f.no_clamp {
            cfg.clamp = false;
        }
        if f.train_missing {
            cfg.train_missing = true;
        }
        if f.json {
            cfg.json = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.command.flags().resolve()?;
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("--threads ignored: {e}");
        }
    }
    log::debug!("{} config hash {}", cli.command.name(), cfg.hash(cli.command.name()));
    match &cli.command {
        Command::Train(_) => crate::commands::cmd_train(&cfg),
        Command::Attack(_) => crate::commands::cmd_attack(&cfg).map(drop),
        Command::Eval(_) => crate::commands::cmd_eval(&cfg).map(drop),
        Command::Jacsim(_) => crate::commands::cmd_jacsim(&cfg).map(drop),
        Command::Sweep(_) => crate::commands::cmd_sweep(&cfg).map(drop),
        Command::Reproduce(_) => crate::reproduce::cmd_reproduce(&cfg).map(drop),
    }
}
