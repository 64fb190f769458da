use std::path::Path;

use anyhow::{bail, Context, Result};
use jacguard::attacks::{
    epsilon_sweep, evaluate_tsr, evaluate_uer, random_uap, sgd_uap_targeted, sgd_uap_untargeted, svd_uap, AttackKind,
    Perturbation, SVD_SAMPLE,
};
use jacguard::data::{balanced_subset, Dataset, Split, NUM_CLASSES};
use jacguard::jacobian::pairwise_similarity;
use jacguard::linalg::NormOrder;
use jacguard::nn::save_checkpoint;
use jacguard::training::{evaluate_clean, train_with, EpochMetrics};
use jacguard::RngStream;
use serde::{Deserialize, Serialize};

use crate::config::{AttackMethod, ExperimentConfig, SweepKind, DEFAULT_LAMBDA_GRID, VERSION};
use crate::data::load_split;
use crate::output::*;
use crate::zoo::{ensure_model, resolve_model, LoadedModel, ModelMeta, ModelSpec, Variant, CHECKPOINT_FILE};

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

impl Datasets {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.data_root()?;
        Ok(Self {
            train: load_split(&root, cfg.dataset(), Split::Train)?,
            test: load_split(&root, cfg.dataset(), Split::Test)?,
        })
    }

    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct TrainRow {
    epoch: usize,
    train_loss: f64,
    ce_loss: f64,
    jr_term: f64,
    clean_acc: f64,
}

impl From<&EpochMetrics> for TrainRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_loss: m.train_loss,
            ce_loss: m.ce_loss,
            jr_term: m.jr_term,
            clean_acc: m.clean_acc,
        }
    }
}

/// Trains `spec` and writes checkpoint, per-epoch CSV and config into `dir`.
pub fn train_and_save(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: &Path,
) -> Result<Vec<EpochMetrics>> {
    // Only training fields enter the hash, so the zoo and `train` agree.
    let run_cfg = ExperimentConfig {
        dataset: Some(spec.dataset),
        lambda_jr: spec.variant.lambda_jr(),
        uat_eps: spec.variant.uat_eps(),
        seed: spec.seed,
        jr_mode: cfg.jr_mode,
        n_proj: cfg.n_proj,
        epochs: cfg.epochs,
        optimizer: cfg.optimizer,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        ..ExperimentConfig::default()
    };
    let hash = run_cfg.hash("train");
    let tc = run_cfg.train_config(spec.variant.lambda_jr(), spec.variant.uat_eps(), spec.seed);
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let metrics_path = dir.join("metrics.csv");
    let model = train_with::<f32>(&tc, train_set, Some(test_set), |m| {
        rows.push(TrainRow::from(m));
        if let Err(e) = write_csv(&metrics_path, &hash, TRAIN_COLUMNS, &rows) {
            log::warn!("could not update {}: {e}", metrics_path.display());
        }
    })
    .with_context(|| format!("training {}", spec.dir_name()))?;
    let meta = ModelMeta {
        dataset: spec.dataset,
        variant: spec.variant,
        seed: spec.seed,
        train: tc,
        version: VERSION.into(),
    };
    save_checkpoint(&model.network, &hash, serde_json::to_value(&meta)?, &dir.join(CHECKPOINT_FILE))?;
    write_config(dir, &run_cfg, "train")?;
    Ok(model.metrics)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let data = Datasets::load(cfg)?;
    let spec = ModelSpec::new(cfg.dataset(), Variant::new(cfg.lambda_jr, cfg.uat_eps), cfg.seed);
    let metrics = train_and_save(cfg, &spec, &data.train, &data.test, &cfg.out)?;
    if let Some(m) = metrics.last() {
        println!(
            "{}: clean accuracy {:.4} after {} epochs -> {}",
            spec.dir_name(),
            m.clean_acc,
            m.epoch,
            cfg.out.join(CHECKPOINT_FILE).display()
        );
    }
    Ok(())
}

/// Sidecar describing `perturbation.bin` (raw little-endian f32 values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationFile {
    pub version: String,
    pub config_hash: String,
    pub attack: String,
    pub norm: String,
    pub epsilon: f64,
    pub target: Option<usize>,
    pub dataset: String,
    pub model: String,
    pub shape: [usize; 3],
    pub dtype: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub dataset: String,
    pub model: String,
    pub attack: String,
    pub epsilon: f64,
    pub target: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn craft(
    cfg: &ExperimentConfig,
    model: &LoadedModel,
    craft_set: &Dataset,
    epsilon: f64,
    seed: u64,
) -> Result<Perturbation<f32>> {
    let ac = cfg.attack_config(epsilon, seed);
    ac.validate()?;
    let net = &model.network;
    Ok(match (cfg.attack, cfg.target) {
        (AttackMethod::Sgd, Some(_)) => sgd_uap_targeted(net, craft_set, &ac)?,
        (AttackMethod::Sgd, None) => sgd_uap_untargeted(net, craft_set, &ac)?,
        (AttackMethod::Svd, Some(_)) => bail!("--attack svd is untargeted; drop --target"),
        (AttackMethod::Svd, None) => {
            let sample = balanced_subset(craft_set, SVD_SAMPLE / NUM_CLASSES, &mut RngStream::new(seed))?;
            svd_uap(net, &sample, epsilon, NormOrder::LInf, cfg.clamp)?
        }
        (AttackMethod::Random, _) => random_uap(net.input_len(), epsilon, &mut RngStream::new(seed)),
    })
}

fn metric_of(net: &LoadedModel, test: &Dataset, delta: &[f32], target: Option<usize>, clamp: bool) -> Result<(String, f64)> {
    Ok(match target {
        Some(c) => ("tsr".into(), evaluate_tsr(&net.network, test, delta, c, clamp)?),
        None => ("uer".into(), evaluate_uer(&net.network, test, delta, clamp)?),
    })
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<AttackRow> {
    let hash = cfg.hash("attack");
    let data = Datasets::load(cfg)?;
    let model = resolve_model(cfg, cfg.seed)?;
    let mut p = craft(cfg, &model, data.split(cfg.craft_split), cfg.eps, cfg.seed)?;
    p.config_hash = hash.clone();
    let (metric, value) = metric_of(&model, &data.test, &p.delta, cfg.target, cfg.clamp)?;
    let row = AttackRow {
        dataset: cfg.dataset().to_string(),
        model: model.label(),
        attack: p.attack.clone(),
        epsilon: cfg.eps,
        target: cfg.target,
        metric,
        value,
        seed: cfg.seed,
    };
    write_perturbation(&cfg.out, &p, &row, data.test.image_shape())?;
    write_csv(&cfg.out.join("attack.csv"), &hash, ATTACK_COLUMNS, std::slice::from_ref(&row))?;
    write_config(&cfg.out, cfg, "attack")?;
    println!("{} {} eps {}: {} = {:.4}", row.model, row.attack, row.epsilon, row.metric, row.value);
    Ok(row)
}

pub fn write_perturbation(dir: &Path, p: &Perturbation<f32>, row: &AttackRow, shape: [usize; 3]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = p.delta.iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(dir.join("perturbation.bin"), &bytes)?;
    let side = PerturbationFile {
        version: VERSION.into(),
        config_hash: p.config_hash.clone(),
        attack: p.attack.clone(),
        norm: p.norm.clone(),
        epsilon: p.epsilon,
        target: row.target,
        dataset: row.dataset.clone(),
        model: row.model.clone(),
        shape,
        dtype: "f32".into(),
        sha256: jacguard::nn::sha256_hex(&bytes),
    };
    write_json(&dir.join("perturbation.json"), &side)?;
    perturbation_png(&p.delta, p.epsilon, shape, &dir.join("perturbation.png"))
}

/// Grey-level rendering: 0 maps to mid grey, ±ε to white/black, 4× upscaled.
pub fn perturbation_png(delta: &[f32], epsilon: f64, shape: [usize; 3], path: &Path) -> Result<()> {
    const SCALE: u32 = 4;
    let [_, rows, cols] = shape;
    let eps = if epsilon > 0.0 { epsilon as f32 } else { 1.0 };
    let img = image::GrayImage::from_fn(cols as u32 * SCALE, rows as u32 * SCALE, |x, y| {
        let i = (y / SCALE) as usize * cols + (x / SCALE) as usize;
        let v = 127.5 + 127.5 * (delta[i] / eps).clamp(-1.0, 1.0);
        image::Luma([v.round() as u8])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Reads a perturbation written by `attack`, checking its digest.
pub fn read_perturbation(bin: &Path) -> Result<(Vec<f32>, PerturbationFile)> {
    let side_path = bin.with_extension("json");
    let side: PerturbationFile = serde_json::from_slice(
        &std::fs::read(&side_path).with_context(|| format!("reading {}", side_path.display()))?,
    )?;
    let bytes = std::fs::read(bin).with_context(|| format!("reading {}", bin.display()))?;
    if jacguard::nn::sha256_hex(&bytes) != side.sha256 {
        bail!("{} does not match the digest in {}", bin.display(), side_path.display());
    }
    let delta = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((delta, side))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let hash = cfg.hash("eval");
    let root = cfg.data_root()?;
    let test = load_split(&root, cfg.dataset(), Split::Test)?;
    let model = resolve_model(cfg, cfg.seed)?;
    let acc = evaluate_clean(&model.network, &test)?;
    let row = |metric: &str, value| EvalRow {
        dataset: cfg.dataset().to_string(),
        model: model.label(),
        metric: metric.into(),
        value,
    };
    let mut rows = vec![row("clean_acc", acc), row("test_error", 1.0 - acc)];
    if let Some(path) = &cfg.perturbation {
        let (delta, side) = read_perturbation(path)?;
        if delta.len() != test.image_len() {
            bail!("perturbation has {} values, images have {}", delta.len(), test.image_len());
        }
        let target = cfg.target.or(side.target);
        let (metric, value) = metric_of(&model, &test, &delta, target, cfg.clamp)?;
        rows.push(row(&metric, value));
    }
    write_csv(&cfg.out.join("eval.csv"), &hash, EVAL_COLUMNS, &rows)?;
    write_config(&cfg.out, cfg, "eval")?;
    for r in &rows {
        println!("{} {}: {:.4}", r.model, r.metric, r.value);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacsimSummary {
    pub dataset: String,
    pub model: String,
    pub n_inputs: usize,
    pub mode: String,
    pub pairs: u64,
    pub median: f64,
    pub mean: f64,
    pub degenerate_inputs: usize,
    pub degenerate_pairs: u64,
}

#[derive(Serialize)]
struct HistRow {
    bin_lo: f64,
    bin_hi: f64,
    count: u64,
}

/// Pairwise Jacobian cosine similarity over a class-balanced test subset.
pub fn jacsim(cfg: &ExperimentConfig, model: &LoadedModel, test: &Dataset, seed: u64) -> Result<(JacsimSummary, jacguard::jacobian::Histogram)> {
    let per_class = (cfg.n_inputs / NUM_CLASSES).max(1);
    let subset = balanced_subset(test, per_class, &mut RngStream::new(seed))?;
    let net = model.network.cast::<f64>();
    let sim = pairwise_similarity(&net, &subset.images::<f64>(), cfg.pair_mode, cfg.bin_width)?;
    let summary = JacsimSummary {
        dataset: test.name.clone(),
        model: model.label(),
        n_inputs: subset.len(),
        mode: sim.mode.to_string(),
        pairs: sim.count,
        median: sim.median,
        mean: sim.mean,
        degenerate_inputs: sim.degenerate_inputs,
        degenerate_pairs: sim.degenerate_pairs,
    };
    Ok((summary, sim.histogram))
}

pub fn cmd_jacsim(cfg: &ExperimentConfig) -> Result<JacsimSummary> {
    let hash = cfg.hash("jacsim");
    let root = cfg.data_root()?;
    let test = load_split(&root, cfg.dataset(), Split::Test)?;
    let model = resolve_model(cfg, cfg.seed)?;
    let (summary, hist) = jacsim(cfg, &model, &test, cfg.seed)?;
    let rows: Vec<HistRow> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let (bin_lo, bin_hi) = hist.bin_edges(i);
            HistRow { bin_lo, bin_hi, count }
        })
        .collect();
    write_csv(&cfg.out.join("jacsim_hist.csv"), &hash, HIST_COLUMNS, &rows)?;
    write_csv(&cfg.out.join("jacsim.csv"), &hash, JACSIM_COLUMNS, std::slice::from_ref(&summary))?;
    if cfg.json {
        #[derive(Serialize)]
        struct Doc<'a> {
            version: &'a str,
            config_hash: &'a str,
            #[serde(flatten)]
            summary: &'a JacsimSummary,
        }
        write_json(
            &cfg.out.join("jacsim.json"),
            &Doc {
                version: VERSION,
                config_hash: &hash,
                summary: &summary,
            },
        )?;
    }
    write_config(&cfg.out, cfg, "jacsim")?;
    println!(
        "{}: median {:.4} mean {:.4} over {} pairs ({} degenerate inputs)",
        summary.model, summary.median, summary.mean, summary.pairs, summary.degenerate_inputs
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub dataset: String,
    pub lambda_jr: f64,
    pub epsilon: f64,
    pub metric: String,
    pub value: f64,
    pub sd: f64,
    pub seed: u64,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCsvRow>> {
    let hash = cfg.hash("sweep");
    let data = Datasets::load(cfg)?;
    let lambdas = match (&cfg.lambda_grid, cfg.sweep) {
        (Some(g), _) => g.clone(),
        (None, SweepKind::Clean) => DEFAULT_LAMBDA_GRID.to_vec(),
        (None, _) => vec![cfg.lambda_jr],
    };
    let (lambdas, seeds) = match cfg.checkpoint {
        Some(_) => (vec![cfg.lambda_jr], vec![cfg.seed]),
        None => (lambdas, cfg.seeds()),
    };
    let dataset = cfg.dataset().to_string();
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        for &seed in &seeds {
            let (model, lambda) = match &cfg.checkpoint {
                Some(p) => {
                    let m = crate::zoo::load_model(p)?;
                    let l = m.lambda_jr();
                    (m, l)
                }
                None => {
                    let spec = ModelSpec::new(cfg.dataset(), Variant::new(lambda, cfg.uat_eps), seed);
                    (ensure_model(cfg, &spec)?, lambda)
                }
            };
            if cfg.sweep == SweepKind::Clean {
                rows.push(SweepCsvRow {
                    dataset: dataset.clone(),
                    lambda_jr: lambda,
                    epsilon: 0.0,
                    metric: "clean_acc".into(),
                    value: evaluate_clean(&model.network, &data.test)?,
                    sd: 0.0,
                    seed,
                });
                continue;
            }
            let kind = match cfg.sweep {
                SweepKind::Untargeted => AttackKind::Untargeted,
                SweepKind::Targeted => AttackKind::Targeted,
                _ => AttackKind::Svd,
            };
            let base = cfg.attack_config(0.0, seed);
            for r in epsilon_sweep(&model.network, data.split(cfg.craft_split), &data.test, &cfg.eps_grid, kind, &base)? {
                rows.push(SweepCsvRow {
                    dataset: dataset.clone(),
                    lambda_jr: lambda,
                    epsilon: r.epsilon,
                    metric: r.metric,
                    value: r.value,
                    sd: r.sd,
                    seed,
                });
            }
        }
    }
    write_csv(&cfg.out.join("sweep.csv"), &hash, SWEEP_COLUMNS, &rows)?;
    write_config(&cfg.out, cfg, "sweep")?;
    for r in &rows {
        println!("lambda {} eps {} seed {}: {} = {:.4} (sd {:.4})", r.lambda_jr, r.epsilon, r.seed, r.metric, r.value, r.sd);
    }
    Ok(rows)
}
