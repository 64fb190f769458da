//! The standard / UAT / JR comparison table.

use std::fmt::Write as _;

use anyhow::Result;
use jacguard::attacks::{evaluate_tsr, evaluate_uer, sgd_uap_targeted, sgd_uap_untargeted};
use jacguard::data::{DatasetName, NUM_CLASSES};
use jacguard::training::evaluate_clean;
use serde::{Deserialize, Serialize};

use crate::commands::Datasets;
use crate::config::ExperimentConfig;
use crate::output::{write_csv, write_config, TABLE1_COLUMNS};
use crate::zoo::{ensure_model, ModelSpec, Variant};

pub const JR_LAMBDA: f64 = 0.05;
pub const MODELS: [&str; 3] = ["standard", "uat", "jr"];
pub const METRICS: [&str; 3] = ["test_error", "uer", "tsr"];

/// Attack budget (and UAT training budget) per dataset.
pub fn table_epsilon(d: DatasetName) -> f64 {
    match d {
        DatasetName::Mnist => 0.2,
        DatasetName::FashionMnist => 0.15,
    }
}

/// Published values in percent, indexed `[model][metric]`.
pub fn published_values(d: DatasetName) -> [[f64; 3]; 3] {
    match d {
        DatasetName::Mnist => [[0.92, 85.88, 85.94], [1.81, 27.49, 24.05], [0.90, 20.47, 21.57]],
        DatasetName::FashionMnist => [[9.16, 86.63, 86.33], [16.66, 34.10, 26.64], [9.15, 29.96, 30.59]],
    }
}

pub fn variants(d: DatasetName) -> [Variant; 3] {
    [
        Variant::Standard,
        Variant::Uat {
            epsilon: table_epsilon(d),
        },
        Variant::Jr { lambda: JR_LAMBDA },
    ]
}

/// Per-seed measurements of one model, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_error: f64,
    pub uer: f64,
    pub tsr: f64,
    pub tsr_per_class: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub published: f64,
    pub criterion: String,
    pub pass: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBlock {
    pub dataset: DatasetName,
    pub epsilon: f64,
    /// Indexed like [`MODELS`].
    pub results: Vec<Vec<SeedResult>>,
}

impl DatasetBlock {
    /// Median over seeds of one metric.
    pub fn median(&self, model: usize, metric: usize) -> f64 {
        let xs: Vec<f64> = self.results[model]
            .iter()
            .map(|r| [r.test_error, r.uer, r.tsr][metric])
            .collect();
        median(&xs)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Measures test error, untargeted UER and mean targeted TSR for one model.
pub fn measure(cfg: &ExperimentConfig, data: &Datasets, spec: &ModelSpec, epsilon: f64) -> Result<SeedResult> {
    let model = ensure_model(cfg, spec)?;
    let net = &model.network;
    let craft = data.split(cfg.craft_split);
    let test_error = 100.0 * (1.0 - evaluate_clean(net, &data.test)?);
    let ac = cfg.attack_config(epsilon, spec.seed);
    let untargeted = jacguard::attacks::AttackConfig {
        target_class: None,
        ..ac.clone()
    };
    let p = sgd_uap_untargeted(net, craft, &untargeted)?;
    let uer = 100.0 * evaluate_uer(net, &data.test, &p.delta, cfg.clamp)?;
    let mut tsr_per_class = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let tc = jacguard::attacks::AttackConfig {
            target_class: Some(c),
            ..ac.clone()
        };
        let p = sgd_uap_targeted(net, craft, &tc)?;
        tsr_per_class.push(100.0 * evaluate_tsr(net, &data.test, &p.delta, c, cfg.clamp)?);
    }
    let tsr = tsr_per_class.iter().sum::<f64>() / NUM_CLASSES as f64;
    log::info!(
        "{}: error {test_error:.2} uer {uer:.2} tsr {tsr:.2}",
        spec.dir_name()
    );
    Ok(SeedResult {
        seed: spec.seed,
        test_error,
        uer,
        tsr,
        tsr_per_class,
    })
}

pub fn measure_dataset(cfg: &ExperimentConfig, dataset: DatasetName) -> Result<DatasetBlock> {
    let dcfg = ExperimentConfig {
        dataset: Some(dataset),
        ..cfg.clone()
    };
    let data = Datasets::load(&dcfg)?;
    let epsilon = table_epsilon(dataset);
    let mut results = Vec::with_capacity(3);
    for v in variants(dataset) {
        let mut per_seed = Vec::new();
        for seed in dcfg.seeds() {
            per_seed.push(measure(&dcfg, &data, &ModelSpec::new(dataset, v, seed), epsilon)?);
        }
        results.push(per_seed);
    }
    Ok(DatasetBlock {
        dataset,
        epsilon,
        results,
    })
}

fn verdict(ok: bool) -> String {
    if ok { "pass" } else { "fail" }.into()
}

/// Table cells with the reference values and the pass/fail checks that apply.
pub fn cells(block: &DatasetBlock) -> Vec<Cell> {
    let d = block.dataset;
    let published = published_values(d);
    let m = |model, metric| block.median(model, metric);
    let (std_err, uat_err, jr_err) = (m(0, 0), m(1, 0), m(2, 0));
    let (std_uer, uat_uer, jr_uer) = (m(0, 1), m(1, 1), m(2, 1));
    let mnist = d == DatasetName::Mnist;
    let mut out = Vec::new();
    for (mi, model) in MODELS.iter().enumerate() {
        for (ki, metric) in METRICS.iter().enumerate() {
            let (criterion, pass): (String, Option<bool>) = match (mi, ki) {
                (0, 0) => {
                    let max = if mnist { 1.4 } else { 10.5 };
                    (format!("<= {max}"), Some(std_err <= max))
                }
                (1, 0) => {
                    let r = uat_err / std_err;
                    ("1.5 <= UAT/standard <= 3".into(), Some((1.5..=3.0).contains(&r)))
                }
                (2, 0) => ("|JR - standard| <= 0.5".into(), Some((jr_err - std_err).abs() <= 0.5)),
                (0, 1) => {
                    let min = if mnist { 70.0 } else { 75.0 };
                    (format!(">= {min}"), Some(std_uer >= min))
                }
                (2, 1) if mnist => (
                    "<= 35, standard/JR >= 2, <= UAT + 5".into(),
                    Some(jr_uer <= 35.0 && std_uer / jr_uer >= 2.0 && jr_uer <= uat_uer + 5.0),
                ),
                (2, 1) => ("<= 45".into(), Some(jr_uer <= 45.0)),
                (0, 2) if mnist => (">= 70".into(), Some(m(0, 2) >= 70.0)),
                (2, 2) if mnist => ("<= 35".into(), Some(m(2, 2) <= 35.0)),
                _ => ("-".into(), None),
            };
            out.push(Cell {
                dataset: d.to_string(),
                model: model.to_string(),
                metric: metric.to_string(),
                value: m(mi, ki),
                published: published[mi][ki],
                criterion,
                pass: pass.map_or("-".into(), verdict),
            });
        }
    }
    out
}

/// Aligned text rendering: `measured (published)` per cell, failing cells marked `!`.
pub fn render(blocks: &[DatasetBlock], cells: &[Cell]) -> String {
    let mut s = String::new();
    let labels = ["Test Error", "Untargeted UER", "Average TSR"];
    for b in blocks {
        let _ = writeln!(s, "{} (eps = {}), % , median over seeds, published values in parentheses", b.dataset, b.epsilon);
        let _ = writeln!(s, "{:<16}{:>18}{:>18}{:>18}", "", "Standard", "UAT", "JR");
        for (ki, label) in labels.iter().enumerate() {
            let _ = write!(s, "{label:<16}");
            for model in MODELS {
                let c = cells
                    .iter()
                    .find(|c| c.dataset == b.dataset.as_str() && c.model == model && c.metric == METRICS[ki])
                    .expect("cell exists");
                let mark = if c.pass == "fail" { "!" } else { " " };
                let _ = write!(s, "{:>18}", format!("{:.2} ({:.2}){mark}", c.value, c.published));
            }
            s.push('\n');
        }
        s.push('\n');
    }
    for c in cells.iter().filter(|c| c.pass != "-") {
        let _ = writeln!(
            s,
            "{} {} {} = {:.2}: {} [{}]",
            c.dataset, c.model, c.metric, c.value, c.criterion, c.pass
        );
    }
    s
}

pub fn cmd_reproduce(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let hash = cfg.hash("reproduce");
    let datasets = match cfg.dataset {
        Some(d) => vec![d],
        None => vec![DatasetName::Mnist, DatasetName::FashionMnist],
    };
    // Check every checkpoint up front so a missing one fails fast.
    if !cfg.train_missing {
        for &d in &datasets {
            for v in variants(d) {
                for seed in cfg.seeds() {
                    let spec = ModelSpec::new(d, v, seed);
                    if !spec.checkpoint(&cfg.models_dir).exists() {
                        ensure_model(cfg, &spec)?;
                    }
                }
            }
        }
    }
    let mut blocks = Vec::new();
    for d in datasets {
        blocks.push(measure_dataset(cfg, d)?);
    }
    let cells: Vec<Cell> = blocks.iter().flat_map(cells).collect();
    write_csv(&cfg.out.join("table1.csv"), &hash, TABLE1_COLUMNS, &cells)?;
    let text = format!("{}{}", crate::output::preamble(&hash), render(&blocks, &cells));
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("table1.txt"), &text)?;
    write_config(&cfg.out, cfg, "reproduce")?;
    print!("{}", render(&blocks, &cells));
    Ok(cells)
}
