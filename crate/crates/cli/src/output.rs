//! Result files. Every CSV starts with two comment lines,
//!
//! ```text
//! # jacguard <version>
//! # config_hash: <sha256>
//! ```
//!
//! followed by a header row. The column sets are fixed per file kind (see the
//! `*_COLUMNS` constants) and nothing time- or host-dependent is written, so a
//! deterministic rerun produces identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::VERSION;

pub const TRAIN_COLUMNS: &[&str] = &["epoch", "train_loss", "ce_loss", "jr_term", "clean_acc"];
pub const ATTACK_COLUMNS: &[&str] = &["dataset", "model", "attack", "epsilon", "target", "metric", "value", "seed"];
pub const EVAL_COLUMNS: &[&str] = &["dataset", "model", "metric", "value"];
pub const SWEEP_COLUMNS: &[&str] = &["dataset", "lambda_jr", "epsilon", "metric", "value", "sd", "seed"];
pub const HIST_COLUMNS: &[&str] = &["bin_lo", "bin_hi", "count"];
pub const JACSIM_COLUMNS: &[&str] = &[
    "dataset",
    "model",
    "n_inputs",
    "mode",
    "pairs",
    "median",
    "mean",
    "degenerate_inputs",
    "degenerate_pairs",
];
pub const TABLE1_COLUMNS: &[&str] = &["dataset", "model", "metric", "value", "published", "criterion", "pass"];

pub fn preamble(config_hash: &str) -> String {
    format!("# jacguard {VERSION}\n# config_hash: {config_hash}\n")
}

/// Writes `rows` under the preamble; `columns` must match the row field order.
pub fn write_csv<R: Serialize>(path: &Path, config_hash: &str, columns: &[&str], rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = preamble(config_hash).into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        w.write_record(columns)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes the resolved configuration next to the results.
pub fn write_config(dir: &Path, cfg: &crate::config::ExperimentConfig, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("config.toml");
    let text = format!(
        "# jacguard {VERSION}\n# command: {command}\n# config_hash: {}\n{}",
        cfg.hash(command),
        cfg.to_toml()
    );
    fs::write(&path, text)?;
    Ok(path)
}

/// Parses a result CSV: returns the preamble hash, the header and the rows.
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let version = lines.next().unwrap_or_default();
    anyhow::ensure!(version == format!("# jacguard {VERSION}"), "bad version line `{version}`");
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash: "))
        .context("missing config_hash line")?
        .to_string();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok((hash, header, rows))
}
