use std::path::Path;

use anyhow::{Context, Result};
use jacguard::data::{Dataset, DatasetName, Split};

/// Loads one split, pointing at `--data-dir` when files are missing.
pub fn load_split(root: &Path, name: DatasetName, split: Split) -> Result<Dataset> {
    Dataset::load(root, name, split).with_context(|| {
        format!(
            "cannot load {name} {split} split from {} (check --data-dir or {})",
            root.display(),
            crate::config::DATA_DIR_ENV
        )
    })
}
