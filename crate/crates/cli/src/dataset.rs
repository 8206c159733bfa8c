//! Directory-convention dataset manifests.
//!
//! A dataset root holds `rgb/`, `depth/` (or `flow/`) and `gt/`
//! subdirectories whose files match by stem. Entries are sorted by id so
//! iteration order is deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dfmnet_core::model::{InputMode, Sample};

use crate::error::{CliError, Result};
use crate::imgio;

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub aux: PathBuf,
    pub gt: Option<PathBuf>,
}

pub struct DatasetManifest {
    pub root: PathBuf,
    pub mode: InputMode,
    pub entries: Vec<ManifestEntry>,
}

pub fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::MissingFile(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

impl DatasetManifest {
    /// Scan `root` for the subdirectory layout. `require_gt` controls
    /// whether entries without a ground-truth file are an error.
    pub fn scan(root: &Path, mode: InputMode, require_gt: bool) -> Result<DatasetManifest> {
        let rgb = stems(&root.join("rgb"))?;
        let aux_dir = match mode {
            InputMode::Rgbd => "depth",
            InputMode::Flow3 => "flow",
        };
        let aux = stems(&root.join(aux_dir))?;
        let gt = if root.join("gt").is_dir() { stems(&root.join("gt"))? } else { BTreeMap::new() };
        let mut entries = Vec::new();
        for (id, rgb_path) in &rgb {
            let aux_path = aux.get(id).ok_or_else(|| {
                CliError::MissingFile(root.join(aux_dir).join(format!("{id}.*")))
            })?;
            let gt_path = gt.get(id).cloned();
            if require_gt && gt_path.is_none() {
                return Err(CliError::MissingFile(root.join("gt").join(format!("{id}.*"))));
            }
            entries.push(ManifestEntry {
                id: id.clone(),
                rgb: rgb_path.clone(),
                aux: aux_path.clone(),
                gt: gt_path,
            });
        }
        if entries.is_empty() {
            return Err(CliError::Data(format!("no samples under {}", root.display())));
        }
        Ok(DatasetManifest { root: root.to_path_buf(), mode, entries })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let gt = e.gt.as_ref().ok_or_else(|| {
                    CliError::Data(format!(
                        "sample {} under {} has no ground truth",
                        e.id,
                        self.root.display()
                    ))
                })?;
                imgio::load_sample(&e.rgb, &e.aux, gt, self.mode == InputMode::Flow3)
            })
            .collect()
    }
}
