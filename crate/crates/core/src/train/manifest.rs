use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::{load_pairs, InstructionSample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// JSON-lines pair file, relative to the manifest's directory.
    pub path: PathBuf,
    pub pair_count: usize,
}

/// Datasets making up a training mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub datasets: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl MixtureManifest {
    pub fn new(datasets: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            datasets,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Parses and validates the manifest; pair files are not opened.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        m.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::config("manifest lists no datasets"));
        }
        for e in &self.datasets {
            if e.pair_count == 0 {
                return Err(Error::config(format!("dataset {} has no pairs", e.name)));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.datasets.iter().map(|e| e.pair_count).sum()
    }

    /// Share of the aggregated pool held by each dataset.
    pub fn proportions(&self) -> Vec<(String, f64)> {
        let total = self.total() as f64;
        self.datasets
            .iter()
            .map(|e| (e.name.clone(), e.pair_count as f64 / total))
            .collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Reads every pair file in order into one pool. Each file must hold
    /// exactly the declared number of pairs.
    pub fn load_pool(&self) -> Result<Vec<InstructionSample>> {
        let mut pool = Vec::with_capacity(self.total());
        for e in &self.datasets {
            let path = self.resolve(e);
            let mut pairs = load_pairs(&path)?;
            if pairs.len() != e.pair_count {
                return Err(Error::config(format!(
                    "dataset {} declares {} pairs but {} holds {}",
                    e.name,
                    e.pair_count,
                    path.display(),
                    pairs.len()
                )));
            }
            for p in &mut pairs {
                if p.dataset.is_empty() {
                    p.dataset = e.name.clone();
                }
            }
            pool.extend(pairs);
        }
        Ok(pool)
    }
}
