use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_csv, write_csv, CsvSchema, EpisodeBatch};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.5,
            valid: 0.25,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Spec(format!(
                "split fractions must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Train/valid/test sizes for `n` instances; the test split takes the
    /// rounding remainder.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let a = ((self.train * n as f64).round() as usize).min(n);
        let b = ((self.valid * n as f64).round() as usize).min(n - a);
        [a, b, n - a - b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: EpisodeBatch,
    pub valid: EpisodeBatch,
    pub test: EpisodeBatch,
    pub fractions: SplitFractions,
    pub seed: u64,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "tpamtl-dataset-manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub instances: usize,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub num_tasks: usize,
    pub num_features: usize,
    pub timesteps: usize,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub splits: Vec<SplitEntry>,
    /// Generating configuration, when the data is synthetic.
    #[serde(default)]
    pub source: serde_json::Value,
}

impl DatasetSplit {
    pub fn batches(&self) -> [&EpisodeBatch; 3] {
        [&self.train, &self.valid, &self.test]
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            num_features: self.train.num_features,
            num_tasks: self.train.num_tasks,
        }
    }

    /// Checks that no instance id appears in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, batch) in SPLIT_NAMES.iter().zip(self.batches()) {
            for id in &batch.ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Spec(format!("instance {id} appears twice (again in {name})")));
                }
            }
        }
        Ok(())
    }

    /// Writes one CSV per split plus the manifest into `dir`.
    pub fn save(&self, dir: &Path, source: serde_json::Value) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut splits = Vec::with_capacity(3);
        for (name, batch) in SPLIT_NAMES.iter().zip(self.batches()) {
            let file = format!("{name}.csv");
            let path = dir.join(&file);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_csv(batch, std::io::BufWriter::new(f))?;
            splits.push(SplitEntry {
                name: name.to_string(),
                file,
                instances: batch.len(),
                ids: batch.ids.clone(),
            });
        }
        let manifest = DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            num_tasks: self.train.num_tasks,
            num_features: self.train.num_features,
            timesteps: self.train.steps.max(self.valid.steps).max(self.test.steps),
            seed: self.seed,
            fractions: self.fractions,
            splits,
            source,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reads a directory written by [`DatasetSplit::save`].
    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Spec(format!("{}: not a dataset manifest", path.display())));
        }
        let schema = CsvSchema {
            num_features: manifest.num_features,
            num_tasks: manifest.num_tasks,
        };
        let mut batches = Vec::with_capacity(3);
        for name in SPLIT_NAMES {
            let entry = manifest
                .splits
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::Spec(format!("manifest has no {name} split")))?;
            let (batch, _) = read_csv(&dir.join(&entry.file), &schema)?;
            if batch.ids != entry.ids {
                return Err(Error::Spec(format!(
                    "{} does not match the manifest membership",
                    entry.file
                )));
            }
            batches.push(batch);
        }
        let test = batches.pop().expect("three splits");
        let valid = batches.pop().expect("three splits");
        let train = batches.pop().expect("three splits");
        let split = DatasetSplit {
            train,
            valid,
            test,
            fractions: manifest.fractions,
            seed: manifest.seed,
        };
        split.check_disjoint()?;
        Ok((split, manifest))
    }
}
