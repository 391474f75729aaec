use std::io::BufRead;
use std::path::Path;

use tpamtl::data::{
    generate_imbalanced_tasks, generate_temporal_tasks, ingest_csv, CsvSchema, DatasetManifest, DatasetSplit,
};

use crate::config::{DatasetConfig, ExperimentConfig, Generator};
use crate::error::{CliError, CliResult};

/// Builds the configured dataset in memory, with a JSON description of its
/// source for the manifest.
pub fn build_dataset(cfg: &ExperimentConfig) -> CliResult<(DatasetSplit, serde_json::Value)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { generator, .. } => {
            let spec = cfg.dataset.synthetic_spec()?.expect("synthetic source");
            let data = match generator {
                Generator::Imbalanced => generate_imbalanced_tasks(&spec),
                Generator::Temporal => generate_temporal_tasks(&spec),
            }
            .map_err(|e| CliError::Config(format!("dataset.spec: {e}")))?;
            let source = serde_json::json!({ "generator": generator, "spec": spec });
            Ok((data.split, source))
        }
        DatasetConfig::Csv {
            path,
            split,
            split_seed,
        } => {
            let schema = infer_schema(path)?;
            let (data, report) = ingest_csv(path, &schema, *split, *split_seed)?;
            let source = serde_json::json!({ "csv": path, "ingest": report });
            Ok((data, source))
        }
        DatasetConfig::Directory { path } => {
            let (data, manifest) = DatasetSplit::load(path)?;
            Ok((data, manifest.source))
        }
    }
}

fn infer_schema(path: &Path) -> CliResult<CsvSchema> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let schema = CsvSchema::infer(&cols);
        if schema.num_features == 0 || schema.num_tasks == 0 {
            return Err(CliError::Config(format!(
                "{}: header needs feature_* and label_task_* columns",
                path.display()
            )));
        }
        return Ok(schema);
    }
    Err(CliError::Config(format!("{}: no header row", path.display())))
}

/// Writes the dataset to `dir`. Same config, same bytes.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> CliResult<DatasetManifest> {
    let (data, source) = build_dataset(cfg)?;
    crate::store::create_dir(dir)?;
    Ok(data.save(dir, source)?)
}
