use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tpamtl::data::{DatasetSplit, MANIFEST_FILE};
use tpamtl::eval::{aggregate, ResultTable, RunScores};
use tpamtl::model::Checkpoint;
use tpamtl::train::{fit, grid_search, GridCell, RunRecord};
use tpamtl::variants::{build, VariantSpec};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::generate::build_dataset;
use crate::store::{self, read_json, write_atomic, write_json};

/// Grid outcome kept on disk; the per-cell run records are not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridChoice {
    pub best: GridCell,
    pub scores: Vec<(GridCell, f64)>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedCell {
    pub variant: String,
    pub seed: u64,
    pub record: String,
}

/// Loads the experiment's dataset, materialising it under `data/` on the
/// first call.
pub fn experiment_data(cfg: &ExperimentConfig, root: &Path) -> CliResult<DatasetSplit> {
    let dir = store::data_dir(root);
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(DatasetSplit::load(&dir)?.0);
    }
    let (data, source) = build_dataset(cfg)?;
    store::create_dir(&dir)?;
    data.save(&dir, source)?;
    Ok(data)
}

/// Records the config in `root`, refusing a directory that holds a
/// different experiment.
fn claim(cfg: &ExperimentConfig, root: &Path) -> CliResult<()> {
    let path = root.join(store::EXPERIMENT_FILE);
    if path.exists() {
        let existing: ExperimentConfig = read_json(&path)?;
        if &existing != cfg {
            return Err(CliError::Config(format!(
                "{} holds a different experiment; choose another eval.output_dir",
                root.display()
            )));
        }
        return Ok(());
    }
    write_json(&path, cfg)
}

fn choose_cell(
    cfg: &ExperimentConfig,
    spec: &VariantSpec,
    data: &DatasetSplit,
    root: &Path,
    workers: usize,
) -> CliResult<GridCell> {
    let cells = cfg.grid_cells();
    if cells.len() == 1 {
        return Ok(cells[0]);
    }
    let path = store::grid_path(root, &spec.label());
    if path.exists() {
        let choice: GridChoice = read_json(&path)?;
        return Ok(choice.best);
    }
    let base = cfg.model.config(data.train.num_tasks, data.train.num_features);
    let seeds = cfg.grid_seeds();
    let result = grid_search(spec, &cells, &base, &cfg.train, data, &seeds, workers)?;
    let choice = GridChoice {
        best: result.best,
        scores: result.scores,
        seeds,
    };
    write_json(&path, &choice)?;
    Ok(choice.best)
}

fn run_cell(
    cfg: &ExperimentConfig,
    spec: &VariantSpec,
    cell: GridCell,
    seed: u64,
    data: &DatasetSplit,
    root: &Path,
) -> CliResult<RunRecord> {
    let label = spec.label();
    let base = cfg.model.config(data.train.num_tasks, data.train.num_features);
    let (mcfg, tcfg) = cell.apply(&base, &cfg.train);
    let mut model = build(spec, &mcfg, seed)?;
    let mut record = fit(model.as_mut(), spec, data, &tcfg, seed)?;
    let ckpt = store::checkpoint_path(root, &label, seed);
    let text = Checkpoint::from_model(model.as_ref(), seed).to_json()?;
    write_atomic(&ckpt, text.as_bytes())?;
    record.checkpoint = Some(ckpt.strip_prefix(root).unwrap_or(&ckpt).display().to_string());
    write_json(&store::record_path(root, &label, seed), &record)?;
    let _ = std::fs::remove_file(store::error_path(root, &label, seed));
    Ok(record)
}

/// Every finished record, in config order. Errors list the missing cells.
pub fn load_records(cfg: &ExperimentConfig, root: &Path) -> CliResult<Vec<RunRecord>> {
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for spec in &cfg.variants {
        for &seed in &cfg.eval.seeds {
            let path = store::record_path(root, &spec.label(), seed);
            if path.exists() {
                records.push(read_json(&path)?);
            } else {
                missing.push(format!("{} seed {seed}", spec.label()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(tpamtl::Error::MissingCells(missing.join(", ")).into());
    }
    Ok(records)
}

/// Mean and standard error over seeds for every variant.
pub fn results_table(records: &[RunRecord], tasks: &[String], seeds: usize) -> CliResult<ResultTable> {
    let mut runs = Vec::with_capacity(records.len());
    for r in records {
        let task_auroc = r
            .test_auroc
            .iter()
            .enumerate()
            .map(|(d, a)| {
                a.ok_or_else(|| {
                    tpamtl::Error::UndefinedMetric(format!(
                        "{} seed {}: test AUROC of {} is undefined",
                        r.label, r.seed, tasks[d]
                    ))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        runs.push(RunScores {
            variant: r.label.clone(),
            seed: r.seed,
            task_auroc,
        });
    }
    Ok(aggregate(&runs, tasks, seeds)?)
}

/// Trains all missing cells and writes the results table once every cell
/// has a record.
pub fn run(cfg: &ExperimentConfig, root: &Path, workers: usize) -> CliResult<String> {
    store::create_dir(root)?;
    claim(cfg, root)?;
    let data = experiment_data(cfg, root)?;
    let tasks = cfg.task_names(data.train.num_tasks)?;
    for spec in &cfg.variants {
        spec.resolve(&cfg.model.config(data.train.num_tasks, data.train.num_features))
            .map_err(|e| CliError::Config(format!("variant {}: {e}", spec.label())))?;
    }

    let mut jobs = Vec::new();
    for spec in &cfg.variants {
        let pending: Vec<u64> = cfg
            .eval
            .seeds
            .iter()
            .copied()
            .filter(|&s| !store::record_path(root, &spec.label(), s).exists())
            .collect();
        if pending.is_empty() {
            continue;
        }
        let cell = choose_cell(cfg, spec, &data, root, workers)?;
        jobs.extend(pending.into_iter().map(|s| (spec.clone(), cell, s)));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<(String, u64, CliResult<RunRecord>)> = pool.install(|| {
        jobs.par_iter()
            .map(|(spec, cell, seed)| (spec.label(), *seed, run_cell(cfg, spec, *cell, *seed, &data, root)))
            .collect()
    });

    let mut failures = String::new();
    let mut failed = 0;
    for (label, seed, outcome) in &outcomes {
        if let Err(e) = outcome {
            failed += 1;
            let _ = writeln!(failures, "  {label} seed {seed}: {e}");
            write_atomic(&store::error_path(root, label, *seed), format!("{e}\n").as_bytes())?;
        }
    }

    let mut completed = Vec::new();
    for spec in &cfg.variants {
        for &seed in &cfg.eval.seeds {
            let path = store::record_path(root, &spec.label(), seed);
            if path.exists() {
                completed.push(CompletedCell {
                    variant: spec.label(),
                    seed,
                    record: path.strip_prefix(root).unwrap_or(&path).display().to_string(),
                });
            }
        }
    }
    write_json(&root.join(store::COMPLETED_FILE), &completed)?;

    if failed > 0 {
        return Err(CliError::Cells {
            failed,
            total: cfg.variants.len() * cfg.eval.seeds.len(),
            details: failures.trim_end().to_string(),
        });
    }
    let trained = outcomes.len();
    let reused = completed.len() - trained;
    if cfg.eval.seeds.len() < 2 {
        return Ok(format!(
            "{trained} cells trained, {reused} reused\nresults table needs at least 2 seeds"
        ));
    }
    let records = load_records(cfg, root)?;
    let table = results_table(&records, &tasks, cfg.eval.seeds.len())?;
    write_json(&root.join(store::RESULTS_FILE), &table)?;
    let text = table.to_string();
    write_atomic(&root.join("results.txt"), text.as_bytes())?;
    Ok(format!("{trained} cells trained, {reused} reused\n{text}"))
}
