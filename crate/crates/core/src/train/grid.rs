use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, RunRecord, TrainConfig};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::variants::{build, VariantSpec};

/// One hyperparameter combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub hidden_size: usize,
    pub embed_layers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub dropout_rate: f64,
}

impl GridCell {
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        m.hidden_size = self.hidden_size;
        m.embed_layers = self.embed_layers;
        m.dropout_rate = self.dropout_rate;
        let mut t = train.clone();
        t.batch_size = self.batch_size;
        t.learning_rate = self.learning_rate;
        t.l2 = self.l2;
        t.dropout_rate = self.dropout_rate;
        (m, t)
    }

    /// Tie-break order: smaller hidden size, then smaller learning rate, then
    /// the remaining fields ascending.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.hidden_size
            .cmp(&other.hidden_size)
            .then(self.learning_rate.total_cmp(&other.learning_rate))
            .then(self.embed_layers.cmp(&other.embed_layers))
            .then(self.batch_size.cmp(&other.batch_size))
            .then(self.l2.total_cmp(&other.l2))
            .then(self.dropout_rate.total_cmp(&other.dropout_rate))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub hidden_size: Vec<usize>,
    pub embed_layers: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub l2: Vec<f64>,
    pub dropout_rate: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            hidden_size: vec![8, 16, 32, 64],
            embed_layers: vec![2, 3, 6],
            batch_size: vec![32, 64, 128, 256],
            learning_rate: vec![0.01, 0.001, 0.0001],
            l2: vec![0.02, 0.002, 0.0002],
            dropout_rate: vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5],
        }
    }
}

impl Grid {
    pub fn single(cell: GridCell) -> Self {
        Grid {
            hidden_size: vec![cell.hidden_size],
            embed_layers: vec![cell.embed_layers],
            batch_size: vec![cell.batch_size],
            learning_rate: vec![cell.learning_rate],
            l2: vec![cell.l2],
            dropout_rate: vec![cell.dropout_rate],
        }
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &hidden_size in &self.hidden_size {
            for &embed_layers in &self.embed_layers {
                for &batch_size in &self.batch_size {
                    for &learning_rate in &self.learning_rate {
                        for &l2 in &self.l2 {
                            for &dropout_rate in &self.dropout_rate {
                                out.push(GridCell {
                                    hidden_size,
                                    embed_layers,
                                    batch_size,
                                    learning_rate,
                                    l2,
                                    dropout_rate,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridCell,
    /// Mean validation macro-AUROC per cell, in the order given.
    pub scores: Vec<(GridCell, f64)>,
    /// One record per (cell, seed), cell-major.
    pub records: Vec<RunRecord>,
}

/// Trains every `(cell, seed)` pair on up to `workers` threads and picks
/// the cell with the best mean validation macro-AUROC.
pub fn grid_search(
    spec: &VariantSpec,
    cells: &[GridCell],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    split: &DatasetSplit,
    seeds: &[u64],
    workers: usize,
) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(Error::Config("grid search over an empty grid".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("grid search needs at least one seed".into()));
    }
    let jobs: Vec<(GridCell, u64)> = cells.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let run = |&(cell, seed): &(GridCell, u64)| -> Result<RunRecord> {
        let (mcfg, tcfg) = cell.apply(base_model, base_train);
        let mut model = build(spec, &mcfg, seed)?;
        fit(model.as_mut(), spec, split, &tcfg, seed)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let scores: Vec<(GridCell, f64)> = cells
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mine = &records[i * seeds.len()..(i + 1) * seeds.len()];
            (c, mine.iter().map(|r| r.valid_macro).sum::<f64>() / mine.len() as f64)
        })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.canonical_cmp(&b.0)))
        .map(|s| s.0)
        .expect("non-empty grid");
    Ok(GridResult { best, scores, records })
}
