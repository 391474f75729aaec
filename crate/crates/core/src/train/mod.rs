//! Adam, mini-batch fitting with early stopping, and grid search.

mod grid;

pub use grid::{grid_search, Grid, GridCell, GridResult};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, EpisodeBatch};
use crate::diffcore::{Graph, ParamId, ParamStore, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::eval::masked_auroc;
use crate::model::{predict_proba_with, ForwardOpts, Model, ModelConfig, Scope};
use crate::variants::VariantSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, starting at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        let zeros: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                let [r, c] = store.value(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of `ids` with `grads` (same order).
pub fn adam_step(
    store: &mut ParamStore,
    ids: &[ParamId],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if grads.len() != ids.len() || state.m.len() != ids.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            left: [ids.len(), state.m.len()],
            right: [grads.len(), state.v.len()],
        });
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            iteration: state.step as usize,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, &id) in ids.iter().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn default_max_iterations() -> usize {
    100_000
}

fn default_patience() -> usize {
    5
}

fn default_eval_chunk() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Cap on optimiser steps per parameter scope.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub max_epochs: Option<usize>,
    pub l2: f64,
    pub dropout_rate: f64,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            max_iterations: default_max_iterations(),
            max_epochs: None,
            l2: 0.0002,
            dropout_rate: 0.1,
            patience: default_patience(),
            eval_chunk: default_eval_chunk(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("l2 must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        if self.eval_chunk == 0 {
            return fail("eval_chunk must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub scope: String,
    pub epoch: usize,
    pub iterations: usize,
    /// Mean per-labelled-instance training loss over the epoch.
    pub train_loss: f64,
    pub valid_auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: VariantSpec,
    pub label: String,
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Best validation macro-AUROC per scope.
    pub best_valid: Vec<f64>,
    /// Validation macro-AUROC of the restored model over all tasks.
    pub valid_macro: f64,
    /// Test AUROC per task; `None` where the test split lacks both classes.
    pub test_auroc: Vec<Option<f64>>,
    pub test_macro: f64,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

/// Per-task AUROC of `model` on the labelled instances of `batch`.
/// `only` restricts the evaluation to one task.
pub fn evaluate(
    model: &dyn Model,
    batch: &EpisodeBatch,
    seed: u64,
    chunk: usize,
    only: Option<usize>,
) -> Result<Vec<Option<f64>>> {
    let dn = batch.num_tasks;
    let sub;
    let view = match only {
        Some(d) => {
            let idx: Vec<usize> = (0..batch.len()).filter(|&b| batch.is_labeled(b, d)).collect();
            sub = batch.select(&idx);
            &sub
        }
        None => batch,
    };
    if view.is_empty() {
        return Ok(vec![None; dn]);
    }
    let opts = ForwardOpts {
        task: only,
        ..ForwardOpts::eval()
    };
    let mut rng = RngStream::new(seed).child("evaluate");
    let probs = predict_proba_with(model, view, &mut rng, chunk, opts)?;
    Ok((0..dn)
        .map(|d| {
            if only.is_some_and(|o| o != d) {
                return None;
            }
            masked_auroc(&probs[d], &view.task_labels(d), &view.task_weights(d)).ok()
        })
        .collect())
}

/// Mean of the defined entries, or 0.5 when none is defined.
pub fn macro_of(values: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        0.5
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains `model` on `split.train`, one parameter scope at a time, with
/// early stopping on validation macro-AUROC. Every scope ends at its best
/// validation epoch.
pub fn fit(
    model: &mut dyn Model,
    spec: &VariantSpec,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let root = RngStream::new(seed).child("fit");
    model.prepare(&split.train, &mut root.child("prepare"))?;
    let mut epochs = Vec::new();
    let mut best_valid = Vec::new();
    for scope in model.scopes() {
        let best = fit_scope(model, &scope, split, cfg, seed, &root, &mut epochs)?;
        best_valid.push(best);
    }
    let valid = evaluate(model, &split.valid, seed, cfg.eval_chunk, None)?;
    let test = evaluate(model, &split.test, seed, cfg.eval_chunk, None)?;
    Ok(RunRecord {
        variant: spec.clone(),
        label: spec.label(),
        config: model.config().clone(),
        train: cfg.clone(),
        seed,
        epochs,
        best_valid,
        valid_macro: macro_of(&valid),
        test_macro: macro_of(&test),
        test_auroc: test,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

fn fit_scope(
    model: &mut dyn Model,
    scope: &Scope,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    seed: u64,
    root: &RngStream,
    epochs: &mut Vec<EpochRecord>,
) -> Result<f64> {
    let train = &split.train;
    let pool: Vec<usize> = match scope.task {
        Some(d) => (0..train.len()).filter(|&b| train.is_labeled(b, d)).collect(),
        None => (0..train.len()).collect(),
    };
    let mut rng = root.child(&format!("scope/{}", scope.name));
    let mut state = AdamState::new(model.store(), &scope.params);
    let valid_score = |model: &dyn Model| -> Result<f64> {
        Ok(macro_of(&evaluate(
            model,
            &split.valid,
            seed,
            cfg.eval_chunk,
            scope.task,
        )?))
    };
    let mut best = valid_score(model)?;
    let mut best_params = model.store().snapshot(&scope.params);
    let mut stale = 0;
    let mut iteration = 0;
    let mut epoch = 0;
    let opts = ForwardOpts {
        task: scope.task,
        ..ForwardOpts::train()
    };
    'outer: while iteration < cfg.max_iterations && cfg.max_epochs.is_none_or(|m| epoch < m) && !pool.is_empty() {
        let mut order = pool.clone();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for part in order.chunks(cfg.batch_size) {
            if iteration >= cfg.max_iterations {
                break;
            }
            let batch = train.select(part);
            let (grads, losses) = {
                let mut g = Graph::with_params(model.store());
                let fwd = model.forward(&mut g, &batch, &mut rng, opts)?;
                let obj = model.objective(&mut g, &fwd, &batch, cfg.l2, scope)?;
                let total = g.value(obj.total).item();
                if !total.is_finite() {
                    model.store_mut().restore(&scope.params, &best_params);
                    return Err(Error::NonFinite {
                        what: "loss",
                        iteration,
                    });
                }
                g.backward(obj.total)?;
                let grads: Vec<Tensor> = scope.params.iter().map(|&id| g.param_grad(id)).collect();
                let losses: Vec<Option<f64>> = obj
                    .task_losses
                    .iter()
                    .enumerate()
                    .map(|(d, l)| l.map(|l| g.value(l).item() / batch.count_labeled(d) as f64))
                    .collect();
                (grads, losses)
            };
            if let Err(e) = adam_step(
                model.store_mut(),
                &scope.params,
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.adam,
            ) {
                model.store_mut().restore(&scope.params, &best_params);
                return Err(e);
            }
            for (d, l) in losses.iter().enumerate() {
                if let Some(l) = l {
                    let n = batch.count_labeled(d);
                    loss_sum += l * n as f64;
                    loss_count += n;
                }
            }
            model.after_step(&losses);
            iteration += 1;
        }
        epoch += 1;
        let score = valid_score(model)?;
        epochs.push(EpochRecord {
            scope: scope.name.clone(),
            epoch,
            iterations: iteration,
            train_loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                0.0
            },
            valid_auroc: score,
        });
        if score > best {
            best = score;
            best_params = model.store().snapshot(&scope.params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break 'outer;
            }
        }
    }
    model.store_mut().restore(&scope.params, &best_params);
    Ok(best)
}
