//! The temporal uncertainty-gated multi-task network and the interface every
//! variant implements.

mod amtl;
mod checkpoint;
mod config;
mod layers;

pub(crate) use amtl::masked_time_mean;
pub use amtl::{LatentDistribution, LatentVars, TaskHeads, TemporalAmtl};
pub use checkpoint::{Checkpoint, CheckpointParam, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{AlphaNorm, ModelConfig, MuActivation, TransferMode, UncertaintyMode};
pub use layers::Affine;

use crate::data::EpisodeBatch;
use crate::diffcore::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};
use crate::error::Result;
use crate::transfer::{AlphaBlock, TransferGraph};
use crate::variants::Family;

/// Log-clamp applied to probabilities before the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Skip the transfer layer (`C_d = f_d`).
    pub no_transfer: bool,
    /// Only this task's prediction is needed. Models may skip other tasks.
    pub task: Option<usize>,
}

impl ForwardOpts {
    pub fn train() -> Self {
        ForwardOpts {
            mode: Mode::Train,
            no_transfer: false,
            task: None,
        }
    }

    pub fn eval() -> Self {
        ForwardOpts {
            mode: Mode::Eval,
            no_transfer: false,
            task: None,
        }
    }
}

/// Result of a forward pass.
pub struct Forward {
    /// `B×1` probabilities per task; `None` for tasks that were not computed.
    pub probs: Vec<Option<Var>>,
    /// Latent distributions per task (empty for models without latents).
    pub latents: Vec<LatentVars>,
    pub alphas: Vec<AlphaBlock>,
}

/// Subset of parameters optimised together, optionally tied to one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Scope {
    pub name: String,
    pub task: Option<usize>,
    pub params: Vec<ParamId>,
}

impl Scope {
    pub fn all(store: &ParamStore) -> Self {
        Scope {
            name: "all".into(),
            task: None,
            params: store.ids().collect(),
        }
    }

    pub fn includes_task(&self, d: usize) -> bool {
        self.task.is_none_or(|t| t == d)
    }
}

pub struct Objective {
    pub total: Var,
    pub task_losses: Vec<Option<Var>>,
}

/// Common interface of every trainable variant.
pub trait Model: Send + Sync {
    fn family(&self) -> Family;
    fn config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &EpisodeBatch,
        rng: &mut RngStream,
        opts: ForwardOpts,
    ) -> Result<Forward>;

    /// Training loss restricted to `scope`.
    fn objective(
        &self,
        g: &mut Graph<'_>,
        fwd: &Forward,
        batch: &EpisodeBatch,
        l2: f64,
        scope: &Scope,
    ) -> Result<Objective> {
        let task_losses = task_bce(g, fwd, batch, scope)?;
        let present: Vec<Var> = task_losses.iter().flatten().copied().collect();
        let data = if present.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.add_n(&present)?
        };
        let decayed = decay_targets(self.store(), scope, batch);
        let total = add_weight_decay(g, data, l2, &decayed)?;
        Ok(Objective { total, task_losses })
    }

    /// Parameter groups trained one after another. Most models have one.
    fn scopes(&self) -> Vec<Scope> {
        vec![Scope::all(self.store())]
    }

    /// Called once before training with the full training set.
    fn prepare(&mut self, _train: &EpisodeBatch, _rng: &mut RngStream) -> Result<()> {
        Ok(())
    }

    /// Mean per-instance loss of each task on the last batch.
    fn after_step(&mut self, _task_losses: &[Option<f64>]) {}

    /// State outside the parameter store that a checkpoint must carry.
    fn extra_state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn load_extra_state(&mut self, _state: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

/// Masked cross-entropy of every task in `scope` that has at least one label
/// in `batch`.
pub fn task_bce(g: &mut Graph<'_>, fwd: &Forward, batch: &EpisodeBatch, scope: &Scope) -> Result<Vec<Option<Var>>> {
    let mut out = Vec::with_capacity(batch.num_tasks);
    for d in 0..batch.num_tasks {
        let p = match fwd.probs.get(d) {
            Some(Some(p)) if scope.includes_task(d) && batch.count_labeled(d) > 0 => *p,
            _ => {
                out.push(None);
                continue;
            }
        };
        out.push(Some(g.binary_cross_entropy(
            p,
            &batch.task_labels(d),
            &batch.task_weights(d),
            PROB_EPS,
        )?));
    }
    Ok(out)
}

/// Parameters of `scope` that take weight decay on `batch`: all of them
/// except the private `task{d}/` parameters of tasks with no label in it.
pub fn decay_targets(store: &ParamStore, scope: &Scope, batch: &EpisodeBatch) -> Vec<ParamId> {
    let absent: Vec<String> = (0..batch.num_tasks)
        .filter(|&d| batch.count_labeled(d) == 0)
        .map(|d| format!("task{d}/"))
        .collect();
    scope
        .params
        .iter()
        .copied()
        .filter(|&id| {
            let name = store.name(id);
            !absent.iter().any(|p| name.starts_with(p.as_str()))
        })
        .collect()
}

/// `loss + l2·Σ‖θ‖²` over `params`.
pub fn add_weight_decay(g: &mut Graph<'_>, loss: Var, l2: f64, params: &[ParamId]) -> Result<Var> {
    if l2 == 0.0 || params.is_empty() {
        return Ok(loss);
    }
    let mut terms = Vec::with_capacity(params.len());
    for &id in params {
        let p = g.param(id);
        let sq = g.square(p);
        terms.push(g.sum(sq));
    }
    let norm = g.add_n(&terms)?;
    let decay = g.scale(norm, l2);
    g.add(loss, decay)
}

/// Evaluation-mode probabilities, `[task][instance]`, computed in chunks of
/// `chunk` instances.
pub fn predict_proba(
    model: &dyn Model,
    batch: &EpisodeBatch,
    rng: &mut RngStream,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    predict_proba_with(model, batch, rng, chunk, ForwardOpts::eval())
}

/// [`predict_proba`] with explicit forward options. Tasks the model skips
/// come back as NaN.
pub fn predict_proba_with(
    model: &dyn Model,
    batch: &EpisodeBatch,
    rng: &mut RngStream,
    chunk: usize,
    opts: ForwardOpts,
) -> Result<Vec<Vec<f64>>> {
    let dn = batch.num_tasks;
    let mut out = vec![Vec::with_capacity(batch.len()); dn];
    let idx: Vec<usize> = (0..batch.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let sub = batch.select(part);
        let mut g = Graph::with_params(model.store());
        let fwd = model.forward(&mut g, &sub, rng, opts)?;
        for (d, col) in out.iter_mut().enumerate() {
            match fwd.probs.get(d).copied().flatten() {
                Some(p) => col.extend_from_slice(g.value(p).data()),
                None => col.extend(std::iter::repeat_n(f64::NAN, part.len())),
            }
        }
    }
    Ok(out)
}

/// Evaluation-mode transfer graphs, one per instance. Empty for models
/// without a transfer layer.
pub fn transfer_graphs(model: &dyn Model, batch: &EpisodeBatch, rng: &mut RngStream) -> Result<Vec<TransferGraph>> {
    let mut g = Graph::with_params(model.store());
    let fwd = model.forward(&mut g, batch, rng, ForwardOpts::eval())?;
    if fwd.alphas.is_empty() || fwd.latents.is_empty() {
        return Ok(Vec::new());
    }
    let ep: Vec<Option<Var>> = fwd.latents.iter().map(|l| l.epistemic).collect();
    let al: Vec<Option<Var>> = fwd.latents.iter().map(|l| l.aleatoric).collect();
    Ok((0..batch.len())
        .map(|b| {
            TransferGraph::from_forward(
                &g,
                model.config().transfer,
                &fwd.alphas,
                &ep,
                &al,
                batch.len(),
                b,
                batch.lengths[b],
            )
        })
        .collect())
}
