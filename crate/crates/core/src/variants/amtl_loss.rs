use serde::{Deserialize, Serialize};

use super::Family;
use crate::data::EpisodeBatch;
use crate::diffcore::{leaky_relu as leaky_relu_scalar, sigmoid as sigmoid_scalar};
use crate::diffcore::{Graph, ParamStore, RngStream};
use crate::error::{Error, Result};
use crate::model::{task_bce, Forward, ForwardOpts, Model, ModelConfig, Scope, TemporalAmtl};
use crate::transfer::Gate;

pub const TRACKER_DECAY: f64 = 0.99;

/// Exponential moving average of each task's mean per-instance loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLossTracker {
    pub decay: f64,
    pub means: Vec<Option<f64>>,
}

impl TaskLossTracker {
    pub fn new(num_tasks: usize) -> Self {
        TaskLossTracker {
            decay: TRACKER_DECAY,
            means: vec![None; num_tasks],
        }
    }

    pub fn update(&mut self, losses: &[Option<f64>]) {
        for (m, l) in self.means.iter_mut().zip(losses) {
            if let Some(l) = *l {
                if l.is_finite() {
                    *m = Some(match *m {
                        Some(prev) => self.decay * prev + (1.0 - self.decay) * l,
                        None => l,
                    });
                }
            }
        }
    }

    /// Every task's mean, or [`Error::EmptyTracker`] naming the first task
    /// without one.
    pub fn values(&self) -> Result<Vec<f64>> {
        self.means
            .iter()
            .enumerate()
            .map(|(d, m)| m.ok_or(Error::EmptyTracker(d)))
            .collect()
    }
}

/// Transfer gated by running task losses instead of features: `α_{j,d}` is a
/// learned function of the current losses of `j` and `d` only, so it is the
/// same for every instance and timestep.
#[derive(Clone, Debug)]
pub struct AmtlLoss {
    inner: TemporalAmtl,
    tracker: TaskLossTracker,
}

impl AmtlLoss {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let dn = config.num_tasks;
        Ok(AmtlLoss {
            inner: TemporalAmtl::with_gate(config, Gate::TaskLoss, Family::AmtlLoss, seed)?,
            tracker: TaskLossTracker::new(dn),
        })
    }

    pub fn tracker(&self) -> &TaskLossTracker {
        &self.tracker
    }

    pub fn inner(&self) -> &TemporalAmtl {
        &self.inner
    }

    /// `α_{j,d}` at the tracker's current losses.
    pub fn transfer_weight(&self, j: usize, d: usize) -> Result<f64> {
        let losses = self.tracker.values()?;
        let n = losses.len();
        if j >= n || d >= n {
            return Err(Error::UnknownTask {
                task: j.max(d),
                num_tasks: n,
            });
        }
        amtl_loss_weight(self, j, d, losses[j], losses[d])
    }

    pub fn set_tracker(&mut self, tracker: TaskLossTracker) -> Result<()> {
        if tracker.means.len() != self.inner.config().num_tasks {
            return Err(Error::Config("loss tracker has the wrong number of tasks".into()));
        }
        self.tracker = tracker;
        Ok(())
    }
}

/// Value-level transfer weight for a source loss and target loss, using the
/// stored `F_{j,d}` parameters. Sigmoid normalised.
pub fn amtl_loss_weight(model: &AmtlLoss, j: usize, d: usize, source_loss: f64, target_loss: f64) -> Result<f64> {
    let tp = model.inner.transfer_params();
    let ids = tp.gate_param_ids(j, d);
    if ids.is_empty() {
        return Err(Error::Config(format!("no transfer from task {j} to task {d}")));
    }
    let store = model.store();
    let (ws, wt, hb, wo, bo) = (
        store.value(ids[0]),
        store.value(ids[1]),
        store.value(ids[2]),
        store.value(ids[3]),
        store.value(ids[4]),
    );
    let mut logit = bo.item();
    for c in 0..tp.hidden_size {
        let h = source_loss * ws.get(0, c) + target_loss * wt.get(0, c) + hb.get(0, c);
        logit += leaky_relu_scalar(h, tp.slope) * wo.get(c, 0);
    }
    Ok(sigmoid_scalar(logit))
}

impl Model for AmtlLoss {
    fn family(&self) -> Family {
        Family::AmtlLoss
    }

    fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    fn store(&self) -> &ParamStore {
        self.inner.store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.inner.store_mut()
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &EpisodeBatch,
        rng: &mut RngStream,
        opts: ForwardOpts,
    ) -> Result<Forward> {
        if opts.no_transfer {
            return self.inner.forward_with(g, batch, rng, opts, None);
        }
        let losses = self.tracker.values()?;
        self.inner.forward_with(g, batch, rng, opts, Some(&losses))
    }

    /// Seeds the tracker with each task's loss under a transfer-free pass.
    fn prepare(&mut self, train: &EpisodeBatch, rng: &mut RngStream) -> Result<()> {
        let dn = self.inner.config().num_tasks;
        let mut sums = vec![0.0; dn];
        let mut counts = vec![0usize; dn];
        let idx: Vec<usize> = (0..train.len()).collect();
        let scope = Scope::all(self.store());
        let opts = ForwardOpts {
            no_transfer: true,
            ..ForwardOpts::eval()
        };
        for part in idx.chunks(512) {
            let sub = train.select(part);
            let mut g = Graph::with_params(self.store());
            let fwd = self.inner.forward_with(&mut g, &sub, rng, opts, None)?;
            let losses = task_bce(&mut g, &fwd, &sub, &scope)?;
            for d in 0..dn {
                if let Some(l) = losses[d] {
                    sums[d] += g.value(l).item();
                    counts[d] += sub.count_labeled(d);
                }
            }
        }
        let means: Vec<Option<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        self.tracker = TaskLossTracker::new(dn);
        self.tracker.update(&means);
        if let Some(d) = self.tracker.means.iter().position(Option::is_none) {
            return Err(Error::EmptyTracker(d));
        }
        Ok(())
    }

    fn after_step(&mut self, task_losses: &[Option<f64>]) {
        self.tracker.update(task_losses);
    }

    fn extra_state(&self) -> serde_json::Value {
        serde_json::to_value(&self.tracker).unwrap_or(serde_json::Value::Null)
    }

    fn load_extra_state(&mut self, state: &serde_json::Value) -> Result<()> {
        if state.is_null() {
            return Ok(());
        }
        let tracker: TaskLossTracker = serde_json::from_value(state.clone())?;
        if tracker.means.len() != self.inner.config().num_tasks {
            return Err(Error::Checkpoint("loss tracker has the wrong number of tasks".into()));
        }
        self.tracker = tracker;
        Ok(())
    }
}
