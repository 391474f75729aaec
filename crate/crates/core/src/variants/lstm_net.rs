use super::Family;
use crate::data::EpisodeBatch;
use crate::diffcore::{lstm_unroll, Graph, Init, LstmParams, ParamId, ParamStore, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    add_weight_decay, decay_targets, task_bce, Affine, Forward, ForwardOpts, Mode, Model, ModelConfig, Objective, Scope,
};

#[derive(Clone, Debug)]
struct Tower {
    embed: ParamId,
    encoder: LstmParams,
    /// `(task, output layer)` pairs served by this tower.
    outs: Vec<(usize, Affine)>,
    prefix: String,
}

/// Plain LSTM predictors: one tower per task (single-task), or one shared
/// tower with per-task output layers (hard sharing, optionally with
/// uncertainty-weighted losses).
///
/// Each tower computes `v = x·W_emb`, `h = LSTM(v)`, `β = tanh(h)` and
/// `p_d = sigmoid(mean_t(β ⊙ v)·W_o + b_o)`.
#[derive(Clone, Debug)]
pub struct LstmNet {
    family: Family,
    config: ModelConfig,
    store: ParamStore,
    towers: Vec<Tower>,
    log_sigma: Option<ParamId>,
}

impl LstmNet {
    pub fn stl(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(Family::Stl, config, seed)
    }

    pub fn mtl(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(Family::Mtl, config, seed)
    }

    pub fn kendall(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(Family::MtlKendall, config, seed)
    }

    fn build(family: Family, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (dn, m, k) = (config.num_tasks, config.num_features, config.hidden_size);
        let mut store = ParamStore::new();
        let tower = |store: &mut ParamStore, prefix: &str, tasks: &[usize]| -> Result<Tower> {
            let embed = store.init(&format!("{prefix}embed/weight"), m, k, Init::FanIn, seed)?;
            let encoder = LstmParams::init(store, &format!("{prefix}encoder"), k, k, seed)?;
            let outs = tasks
                .iter()
                .map(|&d| {
                    Ok((
                        d,
                        Affine::init(store, &format!("task{d}/out"), k, 1, Init::FanIn, seed)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tower {
                embed,
                encoder,
                outs,
                prefix: prefix.to_string(),
            })
        };
        let towers = if family == Family::Stl {
            (0..dn)
                .map(|d| tower(&mut store, &format!("task{d}/"), &[d]))
                .collect::<Result<Vec<_>>>()?
        } else {
            let all: Vec<usize> = (0..dn).collect();
            vec![tower(&mut store, "", &all)?]
        };
        let log_sigma = if family == Family::MtlKendall {
            Some(store.init("kendall/log_sigma", 1, dn, Init::Zeros, seed)?)
        } else {
            None
        };
        Ok(LstmNet {
            family,
            config,
            store,
            towers,
            log_sigma,
        })
    }

    /// Current `σ_d` of the loss weighting, when present.
    pub fn kendall_sigmas(&self) -> Option<Vec<f64>> {
        self.log_sigma
            .map(|id| self.store.value(id).data().iter().map(|s| s.exp()).collect())
    }

    fn tower_forward(
        &self,
        g: &mut Graph<'_>,
        tower: &Tower,
        x: Var,
        batch: &EpisodeBatch,
        rng: &mut RngStream,
        mode: Mode,
        probs: &mut [Option<Var>],
    ) -> Result<()> {
        let (b, steps) = (batch.len(), batch.steps);
        let w = g.param(tower.embed);
        let v = g.matmul(x, w)?;
        let xs = (0..steps)
            .map(|t| if steps == 1 { Ok(v) } else { g.slice_rows(v, t * b, b) })
            .collect::<Result<Vec<_>>>()?;
        let hs = lstm_unroll(g, &tower.encoder, &xs)?;
        let h = if hs.len() == 1 { hs[0] } else { g.concat_rows(&hs)? };
        let beta = g.tanh(h);
        let wv = g.mul(beta, v)?;
        let ctx = crate::model::masked_time_mean(g, wv, batch)?;
        let mut drop_rng = rng.child(&format!("{}dropout", tower.prefix));
        let ctx = g.dropout(ctx, self.config.dropout_rate, &mut drop_rng, mode == Mode::Train)?;
        for &(d, out) in &tower.outs {
            let logit = out.forward(g, ctx)?;
            probs[d] = Some(g.sigmoid(logit));
        }
        Ok(())
    }
}

/// `Σ_d exp(−2 s_d)·L_d + s_d` with `s_d = ln σ_d`.
pub fn kendall_weighted_loss(losses: &[f64], log_sigma: &[f64]) -> f64 {
    losses
        .iter()
        .zip(log_sigma)
        .map(|(l, s)| (-2.0 * s).exp() * l + s)
        .sum()
}

impl Model for LstmNet {
    fn family(&self) -> Family {
        self.family
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &EpisodeBatch,
        rng: &mut RngStream,
        opts: ForwardOpts,
    ) -> Result<Forward> {
        if batch.num_features != self.config.num_features || batch.num_tasks != self.config.num_tasks {
            return Err(Error::Dimension {
                op: "batch",
                left: [self.config.num_features, self.config.num_tasks],
                right: [batch.num_features, batch.num_tasks],
            });
        }
        let root = rng.fork();
        let x = g.constant(batch.stacked_inputs());
        let mut probs = vec![None; self.config.num_tasks];
        for tower in &self.towers {
            let wanted = opts.task.is_none_or(|t| tower.outs.iter().any(|&(d, _)| d == t));
            if wanted {
                self.tower_forward(g, tower, x, batch, &mut root.clone(), opts.mode, &mut probs)?;
            }
        }
        Ok(Forward {
            probs,
            latents: Vec::new(),
            alphas: Vec::new(),
        })
    }

    fn objective(
        &self,
        g: &mut Graph<'_>,
        fwd: &Forward,
        batch: &EpisodeBatch,
        l2: f64,
        scope: &Scope,
    ) -> Result<Objective> {
        let task_losses = task_bce(g, fwd, batch, scope)?;
        let mut terms = Vec::new();
        match self.log_sigma {
            Some(id) => {
                let s = g.param(id);
                for (d, l) in task_losses.iter().enumerate() {
                    let Some(l) = *l else { continue };
                    let sd = g.slice_cols(s, d, 1)?;
                    let w = g.scale(sd, -2.0);
                    let w = g.exp(w);
                    let weighted = g.mul(w, l)?;
                    terms.push(g.add(weighted, sd)?);
                }
            }
            None => terms.extend(task_losses.iter().flatten().copied()),
        }
        let data = if terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            g.add_n(&terms)?
        };
        // The loss weights are not decayed.
        let decayed: Vec<ParamId> = decay_targets(&self.store, scope, batch)
            .into_iter()
            .filter(|&p| Some(p) != self.log_sigma)
            .collect();
        let total = add_weight_decay(g, data, l2, &decayed)?;
        Ok(Objective { total, task_losses })
    }

    fn scopes(&self) -> Vec<Scope> {
        if self.family != Family::Stl {
            return vec![Scope::all(&self.store)];
        }
        (0..self.config.num_tasks)
            .map(|d| Scope {
                name: format!("task{d}"),
                task: Some(d),
                params: self.store.ids_with_prefix(&format!("task{d}/")),
            })
            .collect()
    }
}
