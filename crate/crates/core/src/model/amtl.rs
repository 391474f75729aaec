use serde::{Deserialize, Serialize};

use super::{Affine, Forward, ForwardOpts, Mode, Model, ModelConfig, MuActivation};
use crate::data::EpisodeBatch;
use crate::diffcore::{lstm_unroll, Graph, Init, LstmParams, ParamId, ParamStore, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::transfer::{Gate, TransferInputs, TransferParams};
use crate::variants::Family;

/// Private parameters of one task.
#[derive(Clone, Debug)]
pub struct TaskHeads {
    pub layers: Vec<Affine>,
    pub mu: Affine,
    pub sigma: Option<Affine>,
    pub attn: Affine,
    pub out: Affine,
}

/// Graph nodes of one task's latent layer, stacked `(T·B)×k`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub z: Var,
    pub mu: Var,
    pub sigma: Option<Var>,
    /// Variance of the MC-dropout means.
    pub epistemic: Option<Var>,
    /// `σ²`.
    pub aleatoric: Option<Var>,
}

/// Values of a task's latent distribution for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub scale: Option<Tensor>,
    pub mc_variance: Option<Tensor>,
}

impl LatentVars {
    pub fn distribution(&self, g: &Graph<'_>) -> LatentDistribution {
        LatentDistribution {
            mean: g.value(self.mu).clone(),
            scale: self.sigma.map(|s| g.value(s).clone()),
            mc_variance: self.epistemic.map(|e| g.value(e).clone()),
        }
    }
}

/// The temporal network: shared embedding and LSTM, per-task feed-forward
/// stacks, probabilistic latents, the transfer layer and per-task attention
/// heads.
#[derive(Clone, Debug)]
pub struct TemporalAmtl {
    config: ModelConfig,
    family: Family,
    store: ParamStore,
    pub(crate) embed: ParamId,
    pub(crate) encoder: LstmParams,
    pub(crate) heads: Vec<TaskHeads>,
    pub(crate) transfer: TransferParams,
}

impl TemporalAmtl {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_gate(config, Gate::Features, Family::TpAmtl, seed)
    }

    pub(crate) fn with_gate(config: ModelConfig, gate: Gate, family: Family, seed: u64) -> Result<Self> {
        config.validate()?;
        let (dn, m, k) = (config.num_tasks, config.num_features, config.hidden_size);
        let mut store = ParamStore::new();
        let embed = store.init("embed/weight", m, k, Init::FanIn, seed)?;
        let encoder = LstmParams::init(&mut store, "encoder", k, k, seed)?;
        let mut heads = Vec::with_capacity(dn);
        for d in 0..dn {
            let layers = (0..config.embed_layers)
                .map(|l| Affine::init(&mut store, &format!("task{d}/layer{l}"), k, k, Init::FanIn, seed))
                .collect::<Result<Vec<_>>>()?;
            let mu = Affine::init(&mut store, &format!("task{d}/mu"), k, k, Init::FanIn, seed)?;
            let sigma = if config.uncertainty.aleatoric() {
                Some(Affine::init(
                    &mut store,
                    &format!("task{d}/sigma"),
                    k,
                    k,
                    Init::FanIn,
                    seed,
                )?)
            } else {
                None
            };
            let attn = Affine::init(&mut store, &format!("task{d}/attn"), k, k, Init::FanIn, seed)?;
            let out = Affine::init(&mut store, &format!("task{d}/out"), k, 1, Init::FanIn, seed)?;
            heads.push(TaskHeads {
                layers,
                mu,
                sigma,
                attn,
                out,
            });
        }
        let transfer = TransferParams::init(
            &mut store,
            config.transfer,
            config.alpha_norm,
            gate,
            dn,
            k,
            config.uncertainty.channels(),
            config.leaky_slope,
            seed,
        )?;
        Ok(TemporalAmtl {
            config,
            family,
            store,
            embed,
            encoder,
            heads,
            transfer,
        })
    }

    pub fn transfer_params(&self) -> &TransferParams {
        &self.transfer
    }

    pub fn heads(&self, d: usize) -> Result<&TaskHeads> {
        self.heads.get(d).ok_or(Error::UnknownTask {
            task: d,
            num_tasks: self.config.num_tasks,
        })
    }

    /// `v = x·W_emb` on timestep-stacked inputs.
    pub fn embed(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.embed);
        g.matmul(x, w)
    }

    /// Unidirectional LSTM over the timestep blocks of `v`.
    pub fn shared_encode(&self, g: &mut Graph<'_>, v: Var, batch: usize, steps: usize) -> Result<Var> {
        let xs = (0..steps)
            .map(|t| {
                if steps == 1 {
                    Ok(v)
                } else {
                    g.slice_rows(v, t * batch, batch)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let hs = lstm_unroll(g, &self.encoder, &xs)?;
        if hs.len() == 1 {
            Ok(hs[0])
        } else {
            g.concat_rows(&hs)
        }
    }

    /// Task-private feed-forward stack, applied row-wise.
    pub fn task_embed(&self, g: &mut Graph<'_>, r: Var, d: usize) -> Result<Var> {
        let mut h = r;
        for layer in &self.heads(d)?.layers {
            h = layer.forward_leaky(g, h, self.config.leaky_slope)?;
        }
        Ok(h)
    }

    fn mu_head(&self, g: &mut Graph<'_>, head: &TaskHeads, h: Var) -> Result<Var> {
        let m = head.mu.forward(g, h)?;
        Ok(match self.config.mu_activation {
            MuActivation::LeakyRelu => g.leaky_relu(m, self.config.leaky_slope),
            MuActivation::Identity => m,
        })
    }

    fn sigma_head(&self, g: &mut Graph<'_>, head: &TaskHeads, h: Var) -> Result<Option<Var>> {
        match head.sigma {
            Some(s) => {
                let pre = s.forward(g, h)?;
                Ok(Some(g.softplus(pre)))
            }
            None => Ok(None),
        }
    }

    /// Latent distribution of task `d`. Draws dropout masks and the
    /// reparameterisation noise from `rng`, in that order.
    pub fn latent(&self, g: &mut Graph<'_>, h: Var, d: usize, rng: &mut RngStream, mode: Mode) -> Result<LatentVars> {
        let cfg = &self.config;
        let head = self.heads(d)?.clone();
        let (mu, sigma, epistemic) = if cfg.uncertainty.epistemic() && cfg.dropout_rate == 0.0 {
            // Every replay would be identical.
            let mu = self.mu_head(g, &head, h)?;
            let sigma = self.sigma_head(g, &head, h)?;
            let [r, c] = g.shape(mu);
            (mu, sigma, Some(g.constant(Tensor::zeros(r, c))))
        } else if cfg.uncertainty.epistemic() {
            let n = cfg.mc_samples;
            let mut mus = Vec::with_capacity(n);
            let mut sigmas = Vec::with_capacity(n);
            for _ in 0..n {
                let hs = g.dropout(h, cfg.dropout_rate, rng, true)?;
                mus.push(self.mu_head(g, &head, hs)?);
                if let Some(s) = self.sigma_head(g, &head, hs)? {
                    sigmas.push(s);
                }
            }
            let sum = g.add_n(&mus)?;
            let mu = g.scale(sum, 1.0 / n as f64);
            let sigma = if sigmas.is_empty() {
                None
            } else {
                let s = g.add_n(&sigmas)?;
                Some(g.scale(s, 1.0 / n as f64))
            };
            let mut dev = Vec::with_capacity(n);
            for &m in &mus {
                let diff = g.sub(m, mu)?;
                dev.push(g.square(diff));
            }
            let ss = g.add_n(&dev)?;
            let var = g.scale(ss, 1.0 / (n - 1) as f64);
            (mu, sigma, Some(var))
        } else {
            let hs = g.dropout(h, cfg.dropout_rate, rng, mode == Mode::Train)?;
            (self.mu_head(g, &head, hs)?, self.sigma_head(g, &head, hs)?, None)
        };
        let aleatoric = match sigma {
            Some(s) if cfg.uncertainty.aleatoric() => Some(g.square(s)),
            _ => None,
        };
        let z = match sigma {
            Some(s) if mode == Mode::Train && cfg.uncertainty.aleatoric() => g.gaussian_sample(mu, s, rng)?,
            _ => mu,
        };
        Ok(LatentVars {
            z,
            mu,
            sigma,
            epistemic,
            aleatoric,
        })
    }

    /// `β = tanh(C·W_β + b_β)`, `p = sigmoid(mean_t(β ⊙ v)·W_o + b_o)`, with
    /// the mean taken over each instance's own timesteps.
    pub fn attend_and_predict(&self, g: &mut Graph<'_>, c: Var, v: Var, d: usize, batch: &EpisodeBatch) -> Result<Var> {
        let head = self.heads(d)?;
        let pre = head.attn.forward(g, c)?;
        let beta = g.tanh(pre);
        let w = g.mul(beta, v)?;
        let ctx = masked_time_mean(g, w, batch)?;
        let logit = head.out.forward(g, ctx)?;
        Ok(g.sigmoid(logit))
    }

    /// Variance channels handed to the gates: `[epistemic | aleatoric]`.
    pub(crate) fn variance_channels(&self, g: &mut Graph<'_>, lat: &LatentVars) -> Result<Option<Var>> {
        let parts: Vec<Var> = [lat.epistemic, lat.aleatoric].into_iter().flatten().collect();
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0])),
            _ => Ok(Some(g.concat_cols(&parts)?)),
        }
    }

    pub(crate) fn check_batch(&self, batch: &EpisodeBatch) -> Result<()> {
        if batch.num_features != self.config.num_features || batch.num_tasks != self.config.num_tasks {
            return Err(Error::Dimension {
                op: "batch",
                left: [self.config.num_features, self.config.num_tasks],
                right: [batch.num_features, batch.num_tasks],
            });
        }
        if batch.is_empty() {
            return Err(Error::OutOfRange("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass with optional task-loss inputs for loss-gated transfer.
    pub(crate) fn forward_with(
        &self,
        g: &mut Graph<'_>,
        batch: &EpisodeBatch,
        rng: &mut RngStream,
        opts: ForwardOpts,
        task_losses: Option<&[f64]>,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let (b, steps) = (batch.len(), batch.steps);
        let root = rng.fork();
        let x = g.constant(batch.stacked_inputs());
        let v = self.embed(g, x)?;
        let r = self.shared_encode(g, v, b, steps)?;
        let dn = self.config.num_tasks;
        let mut latents = Vec::with_capacity(dn);
        for d in 0..dn {
            let h = self.task_embed(g, r, d)?;
            let mut task_rng = root.child(&format!("task{d}"));
            latents.push(self.latent(g, h, d, &mut task_rng, opts.mode)?);
        }
        let features: Vec<Var> = latents.iter().map(|l| l.z).collect();
        let (combined, alphas) = if opts.no_transfer {
            (features, Vec::new())
        } else {
            let mut variances = Vec::with_capacity(dn);
            for lat in &latents {
                variances.push(self.variance_channels(g, lat)?);
            }
            let padded = batch.lengths.iter().any(|&l| l < steps);
            let mask = padded.then(|| batch.step_mask());
            let inputs = TransferInputs {
                features: &features,
                variances: &variances,
                batch: b,
                steps,
                source_mask: mask.as_ref(),
                task_losses,
            };
            let c = self.transfer.combine(g, &inputs)?;
            (c.features, c.alphas)
        };
        let mut probs = Vec::with_capacity(dn);
        for (d, &c) in combined.iter().enumerate() {
            probs.push(Some(self.attend_and_predict(g, c, v, d, batch)?));
        }
        Ok(Forward { probs, latents, alphas })
    }
}

/// Per-instance mean over valid timesteps of a stacked `(T·B)×k` tensor.
pub(crate) fn masked_time_mean(g: &mut Graph<'_>, w: Var, batch: &EpisodeBatch) -> Result<Var> {
    let (b, steps) = (batch.len(), batch.steps);
    let mut weights = Vec::with_capacity(b * steps);
    for t in 0..steps {
        for &len in &batch.lengths {
            weights.push(if t < len { 1.0 / len as f64 } else { 0.0 });
        }
    }
    let wv = g.constant(Tensor::column(weights));
    let scaled = g.scale_rows(w, wv)?;
    g.sum_row_blocks(scaled, b)
}

impl Model for TemporalAmtl {
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
        if self.transfer.gate == Gate::TaskLoss && !opts.no_transfer {
            return Err(Error::EmptyTracker(0));
        }
        self.forward_with(g, batch, rng, opts, None)
    }
}
