use super::Family;
use crate::data::EpisodeBatch;
use crate::diffcore::{lstm_step, Graph, ParamStore, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{AlphaNorm, Forward, ForwardOpts, Model, ModelConfig, TemporalAmtl};
use crate::transfer::{AlphaBlock, Gate};

/// Probabilistic transfer on single-step inputs: every task attends to the
/// other tasks' latent features at the same (only) timestep.
#[derive(Clone, Debug)]
pub struct ProbAmtl {
    inner: TemporalAmtl,
}

impl ProbAmtl {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(ProbAmtl {
            inner: TemporalAmtl::with_gate(config, Gate::Features, Family::PAmtl, seed)?,
        })
    }

    pub fn inner(&self) -> &TemporalAmtl {
        &self.inner
    }
}

impl Model for ProbAmtl {
    fn family(&self) -> Family {
        Family::PAmtl
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
        let m = &self.inner;
        m.check_batch(batch)?;
        if batch.steps != 1 {
            return Err(Error::Config(format!(
                "p_amtl takes single-step inputs, got {} steps",
                batch.steps
            )));
        }
        let cfg = m.config();
        let (b, k, dn) = (batch.len(), cfg.hidden_size, cfg.num_tasks);
        let root = rng.fork();
        let x = g.constant(batch.stacked_inputs());
        let v = m.embed(g, x)?;
        let zero = g.constant(Tensor::zeros(b, k));
        let (r, _) = lstm_step(g, &m.encoder, v, zero, zero)?;
        let mut latents = Vec::with_capacity(dn);
        for d in 0..dn {
            let h = m.task_embed(g, r, d)?;
            let mut task_rng = root.child(&format!("task{d}"));
            latents.push(m.latent(g, h, d, &mut task_rng, opts.mode)?);
        }
        let feats: Vec<Var> = latents.iter().map(|l| l.z).collect();
        let mut alphas = Vec::new();
        let mut combined = feats.clone();
        if !opts.no_transfer {
            let tp = m.transfer_params();
            let mut gate_in = Vec::with_capacity(dn);
            let mut adapted = Vec::with_capacity(dn);
            for (d, lat) in latents.iter().enumerate() {
                gate_in.push(match m.variance_channels(g, lat)? {
                    Some(var) => g.concat_cols(&[feats[d], var])?,
                    None => feats[d],
                });
                let g1 = tp.adapters_in[d].expect("p_amtl always has adapters");
                adapted.push(g1.forward_leaky(g, feats[d], tp.slope)?);
            }
            for d in 0..dn {
                let sources: Vec<usize> = (0..dn).filter(|&j| j != d).collect();
                if sources.is_empty() {
                    continue;
                }
                let mut logits = Vec::with_capacity(sources.len());
                for &j in &sources {
                    logits.push(tp.gate_logits(g, j, d, gate_in[j], gate_in[d])?);
                }
                let weights: Vec<Var> = match cfg.alpha_norm {
                    AlphaNorm::Sigmoid => logits.iter().map(|&l| g.sigmoid(l)).collect(),
                    AlphaNorm::Softmax => {
                        let cat = g.concat_cols(&logits)?;
                        let s = g.softmax_rows(cat);
                        (0..sources.len())
                            .map(|c| g.slice_cols(s, c, 1))
                            .collect::<Result<Vec<_>>>()?
                    }
                };
                let mut parts = Vec::with_capacity(sources.len());
                for (&j, &a) in sources.iter().zip(&weights) {
                    parts.push(g.scale_rows(adapted[j], a)?);
                    alphas.push(AlphaBlock {
                        source: j,
                        target: d,
                        pairs: vec![(0, 0)],
                        alpha: a,
                    });
                }
                let agg = g.add_n(&parts)?;
                let g2 = tp.adapters_out[d].expect("p_amtl always has adapters");
                let out = g2.forward_leaky(g, agg, tp.slope)?;
                combined[d] = g.add(feats[d], out)?;
            }
        }
        let mut probs = Vec::with_capacity(dn);
        for (d, &c) in combined.iter().enumerate() {
            let head = m.heads(d)?;
            let pre = head.attn.forward(g, c)?;
            let beta = g.tanh(pre);
            let ctx = g.mul(beta, v)?;
            let logit = head.out.forward(g, ctx)?;
            probs.push(Some(g.sigmoid(logit)));
        }
        Ok(Forward { probs, latents, alphas })
    }
}
