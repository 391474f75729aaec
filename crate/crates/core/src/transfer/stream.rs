use super::{Gate, TransferParams};
use crate::diffcore::{leaky_relu, sigmoid, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{AlphaNorm, TransferMode};

/// Cache for online evaluation: adapted source features and the source half
/// of every gate's first layer, one entry per past timestep.
#[derive(Clone, Debug)]
pub struct StreamState {
    batch: usize,
    steps_seen: usize,
    adapted: Vec<Vec<Tensor>>,
    src: Vec<Vec<Tensor>>,
}

impl StreamState {
    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }
}

impl TransferParams {
    pub fn stream_state(&self, batch: usize) -> StreamState {
        StreamState {
            batch,
            steps_seen: 0,
            adapted: vec![Vec::new(); self.num_tasks],
            src: vec![Vec::new(); self.num_tasks * self.num_tasks],
        }
    }

    /// Combined features of the next timestep for every task, computed from
    /// the cache plus this step's features. Work per call is linear in the
    /// number of timesteps already seen.
    ///
    /// `features[d]` is `B×k`; `variances[d]` is `B×(channels·k)` or `None`
    /// without channels.
    pub fn incremental_step(
        &self,
        store: &ParamStore,
        state: &mut StreamState,
        features: &[Tensor],
        variances: &[Option<Tensor>],
        task_losses: Option<&[f64]>,
    ) -> Result<Vec<Tensor>> {
        let (dn, k, b) = (self.num_tasks, self.hidden_size, state.batch);
        if self.mode == TransferMode::Unconstrained {
            return Err(Error::Config(
                "unconstrained transfer reads future timesteps and cannot stream".into(),
            ));
        }
        if features.len() != dn || variances.len() != dn {
            return Err(Error::Dimension {
                op: "incremental_step",
                left: [dn, dn],
                right: [features.len(), variances.len()],
            });
        }
        for (f, v) in features.iter().zip(variances) {
            let width = v.as_ref().map_or(0, Tensor::cols);
            if f.shape() != [b, k] || width != self.channels * k && self.gate == Gate::Features {
                return Err(Error::Dimension {
                    op: "incremental_step",
                    left: [b, k + self.channels * k],
                    right: [f.rows(), f.cols() + width],
                });
            }
        }
        if self.mode == TransferMode::None {
            state.steps_seen += 1;
            return Ok(features.to_vec());
        }
        let t = state.steps_seen;

        let inputs: Vec<Tensor> = match self.gate {
            Gate::Features => features
                .iter()
                .zip(variances)
                .map(|(f, v)| match v {
                    Some(v) if self.channels > 0 => hcat(f, v),
                    _ => f.clone(),
                })
                .collect(),
            Gate::TaskLoss => {
                let l = task_losses.ok_or(Error::EmptyTracker(0))?;
                l.iter().map(|&x| Tensor::scalar(x)).collect()
            }
        };
        for j in 0..dn {
            let a = self.adapters_in[j].expect("adapters exist for every transfer mode");
            state.adapted[j].push(a.apply_leaky(store, &features[j], self.slope)?);
            for d in 0..dn {
                if let Some(net) = self.fnet(j, d) {
                    state.src[j * dn + d].push(inputs[j].matmul(store.value(net.src))?);
                }
            }
        }

        let mut out = Vec::with_capacity(dn);
        for d in 0..dn {
            let sources = self.sources(d);
            if sources.is_empty() {
                out.push(features[d].clone());
                continue;
            }
            let steps: Vec<usize> = match self.mode {
                TransferMode::Samestep => vec![t],
                _ => (0..=t).collect(),
            };
            // logits[s][q] is a B-vector for source sources[s] at step steps[q].
            let mut logits = Vec::with_capacity(sources.len());
            for &j in &sources {
                let net = self.fnet(j, d).expect("active pair");
                let tgt = inputs[d].matmul(store.value(net.tgt))?;
                let hb = store.value(net.hidden_bias).data();
                let wo = store.value(net.out.weight).data();
                let bo = store.value(net.out.bias).data()[0];
                let mut per = Vec::with_capacity(steps.len());
                for &i in &steps {
                    let src = &state.src[j * dn + d][i];
                    let mut col = vec![0.0; b];
                    for (bi, slot) in col.iter_mut().enumerate() {
                        let (sr, tr) = match self.gate {
                            Gate::Features => (src.row_slice(bi), tgt.row_slice(bi)),
                            Gate::TaskLoss => (src.row_slice(0), tgt.row_slice(0)),
                        };
                        let mut acc = 0.0;
                        for u in 0..k {
                            acc += leaky_relu(sr[u] + tr[u] + hb[u], self.slope) * wo[u];
                        }
                        *slot = acc + bo;
                    }
                    per.push(col);
                }
                logits.push(per);
            }
            let alphas = match self.norm {
                AlphaNorm::Sigmoid => logits
                    .into_iter()
                    .map(|per| per.into_iter().map(|c| c.into_iter().map(sigmoid).collect()).collect())
                    .collect::<Vec<Vec<Vec<f64>>>>(),
                AlphaNorm::Softmax => softmax_over_sources(logits, b),
            };
            let mut agg = Tensor::zeros(b, k);
            for (s, &j) in sources.iter().enumerate() {
                let mut part = Tensor::zeros(b, k);
                for (q, &i) in steps.iter().enumerate() {
                    let src = &state.adapted[j][i];
                    for bi in 0..b {
                        let a = alphas[s][q][bi];
                        for u in 0..k {
                            let cur = part.get(bi, u);
                            part.set(bi, u, cur + src.get(bi, u) * a);
                        }
                    }
                }
                agg = add(&agg, &part);
            }
            let c = match self.adapters_out[d] {
                Some(g2) => add(&features[d], &g2.apply_leaky(store, &agg, self.slope)?),
                None => add(&features[d], &agg),
            };
            out.push(c);
        }
        state.steps_seen += 1;
        Ok(out)
    }
}

fn softmax_over_sources(logits: Vec<Vec<Vec<f64>>>, b: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = logits.clone();
    for bi in 0..b {
        let mut m = f64::NEG_INFINITY;
        for per in &logits {
            for col in per {
                m = m.max(col[bi]);
            }
        }
        let mut z = 0.0;
        for (s, per) in logits.iter().enumerate() {
            for (q, col) in per.iter().enumerate() {
                let e = (col[bi] - m).exp();
                out[s][q][bi] = e;
                z += e;
            }
        }
        for per in &mut out {
            for col in per {
                col[bi] /= z;
            }
        }
    }
    out
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row_slice(r));
        data.extend_from_slice(b.row_slice(r));
    }
    Tensor::new(a.rows(), a.cols() + b.cols(), data).expect("same row count")
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}
