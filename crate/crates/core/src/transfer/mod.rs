//! Uncertainty-gated transfer between task features.

mod graph;
mod stream;

pub use graph::TransferGraph;
pub use stream::StreamState;

use crate::diffcore::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Affine, AlphaNorm, TransferMode};

/// What the transfer-weight networks look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    /// Source and target features plus their variance channels.
    Features,
    /// Running mean training loss of the source and target tasks.
    TaskLoss,
}

/// Additive penalty that keeps invalid sources out of a softmax.
const MASKED_LOGIT: f64 = -1e9;

/// Two-layer gate `F_{j,d}`. The first layer is split into a source block and
/// a target block so per-timestep partial products can be reused.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FNet {
    pub src: ParamId,
    pub tgt: ParamId,
    pub hidden_bias: ParamId,
    pub out: Affine,
}

/// Parameters of the transfer layer and the rules for combining features.
#[derive(Clone, Debug)]
pub struct TransferParams {
    pub mode: TransferMode,
    pub norm: AlphaNorm,
    pub gate: Gate,
    pub num_tasks: usize,
    pub hidden_size: usize,
    /// Variance blocks per task fed to `F` alongside the features.
    pub channels: usize,
    pub slope: f64,
    pub(crate) f: Vec<Option<FNet>>,
    pub(crate) adapters_in: Vec<Option<Affine>>,
    pub(crate) adapters_out: Vec<Option<Affine>>,
}

/// Inputs to [`TransferParams::combine`]. Every per-task tensor is stacked by
/// timestep block: row `t·batch + b`.
pub struct TransferInputs<'a> {
    pub features: &'a [Var],
    /// `(T·B)×(channels·k)` per task, or `None` when there are no channels.
    pub variances: &'a [Option<Var>],
    pub batch: usize,
    pub steps: usize,
    /// `(T·B)×1`, 1.0 on real (unpadded) timesteps.
    pub source_mask: Option<&'a Tensor>,
    /// Required with [`Gate::TaskLoss`].
    pub task_losses: Option<&'a [f64]>,
}

/// Transfer weights between one source and one target task.
///
/// Rows of `alpha` are grouped in blocks of `batch` rows; block `p` holds the
/// weights of `pairs[p] = (source_t, target_t)`.
#[derive(Clone, Debug)]
pub struct AlphaBlock {
    pub source: usize,
    pub target: usize,
    pub pairs: Vec<(usize, usize)>,
    pub alpha: Var,
}

pub struct Combined {
    pub features: Vec<Var>,
    pub alphas: Vec<AlphaBlock>,
}

impl TransferParams {
    pub fn init(
        store: &mut ParamStore,
        mode: TransferMode,
        norm: AlphaNorm,
        gate: Gate,
        num_tasks: usize,
        hidden_size: usize,
        channels: usize,
        slope: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = hidden_size;
        let gate_in = match gate {
            Gate::Features => (1 + channels) * k,
            Gate::TaskLoss => 1,
        };
        let mut f = vec![None; num_tasks * num_tasks];
        let mut adapters_in = vec![None; num_tasks];
        let mut adapters_out = vec![None; num_tasks];
        if mode != TransferMode::None {
            for j in 0..num_tasks {
                for d in 0..num_tasks {
                    if !pair_active(mode, j, d) {
                        continue;
                    }
                    let p = format!("transfer/{j}->{d}");
                    f[j * num_tasks + d] = Some(FNet {
                        src: store.init(&format!("{p}/src"), gate_in, k, Init::FanIn, seed)?,
                        tgt: store.init(&format!("{p}/tgt"), gate_in, k, Init::FanIn, seed)?,
                        hidden_bias: store.init(&format!("{p}/hidden_bias"), 1, k, Init::Zeros, seed)?,
                        out: Affine::init(store, &format!("{p}/out"), k, 1, Init::FanIn, seed)?,
                    });
                }
            }
            for d in 0..num_tasks {
                if mode == TransferMode::Intratask {
                    adapters_in[d] = Some(Affine::init(store, &format!("task{d}/g"), k, k, Init::Zeros, seed)?);
                } else {
                    adapters_in[d] = Some(Affine::init(store, &format!("task{d}/g1"), k, k, Init::FanIn, seed)?);
                    adapters_out[d] = Some(Affine::init(store, &format!("task{d}/g2"), k, k, Init::Zeros, seed)?);
                }
            }
        }
        Ok(TransferParams {
            mode,
            norm,
            gate,
            num_tasks,
            hidden_size,
            channels,
            slope,
            f,
            adapters_in,
            adapters_out,
        })
    }

    pub(crate) fn fnet(&self, j: usize, d: usize) -> Option<&FNet> {
        self.f[j * self.num_tasks + d].as_ref()
    }

    /// Source tasks that may transfer into `d`.
    pub fn sources(&self, d: usize) -> Vec<usize> {
        (0..self.num_tasks).filter(|&j| pair_active(self.mode, j, d)).collect()
    }

    /// Parameter ids of the `F_{j,d}` network.
    pub fn gate_param_ids(&self, j: usize, d: usize) -> Vec<ParamId> {
        self.fnet(j, d)
            .map(|n| vec![n.src, n.tgt, n.hidden_bias, n.out.weight, n.out.bias])
            .unwrap_or_default()
    }

    /// `F_{j,d}` evaluated on explicit input rows (one row per query), for
    /// inspection and tests. `source` and `target` are `n×in` with `in` the
    /// gate input width. Returns the pre-normalisation logits.
    pub fn gate_logits(&self, g: &mut Graph<'_>, j: usize, d: usize, source: Var, target: Var) -> Result<Var> {
        let net = *self
            .fnet(j, d)
            .ok_or_else(|| Error::Config(format!("no transfer from task {j} to task {d}")))?;
        let ws = g.param(net.src);
        let wt = g.param(net.tgt);
        let s = g.matmul(source, ws)?;
        let t = g.matmul(target, wt)?;
        self.gate_head(g, &net, s, t)
    }

    fn gate_head(&self, g: &mut Graph<'_>, net: &FNet, src: Var, tgt: Var) -> Result<Var> {
        let hb = g.param(net.hidden_bias);
        let h = g.add(src, tgt)?;
        let h = g.add_row(h, hb)?;
        let h = g.leaky_relu(h, self.slope);
        net.out.forward(g, h)
    }

    /// Combined feature maps `C_d` for every task.
    pub fn combine(&self, g: &mut Graph<'_>, x: &TransferInputs<'_>) -> Result<Combined> {
        let dn = self.num_tasks;
        if x.features.len() != dn || x.variances.len() != dn {
            return Err(Error::Dimension {
                op: "combine",
                left: [dn, dn],
                right: [x.features.len(), x.variances.len()],
            });
        }
        let rows = x.batch * x.steps;
        for &f in x.features {
            if g.shape(f) != [rows, self.hidden_size] {
                return Err(Error::Dimension {
                    op: "combine",
                    left: [rows, self.hidden_size],
                    right: g.shape(f),
                });
            }
        }
        if self.mode == TransferMode::None {
            return Ok(Combined {
                features: x.features.to_vec(),
                alphas: Vec::new(),
            });
        }
        let mask = match x.source_mask {
            Some(m) => {
                if m.shape() != [rows, 1] {
                    return Err(Error::Dimension {
                        op: "combine_mask",
                        left: [rows, 1],
                        right: m.shape(),
                    });
                }
                Some(g.constant(m.clone()))
            }
            None => None,
        };
        let pre = self.gate_inputs(g, x)?;
        let mut adapted = Vec::with_capacity(dn);
        for j in 0..dn {
            let a = self.adapters_in[j].expect("adapters exist for every transfer mode");
            adapted.push(a.forward_leaky(g, x.features[j], self.slope)?);
        }
        let ctx = Ctx {
            x,
            pre: &pre,
            adapted: &adapted,
            mask,
        };
        match self.mode {
            TransferMode::Samestep => self.combine_samestep(g, &ctx),
            _ => self.combine_temporal(g, &ctx),
        }
    }

    /// Source and target partial products of every gate's first layer.
    fn gate_inputs(&self, g: &mut Graph<'_>, x: &TransferInputs<'_>) -> Result<Vec<Option<(Var, Var)>>> {
        let dn = self.num_tasks;
        let mut inputs = Vec::with_capacity(dn);
        match self.gate {
            Gate::Features => {
                for d in 0..dn {
                    let v = match (x.variances[d], self.channels) {
                        (_, 0) => x.features[d],
                        (Some(var), _) => g.concat_cols(&[x.features[d], var])?,
                        (None, _) => {
                            return Err(Error::Config(format!("task {d} is missing its variance channels")));
                        }
                    };
                    inputs.push(v);
                }
            }
            Gate::TaskLoss => {
                let losses = x.task_losses.ok_or(Error::EmptyTracker(0))?;
                if losses.len() != dn {
                    return Err(Error::Dimension {
                        op: "task_losses",
                        left: [dn, 1],
                        right: [losses.len(), 1],
                    });
                }
                for &l in losses {
                    inputs.push(g.constant(Tensor::scalar(l)));
                }
            }
        }
        let mut pre = vec![None; dn * dn];
        for j in 0..dn {
            for d in 0..dn {
                if let Some(net) = self.fnet(j, d) {
                    let ws = g.param(net.src);
                    let wt = g.param(net.tgt);
                    let s = g.matmul(inputs[j], ws)?;
                    let t = g.matmul(inputs[d], wt)?;
                    pre[j * dn + d] = Some((s, t));
                }
            }
        }
        Ok(pre)
    }

    /// Logit column for sources `j` at steps `0..n` and target `d` at step
    /// `t`, or the aligned same-step column when `sel` is `Aligned`.
    fn logits(&self, g: &mut Graph<'_>, ctx: &Ctx<'_, '_>, j: usize, d: usize, sel: Sel) -> Result<Var> {
        let dn = self.num_tasks;
        let b = ctx.x.batch;
        let net = *self.fnet(j, d).expect("active pair");
        let (src, tgt) = ctx.pre[j * dn + d].expect("active pair");
        match self.gate {
            Gate::Features => {
                let (s, t) = match sel {
                    Sel::Aligned => (src, tgt),
                    Sel::Block { n, t } => {
                        let s = if n == ctx.x.steps {
                            src
                        } else {
                            g.slice_rows(src, 0, n * b)?
                        };
                        let tt = g.slice_rows(tgt, t * b, b)?;
                        let tt = if n == 1 { tt } else { g.repeat_rows(tt, n)? };
                        (s, tt)
                    }
                };
                self.gate_head(g, &net, s, t)
            }
            Gate::TaskLoss => {
                let scalar = self.gate_head(g, &net, src, tgt)?;
                let rows = match sel {
                    Sel::Aligned => b * ctx.x.steps,
                    Sel::Block { n, .. } => n * b,
                };
                g.repeat_rows(scalar, rows)
            }
        }
    }

    /// Turns logit columns (one per source task, all sharing the same target
    /// rows) into masked transfer weights.
    fn normalize(&self, g: &mut Graph<'_>, ctx: &Ctx<'_, '_>, logits: Vec<Var>, layout: Layout) -> Result<Vec<Var>> {
        let b = ctx.x.batch;
        let alphas = match self.norm {
            AlphaNorm::Sigmoid => logits.into_iter().map(|l| g.sigmoid(l)).collect::<Vec<_>>(),
            AlphaNorm::Softmax => {
                // Rearrange every column to `rows × sources`, softmax across
                // sources, and scatter back.
                let mut wide = Vec::with_capacity(logits.len());
                let mut widths = Vec::with_capacity(logits.len());
                let mut penalty = Vec::new();
                for &l in &logits {
                    let n = g.shape(l)[0] / b;
                    let w = match layout {
                        Layout::Blocks => {
                            let r = g.reshape(l, n, b)?;
                            g.transpose(r)
                        }
                        Layout::Aligned => l,
                    };
                    widths.push(g.shape(w)[1]);
                    penalty.push(self.softmax_penalty(ctx, layout, n));
                    wide.push(w);
                }
                let cat = g.concat_cols(&wide)?;
                let [r, c] = g.shape(cat);
                let mut pen = Tensor::zeros(r, c);
                let mut col = 0;
                for (p, w) in penalty.iter().zip(&widths) {
                    for row in 0..r {
                        for q in 0..*w {
                            pen.set(row, col + q, p.get(row, q));
                        }
                    }
                    col += w;
                }
                let pen = g.constant(pen);
                let cat = g.add(cat, pen)?;
                let soft = g.softmax_rows(cat);
                let mut out = Vec::with_capacity(wide.len());
                let mut col = 0;
                for &w in &widths {
                    let s = g.slice_cols(soft, col, w)?;
                    col += w;
                    out.push(match layout {
                        Layout::Blocks => {
                            let n = w;
                            let t = g.transpose(s);
                            g.reshape(t, n * b, 1)?
                        }
                        Layout::Aligned => s,
                    });
                }
                out
            }
        };
        match ctx.mask {
            None => Ok(alphas),
            Some(mask) => alphas
                .into_iter()
                .map(|a| {
                    let n = g.shape(a)[0];
                    let m = if n == g.shape(mask)[0] {
                        mask
                    } else {
                        g.slice_rows(mask, 0, n)?
                    };
                    g.mul(a, m)
                })
                .collect(),
        }
    }

    fn softmax_penalty(&self, ctx: &Ctx<'_, '_>, layout: Layout, n: usize) -> Tensor {
        let b = ctx.x.batch;
        let valid = |row: usize| ctx.x.source_mask.is_none_or(|m| m.data()[row] > 0.0);
        match layout {
            Layout::Blocks => {
                let mut p = Tensor::zeros(b, n);
                for bi in 0..b {
                    for i in 0..n {
                        if !valid(i * b + bi) {
                            p.set(bi, i, MASKED_LOGIT);
                        }
                    }
                }
                p
            }
            Layout::Aligned => {
                let rows = b * ctx.x.steps;
                let mut p = Tensor::zeros(rows, 1);
                for r in 0..rows {
                    if !valid(r) {
                        p.set(r, 0, MASKED_LOGIT);
                    }
                }
                p
            }
        }
    }

    fn combine_samestep(&self, g: &mut Graph<'_>, ctx: &Ctx<'_, '_>) -> Result<Combined> {
        let dn = self.num_tasks;
        let mut features = Vec::with_capacity(dn);
        let mut alphas = Vec::new();
        let steps = ctx.x.steps;
        for d in 0..dn {
            let sources = self.sources(d);
            if sources.is_empty() {
                features.push(ctx.x.features[d]);
                continue;
            }
            let logits = sources
                .iter()
                .map(|&j| self.logits(g, ctx, j, d, Sel::Aligned))
                .collect::<Result<Vec<_>>>()?;
            let a = self.normalize(g, ctx, logits, Layout::Aligned)?;
            let mut parts = Vec::with_capacity(sources.len());
            for (&j, &alpha) in sources.iter().zip(&a) {
                parts.push(g.scale_rows(ctx.adapted[j], alpha)?);
                alphas.push(AlphaBlock {
                    source: j,
                    target: d,
                    pairs: (0..steps).map(|t| (t, t)).collect(),
                    alpha,
                });
            }
            let agg = g.add_n(&parts)?;
            features.push(self.finish(g, ctx.x.features[d], d, agg)?);
        }
        Ok(Combined { features, alphas })
    }

    fn combine_temporal(&self, g: &mut Graph<'_>, ctx: &Ctx<'_, '_>) -> Result<Combined> {
        let dn = self.num_tasks;
        let (b, steps) = (ctx.x.batch, ctx.x.steps);
        let mut features = Vec::with_capacity(dn);
        let mut alphas = Vec::new();
        for d in 0..dn {
            let sources = self.sources(d);
            let mut per_step = Vec::with_capacity(steps);
            for t in 0..steps {
                let n = if self.mode == TransferMode::Unconstrained {
                    steps
                } else {
                    t + 1
                };
                let logits = sources
                    .iter()
                    .map(|&j| self.logits(g, ctx, j, d, Sel::Block { n, t }))
                    .collect::<Result<Vec<_>>>()?;
                let a = self.normalize(g, ctx, logits, Layout::Blocks)?;
                let mut parts = Vec::with_capacity(sources.len());
                for (&j, &alpha) in sources.iter().zip(&a) {
                    let src = if n == steps {
                        ctx.adapted[j]
                    } else {
                        g.slice_rows(ctx.adapted[j], 0, n * b)?
                    };
                    let w = g.scale_rows(src, alpha)?;
                    parts.push(g.sum_row_blocks(w, b)?);
                    alphas.push(AlphaBlock {
                        source: j,
                        target: d,
                        pairs: (0..n).map(|i| (i, t)).collect(),
                        alpha,
                    });
                }
                per_step.push(g.add_n(&parts)?);
            }
            let agg = if steps == 1 {
                per_step[0]
            } else {
                g.concat_rows(&per_step)?
            };
            features.push(self.finish(g, ctx.x.features[d], d, agg)?);
        }
        Ok(Combined { features, alphas })
    }

    fn finish(&self, g: &mut Graph<'_>, f: Var, d: usize, agg: Var) -> Result<Var> {
        match self.adapters_out[d] {
            Some(g2) => {
                let out = g2.forward_leaky(g, agg, self.slope)?;
                g.add(f, out)
            }
            None => g.add(f, agg),
        }
    }
}

/// Whether `F_{j,d}` exists under `mode`.
pub fn pair_active(mode: TransferMode, j: usize, d: usize) -> bool {
    match mode {
        TransferMode::Full | TransferMode::Unconstrained => true,
        TransferMode::Intratask => j == d,
        TransferMode::Samestep => j != d,
        TransferMode::None => false,
    }
}

struct Ctx<'a, 'b> {
    x: &'a TransferInputs<'b>,
    pre: &'a [Option<(Var, Var)>],
    adapted: &'a [Var],
    mask: Option<Var>,
}

#[derive(Clone, Copy)]
enum Sel {
    Aligned,
    Block { n: usize, t: usize },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    Aligned,
    Blocks,
}
