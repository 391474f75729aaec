use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameters of one LSTM cell. Gate blocks are laid out `[i | f | g | o]`
/// along the columns of every matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    /// Registers `{prefix}/w_input`, `{prefix}/w_hidden` and `{prefix}/bias`.
    /// The forget-gate block of the bias starts at +1.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = hidden_size;
        let w_input = store.init(&format!("{prefix}/w_input"), input_size, 4 * k, Init::FanIn, seed)?;
        let w_hidden = store.init(&format!("{prefix}/w_hidden"), k, 4 * k, Init::FanIn, seed)?;
        let mut b = Tensor::zeros(1, 4 * k);
        for x in &mut b.data_mut()[k..2 * k] {
            *x = 1.0;
        }
        let bias = store.add(&format!("{prefix}/bias"), b)?;
        Ok(LstmParams {
            w_input,
            w_hidden,
            bias,
            input_size,
            hidden_size,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_input, self.w_hidden, self.bias]
    }
}

/// One LSTM step on a batch: `x` is `B×in`, `h` and `c` are `B×k`.
/// Returns the new `(h, c)`; `h` doubles as the step output.
pub fn lstm_step(g: &mut Graph<'_>, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let k = p.hidden_size;
    let [b, input] = g.shape(x);
    if input != p.input_size || g.shape(h) != [b, k] || g.shape(c) != [b, k] {
        return Err(Error::Dimension {
            op: "lstm_step",
            left: g.shape(x),
            right: g.shape(h),
        });
    }
    let wi = g.param(p.w_input);
    let wh = g.param(p.w_hidden);
    let bias = g.param(p.bias);
    let xi = g.matmul(x, wi)?;
    let hh = g.matmul(h, wh)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add_row(pre, bias)?;
    let i = g.slice_cols(pre, 0, k)?;
    let f = g.slice_cols(pre, k, k)?;
    let cand = g.slice_cols(pre, 2 * k, k)?;
    let o = g.slice_cols(pre, 3 * k, k)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs the cell over `xs` (one `B×in` matrix per step) from a zero state.
pub fn lstm_unroll(g: &mut Graph<'_>, p: &LstmParams, xs: &[Var]) -> Result<Vec<Var>> {
    let Some(&first) = xs.first() else {
        return Ok(Vec::new());
    };
    let b = g.shape(first)[0];
    let mut h = g.constant(Tensor::zeros(b, p.hidden_size));
    let mut c = g.constant(Tensor::zeros(b, p.hidden_size));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        (h, c) = lstm_step(g, p, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}
