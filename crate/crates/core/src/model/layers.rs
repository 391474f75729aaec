use crate::diffcore::{leaky_relu, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// `x·W + b` with `W: in×out` and `b: 1×out`, stored as `{prefix}/weight`
/// and `{prefix}/bias`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.init(&format!("{prefix}/weight"), input, output, init, seed)?;
        let bias = store.init(&format!("{prefix}/bias"), 1, output, Init::Zeros, seed)?;
        Ok(Affine { weight, bias })
    }

    /// Looks up an existing layer by prefix.
    pub fn find(store: &ParamStore, prefix: &str) -> Option<Self> {
        Some(Affine {
            weight: store.id(&format!("{prefix}/weight"))?,
            bias: store.id(&format!("{prefix}/bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn forward_leaky(&self, g: &mut Graph<'_>, x: Var, slope: f64) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.leaky_relu(y, slope))
    }

    /// Graph-free evaluation used by the streaming path.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.value(self.weight))?;
        let b = store.value(self.bias).data();
        let c = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        Ok(y)
    }

    pub fn apply_leaky(&self, store: &ParamStore, x: &Tensor, slope: f64) -> Result<Tensor> {
        Ok(self.apply(store, x)?.map(|v| leaky_relu(v, slope)))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
