use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which uncertainty channels the latent layer produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    Both,
    Epistemic,
    Aleatoric,
    None,
}

impl UncertaintyMode {
    pub fn epistemic(self) -> bool {
        matches!(self, UncertaintyMode::Both | UncertaintyMode::Epistemic)
    }

    pub fn aleatoric(self) -> bool {
        matches!(self, UncertaintyMode::Both | UncertaintyMode::Aleatoric)
    }

    /// Number of `k`-wide variance blocks handed to the transfer networks.
    pub fn channels(self) -> usize {
        usize::from(self.epistemic()) + usize::from(self.aleatoric())
    }
}

/// Which (source, timestep) pairs may transfer into a target feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Every task, past and present timesteps.
    Full,
    /// Only the task itself, past and present timesteps.
    Intratask,
    /// Other tasks at the same timestep.
    Samestep,
    None,
    /// Every task and every timestep, future included.
    Unconstrained,
}

impl TransferMode {
    /// Whether `alpha[j, d, i, t]` may be nonzero.
    pub fn allows(self, j: usize, d: usize, i: usize, t: usize) -> bool {
        match self {
            TransferMode::Full => i <= t,
            TransferMode::Intratask => j == d && i <= t,
            TransferMode::Samestep => j != d && i == t,
            TransferMode::None => false,
            TransferMode::Unconstrained => true,
        }
    }
}

/// Output normalisation of the transfer weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaNorm {
    /// Independent sigmoid gate per (source, target) pair.
    Sigmoid,
    /// Softmax over all allowed sources of one target feature.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuActivation {
    LeakyRelu,
    Identity,
}

fn default_slope() -> f64 {
    0.01
}

fn default_mc() -> usize {
    8
}

fn default_layers() -> usize {
    2
}

fn default_uncertainty() -> UncertaintyMode {
    UncertaintyMode::Both
}

fn default_transfer() -> TransferMode {
    TransferMode::Full
}

fn default_norm() -> AlphaNorm {
    AlphaNorm::Sigmoid
}

fn default_mu() -> MuActivation {
    MuActivation::LeakyRelu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_tasks: usize,
    pub num_features: usize,
    pub hidden_size: usize,
    #[serde(default = "default_layers")]
    pub embed_layers: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_uncertainty")]
    pub uncertainty: UncertaintyMode,
    #[serde(default = "default_transfer")]
    pub transfer: TransferMode,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_norm")]
    pub alpha_norm: AlphaNorm,
    #[serde(default = "default_mu")]
    pub mu_activation: MuActivation,
}

impl ModelConfig {
    pub fn new(num_tasks: usize, num_features: usize, hidden_size: usize) -> Self {
        ModelConfig {
            num_tasks,
            num_features,
            hidden_size,
            embed_layers: default_layers(),
            dropout_rate: 0.0,
            mc_samples: default_mc(),
            uncertainty: default_uncertainty(),
            transfer: default_transfer(),
            leaky_slope: default_slope(),
            alpha_norm: default_norm(),
            mu_activation: default_mu(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_tasks == 0 {
            return fail("num_tasks must be positive".into());
        }
        if self.num_features == 0 {
            return fail("num_features must be positive".into());
        }
        if self.hidden_size == 0 {
            return fail("hidden_size must be positive".into());
        }
        if self.embed_layers == 0 {
            return fail("embed_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.uncertainty.epistemic() && self.mc_samples < 2 {
            return fail(format!(
                "mc_samples must be at least 2 with epistemic uncertainty, got {}",
                self.mc_samples
            ));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return fail(format!(
                "leaky_slope {} must be finite and non-negative",
                self.leaky_slope
            ));
        }
        Ok(())
    }
}
