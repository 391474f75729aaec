//! Baselines and ablations built on the same substrate.

mod amtl_loss;
mod lstm_net;
mod p_amtl;

pub use amtl_loss::{amtl_loss_weight, AmtlLoss, TaskLossTracker, TRACKER_DECAY};
pub use lstm_net::{kendall_weighted_loss, LstmNet};
pub use p_amtl::ProbAmtl;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig, TemporalAmtl, TransferMode, UncertaintyMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// One independent LSTM network per task.
    Stl,
    /// Shared LSTM network with per-task output layers.
    Mtl,
    /// Static transfer gated by running task losses.
    AmtlLoss,
    /// Hard sharing with uncertainty-weighted task losses.
    MtlKendall,
    /// Non-temporal probabilistic transfer.
    PAmtl,
    /// Temporal transfer without uncertainty.
    TdAmtl,
    TpAmtl,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Stl,
        Family::Mtl,
        Family::AmtlLoss,
        Family::MtlKendall,
        Family::PAmtl,
        Family::TdAmtl,
        Family::TpAmtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Stl => "stl",
            Family::Mtl => "mtl",
            Family::AmtlLoss => "amtl_loss",
            Family::MtlKendall => "mtl_kendall",
            Family::PAmtl => "p_amtl",
            Family::TdAmtl => "td_amtl",
            Family::TpAmtl => "tp_amtl",
        }
    }

    /// Whether tasks share any parameters.
    pub fn shares_parameters(self) -> bool {
        self != Family::Stl
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant family {s:?}")))
    }
}

/// A variant to build: a family plus optional ablation overrides.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyMode>,
    /// Must agree with the family when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_parameters: Option<bool>,
    /// Label used in reports; defaults to the family name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl VariantSpec {
    pub fn new(family: Family) -> Self {
        VariantSpec {
            family,
            transfer: None,
            uncertainty: None,
            shared_parameters: None,
            name: None,
        }
    }

    pub fn with_transfer(mut self, mode: TransferMode) -> Self {
        self.transfer = Some(mode);
        self
    }

    pub fn with_uncertainty(mut self, mode: UncertaintyMode) -> Self {
        self.uncertainty = Some(mode);
        self
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = self.family.name().to_string();
        if let Some(t) = self.transfer {
            s.push_str(&format!("-{}", serde_plain(&t)));
        }
        if let Some(u) = self.uncertainty {
            s.push_str(&format!("-{}", serde_plain(&u)));
        }
        s
    }

    /// The model configuration this spec actually builds.
    pub fn resolve(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        if let Some(shared) = self.shared_parameters {
            if shared != self.family.shares_parameters() {
                return Err(Error::Config(format!(
                    "{} cannot use shared_parameters = {shared}",
                    self.family
                )));
            }
        }
        let needs_transfer_default =
            |fam: Family| Err(Error::Config(format!("{fam} does not take a transfer override")));
        match self.family {
            Family::Stl | Family::Mtl | Family::MtlKendall => {
                if self.transfer.is_some_and(|t| t != TransferMode::None) {
                    return needs_transfer_default(self.family);
                }
                cfg.transfer = TransferMode::None;
                cfg.uncertainty = UncertaintyMode::None;
            }
            Family::AmtlLoss => {
                cfg.transfer = self.transfer.unwrap_or(TransferMode::Samestep);
                if self.uncertainty.is_some_and(|u| u != UncertaintyMode::None) {
                    return Err(Error::Config(
                        "amtl_loss gates on task losses and has no uncertainty".into(),
                    ));
                }
                cfg.uncertainty = UncertaintyMode::None;
            }
            Family::PAmtl => {
                if self.transfer.is_some_and(|t| t != TransferMode::Samestep) {
                    return Err(Error::Config("p_amtl only transfers within a timestep".into()));
                }
                cfg.transfer = TransferMode::Samestep;
                if let Some(u) = self.uncertainty {
                    cfg.uncertainty = u;
                }
            }
            Family::TdAmtl => {
                if self.uncertainty.is_some_and(|u| u != UncertaintyMode::None) {
                    return Err(Error::Config(
                        "td_amtl is deterministic; uncertainty must be none".into(),
                    ));
                }
                cfg.uncertainty = UncertaintyMode::None;
                if let Some(t) = self.transfer {
                    cfg.transfer = t;
                }
            }
            Family::TpAmtl => {
                if let Some(t) = self.transfer {
                    cfg.transfer = t;
                }
                if let Some(u) = self.uncertainty {
                    cfg.uncertainty = u;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Builds a freshly initialised model.
pub fn build(spec: &VariantSpec, config: &ModelConfig, seed: u64) -> Result<Box<dyn Model>> {
    let cfg = spec.resolve(config)?;
    Ok(match spec.family {
        Family::Stl => Box::new(LstmNet::stl(cfg, seed)?),
        Family::Mtl => Box::new(LstmNet::mtl(cfg, seed)?),
        Family::MtlKendall => Box::new(LstmNet::kendall(cfg, seed)?),
        Family::AmtlLoss => Box::new(AmtlLoss::new(cfg, seed)?),
        Family::PAmtl => Box::new(ProbAmtl::new(cfg, seed)?),
        Family::TdAmtl => Box::new(TemporalAmtl::with_gate(
            cfg,
            crate::transfer::Gate::Features,
            Family::TdAmtl,
            seed,
        )?),
        Family::TpAmtl => Box::new(TemporalAmtl::new(cfg, seed)?),
    })
}

/// Rebuilds a model from a checkpoint.
pub fn restore(checkpoint: &Checkpoint) -> Result<Box<dyn Model>> {
    let mut spec = VariantSpec::new(checkpoint.family);
    spec.transfer = Some(checkpoint.config.transfer);
    spec.uncertainty = Some(checkpoint.config.uncertainty);
    let mut model = build(&spec, &checkpoint.config, checkpoint.seed)?;
    let saved = checkpoint.to_store()?;
    if saved.len() != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters saved, model has {}",
            saved.len(),
            model.store().len()
        )));
    }
    let loaded = model.store_mut().load_from(&saved)?;
    if loaded != saved.len() {
        return Err(Error::Checkpoint("parameter names do not match the model".into()));
    }
    model.load_extra_state(&checkpoint.extra)?;
    Ok(model)
}
