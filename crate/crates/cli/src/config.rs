use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpamtl::data::{SplitFractions, SyntheticSpec};
use tpamtl::eval::FlagRule;
use tpamtl::model::{AlphaNorm, ModelConfig, MuActivation, TransferMode, UncertaintyMode};
use tpamtl::train::{Grid, GridCell, TrainConfig};
use tpamtl::variants::VariantSpec;

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "TPAMTL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Imbalanced,
    Temporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated data. Without a `spec` table the imbalanced preset is used.
    Synthetic {
        generator: Generator,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spec: Option<SyntheticSpec>,
    },
    /// One CSV file, split at random.
    Csv {
        path: PathBuf,
        #[serde(default)]
        split: SplitFractions,
        #[serde(default)]
        split_seed: u64,
    },
    /// A directory written by `generate`.
    Directory { path: PathBuf },
}

impl DatasetConfig {
    pub fn synthetic_spec(&self) -> CliResult<Option<SyntheticSpec>> {
        match self {
            DatasetConfig::Synthetic { generator, seed, spec } => {
                let spec = match (spec, generator) {
                    (Some(s), _) => s.clone(),
                    (None, Generator::Imbalanced) => SyntheticSpec::imbalanced(*seed),
                    (None, Generator::Temporal) => {
                        return Err(CliError::Config(
                            "dataset.spec is required for the temporal generator".into(),
                        ))
                    }
                };
                Ok(Some(spec))
            }
            _ => Ok(None),
        }
    }
}

/// Model settings shared by every variant. Task and feature counts come from
/// the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub embed_layers: usize,
    pub dropout_rate: f64,
    pub mc_samples: usize,
    pub uncertainty: UncertaintyMode,
    pub transfer: TransferMode,
    pub leaky_slope: f64,
    pub alpha_norm: AlphaNorm,
    pub mu_activation: MuActivation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 16);
        ModelSection {
            hidden_size: m.hidden_size,
            embed_layers: m.embed_layers,
            dropout_rate: 0.1,
            mc_samples: m.mc_samples,
            uncertainty: m.uncertainty,
            transfer: m.transfer,
            leaky_slope: m.leaky_slope,
            alpha_norm: m.alpha_norm,
            mu_activation: m.mu_activation,
        }
    }
}

impl ModelSection {
    pub fn config(&self, num_tasks: usize, num_features: usize) -> ModelConfig {
        ModelConfig {
            num_tasks,
            num_features,
            hidden_size: self.hidden_size,
            embed_layers: self.embed_layers,
            dropout_rate: self.dropout_rate,
            mc_samples: self.mc_samples,
            uncertainty: self.uncertainty,
            transfer: self.transfer,
            leaky_slope: self.leaky_slope,
            alpha_norm: self.alpha_norm,
            mu_activation: self.mu_activation,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_graph_instances() -> usize {
    5
}

fn default_rule() -> FlagRule {
    FlagRule::BeyondStdErr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// One run per seed and variant.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seeds used to score grid cells; the first run seed when empty.
    #[serde(default)]
    pub grid_seeds: Vec<u64>,
    /// Relative paths resolve against the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub task_names: Option<Vec<String>>,
    /// Test instances per run whose transfer graphs `analyze` exports.
    #[serde(default = "default_graph_instances")]
    pub graph_instances: usize,
    #[serde(default = "default_rule")]
    pub flag_rule: FlagRule,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: default_seeds(),
            grid_seeds: Vec::new(),
            output_dir: None,
            task_names: None,
            graph_instances: default_graph_instances(),
            flag_rule: default_rule(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSection,
    pub variants: Vec<VariantSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Hyperparameter grid; the model and train sections alone when absent.
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Reads a TOML file and applies `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        match &mut self.dataset {
            DatasetConfig::Csv { path, .. } | DatasetConfig::Directory { path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
    }

    /// Everything that can be checked without touching the data.
    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.variants.is_empty() {
            return fail("variants: at least one variant is required".into());
        }
        let mut labels: Vec<String> = self.variants.iter().map(VariantSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return fail(format!(
                "variants: label {:?} appears twice; set `name` to tell them apart",
                w[0]
            ));
        }
        if self.eval.seeds.is_empty() {
            return fail("eval.seeds must not be empty".into());
        }
        let mut seeds = self.eval.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.eval.seeds.len() {
            return fail("eval.seeds contains duplicates".into());
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if let Some(g) = &self.grid {
            if g.cells().is_empty() {
                return fail("grid: every list must be non-empty".into());
            }
            for c in g.cells() {
                let (m, t) = c.apply(&self.model.config(1, 1), &self.train);
                m.validate().map_err(|e| CliError::Config(format!("grid: {e}")))?;
                t.validate().map_err(|e| CliError::Config(format!("grid: {e}")))?;
            }
        }
        let probe = self.model.config(1, 1);
        for v in &self.variants {
            let mut p = probe.clone();
            p.num_tasks = 2;
            v.resolve(&p)
                .map_err(|e| CliError::Config(format!("variant {}: {e}", v.label())))?;
        }
        if let Some(spec) = self.dataset.synthetic_spec()? {
            spec.validate()
                .map_err(|e| CliError::Config(format!("dataset.spec: {e}")))?;
        }
        Ok(())
    }

    pub fn grid_cells(&self) -> Vec<GridCell> {
        match &self.grid {
            Some(g) => g.cells(),
            None => vec![GridCell {
                hidden_size: self.model.hidden_size,
                embed_layers: self.model.embed_layers,
                batch_size: self.train.batch_size,
                learning_rate: self.train.learning_rate,
                l2: self.train.l2,
                dropout_rate: self.model.dropout_rate,
            }],
        }
    }

    pub fn grid_seeds(&self) -> Vec<u64> {
        if self.eval.grid_seeds.is_empty() {
            vec![self.eval.seeds[0]]
        } else {
            self.eval.grid_seeds.clone()
        }
    }

    pub fn task_names(&self, num_tasks: usize) -> CliResult<Vec<String>> {
        match &self.eval.task_names {
            Some(n) if n.len() == num_tasks => Ok(n.clone()),
            Some(n) => Err(CliError::Config(format!(
                "eval.task_names has {} names but the data has {num_tasks} tasks",
                n.len()
            ))),
            None => Ok((1..=num_tasks).map(|d| format!("task_{d}")).collect()),
        }
    }
}

/// Sets `a.b.c=value`. The value is parsed as TOML and falls back to a
/// plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Output root: the flag, then the environment variable, then `runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Experiment directory for a config file.
pub fn experiment_dir(cfg: &ExperimentConfig, config_path: &Path, root: Option<&Path>) -> PathBuf {
    let root = output_root(root);
    match &cfg.eval.output_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => root.join(p),
        None => root.join(config_path.file_stem().unwrap_or_default()),
    }
}
