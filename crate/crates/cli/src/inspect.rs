use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use tpamtl::model::Checkpoint;

use crate::error::CliResult;

#[derive(Serialize)]
struct ParamSummary<'a> {
    name: &'a str,
    shape: [usize; 2],
    l2_norm: f64,
    max_abs: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    family: String,
    seed: u64,
    config: &'a tpamtl::model::ModelConfig,
    tensors: usize,
    scalars: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    params: Vec<ParamSummary<'a>>,
    extra: &'a serde_json::Value,
}

/// Text (or JSON) description of a checkpoint. Loading goes through the
/// same validation as restoring a model.
pub fn inspect(path: &Path, params: bool, json: bool) -> CliResult<String> {
    let ckpt = Checkpoint::load(path)?;
    tpamtl::variants::restore(&ckpt)?;
    let summary = Summary {
        family: ckpt.family.to_string(),
        seed: ckpt.seed,
        config: &ckpt.config,
        tensors: ckpt.params.len(),
        scalars: ckpt.params.iter().map(|p| p.values.len()).sum(),
        params: if params || json {
            ckpt.params
                .iter()
                .map(|p| ParamSummary {
                    name: &p.name,
                    shape: p.shape,
                    l2_norm: p.values.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    max_abs: p.values.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
                })
                .collect()
        } else {
            Vec::new()
        },
        extra: &ckpt.extra,
    };
    if json {
        let mut s = serde_json::to_string_pretty(&summary)?;
        s.push('\n');
        return Ok(s);
    }
    let c = summary.config;
    let mut s = String::new();
    let _ = writeln!(s, "family       {}", summary.family);
    let _ = writeln!(s, "seed         {}", summary.seed);
    let _ = writeln!(s, "tasks        {}", c.num_tasks);
    let _ = writeln!(s, "features     {}", c.num_features);
    let _ = writeln!(s, "hidden       {}", c.hidden_size);
    let _ = writeln!(s, "transfer     {:?}", c.transfer);
    let _ = writeln!(s, "uncertainty  {:?}", c.uncertainty);
    let _ = writeln!(
        s,
        "parameters   {} tensors, {} scalars",
        summary.tensors, summary.scalars
    );
    for p in &summary.params {
        let _ = writeln!(
            s,
            "  {:<40} {:>4}x{:<4} norm {:.4e}  max {:.4e}",
            p.name, p.shape[0], p.shape[1], p.l2_norm, p.max_abs
        );
    }
    Ok(s)
}
