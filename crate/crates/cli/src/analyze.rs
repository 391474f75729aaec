use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tpamtl::data::EpisodeBatch;
use tpamtl::diffcore::RngStream;
use tpamtl::eval::{
    mean_correlation, negative_transfer_report, uncertainty_transfer_correlation, CorrelationReport,
    NegativeTransferReport, ResultTable, UncertaintyTrace,
};
use tpamtl::model::{transfer_graphs, Checkpoint, Model};
use tpamtl::train::RunRecord;
use tpamtl::transfer::TransferGraph;
use tpamtl::variants::{restore, Family};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::{experiment_data, load_records, results_table};
use crate::store::{self, read_json, write_atomic, write_json};

/// Instances per forward pass when collecting graphs.
const GRAPH_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub variant: String,
    pub seed: u64,
    pub report: Option<CorrelationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub results: ResultTable,
    pub negative_transfer: Option<NegativeTransferReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_transfer_note: Option<String>,
    pub correlations: Vec<CorrelationRow>,
    /// Mean outgoing and incoming ρ per variant.
    pub mean_correlations: Vec<(String, f64, f64)>,
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> CliResult<()> {
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn map_csv(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, std::io::Error::other(e))
}

fn write_results_csv(path: &Path, table: &ResultTable) -> CliResult<()> {
    let mut w = csv_writer();
    let err = map_csv(path);
    w.write_record(["variant", "task", "mean_auroc", "stderr", "runs"])
        .map_err(&err)?;
    for row in &table.rows {
        for (task, c) in table
            .tasks
            .iter()
            .zip(&row.tasks)
            .chain(std::iter::once((&"average".to_string(), &row.macro_avg)))
        {
            w.write_record([
                row.variant.clone(),
                task.clone(),
                c.mean.to_string(),
                c.stderr.to_string(),
                row.runs.to_string(),
            ])
            .map_err(&err)?;
        }
    }
    finish_csv(path, w)
}

fn write_flags_csv(
    path: &Path,
    single: &ResultTable,
    multi: &ResultTable,
    report: &NegativeTransferReport,
) -> CliResult<()> {
    let mut w = csv_writer();
    let err = map_csv(path);
    w.write_record([
        "variant",
        "baseline",
        "task",
        "multi_mean",
        "multi_stderr",
        "single_mean",
        "single_stderr",
        "flagged",
    ])
    .map_err(&err)?;
    for row in &multi.rows {
        let base = match &row.baseline {
            Some(b) => single.row(b),
            None => single.rows.first(),
        };
        let Some(base) = base else { continue };
        for (d, task) in multi.tasks.iter().enumerate() {
            w.write_record([
                row.variant.clone(),
                base.variant.clone(),
                task.clone(),
                row.tasks[d].mean.to_string(),
                row.tasks[d].stderr.to_string(),
                base.tasks[d].mean.to_string(),
                base.tasks[d].stderr.to_string(),
                report.is_flagged(&row.variant, task).to_string(),
            ])
            .map_err(&err)?;
        }
    }
    finish_csv(path, w)
}

fn write_trace_csv(path: &Path, trace: &UncertaintyTrace) -> CliResult<()> {
    let mut w = csv_writer();
    let err = map_csv(path);
    w.write_record(["task", "t", "variance", "outgoing", "incoming"])
        .map_err(&err)?;
    for d in 0..trace.num_tasks {
        for t in 0..trace.steps {
            let i = d * trace.steps + t;
            w.write_record([
                d.to_string(),
                t.to_string(),
                trace.variance[i].to_string(),
                trace.outgoing[i].to_string(),
                trace.incoming[i].to_string(),
            ])
            .map_err(&err)?;
        }
    }
    finish_csv(path, w)
}

fn graphs_for(model: &dyn Model, batch: &EpisodeBatch, seed: u64) -> CliResult<Vec<TransferGraph>> {
    let mut out = Vec::with_capacity(batch.len());
    let idx: Vec<usize> = (0..batch.len()).collect();
    for (k, part) in idx.chunks(GRAPH_CHUNK).enumerate() {
        let mut rng = RngStream::new(seed).child("analyze").child(&format!("chunk{k}"));
        out.extend(transfer_graphs(model, &batch.select(part), &mut rng)?);
    }
    Ok(out)
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes every analysis output under `<dir>/analysis` and returns a short
/// summary.
pub fn analyze(dir: &Path, instances: Option<usize>) -> CliResult<String> {
    let cfg_path = dir.join(store::EXPERIMENT_FILE);
    if !cfg_path.exists() {
        return Err(CliError::Config(format!(
            "{} is not an experiment directory (no {})",
            dir.display(),
            store::EXPERIMENT_FILE
        )));
    }
    let cfg: ExperimentConfig = read_json(&cfg_path)?;
    let data = experiment_data(&cfg, dir)?;
    let tasks = cfg.task_names(data.train.num_tasks)?;
    let records = load_records(&cfg, dir)?;
    let table = results_table(&records, &tasks, cfg.eval.seeds.len())?;
    let out = dir.join("analysis");
    store::create_dir(&out)?;
    write_results_csv(&out.join("results.csv"), &table)?;

    let is_single = |label: &str| {
        cfg.variants
            .iter()
            .find(|v| v.label() == label)
            .is_some_and(|v| v.family == Family::Stl)
    };
    let single = ResultTable {
        tasks: table.tasks.clone(),
        rows: table.rows.iter().filter(|r| is_single(&r.variant)).cloned().collect(),
    };
    let multi = ResultTable {
        tasks: table.tasks.clone(),
        rows: table.rows.iter().filter(|r| !is_single(&r.variant)).cloned().collect(),
    };
    let (negative_transfer, negative_transfer_note) = if single.rows.is_empty() {
        (None, Some("no single-task variant to compare against".to_string()))
    } else if multi.rows.is_empty() {
        (None, Some("no multi-task variant to compare".to_string()))
    } else {
        match negative_transfer_report(&single, &multi, cfg.eval.flag_rule) {
            Ok(r) => {
                write_flags_csv(&out.join("negative_transfer.csv"), &single, &multi, &r)?;
                (Some(r), None)
            }
            Err(e) => (None, Some(e.to_string())),
        }
    };

    let n_graphs = instances.unwrap_or(cfg.eval.graph_instances).min(data.test.len());
    let mut correlations = Vec::new();
    let mut mean_correlations = Vec::new();
    for spec in &cfg.variants {
        let label = spec.label();
        let graph_dir = out.join("graphs").join(&label);
        let mut reports = Vec::new();
        for r in records.iter().filter(|r| r.label == label) {
            let model = load_model(dir, r)?;
            let graphs = graphs_for(model.as_ref(), &data.test, r.seed)?;
            let seed_dir = graph_dir.join(format!("seed-{}", r.seed));
            if graphs.is_empty() {
                store::create_dir(&seed_dir)?;
                let note = format!(
                    "{label} has no transfer graph: the {} family does not transfer between tasks.\n",
                    spec.family
                );
                write_atomic(&graph_dir.join("NOTE.txt"), note.as_bytes())?;
                correlations.push(CorrelationRow {
                    variant: label.clone(),
                    seed: r.seed,
                    report: None,
                    note: Some("no transfer graph".into()),
                });
                continue;
            }
            for (b, g) in graphs.iter().take(n_graphs).enumerate() {
                let mut buf = Vec::new();
                g.write_csv(&mut buf)?;
                let path = seed_dir.join(format!("{}.csv", safe_name(&data.test.ids[b])));
                write_atomic(&path, &buf)?;
            }
            let trace = UncertaintyTrace::from_graphs(&graphs)?;
            write_trace_csv(&out.join("traces").join(format!("{label}-seed-{}.csv", r.seed)), &trace)?;
            let row = match uncertainty_transfer_correlation(&trace) {
                Ok(rep) => {
                    reports.push(rep);
                    CorrelationRow {
                        variant: label.clone(),
                        seed: r.seed,
                        report: Some(rep),
                        note: None,
                    }
                }
                Err(e) => CorrelationRow {
                    variant: label.clone(),
                    seed: r.seed,
                    report: None,
                    note: Some(e.to_string()),
                },
            };
            correlations.push(row);
        }
        if let Some((o, i)) = mean_correlation(&reports) {
            mean_correlations.push((label, o, i));
        }
    }
    write_correlation_csv(&out.join("correlation.csv"), &correlations, &mean_correlations)?;

    let analysis = Analysis {
        results: table,
        negative_transfer,
        negative_transfer_note,
        correlations,
        mean_correlations,
    };
    write_json(&out.join("analysis.json"), &analysis)?;
    Ok(summary(&analysis))
}

fn load_model(dir: &Path, record: &RunRecord) -> CliResult<Box<dyn Model>> {
    let rel = record
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{} seed {} has no checkpoint", record.label, record.seed)))?;
    let ckpt = Checkpoint::load(&dir.join(rel))?;
    Ok(restore(&ckpt)?)
}

fn write_correlation_csv(path: &Path, rows: &[CorrelationRow], means: &[(String, f64, f64)]) -> CliResult<()> {
    let mut w = csv_writer();
    let err = map_csv(path);
    w.write_record([
        "variant",
        "seed",
        "points",
        "outgoing_rho",
        "outgoing_p",
        "incoming_rho",
        "incoming_p",
        "note",
    ])
    .map_err(&err)?;
    for r in rows {
        let cols = match &r.report {
            Some(rep) => [
                rep.outgoing.n.to_string(),
                rep.outgoing.rho.to_string(),
                rep.outgoing.p_value.to_string(),
                rep.incoming.rho.to_string(),
                rep.incoming.p_value.to_string(),
            ],
            None => Default::default(),
        };
        let mut rec = vec![r.variant.clone(), r.seed.to_string()];
        rec.extend(cols);
        rec.push(r.note.clone().unwrap_or_default());
        w.write_record(rec).map_err(&err)?;
    }
    for (v, o, i) in means {
        w.write_record([
            v.clone(),
            "mean".into(),
            String::new(),
            o.to_string(),
            String::new(),
            i.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(&err)?;
    }
    finish_csv(path, w)
}

fn summary(a: &Analysis) -> String {
    let mut s = a.results.to_string();
    match (&a.negative_transfer, &a.negative_transfer_note) {
        (Some(r), _) => {
            let _ = writeln!(s, "\nnegative transfer ({:?}):", r.rule);
            for (v, n) in &r.counts {
                let _ = writeln!(s, "  {v}: {n} flagged task(s)");
            }
        }
        (None, Some(note)) => {
            let _ = writeln!(s, "\nnegative transfer: {note}");
        }
        (None, None) => {}
    }
    for (v, o, i) in &a.mean_correlations {
        let _ = writeln!(s, "{v}: mean rho outgoing {o:.3}, incoming {i:.3}");
    }
    s
}
