//! Metrics, aggregation over runs, negative-transfer flags and the
//! uncertainty/transfer correlation analysis.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::transfer::TransferGraph;

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auroc",
            left: [scores.len(), 1],
            right: [labels.len(), 1],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auroc of NaN scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.iter().filter(|&&y| y == 0.0).count();
    if pos + neg != labels.len() {
        return Err(Error::UndefinedMetric("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1.0)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUROC of task `d` over its labelled instances.
pub fn masked_auroc(scores: &[f64], labels: &[f64], weights: &[f64]) -> Result<f64> {
    let (s, y): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .zip(labels)
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|((&s, &y), _)| (s, y))
        .unzip();
    auroc(&s, &y)
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation.
    pub p_value: f64,
    pub n: usize,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "spearman",
            left: [x.len(), 1],
            right: [y.len(), 1],
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedMetric(format!(
            "spearman needs at least 3 points, got {n}"
        )));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant series".into()));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Spearman { rho, p_value, n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
}

impl Cell {
    /// Mean and standard error (sample standard deviation over `√n`).
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::UndefinedMetric(format!(
                "standard error needs at least 2 runs, got {n}"
            )));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Cell {
            mean,
            stderr: (var / n as f64).sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    /// Name of the single-task row this row is compared against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub tasks: Vec<Cell>,
    pub macro_avg: Cell,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub tasks: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, variant: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

impl fmt::Display for ResultTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        write!(f, "{:<width$}", "variant")?;
        for t in &self.tasks {
            write!(f, "  {t:>16}")?;
        }
        writeln!(f, "  {:>16}", "average")?;
        for r in &self.rows {
            write!(f, "{:<width$}", r.variant)?;
            for c in r.tasks.iter().chain(std::iter::once(&r.macro_avg)) {
                write!(f, "  {:>16}", format!("{:.4}±{:.4}", c.mean, c.stderr))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Test AUROC of one run, per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub variant: String,
    pub seed: u64,
    pub task_auroc: Vec<f64>,
}

/// Mean and standard error per variant and task. The macro column averages
/// tasks within each run, then runs. Variants keep their first-seen order.
pub fn aggregate(runs: &[RunScores], tasks: &[String], expected_runs: usize) -> Result<ResultTable> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if r.task_auroc.len() != tasks.len() {
            return Err(Error::Dimension {
                op: "aggregate",
                left: [tasks.len(), 1],
                right: [r.task_auroc.len(), 1],
            });
        }
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for name in names {
        // Sorting by seed makes the result independent of input order.
        let mut mine: Vec<&RunScores> = runs.iter().filter(|r| r.variant == name).collect();
        mine.sort_by_key(|r| r.seed);
        if mine.len() < expected_runs.max(2) {
            missing.push(format!("{name} has {} of {} runs", mine.len(), expected_runs.max(2)));
            continue;
        }
        let mut cells = Vec::with_capacity(tasks.len());
        for d in 0..tasks.len() {
            let vals: Vec<f64> = mine.iter().map(|r| r.task_auroc[d]).collect();
            cells.push(Cell::from_values(&vals)?);
        }
        let macros: Vec<f64> = mine
            .iter()
            .map(|r| r.task_auroc.iter().sum::<f64>() / tasks.len() as f64)
            .collect();
        rows.push(ResultRow {
            variant: name.to_string(),
            baseline: None,
            tasks: cells,
            macro_avg: Cell::from_values(&macros)?,
            runs: mine.len(),
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing.join("; ")));
    }
    Ok(ResultTable {
        tasks: tasks.to_vec(),
        rows,
    })
}

/// When a multi-task cell counts as negative transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    /// Mean below the single-task mean.
    Strict,
    /// Mean below the single-task mean by more than the larger of the two
    /// standard errors.
    BeyondStdErr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub variant: String,
    pub baseline: String,
    pub task: String,
    pub multi: f64,
    pub single: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeTransferReport {
    pub rule: FlagRule,
    pub flags: Vec<Flag>,
    /// Flag count per multi-task variant, in table order.
    pub counts: Vec<(String, usize)>,
}

impl NegativeTransferReport {
    pub fn count(&self, variant: &str) -> usize {
        self.counts.iter().find(|(v, _)| v == variant).map_or(0, |c| c.1)
    }

    pub fn is_flagged(&self, variant: &str, task: &str) -> bool {
        self.flags.iter().any(|f| f.variant == variant && f.task == task)
    }
}

/// Compares every multi-task row against its single-task counterpart: the row
/// named by `baseline`, or the only single-task row when there is one.
pub fn negative_transfer_report(
    single: &ResultTable,
    multi: &ResultTable,
    rule: FlagRule,
) -> Result<NegativeTransferReport> {
    if single.tasks != multi.tasks {
        return Err(Error::Config(format!(
            "task sets differ: {:?} vs {:?}",
            single.tasks, multi.tasks
        )));
    }
    let mut flags = Vec::new();
    let mut counts = Vec::new();
    for row in &multi.rows {
        let base = match &row.baseline {
            Some(name) => single
                .row(name)
                .ok_or_else(|| Error::Config(format!("no single-task row named {name}")))?,
            None if single.rows.len() == 1 => &single.rows[0],
            None => {
                return Err(Error::Config(format!(
                    "{} has no baseline and the single-task table has {} rows",
                    row.variant,
                    single.rows.len()
                )))
            }
        };
        let mut n = 0;
        for (d, task) in multi.tasks.iter().enumerate() {
            let (m, s) = (row.tasks[d], base.tasks[d]);
            let flagged = match rule {
                FlagRule::Strict => m.mean < s.mean,
                FlagRule::BeyondStdErr => m.mean < s.mean - m.stderr.max(s.stderr),
            };
            if flagged {
                n += 1;
                flags.push(Flag {
                    variant: row.variant.clone(),
                    baseline: base.variant.clone(),
                    task: task.clone(),
                    multi: m.mean,
                    single: s.mean,
                });
            }
        }
        counts.push((row.variant.clone(), n));
    }
    Ok(NegativeTransferReport { rule, flags, counts })
}

/// Per `(task, timestep)` uncertainty and normalised transfer, averaged over
/// the instances of one run. Vectors are indexed `d·T + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTrace {
    pub num_tasks: usize,
    pub steps: usize,
    pub variance: Vec<f64>,
    pub outgoing: Vec<f64>,
    pub incoming: Vec<f64>,
}

impl UncertaintyTrace {
    /// Averages graphs of equal size. Instances with shorter graphs are
    /// skipped.
    pub fn from_graphs(graphs: &[TransferGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::UndefinedMetric("no transfer graphs".into()))?;
        let (dn, steps) = (first.num_tasks, first.steps);
        let used: Vec<&TransferGraph> = graphs
            .iter()
            .filter(|g| g.steps == steps && g.num_tasks == dn)
            .collect();
        let mut trace = UncertaintyTrace {
            num_tasks: dn,
            steps,
            variance: vec![0.0; dn * steps],
            outgoing: vec![0.0; dn * steps],
            incoming: vec![0.0; dn * steps],
        };
        for g in &used {
            for d in 0..dn {
                for t in 0..steps {
                    let i = d * steps + t;
                    trace.variance[i] += g.total_var(d, t);
                    trace.outgoing[i] += g.outgoing_all(d, t)?;
                    trace.incoming[i] += g.incoming_all(d, t)?;
                }
            }
        }
        let n = used.len() as f64;
        for v in trace
            .variance
            .iter_mut()
            .chain(trace.outgoing.iter_mut())
            .chain(trace.incoming.iter_mut())
        {
            *v /= n;
        }
        Ok(trace)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Source variance vs normalised outgoing transfer.
    pub outgoing: Spearman,
    /// Target variance vs normalised incoming transfer.
    pub incoming: Spearman,
}

pub const MIN_CORRELATION_POINTS: usize = 20;

pub fn uncertainty_transfer_correlation(trace: &UncertaintyTrace) -> Result<CorrelationReport> {
    let n = trace.variance.len();
    if n < MIN_CORRELATION_POINTS {
        return Err(Error::UndefinedMetric(format!(
            "need at least {MIN_CORRELATION_POINTS} (task, timestep) points, got {n}"
        )));
    }
    Ok(CorrelationReport {
        outgoing: spearman(&trace.variance, &trace.outgoing)?,
        incoming: spearman(&trace.variance, &trace.incoming)?,
    })
}

/// Mean ρ of each statistic over runs.
pub fn mean_correlation(reports: &[CorrelationReport]) -> Option<(f64, f64)> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some((
        reports.iter().map(|r| r.outgoing.rho).sum::<f64>() / n,
        reports.iter().map(|r| r.incoming.rho).sum::<f64>() / n,
    ))
}
