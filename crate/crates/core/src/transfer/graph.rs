use std::io::Write;

use serde::{Deserialize, Serialize};

use super::AlphaBlock;
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::TransferMode;

/// Transfer weights and uncertainty annotations for one instance.
///
/// `alpha` is dense `D×D×T×T`, indexed `[source][target][source_t][target_t]`.
/// Variances are per `(task, timestep)` averages over the feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferGraph {
    pub mode: TransferMode,
    pub num_tasks: usize,
    pub steps: usize,
    pub alpha: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
}

pub const CSV_HEADER: [&str; 9] = [
    "source_task",
    "target_task",
    "source_t",
    "target_t",
    "alpha",
    "source_epistemic_var",
    "source_aleatoric_var",
    "target_epistemic_var",
    "target_aleatoric_var",
];

impl TransferGraph {
    pub fn empty(mode: TransferMode, num_tasks: usize, steps: usize) -> Self {
        TransferGraph {
            mode,
            num_tasks,
            steps,
            alpha: vec![0.0; num_tasks * num_tasks * steps * steps],
            epistemic: vec![0.0; num_tasks * steps],
            aleatoric: vec![0.0; num_tasks * steps],
        }
    }

    /// Reads instance `b` out of a forward pass. `epistemic[d]` and
    /// `aleatoric[d]` are stacked `(T·B)×k` variance nodes when present.
    pub fn from_forward(
        g: &Graph<'_>,
        mode: TransferMode,
        alphas: &[AlphaBlock],
        epistemic: &[Option<Var>],
        aleatoric: &[Option<Var>],
        batch: usize,
        b: usize,
        length: usize,
    ) -> Self {
        let dn = epistemic.len();
        let mut out = TransferGraph::empty(mode, dn, length);
        for blk in alphas {
            let v = g.value(blk.alpha).data();
            for (p, &(i, t)) in blk.pairs.iter().enumerate() {
                if i < length && t < length {
                    let idx = out.index(blk.source, blk.target, i, t);
                    out.alpha[idx] = v[p * batch + b];
                }
            }
        }
        for d in 0..dn {
            for t in 0..length {
                let row = t * batch + b;
                if let Some(e) = epistemic[d] {
                    out.epistemic[d * length + t] = row_mean(g, e, row);
                }
                if let Some(a) = aleatoric[d] {
                    out.aleatoric[d * length + t] = row_mean(g, a, row);
                }
            }
        }
        out
    }

    fn index(&self, j: usize, d: usize, i: usize, t: usize) -> usize {
        ((j * self.num_tasks + d) * self.steps + i) * self.steps + t
    }

    fn check(&self, tasks: &[usize], steps: &[usize]) -> Result<()> {
        if let Some(&x) = tasks.iter().find(|&&x| x >= self.num_tasks) {
            return Err(Error::UnknownTask {
                task: x,
                num_tasks: self.num_tasks,
            });
        }
        if let Some(&x) = steps.iter().find(|&&x| x >= self.steps) {
            return Err(Error::OutOfRange(format!("timestep {x} of {}", self.steps)));
        }
        Ok(())
    }

    pub fn alpha(&self, j: usize, d: usize, i: usize, t: usize) -> Result<f64> {
        self.check(&[j, d], &[i, t])?;
        Ok(self.alpha[self.index(j, d, i, t)])
    }

    pub fn set_alpha(&mut self, j: usize, d: usize, i: usize, t: usize, value: f64) -> Result<()> {
        self.check(&[j, d], &[i, t])?;
        let idx = self.index(j, d, i, t);
        self.alpha[idx] = value;
        Ok(())
    }

    pub fn epistemic_var(&self, d: usize, t: usize) -> f64 {
        self.epistemic[d * self.steps + t]
    }

    pub fn aleatoric_var(&self, d: usize, t: usize) -> f64 {
        self.aleatoric[d * self.steps + t]
    }

    /// Epistemic plus aleatoric variance, used for the analyses.
    pub fn total_var(&self, d: usize, t: usize) -> f64 {
        self.epistemic_var(d, t) + self.aleatoric_var(d, t)
    }

    /// Mean of `alpha[j, d, t, t..T]` (0-based `t`).
    pub fn normalized_outgoing(&self, j: usize, t: usize, d: usize) -> Result<f64> {
        self.check(&[j, d], &[t])?;
        let n = self.steps - t;
        let s: f64 = (t..self.steps).map(|u| self.alpha[self.index(j, d, t, u)]).sum();
        Ok(s / n as f64)
    }

    /// Mean of `alpha[j, d, 0..=t, t]` (0-based `t`).
    pub fn normalized_incoming(&self, d: usize, t: usize, j: usize) -> Result<f64> {
        self.check(&[j, d], &[t])?;
        let s: f64 = (0..=t).map(|i| self.alpha[self.index(j, d, i, t)]).sum();
        Ok(s / (t + 1) as f64)
    }

    /// Outgoing transfer of `(j, t)` averaged over every target the mode
    /// connects to `j`.
    pub fn outgoing_all(&self, j: usize, t: usize) -> Result<f64> {
        let targets: Vec<usize> = (0..self.num_tasks)
            .filter(|&d| super::pair_active(self.mode, j, d))
            .collect();
        if targets.is_empty() {
            return Ok(0.0);
        }
        let mut s = 0.0;
        for &d in &targets {
            s += self.normalized_outgoing(j, t, d)?;
        }
        Ok(s / targets.len() as f64)
    }

    /// Incoming transfer of `(d, t)` averaged over every source the mode
    /// connects to `d`.
    pub fn incoming_all(&self, d: usize, t: usize) -> Result<f64> {
        let sources: Vec<usize> = (0..self.num_tasks)
            .filter(|&j| super::pair_active(self.mode, j, d))
            .collect();
        if sources.is_empty() {
            return Ok(0.0);
        }
        let mut s = 0.0;
        for &j in &sources {
            s += self.normalized_incoming(d, t, j)?;
        }
        Ok(s / sources.len() as f64)
    }

    /// Writes one record per allowed `(source, target, source_t, target_t)`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for j in 0..self.num_tasks {
            for d in 0..self.num_tasks {
                for i in 0..self.steps {
                    for t in 0..self.steps {
                        if !self.mode.allows(j, d, i, t) {
                            continue;
                        }
                        out.write_record([
                            j.to_string(),
                            d.to_string(),
                            i.to_string(),
                            t.to_string(),
                            self.alpha[self.index(j, d, i, t)].to_string(),
                            self.epistemic_var(j, i).to_string(),
                            self.aleatoric_var(j, i).to_string(),
                            self.epistemic_var(d, t).to_string(),
                            self.aleatoric_var(d, t).to_string(),
                        ])?;
                    }
                }
            }
        }
        out.flush().map_err(|e| Error::io("<transfer graph>", e))?;
        Ok(())
    }
}

fn row_mean(g: &Graph<'_>, v: Var, row: usize) -> f64 {
    let r = g.value(v).row_slice(row);
    r.iter().sum::<f64>() / r.len().max(1) as f64
}
