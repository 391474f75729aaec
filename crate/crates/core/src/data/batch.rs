use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Multi-task time-series instances padded to a common length.
///
/// `inputs` is laid out `[instance][timestep][feature]`. Timesteps at or past
/// an instance's length are zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    pub ids: Vec<String>,
    pub num_features: usize,
    pub num_tasks: usize,
    pub steps: usize,
    pub inputs: Vec<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<f64>,
    pub mask: Vec<bool>,
}

impl EpisodeBatch {
    pub fn new(
        ids: Vec<String>,
        num_features: usize,
        num_tasks: usize,
        steps: usize,
        inputs: Vec<f64>,
        lengths: Vec<usize>,
        labels: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let b = ids.len();
        if inputs.len() != b * steps * num_features
            || lengths.len() != b
            || labels.len() != b * num_tasks
            || mask.len() != b * num_tasks
        {
            return Err(Error::Dimension {
                op: "episode_batch",
                left: [b, steps * num_features],
                right: [inputs.len(), labels.len()],
            });
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > steps) {
            return Err(Error::OutOfRange(format!("instance length {bad} with {steps} steps")));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::OutOfRange("labels must be 0 or 1".into()));
        }
        Ok(EpisodeBatch {
            ids,
            num_features,
            num_tasks,
            steps,
            inputs,
            lengths,
            labels,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn feature(&self, b: usize, t: usize, f: usize) -> f64 {
        self.inputs[(b * self.steps + t) * self.num_features + f]
    }

    pub fn instance_inputs(&self, b: usize) -> &[f64] {
        let w = self.steps * self.num_features;
        &self.inputs[b * w..(b + 1) * w]
    }

    pub fn label(&self, b: usize, d: usize) -> f64 {
        self.labels[b * self.num_tasks + d]
    }

    pub fn is_labeled(&self, b: usize, d: usize) -> bool {
        self.mask[b * self.num_tasks + d]
    }

    pub fn task_labels(&self, d: usize) -> Vec<f64> {
        (0..self.len()).map(|b| self.label(b, d)).collect()
    }

    /// 1.0 where task `d` is labelled, else 0.0.
    pub fn task_weights(&self, d: usize) -> Vec<f64> {
        (0..self.len())
            .map(|b| if self.is_labeled(b, d) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn count_labeled(&self, d: usize) -> usize {
        (0..self.len()).filter(|&b| self.is_labeled(b, d)).count()
    }

    /// Inputs as timestep blocks stacked along rows: row `t·B + b`.
    pub fn stacked_inputs(&self) -> Tensor {
        let (bn, m) = (self.len(), self.num_features);
        let mut data = Vec::with_capacity(self.steps * bn * m);
        for t in 0..self.steps {
            for b in 0..bn {
                let base = (b * self.steps + t) * m;
                data.extend_from_slice(&self.inputs[base..base + m]);
            }
        }
        Tensor::new(self.steps * bn, m, data).expect("sized above")
    }

    /// `(T·B)×1` column, 1.0 on valid timesteps.
    pub fn step_mask(&self) -> Tensor {
        let bn = self.len();
        let mut data = Vec::with_capacity(self.steps * bn);
        for t in 0..self.steps {
            for b in 0..bn {
                data.push(if t < self.lengths[b] { 1.0 } else { 0.0 });
            }
        }
        Tensor::column(data)
    }

    /// Subset of instances, re-padded to the longest selected one.
    pub fn select(&self, indices: &[usize]) -> EpisodeBatch {
        let steps = indices.iter().map(|&i| self.lengths[i]).max().unwrap_or(0).max(1);
        let (m, dn) = (self.num_features, self.num_tasks);
        let mut inputs = Vec::with_capacity(indices.len() * steps * m);
        let mut labels = Vec::with_capacity(indices.len() * dn);
        let mut mask = Vec::with_capacity(indices.len() * dn);
        for &i in indices {
            let src = self.instance_inputs(i);
            inputs.extend_from_slice(&src[..steps.min(self.steps) * m]);
            inputs.resize(inputs.len() + steps.saturating_sub(self.steps) * m, 0.0);
            labels.extend_from_slice(&self.labels[i * dn..(i + 1) * dn]);
            mask.extend_from_slice(&self.mask[i * dn..(i + 1) * dn]);
        }
        EpisodeBatch {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            num_features: m,
            num_tasks: dn,
            steps,
            inputs,
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
            labels,
            mask,
        }
    }

    /// Keeps only the first `t` timesteps of every instance.
    pub fn truncate(&self, t: usize) -> EpisodeBatch {
        let t = t.clamp(1, self.steps);
        let m = self.num_features;
        let mut inputs = Vec::with_capacity(self.len() * t * m);
        for b in 0..self.len() {
            inputs.extend_from_slice(&self.instance_inputs(b)[..t * m]);
        }
        EpisodeBatch {
            steps: t,
            inputs,
            lengths: self.lengths.iter().map(|&l| l.min(t)).collect(),
            ..self.clone()
        }
    }

    /// Concatenates batches with the same task and feature layout.
    pub fn concat(parts: &[&EpisodeBatch]) -> Result<EpisodeBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero batches".into()))?;
        let steps = parts.iter().map(|p| p.steps).max().unwrap_or(1);
        let mut out = EpisodeBatch {
            ids: Vec::new(),
            num_features: first.num_features,
            num_tasks: first.num_tasks,
            steps,
            inputs: Vec::new(),
            lengths: Vec::new(),
            labels: Vec::new(),
            mask: Vec::new(),
        };
        for p in parts {
            if p.num_features != first.num_features || p.num_tasks != first.num_tasks {
                return Err(Error::Dimension {
                    op: "concat_batches",
                    left: [first.num_features, first.num_tasks],
                    right: [p.num_features, p.num_tasks],
                });
            }
            for b in 0..p.len() {
                out.inputs.extend_from_slice(p.instance_inputs(b));
                out.inputs
                    .resize(out.inputs.len() + (steps - p.steps) * p.num_features, 0.0);
            }
            out.ids.extend(p.ids.iter().cloned());
            out.lengths.extend_from_slice(&p.lengths);
            out.labels.extend_from_slice(&p.labels);
            out.mask.extend_from_slice(&p.mask);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EpisodeBatch {
        // two instances, T=3, m=2, D=2; second instance has length 2
        EpisodeBatch::new(
            vec!["a".into(), "b".into()],
            2,
            2,
            3,
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 0., 0.],
            vec![3, 2],
            vec![1., 0., 0., 1.],
            vec![true, false, true, true],
        )
        .unwrap()
    }

    #[test]
    fn stacked_layout_is_time_major() {
        let s = tiny().stacked_inputs();
        assert_eq!(s.row_slice(0), &[1., 2.]);
        assert_eq!(s.row_slice(1), &[7., 8.]);
        assert_eq!(s.row_slice(2), &[3., 4.]);
        assert_eq!(tiny().step_mask().data(), &[1., 1., 1., 1., 1., 0.]);
    }

    #[test]
    fn select_repads() {
        let b = tiny().select(&[1]);
        assert_eq!(b.steps, 2);
        assert_eq!(b.inputs, vec![7., 8., 9., 10.]);
        assert_eq!(b.task_weights(0), vec![1.0]);
    }

    #[test]
    fn rejects_bad_lengths() {
        let mut x = tiny();
        x.lengths[0] = 4;
        assert!(EpisodeBatch::new(x.ids, 2, 2, 3, x.inputs, x.lengths, x.labels, x.mask).is_err());
    }
}
