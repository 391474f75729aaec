use serde::{Deserialize, Serialize};

use super::{DatasetSplit, EpisodeBatch, SplitFractions};
use crate::diffcore::RngStream;
use crate::error::{Error, Result};

/// Task `target`'s label is driven by an event in task `source`'s channel
/// `lag` steps earlier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLink {
    pub source: usize,
    pub target: usize,
    pub lag: usize,
}

/// Scoring rule of one task in the single-step generator:
/// `s(x) = w·x + c·x_a·x_b`. Labels mark the top `positive_rate` of scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRule {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub interaction: Option<(usize, usize, f64)>,
}

impl TaskRule {
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut s: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum();
        if let Some((a, b, c)) = self.interaction {
            s += c * x[a] * x[b];
        }
        s
    }
}

fn default_rate() -> f64 {
    0.5
}

fn default_echo() -> f64 {
    0.4
}

fn default_channel_noise() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub timesteps: usize,
    pub num_features: usize,
    /// Labelled instances per task.
    pub counts: Vec<usize>,
    /// Label flip rate per task.
    pub noise: Vec<f64>,
    #[serde(default)]
    pub links: Vec<TaskLink>,
    /// Per-task rules for the single-step generator; drawn from the seed
    /// when empty.
    #[serde(default)]
    pub rules: Vec<TaskRule>,
    #[serde(default = "default_rate")]
    pub positive_rate: f64,
    /// Amplitude of the lagged echo in a linked task's own channel.
    #[serde(default = "default_echo")]
    pub echo: f64,
    #[serde(default = "default_channel_noise")]
    pub channel_noise: f64,
    #[serde(default)]
    pub split: SplitFractions,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Five single-step tasks with counts (5000, 5000, 1000, 1000, 500).
    pub fn imbalanced(seed: u64) -> Self {
        let m = 24;
        let rule = |pairs: &[(usize, f64)], inter: (usize, usize, f64)| {
            let mut weights = vec![0.0; m];
            for &(i, v) in pairs {
                weights[i] = v;
            }
            TaskRule {
                weights,
                interaction: Some(inter),
            }
        };
        let a = [(0, 1.0), (1, 0.8), (2, -0.6), (3, 0.5), (4, -0.4), (5, 0.3)];
        let a2 = [(0, 0.8), (1, 1.0), (2, -0.4), (3, 0.6), (4, -0.5), (5, 0.2)];
        let b = [(6, 1.0), (7, -0.9), (8, 0.7), (9, 0.4), (10, -0.3), (11, 0.5)];
        let b2 = [(6, 0.9), (7, -1.0), (8, 0.5), (9, 0.5), (10, -0.4), (11, 0.3)];
        let c = [(12, 1.0), (13, 0.8), (14, -0.8), (0, 0.4), (1, 0.3), (15, 0.5)];
        let rules = vec![
            rule(&a, (0, 1, 0.8)),
            rule(&b, (6, 7, 0.8)),
            rule(&a2, (0, 1, 0.8)),
            rule(&b2, (6, 7, 0.8)),
            rule(&c, (12, 13, 1.2)),
        ];
        SyntheticSpec {
            num_tasks: 5,
            timesteps: 1,
            num_features: m,
            counts: vec![5000, 5000, 1000, 1000, 500],
            noise: vec![0.1, 0.3, 0.1, 0.1, 0.05],
            links: Vec::new(),
            rules,
            positive_rate: 0.5,
            echo: default_echo(),
            channel_noise: default_channel_noise(),
            split: SplitFractions::default(),
            seed,
        }
    }

    /// Temporal tasks where task 1 follows task 0 at `lag` and the remaining
    /// tasks are independent roots.
    pub fn temporal(num_tasks: usize, timesteps: usize, instances: usize, lag: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_tasks,
            timesteps,
            num_features: num_tasks + 2,
            counts: vec![instances; num_tasks],
            noise: vec![0.0; num_tasks],
            links: if num_tasks >= 2 {
                vec![TaskLink {
                    source: 0,
                    target: 1,
                    lag,
                }]
            } else {
                Vec::new()
            },
            rules: Vec::new(),
            positive_rate: 0.5,
            echo: default_echo(),
            channel_noise: default_channel_noise(),
            split: SplitFractions::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(msg));
        let dn = self.num_tasks;
        if dn == 0 {
            return fail("num_tasks must be positive".into());
        }
        if self.timesteps == 0 {
            return fail("timesteps must be positive".into());
        }
        if self.num_features == 0 {
            return fail("num_features must be positive".into());
        }
        if self.counts.len() != dn {
            return fail(format!("counts has {} entries for {dn} tasks", self.counts.len()));
        }
        if let Some(d) = self.counts.iter().position(|&c| c == 0) {
            return fail(format!("counts[{d}] must be at least 1"));
        }
        if self.noise.len() != dn {
            return fail(format!("noise has {} entries for {dn} tasks", self.noise.len()));
        }
        if let Some(d) = self.noise.iter().position(|n| !(0.0..=0.5).contains(n)) {
            return fail(format!("noise[{d}] must lie in [0, 0.5]"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return fail("positive_rate must lie in (0, 1)".into());
        }
        if !(self.echo.is_finite() && self.channel_noise.is_finite() && self.channel_noise >= 0.0) {
            return fail("echo and channel_noise must be finite, channel_noise non-negative".into());
        }
        for (i, l) in self.links.iter().enumerate() {
            if l.source >= dn || l.target >= dn || l.source == l.target {
                return fail(format!("links[{i}] must join two distinct tasks below {dn}"));
            }
            if l.lag >= self.timesteps {
                return fail(format!(
                    "links[{i}].lag {} must be below timesteps {}",
                    l.lag, self.timesteps
                ));
            }
        }
        for d in 0..dn {
            if self.links.iter().filter(|l| l.target == d).count() > 1 {
                return fail(format!("task {d} has more than one driving link"));
            }
        }
        if self.event_order().is_none() {
            return fail("links form a cycle".into());
        }
        if !self.rules.is_empty() {
            if self.rules.len() != dn {
                return fail(format!("rules has {} entries for {dn} tasks", self.rules.len()));
            }
            for (d, r) in self.rules.iter().enumerate() {
                if r.weights.len() != self.num_features {
                    return fail(format!("rules[{d}].weights needs {} entries", self.num_features));
                }
                if let Some((a, b, _)) = r.interaction {
                    if a >= self.num_features || b >= self.num_features {
                        return fail(format!("rules[{d}].interaction indexes past num_features"));
                    }
                }
            }
        }
        self.split.validate()
    }

    /// Tasks ordered so every link source precedes its target.
    fn event_order(&self) -> Option<Vec<usize>> {
        let dn = self.num_tasks;
        let mut done = vec![false; dn];
        let mut order = Vec::with_capacity(dn);
        while order.len() < dn {
            let next = (0..dn).find(|&d| {
                !done[d]
                    && self
                        .links
                        .iter()
                        .filter(|l| l.target == d)
                        .all(|l| l.source < dn && done[l.source])
            })?;
            done[next] = true;
            order.push(next);
        }
        Some(order)
    }

    fn rng(&self) -> RngStream {
        RngStream::new(self.seed).child("synthetic")
    }

    /// Rules used by the single-step generator.
    pub fn resolved_rules(&self) -> Vec<TaskRule> {
        if !self.rules.is_empty() {
            return self.rules.clone();
        }
        let mut rng = self.rng().child("rules");
        let m = self.num_features;
        (0..self.num_tasks)
            .map(|_| {
                let weights: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
                let (a, b) = (rng.below(m), rng.below(m));
                TaskRule {
                    weights,
                    interaction: Some((a, b, rng.normal())),
                }
            })
            .collect()
    }
}

/// Generated data plus the rules that produced it.
#[derive(Clone, Debug)]
pub struct Generated {
    pub split: DatasetSplit,
    /// Bayes scores per task on every split, `[split][task][instance]`
    /// (NaN where a task is unlabelled).
    pub bayes: [Vec<Vec<f64>>; 3],
    pub links: Vec<TaskLink>,
    /// Event timestep per task on every split, `[split][task][instance]`.
    /// Empty for single-step data.
    pub events: [Vec<Vec<Option<usize>>>; 3],
}

/// Marks the top `rate` fraction of `scores` positive, then flips an equal
/// number of positives and negatives so the class balance stays exact.
fn threshold_labels(scores: &[f64], rate: f64, noise: f64, rng: &mut RngStream) -> Vec<f64> {
    let n = scores.len();
    let pos = ((rate * n as f64).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![0.0; n];
    for &i in &order[..pos] {
        labels[i] = 1.0;
    }
    flip_balanced(&mut labels, noise, rng);
    labels
}

fn flip_balanced(labels: &mut [f64], noise: f64, rng: &mut RngStream) {
    let n = labels.len();
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1.0).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0.0).collect();
    let each = ((noise * n as f64 / 2.0).round() as usize)
        .min(pos.len())
        .min(neg.len());
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    for &i in &pos[..each] {
        labels[i] = 0.0;
    }
    for &i in &neg[..each] {
        labels[i] = 1.0;
    }
}

/// Single-step tasks over disjoint instance pools. Each instance carries a
/// label for exactly one task.
pub fn generate_imbalanced_tasks(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    if spec.timesteps != 1 {
        return Err(Error::Spec(format!(
            "the imbalanced generator is single-step; timesteps is {}",
            spec.timesteps
        )));
    }
    let (dn, m) = (spec.num_tasks, spec.num_features);
    let rules = spec.resolved_rules();
    let root = spec.rng();
    let mut pools = Vec::with_capacity(dn);
    for d in 0..dn {
        let mut rng = root.child(&format!("task{d}"));
        let n = spec.counts[d];
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.normal()).collect()).collect();
        let scores: Vec<f64> = xs.iter().map(|x| rules[d].score(x)).collect();
        let labels = threshold_labels(&scores, spec.positive_rate, spec.noise[d], &mut rng);
        pools.push((xs, scores, labels));
    }
    let mut split_rng = root.child("split");
    let mut parts: [Vec<(usize, usize)>; 3] = Default::default();
    for (d, pool) in pools.iter().enumerate() {
        let mut idx: Vec<usize> = (0..pool.0.len()).collect();
        split_rng.shuffle(&mut idx);
        let [a, b, _] = spec.split.sizes(idx.len());
        parts[0].extend(idx[..a].iter().map(|&i| (d, i)));
        parts[1].extend(idx[a..a + b].iter().map(|&i| (d, i)));
        parts[2].extend(idx[a + b..].iter().map(|&i| (d, i)));
    }
    let build = |members: &[(usize, usize)]| -> Result<(EpisodeBatch, Vec<Vec<f64>>)> {
        let mut ids = Vec::with_capacity(members.len());
        let mut inputs = Vec::with_capacity(members.len() * m);
        let mut labels = vec![0.0; members.len() * dn];
        let mut mask = vec![false; members.len() * dn];
        let mut bayes = vec![vec![f64::NAN; members.len()]; dn];
        for (b, &(d, i)) in members.iter().enumerate() {
            ids.push(format!("t{d}-{i:05}"));
            inputs.extend_from_slice(&pools[d].0[i]);
            labels[b * dn + d] = pools[d].2[i];
            mask[b * dn + d] = true;
            bayes[d][b] = pools[d].1[i];
        }
        let batch = EpisodeBatch::new(ids, m, dn, 1, inputs, vec![1; members.len()], labels, mask)?;
        Ok((batch, bayes))
    };
    let (train, b0) = build(&parts[0])?;
    let (valid, b1) = build(&parts[1])?;
    let (test, b2) = build(&parts[2])?;
    Ok(Generated {
        split: DatasetSplit {
            train,
            valid,
            test,
            fractions: spec.split,
            seed: spec.seed,
        },
        bayes: [b0, b1, b2],
        links: Vec::new(),
        events: Default::default(),
    })
}

/// Event timestep of every task for one instance, `None` for no event.
fn event_times(spec: &SyntheticSpec, order: &[usize], rng: &mut RngStream) -> Vec<Option<usize>> {
    let t_max = spec.timesteps;
    let mut times = vec![None; spec.num_tasks];
    for &d in order {
        times[d] = match spec.links.iter().find(|l| l.target == d) {
            Some(l) => times[l.source].map(|s| s + l.lag).filter(|&t| t < t_max),
            None => {
                // An event at a uniform time with probability chosen so that
                // late events make up `positive_rate` of instances.
                let late = t_max - t_max / 2;
                let p = (spec.positive_rate * t_max as f64 / late as f64).min(1.0);
                rng.bernoulli(p).then(|| rng.below(t_max))
            }
        };
    }
    times
}

/// Whether an event at `t` makes the sequence positive: onset in the second
/// half of the window.
pub fn is_late(t: Option<usize>, timesteps: usize) -> bool {
    t.is_some_and(|t| t >= timesteps / 2)
}

/// Sequence-level tasks where linked tasks follow their source's event.
///
/// Channel `d` (feature `d`) carries a spike of height 1 at task `d`'s event
/// when `d` is a root, or a weak echo of height `echo` when `d` is driven by
/// a link. A task is positive when its event falls in the second half of the
/// window. The remaining features are noise.
pub fn generate_temporal_tasks(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    let (dn, m, t_max) = (spec.num_tasks, spec.num_features, spec.timesteps);
    if m < dn {
        return Err(Error::Spec(format!("num_features {m} must be at least num_tasks {dn}")));
    }
    let order = spec.event_order().expect("validated");
    let n = *spec.counts.iter().max().expect("validated");
    let root = spec.rng();
    let mut rng = root.child("events");
    let mut inputs = Vec::with_capacity(n * t_max * m);
    let mut labels = vec![0.0; n * dn];
    let mut bayes_all = vec![vec![0.0; n]; dn];
    let mut events_all = vec![vec![None; n]; dn];
    for b in 0..n {
        let times = event_times(spec, &order, &mut rng);
        let start = inputs.len();
        inputs.extend((0..t_max * m).map(|_| spec.channel_noise * rng.normal()));
        for d in 0..dn {
            if let Some(t) = times[d] {
                let height = if spec.links.iter().any(|l| l.target == d) {
                    spec.echo
                } else {
                    1.0
                };
                inputs[start + t * m + d] += height;
            }
            events_all[d][b] = times[d];
            let late = is_late(times[d], t_max);
            labels[b * dn + d] = f64::from(u8::from(late));
            bayes_all[d][b] = f64::from(u8::from(late));
        }
    }
    let mut mask = vec![false; n * dn];
    let mut mask_rng = root.child("mask");
    for d in 0..dn {
        let mut idx: Vec<usize> = (0..n).collect();
        mask_rng.shuffle(&mut idx);
        for &b in &idx[..spec.counts[d]] {
            mask[b * dn + d] = true;
        }
    }
    let mut noise_rng = root.child("noise");
    for d in 0..dn {
        let labelled: Vec<usize> = (0..n).filter(|&b| mask[b * dn + d]).collect();
        let mut col: Vec<f64> = labelled.iter().map(|&b| labels[b * dn + d]).collect();
        flip_balanced(&mut col, spec.noise[d], &mut noise_rng);
        for (&b, y) in labelled.iter().zip(col) {
            labels[b * dn + d] = y;
        }
        for b in 0..n {
            if !mask[b * dn + d] {
                labels[b * dn + d] = 0.0;
                bayes_all[d][b] = f64::NAN;
            }
        }
    }
    let ids = (0..n).map(|b| format!("s{b:06}")).collect();
    let all = EpisodeBatch::new(ids, m, dn, t_max, inputs, vec![t_max; n], labels, mask)?;
    let mut idx: Vec<usize> = (0..n).collect();
    root.child("split").shuffle(&mut idx);
    let [a, bsz, _] = spec.split.sizes(n);
    let parts = [&idx[..a], &idx[a..a + bsz], &idx[a + bsz..]];
    let pick =
        |p: &[usize]| -> Vec<Vec<f64>> { (0..dn).map(|d| p.iter().map(|&b| bayes_all[d][b]).collect()).collect() };
    Ok(Generated {
        split: DatasetSplit {
            train: all.select(parts[0]),
            valid: all.select(parts[1]),
            test: all.select(parts[2]),
            fractions: spec.split,
            seed: spec.seed,
        },
        bayes: [pick(parts[0]), pick(parts[1]), pick(parts[2])],
        links: spec.links.clone(),
        events: parts.map(|p| (0..dn).map(|d| p.iter().map(|&b| events_all[d][b]).collect()).collect()),
    })
}

/// Scores of the generating rule for task `d` on a temporal batch: whether
/// the driving channel shows its spike in a position that makes `d` late.
pub fn temporal_bayes_scores(spec: &SyntheticSpec, batch: &EpisodeBatch, d: usize) -> Vec<f64> {
    let t_max = batch.steps;
    // Follow links back to the root task whose channel carries the spike.
    let mut channel = d;
    let mut offset = 0;
    while let Some(l) = spec.links.iter().find(|l| l.target == channel) {
        offset += l.lag;
        channel = l.source;
    }
    (0..batch.len())
        .map(|b| {
            let (mut best, mut at) = (f64::NEG_INFINITY, 0);
            for t in 0..t_max {
                let v = batch.feature(b, t, channel);
                if v > best {
                    best = v;
                    at = t;
                }
            }
            let present = best > 0.5;
            let t = at + offset;
            f64::from(u8::from(present && t < t_max && t >= t_max / 2))
        })
        .collect()
}
