//! Data-free recall: inputs optimized so a frozen model predicts a queried
//! class while the per-channel batch means entering every batch-norm layer
//! match that layer's running mean.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Reader, Section, Writer};
use crate::error::{Error, Result};
use crate::network::{BnMode, LayerSpec, Network, TaskId, Trace};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::tape::{one_hot, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreamConfig {
    /// Dream samples per queried class.
    pub batch_per_class: usize,
    pub steps: usize,
    pub lr: f64,
    /// Weight of the batch-norm mean-matching term.
    pub bn_weight: f64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            batch_per_class: 8,
            steps: 500,
            lr: 0.05,
            bn_weight: 1.0,
        }
    }
}

/// What to dream for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub task: TaskId,
    /// Target distribution per dream sample, `[batch, classes]`.
    pub targets: Tensor,
    pub steps: usize,
    pub lr: f64,
    pub bn_weight: f64,
    pub seed: u64,
    /// Inputs are clamped to `[lo, hi]` after every step.
    pub range: (f64, f64),
}

impl QuerySpec {
    /// One-hot queries for the given task-local labels.
    pub fn classes(task: TaskId, labels: &[usize], num_classes: usize, cfg: &DreamConfig, seed: u64, range: (f64, f64)) -> Result<Self> {
        Ok(QuerySpec {
            task,
            targets: one_hot(labels, num_classes)?,
            steps: cfg.steps,
            lr: cfg.lr,
            bn_weight: cfg.bn_weight,
            seed,
            range,
        })
    }

    pub fn batch(&self) -> usize {
        self.targets.rows()
    }

    /// Class each row of the query puts the most mass on.
    pub fn labels(&self) -> Vec<usize> {
        let k = self.targets.cols();
        self.targets.data().chunks(k).map(crate::data::argmax).collect()
    }
}

/// Synthesized inputs with the teacher logits recorded when they were made.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamSet {
    pub task: TaskId,
    /// `[batch, input_shape...]`
    pub inputs: Tensor,
    /// `[batch, classes]`, eval-mode logits of the source model.
    pub teacher_logits: Tensor,
    pub query_labels: Vec<usize>,
    pub source_hash: String,
    pub objective_start: f64,
    pub objective_end: f64,
}

impl DreamSet {
    pub fn len(&self) -> usize {
        self.query_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_labels.is_empty()
    }

    /// True when `model` is the source and still reproduces the teacher logits bitwise.
    pub fn verify(&self, model: &Network) -> Result<bool> {
        Ok(model.content_hash() == self.source_hash && model.predict(&self.inputs, self.task)? == self.teacher_logits)
    }

    /// Share of samples whose teacher argmax equals the query class.
    pub fn fidelity(&self) -> f64 {
        let k = self.teacher_logits.cols();
        let hits = self
            .teacher_logits
            .data()
            .chunks(k)
            .zip(&self.query_labels)
            .filter(|(row, &q)| crate::data::argmax(row) == q)
            .count();
        hits as f64 / self.len().max(1) as f64
    }
}

/// Value of the dreaming objective and its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DreamObjective {
    pub total: f64,
    pub query: f64,
    pub bn: f64,
}

fn record_objective(
    model: &Network,
    tape: &mut Tape,
    x: Var,
    task: TaskId,
    targets: &Tensor,
    bn_weight: f64,
) -> Result<(Var, Var, Var, Trace)> {
    let trace = model.trace(tape, x, task, BnMode::Eval)?;
    let query = tape.soft_cross_entropy(trace.logits, targets)?;
    let mut penalty: Option<Var> = None;
    for (layer, lt) in model.layers().iter().zip(&trace.layers) {
        if !matches!(layer.spec, LayerSpec::BatchNorm { .. }) {
            continue;
        }
        let mean = tape.row_mean(lt.input)?;
        let gap = tape.sub(mean, lt.buffers[0])?;
        let sq = tape.mul(gap, gap)?;
        let s = tape.sum(sq);
        penalty = Some(match penalty {
            Some(p) => tape.add(p, s)?,
            None => s,
        });
    }
    let bn = penalty.ok_or_else(|| Error::contract("dreaming needs batch-norm running statistics"))?;
    let weighted = tape.scale(bn, bn_weight);
    let total = tape.add(query, weighted)?;
    Ok((total, query, bn, trace))
}

/// Evaluates the dreaming objective at `x` without changing anything.
pub fn dream_objective(model: &Network, x: &Tensor, task: TaskId, targets: &Tensor, bn_weight: f64) -> Result<DreamObjective> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (total, query, bn, _) = record_objective(model, &mut tape, xv, task, targets, bn_weight)?;
    Ok(DreamObjective {
        total: tape.value(total).item(),
        query: tape.value(query).item(),
        bn: tape.value(bn).item(),
    })
}

/// Seeded standard-normal inputs clamped to `range`, `[batch, input_shape...]`.
pub fn initial_noise(model: &Network, batch: usize, seed: u64, range: (f64, f64)) -> Tensor {
    let mut r = rng::stream(seed, "dream-noise", 0);
    let mut shape = vec![batch];
    shape.extend_from_slice(model.input_shape());
    Tensor::from_fn(&shape, |_| {
        let v: f64 = StandardNormal.sample(&mut r);
        v.clamp(range.0, range.1)
    })
}

/// Adam on the inputs for `q.steps` steps; returns the best iterate seen.
pub fn dream(model: &Network, q: &QuerySpec) -> Result<DreamSet> {
    if !model.has_batch_norm() {
        return Err(Error::contract("dreaming needs batch-norm running statistics"));
    }
    let classes = model.head(q.task)?.classes();
    if q.targets.cols() != classes || q.batch() == 0 {
        return Err(Error::shape("dream query", q.targets.shape(), &[q.batch().max(1), classes]));
    }
    let (lo, hi) = q.range;
    if !(lo < hi) {
        return Err(Error::contract(format!("empty clamp range [{lo}, {hi}]")));
    }
    let mut x = initial_noise(model, q.batch(), q.seed, q.range);
    let mut opt = Optimizer::<u8>::new(OptimizerConfig::adam(q.lr))?;
    let mut best: Option<(f64, Tensor)> = None;
    let mut start = f64::NAN;
    for step in 0..=q.steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (total, _, _, _) = record_objective(model, &mut tape, xv, q.task, &q.targets, q.bn_weight)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::numeric(format!("dream objective became {value} at step {step}")));
        }
        if step == 0 {
            start = value;
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, x.clone()));
        }
        if step == q.steps {
            break;
        }
        tape.backward(total)?;
        let g = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        opt.begin_step();
        let d = opt.delta(&0, &g);
        for (v, dv) in x.data_mut().iter_mut().zip(d) {
            *v = (*v + dv).clamp(lo, hi);
        }
    }
    let (end, inputs) = best.expect("at least one evaluation");
    let teacher_logits = model.predict(&inputs, q.task)?;
    Ok(DreamSet {
        task: q.task,
        inputs,
        teacher_logits,
        query_labels: q.labels(),
        source_hash: model.content_hash(),
        objective_start: start,
        objective_end: end,
    })
}

/// Balanced one-hot dreams for each `(task, classes)` pair, seeded per task.
pub fn dream_roster(
    model: &Network,
    tasks: &[(TaskId, usize)],
    cfg: &DreamConfig,
    seed: u64,
    range: (f64, f64),
) -> Result<BTreeMap<TaskId, DreamSet>> {
    let mut out = BTreeMap::new();
    for &(task, classes) in tasks {
        let labels: Vec<usize> = (0..classes)
            .flat_map(|c| std::iter::repeat_n(c, cfg.batch_per_class))
            .collect();
        let q = QuerySpec::classes(task, &labels, classes, cfg, rng::derive_seed(seed, "dream", task as u64), range)?;
        out.insert(task, dream(model, &q)?);
    }
    Ok(out)
}

impl Section for DreamSet {
    const TAG: [u8; 4] = *b"DREM";

    fn encode(&self, w: &mut Writer) {
        w.usize(self.task);
        w.usizes(&self.query_labels);
        w.tensor(&self.inputs);
        w.tensor(&self.teacher_logits);
        w.str(&self.source_hash);
        w.f64(self.objective_start);
        w.f64(self.objective_end);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(DreamSet {
            task: r.usize()?,
            query_labels: r.usizes()?,
            inputs: r.tensor()?,
            teacher_logits: r.tensor()?,
            source_hash: r.str()?,
            objective_start: r.f64()?,
            objective_end: r.f64()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Network {
        let mut net = Network::new(&[4], &LayerSpec::mlp_trunk(4, &[6]), 2).unwrap();
        net.add_head(0, 2).unwrap();
        net
    }

    fn cfg(steps: usize) -> DreamConfig {
        DreamConfig {
            batch_per_class: 3,
            steps,
            lr: 0.05,
            bn_weight: 1.0,
        }
    }

    #[test]
    fn zero_steps_returns_noise() {
        let net = model();
        let set = &dream_roster(&net, &[(0, 2)], &cfg(0), 9, (-3.0, 3.0)).unwrap()[&0];
        let seed = rng::derive_seed(9, "dream", 0);
        assert_eq!(set.inputs, initial_noise(&net, 6, seed, (-3.0, 3.0)));
        assert_eq!(set.teacher_logits, net.predict(&set.inputs, 0).unwrap());
        assert!(set.verify(&net).unwrap());
    }

    #[test]
    fn descends_and_leaves_model_alone() {
        let net = model();
        let before = net.clone();
        let set = &dream_roster(&net, &[(0, 2)], &cfg(30), 1, (-3.0, 3.0)).unwrap()[&0];
        assert_eq!(net, before);
        assert!(set.objective_end <= set.objective_start);
        assert!(set.inputs.data().iter().all(|v| (-3.0..=3.0).contains(v)));
        assert_eq!(set.query_labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn needs_batch_norm() {
        let mut net = Network::new(&[4], &[LayerSpec::Linear { inputs: 4, outputs: 2 }], 2).unwrap();
        net.add_head(0, 2).unwrap();
        assert!(matches!(dream_roster(&net, &[(0, 2)], &cfg(1), 1, (-1.0, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn section_round_trip() {
        let net = model();
        let set = dream_roster(&net, &[(0, 2)], &cfg(2), 1, (-3.0, 3.0)).unwrap().remove(&0).unwrap();
        let mut w = Writer::new();
        set.encode(&mut w);
        let bytes = w.into_bytes();
        assert_eq!(DreamSet::decode(&mut Reader::new(&bytes)).unwrap(), set);
    }
}
