//! Supervised training phases: first task, slow (projected) and fast.
//!
//! Every phase returns a new network and leaves its input untouched. Only the
//! current task's head is traced, so heads of earlier tasks never move.

use serde::{Deserialize, Serialize};

use crate::data::{argmax, Dataset, Task};
use crate::error::{Error, Result};
use crate::network::{BnMode, LayerSpec, Network, ParamId, TaskId};
use crate::optim::{OptimizerConfig, OptimizerKind, Optimizer};
use crate::projector::{augment, ProjectionBasis};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Shuffling seed. The harness replaces it with one derived per task.
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self::slow_default()
    }
}

impl PhaseConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        PhaseConfig {
            epochs,
            batch_size: 64,
            optimizer: OptimizerConfig::new(OptimizerKind::Adam, lr),
            seed: 0,
        }
    }

    pub fn slow_default() -> Self {
        Self::new(10, 1e-3)
    }

    pub fn fast_default() -> Self {
        Self::new(5, 1e-3)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("a training phase needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    FirstTask,
    Slow,
    Fast,
    Plain,
}

/// Batch-norm treatment during a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnPolicy {
    /// Batch statistics, running statistics updated, affine parameters trained.
    Adapt,
    /// Running statistics used and kept, affine parameters fixed.
    Frozen,
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub task: TaskId,
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub net: Network,
    pub log: Vec<EpochRecord>,
    /// Largest relative residual of an applied trunk step outside the basis span.
    pub max_span_residual: f64,
    pub steps: u64,
}

/// Plain supervised training of `W_1` on the first task; adds its head.
pub fn train_first_task(net: &Network, task: &Task, cfg: &PhaseConfig) -> Result<PhaseOutcome> {
    if !net.tasks().is_empty() {
        return Err(Error::contract("first-task training expects a network without heads"));
    }
    let mut net = net.clone();
    net.add_head(task.id, task.num_classes())?;
    run_phase(net, task.id, &task.train, cfg, Phase::FirstTask, BnPolicy::Adapt, None)
}

/// Slow phase: every trunk step is projected onto `basis` before it is applied.
/// Adds the head for `task` when missing.
pub fn train_slow(prev: &Network, task: &Task, basis: &ProjectionBasis, cfg: &PhaseConfig) -> Result<PhaseOutcome> {
    basis.check_network(prev)?;
    let mut net = prev.clone();
    if !net.has_task(task.id) {
        net.add_head(task.id, task.num_classes())?;
    }
    run_phase(net, task.id, &task.train, cfg, Phase::Slow, BnPolicy::Frozen, Some(basis))
}

/// Fast phase: unconstrained finetuning of trunk and head starting from the slow model.
pub fn train_fast(slow: &Network, task: &Task, cfg: &PhaseConfig) -> Result<PhaseOutcome> {
    if !slow.has_task(task.id) {
        return Err(Error::Lookup(format!("fast phase needs the slow head for task {}", task.id)));
    }
    run_phase(slow.clone(), task.id, &task.train, cfg, Phase::Fast, BnPolicy::Adapt, None)
}

/// The slow-phase loop without projection, for comparisons.
pub fn train_plain(net: &Network, task: TaskId, data: &Dataset, cfg: &PhaseConfig, bn: BnPolicy) -> Result<PhaseOutcome> {
    run_phase(net.clone(), task, data, cfg, Phase::Plain, bn, None)
}

fn run_phase(
    mut net: Network,
    task: TaskId,
    data: &Dataset,
    cfg: &PhaseConfig,
    phase: Phase,
    bn: BnPolicy,
    basis: Option<&ProjectionBasis>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("task {task} has an empty training split")));
    }
    if data.features() != net.input_len() {
        return Err(Error::shape("training data", data.inputs.shape(), net.input_shape()));
    }
    let classes = net.head(task)?.classes();
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} outside the {classes} classes of task {task}")));
    }
    let mode = match bn {
        BnPolicy::Adapt => BnMode::Train,
        BnPolicy::Frozen => BnMode::Eval,
    };
    let trainable: Vec<(usize, usize)> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| match l.spec {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => true,
            LayerSpec::BatchNorm { .. } => bn == BnPolicy::Adapt,
            _ => false,
        })
        .flat_map(|(i, l)| (0..l.params.len()).map(move |s| (i, s)))
        .collect();

    let mut opt = Optimizer::<ParamId>::new(cfg.optimizer)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut max_residual = 0.0f64;
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, "shuffle", epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in data.batches(cfg.batch_size, Some(&mut order_rng)) {
            let (x, y) = data.select(&idx);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let trace = net.trace(&mut tape, xv, task, mode)?;
            let loss = tape.cross_entropy(trace.logits, &y)?;
            tape.backward(loss)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numeric(format!("{phase:?} loss became {lv} in epoch {epoch}")));
            }
            loss_sum += lv * y.len() as f64;
            let logits = tape.value(trace.logits);
            let k = logits.cols();
            correct += y
                .iter()
                .enumerate()
                .filter(|(r, &c)| argmax(&logits.data()[r * k..(r + 1) * k]) == c)
                .count();
            net.update_bn_stats(&tape, &trace)?;

            opt.begin_step();
            let mut deltas: Vec<(ParamId, Vec<f64>)> = Vec::with_capacity(trainable.len() + 2);
            for &(layer, slot) in &trainable {
                let id = ParamId::Trunk { layer, slot };
                let g = grad_or_zero(&tape, trace.layers[layer].params[slot], net.param(id))?;
                deltas.push((id, opt.delta(&id, &g)));
            }
            for (slot, &v) in trace.head.iter().enumerate() {
                let id = ParamId::Head { task, slot };
                let g = grad_or_zero(&tape, v, net.param(id))?;
                deltas.push((id, opt.delta(&id, &g)));
            }
            if let Some(basis) = basis {
                project_deltas(&net, basis, &mut deltas)?;
            }
            let before = basis.map(|_| net.clone());
            for (id, d) in &deltas {
                let p = net.param_mut(*id).expect("trainable ids exist");
                for (w, dw) in p.data_mut().iter_mut().zip(d) {
                    *w += dw;
                }
            }
            if let (Some(basis), Some(before)) = (basis, before) {
                max_residual = max_residual.max(applied_residual(&before, &net, basis)?);
            }
        }
        log.push(EpochRecord {
            phase,
            task,
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: 100.0 * correct as f64 / data.len() as f64,
        });
    }
    Ok(PhaseOutcome {
        net,
        log,
        max_span_residual: max_residual,
        steps: opt.steps(),
    })
}

fn grad_or_zero(tape: &Tape, v: crate::tape::Var, param: Option<&Tensor>) -> Result<Vec<f64>> {
    match tape.grad(v) {
        Some(g) => Ok(g.to_vec()),
        None => Ok(vec![0.0; param.map_or(0, Tensor::numel)]),
    }
}

/// Replaces weight and bias deltas of each projected layer by `[ΔW | Δb] U Uᵀ`.
fn project_deltas(net: &Network, basis: &ProjectionBasis, deltas: &mut [(ParamId, Vec<f64>)]) -> Result<()> {
    for lb in &basis.layers {
        let w = &net.layers()[lb.layer].params[0];
        let (rows, cols) = (w.rows(), w.cols());
        let pos = |slot| {
            deltas
                .iter()
                .position(|(id, _)| *id == ParamId::Trunk { layer: lb.layer, slot })
                .expect("projected layers are trainable")
        };
        let (wi, bi) = (pos(0), pos(1));
        let mut block = Vec::with_capacity(rows * (cols + 1));
        for r in 0..rows {
            block.extend_from_slice(&deltas[wi].1[r * cols..(r + 1) * cols]);
            block.push(deltas[bi].1[r]);
        }
        lb.project_rows(&mut block)?;
        for r in 0..rows {
            deltas[wi].1[r * cols..(r + 1) * cols].copy_from_slice(&block[r * (cols + 1)..r * (cols + 1) + cols]);
            deltas[bi].1[r] = block[r * (cols + 1) + cols];
        }
    }
    Ok(())
}

/// Span residual of the change actually written into the parameters.
fn applied_residual(before: &Network, after: &Network, basis: &ProjectionBasis) -> Result<f64> {
    let mut worst = 0.0f64;
    for lb in &basis.layers {
        let (a, b) = (&after.layers()[lb.layer], &before.layers()[lb.layer]);
        let dw = a.params[0].sub(&b.params[0])?;
        let db = a.params[1].sub(&b.params[1])?;
        worst = worst.max(lb.span_residual(&augment(&dw, &db)?)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_stream;

    fn setup() -> (Network, crate::data::TaskStream) {
        let stream = make_synthetic_stream(2, 2, 8, 40, 3).unwrap();
        let net = Network::new(&[8], &LayerSpec::mlp_trunk(8, &[12]), 5).unwrap();
        (net, stream)
    }

    fn cfg(epochs: usize) -> PhaseConfig {
        PhaseConfig {
            batch_size: 16,
            ..PhaseConfig::new(epochs, 1e-2)
        }
        .with_seed(7)
    }

    #[test]
    fn zero_epochs_rejected() {
        let (net, s) = setup();
        let r = train_first_task(&net, &s.tasks[0], &cfg(0));
        assert!(matches!(r, Err(Error::Contract(_))));
        let first = train_first_task(&net, &s.tasks[0], &cfg(1)).unwrap().net;
        assert!(train_fast(&first, &s.tasks[0], &cfg(0)).is_err());
    }

    #[test]
    fn first_task_is_deterministic() {
        let (net, s) = setup();
        let a = train_first_task(&net, &s.tasks[0], &cfg(2)).unwrap();
        let b = train_first_task(&net, &s.tasks[0], &cfg(2)).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.log.len(), 2);
        assert!(a.log[0].to_json_line().contains("\"phase\":\"first-task\""));
    }

    #[test]
    fn identity_basis_matches_plain_and_empty_freezes_trunk() {
        let (net, s) = setup();
        let w1 = train_first_task(&net, &s.tasks[0], &cfg(2)).unwrap().net;
        let t2 = &s.tasks[1];
        let slow = train_slow(&w1, t2, &ProjectionBasis::identity(&w1), &cfg(2)).unwrap().net;
        let mut with_head = w1.clone();
        with_head.add_head(t2.id, t2.num_classes()).unwrap();
        let plain = train_plain(&with_head, t2.id, &t2.train, &cfg(2), BnPolicy::Frozen).unwrap().net;
        assert_eq!(slow, plain);

        let frozen = train_slow(&w1, t2, &ProjectionBasis::empty(&w1), &cfg(2)).unwrap().net;
        assert_eq!(frozen.layers(), w1.layers());
        assert_ne!(frozen.head(t2.id).unwrap(), with_head.head(t2.id).unwrap());
        assert_eq!(frozen.head(0).unwrap(), w1.head(0).unwrap());
    }

    #[test]
    fn fast_leaves_slow_untouched() {
        let (net, s) = setup();
        let w1 = train_first_task(&net, &s.tasks[0], &cfg(1)).unwrap().net;
        let slow = train_slow(&w1, &s.tasks[1], &ProjectionBasis::identity(&w1), &cfg(1)).unwrap().net;
        let snapshot = slow.clone();
        let fast = train_fast(&slow, &s.tasks[1], &cfg(1)).unwrap().net;
        assert_eq!(slow, snapshot);
        assert_ne!(fast, slow);
    }
}
