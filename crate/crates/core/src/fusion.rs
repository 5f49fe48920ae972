//! Merging a slow and a fast model.
//!
//! Linear fusion mixes every parameter with one coefficient. Meta fusion learns
//! diagonal weights `A = sigmoid(a)` (per layer, output channel or scalar) and
//! builds `W = W_prev + A (W_slow − W_prev) + (1 − A)(W_fast − W_prev)`, fitted
//! by minimizing the KL divergence between the fused model and dream teachers.
//! The new task's head is a fusion group of its own; older heads are frozen in
//! both parents and are copied from the slow model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Meta;
use crate::data::Dataset;
use crate::dreaming::DreamSet;
use crate::error::{Error, Result};
use crate::metrics::{provenance_line, task_loss};
use crate::network::{BnMode, LayerSpec, Network, TaskId};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerLayer,
    #[default]
    PerChannel,
    PerParameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FuseTarget {
    Layer(usize),
    Head(TaskId),
}

/// Unconstrained fusion parameters of one layer or head.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGroup {
    pub target: FuseTarget,
    pub pre: Vec<f64>,
    /// Elements per row of each parameter slot; weights of affine layers map
    /// to their output channel through it.
    row_len: Vec<usize>,
    offsets: Vec<usize>,
}

impl WeightGroup {
    /// Index into `pre` for element `e` of parameter `slot`.
    fn entry(&self, granularity: Granularity, slot: usize, e: usize) -> usize {
        match granularity {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => e / self.row_len[slot],
            Granularity::PerParameter => self.offsets[slot] + e,
        }
    }

    pub fn squashed(&self) -> Vec<f64> {
        self.pre.iter().map(|&p| sigmoid(p)).collect()
    }

    fn mean_squashed(&self) -> f64 {
        self.pre.iter().map(|&p| sigmoid(p)).sum::<f64>() / self.pre.len() as f64
    }
}

/// Diagonal fusion weights `A` stored before the logistic squash.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub granularity: Granularity,
    pub groups: Vec<WeightGroup>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(a: f64) -> f64 {
    (a / (1.0 - a)).ln()
}

impl FusionWeights {
    /// Every entry set to the pre-squash value `pre`, covering all parametrized
    /// trunk layers of `net` and, if given, the head of `new_task`.
    pub fn constant_pre(net: &Network, new_task: Option<TaskId>, granularity: Granularity, pre: f64) -> Result<Self> {
        let mut groups = Vec::new();
        for (i, layer) in net.layers().iter().enumerate() {
            if layer.params.is_empty() {
                continue;
            }
            let row_len = match layer.spec {
                LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => vec![layer.params[0].cols(), 1],
                _ => vec![1; layer.params.len()],
            };
            groups.push(group(FuseTarget::Layer(i), &layer.params.iter().collect::<Vec<_>>(), row_len, granularity, pre));
        }
        if let Some(task) = new_task {
            let h = net.head(task)?;
            groups.push(group(FuseTarget::Head(task), &[&h.weight, &h.bias], vec![h.weight.cols(), 1], granularity, pre));
        }
        Ok(FusionWeights { granularity, groups })
    }

    /// Squashed value `a` everywhere; `a` must lie strictly inside `(0, 1)`.
    pub fn constant(net: &Network, new_task: Option<TaskId>, granularity: Granularity, a: f64) -> Result<Self> {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::contract(format!("fusion weight {a} outside (0, 1)")));
        }
        Self::constant_pre(net, new_task, granularity, logit(a))
    }

    pub fn group(&self, target: FuseTarget) -> Option<&WeightGroup> {
        self.groups.iter().find(|g| g.target == target)
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.pre.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `target,index,a` rows of the squashed weights.
    pub fn to_csv(&self, meta: &Meta) -> String {
        let mut s = provenance_line(meta);
        s.push_str("target,index,a\n");
        for g in &self.groups {
            let name = match g.target {
                FuseTarget::Layer(i) => format!("layer{i}"),
                FuseTarget::Head(t) => format!("head{t}"),
            };
            for (i, a) in g.squashed().iter().enumerate() {
                let _ = writeln!(s, "{name},{i},{a}");
            }
        }
        s
    }
}

fn group(target: FuseTarget, params: &[&Tensor], row_len: Vec<usize>, granularity: Granularity, pre: f64) -> WeightGroup {
    let mut offsets = Vec::with_capacity(params.len());
    let mut total = 0;
    for p in params {
        offsets.push(total);
        total += p.numel();
    }
    let n = match granularity {
        Granularity::PerLayer => 1,
        Granularity::PerChannel => params[0].numel() / row_len[0],
        Granularity::PerParameter => total,
    };
    WeightGroup {
        target,
        pre: vec![pre; n],
        row_len,
        offsets,
    }
}

fn check_parents(prev: Option<&Network>, slow: &Network, fast: &Network) -> Result<()> {
    if !slow.same_architecture(fast) {
        return Err(Error::contract("slow and fast models differ in architecture"));
    }
    if let Some(p) = prev {
        if p.input_shape() != slow.input_shape() || p.specs() != slow.specs() {
            return Err(Error::contract("previous model trunk differs from the slow model"));
        }
    }
    Ok(())
}

fn mix(prev: Option<f64>, s: f64, f: f64, a: f64) -> f64 {
    match prev {
        Some(p) => p + a * (s - p) + (1.0 - a) * (f - p),
        None => a * s + (1.0 - a) * f,
    }
}

/// `W_prev + A ΔW_slow + (I − A) ΔW_fast`. Without `prev` this is `A W_slow + (I − A) W_fast`.
pub fn fuse_weighted(prev: Option<&Network>, slow: &Network, fast: &Network, weights: &FusionWeights) -> Result<Network> {
    check_parents(prev, slow, fast)?;
    let gran = weights.granularity;
    let mut out = slow.clone();
    for g in &weights.groups {
        match g.target {
            FuseTarget::Layer(l) => {
                let (sl, fl) = (&slow.layers()[l], &fast.layers()[l]);
                let pl = prev.map(|p| &p.layers()[l]);
                let ol = &mut out.layers_mut()[l];
                for slot in 0..sl.params.len() {
                    let (s, f) = (sl.params[slot].data(), fl.params[slot].data());
                    let p = pl.map(|p| p.params[slot].data());
                    for (e, o) in ol.params[slot].data_mut().iter_mut().enumerate() {
                        let a = sigmoid(g.pre[g.entry(gran, slot, e)]);
                        *o = mix(p.map(|p| p[e]), s[e], f[e], a);
                    }
                }
                let abar = g.mean_squashed();
                for b in 0..sl.buffers.len() {
                    let (s, f) = (sl.buffers[b].data(), fl.buffers[b].data());
                    let p = pl.map(|p| p.buffers[b].data());
                    for (e, o) in ol.buffers[b].data_mut().iter_mut().enumerate() {
                        *o = mix(p.map(|p| p[e]), s[e], f[e], abar);
                    }
                }
            }
            FuseTarget::Head(task) => {
                let (sh, fh) = (slow.head(task)?, fast.head(task)?);
                let ph = prev.and_then(|p| p.head(task).ok());
                let oh = out.head_mut(task)?;
                for (slot, (s, f)) in [(&sh.weight, &fh.weight), (&sh.bias, &fh.bias)].into_iter().enumerate() {
                    let p = ph.map(|h| h.params()[slot].data());
                    let o = if slot == 0 { &mut oh.weight } else { &mut oh.bias };
                    for (e, v) in o.data_mut().iter_mut().enumerate() {
                        let a = sigmoid(g.pre[g.entry(gran, slot, e)]);
                        *v = mix(p.map(|p| p[e]), s.data()[e], f.data()[e], a);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `α W_slow + (1 − α) W_fast` over every trunk parameter, batch-norm statistic
/// and head that differs between the two; `α ∈ {0, 1}` returns a parent unchanged.
pub fn fuse_linear(slow: &Network, fast: &Network, alpha: f64) -> Result<Network> {
    check_parents(None, slow, fast)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("fusion coefficient {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(slow.clone());
    }
    if alpha == 0.0 {
        return Ok(fast.clone());
    }
    let lerp = |s: &Tensor, f: &Tensor| s.zip_with(f, |s, f| alpha * s + (1.0 - alpha) * f);
    let mut out = slow.clone();
    for (l, (sl, fl)) in slow.layers().iter().zip(fast.layers()).enumerate() {
        let ol = &mut out.layers_mut()[l];
        for (o, (s, f)) in ol.params.iter_mut().zip(sl.params.iter().zip(&fl.params)) {
            *o = lerp(s, f)?;
        }
        for (o, (s, f)) in ol.buffers.iter_mut().zip(sl.buffers.iter().zip(&fl.buffers)) {
            *o = lerp(s, f)?;
        }
    }
    for (&task, sh) in slow.heads() {
        let fh = fast.head(task)?;
        if sh == fh {
            continue;
        }
        let oh = out.head_mut(task)?;
        oh.weight = lerp(&sh.weight, &fh.weight)?;
        oh.bias = lerp(&sh.bias, &fh.bias)?;
    }
    Ok(out)
}

/// Summed KL divergence of `net` against each dream set's teacher logits.
pub fn dream_loss(net: &Network, dreams: &[&DreamSet]) -> Result<f64> {
    let mut total = 0.0;
    for d in dreams {
        let mut tape = Tape::new();
        let x = tape.leaf(d.inputs.clone());
        let trace = net.trace(&mut tape, x, d.task, BnMode::Eval)?;
        let kl = tape.kl_divergence(trace.logits, &d.teacher_logits)?;
        total += tape.value(kl).item();
    }
    Ok(total)
}

/// A labeled split or a dream set to score models on.
#[derive(Debug, Clone)]
pub enum EvalSet {
    /// Mean cross-entropy on real data.
    Labeled { task: TaskId, data: Dataset },
    /// KL divergence to the recorded teacher logits.
    Dreams(DreamSet),
}

impl EvalSet {
    pub fn task(&self) -> TaskId {
        match self {
            EvalSet::Labeled { task, .. } => *task,
            EvalSet::Dreams(d) => d.task,
        }
    }

    pub fn loss(&self, net: &Network) -> Result<f64> {
        match self {
            EvalSet::Labeled { task, data } => task_loss(net, *task, data),
            EvalSet::Dreams(d) => dream_loss(net, &[d]),
        }
    }
}

/// Per-set losses along `α_i = i/(n−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierCurve {
    pub alphas: Vec<f64>,
    pub tasks: Vec<TaskId>,
    /// `losses[i][j]`: set `j` at `alphas[i]`.
    pub losses: Vec<Vec<f64>>,
}

impl BarrierCurve {
    pub fn combined(&self) -> Vec<f64> {
        self.losses.iter().map(|r| r.iter().sum()).collect()
    }

    /// Grid point with the smallest combined loss (first on ties).
    pub fn best(&self) -> (f64, f64) {
        let c = self.combined();
        let i = (0..c.len()).fold(0, |b, i| if c[i] < c[b] { i } else { b });
        (self.alphas[i], c[i])
    }

    /// `alpha,loss_task<t>...,combined` rows.
    pub fn to_csv(&self, meta: &Meta) -> String {
        let mut s = provenance_line(meta);
        s.push_str("alpha");
        for t in &self.tasks {
            let _ = write!(s, ",loss_task{t}");
        }
        s.push_str(",combined\n");
        for (a, row) in self.alphas.iter().zip(&self.losses) {
            let _ = write!(s, "{a}");
            for l in row {
                let _ = write!(s, ",{l}");
            }
            let _ = writeln!(s, ",{}", row.iter().sum::<f64>());
        }
        s
    }
}

pub fn alpha_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::contract("a fusion sweep needs at least two grid points"));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

pub fn barrier_sweep(slow: &Network, fast: &Network, eval_sets: &[EvalSet], n: usize) -> Result<BarrierCurve> {
    let alphas = alpha_grid(n)?;
    let mut losses = Vec::with_capacity(n);
    for &a in &alphas {
        let net = fuse_linear(slow, fast, a)?;
        losses.push(eval_sets.iter().map(|e| e.loss(&net)).collect::<Result<Vec<_>>>()?);
    }
    Ok(BarrierCurve {
        alphas,
        tasks: eval_sets.iter().map(EvalSet::task).collect(),
        losses,
    })
}

/// Which old tasks contribute dream terms to the fusion loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OldTaskScope {
    #[default]
    All,
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub granularity: Granularity,
    pub steps: usize,
    pub lr: f64,
    pub old_tasks: OldTaskScope,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            granularity: Granularity::PerChannel,
            steps: 200,
            lr: 0.01,
            old_tasks: OldTaskScope::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusedModel {
    pub net: Network,
    pub weights: FusionWeights,
    pub slow_hash: String,
    pub fast_hash: String,
    pub loss_start: f64,
    pub loss_end: f64,
    /// Fusion loss before each step, then after the last one.
    pub history: Vec<f64>,
}

/// Dream sets entering the fusion loss for `new_task` given the old roster of `prev`.
pub fn fusion_dreams<'a>(
    prev: &Network,
    new_task: TaskId,
    dreams: &'a BTreeMap<TaskId, DreamSet>,
    scope: OldTaskScope,
) -> Result<Vec<&'a DreamSet>> {
    let mut old = prev.tasks();
    if scope == OldTaskScope::Previous {
        old = old.into_iter().filter(|&t| t != new_task).max().into_iter().collect();
    }
    old.retain(|&t| t != new_task);
    old.push(new_task);
    old.iter()
        .map(|t| {
            dreams
                .get(t)
                .ok_or_else(|| Error::contract(format!("no dream set for task {t}")))
        })
        .collect()
}

/// Gradient of the summed dream KL with respect to the pre-squash weights.
pub fn fusion_gradient(
    prev: &Network,
    slow: &Network,
    fast: &Network,
    weights: &FusionWeights,
    dreams: &[&DreamSet],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let fused = fuse_weighted(Some(prev), slow, fast, weights)?;
    let gran = weights.granularity;
    let mut grads: Vec<Vec<f64>> = weights.groups.iter().map(|g| vec![0.0; g.pre.len()]).collect();
    let mut total = 0.0;
    for d in dreams {
        let mut tape = Tape::new();
        let x = tape.leaf(d.inputs.clone());
        let trace = fused.trace(&mut tape, x, d.task, BnMode::Eval)?;
        let kl = tape.kl_divergence(trace.logits, &d.teacher_logits)?;
        total += tape.value(kl).item();
        tape.backward(kl)?;
        for (g, out) in weights.groups.iter().zip(grads.iter_mut()) {
            match g.target {
                FuseTarget::Layer(l) => {
                    let (sl, fl) = (&slow.layers()[l], &fast.layers()[l]);
                    let lt = &trace.layers[l];
                    for slot in 0..sl.params.len() {
                        if let Some(dw) = tape.grad(lt.params[slot]) {
                            let (s, f) = (sl.params[slot].data(), fl.params[slot].data());
                            for (e, &gw) in dw.iter().enumerate() {
                                out[g.entry(gran, slot, e)] += gw * (s[e] - f[e]);
                            }
                        }
                    }
                    // statistics follow the layer mean Ā, and ∂Ā/∂A_j = 1/n
                    let mut stat = 0.0;
                    for b in 0..sl.buffers.len() {
                        if let Some(db) = tape.grad(lt.buffers[b]) {
                            let (s, f) = (sl.buffers[b].data(), fl.buffers[b].data());
                            stat += db.iter().zip(s.iter().zip(f)).map(|(gb, (s, f))| gb * (s - f)).sum::<f64>();
                        }
                    }
                    if stat != 0.0 {
                        let n = g.pre.len() as f64;
                        out.iter_mut().for_each(|o| *o += stat / n);
                    }
                }
                FuseTarget::Head(task) if task == d.task => {
                    let (sh, fh) = (slow.head(task)?, fast.head(task)?);
                    for (slot, v) in trace.head.iter().enumerate() {
                        if let Some(dw) = tape.grad(*v) {
                            let (s, f) = (sh.params()[slot].data(), fh.params()[slot].data());
                            for (e, &gw) in dw.iter().enumerate() {
                                out[g.entry(gran, slot, e)] += gw * (s[e] - f[e]);
                            }
                        }
                    }
                }
                FuseTarget::Head(_) => {}
            }
        }
    }
    for (g, out) in weights.groups.iter().zip(grads.iter_mut()) {
        for (o, &p) in out.iter_mut().zip(&g.pre) {
            let sa = sigmoid(p);
            *o *= sa * (1.0 - sa);
        }
    }
    Ok((total, grads))
}

/// Learns `A` from `sigmoid⁻¹(0.5)` by Adam on the dream KL loss and returns the
/// best weights seen.
pub fn meta_fuse(
    prev: &Network,
    slow: &Network,
    fast: &Network,
    new_task: TaskId,
    dreams: &BTreeMap<TaskId, DreamSet>,
    cfg: &MetaConfig,
) -> Result<FusedModel> {
    check_parents(Some(prev), slow, fast)?;
    let sets = fusion_dreams(prev, new_task, dreams, cfg.old_tasks)?;
    let mut weights = FusionWeights::constant_pre(slow, Some(new_task), cfg.granularity, 0.0)?;
    let mut opt = Optimizer::<usize>::new(OptimizerConfig::adam(cfg.lr))?;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, FusionWeights)> = None;
    for step in 0..=cfg.steps {
        let (loss, grads) = fusion_gradient(prev, slow, fast, &weights, &sets)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("fusion loss became {loss} at step {step}")));
        }
        history.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, weights.clone()));
        }
        if step == cfg.steps {
            break;
        }
        opt.begin_step();
        for (i, (g, grad)) in weights.groups.iter_mut().zip(&grads).enumerate() {
            let d = opt.delta(&i, grad);
            for (p, dp) in g.pre.iter_mut().zip(d) {
                *p += dp;
            }
        }
    }
    let (loss_end, weights) = best.expect("at least one evaluation");
    Ok(FusedModel {
        net: fuse_weighted(Some(prev), slow, fast, &weights)?,
        weights,
        slow_hash: slow.content_hash(),
        fast_hash: fast.content_hash(),
        loss_start: history[0],
        loss_end,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nets() -> (Network, Network, Network) {
        let specs = LayerSpec::mlp_trunk(3, &[4]);
        let mut prev = Network::new(&[3], &specs, 1).unwrap();
        prev.add_head(0, 2).unwrap();
        let mut slow = prev.clone();
        slow.add_head(1, 2).unwrap();
        let mut fast = slow.clone();
        for (k, net) in [&mut slow, &mut fast].into_iter().enumerate() {
            for l in net.layers_mut() {
                for p in l.params.iter_mut().chain(l.buffers.iter_mut()) {
                    for (i, v) in p.data_mut().iter_mut().enumerate() {
                        *v += 0.1 * ((i + 3 * k) as f64).sin();
                    }
                }
            }
            let h = net.head_mut(1).unwrap();
            h.weight = h.weight.map(|v| v + 0.2 * (k as f64 - 0.5));
        }
        (prev, slow, fast)
    }

    #[test]
    fn linear_endpoints_are_bitwise() {
        let (_, slow, fast) = nets();
        assert_eq!(fuse_linear(&slow, &fast, 1.0).unwrap(), slow);
        assert_eq!(fuse_linear(&slow, &fast, 0.0).unwrap(), fast);
        assert!(fuse_linear(&slow, &fast, 1.5).is_err());
    }

    #[test]
    fn constant_half_matches_linear() {
        let (prev, slow, fast) = nets();
        for gran in [Granularity::PerLayer, Granularity::PerChannel, Granularity::PerParameter] {
            let w = FusionWeights::constant(&slow, Some(1), gran, 0.5).unwrap();
            let meta = fuse_weighted(Some(&prev), &slow, &fast, &w).unwrap();
            let lin = fuse_linear(&slow, &fast, 0.5).unwrap();
            for (a, b) in meta.layers().iter().zip(lin.layers()) {
                for (x, y) in a.params.iter().chain(&a.buffers).zip(b.params.iter().chain(&b.buffers)) {
                    assert!(x.max_abs_diff(y) <= 1e-12);
                }
            }
            assert!(meta.head(1).unwrap().weight.max_abs_diff(&lin.head(1).unwrap().weight) <= 1e-12);
        }
    }

    #[test]
    fn saturated_weights_recover_parents() {
        let (prev, slow, fast) = nets();
        for (pre, target) in [(20.0, &slow), (-20.0, &fast)] {
            let w = FusionWeights::constant_pre(&slow, Some(1), Granularity::PerChannel, pre).unwrap();
            let fused = fuse_weighted(Some(&prev), &slow, &fast, &w).unwrap();
            for (a, b) in fused.layers().iter().zip(target.layers()) {
                for (x, y) in a.params.iter().zip(&b.params) {
                    assert!(x.max_abs_diff(y) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn per_channel_group_sizes() {
        let (_, slow, _) = nets();
        let w = FusionWeights::constant(&slow, Some(1), Granularity::PerChannel, 0.5).unwrap();
        let sizes: Vec<usize> = w.groups.iter().map(|g| g.pre.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let w = FusionWeights::constant(&slow, None, Granularity::PerParameter, 0.5).unwrap();
        assert_eq!(w.len(), 3 * 4 + 4 + 4 + 4);
    }

    fn fake_dreams(slow: &Network) -> BTreeMap<TaskId, DreamSet> {
        let mut out = BTreeMap::new();
        for task in [0, 1] {
            let inputs = Tensor::from_fn(&[5, 3], |i| ((i * 13 + task * 7) as f64 * 0.37).cos());
            let teacher_logits = Tensor::from_fn(&[5, 2], |i| ((i + task) as f64 * 0.9).sin());
            out.insert(
                task,
                DreamSet {
                    task,
                    inputs,
                    teacher_logits,
                    query_labels: vec![0; 5],
                    source_hash: slow.content_hash(),
                    objective_start: 0.0,
                    objective_end: 0.0,
                },
            );
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (prev, slow, fast) = nets();
        let dreams = fake_dreams(&slow);
        let sets = fusion_dreams(&prev, 1, &dreams, OldTaskScope::All).unwrap();
        for gran in [Granularity::PerLayer, Granularity::PerChannel, Granularity::PerParameter] {
            let mut w = FusionWeights::constant_pre(&slow, Some(1), gran, 0.0).unwrap();
            for (gi, g) in w.groups.iter_mut().enumerate() {
                for (i, p) in g.pre.iter_mut().enumerate() {
                    *p = 0.3 * ((gi * 5 + i) as f64).sin();
                }
            }
            let (_, grads) = fusion_gradient(&prev, &slow, &fast, &w, &sets).unwrap();
            let h = 1e-5;
            for gi in 0..w.groups.len() {
                for i in 0..w.groups[gi].pre.len() {
                    let mut up = w.clone();
                    up.groups[gi].pre[i] += h;
                    let mut dn = w.clone();
                    dn.groups[gi].pre[i] -= h;
                    let lu = dream_loss(&fuse_weighted(Some(&prev), &slow, &fast, &up).unwrap(), &sets).unwrap();
                    let ld = dream_loss(&fuse_weighted(Some(&prev), &slow, &fast, &dn).unwrap(), &sets).unwrap();
                    let fd = (lu - ld) / (2.0 * h);
                    let an = grads[gi][i];
                    assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "{gran:?} {gi} {i}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn equal_parents_give_zero_gradient() {
        let (prev, slow, _) = nets();
        let dreams = fake_dreams(&slow);
        let sets = fusion_dreams(&prev, 1, &dreams, OldTaskScope::All).unwrap();
        let w = FusionWeights::constant(&slow, Some(1), Granularity::PerChannel, 0.5).unwrap();
        let (_, grads) = fusion_gradient(&prev, &slow, &slow, &w, &sets).unwrap();
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
        let fused = meta_fuse(&prev, &slow, &slow, 1, &dreams, &MetaConfig { steps: 3, ..MetaConfig::default() }).unwrap();
        assert!(fused.loss_end <= fused.loss_start);
    }

    #[test]
    fn missing_dreams_rejected() {
        let (prev, slow, fast) = nets();
        let mut dreams = fake_dreams(&slow);
        dreams.remove(&0);
        let r = meta_fuse(&prev, &slow, &fast, 1, &dreams, &MetaConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn sweep_grid_and_csv() {
        assert_eq!(alpha_grid(2).unwrap(), vec![0.0, 1.0]);
        assert!(alpha_grid(1).is_err());
        assert_eq!(alpha_grid(5).unwrap()[1], 0.25);
    }
}
