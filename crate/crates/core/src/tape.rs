//! Reverse-mode differentiation over a recorded list of primitive operations.
//!
//! A [`Tape`] is append-only: every operation's inputs are recorded before the
//! operation itself, so a single reverse sweep over the node list visits the
//! graph in reverse topological order. Activations use a channel-major layout
//! (`[channels, samples·positions]`), which lets linear layers, convolutions
//! (after patch unfolding) and batch norm share the same kernels.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Gather index marking a zero (padding) entry.
pub const PAD: usize = usize::MAX;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Gather {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    Sum(Var),
    RowMean(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    KlDivergence {
        logits: Var,
        teacher: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record: tensors produced during a forward pass together
/// with the primitive that produced each one.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; `None` if `v` did not participate.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient as a tensor, zeros when `v` did not participate.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match value.grad() {
            Some(g) => Tensor::new(value.shape(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Batch mean and biased batch variance recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds `bias[c]` to every entry of row `c` of a `[C, S]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (c, s) = as_matrix(xv, "add_bias")?;
        if bv.numel() != c {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (row, &b) in out.chunks_mut(s).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::new(&[c, s], out)?;
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == PAD`.
    ///
    /// Covers transposes, layout permutations and convolution patch unfolding.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let data = sv.data();
        let mut out = Vec::with_capacity(numel);
        for &i in index.iter() {
            if i == PAD {
                out.push(0.0);
            } else if i < data.len() {
                out.push(data[i]);
            } else {
                return Err(Error::shape("gather", sv.shape(), &[i]));
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Gather { src, index }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "transpose")?;
        let index: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, Arc::new(index), &[c, r])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Per-row mean of a `[C, S]` tensor, giving `[C]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, s) = as_matrix(xv, "row_mean")?;
        let means: Vec<f64> = xv
            .data()
            .chunks(s)
            .map(|r| r.iter().sum::<f64>() / s as f64)
            .collect();
        let out = Tensor::new(&[c], means)?;
        Ok(self.push(out, Op::RowMean(x)))
    }

    /// Batch norm over the columns of `[C, S]` using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, s) = as_matrix(xv, "batch_norm")?;
        check_channels(xv, self.value(gamma), c)?;
        check_channels(xv, self.value(beta), c)?;
        if s < 2 {
            return Err(Error::contract(
                "training-mode batch norm needs at least two values per channel",
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * s];
        let mut out = vec![0.0; c * s];
        for ch in 0..c {
            let row = &xv.data()[ch * s..(ch + 1) * s];
            let m = row.iter().sum::<f64>() / s as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / s as f64;
            let is = 1.0 / (v + BN_EPS).sqrt();
            mean[ch] = m;
            var[ch] = v;
            inv_std[ch] = is;
            for j in 0..s {
                let h = (row[j] - m) * is;
                xhat[ch * s + j] = h;
                out[ch * s + j] = g[ch] * h + b[ch];
            }
        }
        let out = Tensor::new(&[c, s], out)?;
        Ok(self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    /// Batch norm over `[C, S]` using supplied (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (c, s) = as_matrix(xv, "batch_norm")?;
        for p in [gamma, beta, mean, var] {
            check_channels(xv, self.value(p), c)?;
        }
        let (g, b, m, v) = (
            self.value(gamma).data(),
            self.value(beta).data(),
            self.value(mean).data(),
            self.value(var).data(),
        );
        let mut out = vec![0.0; c * s];
        for ch in 0..c {
            let is = 1.0 / (v[ch] + BN_EPS).sqrt();
            for j in 0..s {
                out[ch * s + j] = g[ch] * (xv.data()[ch * s + j] - m[ch]) * is + b[ch];
            }
        }
        let out = Tensor::new(&[c, s], out)?;
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
            },
        ))
    }

    /// Mean over rows of the cross-entropy between target distributions and
    /// `softmax(logits)`; both are `[N, K]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = as_matrix(lv, "cross_entropy")?;
        if target.shape() != lv.shape() {
            return Err(Error::shape("cross_entropy", lv.shape(), target.shape()));
        }
        let probs = softmax_rows(lv.data(), k);
        let mut loss = 0.0;
        for i in 0..n {
            let lse = log_sum_exp(&lv.data()[i * k..(i + 1) * k]);
            for j in 0..k {
                let p = target.data()[i * k + j];
                if p != 0.0 {
                    loss -= p * (lv.data()[i * k + j] - lse);
                }
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                probs,
            },
        ))
    }

    /// Cross-entropy against integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let target = one_hot(labels, self.value(logits).cols())?;
        self.soft_cross_entropy(logits, &target)
    }

    /// Mean over rows of `KL(softmax(teacher) || softmax(logits))`; both `[N, K]`.
    pub fn kl_divergence(&mut self, logits: Var, teacher_logits: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = as_matrix(lv, "kl_divergence")?;
        if teacher_logits.shape() != lv.shape() {
            return Err(Error::shape(
                "kl_divergence",
                lv.shape(),
                teacher_logits.shape(),
            ));
        }
        let teacher = softmax_rows(teacher_logits.data(), k);
        let probs = softmax_rows(lv.data(), k);
        let mut loss = 0.0;
        for i in 0..n {
            let s_lse = log_sum_exp(&lv.data()[i * k..(i + 1) * k]);
            let t_lse = log_sum_exp(&teacher_logits.data()[i * k..(i + 1) * k]);
            for j in 0..k {
                let p = teacher[i * k + j];
                if p > 0.0 {
                    let log_p = teacher_logits.data()[i * k + j] - t_lse;
                    let log_q = lv.data()[i * k + j] - s_lse;
                    loss += p * (log_p - log_q);
                }
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::KlDivergence {
                logits,
                teacher,
                probs,
            },
        ))
    }

    /// Fills the gradient of every participating node with `∂loss/∂node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not recorded on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            match g {
                Some(g) => node.value.set_grad(g)?,
                None => node.value.clear_grad(),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                matmul_nt_into(g, bv.data(), slot(grads, *a, m * k), m, n, k);
                matmul_tn_into(av.data(), g, slot(grads, *b, k * n), m, k, n);
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, g.len()), 1.0, g);
                axpy(slot(grads, *b, g.len()), 1.0, g);
            }
            Op::Sub(a, b) => {
                axpy(slot(grads, *a, g.len()), 1.0, g);
                axpy(slot(grads, *b, g.len()), -1.0, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for (o, (gi, bi)) in slot(grads, *a, g.len()).iter_mut().zip(g.iter().zip(bv)) {
                    *o += gi * bi;
                }
                for (o, (gi, ai)) in slot(grads, *b, g.len()).iter_mut().zip(g.iter().zip(av)) {
                    *o += gi * ai;
                }
            }
            Op::Scale(a, s) => axpy(slot(grads, *a, g.len()), *s, g),
            Op::AddBias { x, bias } => {
                axpy(slot(grads, *x, g.len()), 1.0, g);
                let c = self.value(*bias).numel();
                let s = g.len() / c;
                let gb = slot(grads, *bias, c);
                for (o, row) in gb.iter_mut().zip(g.chunks(s)) {
                    *o += row.iter().sum::<f64>();
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                for (o, (gi, xi)) in slot(grads, *x, g.len()).iter_mut().zip(g.iter().zip(xv)) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Gather { src, index } => {
                let n = self.value(*src).numel();
                let gs = slot(grads, *src, n);
                for (gi, &j) in g.iter().zip(index.iter()) {
                    if j != PAD {
                        gs[j] += gi;
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::RowMean(x) => {
                let n = self.value(*x).numel();
                let c = g.len();
                let s = n / c;
                let gx = slot(grads, *x, n);
                for (row, &gi) in gx.chunks_mut(s).zip(g) {
                    row.iter_mut().for_each(|o| *o += gi / s as f64);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let c = inv_std.len();
                let s = g.len() / c;
                let gam = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let gr = &g[ch * s..(ch + 1) * s];
                    let hr = &xhat[ch * s..(ch + 1) * s];
                    dbeta[ch] = gr.iter().sum();
                    dgamma[ch] = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                }
                let gx = slot(grads, *x, g.len());
                for ch in 0..c {
                    let k = gam[ch] * inv_std[ch] / s as f64;
                    for j in 0..s {
                        let idx = ch * s + j;
                        gx[idx] +=
                            k * (s as f64 * g[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
                    }
                }
                axpy(slot(grads, *gamma, c), 1.0, &dgamma);
                axpy(slot(grads, *beta, c), 1.0, &dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mu = self.value(*mean).data();
                let va = self.value(*var).data();
                let c = gam.len();
                let s = g.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dmean = vec![0.0; c];
                let mut dvar = vec![0.0; c];
                let gx = slot(grads, *x, g.len());
                for ch in 0..c {
                    let is = 1.0 / (va[ch] + BN_EPS).sqrt();
                    for j in 0..s {
                        let idx = ch * s + j;
                        let centered = xv[idx] - mu[ch];
                        gx[idx] += g[idx] * gam[ch] * is;
                        dgamma[ch] += g[idx] * centered * is;
                        dbeta[ch] += g[idx];
                        dmean[ch] -= g[idx] * gam[ch] * is;
                        dvar[ch] -= 0.5 * g[idx] * gam[ch] * centered * is * is * is;
                    }
                }
                axpy(slot(grads, *gamma, c), 1.0, &dgamma);
                axpy(slot(grads, *beta, c), 1.0, &dbeta);
                axpy(slot(grads, *mean, c), 1.0, &dmean);
                axpy(slot(grads, *var, c), 1.0, &dvar);
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let n = probs.len() / k;
                // Exact only when every target row sums to one.
                let gl = slot(grads, *logits, probs.len());
                for i in 0..n {
                    let row_mass: f64 = target[i * k..(i + 1) * k].iter().sum();
                    for j in 0..k {
                        let idx = i * k + j;
                        gl[idx] += g[0] * (row_mass * probs[idx] - target[idx]) / n as f64;
                    }
                }
            }
            Op::KlDivergence {
                logits,
                teacher,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let n = probs.len() / k;
                let gl = slot(grads, *logits, probs.len());
                for idx in 0..probs.len() {
                    gl[idx] += g[0] * (probs[idx] - teacher[idx]) / n as f64;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

fn check_channels(x: &Tensor, p: &Tensor, c: usize) -> Result<()> {
    if p.numel() != c {
        return Err(Error::shape("batch_norm", x.shape(), p.shape()));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} out of range for {k} classes")));
        }
        t.set(i, l, 1.0);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_twice_x() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expect: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 5.0);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.leaf(Tensor::zeros(&[2]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let l = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let x = tape.leaf(l.clone());
        let kl = tape.kl_divergence(x, &l).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-15);
    }
}
