//! Multi-head network: a shared trunk followed by one linear head per task.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var, PAD};
use crate::tensor::Tensor;

pub type TaskId = usize;

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    /// Linear and conv layers: the ones whose weights are projected and captured.
    pub fn is_affine(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    /// Reference conv trunk: conv(c→16)–BN–ReLU–conv(16→32)–BN–ReLU–flatten–linear(→64).
    pub fn reference_conv_trunk(in_channels: usize, height: usize, width: usize) -> Vec<LayerSpec> {
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        vec![
            conv(in_channels, 16),
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            conv(16, 32),
            LayerSpec::BatchNorm { channels: 32 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                inputs: 32 * height * width,
                outputs: 64,
            },
        ]
    }

    /// Two hidden linear–BN–ReLU blocks.
    pub fn mlp_trunk(inputs: usize, hidden: &[usize]) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            specs.push(LayerSpec::Linear {
                inputs: width,
                outputs: h,
            });
            specs.push(LayerSpec::BatchNorm { channels: h });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs
    }
}

/// Activation geometry in channel-major layout: `[channels, batch·height·width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    fn positions(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// linear/conv: `[weight (out × in·k·k), bias]`; batch norm: `[gamma, beta]`.
    pub params: Vec<Tensor>,
    /// batch norm: `[running_mean, running_var]`.
    pub buffers: Vec<Tensor>,
    input: Geometry,
    output: Geometry,
}

impl Layer {
    pub fn input_geometry(&self) -> Geometry {
        self.input
    }

    pub fn output_geometry(&self) -> Geometry {
        self.output
    }

    /// Output channels of a parameterized layer.
    pub fn channels(&self) -> usize {
        self.output.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[classes, features]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Trunk { layer: usize, slot: usize },
    Head { task: TaskId, slot: usize },
}

/// Tape handles for one trunk layer of a traced forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub params: Vec<Var>,
    pub buffers: Vec<Var>,
    pub input: Var,
    /// Layer-input matrix multiplied by the weight: the input itself for
    /// linear layers, the unfolded patches for conv layers.
    pub operand: Option<Var>,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Var,
    pub layers: Vec<LayerTrace>,
    /// Trunk output, `[features, batch]`.
    pub features: Var,
    pub head: [Var; 2],
    /// `[batch, classes]`
    pub logits: Var,
    pub bn_mode: BnMode,
}

/// Input matrix `X` (`C_in × S`) and output gradient `∇_Z l` (`C_out × S`) of one linear or conv layer.
#[derive(Debug, Clone)]
pub struct LayerIo {
    pub layer: usize,
    pub x: Tensor,
    pub grad_z: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    heads: BTreeMap<TaskId, Head>,
    seed: u64,
}

impl Network {
    /// Builds a trunk with seeded initialization. `input_shape` is `[features]` or `[channels, height, width]`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut geom = match *input_shape {
            [d] => Geometry {
                channels: d,
                height: 1,
                width: 1,
            },
            [c, h, w] => Geometry {
                channels: c,
                height: h,
                width: w,
            },
            _ => {
                return Err(Error::Config(format!(
                    "input shape must be [features] or [channels, height, width], got {input_shape:?}"
                )))
            }
        };
        if geom.channels == 0 || geom.positions() == 0 {
            return Err(Error::Config("input shape has a zero dimension".into()));
        }
        let mut rng = rng::stream(seed, "trunk-init", 0);
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let input = geom;
            let (params, buffers, output) = match *spec {
                LayerSpec::Linear { inputs, outputs } => {
                    if geom.positions() != 1 || geom.channels != inputs {
                        return Err(compose_error(i, spec, geom));
                    }
                    let params = affine_init(&mut rng, outputs, inputs);
                    let out = Geometry {
                        channels: outputs,
                        height: 1,
                        width: 1,
                    };
                    (params, vec![], out)
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if geom.channels != in_channels || kernel == 0 || stride == 0 {
                        return Err(compose_error(i, spec, geom));
                    }
                    let span_h = geom.height + 2 * pad;
                    let span_w = geom.width + 2 * pad;
                    if span_h < kernel || span_w < kernel {
                        return Err(compose_error(i, spec, geom));
                    }
                    let out = Geometry {
                        channels: out_channels,
                        height: (span_h - kernel) / stride + 1,
                        width: (span_w - kernel) / stride + 1,
                    };
                    let params = affine_init(&mut rng, out_channels, in_channels * kernel * kernel);
                    (params, vec![], out)
                }
                LayerSpec::BatchNorm { channels } => {
                    if geom.channels != channels {
                        return Err(compose_error(i, spec, geom));
                    }
                    (
                        vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])],
                        vec![Tensor::zeros(&[channels]), Tensor::full(&[channels], 1.0)],
                        geom,
                    )
                }
                LayerSpec::Relu => (vec![], vec![], geom),
                LayerSpec::Flatten => (
                    vec![],
                    vec![],
                    Geometry {
                        channels: geom.channels * geom.positions(),
                        height: 1,
                        width: 1,
                    },
                ),
            };
            geom = output;
            layers.push(Layer {
                spec: *spec,
                params,
                buffers,
                input,
                output,
            });
        }
        if geom.positions() != 1 {
            return Err(Error::Config(
                "trunk output must be flat; add a flatten layer".into(),
            ));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            heads: BTreeMap::new(),
            seed,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.input_len(), |l| l.output.channels)
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.heads.keys().copied().collect()
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn head(&self, task: TaskId) -> Result<&Head> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::Lookup(format!("task {task}")))
    }

    pub fn head_mut(&mut self, task: TaskId) -> Result<&mut Head> {
        self.heads
            .get_mut(&task)
            .ok_or_else(|| Error::Lookup(format!("task {task}")))
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, Head> {
        &self.heads
    }

    /// Registers a new head, initialized from a stream derived from the network seed and the task id.
    pub fn add_head(&mut self, task: TaskId, num_outputs: usize) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::contract(format!("task {task} already has a head")));
        }
        if num_outputs == 0 {
            return Err(Error::contract("a head needs at least one output"));
        }
        let mut rng = rng::stream(self.seed, "head-init", task as u64);
        let mut p = affine_init(&mut rng, num_outputs, self.feature_dim());
        let bias = p.pop().expect("bias");
        let weight = p.pop().expect("weight");
        self.heads.insert(task, Head { weight, bias });
        Ok(())
    }

    /// Inserts or replaces a head verbatim.
    pub fn set_head(&mut self, task: TaskId, head: Head) -> Result<()> {
        if head.weight.cols() != self.feature_dim() || head.bias.numel() != head.classes() {
            return Err(Error::shape(
                "set_head",
                head.weight.shape(),
                &[head.weight.rows(), self.feature_dim()],
            ));
        }
        self.heads.insert(task, head);
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::Trunk { layer, slot } => self.layers.get(layer)?.params.get(slot),
            ParamId::Head { task, slot } => {
                let h = self.heads.get(&task)?;
                [&h.weight, &h.bias].get(slot).copied()
            }
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::Trunk { layer, slot } => self.layers.get_mut(layer)?.params.get_mut(slot),
            ParamId::Head { task, slot } => {
                let h = self.heads.get_mut(&task)?;
                match slot {
                    0 => Some(&mut h.weight),
                    1 => Some(&mut h.bias),
                    _ => None,
                }
            }
        }
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| (0..l.params.len()).map(move |slot| ParamId::Trunk { layer, slot }))
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.spec, LayerSpec::BatchNorm { .. }))
    }

    /// Identical input shape, layer specs and head shapes.
    pub fn same_architecture(&self, other: &Network) -> bool {
        self.input_shape == other.input_shape
            && self.specs() == other.specs()
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|((ta, a), (tb, b))| ta == tb && a.weight.shape() == b.weight.shape())
    }

    /// Content hash of every parameter, buffer and head (hex, 16 chars).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for t in l.params.iter().chain(&l.buffers) {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        for (task, head) in &self.heads {
            h.update((*task as u64).to_le_bytes());
            for t in head.params() {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex16(&h.finalize())
    }

    fn batch_size(&self, x: &Tensor) -> Result<usize> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 || x.numel() != n * self.input_len() {
            let mut want = vec![n];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::shape("network input", x.shape(), &want));
        }
        Ok(n)
    }

    /// Records a forward pass on `tape`. Every parameter and buffer becomes a leaf.
    pub fn trace(&self, tape: &mut Tape, x: Var, task: TaskId, bn_mode: BnMode) -> Result<Trace> {
        let head = self.head(task)?;
        let n = self.batch_size(tape.value(x))?;
        let first = self.layers.first().map_or(
            Geometry {
                channels: self.input_len(),
                height: 1,
                width: 1,
            },
            |l| l.input,
        );
        let mut act = tape.gather(
            x,
            Arc::new(to_channel_major_index(n, first)),
            &[first.channels, n * first.positions()],
        )?;

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = act;
            let params: Vec<Var> = layer.params.iter().map(|p| tape.leaf(p.clone())).collect();
            let buffers: Vec<Var> = layer.buffers.iter().map(|b| tape.leaf(b.clone())).collect();
            let mut operand = None;
            act = match layer.spec {
                LayerSpec::Linear { .. } => {
                    operand = Some(input);
                    let z = tape.matmul(params[0], input)?;
                    tape.add_bias(z, params[1])?
                }
                LayerSpec::Conv2d { kernel, stride, pad, .. } => {
                    let (index, rows, cols) = im2col_index(n, layer.input, layer.output, kernel, stride, pad);
                    let unfolded = tape.gather(input, Arc::new(index), &[rows, cols])?;
                    operand = Some(unfolded);
                    let z = tape.matmul(params[0], unfolded)?;
                    tape.add_bias(z, params[1])?
                }
                LayerSpec::BatchNorm { .. } => match bn_mode {
                    BnMode::Train => tape.batch_norm_train(input, params[0], params[1])?,
                    BnMode::Eval => {
                        tape.batch_norm_eval(input, params[0], params[1], buffers[0], buffers[1])?
                    }
                },
                LayerSpec::Relu => tape.relu(input),
                LayerSpec::Flatten => {
                    let g = layer.input;
                    tape.gather(input, Arc::new(flatten_index(n, g)), &[g.channels * g.positions(), n])?
                }
            };
            layers.push(LayerTrace {
                params,
                buffers,
                input,
                operand,
                output: act,
            });
        }
        let features = act;
        let hw = tape.leaf(head.weight.clone());
        let hb = tape.leaf(head.bias.clone());
        let y = tape.matmul(hw, features)?;
        let y = tape.add_bias(y, hb)?;
        let logits = tape.transpose(y)?;
        Ok(Trace {
            input: x,
            layers,
            features,
            head: [hw, hb],
            logits,
            bn_mode,
        })
    }

    /// Logits `[batch, classes]` from the head of `task`. Train mode folds the batch
    /// statistics into the running statistics.
    pub fn forward(&mut self, x: &Tensor, task: TaskId, mode: BnMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let trace = self.trace(&mut tape, xv, task, mode)?;
        if mode == BnMode::Train {
            self.update_bn_stats(&tape, &trace)?;
        }
        Ok(tape.value(trace.logits).detached())
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor, task: TaskId) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let trace = self.trace(&mut tape, xv, task, BnMode::Eval)?;
        Ok(tape.value(trace.logits).detached())
    }

    /// Exponential moving average of the batch statistics recorded in a train-mode trace.
    pub fn update_bn_stats(&mut self, tape: &Tape, trace: &Trace) -> Result<()> {
        if trace.bn_mode != BnMode::Train {
            return Ok(());
        }
        for (layer, lt) in self.layers.iter_mut().zip(&trace.layers) {
            if !matches!(layer.spec, LayerSpec::BatchNorm { .. }) {
                continue;
            }
            let (mean, var) = tape
                .batch_stats(lt.output)
                .ok_or_else(|| Error::contract("trace lacks batch statistics"))?;
            let count = tape.value(lt.input).cols() as f64;
            let unbias = count / (count - 1.0);
            let (rm, rv) = layer.buffers.split_at_mut(1);
            for (r, m) in rm[0].data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in rv[0].data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Per-layer input matrices and output gradients of the cross-entropy task loss.
    pub fn capture_layer_io(
        &self,
        x: &Tensor,
        labels: &[usize],
        task: TaskId,
        mode: BnMode,
    ) -> Result<Vec<LayerIo>> {
        self.capture_layer_io_with(x, task, mode, |tape, trace| tape.cross_entropy(trace.logits, labels))
    }

    /// As [`Network::capture_layer_io`] with a caller-supplied loss.
    pub fn capture_layer_io_with(
        &self,
        x: &Tensor,
        task: TaskId,
        mode: BnMode,
        loss: impl FnOnce(&mut Tape, &Trace) -> Result<Var>,
    ) -> Result<Vec<LayerIo>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let trace = self.trace(&mut tape, xv, task, mode)?;
        let l = loss(&mut tape, &trace)?;
        tape.backward(l)?;
        let mut out = Vec::new();
        for (i, (layer, lt)) in self.layers.iter().zip(&trace.layers).enumerate() {
            if !layer.spec.is_affine() {
                continue;
            }
            let operand = lt.operand.expect("affine layers record an operand");
            out.push(LayerIo {
                layer: i,
                x: tape.value(operand).detached(),
                grad_z: tape.grad_tensor(lt.output),
            });
        }
        Ok(out)
    }
}

fn compose_error(i: usize, spec: &LayerSpec, geom: Geometry) -> Error {
    Error::Config(format!(
        "layer {i} ({spec:?}) does not accept input of {} channels at {}x{}",
        geom.channels, geom.height, geom.width
    ))
}

fn affine_init(rng: &mut rng::Rng, outputs: usize, fan_in: usize) -> Vec<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::from_fn(&[outputs, fan_in], |_| rng.gen_range(-bound..bound));
    let b = Tensor::from_fn(&[outputs], |_| rng.gen_range(-bound..bound));
    vec![w, b]
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// `[N, C·H·W]` row-major → `[C, N·H·W]`.
fn to_channel_major_index(n: usize, g: Geometry) -> Vec<usize> {
    let hw = g.positions();
    let mut idx = Vec::with_capacity(n * g.channels * hw);
    for c in 0..g.channels {
        for s in 0..n {
            for p in 0..hw {
                idx.push(s * g.channels * hw + c * hw + p);
            }
        }
    }
    idx
}

/// `[C, N·H·W]` → `[C·H·W, N]`.
fn flatten_index(n: usize, g: Geometry) -> Vec<usize> {
    let hw = g.positions();
    let mut idx = Vec::with_capacity(n * g.channels * hw);
    for c in 0..g.channels {
        for p in 0..hw {
            for s in 0..n {
                idx.push(c * n * hw + s * hw + p);
            }
        }
    }
    idx
}

/// Patch-unfolding gather: `[C, N·H·W]` → `[C·k·k, N·OH·OW]`, row `c·k·k + ki·k + kj`.
fn im2col_index(
    n: usize,
    input: Geometry,
    output: Geometry,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, usize, usize) {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (output.height, output.width);
    let rows = input.channels * kernel * kernel;
    let cols = n * oh * ow;
    let mut idx = Vec::with_capacity(rows * cols);
    for c in 0..input.channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                for s in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let y = (oy * stride + ki) as isize - pad as isize;
                            let x = (ox * stride + kj) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                idx.push(PAD);
                            } else {
                                idx.push(c * n * h * w + s * h * w + y as usize * w + x as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    (idx, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(seed: u64) -> Network {
        let mut net = Network::new(&[6], &LayerSpec::mlp_trunk(6, &[8, 5]), seed).unwrap();
        net.add_head(0, 3).unwrap();
        net
    }

    fn batch(n: usize, d: usize, salt: f64) -> Tensor {
        Tensor::from_fn(&[n, d], |i| ((i as f64) * 0.37 + salt).sin())
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = Network::new(&[4], &[LayerSpec::Linear { inputs: 4, outputs: 3 }], 1).unwrap();
        net.add_head(0, 2).unwrap();
        for l in net.layers_mut() {
            l.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
        }
        let h = net.head_mut(0).unwrap();
        h.weight.data_mut().fill(0.0);
        h.bias.data_mut().fill(0.0);
        let y = net.predict(&batch(5, 4, 0.1), 0).unwrap();
        assert_eq!(y.shape(), &[5, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_identity_head_is_wx() {
        let mut net = Network::new(&[3], &[LayerSpec::Linear { inputs: 3, outputs: 3 }], 2).unwrap();
        net.layers_mut()[0].params[1].data_mut().fill(0.0);
        net.set_head(
            0,
            Head {
                weight: Tensor::eye(3),
                bias: Tensor::zeros(&[3]),
            },
        )
        .unwrap();
        let x = batch(4, 3, 0.5);
        let y = net.predict(&x, 0).unwrap();
        let w = &net.layers()[0].params[0];
        let expect = x.matmul_t(w).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let net = mlp(3);
        let x = batch(7, 6, 0.2);
        assert_eq!(net.predict(&x, 0).unwrap(), net.predict(&x, 0).unwrap());
    }

    #[test]
    fn unknown_task_is_lookup_error() {
        let net = mlp(3);
        assert!(matches!(net.predict(&batch(2, 6, 0.0), 9), Err(Error::Lookup(_))));
    }

    #[test]
    fn add_head_shape_isolation_and_determinism() {
        let mut a = mlp(4);
        let x = batch(5, 6, 0.3);
        let before = a.predict(&x, 0).unwrap();
        let mut b = a.clone();
        a.add_head(1, 4).unwrap();
        b.add_head(1, 4).unwrap();
        assert_eq!(a.predict(&x, 1).unwrap().shape(), &[5, 4]);
        assert_eq!(a.predict(&x, 0).unwrap(), before);
        assert_eq!(a.head(1).unwrap(), b.head(1).unwrap());
        assert!(matches!(a.add_head(1, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn train_forward_moves_running_stats() {
        let mut net = mlp(5);
        let before = net.layers()[1].buffers.clone();
        net.forward(&batch(8, 6, 0.9), 0, BnMode::Train).unwrap();
        assert_ne!(net.layers()[1].buffers, before);
        assert!(net.layers()[1].buffers[1].data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn linear_capture_is_transposed_input() {
        let mut net = Network::new(&[4], &[LayerSpec::Linear { inputs: 4, outputs: 3 }], 6).unwrap();
        net.add_head(0, 2).unwrap();
        let x = batch(5, 4, 0.7);
        let io = net
            .capture_layer_io_with(&x, 0, BnMode::Eval, |tape, trace| {
                Ok(tape.sum(trace.layers[0].output))
            })
            .unwrap();
        assert_eq!(io.len(), 1);
        assert_eq!(io[0].x, x.transpose().unwrap());
        assert_eq!(io[0].grad_z, Tensor::full(&[3, 5], 1.0));
    }

    #[test]
    fn rejects_non_composing_layers() {
        let specs = [
            LayerSpec::Linear { inputs: 4, outputs: 3 },
            LayerSpec::BatchNorm { channels: 4 },
        ];
        assert!(matches!(Network::new(&[4], &specs, 0), Err(Error::Config(_))));
        let conv_only = [LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
        }];
        assert!(Network::new(&[1, 4, 4], &conv_only, 0).is_err());
    }
}
