//! Null-space projection of trunk updates.
//!
//! Each linear or conv layer `l` keeps an accumulator over old-task data:
//! the feature/gradient cross-correlation `X (∇_Z l)ᵀ` for the task-preferred
//! projector, or the uncentered feature covariance `X Xᵀ` for plain null-space
//! projection. The input matrix is augmented with a row of ones, so the
//! update acted on is `[ΔW | Δb]` and the bias is constrained with the weight.
//! The retained basis `U` holds the left singular vectors with the smallest
//! singular values, and an update is replaced by `Δ U Uᵀ`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Reader, Section, Writer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::network::{BnMode, LayerIo, Network, TaskId};
use crate::tensor::Tensor;

/// Below this largest singular value a layer carries no first-order constraint.
pub const DEGENERATE_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorKind {
    /// Cross-correlation of layer inputs with output gradients.
    #[default]
    Tpnsp,
    /// Layer-input covariance.
    Nsp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAccumulator {
    pub layer: usize,
    /// `(fan_in + 1) × C_out` or `(fan_in + 1) × (fan_in + 1)`.
    pub matrix: Tensor,
}

impl LayerAccumulator {
    /// Augmented input dimension `fan_in + 1`.
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `Tr(Δ M)` for an augmented update `Δ = [ΔW | Δb]`: the first-order change
    /// of the accumulated loss. Only meaningful for cross-correlation accumulators.
    pub fn loss_change(&self, delta: &Tensor) -> Result<f64> {
        if delta.shape() != [self.matrix.cols(), self.matrix.rows()] {
            return Err(Error::shape("loss_change", delta.shape(), self.matrix.shape()));
        }
        delta.matmul(&self.matrix)?.trace()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrAccumulator {
    kind: ProjectorKind,
    layers: Vec<LayerAccumulator>,
    batches: usize,
    samples: usize,
}

impl CrossCorrAccumulator {
    /// Zeroed accumulator for every linear and conv layer of `net`.
    pub fn new(net: &Network, kind: ProjectorKind) -> Self {
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_affine())
            .map(|(i, l)| {
                let w = &l.params[0];
                let dim = w.cols() + 1;
                let cols = match kind {
                    ProjectorKind::Tpnsp => w.rows(),
                    ProjectorKind::Nsp => dim,
                };
                LayerAccumulator {
                    layer: i,
                    matrix: Tensor::zeros(&[dim, cols]),
                }
            })
            .collect();
        CrossCorrAccumulator {
            kind,
            layers,
            batches: 0,
            samples: 0,
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        self.kind
    }

    pub fn layers(&self) -> &[LayerAccumulator] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerAccumulator> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    /// Columns seen, i.e. samples times spatial positions of the first layer.
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Adds one batch of captured layer inputs and output gradients.
    pub fn accumulate(&mut self, ios: &[LayerIo]) -> Result<()> {
        if ios.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "accumulator tracks {} layers, capture has {}",
                self.layers.len(),
                ios.len()
            )));
        }
        let mut updates = Vec::with_capacity(ios.len());
        for (acc, io) in self.layers.iter().zip(ios) {
            if acc.layer != io.layer {
                return Err(Error::contract(format!("capture for layer {} where {} expected", io.layer, acc.layer)));
            }
            updates.push(self.kind.batch_matrix(io, acc.matrix.shape())?);
        }
        for (acc, upd) in self.layers.iter_mut().zip(updates) {
            acc.matrix = acc.matrix.add(&upd)?;
        }
        self.batches += 1;
        self.samples += ios.first().map_or(0, |io| io.x.cols());
        if !self.layers.iter().all(|l| l.matrix.is_finite()) {
            return Err(Error::numeric("accumulator became non-finite"));
        }
        Ok(())
    }
}

impl ProjectorKind {
    fn batch_matrix(self, io: &LayerIo, shape: &[usize]) -> Result<Tensor> {
        let (x, g) = (&io.x, &io.grad_z);
        let dim = shape[0];
        if x.rows() + 1 != dim || x.cols() != g.cols() {
            return Err(Error::shape("accumulate", x.shape(), g.shape()));
        }
        let s = x.cols();
        let ones = Tensor::full(&[1, s], 1.0);
        let xa = Tensor::new(&[dim, s], [x.data(), ones.data()].concat())?;
        match self {
            ProjectorKind::Tpnsp => {
                if g.rows() != shape[1] {
                    return Err(Error::shape("accumulate", g.shape(), shape));
                }
                xa.matmul_t(g)
            }
            ProjectorKind::Nsp => xa.matmul_t(&xa),
        }
    }
}

/// Sum-of-losses capture over one pass of `data` with eval-mode batch norm.
/// Per-sample contributions do not depend on the batching.
pub fn accumulate_task(
    net: &Network,
    task: TaskId,
    data: &Dataset,
    kind: ProjectorKind,
    batch_size: usize,
) -> Result<CrossCorrAccumulator> {
    if data.is_empty() {
        return Err(Error::Data("cannot accumulate over an empty split".into()));
    }
    let mut acc = CrossCorrAccumulator::new(net, kind);
    for idx in data.batches(batch_size.max(1), None) {
        let (x, y) = data.select(&idx);
        let n = y.len() as f64;
        let ios = net.capture_layer_io_with(&x, task, BnMode::Eval, |tape, trace| {
            let ce = tape.cross_entropy(trace.logits, &y)?;
            Ok(tape.scale(ce, n))
        })?;
        acc.accumulate(&ios)?;
    }
    Ok(acc)
}

/// Rule for how many small-singular-value directions to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RankPolicy {
    /// Keep `u_i` with `σ_i ≤ ε σ_max`.
    RelativeThreshold { epsilon: f64 },
    /// Drop the largest directions until they hold `ρ Σσ`; keep the rest.
    CumulativeEnergy { rho: f64 },
    /// Keep directions whose singular value is zero to working precision.
    ExactNull { tolerance: f64 },
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::RelativeThreshold { epsilon: 0.05 }
    }
}

impl RankPolicy {
    pub fn exact_null() -> Self {
        RankPolicy::ExactNull { tolerance: 1e-10 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RankPolicy::RelativeThreshold { epsilon } => (0.0..=1.0).contains(&epsilon),
            RankPolicy::CumulativeEnergy { rho } => (0.0..=1.0).contains(&rho),
            RankPolicy::ExactNull { tolerance } => (0.0..1.0).contains(&tolerance),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("rank policy parameter out of range: {self:?}")))
        }
    }

    /// Positions of retained directions in a non-increasing spectrum.
    pub fn retained(&self, spectrum: &[f64]) -> Vec<usize> {
        let sigma_max = spectrum.first().copied().unwrap_or(0.0);
        match *self {
            RankPolicy::RelativeThreshold { epsilon } => {
                (0..spectrum.len()).filter(|&i| spectrum[i] <= epsilon * sigma_max).collect()
            }
            RankPolicy::ExactNull { tolerance } => {
                (0..spectrum.len()).filter(|&i| spectrum[i] <= tolerance * sigma_max).collect()
            }
            RankPolicy::CumulativeEnergy { rho } => {
                let total: f64 = spectrum.iter().sum();
                let mut dropped = 0.0;
                let mut first_kept = spectrum.len();
                for (i, s) in spectrum.iter().enumerate() {
                    if dropped >= rho * total {
                        first_kept = i;
                        break;
                    }
                    dropped += s;
                }
                (first_kept..spectrum.len()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBasis {
    pub layer: usize,
    /// Columns span the retained subspace of the augmented input space, `dim × k`.
    pub u: Tensor,
    /// Full spectrum the basis was cut from, one value per left vector.
    pub spectrum: Vec<f64>,
    /// Retained share of `Σσ`.
    pub retained_energy: f64,
}

impl LayerBasis {
    pub fn identity(layer: usize, dim: usize) -> Self {
        LayerBasis {
            layer,
            u: Tensor::eye(dim),
            spectrum: vec![0.0; dim],
            retained_energy: 1.0,
        }
    }

    pub fn empty(layer: usize, dim: usize) -> Self {
        LayerBasis {
            layer,
            u: Tensor::zeros(&[dim, 0]),
            spectrum: vec![0.0; dim],
            retained_energy: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn is_full(&self) -> bool {
        self.rank() == self.dim()
    }

    /// Replaces each row `r` of a row-major `rows × dim` block by `r U Uᵀ`.
    pub fn project_rows(&self, block: &mut [f64]) -> Result<()> {
        let (dim, k) = (self.dim(), self.rank());
        if !block.len().is_multiple_of(dim.max(1)) {
            return Err(Error::shape("project", &[block.len()], &[dim]));
        }
        if k == dim {
            return Ok(());
        }
        if k == 0 {
            block.fill(0.0);
            return Ok(());
        }
        let u = self.u.data();
        let mut coef = vec![0.0; k];
        for row in block.chunks_mut(dim) {
            coef.fill(0.0);
            for (i, &r) in row.iter().enumerate() {
                let ui = &u[i * k..(i + 1) * k];
                for (c, &v) in coef.iter_mut().zip(ui) {
                    *c += r * v;
                }
            }
            for (i, r) in row.iter_mut().enumerate() {
                let ui = &u[i * k..(i + 1) * k];
                *r = crate::tensor::dot(ui, &coef);
            }
        }
        Ok(())
    }

    /// `Δ U Uᵀ` for an augmented update `[ΔW | Δb]`.
    pub fn project(&self, delta: &Tensor) -> Result<Tensor> {
        if delta.shape().len() != 2 || delta.cols() != self.dim() {
            return Err(Error::shape("project_update", delta.shape(), &[0, self.dim()]));
        }
        let mut out = delta.detached();
        self.project_rows(out.data_mut())?;
        Ok(out)
    }

    /// `‖Δ − Δ U Uᵀ‖ / ‖Δ‖`, zero for a zero update.
    pub fn span_residual(&self, delta: &Tensor) -> Result<f64> {
        let norm = delta.frobenius_norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        Ok(delta.sub(&self.project(delta)?)?.frobenius_norm() / norm)
    }
}

/// Per-layer retained subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub kind: ProjectorKind,
    pub policy: RankPolicy,
    pub layers: Vec<LayerBasis>,
    /// Layers whose spectrum was degenerate and fell back to the identity.
    pub warnings: Vec<String>,
}

impl ProjectionBasis {
    /// Leaves every update unchanged.
    pub fn identity(net: &Network) -> Self {
        Self::uniform(net, LayerBasis::identity)
    }

    /// Zeroes every trunk update.
    pub fn empty(net: &Network) -> Self {
        Self::uniform(net, LayerBasis::empty)
    }

    fn uniform(net: &Network, make: fn(usize, usize) -> LayerBasis) -> Self {
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_affine())
            .map(|(i, l)| make(i, l.params[0].cols() + 1))
            .collect();
        ProjectionBasis {
            kind: ProjectorKind::default(),
            policy: RankPolicy::default(),
            layers,
            warnings: Vec::new(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerBasis> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Checks that every linear and conv layer of `net` has a basis of matching size.
    pub fn check_network(&self, net: &Network) -> Result<()> {
        let affine: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_affine())
            .map(|(i, l)| (i, l.params[0].cols() + 1))
            .collect();
        let ours: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.layer, l.dim())).collect();
        if affine != ours {
            return Err(Error::contract(format!(
                "basis layers {ours:?} do not match network layers {affine:?}"
            )));
        }
        Ok(())
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LayerBasis::rank).collect()
    }
}

/// SVD of each layer's accumulated matrix; several accumulators (one per earlier
/// task) are concatenated column-wise so the basis protects all of them.
pub fn build_basis(accs: &[&CrossCorrAccumulator], policy: RankPolicy) -> Result<ProjectionBasis> {
    policy.validate()?;
    let first = accs
        .first()
        .ok_or_else(|| Error::contract("build_basis needs at least one accumulator"))?;
    if accs.iter().any(|a| a.batches == 0) {
        return Err(Error::contract("build_basis on an empty accumulator"));
    }
    let shape_of = |a: &CrossCorrAccumulator| -> Vec<(usize, usize)> {
        a.layers.iter().map(|l| (l.layer, l.dim())).collect()
    };
    if accs
        .iter()
        .any(|a| a.kind != first.kind || shape_of(a) != shape_of(first))
    {
        return Err(Error::contract("accumulators disagree on kind or layer shapes"));
    }

    let mut layers = Vec::with_capacity(first.layers.len());
    let mut warnings = Vec::new();
    for (li, base) in first.layers.iter().enumerate() {
        let parts: Vec<&Tensor> = accs.iter().map(|a| &a.layers[li].matrix).collect();
        let m = Tensor::hcat(&parts)?;
        let dec = svd(&m)?;
        let spectrum = dec.left_spectrum();
        let sigma_max = spectrum.first().copied().unwrap_or(0.0);
        if sigma_max < DEGENERATE_SIGMA {
            warnings.push(format!(
                "layer {}: largest singular value {sigma_max:.3e} below {DEGENERATE_SIGMA:e}, projection is the identity",
                base.layer
            ));
            let mut id = LayerBasis::identity(base.layer, base.dim());
            id.spectrum = spectrum;
            layers.push(id);
            continue;
        }
        let keep = policy.retained(&spectrum);
        let total: f64 = spectrum.iter().sum();
        let kept: f64 = keep.iter().map(|&i| spectrum[i]).sum();
        layers.push(LayerBasis {
            layer: base.layer,
            u: dec.left_vectors.select_cols(&keep)?,
            spectrum,
            retained_energy: kept / total,
        });
    }
    Ok(ProjectionBasis {
        kind: first.kind,
        policy,
        layers,
        warnings,
    })
}

/// Projects each augmented per-layer update `[ΔW | Δb]` (order of `basis.layers`).
pub fn project_update(deltas: &[Tensor], basis: &ProjectionBasis) -> Result<Vec<Tensor>> {
    if deltas.len() != basis.layers.len() {
        return Err(Error::contract(format!(
            "{} deltas for {} basis layers",
            deltas.len(),
            basis.layers.len()
        )));
    }
    deltas.iter().zip(&basis.layers).map(|(d, b)| b.project(d)).collect()
}

/// Joins a weight delta `[C_out, fan_in]` and bias delta `[C_out]` into `[C_out, fan_in + 1]`.
pub fn augment(weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (weight.rows(), weight.cols());
    if bias.numel() != rows {
        return Err(Error::shape("augment", weight.shape(), bias.shape()));
    }
    let mut data = Vec::with_capacity(rows * (cols + 1));
    for r in 0..rows {
        data.extend_from_slice(weight.row(r));
        data.push(bias.data()[r]);
    }
    Tensor::new(&[rows, cols + 1], data)
}

/// Inverse of [`augment`].
pub fn split_augmented(delta: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = (delta.rows(), delta.cols());
    if cols == 0 {
        return Err(Error::shape("split_augmented", delta.shape(), &[rows, 1]));
    }
    let w: Vec<f64> = (0..rows).flat_map(|r| delta.row(r)[..cols - 1].to_vec()).collect();
    let b: Vec<f64> = (0..rows).map(|r| delta.at(r, cols - 1)).collect();
    Ok((Tensor::new(&[rows, cols - 1], w)?, Tensor::new(&[rows], b)?))
}

fn kind_code(k: ProjectorKind) -> u8 {
    match k {
        ProjectorKind::Tpnsp => 0,
        ProjectorKind::Nsp => 1,
    }
}

fn read_kind(r: &mut Reader<'_>) -> Result<ProjectorKind> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(ProjectorKind::Tpnsp),
        1 => Ok(ProjectorKind::Nsp),
        k => Err(Error::Format {
            offset: at,
            msg: format!("unknown projector kind {k}"),
        }),
    }
}

impl Section for CrossCorrAccumulator {
    const TAG: [u8; 4] = *b"ACCU";

    fn encode(&self, w: &mut Writer) {
        w.u8(kind_code(self.kind));
        w.usize(self.batches);
        w.usize(self.samples);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.usize(l.layer);
            w.tensor(&l.matrix);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let kind = read_kind(r)?;
        let batches = r.usize()?;
        let samples = r.usize()?;
        let n = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n {
            layers.push(LayerAccumulator {
                layer: r.usize()?,
                matrix: r.tensor()?,
            });
        }
        Ok(CrossCorrAccumulator {
            kind,
            layers,
            batches,
            samples,
        })
    }
}

impl Section for ProjectionBasis {
    const TAG: [u8; 4] = *b"BASI";

    fn encode(&self, w: &mut Writer) {
        w.u8(kind_code(self.kind));
        let (code, p) = match self.policy {
            RankPolicy::RelativeThreshold { epsilon } => (0, epsilon),
            RankPolicy::CumulativeEnergy { rho } => (1, rho),
            RankPolicy::ExactNull { tolerance } => (2, tolerance),
        };
        w.u8(code);
        w.f64(p);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.usize(l.layer);
            w.tensor(&l.u);
            w.f64s(&l.spectrum);
            w.f64(l.retained_energy);
        }
        w.u32(self.warnings.len() as u32);
        for m in &self.warnings {
            w.str(m);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let kind = read_kind(r)?;
        let at = r.offset();
        let code = r.u8()?;
        let p = r.f64()?;
        let policy = match code {
            0 => RankPolicy::RelativeThreshold { epsilon: p },
            1 => RankPolicy::CumulativeEnergy { rho: p },
            2 => RankPolicy::ExactNull { tolerance: p },
            k => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("unknown rank policy {k}"),
                })
            }
        };
        let n = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n {
            layers.push(LayerBasis {
                layer: r.usize()?,
                u: r.tensor()?,
                spectrum: r.f64s()?,
                retained_energy: r.f64()?,
            });
        }
        let nw = r.u32()?;
        let warnings = (0..nw).map(|_| r.str()).collect::<Result<_>>()?;
        Ok(ProjectionBasis {
            kind,
            policy,
            layers,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_error;
    use crate::network::LayerSpec;
    use crate::rng;
    use rand::Rng as _;

    fn acc_from(m: Tensor) -> CrossCorrAccumulator {
        CrossCorrAccumulator {
            kind: ProjectorKind::Tpnsp,
            layers: vec![LayerAccumulator { layer: 0, matrix: m }],
            batches: 1,
            samples: 1,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "projector-test", 0);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn io(x: Tensor, g: Tensor) -> LayerIo {
        LayerIo { layer: 0, x, grad_z: g }
    }

    fn tiny_net() -> Network {
        Network::new(&[3], &[LayerSpec::Linear { inputs: 3, outputs: 2 }], 1).unwrap()
    }

    #[test]
    fn diag_threshold_keeps_null_axis() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = build_basis(&[&acc_from(m)], RankPolicy::default()).unwrap();
        let u = &b.layers[0].u;
        assert_eq!(u.shape(), &[2, 1]);
        assert!(u.at(0, 0).abs() < 1e-15 && (u.at(1, 0).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_gives_identity_with_warning() {
        let b = build_basis(&[&acc_from(Tensor::zeros(&[3, 2]))], RankPolicy::default()).unwrap();
        assert!(b.layers[0].is_full());
        assert_eq!(b.warnings.len(), 1);
        let d = random(&[2, 3], 4);
        assert_eq!(b.layers[0].project(&d).unwrap(), d);
    }

    #[test]
    fn empty_accumulator_rejected() {
        let acc = CrossCorrAccumulator::new(&tiny_net(), ProjectorKind::Tpnsp);
        assert!(matches!(build_basis(&[&acc], RankPolicy::default()), Err(Error::Contract(_))));
        assert!(build_basis(&[], RankPolicy::default()).is_err());
    }

    #[test]
    fn accumulate_is_linear_and_concatenates() {
        let net = tiny_net();
        let (x1, g1) = (random(&[3, 4], 1), random(&[2, 4], 2));
        let (x2, g2) = (random(&[3, 5], 3), random(&[2, 5], 4));
        for kind in [ProjectorKind::Tpnsp, ProjectorKind::Nsp] {
            let mut twice = CrossCorrAccumulator::new(&net, kind);
            twice.accumulate(&[io(x1.clone(), g1.clone())]).unwrap();
            let once = twice.layers[0].matrix.clone();
            twice.accumulate(&[io(x1.clone(), g1.clone())]).unwrap();
            assert!(twice.layers[0].matrix.max_abs_diff(&once.scale(2.0)) < 1e-14);

            let mut split = CrossCorrAccumulator::new(&net, kind);
            split.accumulate(&[io(x1.clone(), g1.clone())]).unwrap();
            split.accumulate(&[io(x2.clone(), g2.clone())]).unwrap();
            let mut joint = CrossCorrAccumulator::new(&net, kind);
            let x = Tensor::hcat(&[&x1, &x2]).unwrap();
            let g = Tensor::hcat(&[&g1, &g2]).unwrap();
            joint.accumulate(&[io(x, g)]).unwrap();
            assert!(split.layers[0].matrix.max_abs_diff(&joint.layers[0].matrix) < 1e-13);
        }
    }

    #[test]
    fn zero_gradient_leaves_tpnsp_zero() {
        let mut acc = CrossCorrAccumulator::new(&tiny_net(), ProjectorKind::Tpnsp);
        acc.accumulate(&[io(random(&[3, 6], 5), Tensor::zeros(&[2, 6]))]).unwrap();
        assert!(acc.layers[0].matrix.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulate_rejects_shape_mismatch() {
        let mut acc = CrossCorrAccumulator::new(&tiny_net(), ProjectorKind::Tpnsp);
        assert!(acc.accumulate(&[io(random(&[4, 6], 5), random(&[2, 6], 1))]).is_err());
        assert!(acc.accumulate(&[io(random(&[3, 6], 5), random(&[2, 5], 1))]).is_err());
    }

    #[test]
    fn full_and_empty_bases() {
        let net = tiny_net();
        let d = random(&[2, 4], 9);
        let id = ProjectionBasis::identity(&net);
        assert_eq!(project_update(std::slice::from_ref(&d), &id).unwrap()[0], d);
        let empty = ProjectionBasis::empty(&net);
        assert!(project_update(&[d], &empty).unwrap()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_null_basis_kills_first_order_change() {
        // rank-2 cross-correlation in a 5-dimensional augmented space
        let a = random(&[5, 2], 11);
        let b = random(&[2, 4], 12);
        let m = a.matmul(&b).unwrap();
        let acc = acc_from(m.clone());
        let basis = build_basis(&[&acc], RankPolicy::exact_null()).unwrap();
        assert_eq!(basis.layers[0].rank(), 3);
        assert!(orthonormality_error(&basis.layers[0].u) < 1e-12);
        let delta = random(&[4, 5], 13);
        let projected = basis.layers[0].project(&delta).unwrap();
        let before = acc.layers[0].loss_change(&delta).unwrap().abs();
        let after = acc.layers[0].loss_change(&projected).unwrap().abs();
        assert!(after <= 1e-8 * before + 1e-12, "{after} vs {before}");
    }

    #[test]
    fn cumulative_energy_counts_from_the_top() {
        let p = RankPolicy::CumulativeEnergy { rho: 0.9 };
        assert_eq!(p.retained(&[9.0, 0.5, 0.5, 0.0]), vec![1, 2, 3]);
        assert_eq!(p.retained(&[5.0, 4.0, 1.0]), vec![2]);
    }

    #[test]
    fn augment_round_trip() {
        let w = random(&[3, 2], 1);
        let b = random(&[3], 2);
        let a = augment(&w, &b).unwrap();
        assert_eq!(a.at(1, 2), b.data()[1]);
        let (w2, b2) = split_augmented(&a).unwrap();
        assert_eq!((w2, b2), (w, b));
    }

    #[test]
    fn basis_section_round_trip() {
        let acc = acc_from(random(&[4, 3], 3));
        let basis = build_basis(&[&acc], RankPolicy::CumulativeEnergy { rho: 0.5 }).unwrap();
        let mut w = Writer::new();
        basis.encode(&mut w);
        let bytes = w.into_bytes();
        let back = ProjectionBasis::decode(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(back, basis);
        let mut w = Writer::new();
        acc.encode(&mut w);
        let bytes = w.into_bytes();
        assert_eq!(CrossCorrAccumulator::decode(&mut Reader::new(&bytes)).unwrap(), acc);
    }
}
