//! Loss on the plane through three models.
//!
//! Coordinates live in the space of trunk parameters, batch-norm statistics and
//! the heads shared by all three anchors. Heads missing from the origin are
//! taken from the later anchor that has them and stay fixed across the plane.

use std::fmt::Write as _;

use crate::checkpoint::Meta;
use crate::error::{Error, Result};
use crate::fusion::EvalSet;
use crate::metrics::provenance_line;
use crate::network::{Network, TaskId};
use crate::tensor::{dot, Tensor};

/// Axis ranges in parameter-space distance units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    /// Square grid covering the three anchors with a margin of `margin` times the spread.
    pub fn around(anchors: &[(f64, f64); 3], n: usize, margin: f64) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in anchors {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (mx, my) = ((x1 - x0) * margin, (y1 - y0) * margin);
        GridSpec {
            x: (x0 - mx, x1 + mx),
            y: (y0 - my, y1 + my),
            nx: n,
            ny: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub tasks: Vec<TaskId>,
    /// `losses[iy][ix][set]`
    pub losses: Vec<Vec<Vec<f64>>>,
    /// Plane coordinates of `w_a`, `w_b`, `w_c`.
    pub anchors: [(f64, f64); 3],
    pub anchor_losses: [Vec<f64>; 3],
}

impl LandscapeGrid {
    /// `kind,x,y,loss_task<t>...` with `grid` rows followed by the three anchors.
    pub fn to_csv(&self, meta: &Meta) -> String {
        let mut s = provenance_line(meta);
        s.push_str("kind,x,y");
        for t in &self.tasks {
            let _ = write!(s, ",loss_task{t}");
        }
        s.push('\n');
        let row = |s: &mut String, kind: &str, x: f64, y: f64, l: &[f64]| {
            let _ = write!(s, "{kind},{x},{y}");
            for v in l {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        };
        for (iy, &y) in self.ys.iter().enumerate() {
            for (ix, &x) in self.xs.iter().enumerate() {
                row(&mut s, "grid", x, y, &self.losses[iy][ix]);
            }
        }
        for (k, ((x, y), l)) in self.anchors.iter().zip(&self.anchor_losses).enumerate() {
            row(&mut s, ["anchor_a", "anchor_b", "anchor_c"][k], *x, *y, l);
        }
        s
    }
}

/// Orthonormal plane through `w_a` spanned by `w_b − w_a` and the part of `w_c − w_a` orthogonal to it.
#[derive(Debug, Clone)]
pub struct Plane {
    template: Network,
    heads: Vec<TaskId>,
    origin: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    pub anchors: [(f64, f64); 3],
}

impl Plane {
    pub fn new(w_a: &Network, w_b: &Network, w_c: &Network) -> Result<Self> {
        for other in [w_b, w_c] {
            if other.input_shape() != w_a.input_shape() || other.specs() != w_a.specs() {
                return Err(Error::contract("landscape anchors differ in trunk architecture"));
            }
        }
        let heads: Vec<TaskId> = w_a
            .tasks()
            .into_iter()
            .filter(|t| w_b.has_task(*t) && w_c.has_task(*t))
            .collect();
        let mut template = w_a.clone();
        for src in [w_b, w_c] {
            for (&t, h) in src.heads() {
                if !heads.contains(&t) {
                    let _ = template.set_head(t, h.clone());
                }
            }
        }
        let a = flatten(w_a, &heads);
        let b = flatten(w_b, &heads);
        let c = flatten(w_c, &heads);
        let mut e1: Vec<f64> = b.iter().zip(&a).map(|(b, a)| b - a).collect();
        let nb = dot(&e1, &e1).sqrt();
        if nb == 0.0 {
            return Err(Error::contract("landscape anchors a and b coincide"));
        }
        e1.iter_mut().for_each(|v| *v /= nb);
        let dc: Vec<f64> = c.iter().zip(&a).map(|(c, a)| c - a).collect();
        let proj = dot(&dc, &e1);
        let mut e2: Vec<f64> = dc.iter().zip(&e1).map(|(d, e)| d - proj * e).collect();
        let nc = dot(&e2, &e2).sqrt();
        if nc <= 1e-12 * nb.max(dot(&dc, &dc).sqrt()) {
            return Err(Error::contract("landscape anchors are collinear"));
        }
        e2.iter_mut().for_each(|v| *v /= nc);
        Ok(Plane {
            template,
            heads,
            origin: a,
            e1,
            e2,
            anchors: [(0.0, 0.0), (nb, 0.0), (proj, nc)],
        })
    }

    /// The network at plane coordinates `(x, y)`.
    pub fn point(&self, x: f64, y: f64) -> Result<Network> {
        let mut net = self.template.clone();
        if x == 0.0 && y == 0.0 {
            return Ok(net);
        }
        let v: Vec<f64> = self
            .origin
            .iter()
            .zip(self.e1.iter().zip(&self.e2))
            .map(|(o, (a, b))| o + x * a + y * b)
            .collect();
        unflatten(&mut net, &self.heads, &v)?;
        Ok(net)
    }
}

fn visit<'a>(net: &'a Network, heads: &[TaskId]) -> Vec<&'a Tensor> {
    let mut out: Vec<&Tensor> = Vec::new();
    for l in net.layers() {
        out.extend(l.params.iter().chain(&l.buffers));
    }
    for t in heads {
        if let Ok(h) = net.head(*t) {
            out.extend(h.params());
        }
    }
    out
}

fn flatten(net: &Network, heads: &[TaskId]) -> Vec<f64> {
    visit(net, heads).into_iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(net: &mut Network, heads: &[TaskId], v: &[f64]) -> Result<()> {
    let mut pos = 0;
    let mut take = |t: &mut Tensor| {
        let n = t.numel();
        t.data_mut().copy_from_slice(&v[pos..pos + n]);
        pos += n;
    };
    for l in net.layers_mut() {
        for t in l.params.iter_mut() {
            take(t);
        }
        for t in l.buffers.iter_mut() {
            take(t);
        }
    }
    for t in heads {
        let h = net.head_mut(*t)?;
        take(&mut h.weight);
        take(&mut h.bias);
    }
    Ok(())
}

/// Losses of every eval set at each grid point of the plane through the three models.
pub fn landscape_slice(
    w_a: &Network,
    w_b: &Network,
    w_c: &Network,
    eval_sets: &[EvalSet],
    grid: &GridSpec,
) -> Result<LandscapeGrid> {
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::contract("landscape grid needs at least one point per axis"));
    }
    let plane = Plane::new(w_a, w_b, w_c)?;
    let xs = GridSpec::axis(grid.x.0, grid.x.1, grid.nx);
    let ys = GridSpec::axis(grid.y.0, grid.y.1, grid.ny);
    let eval = |net: &Network| eval_sets.iter().map(|e| e.loss(net)).collect::<Result<Vec<f64>>>();
    let mut losses = Vec::with_capacity(ys.len());
    for &y in &ys {
        let mut row = Vec::with_capacity(xs.len());
        for &x in &xs {
            row.push(eval(&plane.point(x, y)?)?);
        }
        losses.push(row);
    }
    let anchor_losses = [
        eval(&plane.point(plane.anchors[0].0, plane.anchors[0].1)?)?,
        eval(&plane.point(plane.anchors[1].0, plane.anchors[1].1)?)?,
        eval(&plane.point(plane.anchors[2].0, plane.anchors[2].1)?)?,
    ];
    Ok(LandscapeGrid {
        xs,
        ys,
        tasks: eval_sets.iter().map(EvalSet::task).collect(),
        losses,
        anchors: plane.anchors,
        anchor_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;

    fn three() -> (Network, Network, Network) {
        let specs = [LayerSpec::Linear { inputs: 2, outputs: 2 }];
        let mut a = Network::new(&[2], &specs, 1).unwrap();
        a.add_head(0, 2).unwrap();
        let mut b = Network::new(&[2], &specs, 2).unwrap();
        b.set_head(0, a.head(0).unwrap().clone()).unwrap();
        let mut c = Network::new(&[2], &specs, 3).unwrap();
        c.set_head(0, a.head(0).unwrap().clone()).unwrap();
        (a, b, c)
    }

    #[test]
    fn anchors_sit_on_the_plane() {
        let (a, b, c) = three();
        let plane = Plane::new(&a, &b, &c).unwrap();
        assert_eq!(plane.anchors[0], (0.0, 0.0));
        let dist = flatten(&b, &[0]).iter().zip(flatten(&a, &[0])).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((plane.anchors[1].0 - dist).abs() < 1e-12);
        assert_eq!(plane.anchors[1].1, 0.0);
        let (x, y) = plane.anchors[2];
        let at_c = plane.point(x, y).unwrap();
        for (p, q) in at_c.layers()[0].params.iter().zip(&c.layers()[0].params) {
            assert!(p.max_abs_diff(q) < 1e-12);
        }
        assert_eq!(plane.point(0.0, 0.0).unwrap(), a);
    }

    #[test]
    fn collinear_rejected() {
        let (a, b, _) = three();
        assert!(matches!(Plane::new(&a, &b, &b), Err(Error::Contract(_))));
        assert!(Plane::new(&a, &a, &b).is_err());
    }
}
