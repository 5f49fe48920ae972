//! Full singular value decomposition by one-sided Jacobi rotations.
//!
//! Rotations are applied to the rows of the input, so the accumulated
//! rotation matrix yields the complete set of left singular vectors,
//! including directions with zero singular value. Null-space projection
//! keeps exactly those directions, so a truncated SVD would not do.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-14;

/// `m = U Σ Vᵀ` with `U` of size `p×p` and `V` of size `q×q`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Columns are the left singular vectors `u_i`.
    pub left_vectors: Tensor,
    /// `min(p, q)` values, non-increasing and non-negative.
    pub singular_values: Vec<f64>,
    /// Columns are the right singular vectors `v_i`.
    pub right_vectors: Tensor,
}

impl SvdResult {
    /// Singular value paired with each of the `p` left vectors; directions past
    /// `min(p, q)` have value zero.
    pub fn left_spectrum(&self) -> Vec<f64> {
        let p = self.left_vectors.rows();
        let mut s = self.singular_values.clone();
        s.resize(p, 0.0);
        s
    }

    /// Rebuilds `U Σ Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let p = self.left_vectors.rows();
        let q = self.right_vectors.rows();
        let mut out = Tensor::zeros(&[p, q]);
        for (i, &s) in self.singular_values.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for r in 0..p {
                let u = self.left_vectors.at(r, i) * s;
                for c in 0..q {
                    let v = out.at(r, c) + u * self.right_vectors.at(c, i);
                    out.set(r, c, v);
                }
            }
        }
        out
    }
}

pub fn svd(m: &Tensor) -> Result<SvdResult> {
    let (p, q) = match m.shape() {
        &[p, q] => (p, q),
        other => return Err(Error::shape("svd", other, &[0, 0])),
    };
    if !m.is_finite() {
        return Err(Error::numeric("svd input has non-finite entries"));
    }
    let mut rows: Vec<Vec<f64>> = (0..p).map(|i| m.row(i).to_vec()).collect();
    let mut rot: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // rows below this norm are numerically zero and never rotated
    let negligible = 1e-14 * m.frobenius_norm();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for j in 0..p {
            for k in (j + 1)..p {
                let alpha = dot(&rows[j], &rows[j]);
                let beta = dot(&rows[k], &rows[k]);
                let gamma = dot(&rows[j], &rows[k]);
                let scale = (alpha * beta).sqrt();
                if gamma == 0.0
                    || scale < f64::MIN_POSITIVE
                    || alpha.min(beta).sqrt() <= negligible
                    || gamma.abs() <= ORTHO_TOL * scale
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut rows, j, k, c, s);
                rotate_pair(&mut rot, j, k, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric("svd: jacobi sweeps did not converge"));
    }

    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let rank_cap = p.min(q);
    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let singular_values: Vec<f64> = order[..rank_cap].iter().map(|&i| norms[i]).collect();

    let mut left = Tensor::zeros(&[p, p]);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..p {
            left.set(r, col, rot[i][r]);
        }
    }

    let mut right_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    for &i in &order[..rank_cap] {
        if norms[i] > sigma_max * 1e-13 && norms[i] > 0.0 {
            right_cols.push(rows[i].iter().map(|v| v / norms[i]).collect());
        } else {
            break;
        }
    }
    let right_cols = complete_orthonormal(right_cols, q);
    let mut right = Tensor::zeros(&[q, q]);
    for (c, col) in right_cols.iter().enumerate() {
        for r in 0..q {
            right.set(r, c, col[r]);
        }
    }
    Ok(SvdResult {
        left_vectors: left,
        singular_values,
        right_vectors: right,
    })
}

fn rotate_pair(rows: &mut [Vec<f64>], j: usize, k: usize, c: f64, s: f64) {
    let (lo, hi) = rows.split_at_mut(k);
    let (x, y) = (&mut lo[j], &mut hi[0]);
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Extends orthonormal vectors in `R^dim` to a full orthonormal basis.
pub fn complete_orthonormal(mut basis: Vec<Vec<f64>>, dim: usize) -> Vec<Vec<f64>> {
    let residual = |basis: &[Vec<f64>], e: usize| {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        (n, v)
    };
    // one pass over the standard basis, keeping well-conditioned residuals
    for e in 0..dim {
        if basis.len() == dim {
            break;
        }
        let (n, v) = residual(&basis, e);
        if n > 0.5 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    while basis.len() < dim {
        let (n, v) = (0..dim)
            .map(|e| residual(&basis, e))
            .fold((0.0, Vec::new()), |best, c| if c.0 > best.0 { c } else { best });
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis
}

/// Largest absolute deviation of `QᵀQ` from the identity.
pub fn orthonormality_error(q: &Tensor) -> f64 {
    let gram = q.t_matmul(q).expect("2-D");
    let k = gram.rows();
    gram.max_abs_diff(&Tensor::eye(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let denom = b.frobenius_norm().max(f64::MIN_POSITIVE);
        a.sub(b).unwrap().frobenius_norm() / denom
    }

    #[test]
    fn diagonal_case() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 0.0]);
        assert!((r.left_vectors.at(0, 0).abs() - 1.0).abs() < 1e-15);
        assert!((r.left_vectors.at(1, 1).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix() {
        let r = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(r.singular_values.iter().all(|&s| s == 0.0));
        assert!(orthonormality_error(&r.left_vectors) < 1e-12);
        assert!(orthonormality_error(&r.right_vectors) < 1e-12);
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        for shape in [[5, 3], [3, 5], [4, 4], [7, 1]] {
            let m = Tensor::from_fn(&shape, |i| ((i * 7 + 3) as f64).sin());
            let r = svd(&m).unwrap();
            assert!(rel_err(&r.reconstruct(), &m) < 1e-12, "{shape:?}");
            assert!(orthonormality_error(&r.left_vectors) < 1e-12);
            assert!(orthonormality_error(&r.right_vectors) < 1e-12);
            assert_eq!(r.left_vectors.shape(), &[shape[0], shape[0]]);
            assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rejects_non_finite() {
        let m = Tensor::new(&[1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(Error::Numeric(_))));
    }
}
