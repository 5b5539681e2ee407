use super::{canonicalize_sign, dot, norm, DenseMatrix};
use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

const MAX_SWEEPS: usize = 80;
const ROTATION_TOL: f64 = 1e-15;
/// Singular values below this fraction of the largest one get their left
/// vector from orthogonal completion instead of `M v / s`.
const NULL_TOL: f64 = 1e-12;
const SIGN_TOL: f64 = 1e-10;

/// Singular triplets sorted by ascending singular value.
///
/// Column `i` of `left_vectors` / `right_vectors` pairs with
/// `singular_values[i]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    pub left_vectors: Vec<Vec<f64>>,
    pub right_vectors: Vec<Vec<f64>>,
}

impl SvdResult {
    pub fn dim(&self) -> usize {
        self.singular_values.len()
    }

    /// `Σ u_i s_i v_iᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let mut m = DenseMatrix::zeros(n, n);
        for ((u, v), &s) in self
            .left_vectors
            .iter()
            .zip(&self.right_vectors)
            .zip(&self.singular_values)
        {
            for r in 0..n {
                let us = u[r] * s;
                for c in 0..n {
                    m[(r, c)] += us * v[c];
                }
            }
        }
        m
    }

    /// Cosines `u_i · v_i` rank by rank.
    pub fn alignment(&self) -> Vec<f64> {
        self.left_vectors
            .iter()
            .zip(&self.right_vectors)
            .map(|(u, v)| dot(u, v).clamp(-1.0, 1.0))
            .collect()
    }
}

/// Singular value decomposition of a square matrix by one-sided Jacobi
/// (Hestenes) rotations.
///
/// Sign convention: the first entry of each right vector with magnitude above
/// 1e-10 is positive, and `u_i = M v_i / s_i` wherever `s_i` is resolvable.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if !m.is_square() {
        return invalid(format!("svd expects a square matrix, got {}x{}", m.rows(), m.cols()));
    }
    if !m.is_finite() {
        return invalid("svd input has non-finite entries");
    }
    let n = m.rows();
    let mut a = m.columns();
    let mut v: Vec<Vec<f64>> = DenseMatrix::identity(n).columns();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = a.iter().map(|col| norm(col)).collect();
    order.sort_by(|&i, &j| norms[i].total_cmp(&norms[j]).then(i.cmp(&j)));

    let s_max = norms.iter().cloned().fold(0.0, f64::max);
    let mut singular_values = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    let mut left: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for &i in &order {
        let s = norms[i];
        let mut vi = v[i].clone();
        let flipped = canonicalize_sign(&mut vi, SIGN_TOL);
        let ui = if s > NULL_TOL * s_max && s > 0.0 {
            let sign = if flipped { -1.0 } else { 1.0 };
            Some(a[i].iter().map(|x| sign * x / s).collect())
        } else {
            None
        };
        singular_values.push(s);
        right.push(vi);
        left.push(ui);
    }

    let left_vectors = orthonormalize_descending(left, n);
    Ok(SvdResult {
        singular_values,
        left_vectors,
        right_vectors: right,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Modified Gram-Schmidt over the left vectors from the largest singular value
/// down, so the best-determined directions are disturbed least. Missing
/// vectors (null space) are completed from the standard basis.
fn orthonormalize_descending(left: Vec<Option<Vec<f64>>>, n: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut done: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (idx, u) in left.into_iter().enumerate().rev() {
        match u {
            Some(mut u) => {
                project_out(&mut u, &done);
                project_out(&mut u, &done);
                let nu = norm(&u);
                u.iter_mut().for_each(|x| *x /= nu);
                done.push(u.clone());
                out[idx] = u;
            }
            None => pending.push(idx),
        }
    }
    for idx in pending {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = -1.0;
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            project_out(&mut e, &done);
            project_out(&mut e, &done);
            let ne = norm(&e);
            if ne > best_norm + 1e-12 {
                best_norm = ne;
                best = Some(e);
            }
        }
        let mut u = best.expect("n > 0");
        u.iter_mut().for_each(|x| *x /= best_norm);
        canonicalize_sign(&mut u, SIGN_TOL);
        done.push(u.clone());
        out[idx] = u;
    }
    out
}

fn project_out(u: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(b, u);
        u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}
