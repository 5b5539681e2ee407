use super::{canonicalize_sign, DenseMatrix};
use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

const MAX_SWEEPS: usize = 80;
const SYMMETRY_TOL: f64 = 1e-10;
const SIGN_TOL: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Input must be symmetric within 1e-10 (relative to its largest entry when
/// that exceeds one); the mean of `S` and `Sᵀ` is decomposed.
pub fn sym_eig(s: &DenseMatrix) -> Result<EigResult> {
    if !s.is_square() {
        return invalid(format!("sym_eig expects a square matrix, got {}x{}", s.rows(), s.cols()));
    }
    if !s.is_finite() {
        return invalid("sym_eig input has non-finite entries");
    }
    let scale = s.max_abs().max(1.0);
    let asym = s.asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return invalid(format!("matrix is not symmetric (max deviation {asym:e})"));
    }
    let n = s.rows();
    let mut a = DenseMatrix::from_fn(n, n, |r, c| 0.5 * (s[(r, c)] + s[(c, r)]));
    let mut v = DenseMatrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)] * a[(r, c)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off == 0.0 || off <= 1e-32 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                if t == 0.0 {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let values = a.diag();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    let eigenvectors = order
        .iter()
        .map(|&i| {
            let mut w = v.column(i);
            canonicalize_sign(&mut w, SIGN_TOL);
            w
        })
        .collect();
    Ok(EigResult {
        eigenvalues,
        eigenvectors,
    })
}
