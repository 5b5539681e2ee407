//! The score-field abstraction shared by analytic oracles and trained models.

use crate::error::{invalid, Result};
use crate::linalg::DenseMatrix;

/// A time-indexed vector field `g(x, t)` approximating `∇ log q_t(x)`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Exact Jacobian `∇_x g(x, t)`, row `i` holding `∂g_i/∂x`.
    fn jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix>;
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).score(x, t)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix> {
        (**self).jacobian(x, t)
    }
}

impl<F: ScoreField + ?Sized + Send> ScoreField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).score(x, t)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix> {
        (**self).jacobian(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JacobianMethod {
    Exact,
    /// Central differences of the score with step `h`.
    FiniteDifference(f64),
}

pub fn jacobian<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    method: JacobianMethod,
) -> Result<DenseMatrix> {
    match method {
        JacobianMethod::Exact => field.jacobian(x, t),
        JacobianMethod::FiniteDifference(h) => {
            if !(h > 0.0) {
                return invalid(format!("finite-difference step must be positive, got {h}"));
            }
            finite_difference_jacobian(|y| field.score(y, t), x, h)
        }
    }
}

pub(crate) fn finite_difference_jacobian(
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    h: f64,
) -> Result<DenseMatrix> {
    let d = x.len();
    let mut jac = DenseMatrix::zeros(d, d);
    let mut probe = x.to_vec();
    for c in 0..d {
        probe[c] = x[c] + h;
        let plus = f(&probe)?;
        probe[c] = x[c] - h;
        let minus = f(&probe)?;
        probe[c] = x[c];
        for r in 0..d {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// `g(x, t) = A x + b`, independent of `t`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub matrix: DenseMatrix,
    pub offset: Vec<f64>,
}

impl LinearField {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return invalid("linear field needs a square matrix");
        }
        let offset = vec![0.0; matrix.rows()];
        Ok(Self { matrix, offset })
    }
}

impl ScoreField for LinearField {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }
    fn score(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        let mut y = self.matrix.matvec(x);
        y.iter_mut().zip(&self.offset).for_each(|(a, b)| *a += b);
        Ok(y)
    }
    fn jacobian(&self, _x: &[f64], _t: f64) -> Result<DenseMatrix> {
        Ok(self.matrix.clone())
    }
}

/// Adds a constant rotational component `H x` (`H` skew-symmetric) to a field.
/// The result is non-conservative but has the same divergence everywhere.
pub struct SkewAugmented<F> {
    pub inner: F,
    pub skew: DenseMatrix,
}

impl<F: ScoreField> SkewAugmented<F> {
    pub fn new(inner: F, skew: DenseMatrix) -> Result<Self> {
        let d = inner.dim();
        if skew.rows() != d || skew.cols() != d {
            return invalid("skew term has the wrong shape");
        }
        let worst = (0..d)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .map(|(r, c)| (skew[(r, c)] + skew[(c, r)]).abs())
            .fold(0.0, f64::max);
        if worst > 1e-12 {
            return invalid(format!("augmentation is not skew-symmetric ({worst:e})"));
        }
        Ok(Self { inner, skew })
    }
}

impl<F: ScoreField> ScoreField for SkewAugmented<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut g = self.inner.score(x, t)?;
        let hx = self.skew.matvec(x);
        g.iter_mut().zip(hx).for_each(|(a, b)| *a += b);
        Ok(g)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix> {
        Ok(self.inner.jacobian(x, t)?.add(&self.skew))
    }
}
