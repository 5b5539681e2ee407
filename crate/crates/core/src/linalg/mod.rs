//! Dense small-matrix numerics.
//!
//! Everything here works on [`DenseMatrix`], a row-major `f64` matrix sized
//! for score Jacobians (d up to a few hundred). The decompositions are Jacobi
//! methods: slow asymptotically, but accurate and fully deterministic.

mod eig;
mod svd;

pub use eig::{sym_eig, EigResult};
pub use svd::{svd, SvdResult};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.entries)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            entries: m.entries,
        }
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries, rejecting shape mismatches and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows * cols != entries.len() {
            return invalid(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                entries.len()
            ));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite entry at index {pos}"));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                entries.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return invalid("ragged columns");
        }
        let m = Self::from_fn(rows, columns.len(), |r, c| columns[c][r]);
        Self::new(m.rows, m.cols, m.entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.entries
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| k * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.entries[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "vector length mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Largest entrywise deviation from symmetry.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.sub(other).max_abs()
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.entries[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.entries[r * self.cols + c]
    }
}

/// The symmetric/skew-symmetric parts of a square matrix.
#[derive(Debug, Clone)]
pub struct SymSkewSplit {
    pub symmetric_part: DenseMatrix,
    pub skew_part: DenseMatrix,
}

/// Splits `J` into `0.5 (J + Jᵀ)` and `0.5 (J - Jᵀ)`.
pub fn sym_skew_split(j: &DenseMatrix) -> Result<SymSkewSplit> {
    if !j.is_square() {
        return invalid(format!("expected square matrix, got {}x{}", j.rows, j.cols));
    }
    let n = j.rows;
    let mut sym = DenseMatrix::zeros(n, n);
    let mut skew = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let a = j[(r, c)];
            let b = j[(c, r)];
            sym[(r, c)] = 0.5 * (a + b);
            skew[(r, c)] = 0.5 * (a - b);
        }
    }
    Ok(SymSkewSplit {
        symmetric_part: sym,
        skew_part: skew,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cholesky factor `L` of a symmetric positive definite matrix (`A = L Lᵀ`).
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return invalid("cholesky needs a square matrix");
    }
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Singular(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Orthonormality defect `max |QᵀQ - I|` of the given columns.
pub fn orthonormality_defect(columns: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in columns.iter().enumerate() {
        for (j, b) in columns.iter().enumerate().skip(i) {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(a, b) - target).abs());
        }
    }
    worst
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the sign of `R`'s diagonal absorbed).
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> DenseMatrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = rng::normal_vec(rng, n);
        for q in &cols {
            let p = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        // second pass keeps orthogonality at machine precision
        for q in &cols {
            let p = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            cols.push(v);
        }
    }
    DenseMatrix::from_fn(n, n, |r, c| cols[c][r])
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng::normal(rng))
}

/// Flips `v` so that its first entry with magnitude above `tol` is positive.
/// Returns whether a flip happened.
pub(crate) fn canonicalize_sign(v: &mut [f64], tol: f64) -> bool {
    if let Some(first) = v.iter().find(|x| x.abs() > tol) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn split_of_upper_triangular() {
        let j = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let s = sym_skew_split(&j).unwrap();
        assert_eq!(s.symmetric_part.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(s.skew_part.as_slice(), &[0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn split_of_symmetric_and_skew_inputs() {
        let sym = DenseMatrix::from_rows(&[vec![2.0, -3.0], vec![-3.0, 5.0]]).unwrap();
        let s = sym_skew_split(&sym).unwrap();
        assert!(s.skew_part.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s.symmetric_part, sym);

        let skew = DenseMatrix::from_rows(&[vec![0.0, -1.5], vec![1.5, 0.0]]).unwrap();
        let s = sym_skew_split(&skew).unwrap();
        assert!(s.symmetric_part.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s.skew_part, skew);
    }

    #[test]
    fn split_rejects_non_square() {
        assert!(sym_skew_split(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn split_sums_back_exactly() {
        let mut rng = rng::stream(3, 0);
        let j = random_matrix(7, 7, &mut rng);
        let s = sym_skew_split(&j).unwrap();
        let back = s.symmetric_part.add(&s.skew_part);
        // 0.5(a+b) + 0.5(a-b) is exact up to one rounding per entry
        assert!(back.max_abs_diff(&j) <= 4.0 * f64::EPSILON * j.max_abs());
        assert!(s.symmetric_part.asymmetry() == 0.0);
        for r in 0..7 {
            for c in 0..7 {
                assert_eq!(s.skew_part[(r, c)], -s.skew_part[(c, r)]);
            }
        }
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = DenseMatrix::from_rows(&[
            vec![4.0, 2.0, 0.4],
            vec![2.0, 3.0, 0.5],
            vec![0.4, 0.5, 2.0],
        ])
        .unwrap();
        let l = cholesky(&a).unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&a) < 1e-14);
        assert!(cholesky(&DenseMatrix::from_diag(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = rng::stream(11, 0);
        let q = random_orthogonal(12, &mut rng);
        assert!(orthonormality_defect(&q.columns()) < 1e-14);
    }

    #[test]
    fn serde_roundtrip_validates() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.1], vec![1e-300, -7.25]]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: DenseMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<DenseMatrix>(r#"{"rows":2,"cols":2,"entries":[1.0]}"#).is_err());
    }
}
