//! Local geometry of a score field at a point.
//!
//! For `J = ∇g(x)` we take the SVD `J = Σ u_i s_i v_iᵀ` (ascending `s`) and
//! the eigendecomposition of `sym(J) = Σ λ_i w_i w_iᵀ`. Directions whose
//! inverse singular value `1/s_i` stays at the noise floor `σ²` are
//! off-manifold; the rest count towards the local dimensionality.

use crate::diffusion::{NoiseSchedule, SamplePath};
use crate::error::{invalid, Result};
use crate::field::{self, JacobianMethod, ScoreField};
use crate::linalg::{dot, orthonormality_defect, svd, sym_eig, sym_skew_split, DenseMatrix, EigResult, SvdResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_KAPPA: f64 = 0.1;

const ORTHONORMAL_TOL: f64 = 1e-8;
const DEGENERACY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralAnalysis {
    pub x: Vec<f64>,
    pub t: f64,
    pub noise_std: f64,
    pub svd: SvdResult,
    /// eigendecomposition of the symmetric part of the Jacobian
    pub eig: EigResult,
    /// `u_i · v_i` per rank, ascending singular value
    pub alignment: Vec<f64>,
    pub dim_estimate: usize,
}

impl SpectralAnalysis {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// `1/s_i`, infinite for a zero singular value.
    pub fn inverse_singular_values(&self) -> Vec<f64> {
        self.svd.singular_values.iter().map(|&s| inverse(s)).collect()
    }

    /// Eigenvectors of `sym(J)` ordered by ascending `|λ|` (ties by `λ`).
    pub fn w_by_magnitude(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut idx: Vec<usize> = (0..self.eig.eigenvalues.len()).collect();
        let ev = &self.eig.eigenvalues;
        idx.sort_by(|&a, &b| ev[a].abs().total_cmp(&ev[b].abs()).then(ev[a].total_cmp(&ev[b])));
        (
            idx.iter().map(|&i| ev[i].abs()).collect(),
            idx.iter().map(|&i| self.eig.eigenvectors[i].clone()).collect(),
        )
    }
}

fn inverse(s: f64) -> f64 {
    if s == 0.0 {
        f64::INFINITY
    } else {
        1.0 / s
    }
}

pub fn spectral_analysis<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    noise_std: f64,
    kappa: f64,
) -> Result<SpectralAnalysis> {
    spectral_analysis_with(field, x, t, noise_std, kappa, JacobianMethod::Exact)
}

pub fn spectral_analysis_with<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    noise_std: f64,
    kappa: f64,
    method: JacobianMethod,
) -> Result<SpectralAnalysis> {
    let j = field::jacobian(field, x, t, method)?;
    analyze_jacobian(&j, x, t, noise_std, kappa)
}

/// Spectral analysis of an already-computed Jacobian.
pub fn analyze_jacobian(j: &DenseMatrix, x: &[f64], t: f64, noise_std: f64, kappa: f64) -> Result<SpectralAnalysis> {
    if !(kappa >= 0.0) {
        return invalid(format!("kappa must be non-negative, got {kappa}"));
    }
    if !j.is_finite() {
        return invalid("jacobian has non-finite entries");
    }
    let svd = svd(j)?;
    let split = sym_skew_split(j)?;
    let eig = sym_eig(&split.symmetric_part)?;
    let alignment = svd.alignment();
    let dim_estimate = local_dimensionality(&svd.singular_values, noise_std, kappa);
    Ok(SpectralAnalysis {
        x: x.to_vec(),
        t,
        noise_std,
        svd,
        eig,
        alignment,
        dim_estimate,
    })
}

/// Smallest `r` such that `1/s_i < (1+κ)σ²` for every rank `i > r`
/// (1-based, singular values ascending).
pub fn local_dimensionality(singular_values: &[f64], noise_std: f64, kappa: f64) -> usize {
    let threshold = (1.0 + kappa) * noise_std * noise_std;
    singular_values
        .iter()
        .rposition(|&s| !(inverse(s) < threshold))
        .map_or(0, |i| i + 1)
}

fn check_frame(vectors: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = vectors.first().map_or(0, |v| v.len());
    if vectors.iter().any(|v| v.len() != d) {
        return invalid(format!("{what} vectors have mixed lengths"));
    }
    let defect = orthonormality_defect(vectors);
    if !(defect <= ORTHONORMAL_TOL) {
        return invalid(format!("{what} vectors are not orthonormal (defect {defect:e})"));
    }
    Ok(d)
}

/// `Φ_n = 1 - (1/n) Σ_j ‖â_j - a_j‖² / ‖a_j‖²` where `â_j` is the projection
/// of `a_j` onto `span(b)`.
pub fn subspace_overlap(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return invalid(format!("need equally many vectors, got {} and {}", a.len(), b.len()));
    }
    let da = check_frame(a, "first")?;
    let db = check_frame(b, "second")?;
    if da != db {
        return invalid(format!("ambient dimensions differ ({da} vs {db})"));
    }
    let mut loss = 0.0;
    for aj in a {
        let mut recon = vec![0.0; da];
        for bk in b {
            let c = dot(bk, aj);
            recon.iter_mut().zip(bk).for_each(|(r, v)| *r += c * v);
        }
        let err: f64 = recon.iter().zip(aj).map(|(r, v)| (r - v).powi(2)).sum();
        loss += err / dot(aj, aj);
    }
    Ok(1.0 - loss / a.len() as f64)
}

/// Weights of the first `n` vectors in a sorted frame. Vectors in a cluster
/// of (numerically) equal keys straddling the cut at `n` share the remaining
/// weight equally, which makes the resulting projector independent of the
/// arbitrary basis chosen inside the cluster.
fn cut_weights(keys: &[f64], n: usize) -> Vec<f64> {
    let scale = keys.iter().fold(1.0f64, |m, k| m.max(k.abs()));
    let tol = DEGENERACY_TOL * scale;
    let mut weights = vec![0.0; keys.len()];
    let mut lo = 0;
    while lo < n && lo < keys.len() {
        let mut hi = lo + 1;
        while hi < keys.len() && (keys[hi] - keys[hi - 1]).abs() < tol {
            hi += 1;
        }
        let w = if hi <= n { 1.0 } else { (n - lo) as f64 / (hi - lo) as f64 };
        weights[lo..hi].iter_mut().for_each(|x| *x = w);
        lo = hi;
    }
    weights
}

/// Overlap of the first `n` vectors of two sorted frames, robust to
/// degenerate clusters: with weighted projectors `P̃ = Σ w_i a_i a_iᵀ`,
/// `Φ_n = ⟨P̃_a, P̃_b⟩ / (‖P̃_a‖ ‖P̃_b‖)` (Frobenius). Without degeneracy both
/// projectors are exact rank-`n` projectors and this equals `tr(P_a P_b)/n`,
/// i.e. the reconstruction formula of [`subspace_overlap`].
fn projector_overlap(a: &[Vec<f64>], a_keys: &[f64], b: &[Vec<f64>], b_keys: &[f64], n: usize) -> f64 {
    let wa = cut_weights(a_keys, n);
    let wb = cut_weights(b_keys, n);
    let mut acc = 0.0;
    for (ai, &wi) in a.iter().zip(&wa) {
        if wi == 0.0 {
            continue;
        }
        for (bj, &wj) in b.iter().zip(&wb) {
            if wj != 0.0 {
                acc += wi * wj * dot(ai, bj).powi(2);
            }
        }
    }
    let na: f64 = wa.iter().map(|w| w * w).sum();
    let nb: f64 = wb.iter().map(|w| w * w).sum();
    acc / (na * nb).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPair {
    UV,
    UW,
    VW,
}

impl OverlapPair {
    pub fn label(&self) -> &'static str {
        match self {
            OverlapPair::UV => "u,v",
            OverlapPair::UW => "u,w",
            OverlapPair::VW => "v,w",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub pair: OverlapPair,
    /// `values[n-1] = Φ_n`
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurves {
    pub uv: OverlapReport,
    pub uw: OverlapReport,
    pub vw: OverlapReport,
}

/// `Φ_n` for `n = 1..=n_max` between left/right singular vectors (ascending
/// singular value) and symmetric-part eigenvectors (ascending `|λ|`).
pub fn overlap_curves(analysis: &SpectralAnalysis, n_max: usize) -> Result<OverlapCurves> {
    let d = analysis.dim();
    if n_max == 0 || n_max > d {
        return invalid(format!("n_max must lie in 1..={d}, got {n_max}"));
    }
    let s = &analysis.svd.singular_values;
    let u = &analysis.svd.left_vectors;
    let v = &analysis.svd.right_vectors;
    let (w_keys, w) = analysis.w_by_magnitude();
    let curve = |pair, a: &[Vec<f64>], ak: &[f64], b: &[Vec<f64>], bk: &[f64]| OverlapReport {
        pair,
        values: (1..=n_max).map(|n| projector_overlap(a, ak, b, bk, n)).collect(),
    };
    Ok(OverlapCurves {
        uv: curve(OverlapPair::UV, u, s, v, s),
        uw: curve(OverlapPair::UW, u, s, &w, &w_keys),
        vw: curve(OverlapPair::VW, v, s, &w, &w_keys),
    })
}

#[derive(Debug, Clone)]
pub struct DenoiserJacobian {
    /// `∇f = I + σ² J`
    pub matrix: DenseMatrix,
    /// smallest and largest eigenvalue of `sym(∇f)`
    pub sym_eig_range: (f64, f64),
}

/// Jacobian of the denoiser `f(x) = x + σ² g(x)`.
pub fn denoiser_jacobian(j: &DenseMatrix, sigma: f64) -> Result<DenoiserJacobian> {
    if !j.is_square() {
        return invalid("jacobian must be square");
    }
    let s2 = sigma * sigma;
    let n = j.rows();
    let matrix = DenseMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 } + s2 * j[(r, c)]);
    let eig = sym_eig(&sym_skew_split(&matrix)?.symmetric_part)?;
    let lo = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let hi = eig.eigenvalues.last().copied().unwrap_or(0.0);
    Ok(DenoiserJacobian {
        matrix,
        sym_eig_range: (lo, hi),
    })
}

/// `|tr J - tr sym(J)|`
pub fn trace_equivalence_residual(j: &DenseMatrix) -> Result<f64> {
    let split = sym_skew_split(j)?;
    Ok((j.trace() - split.symmetric_part.trace()).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub kappa: f64,
    /// largest `n` for overlap curves; `None` means the full dimension
    pub n_max: Option<usize>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            n_max: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleAnalysis {
    pub path_index: usize,
    pub analysis: SpectralAnalysis,
    pub overlaps: OverlapCurves,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Quartiles {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Batch statistics at one snapshot time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub requested_t: f64,
    pub t: f64,
    pub noise_std: f64,
    /// `σ²`
    pub noise_floor: f64,
    pub n_samples: usize,
    /// per rank (ascending singular value)
    pub alignment_mean: Vec<f64>,
    pub alignment_quartiles: Vec<Quartiles>,
    pub abs_alignment_mean: Vec<f64>,
    pub inverse_singular_mean: Vec<f64>,
    pub inverse_singular_quartiles: Vec<Quartiles>,
    pub dim_mean: f64,
    pub dim_quartiles: Quartiles,
    /// `dim_histogram[r]` = number of samples with estimate `r`
    pub dim_histogram: Vec<usize>,
    /// mean `Φ_n` over the batch, `n = 1..=n_max`
    pub overlap_uv: Vec<f64>,
    pub overlap_uw: Vec<f64>,
    pub overlap_vw: Vec<f64>,
    /// `n/d`
    pub random_baseline: Vec<f64>,
    /// mean of the dimensionality estimate over the batch
    pub mean_nontrivial_rank: f64,
    /// fraction of (sample, rank) pairs with `1/s < σ²` beyond rounding
    pub floor_violation_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub dim: usize,
    pub options: AnalysisOptions,
    pub n_max: usize,
    pub summaries: Vec<TimeSummary>,
    /// `samples[k][i]`: snapshot `k` of path `i`
    pub samples: Vec<Vec<SampleAnalysis>>,
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn quartiles(values: &[f64]) -> Quartiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Quartiles {
        q25: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q75: quantile(&v, 0.75),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Analyses every snapshot of every path and aggregates per snapshot time.
/// The noise floor at a snapshot is `σ(t)` of the given schedule.
pub fn batch_analyze<F: ScoreField + ?Sized>(
    field: &F,
    schedule: &NoiseSchedule,
    paths: &[SamplePath],
    options: &AnalysisOptions,
) -> Result<AnalysisReport> {
    let first = paths.first().ok_or_else(|| crate::Error::InvalidInput("no sample paths".into()))?;
    let times = first.snapshot_times();
    if times.is_empty() {
        return invalid("sample paths have no snapshots");
    }
    for (i, p) in paths.iter().enumerate() {
        if p.snapshot_times() != times {
            return invalid(format!("path {i} has a different snapshot grid"));
        }
    }
    let d = field.dim();
    let n_max = options.n_max.unwrap_or(d);
    if n_max == 0 || n_max > d {
        return invalid(format!("n_max must lie in 1..={d}"));
    }
    let jobs: Vec<(usize, usize)> = (0..times.len()).flat_map(|k| (0..paths.len()).map(move |i| (k, i))).collect();
    let results: Vec<SampleAnalysis> = jobs
        .par_iter()
        .map(|&(k, i)| {
            let snap = &paths[i].snapshots[k];
            let sigma = schedule.sigma(snap.t);
            let analysis = spectral_analysis(field, &snap.x, snap.t, sigma, options.kappa)?;
            let overlaps = overlap_curves(&analysis, n_max)?;
            Ok(SampleAnalysis {
                path_index: i,
                analysis,
                overlaps,
            })
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<Vec<SampleAnalysis>> = Vec::with_capacity(times.len());
    let mut iter = results.into_iter();
    for _ in 0..times.len() {
        samples.push(iter.by_ref().take(paths.len()).collect());
    }
    let summaries = samples
        .iter()
        .enumerate()
        .map(|(k, batch)| summarize(times[k], batch, d, n_max))
        .collect();
    Ok(AnalysisReport {
        dim: d,
        options: *options,
        n_max,
        summaries,
        samples,
    })
}

fn summarize(requested_t: f64, batch: &[SampleAnalysis], d: usize, n_max: usize) -> TimeSummary {
    let first = &batch[0].analysis;
    let noise_std = first.noise_std;
    let noise_floor = noise_std * noise_std;
    let per_rank = |f: &dyn Fn(&SpectralAnalysis, usize) -> f64| -> Vec<Vec<f64>> {
        (0..d).map(|r| batch.iter().map(|s| f(&s.analysis, r)).collect()).collect()
    };
    let align = per_rank(&|a, r| a.alignment[r]);
    let inv = per_rank(&|a, r| inverse(a.svd.singular_values[r]));
    let dims: Vec<f64> = batch.iter().map(|s| s.analysis.dim_estimate as f64).collect();
    let mut dim_histogram = vec![0; d + 1];
    batch.iter().for_each(|s| dim_histogram[s.analysis.dim_estimate] += 1);
    let overlap_mean = |pick: &dyn Fn(&OverlapCurves) -> &OverlapReport| -> Vec<f64> {
        (0..n_max).map(|n| mean(batch.iter().map(|s| pick(&s.overlaps).values[n]))).collect()
    };
    let violations = inv.iter().flatten().filter(|&&v| v < noise_floor - 1e-12).count();
    TimeSummary {
        requested_t,
        t: first.t,
        noise_std,
        noise_floor,
        n_samples: batch.len(),
        alignment_mean: align.iter().map(|v| mean(v.iter().copied())).collect(),
        alignment_quartiles: align.iter().map(|v| quartiles(v)).collect(),
        abs_alignment_mean: align.iter().map(|v| mean(v.iter().map(|c| c.abs()))).collect(),
        inverse_singular_mean: inv.iter().map(|v| mean(v.iter().copied())).collect(),
        inverse_singular_quartiles: inv.iter().map(|v| quartiles(v)).collect(),
        dim_mean: mean(dims.iter().copied()),
        dim_quartiles: quartiles(&dims),
        dim_histogram,
        overlap_uv: overlap_mean(&|c| &c.uv),
        overlap_uw: overlap_mean(&|c| &c.uw),
        overlap_vw: overlap_mean(&|c| &c.vw),
        random_baseline: (1..=n_max).map(|n| n as f64 / d as f64).collect(),
        mean_nontrivial_rank: mean(dims.iter().copied()),
        floor_violation_fraction: violations as f64 / (batch.len() * d) as f64,
    }
}
