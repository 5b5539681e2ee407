//! Analytic data densities with closed-form noisy scores.
//!
//! A Gaussian `N(μ, Σ₀)` convolved with isotropic noise `N(0, σ²I)` stays
//! Gaussian with covariance `Σ₀ + σ²I`, so its score and Jacobian are exact.
//! Mixtures of such components give curved supports (rings) while keeping
//! exact scores; responsibilities are taken in log space.
//!
//! Each component is stored through the eigendecomposition of `Σ₀`, which
//! makes the scaled marginal `N(mμ, m²Σ₀ + σ²I)` used by the
//! variance-preserving diffusion as cheap as the plain noisy one.

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, sym_eig, DenseMatrix};
use crate::rng::{self, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub covariance: DenseMatrix,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, covariance: DenseMatrix) -> Result<Self> {
        let p = Self { mean, covariance };
        p.validate()?;
        Ok(p)
    }

    /// `N(μ, diag(variances))`
    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        Self::new(mean, DenseMatrix::from_diag(variances))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if d == 0 {
            return invalid("gaussian needs at least one dimension");
        }
        if self.covariance.rows() != d || self.covariance.cols() != d {
            return invalid(format!(
                "covariance is {}x{}, mean has length {d}",
                self.covariance.rows(),
                self.covariance.cols()
            ));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return invalid("mean has non-finite entries");
        }
        let asym = self.covariance.asymmetry();
        if asym > 1e-12 {
            return invalid(format!("covariance is not symmetric ({asym:e})"));
        }
        let eig = sym_eig(&self.covariance)?;
        if eig.eigenvalues[0] < -1e-12 {
            return invalid(format!(
                "covariance is not positive semidefinite (eigenvalue {:e})",
                eig.eigenvalues[0]
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub components: Vec<GaussianParams>,
    pub weights: Vec<f64>,
}

impl MixtureParams {
    pub fn new(components: Vec<GaussianParams>, weights: Vec<f64>) -> Result<Self> {
        let p = Self {
            components,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(components: Vec<GaussianParams>) -> Result<Self> {
        let k = components.len();
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, GaussianParams::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return invalid("mixture needs at least one component");
        }
        if self.components.len() != self.weights.len() {
            return invalid("one weight per component required");
        }
        if self.weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return invalid("mixture weights must be positive");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("mixture weights sum to {total}, not 1"));
        }
        let d = self.dim();
        for c in &self.components {
            if c.dim() != d {
                return invalid("mixture components disagree on dimension");
            }
            c.validate()?;
        }
        Ok(())
    }
}

/// Ring of isotropic Gaussians in the first two coordinates, optionally
/// decorated with extra "fibre" directions whose variances depend on the
/// angular sector of the component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingParams {
    pub n_components: usize,
    pub radius: f64,
    pub thickness: f64,
    pub dim: usize,
    /// `sector_fibres[s][j]` is the variance added along coordinate `2 + j`
    /// for components in angular sector `s` (sectors split the circle evenly).
    #[serde(default)]
    pub sector_fibres: Vec<Vec<f64>>,
}

impl RingParams {
    pub fn to_mixture(&self) -> Result<MixtureParams> {
        if self.n_components < 3 {
            return invalid("ring needs at least 3 components");
        }
        if !(self.radius > 0.0) {
            return invalid("ring radius must be positive");
        }
        if !(self.thickness >= 0.0) {
            return invalid("ring thickness must be non-negative");
        }
        if self.dim < 2 {
            return invalid("ring needs at least two dimensions");
        }
        let max_fibres = self.sector_fibres.iter().map(Vec::len).max().unwrap_or(0);
        if 2 + max_fibres > self.dim {
            return invalid("more fibre directions than ambient dimensions");
        }
        if self.sector_fibres.iter().flatten().any(|&v| !(v >= 0.0)) {
            return invalid("fibre variances must be non-negative");
        }
        let n = self.n_components;
        let base = self.thickness * self.thickness;
        let components = (0..n)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / n as f64;
                let mut mean = vec![0.0; self.dim];
                mean[0] = self.radius * angle.cos();
                mean[1] = self.radius * angle.sin();
                let mut var = vec![base; self.dim];
                if !self.sector_fibres.is_empty() {
                    let sector = k * self.sector_fibres.len() / n;
                    for (j, v) in self.sector_fibres[sector].iter().enumerate() {
                        var[2 + j] += v;
                    }
                }
                GaussianParams::diagonal(mean, &var)
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::uniform(components)
    }
}

/// Plain ring: `n_components` isotropic Gaussians (variance `thickness²`)
/// equally spaced on a circle of `radius` in the first two of `dim`
/// coordinates.
pub fn ring_manifold(n_components: usize, radius: f64, thickness: f64, dim: usize) -> Result<MixtureParams> {
    RingParams {
        n_components,
        radius,
        thickness,
        dim,
        sector_fibres: Vec::new(),
    }
    .to_mixture()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensitySpec {
    Gaussian(GaussianParams),
    Mixture(MixtureParams),
    Ring(RingParams),
}

impl DensitySpec {
    pub fn dim(&self) -> usize {
        match self {
            DensitySpec::Gaussian(g) => g.dim(),
            DensitySpec::Mixture(m) => m.dim(),
            DensitySpec::Ring(r) => r.dim,
        }
    }

    pub fn prepare(&self) -> Result<PreparedDensity> {
        match self {
            DensitySpec::Gaussian(g) => PreparedDensity::from_gaussian(g),
            DensitySpec::Mixture(m) => PreparedDensity::from_mixture(m),
            DensitySpec::Ring(r) => PreparedDensity::from_mixture(&r.to_mixture()?),
        }
    }
}

/// A base density observed through additive Gaussian noise of std `noise_std`.
#[derive(Debug, Clone)]
pub struct NoisyDensity {
    pub base: PreparedDensity,
    pub noise_std: f64,
}

impl NoisyDensity {
    pub fn new(base: &DensitySpec, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) {
            return invalid(format!("noise std must be non-negative, got {noise_std}"));
        }
        Ok(Self {
            base: base.prepare()?,
            noise_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.base.evaluate(x, 1.0, self.noise_std, false)?.log_density)
    }

    pub fn score_and_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        let e = self.base.evaluate(x, 1.0, self.noise_std, true)?;
        Ok((e.score, e.jacobian.expect("requested")))
    }
}

/// The noisy density as a field that ignores `t`: `g(x) = ∇ log (p * N(0, σ²I))(x)`.
impl crate::field::ScoreField for NoisyDensity {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn score(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(self.base.evaluate(x, 1.0, self.noise_std, false)?.score)
    }
    fn jacobian(&self, x: &[f64], _t: f64) -> Result<DenseMatrix> {
        Ok(self.score_and_jacobian(x)?.1)
    }
}

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    /// eigenvectors of Σ₀
    basis: Vec<Vec<f64>>,
    /// eigenvalues of Σ₀, clamped at zero
    variances: Vec<f64>,
    log_weight: f64,
}

/// Eigen-factored mixture ready for repeated score evaluation.
#[derive(Debug, Clone)]
pub struct PreparedDensity {
    dim: usize,
    components: Vec<Component>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log_density: f64,
    pub score: Vec<f64>,
    pub jacobian: Option<DenseMatrix>,
}

impl PreparedDensity {
    pub fn from_gaussian(g: &GaussianParams) -> Result<Self> {
        g.validate()?;
        Ok(Self {
            dim: g.dim(),
            components: vec![Self::component(g, 0.0)?],
        })
    }

    pub fn from_mixture(m: &MixtureParams) -> Result<Self> {
        m.validate()?;
        let components = m
            .components
            .iter()
            .zip(&m.weights)
            .map(|(g, w)| Self::component(g, w.ln()))
            .collect::<Result<_>>()?;
        Ok(Self {
            dim: m.dim(),
            components,
        })
    }

    fn component(g: &GaussianParams, log_weight: f64) -> Result<Component> {
        let eig = sym_eig(&g.covariance)?;
        Ok(Component {
            mean: g.mean.clone(),
            basis: eig.eigenvectors,
            variances: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
            log_weight,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Log-density, score and (optionally) Hessian of the density of
    /// `scale · X + noise_std · ε` with `X` drawn from this density.
    pub fn evaluate(&self, x: &[f64], scale: f64, noise_std: f64, want_jacobian: bool) -> Result<Evaluation> {
        let d = self.dim;
        if x.len() != d {
            return invalid(format!("point has length {}, density has dimension {d}", x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("point has non-finite entries");
        }
        let s2 = scale * scale;
        let n2 = noise_std * noise_std;
        let k = self.components.len();
        let mut log_terms = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        let mut inv_vars = Vec::with_capacity(k);
        for comp in &self.components {
            let centered: Vec<f64> = x.iter().zip(&comp.mean).map(|(a, m)| a - scale * m).collect();
            let mut quad = 0.0;
            let mut log_det = 0.0;
            let mut score = vec![0.0; d];
            let mut inv = Vec::with_capacity(d);
            for (q, &lam) in comp.basis.iter().zip(&comp.variances) {
                let var = s2 * lam + n2;
                if !(var > 0.0) {
                    return Err(Error::Singular(
                        "noisy covariance is singular (rank-deficient covariance with zero noise)".into(),
                    ));
                }
                let z = dot(q, &centered);
                quad += z * z / var;
                log_det += var.ln();
                let coef = -z / var;
                score.iter_mut().zip(q).for_each(|(s, qi)| *s += coef * qi);
                inv.push(1.0 / var);
            }
            log_terms.push(comp.log_weight - 0.5 * (quad + log_det + d as f64 * LN_2PI));
            scores.push(score);
            inv_vars.push(inv);
        }
        let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + total.ln();
        let resp: Vec<f64> = log_terms.iter().map(|l| (l - log_density).exp()).collect();

        let mut score = vec![0.0; d];
        for (r, s) in resp.iter().zip(&scores) {
            score.iter_mut().zip(s).for_each(|(a, b)| *a += r * b);
        }

        let jacobian = if want_jacobian {
            let mut jac = DenseMatrix::zeros(d, d);
            for ((r, s), (comp, inv)) in resp.iter().zip(&scores).zip(self.components.iter().zip(&inv_vars)) {
                if *r == 0.0 {
                    continue;
                }
                for (q, iv) in comp.basis.iter().zip(inv) {
                    let w = -r * iv;
                    for a in 0..d {
                        let wa = w * q[a];
                        for b in 0..d {
                            jac[(a, b)] += wa * q[b];
                        }
                    }
                }
                if k > 1 {
                    for a in 0..d {
                        let ra = r * s[a];
                        for b in 0..d {
                            jac[(a, b)] += ra * s[b];
                        }
                    }
                }
            }
            if k > 1 {
                for a in 0..d {
                    for b in 0..d {
                        jac[(a, b)] -= score[a] * score[b];
                    }
                }
            }
            // symmetric by construction; remove rounding asymmetry
            let sym = DenseMatrix::from_fn(d, d, |a, b| 0.5 * (jac[(a, b)] + jac[(b, a)]));
            Some(sym)
        } else {
            None
        };
        Ok(Evaluation {
            log_density,
            score,
            jacobian,
        })
    }

    /// `n` draws of `scale · X + noise_std · ε`, one per row.
    pub fn sample(&self, n: usize, scale: f64, noise_std: f64, rng: &mut Rng) -> DenseMatrix {
        let d = self.dim;
        let weights: Vec<f64> = self.components.iter().map(|c| c.log_weight.exp()).collect();
        let mut rows = Vec::with_capacity(n * d);
        for _ in 0..n {
            let comp = if weights.len() == 1 {
                &self.components[0]
            } else {
                let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
                let mut acc = 0.0;
                let mut chosen = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                &self.components[chosen]
            };
            let mut x: Vec<f64> = comp.mean.iter().map(|m| scale * m).collect();
            for (q, &lam) in comp.basis.iter().zip(&comp.variances) {
                let z = rng::normal(rng);
                if lam > 0.0 {
                    let a = scale * lam.sqrt() * z;
                    x.iter_mut().zip(q).for_each(|(xi, qi)| *xi += a * qi);
                }
            }
            if noise_std > 0.0 {
                for xi in x.iter_mut() {
                    *xi += noise_std * rng::normal(rng);
                }
            }
            rows.extend(x);
        }
        DenseMatrix::new(n, d, rows).expect("finite samples")
    }
}

/// Score `-(Σ₀+σ²I)⁻¹(x-μ)` and constant Jacobian `-(Σ₀+σ²I)⁻¹`.
pub fn gaussian_noisy_score(p: &GaussianParams, sigma: f64, x: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
    if !(sigma >= 0.0) {
        return invalid("noise std must be non-negative");
    }
    let e = PreparedDensity::from_gaussian(p)?.evaluate(x, 1.0, sigma, true)?;
    Ok((e.score, e.jacobian.expect("requested")))
}

/// Score and exact Hessian of `log Σ_k π_k N(x; μ_k, Σ_k + σ²I)`.
pub fn mixture_noisy_score(p: &MixtureParams, sigma: f64, x: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
    if !(sigma >= 0.0) {
        return invalid("noise std must be non-negative");
    }
    let e = PreparedDensity::from_mixture(p)?.evaluate(x, 1.0, sigma, true)?;
    Ok((e.score, e.jacobian.expect("requested")))
}

/// `n` i.i.d. draws from the noisy density, deterministic in `seed`.
pub fn sample_density(p: &NoisyDensity, n: usize, seed: u64) -> Result<DenseMatrix> {
    if n == 0 {
        return invalid("need at least one sample");
    }
    let mut rng = rng::stream(seed, 0);
    Ok(p.base.sample(n, 1.0, p.noise_std, &mut rng))
}

/// Rank-3 Gaussian in `dim` coordinates with covariance eigenvalues
/// `(4, 1, 0.5, 0, …)` rotated by a seeded random orthogonal basis.
pub fn rank3_gaussian(dim: usize, seed: u64) -> Result<GaussianParams> {
    low_rank_gaussian(&[4.0, 1.0, 0.5], dim, seed)
}

/// Zero-mean Gaussian whose covariance has the given nonzero eigenvalues
/// along a seeded random orthonormal frame (axis-aligned when `seed == 0`).
pub fn low_rank_gaussian(spectrum: &[f64], dim: usize, seed: u64) -> Result<GaussianParams> {
    if spectrum.len() > dim {
        return invalid("spectrum longer than dimension");
    }
    let mut diag = vec![0.0; dim];
    diag[..spectrum.len()].copy_from_slice(spectrum);
    let lam = DenseMatrix::from_diag(&diag);
    let cov = if seed == 0 {
        lam
    } else {
        let q = crate::linalg::random_orthogonal(dim, &mut rng::stream(seed, 0));
        let c = q.matmul(&lam).matmul(&q.transpose());
        DenseMatrix::from_fn(dim, dim, |r, k| 0.5 * (c[(r, k)] + c[(k, r)]))
    };
    GaussianParams::new(vec![0.0; dim], cov)
}
