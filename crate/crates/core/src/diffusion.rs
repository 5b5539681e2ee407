//! Variance-preserving diffusion.
//!
//! Forward process: `x_t = m(t) x_0 + σ(t) ε` with
//! `m(t) = exp(-½∫₀ᵗ β)`, `σ(t)² = 1 - m(t)²` and linear
//! `β(s) = β_min + s (β_max - β_min)`.
//!
//! The reverse SDE is integrated with Euler–Maruyama from `t = 1` down to the
//! earliest requested snapshot. Log-likelihoods come from the
//! probability-flow ODE `dx/dt = -½β(t)(x + g(x, t))` with the exact
//! divergence `-½β(t)(d + tr ∇g)`.

use crate::densities::{DensitySpec, PreparedDensity};
use crate::error::{invalid, Error, Result};
use crate::field::ScoreField;
use crate::linalg::{sym_skew_split, DenseMatrix};
use crate::rng::{self, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Snapshot times used throughout the analysis (noise levels from small to large).
pub const SNAPSHOT_TIMES: [f64; 5] = [0.01, 0.03, 0.05, 0.15, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// smallest admissible time; `σ(0) = 0` is never evaluated
    pub eps_t: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            eps_t: 0.005,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0) || !(self.beta_max >= self.beta_min) {
            return invalid("schedule needs 0 < beta_min <= beta_max");
        }
        if !(self.eps_t > 0.0 && self.eps_t < 1.0) {
            return invalid("eps_t must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β(s) ds`
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Signal coefficient `m(t)`.
    pub fn mean_coeff(&self, t: f64) -> f64 {
        (-0.5 * self.integrated_beta(t)).exp()
    }

    /// Closed-form `σ(t)` for any `t ≥ 0`.
    pub fn sigma(&self, t: f64) -> f64 {
        (-(-self.integrated_beta(t)).exp_m1()).sqrt()
    }

    /// Inverse of [`NoiseSchedule::sigma`] for `σ ∈ [0, 1)`.
    pub fn time_for_sigma(&self, sigma: f64) -> f64 {
        let b = -(-sigma * sigma).ln_1p();
        let slope = self.beta_max - self.beta_min;
        if slope == 0.0 {
            return b / self.beta_min;
        }
        (-self.beta_min + (self.beta_min * self.beta_min + 2.0 * slope * b).sqrt()) / slope
    }

    /// `σ(t)` restricted to `[eps_t, 1]`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.sigma(t))
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.eps_t - 1e-12 && t <= 1.0 + 1e-12) {
            return invalid(format!("time {t} outside [{}, 1]", self.eps_t));
        }
        Ok(())
    }

    /// Clamps into `[eps_t, 1]`.
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.eps_t, 1.0)
    }
}

pub fn sigma_at(sched: &NoiseSchedule, t: f64) -> Result<f64> {
    sched.sigma_at(t)
}

/// `m(t) x_0 + σ(t) ε`
pub fn forward_perturb(sched: &NoiseSchedule, x0: &[f64], t: f64, rng: &mut Rng) -> Vec<f64> {
    let m = sched.mean_coeff(t);
    let s = sched.sigma(t);
    x0.iter().map(|x| m * x + s * rng::normal(rng)).collect()
}

/// Exact score of the VP marginal `q_t` of an analytic density.
#[derive(Debug, Clone)]
pub struct VpDensityField {
    density: PreparedDensity,
    schedule: NoiseSchedule,
}

impl VpDensityField {
    pub fn new(spec: &DensitySpec, schedule: NoiseSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            density: spec.prepare()?,
            schedule,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        let (m, s) = self.coeffs(t)?;
        Ok(self.density.evaluate(x, m, s, false)?.log_density)
    }

    fn coeffs(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return invalid(format!("time {t} outside [0, 1]"));
        }
        let t = self.schedule.clamp(t);
        Ok((self.schedule.mean_coeff(t), self.schedule.sigma(t)))
    }
}

impl ScoreField for VpDensityField {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (m, s) = self.coeffs(t)?;
        Ok(self.density.evaluate(x, m, s, false)?.score)
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix> {
        let (m, s) = self.coeffs(t)?;
        Ok(self.density.evaluate(x, m, s, true)?.jacobian.expect("requested"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub requested_t: f64,
    /// grid time the state was recorded at
    pub t: f64,
    pub x: Vec<f64>,
}

/// Reverse-diffusion trajectory, snapshots ordered by decreasing `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub seed: u64,
    pub n_steps: usize,
    pub snapshots: Vec<Snapshot>,
}

impl SamplePath {
    pub fn snapshot_times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.requested_t).collect()
    }
}

/// Euler–Maruyama integrator for the reverse VP SDE.
#[derive(Debug, Clone)]
pub struct ReverseSampler {
    pub schedule: NoiseSchedule,
    pub n_steps: usize,
    inject_noise: bool,
    initial: Option<Vec<f64>>,
}

impl ReverseSampler {
    pub fn new(schedule: NoiseSchedule, n_steps: usize) -> Self {
        Self {
            schedule,
            n_steps,
            inject_noise: true,
            initial: None,
        }
    }

    /// Drops the Brownian increment (test hook).
    pub fn without_noise(mut self) -> Self {
        self.inject_noise = false;
        self
    }

    /// Fixes `x_1` instead of drawing it from `N(0, I)` (test hook).
    pub fn with_initial_state(mut self, x1: Vec<f64>) -> Self {
        self.initial = Some(x1);
        self
    }

    pub fn step_size(&self) -> f64 {
        (1.0 - self.schedule.eps_t) / self.n_steps as f64
    }

    fn grid_time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.schedule.eps_t
        } else {
            1.0 - k as f64 * self.step_size()
        }
    }

    pub fn sample<F: ScoreField + ?Sized>(&self, field: &F, snapshot_times: &[f64], seed: u64) -> Result<SamplePath> {
        self.schedule.validate()?;
        if self.n_steps == 0 {
            return invalid("n_steps must be at least 1");
        }
        if snapshot_times.is_empty() {
            return invalid("need at least one snapshot time");
        }
        for &t in snapshot_times {
            self.schedule.check_time(t)?;
        }
        let d = field.dim();
        let h = self.step_size();
        // requested times sorted descending, each mapped to its nearest grid index
        let mut requests: Vec<(f64, usize)> = snapshot_times
            .iter()
            .map(|&t| {
                let k = ((1.0 - t) / h).round().clamp(0.0, self.n_steps as f64) as usize;
                (t, k)
            })
            .collect();
        requests.sort_by(|a, b| b.0.total_cmp(&a.0));
        let last_k = requests.iter().map(|r| r.1).max().expect("non-empty");

        let mut rng = rng::stream(seed, 0);
        let mut x = match &self.initial {
            Some(x1) if x1.len() == d => x1.clone(),
            Some(_) => return invalid("initial state has the wrong dimension"),
            None => rng::normal_vec(&mut rng, d),
        };
        let mut snapshots = Vec::with_capacity(requests.len());
        let mut next = 0;
        for k in 0..=last_k {
            let t = self.grid_time(k);
            while next < requests.len() && requests[next].1 == k {
                snapshots.push(Snapshot {
                    requested_t: requests[next].0,
                    t,
                    x: x.clone(),
                });
                next += 1;
            }
            if k == last_k {
                break;
            }
            let g = field.score(&x, t)?;
            if g.len() != d || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplingFailure {
                    step: k,
                    reason: format!("field returned non-finite score at t = {t}"),
                });
            }
            let beta = self.schedule.beta(t);
            let noise_scale = (beta * h).sqrt();
            for i in 0..d {
                x[i] += (0.5 * beta * x[i] + beta * g[i]) * h;
                if self.inject_noise {
                    x[i] += noise_scale * rng::normal(&mut rng);
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplingFailure {
                    step: k,
                    reason: "state became non-finite".into(),
                });
            }
        }
        Ok(SamplePath {
            seed,
            n_steps: self.n_steps,
            snapshots,
        })
    }
}

pub fn euler_maruyama_sample<F: ScoreField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    n_steps: usize,
    snapshot_times: &[f64],
    seed: u64,
) -> Result<SamplePath> {
    ReverseSampler::new(*sched, n_steps).sample(field, snapshot_times, seed)
}

/// Per-path seed derived from a master seed and the path index.
pub fn path_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `n_paths` independent trajectories on the rayon pool. Path `i`
/// always uses `path_seed(master_seed, i)`, so the result does not depend on
/// the number of workers.
pub fn sample_paths<F: ScoreField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    n_paths: usize,
    n_steps: usize,
    snapshot_times: &[f64],
    master_seed: u64,
) -> Result<Vec<SamplePath>> {
    let sampler = ReverseSampler::new(*sched, n_steps);
    (0..n_paths)
        .into_par_iter()
        .map(|i| sampler.sample(field, snapshot_times, path_seed(master_seed, i)))
        .collect()
}

/// Which matrix the divergence is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Full,
    /// trace of `0.5 (J + Jᵀ)`
    Symmetric,
}

/// Deterministic probability-flow trajectory from `t = eps_t` to `t = 1`.
#[derive(Debug, Clone)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

pub fn pf_ode_path<F: ScoreField + ?Sized>(field: &F, sched: &NoiseSchedule, x: &[f64], n_steps: usize) -> Result<FlowPath> {
    sched.validate()?;
    if n_steps == 0 {
        return invalid("n_steps must be at least 1");
    }
    if x.iter().any(|v| !v.is_finite()) || x.len() != field.dim() {
        return invalid("start point must be finite with the field's dimension");
    }
    let h = (1.0 - sched.eps_t) / n_steps as f64;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut cur = x.to_vec();
    for k in 0..n_steps {
        let t = sched.eps_t + k as f64 * h;
        let g = field.score(&cur, t)?;
        let beta = sched.beta(t);
        let next: Vec<f64> = cur
            .iter()
            .zip(&g)
            .map(|(xi, gi)| xi - 0.5 * beta * (xi + gi) * h)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure {
                step: k,
                reason: "probability-flow state became non-finite".into(),
            });
        }
        times.push(t);
        states.push(std::mem::replace(&mut cur, next));
    }
    times.push(1.0);
    states.push(cur);
    Ok(FlowPath { times, states })
}

/// `log p(x_eps)` along a fixed probability-flow path: the standard normal
/// log-density of the endpoint plus the left-point sum of the divergence.
pub fn loglik_along_path<F: ScoreField + ?Sized>(
    field: &F,
    sched: &NoiseSchedule,
    path: &FlowPath,
    mode: TraceMode,
) -> Result<f64> {
    let d = field.dim() as f64;
    let end = path.states.last().expect("non-empty path");
    let mut logp = -0.5 * (d * LN_2PI + end.iter().map(|v| v * v).sum::<f64>());
    for k in 0..path.times.len() - 1 {
        let t = path.times[k];
        let h = path.times[k + 1] - t;
        let jac = field.jacobian(&path.states[k], t)?;
        let tr = match mode {
            TraceMode::Full => jac.trace(),
            TraceMode::Symmetric => sym_skew_split(&jac)?.symmetric_part.trace(),
        };
        if !tr.is_finite() {
            return Err(Error::IntegrationFailure {
                step: k,
                reason: format!("non-finite divergence at t = {t}"),
            });
        }
        let div = -0.5 * sched.beta(t) * (d + tr);
        logp += div * h;
    }
    Ok(logp)
}

/// Log-likelihood of `x` under the probability-flow ODE of `field`.
pub fn pf_ode_loglik<F: ScoreField + ?Sized>(field: &F, sched: &NoiseSchedule, x: &[f64], n_steps: usize) -> Result<f64> {
    let path = pf_ode_path(field, sched, x, n_steps)?;
    loglik_along_path(field, sched, &path, TraceMode::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_for_sigma_inverts_sigma() {
        let s = NoiseSchedule::default();
        for &t in &[0.005, 0.01, 0.3, 0.77, 1.0] {
            assert!((s.time_for_sigma(s.sigma(t)) - t).abs() < 1e-10);
        }
        let flat = NoiseSchedule { beta_min: 2.0, beta_max: 2.0, eps_t: 0.01 };
        assert!((flat.time_for_sigma(flat.sigma(0.4)) - 0.4).abs() < 1e-12);
    }
    use crate::densities::{low_rank_gaussian, GaussianParams};
    use crate::field::{LinearField, SkewAugmented};

    fn standard_normal(d: usize) -> DensitySpec {
        DensitySpec::Gaussian(GaussianParams::diagonal(vec![0.0; d], &vec![1.0; d]).unwrap())
    }

    #[test]
    fn schedule_matches_reference_noise_levels() {
        let s = NoiseSchedule::default();
        assert!((s.sigma_at(0.3).unwrap() - 0.777).abs() < 5e-4);
        assert!((s.sigma_at(0.15).unwrap() - 0.461).abs() < 5e-4);
        assert!(s.sigma(1e-9) < 1e-4);
        assert_eq!(s.sigma(0.0), 0.0);
        assert!(s.sigma_at(0.001).is_err());
        assert!(s.sigma_at(1.5).is_err());
    }

    #[test]
    fn schedule_is_variance_preserving_and_increasing() {
        let s = NoiseSchedule::default();
        let mut prev = 0.0;
        for i in 0..=1000 {
            let t = s.eps_t + (1.0 - s.eps_t) * i as f64 / 1000.0;
            let m = s.mean_coeff(t);
            let sig = s.sigma(t);
            assert!((m * m + sig * sig - 1.0).abs() < 1e-12);
            assert!(sig > prev);
            prev = sig;
        }
    }

    #[test]
    fn forward_perturbation_preserves_second_moment() {
        let s = NoiseSchedule::default();
        let d = 8;
        let mut rng = rng::stream(4, 0);
        for &t in &[0.01, 0.1, 0.3, 0.6, 1.0] {
            let n = 10_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let x0: Vec<f64> = (0..d).map(|_| if rng::normal(&mut rng) > 0.0 { 1.0 } else { -1.0 }).collect();
                let xt = forward_perturb(&s, &x0, t, &mut rng);
                acc += xt.iter().map(|v| v * v).sum::<f64>();
            }
            let mean = acc / n as f64;
            assert!((mean - d as f64).abs() < 0.02 * d as f64, "t={t}: {mean}");
        }
    }

    #[test]
    fn single_noiseless_step_is_hand_checkable() {
        let s = NoiseSchedule::default();
        let a = DenseMatrix::from_rows(&[vec![-1.0, 0.0], vec![0.5, -2.0]]).unwrap();
        let field = LinearField::new(a).unwrap();
        let x1 = vec![1.0, -1.0];
        let path = ReverseSampler::new(s, 1)
            .without_noise()
            .with_initial_state(x1.clone())
            .sample(&field, &[s.eps_t], 0)
            .unwrap();
        let h = 1.0 - s.eps_t;
        let beta = 20.0;
        let g = [-1.0, 0.5 * 1.0 + 2.0];
        let want: Vec<f64> = (0..2).map(|i| x1[i] + (0.5 * beta * x1[i] + beta * g[i]) * h).collect();
        assert_eq!(path.snapshots.len(), 1);
        assert_eq!(path.snapshots[0].t, s.eps_t);
        assert_eq!(path.snapshots[0].x, want);
    }

    #[test]
    fn snapshots_at_requested_times() {
        let s = NoiseSchedule::default();
        let field = VpDensityField::new(&standard_normal(3), s).unwrap();
        let path = euler_maruyama_sample(&field, &s, 1000, &SNAPSHOT_TIMES, 7).unwrap();
        assert_eq!(path.snapshots.len(), 5);
        let got = path.snapshot_times();
        assert_eq!(got, vec![0.3, 0.15, 0.05, 0.03, 0.01]);
        let h = (1.0 - s.eps_t) / 1000.0;
        for snap in &path.snapshots {
            assert!((snap.t - snap.requested_t).abs() <= 0.5 * h + 1e-12);
        }
        assert!(path.snapshots.windows(2).all(|w| w[0].t > w[1].t));
        let again = euler_maruyama_sample(&field, &s, 1000, &SNAPSHOT_TIMES, 7).unwrap();
        assert_eq!(path, again);
    }

    #[test]
    fn standard_normal_data_samples_have_unit_moments() {
        let s = NoiseSchedule::default();
        let d = 2;
        let field = VpDensityField::new(&standard_normal(d), s).unwrap();
        let paths = sample_paths(&field, &s, 4096, 1000, &[s.eps_t], 99).unwrap();
        let xs: Vec<&Vec<f64>> = paths.iter().map(|p| &p.snapshots[0].x).collect();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mean_norm < 0.05, "mean {mean:?}");
        let mut cov_err = 0.0;
        for a in 0..d {
            for b in 0..d {
                let c = xs.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / (n - 1.0);
                let target = if a == b { 1.0 } else { 0.0 };
                cov_err += (c - target).powi(2);
            }
        }
        assert!(cov_err.sqrt() < 0.15, "cov error {}", cov_err.sqrt());
    }

    struct Exploding;
    impl ScoreField for Exploding {
        fn dim(&self) -> usize {
            1
        }
        fn score(&self, _x: &[f64], t: f64) -> Result<Vec<f64>> {
            Ok(vec![if t < 0.5 { f64::NAN } else { 0.0 }])
        }
        fn jacobian(&self, _x: &[f64], _t: f64) -> Result<DenseMatrix> {
            Ok(DenseMatrix::zeros(1, 1))
        }
    }

    #[test]
    fn non_finite_field_names_the_step() {
        let s = NoiseSchedule::default();
        match euler_maruyama_sample(&Exploding, &s, 100, &[0.01], 1) {
            Err(Error::SamplingFailure { step, .. }) => assert!(step > 40 && step < 60),
            other => panic!("unexpected {other:?}"),
        }
        assert!(euler_maruyama_sample(&Exploding, &s, 0, &[0.01], 1).is_err());
        assert!(euler_maruyama_sample(&Exploding, &s, 10, &[0.0], 1).is_err());
    }

    #[test]
    fn loglik_of_standard_normal_at_origin() {
        let s = NoiseSchedule::default();
        let field = VpDensityField::new(&standard_normal(2), s).unwrap();
        let ll = pf_ode_loglik(&field, &s, &[0.0, 0.0], 1000).unwrap();
        assert!((ll + (2.0 * std::f64::consts::PI).ln()).abs() < 2e-2);
    }

    #[test]
    fn skew_augmentation_leaves_path_likelihood_unchanged() {
        let s = NoiseSchedule::default();
        let spec = DensitySpec::Gaussian(low_rank_gaussian(&[2.0, 0.5, 0.1], 3, 4).unwrap());
        let base = VpDensityField::new(&spec, s).unwrap();
        let h = DenseMatrix::from_rows(&[vec![0.0, 0.7, -0.2], vec![-0.7, 0.0, 1.3], vec![0.2, -1.3, 0.0]]).unwrap();
        let x = [0.4, -0.2, 0.9];
        let path = pf_ode_path(&base, &s, &x, 500).unwrap();
        let plain = loglik_along_path(&base, &s, &path, TraceMode::Full).unwrap();
        let aug = SkewAugmented::new(&base, h).unwrap();
        let skewed = loglik_along_path(&aug, &s, &path, TraceMode::Full).unwrap();
        let sym = loglik_along_path(&aug, &s, &path, TraceMode::Symmetric).unwrap();
        assert!((plain - skewed).abs() < 1e-8);
        assert!((skewed - sym).abs() < 1e-10);
    }

    #[test]
    fn off_manifold_points_are_less_likely() {
        let s = NoiseSchedule::default();
        let spec = DensitySpec::Gaussian(low_rank_gaussian(&[1.0, 1.0], 3, 0).unwrap());
        let field = VpDensityField::new(&spec, s).unwrap();
        let on = pf_ode_loglik(&field, &s, &[0.5, -0.5, 0.0], 1000).unwrap();
        let off = pf_ode_loglik(&field, &s, &[0.5, -0.5, 0.1], 1000).unwrap();
        assert!(on.is_finite() && off.is_finite());
        assert!(off < on);
        let exact_on = field.log_density(&[0.5, -0.5, 0.0], s.eps_t).unwrap();
        let exact_off = field.log_density(&[0.5, -0.5, 0.1], s.eps_t).unwrap();
        assert!(exact_off < exact_on);
    }

    #[test]
    fn step_halving_converges_at_first_order() {
        let s = NoiseSchedule::default();
        let x = [0.5, -0.5, 0.0];
        // well-conditioned data: halving moves the estimate by less than 2e-2
        let smooth = DensitySpec::Gaussian(low_rank_gaussian(&[1.5, 0.7, 0.3], 3, 2).unwrap());
        let field = VpDensityField::new(&smooth, s).unwrap();
        let a = pf_ode_loglik(&field, &s, &x, 1000).unwrap();
        let b = pf_ode_loglik(&field, &s, &x, 2000).unwrap();
        assert!((a - b).abs() < 2e-2, "{a} vs {b}");

        // rank-deficient data is stiff near eps_t; the error still halves
        // with the step and Richardson extrapolation recovers the exact value
        let flat = DensitySpec::Gaussian(low_rank_gaussian(&[1.0, 1.0], 3, 0).unwrap());
        let field = VpDensityField::new(&flat, s).unwrap();
        let ll: Vec<f64> = [1000, 2000, 4000]
            .iter()
            .map(|&n| pf_ode_loglik(&field, &s, &x, n).unwrap())
            .collect();
        let ratio = (ll[0] - ll[1]) / (ll[1] - ll[2]);
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
        let extrapolated = 2.0 * ll[2] - ll[1];
        let exact = field.log_density(&x, s.eps_t).unwrap();
        assert!((extrapolated - exact).abs() < 5e-3, "{extrapolated} vs {exact}");
    }
}
