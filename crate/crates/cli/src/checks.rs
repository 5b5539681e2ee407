//! Oracle checks run by `selftest`.

use scoregeom::densities::{low_rank_gaussian, DensitySpec, GaussianParams, NoisyDensity, RingParams};
use scoregeom::diffusion::{
    loglik_along_path, pf_ode_path, NoiseSchedule, ReverseSampler, TraceMode, VpDensityField, SNAPSHOT_TIMES,
};
use scoregeom::field::{jacobian, JacobianMethod, ScoreField, SkewAugmented};
use scoregeom::geometry::{
    denoiser_jacobian, local_dimensionality, overlap_curves, spectral_analysis, subspace_overlap,
    trace_equivalence_residual, DEFAULT_KAPPA,
};
use scoregeom::linalg::{
    orthonormality_defect, random_matrix, random_orthogonal, svd, sym_eig, sym_skew_split, DenseMatrix,
};
use scoregeom::nn::max_relative_error;
use scoregeom::rng::{self, Rng};
use scoregeom::scoremodel::{dsm_loss_on, DsmBatch, MlpScoreNet, ModelSpec, Parameterization, ScoreCheckpoint, Weighting};
use scoregeom::vae::{VaeModel, VaeSpec};
use std::time::Instant;

/// Faults that can be injected to confirm the matching check notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// adds a multiple of the identity to the skew part before the trace comparison
    SkewTrace,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = Result<String, String>;

struct Check {
    name: &'static str,
    run: fn(Option<Fault>) -> Outcome,
}

const CHECKS: &[Check] = &[
    Check { name: "svd_reconstruction", run: svd_reconstruction },
    Check { name: "symmetric_eigendecomposition", run: symmetric_eigendecomposition },
    Check { name: "trace_equivalence", run: trace_equivalence },
    Check { name: "pf_ode_skew_invariance", run: pf_ode_skew_invariance },
    Check { name: "gaussian_oracle_spectrum", run: gaussian_oracle_spectrum },
    Check { name: "noise_floor_bound", run: noise_floor_bound },
    Check { name: "mixture_hessian", run: mixture_hessian },
    Check { name: "dimensionality_rule", run: dimensionality_rule },
    Check { name: "overlap_metric", run: overlap_metric },
    Check { name: "denoiser_jacobian_psd", run: denoiser_jacobian_psd },
    Check { name: "noise_schedule_table", run: noise_schedule_table },
    Check { name: "score_net_gradients", run: score_net_gradients },
    Check { name: "vae_gradients", run: vae_gradients },
    Check { name: "sampler_determinism", run: sampler_determinism },
    Check { name: "checkpoint_round_trip", run: checkpoint_round_trip },
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

pub fn run_all(fault: Option<Fault>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|c| {
            let start = Instant::now();
            let outcome = std::panic::catch_unwind(|| (c.run)(fault)).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name: c.name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<width$}  {}  {:>7.2}s  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    out
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T>(r: scoregeom::Result<T>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

fn svd_reconstruction(_: Option<Fault>) -> Outcome {
    let mut rng = rng::stream(101, 0);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let d = 1 + k % 24;
        let m = random_matrix(d, d, &mut rng);
        let s = e(svd(&m))?;
        let rec = s.reconstruct().max_abs_diff(&m) / m.max_abs().max(1.0);
        let orth = orthonormality_defect(&s.left_vectors).max(orthonormality_defect(&s.right_vectors));
        require(s.singular_values.windows(2).all(|w| w[0] <= w[1]), || format!("d={d}: not ascending"))?;
        require(s.singular_values.iter().all(|&v| v >= 0.0), || format!("d={d}: negative singular value"))?;
        worst = worst.max(rec).max(orth);
    }
    require(worst < 1e-10, || format!("max residual {worst:.2e}"))?;
    Ok(format!("200 matrices, max residual {worst:.1e}"))
}

fn symmetric_eigendecomposition(_: Option<Fault>) -> Outcome {
    let mut rng = rng::stream(102, 0);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let d = 1 + k % 20;
        let a = random_matrix(d, d, &mut rng);
        let s = a.add(&a.transpose()).scale(0.5);
        let r = e(sym_eig(&s))?;
        let v = DenseMatrix::from_columns(&r.eigenvectors).map_err(|x| x.to_string())?;
        let rec = v.matmul(&DenseMatrix::from_diag(&r.eigenvalues)).matmul(&v.transpose());
        worst = worst.max(rec.max_abs_diff(&s)).max(orthonormality_defect(&r.eigenvectors));
    }
    require(worst < 1e-10, || format!("max residual {worst:.2e}"))?;
    Ok(format!("100 matrices, max residual {worst:.1e}"))
}

fn trace_equivalence(fault: Option<Fault>) -> Outcome {
    let mut rng = rng::stream(103, 0);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let d = 1 + k % 64;
        let j = random_matrix(d, d, &mut rng);
        let residual = match fault {
            Some(Fault::SkewTrace) => {
                let mut skew = e(sym_skew_split(&j))?.skew_part;
                for i in 0..d {
                    skew[(i, i)] += 1e-6;
                }
                (j.trace() - j.sub(&skew).trace()).abs()
            }
            None => e(trace_equivalence_residual(&j))?,
        };
        worst = worst.max(residual);
    }
    require(worst < 1e-10, || format!("max |tr J - tr sym J| = {worst:.2e}"))?;
    Ok(format!("1000 matrices up to d=64, max residual {worst:.1e}"))
}

fn pf_ode_skew_invariance(_: Option<Fault>) -> Outcome {
    let s = NoiseSchedule::default();
    let spec = DensitySpec::Gaussian(e(low_rank_gaussian(&[2.0, 0.5, 0.1], 3, 4))?);
    let base = e(VpDensityField::new(&spec, s))?;
    let h = e(DenseMatrix::from_rows(&[vec![0.0, 0.7, -0.2], vec![-0.7, 0.0, 1.3], vec![0.2, -1.3, 0.0]]))?;
    let path = e(pf_ode_path(&base, &s, &[0.4, -0.2, 0.9], 500))?;
    let plain = e(loglik_along_path(&base, &s, &path, TraceMode::Full))?;
    let aug = e(SkewAugmented::new(&base, h))?;
    let skewed = e(loglik_along_path(&aug, &s, &path, TraceMode::Full))?;
    let diff = (plain - skewed).abs();
    require(diff < 1e-8, || format!("log-likelihood moved by {diff:.2e}"))?;
    Ok(format!("|delta log p| = {diff:.1e}"))
}

fn gaussian_oracle_spectrum(_: Option<Fault>) -> Outcome {
    let sched = NoiseSchedule::default();
    let lam = [4.0, 1.0, 0.0];
    let mut worst_inv: f64 = 0.0;
    let mut worst_align: f64 = 0.0;
    for d in [3usize, 10] {
        let mut variances = vec![0.0; d];
        variances[..3].copy_from_slice(&lam);
        let g = e(GaussianParams::diagonal(vec![0.0; d], &variances))?;
        for &t in &SNAPSHOT_TIMES {
            let sigma = sched.sigma(t);
            let field = e(NoisyDensity::new(&DensitySpec::Gaussian(g.clone()), sigma))?;
            let x: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.3).collect();
            let a = e(spectral_analysis(&field, &x, t, sigma, DEFAULT_KAPPA))?;
            let mut want: Vec<f64> = variances.iter().map(|l| l + sigma * sigma).collect();
            want.sort_by(|a, b| b.total_cmp(a));
            for (got, want) in a.inverse_singular_values().iter().zip(&want) {
                worst_inv = worst_inv.max((got - want).abs());
            }
            for c in &a.alignment {
                worst_align = worst_align.max((c.abs() - 1.0).abs());
            }
        }
    }
    require(worst_inv < 1e-10, || format!("inverse singular values off by {worst_inv:.2e}"))?;
    require(worst_align < 1e-8, || format!("alignment off by {worst_align:.2e}"))?;
    Ok(format!("max error {worst_inv:.1e}, alignment error {worst_align:.1e}"))
}

fn noise_floor_bound(_: Option<Fault>) -> Outcome {
    let sched = NoiseSchedule::default();
    let spec = DensitySpec::Gaussian(e(low_rank_gaussian(&[4.0, 1.0, 0.5], 8, 3))?);
    let field = e(VpDensityField::new(&spec, sched))?;
    let mut rng = rng::stream(104, 0);
    let mut checked = 0;
    for &t in &SNAPSHOT_TIMES {
        let sigma = sched.sigma(t);
        for _ in 0..8 {
            let x = rng::normal_vec(&mut rng, 8);
            let a = e(spectral_analysis(&field, &x, t, sigma, DEFAULT_KAPPA))?;
            for inv in a.inverse_singular_values() {
                require(inv >= sigma * sigma * (1.0 - 1e-12), || {
                    format!("t={t}: inverse singular value {inv:.3e} below sigma^2 {:.3e}", sigma * sigma)
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} inverse singular values above the noise floor"))
}

fn mixture_hessian(_: Option<Fault>) -> Outcome {
    let ring = RingParams {
        n_components: 12,
        radius: 2.0,
        thickness: 0.05,
        dim: 3,
        sector_fibres: vec![vec![0.1]],
    };
    let field = e(VpDensityField::new(&DensitySpec::Ring(ring), NoiseSchedule::default()))?;
    let mut rng = rng::stream(105, 0);
    let mut worst_sym: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for &t in &[0.05, 0.3] {
        for _ in 0..10 {
            let x: Vec<f64> = rng::normal_vec(&mut rng, 3).iter().map(|v| 1.5 * v).collect();
            let exact = e(jacobian(&field, &x, t, JacobianMethod::Exact))?;
            let fd = e(jacobian(&field, &x, t, JacobianMethod::FiniteDifference(1e-5)))?;
            worst_sym = worst_sym.max(exact.asymmetry());
            worst_fd = worst_fd.max(exact.max_abs_diff(&fd) / exact.max_abs().max(1.0));
        }
    }
    require(worst_sym < 1e-10, || format!("asymmetry {worst_sym:.2e}"))?;
    require(worst_fd < 1e-5, || format!("finite-difference mismatch {worst_fd:.2e}"))?;
    Ok(format!("asymmetry {worst_sym:.1e}, fd mismatch {worst_fd:.1e}"))
}

fn dimensionality_rule(_: Option<Fault>) -> Outcome {
    let s: Vec<f64> = [4.01, 1.01, 0.01].iter().map(|v| 1.0 / v).collect();
    let r = local_dimensionality(&s, 0.1, DEFAULT_KAPPA);
    require(r == 2, || format!("worked example gave {r}"))?;

    let sched = NoiseSchedule::default();
    let spec = DensitySpec::Gaussian(e(low_rank_gaussian(&[4.0, 1.0, 0.5], 10, 6))?);
    let field = e(VpDensityField::new(&spec, sched))?;
    let t = SNAPSHOT_TIMES[0];
    let sigma = sched.sigma(t);
    let mut rng = rng::stream(106, 0);
    for _ in 0..32 {
        let x = rng::normal_vec(&mut rng, 10);
        let a = e(spectral_analysis(&field, &x, t, sigma, DEFAULT_KAPPA))?;
        require(a.dim_estimate == 3, || format!("rank-3 fixture gave {}", a.dim_estimate))?;
    }
    Ok("worked example = 2, rank-3 fixture = 3 at the smallest sigma".into())
}

fn overlap_metric(_: Option<Fault>) -> Outcome {
    let sched = NoiseSchedule::default();
    let ring = RingParams {
        n_components: 16,
        radius: 2.0,
        thickness: 0.05,
        dim: 4,
        sector_fibres: vec![vec![0.2, 0.02]],
    };
    let field = e(VpDensityField::new(&DensitySpec::Ring(ring), sched))?;
    let mut rng = rng::stream(107, 0);
    let mut worst_uv: f64 = 0.0;
    for &t in &SNAPSHOT_TIMES {
        let x: Vec<f64> = rng::normal_vec(&mut rng, 4).iter().map(|v| 1.5 * v).collect();
        let a = e(spectral_analysis(&field, &x, t, sched.sigma(t), DEFAULT_KAPPA))?;
        let curves = e(overlap_curves(&a, 4))?;
        for v in &curves.uv.values {
            worst_uv = worst_uv.max((v - 1.0).abs());
        }
    }
    require(worst_uv < 1e-8, || format!("conservative field overlap off by {worst_uv:.2e}"))?;

    let c = std::f64::consts::FRAC_1_SQRT_2;
    let phi = e(subspace_overlap(&[vec![1.0, 0.0]], &[vec![c, c]]))?;
    require((phi - 0.5).abs() < 1e-12, || format!("45 degree overlap = {phi}"))?;

    let mut worst_sym: f64 = 0.0;
    for k in 0..50 {
        let d = 2 + k % 8;
        let n = 1 + k % d;
        let qa = random_orthogonal(d, &mut rng).columns();
        let qb = random_orthogonal(d, &mut rng).columns();
        let ab = e(subspace_overlap(&qa[..n], &qb[..n]))?;
        let ba = e(subspace_overlap(&qb[..n], &qa[..n]))?;
        worst_sym = worst_sym.max((ab - ba).abs());
    }
    require(worst_sym < 1e-10, || format!("asymmetry {worst_sym:.2e}"))?;
    Ok(format!("uv error {worst_uv:.1e}, 45 degree = {phi:.3}, asymmetry {worst_sym:.1e}"))
}

fn denoiser_jacobian_psd(_: Option<Fault>) -> Outcome {
    let g = e(low_rank_gaussian(&[4.0, 1.0], 5, 8))?;
    let x = [0.3, -0.1, 0.2, 0.0, 0.5];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for sigma in [0.01, 0.05, 0.1, 0.5, 1.0, 3.0] {
        let field = e(NoisyDensity::new(&DensitySpec::Gaussian(g.clone()), sigma))?;
        let j = field.jacobian(&x, 0.0).map_err(|err| err.to_string())?;
        let dj = e(denoiser_jacobian(&j, sigma))?;
        lo = lo.min(dj.sym_eig_range.0);
        hi = hi.max(dj.sym_eig_range.1);
    }
    require(lo >= -1e-10 && hi <= 1.0 + 1e-10, || format!("eigenvalues in [{lo:.3e}, {hi:.3e}]"))?;
    let any = random_matrix(5, 5, &mut rng::stream(108, 0));
    let at_zero = e(denoiser_jacobian(&any, 0.0))?.matrix;
    require(at_zero == DenseMatrix::identity(5), || "sigma = 0 is not the identity".into())?;
    Ok(format!("eigenvalues in [{lo:.3}, {hi:.3}], sigma = 0 gives I"))
}

fn noise_schedule_table(_: Option<Fault>) -> Outcome {
    let s = NoiseSchedule::default();
    for (t, want) in [(0.01, 0.039), (0.03, 0.10), (0.15, 0.46), (0.3, 0.77)] {
        let got = s.sigma(t);
        require((got - want).abs() <= 0.05, || format!("sigma({t}) = {got:.3}, table {want}"))?;
    }
    Ok(format!("sigma(0.05) = {:.3} (table lists 0.15, not asserted)", s.sigma(0.05)))
}

fn score_net_gradients(_: Option<Fault>) -> Outcome {
    let mut worst_grad: f64 = 0.0;
    let mut worst_jac: f64 = 0.0;
    for p in [Parameterization::Direct, Parameterization::Denoiser, Parameterization::Preconditioned] {
        let spec = ModelSpec {
            hidden: vec![6, 5],
            parameterization: p,
            ..ModelSpec::default()
        };
        let net = e(MlpScoreNet::new(3, spec, NoiseSchedule::default(), 9))?;
        let mut rng: Rng = rng::stream(109, 0);
        let x0 = ndarray_rows(4, 3, &mut rng);
        let batch = DsmBatch::draw(x0, net.schedule(), &mut rng);
        for w in [Weighting::SigmaSquared, Weighting::Unit] {
            let analytic = e(dsm_loss_on(&net, &batch, w))?.gradient;
            let h = 1e-6;
            let mut numeric = Vec::with_capacity(analytic.len());
            for k in 0..analytic.len() {
                let mut plus = net.clone();
                plus.params_mut()[k] += h;
                let mut minus = net.clone();
                minus.params_mut()[k] -= h;
                let lp = e(dsm_loss_on(&plus, &batch, w))?.loss;
                let lm = e(dsm_loss_on(&minus, &batch, w))?.loss;
                numeric.push((lp - lm) / (2.0 * h));
            }
            worst_grad = worst_grad.max(max_relative_error(&analytic, &numeric, 1e-3));
        }
        let x = rng::normal_vec(&mut rng, 3);
        for t in [0.01, 0.3, 0.9] {
            let exact = e(net.jacobian(&x, t, JacobianMethod::Exact))?;
            let fd = e(net.jacobian(&x, t, JacobianMethod::FiniteDifference(1e-4)))?;
            worst_jac = worst_jac.max(exact.max_abs_diff(&fd) / exact.max_abs().max(1.0));
        }
    }
    require(worst_grad < 1e-4, || format!("gradient relative error {worst_grad:.2e}"))?;
    require(worst_jac < 1e-5, || format!("Jacobian mismatch {worst_jac:.2e}"))?;
    Ok(format!("gradient error {worst_grad:.1e}, Jacobian error {worst_jac:.1e}"))
}

fn vae_gradients(_: Option<Fault>) -> Outcome {
    let spec = VaeSpec {
        latent_dim: 2,
        hidden: vec![5],
        ..VaeSpec::default()
    };
    let mut m = e(VaeModel::new(3, &spec, 3))?;
    let mut rng = rng::stream(110, 0);
    let mut p = m.flat_params();
    p.iter_mut().for_each(|v| *v += 0.3 * rng::normal(&mut rng));
    e(m.set_flat_params(&p))?;
    let x = ndarray_rows(4, 3, &mut rng);
    let eps = ndarray_rows(4, 2, &mut rng);
    let analytic = e(m.elbo_with_noise(x.view(), eps.view()))?.gradient;
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let eval = |delta: f64| -> Result<f64, String> {
            let mut q = p.clone();
            q[k] += delta;
            let mut mm = m.clone();
            e(mm.set_flat_params(&q))?;
            Ok(-e(mm.elbo_with_noise(x.view(), eps.view()))?.elbo)
        };
        numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    let err = max_relative_error(&analytic, &numeric, 1e-3);
    require(err < 1e-4, || format!("relative error {err:.2e}"))?;
    Ok(format!("{} parameters, relative error {err:.1e}", p.len()))
}

fn sampler_determinism(_: Option<Fault>) -> Outcome {
    let sched = NoiseSchedule::default();
    let spec = DensitySpec::Gaussian(e(low_rank_gaussian(&[4.0, 1.0, 0.5], 4, 1))?);
    let field = e(VpDensityField::new(&spec, sched))?;
    let sampler = ReverseSampler::new(sched, 200);
    let a = e(sampler.sample(&field, &SNAPSHOT_TIMES, 42))?;
    let b = e(sampler.sample(&field, &SNAPSHOT_TIMES, 42))?;
    let c = e(sampler.sample(&field, &SNAPSHOT_TIMES, 43))?;
    require(a == b, || "same seed gave different paths".into())?;
    require(a != c, || "different seeds gave identical paths".into())?;
    require(a.snapshots.len() == SNAPSHOT_TIMES.len(), || "wrong snapshot count".into())?;
    Ok("same seed reproduces the path bit-for-bit".into())
}

fn checkpoint_round_trip(_: Option<Fault>) -> Outcome {
    let spec = ModelSpec {
        hidden: vec![8],
        ..ModelSpec::default()
    };
    let net = e(MlpScoreNet::new(3, spec, NoiseSchedule::default(), 4))?;
    let data = DenseMatrix::from_fn(16, 3, |r, c| ((r * 3 + c) as f64 * 0.7).sin());
    let config = scoregeom::scoremodel::TrainConfig {
        steps: 5,
        batch_size: 4,
        ..Default::default()
    };
    let mut trainer = e(scoregeom::scoremodel::Trainer::new(net, &data, config))?;
    e(trainer.run_until(2))?;
    let text = e(trainer.checkpoint().to_json())?;
    let back = e(ScoreCheckpoint::from_json(&text))?;
    require(&back == trainer.checkpoint(), || "checkpoint changed on round trip".into())?;
    let mut resumed = e(scoregeom::scoremodel::Trainer::resume(back, &data))?;
    e(resumed.run())?;
    e(trainer.run())?;
    require(resumed.checkpoint() == trainer.checkpoint(), || "resumed run diverged".into())?;
    Ok("JSON round trip and resume are bit-exact".into())
}

fn ndarray_rows(rows: usize, cols: usize, rng: &mut Rng) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((rows, cols), |_| rng::normal(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_names_are_unique() {
        let mut names = check_names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }

    #[test]
    fn table_counts_failures() {
        let rs = vec![
            CheckResult { name: "a", passed: true, detail: "ok".into(), seconds: 0.0 },
            CheckResult { name: "bb", passed: false, detail: "bad".into(), seconds: 0.0 },
        ];
        let t = format_table(&rs);
        assert!(t.contains("a   PASS"));
        assert!(t.contains("bb  FAIL"));
        assert!(t.ends_with("2 checks, 1 failed\n"));
    }
}
