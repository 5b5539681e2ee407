//! MLP score network trained by denoising score matching.
//!
//! The network sees `[c_in·x, σ(t), t, sin(½ ln σ), cos(½ ln σ)]` and its raw
//! output `F` is mapped to a score by an affine rule `g = a(t) x + b(t) F`:
//!
//! * `Direct`: `g = F`.
//! * `Denoiser`: `F` estimates the clean point `x_0` directly and
//!   `g = (m F - x) / σ²`. Near a data manifold `∇F` is close to a projection,
//!   so the network Jacobian stays O(1) even when `σ` is small.
//! * `Preconditioned`: `F` is the residual of `D = c_skip x + c_out F` with
//!   the variance-matching coefficients for data of standard deviation
//!   `data_std`, and `g = (m D - x) / σ²`.
//!
//! `t` below `eps_t` is evaluated at `eps_t`.

use crate::checkpoint;
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::field::{self, JacobianMethod, ScoreField};
use crate::linalg::DenseMatrix;
use crate::nn::{Activation, Mlp, OptimizerConfig, OptimizerState};
use crate::rng::{self, Rng};
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TIME_EMBEDDING_WIDTH: usize = 4;
pub const CHECKPOINT_KIND: &str = "score_mlp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Direct,
    #[default]
    Denoiser,
    Preconditioned,
}

/// Architecture and output rule of a score network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub parameterization: Parameterization,
    #[serde(default = "one")]
    pub data_std: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Softplus,
            parameterization: Parameterization::Denoiser,
            data_std: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return invalid("hidden widths must be positive");
        }
        if !(self.data_std > 0.0 && self.data_std.is_finite()) {
            return invalid("data_std must be positive");
        }
        Ok(())
    }
}

/// Per-time coefficients of the input scaling and output rule.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    sigma: f64,
    t: f64,
    c_in: f64,
    a: f64,
    b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpScoreNet {
    dim: usize,
    spec: ModelSpec,
    schedule: NoiseSchedule,
    mlp: Mlp,
}

impl MlpScoreNet {
    pub fn new(dim: usize, spec: ModelSpec, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        spec.validate()?;
        schedule.validate()?;
        let mut widths = vec![dim + TIME_EMBEDDING_WIDTH];
        widths.extend(&spec.hidden);
        widths.push(dim);
        let mlp = Mlp::new(widths, spec.activation, &mut rng::stream(seed, 0))?;
        Ok(Self {
            dim,
            spec,
            schedule,
            mlp,
        })
    }

    /// Same network with its output layer zeroed, so `F ≡ 0`.
    pub fn with_zero_output(mut self) -> Self {
        self.mlp.zero_output_layer();
        self
    }

    pub fn from_parts(dim: usize, spec: ModelSpec, schedule: NoiseSchedule, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        schedule.validate()?;
        let mut widths = vec![dim + TIME_EMBEDDING_WIDTH];
        widths.extend(&spec.hidden);
        widths.push(dim);
        let mlp = Mlp::from_params(widths, spec.activation, params)?;
        Ok(Self {
            dim,
            spec,
            schedule,
            mlp,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn widths(&self) -> &[usize] {
        self.mlp.widths()
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    fn coefficients(&self, t: f64) -> Coefficients {
        let t = self.schedule.clamp(t);
        let m = self.schedule.mean_coeff(t);
        let sigma = self.schedule.sigma(t);
        let sd = self.spec.data_std;
        let total = (m * m * sd * sd + sigma * sigma).sqrt();
        let c_in = 1.0 / total;
        let (a, b) = match self.spec.parameterization {
            Parameterization::Direct => (0.0, 1.0),
            Parameterization::Denoiser => {
                let s2 = sigma * sigma;
                (-1.0 / s2, m / s2)
            }
            Parameterization::Preconditioned => {
                let c_skip = m * sd * sd / (total * total);
                let c_out = sigma * sd / total;
                let s2 = sigma * sigma;
                ((m * c_skip - 1.0) / s2, m * c_out / s2)
            }
        };
        Coefficients { sigma, t, c_in, a, b }
    }

    fn write_input(&self, x: &[f64], c: &Coefficients, row: &mut [f64]) {
        for (r, xi) in row.iter_mut().zip(x) {
            *r = c.c_in * xi;
        }
        let half_log = 0.5 * c.sigma.ln();
        row[self.dim..].copy_from_slice(&[c.sigma, c.t, half_log.sin(), half_log.cos()]);
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return invalid(format!("expected a {}-vector, got length {}", self.dim, x.len()));
        }
        if !(0.0..=1.0).contains(&t) {
            return invalid(format!("time {t} outside [0, 1]"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite input");
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        let c = self.coefficients(t);
        let mut input = vec![0.0; self.mlp.input_width()];
        self.write_input(x, &c, &mut input);
        let f = self.mlp.forward(&input);
        Ok(x.iter().zip(f).map(|(xi, fi)| c.a * xi + c.b * fi).collect())
    }

    /// `∇_x g = a I + b c_in ∇F`, with `∇F` from one batched reverse sweep.
    pub fn exact_jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix> {
        self.check(x, t)?;
        let c = self.coefficients(t);
        let mut input = vec![0.0; self.mlp.input_width()];
        self.write_input(x, &c, &mut input);
        let jf = self.mlp.input_jacobian(&input);
        let d = self.dim;
        Ok(DenseMatrix::from_fn(d, d, |r, k| {
            let diag = if r == k { c.a } else { 0.0 };
            diag + c.b * c.c_in * jf[(r, k)]
        }))
    }

    pub fn jacobian(&self, x: &[f64], t: f64, method: JacobianMethod) -> Result<DenseMatrix> {
        field::jacobian(self, x, t, method)
    }

    /// Scores for a batch (`x` is `n × d`, one time per row) plus what the
    /// backward pass needs.
    fn batch_scores(&self, x: ArrayView2<'_, f64>, t: &[f64]) -> (Array2<f64>, Vec<Coefficients>, crate::nn::ForwardCache) {
        let n = x.nrows();
        let coeffs: Vec<Coefficients> = t.iter().map(|&ti| self.coefficients(ti)).collect();
        let mut input = Array2::zeros((n, self.mlp.input_width()));
        for (i, c) in coeffs.iter().enumerate() {
            let xi = x.row(i);
            let mut row = input.row_mut(i);
            self.write_input(xi.as_slice().expect("contiguous row"), c, row.as_slice_mut().expect("contiguous row"));
        }
        let cache = self.mlp.forward_batch(input.view());
        let mut g = cache.output.clone();
        for (i, c) in coeffs.iter().enumerate() {
            for k in 0..self.dim {
                g[(i, k)] = c.a * x[(i, k)] + c.b * g[(i, k)];
            }
        }
        (g, coeffs, cache)
    }
}

impl ScoreField for MlpScoreNet {
    fn dim(&self) -> usize {
        self.dim
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.forward(x, t)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Result<DenseMatrix> {
        self.exact_jacobian(x, t)
    }
}

/// Per-sample weight on `‖g + ε/σ‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `λ(σ) = σ²`, which equalizes the target magnitude across noise levels
    #[default]
    SigmaSquared,
    Unit,
}

impl Weighting {
    fn weight(&self, sigma: f64) -> f64 {
        match self {
            Weighting::SigmaSquared => sigma * sigma,
            Weighting::Unit => 1.0,
        }
    }
}

/// Clean points, times and noise for one DSM evaluation.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub x0: Array2<f64>,
    pub t: Vec<f64>,
    pub eps: Array2<f64>,
}

/// Distribution of training times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// `t ~ U(eps_t, 1)`
    #[default]
    Uniform,
    /// `ln σ(t)` uniform between `ln σ(eps_t)` and `ln σ(1)`
    LogSigma,
}

impl TimeSampling {
    pub fn draw(&self, schedule: &NoiseSchedule, rng: &mut Rng) -> f64 {
        match self {
            TimeSampling::Uniform => rng.random_range(schedule.eps_t..1.0),
            TimeSampling::LogSigma => {
                let lo = schedule.sigma(schedule.eps_t).ln();
                let hi = schedule.sigma(1.0).ln();
                let sigma = rng.random_range(lo..hi).exp();
                schedule.clamp(schedule.time_for_sigma(sigma))
            }
        }
    }
}

impl DsmBatch {
    /// Times `t ~ U(eps_t, 1)` and standard-normal noise for every row of `x0`.
    pub fn draw(x0: Array2<f64>, schedule: &NoiseSchedule, rng: &mut Rng) -> Self {
        Self::draw_with(x0, schedule, TimeSampling::Uniform, rng)
    }

    pub fn draw_with(x0: Array2<f64>, schedule: &NoiseSchedule, times: TimeSampling, rng: &mut Rng) -> Self {
        let n = x0.nrows();
        let d = x0.ncols();
        let t = (0..n).map(|_| times.draw(schedule, rng)).collect();
        let eps = Array2::from_shape_fn((n, d), |_| rng::normal(rng));
        Self { x0, t, eps }
    }
}

#[derive(Debug, Clone)]
pub struct DsmLoss {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Weighted DSM objective of already-computed scores:
/// `mean_i λ(σ_i) ‖g_i + ε_i/σ_i‖²`.
pub fn dsm_objective(scores: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>, sigmas: &[f64], weighting: Weighting) -> f64 {
    let n = scores.nrows() as f64;
    scores
        .rows()
        .into_iter()
        .zip(eps.rows())
        .zip(sigmas)
        .map(|((g, e), &s)| {
            let r: f64 = g.iter().zip(e.iter()).map(|(gi, ei)| (gi + ei / s).powi(2)).sum();
            weighting.weight(s) * r
        })
        .sum::<f64>()
        / n
}

/// DSM loss and its parameter gradient on an explicit batch.
pub fn dsm_loss_on(net: &MlpScoreNet, batch: &DsmBatch, weighting: Weighting) -> Result<DsmLoss> {
    let n = batch.x0.nrows();
    if n == 0 {
        return invalid("empty batch");
    }
    if batch.x0.ncols() != net.dim || batch.eps.dim() != batch.x0.dim() || batch.t.len() != n {
        return invalid("batch shapes do not match the network");
    }
    let schedule = net.schedule;
    let mut noisy = Array2::zeros(batch.x0.dim());
    for i in 0..n {
        let t = schedule.clamp(batch.t[i]);
        let (m, s) = (schedule.mean_coeff(t), schedule.sigma(t));
        for k in 0..net.dim {
            noisy[(i, k)] = m * batch.x0[(i, k)] + s * batch.eps[(i, k)];
        }
    }
    let (g, coeffs, cache) = net.batch_scores(noisy.view(), &batch.t);
    let sigmas: Vec<f64> = coeffs.iter().map(|c| c.sigma).collect();
    let loss = dsm_objective(g.view(), batch.eps.view(), &sigmas, weighting);
    let mut d_out = Array2::zeros(g.dim());
    for (i, c) in coeffs.iter().enumerate() {
        let scale = 2.0 * weighting.weight(c.sigma) * c.b / n as f64;
        for k in 0..net.dim {
            d_out[(i, k)] = scale * (g[(i, k)] + batch.eps[(i, k)] / c.sigma);
        }
    }
    let (gradient, _) = net.mlp.backward_batch(&cache, d_out.view());
    Ok(DsmLoss { loss, gradient })
}

/// DSM loss on clean points `x0` (`n × d`) with times and noise drawn from
/// `seed`.
pub fn dsm_loss(net: &MlpScoreNet, x0: &DenseMatrix, seed: u64, weighting: Weighting) -> Result<DsmLoss> {
    let x = Array2::from_shape_vec((x0.rows(), x0.cols()), x0.as_slice().to_vec()).expect("shape");
    let batch = DsmBatch::draw(x, &net.schedule, &mut rng::stream(seed, 0));
    dsm_loss_on(net, &batch, weighting)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub time_sampling: TimeSampling,
    /// cosine decay of the learning rate to zero over `steps`
    #[serde(default)]
    pub cosine_decay: bool,
    /// rescale the gradient when its Euclidean norm exceeds this value
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 2000,
            optimizer: OptimizerConfig::Sgd { learning_rate: 1e-3 },
            seed: 0,
            weighting: Weighting::SigmaSquared,
            time_sampling: TimeSampling::Uniform,
            cosine_decay: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        self.optimizer.validate()?;
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return invalid("grad_clip must be positive");
            }
        }
        Ok(())
    }

    fn lr_scale(&self, step: usize) -> f64 {
        if self.cosine_decay && self.steps > 0 {
            let p = (step as f64 / self.steps as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            1.0
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCheckpoint {
    pub net: MlpScoreNet,
    pub config: TrainConfig,
    pub optimizer_state: OptimizerState,
    pub loss_history: Vec<f64>,
}

impl ScoreCheckpoint {
    pub fn step(&self) -> usize {
        self.optimizer_state.step as usize
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, CHECKPOINT_KIND)
    }

    pub fn to_json(&self) -> Result<String> {
        checkpoint::to_json(CHECKPOINT_KIND, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        checkpoint::from_json(CHECKPOINT_KIND, text)
    }
}

/// Single-owner training loop. Step `k` draws its minibatch, times and noise
/// from stream `k` of the configured seed.
pub struct Trainer<'a> {
    data: &'a DenseMatrix,
    state: ScoreCheckpoint,
}

impl<'a> Trainer<'a> {
    pub fn new(net: MlpScoreNet, data: &'a DenseMatrix, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n_params = net.params().len();
        let optimizer_state = OptimizerState::new(&config.optimizer, n_params);
        Self::resume(
            ScoreCheckpoint {
                net,
                config,
                optimizer_state,
                loss_history: Vec::new(),
            },
            data,
        )
    }

    pub fn resume(state: ScoreCheckpoint, data: &'a DenseMatrix) -> Result<Self> {
        state.config.validate()?;
        if data.rows() == 0 {
            return invalid("training data is empty");
        }
        if data.cols() != state.net.dim {
            return invalid(format!("data has {} columns, network expects {}", data.cols(), state.net.dim));
        }
        Ok(Self { data, state })
    }

    pub fn step_index(&self) -> usize {
        self.state.step()
    }

    pub fn step(&mut self) -> Result<f64> {
        let k = self.state.step();
        let cfg = &self.state.config;
        let mut rng = rng::stream(cfg.seed, k as u64 + 1);
        let d = self.data.cols();
        let mut x0 = Array2::zeros((cfg.batch_size, d));
        for i in 0..cfg.batch_size {
            let r = rng.random_range(0..self.data.rows());
            for (dst, src) in x0.row_mut(i).iter_mut().zip(self.data.row(r)) {
                *dst = *src;
            }
        }
        let batch = DsmBatch::draw_with(x0, &self.state.net.schedule, cfg.time_sampling, &mut rng);
        let DsmLoss { loss, mut gradient } = dsm_loss_on(&self.state.net, &batch, cfg.weighting)?;
        if !loss.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingFailure {
                step: k,
                reason: format!("loss became {loss}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                gradient.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let lr_scale = cfg.lr_scale(k);
        let optimizer = cfg.optimizer;
        self.state
            .optimizer_state
            .update(&optimizer, self.state.net.params_mut(), &gradient, lr_scale);
        if self.state.net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingFailure {
                step: k,
                reason: "parameters became non-finite".into(),
            });
        }
        self.state.loss_history.push(loss);
        Ok(loss)
    }

    /// Trains until the configured step count is reached.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.state.config.steps)
    }

    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.state.step() < step {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> &ScoreCheckpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> ScoreCheckpoint {
        self.state
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: MlpScoreNet,
    pub loss_history: Vec<f64>,
}

pub fn train(net: MlpScoreNet, data: &DenseMatrix, config: &TrainConfig) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(net, data, config.clone())?;
    trainer.run()?;
    let state = trainer.into_checkpoint();
    Ok(TrainedModel {
        net: state.net,
        loss_history: state.loss_history,
    })
}

/// Mean of the first and last `window` entries of a loss history.
pub fn loss_endpoints(history: &[f64], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{rank3_gaussian, sample_density, DensitySpec, NoisyDensity};
    use crate::diffusion::VpDensityField;
    use crate::nn::max_relative_error;

    fn tiny(parameterization: Parameterization) -> MlpScoreNet {
        let spec = ModelSpec {
            hidden: vec![8],
            activation: Activation::Softplus,
            parameterization,
            data_std: 1.0,
        };
        MlpScoreNet::new(2, spec, NoiseSchedule::default(), 7).unwrap()
    }

    #[test]
    fn zero_output_layer() {
        let net = tiny(Parameterization::Direct).with_zero_output();
        assert_eq!(net.forward(&[0.3, -4.0], 0.2).unwrap(), vec![0.0, 0.0]);
        // with F = 0 the denoiser form is the score of N(0, σ²I)
        let net = tiny(Parameterization::Denoiser).with_zero_output();
        let g = net.forward(&[1.0, -2.0], 0.5).unwrap();
        let sig = net.schedule.sigma(0.5);
        assert!((g[1] - 2.0 / (sig * sig)).abs() < 1e-12);
        // the preconditioned form with F = 0 is the linear score of its skip path
        let net = tiny(Parameterization::Preconditioned).with_zero_output();
        let s = net.schedule;
        let g = net.forward(&[1.0, 0.0], 0.5).unwrap();
        let (m, sig) = (s.mean_coeff(0.5), s.sigma(0.5));
        assert!((g[0] - (m * m / (m * m + sig * sig) - 1.0) / (sig * sig)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_time_and_shape() {
        let net = tiny(Parameterization::Direct);
        assert!(net.forward(&[0.0, 0.0], 1.5).is_err());
        assert!(net.forward(&[0.0, 0.0], -0.1).is_err());
        assert!(net.forward(&[0.0], 0.5).is_err());
        assert!(net.forward(&[0.0, 0.0], 0.0).is_ok());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny(Parameterization::Denoiser);
        assert_eq!(net.forward(&[0.1, 0.2], 0.4).unwrap(), net.forward(&[0.1, 0.2], 0.4).unwrap());
    }

    #[test]
    fn teacher_forced_scores_have_zero_loss() {
        let eps = Array2::from_shape_vec((3, 2), vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.0]).unwrap();
        let sigmas = [0.1, 0.5, 0.9];
        let g = Array2::from_shape_fn((3, 2), |(i, k)| -eps[(i, k)] / sigmas[i]);
        for w in [Weighting::Unit, Weighting::SigmaSquared] {
            assert_eq!(dsm_objective(g.view(), eps.view(), &sigmas, w), 0.0);
        }
    }

    #[test]
    fn zero_net_loss_is_scaled_noise_energy() {
        let net = tiny(Parameterization::Direct).with_zero_output();
        let x0 = Array2::from_shape_fn((5, 2), |(i, k)| (i + k) as f64 * 0.1);
        let batch = DsmBatch::draw(x0, &net.schedule, &mut rng::stream(3, 0));
        let loss = dsm_loss_on(&net, &batch, Weighting::Unit).unwrap().loss;
        let mut want = 0.0;
        for i in 0..5 {
            let s = net.schedule.sigma(batch.t[i]);
            want += (batch.eps[(i, 0)].powi(2) + batch.eps[(i, 1)].powi(2)) / (s * s);
        }
        assert!((loss - want / 5.0).abs() < 1e-12 * want);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for p in [Parameterization::Direct, Parameterization::Denoiser, Parameterization::Preconditioned] {
            let net = tiny(p);
            let x0 = Array2::from_shape_fn((4, 2), |(i, k)| ((i * 2 + k) as f64 - 3.0) * 0.4);
            let batch = DsmBatch::draw(x0, &net.schedule, &mut rng::stream(11, 0));
            for w in [Weighting::Unit, Weighting::SigmaSquared] {
                let analytic = dsm_loss_on(&net, &batch, w).unwrap().gradient;
                let h = 1e-6;
                let numeric: Vec<f64> = (0..analytic.len())
                    .map(|k| {
                        let mut plus = net.clone();
                        plus.params_mut()[k] += h;
                        let mut minus = net.clone();
                        minus.params_mut()[k] -= h;
                        let lp = dsm_loss_on(&plus, &batch, w).unwrap().loss;
                        let lm = dsm_loss_on(&minus, &batch, w).unwrap().loss;
                        (lp - lm) / (2.0 * h)
                    })
                    .collect();
                let err = max_relative_error(&analytic, &numeric, 1e-3);
                assert!(err < 1e-4, "{p:?} {w:?}: {err}");
            }
        }
    }

    #[test]
    fn exact_and_finite_difference_jacobians_agree() {
        let spec = ModelSpec {
            hidden: vec![32, 32],
            ..ModelSpec::default()
        };
        let net = MlpScoreNet::new(5, spec, NoiseSchedule::default(), 1).unwrap();
        let x = rng::normal_vec(&mut rng::stream(2, 0), 5);
        for t in [0.01, 0.3, 0.9] {
            let exact = net.jacobian(&x, t, JacobianMethod::Exact).unwrap();
            let fd = net.jacobian(&x, t, JacobianMethod::FiniteDifference(1e-4)).unwrap();
            let scale = exact.max_abs().max(1.0);
            assert!(exact.max_abs_diff(&fd) < 1e-5 * scale, "t={t}");
        }
    }

    #[test]
    fn analytic_field_passes_through_generic_jacobian() {
        let g = crate::densities::GaussianParams::diagonal(vec![0.0; 3], &[4.0, 1.0, 0.0]).unwrap();
        let field = VpDensityField::new(&DensitySpec::Gaussian(g), NoiseSchedule::default()).unwrap();
        let s = NoiseSchedule::default();
        let (m, sig) = (s.mean_coeff(0.3), s.sigma(0.3));
        let j = field::jacobian(&field, &[0.2, 0.1, -0.4], 0.3, JacobianMethod::Exact).unwrap();
        for (i, lam) in [4.0, 1.0, 0.0].iter().enumerate() {
            assert!((j[(i, i)] + 1.0 / (m * m * lam + sig * sig)).abs() < 1e-10);
        }
    }

    #[test]
    fn log_sigma_sampling_stays_in_range() {
        let s = NoiseSchedule::default();
        let mut rng = rng::stream(1, 0);
        let ts: Vec<f64> = (0..2000).map(|_| TimeSampling::LogSigma.draw(&s, &mut rng)).collect();
        assert!(ts.iter().all(|&t| (s.eps_t..=1.0).contains(&t)));
        // half of the log-σ range lies below σ(t) ≈ 0.15
        let mid = s.time_for_sigma((0.5 * (s.sigma(s.eps_t).ln() + s.sigma(1.0).ln())).exp());
        let below = ts.iter().filter(|&&t| t < mid).count() as f64 / ts.len() as f64;
        assert!((below - 0.5).abs() < 0.05);
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let net = tiny(Parameterization::Denoiser);
        let data = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &data, &cfg).unwrap();
        assert_eq!(out.net, net);
        assert!(out.loss_history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = DenseMatrix::from_fn(16, 2, |r, c| ((r * 3 + c) % 5) as f64 * 0.3 - 0.6);
        let cfg = TrainConfig {
            batch_size: 8,
            steps: 30,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(tiny(Parameterization::Denoiser), &data, &cfg).unwrap();
        let b = train(tiny(Parameterization::Denoiser), &data, &cfg).unwrap();
        assert_eq!(a.net, b.net);

        let mut first = Trainer::new(tiny(Parameterization::Denoiser), &data, cfg.clone()).unwrap();
        first.run_until(13).unwrap();
        let json = first.checkpoint().to_json().unwrap();
        let restored = ScoreCheckpoint::from_json(&json).unwrap();
        assert_eq!(&restored, first.checkpoint());
        let mut second = Trainer::resume(restored, &data).unwrap();
        second.run().unwrap();
        assert_eq!(second.checkpoint().net, a.net);
        assert_eq!(second.checkpoint().loss_history, a.loss_history);
    }

    #[test]
    fn divergence_names_the_step() {
        let data = DenseMatrix::from_fn(8, 2, |r, c| (r + c) as f64);
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 50,
            optimizer: OptimizerConfig::Sgd { learning_rate: 1e300 },
            seed: 0,
            weighting: Weighting::Unit,
            ..TrainConfig::default()
        };
        match train(tiny(Parameterization::Direct), &data, &cfg) {
            Err(Error::TrainingFailure { step, .. }) => assert!(step < 50),
            other => panic!("expected a training failure, got {other:?}"),
        }
    }

    #[test]
    fn learns_a_low_rank_gaussian_score() {
        let g = rank3_gaussian(10, 5).unwrap();
        let spec = DensitySpec::Gaussian(g);
        let data = sample_density(&NoisyDensity::new(&spec, 0.0).unwrap(), 4096, 1).unwrap();
        let sched = NoiseSchedule::default();
        let model = ModelSpec {
            hidden: vec![64, 64],
            ..ModelSpec::default()
        };
        let net = MlpScoreNet::new(10, model, sched, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 128,
            steps: 1500,
            optimizer: OptimizerConfig::adam(2e-3),
            seed: 3,
            cosine_decay: true,
            ..TrainConfig::default()
        };
        let out = train(net, &data, &cfg).unwrap();
        let (first, last) = loss_endpoints(&out.loss_history, 100).unwrap();
        assert!(last < first);

        let oracle = VpDensityField::new(&spec, sched).unwrap();
        let t = 0.3;
        let held_out = NoisyDensity::new(&spec, 0.0).unwrap();
        let x0 = sample_density(&held_out, 200, 99).unwrap();
        let mut rng = rng::stream(100, 0);
        let mut cos_sum = 0.0;
        for r in 0..x0.rows() {
            let x = crate::diffusion::forward_perturb(&sched, x0.row(r), t, &mut rng);
            let a = out.net.score(&x, t).unwrap();
            let b = oracle.score(&x, t).unwrap();
            cos_sum += crate::linalg::dot(&a, &b) / (crate::linalg::norm(&a) * crate::linalg::norm(&b));
        }
        let mean_cos = cos_sum / x0.rows() as f64;
        assert!(mean_cos > 0.95, "mean cosine {mean_cos}");
    }
}
