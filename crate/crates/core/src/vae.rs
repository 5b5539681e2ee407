//! Gaussian VAE used as a baseline dimensionality estimator.
//!
//! Encoder `x ↦ (μ, log v)` over `L` latents, decoder `z ↦ x̂`, observation
//! model `N(x̂, γ I)` with a free scalar `γ = exp(log_obs_var)`. A latent
//! coordinate counts as used at `x` when its posterior variance is below a
//! threshold (0.5 by default).

use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::{Activation, Mlp, OptimizerConfig, OptimizerState};
use crate::rng::{self, Rng};
use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_LATENT_DIM: usize = 16;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const CHECKPOINT_KIND: &str = "vae";

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeSpec {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            hidden: vec![64, 64],
            activation: Activation::Softplus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    data_dim: usize,
    latent_dim: usize,
    encoder: Mlp,
    decoder: Mlp,
    log_obs_var: f64,
}

/// Per-term breakdown of the negative ELBO, averaged over a batch.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    /// `E[log p(x|z)] - KL`, averaged per point
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// gradient of `-elbo` w.r.t. the flat parameter vector
    pub gradient: Vec<f64>,
}

impl VaeModel {
    pub fn new(data_dim: usize, spec: &VaeSpec, seed: u64) -> Result<Self> {
        if data_dim == 0 || spec.latent_dim == 0 {
            return invalid("data and latent dimensions must be positive");
        }
        let mut rng = rng::stream(seed, 0);
        let mut enc_w = vec![data_dim];
        enc_w.extend(&spec.hidden);
        enc_w.push(2 * spec.latent_dim);
        let mut dec_w = vec![spec.latent_dim];
        dec_w.extend(&spec.hidden);
        dec_w.push(data_dim);
        let mut encoder = Mlp::new(enc_w, spec.activation, &mut rng)?;
        encoder.zero_output_layer();
        let decoder = Mlp::new(dec_w, spec.activation, &mut rng)?;
        Ok(Self {
            data_dim,
            latent_dim: spec.latent_dim,
            encoder,
            decoder,
            log_obs_var: 0.0,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_var(&self) -> f64 {
        self.log_obs_var.exp()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn n_params(&self) -> usize {
        self.encoder.params().len() + self.decoder.params().len() + 1
    }

    /// Encoder parameters, then decoder parameters, then `log γ`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.encoder.params().to_vec();
        p.extend_from_slice(self.decoder.params());
        p.push(self.log_obs_var);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return invalid("parameter vector has the wrong length");
        }
        if p.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite parameter");
        }
        let ne = self.encoder.params().len();
        let nd = self.decoder.params().len();
        self.encoder.params_mut().copy_from_slice(&p[..ne]);
        self.decoder.params_mut().copy_from_slice(&p[ne..ne + nd]);
        self.log_obs_var = p[ne + nd];
        Ok(())
    }

    /// Posterior mean and variance at `x`.
    pub fn posterior(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.data_dim {
            return invalid(format!("expected a {}-vector", self.data_dim));
        }
        let out = self.encoder.forward(x);
        let l = self.latent_dim;
        Ok((out[..l].to_vec(), out[l..].iter().map(|v| v.exp()).collect()))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return invalid(format!("expected a {}-vector", self.latent_dim));
        }
        Ok(self.decoder.forward(z))
    }

    /// Single-sample reparameterized ELBO on a batch with noise `eps`
    /// (`n × L`), plus the gradient of its negative mean.
    pub fn elbo_with_noise(&self, x: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>) -> Result<ElboTerms> {
        let n = x.nrows();
        let (d, l) = (self.data_dim, self.latent_dim);
        if n == 0 {
            return invalid("empty batch");
        }
        if x.ncols() != d || eps.dim() != (n, l) {
            return invalid("batch shapes do not match the model");
        }
        let enc = self.encoder.forward_batch(x);
        let mu = enc.output.slice(s![.., ..l]).to_owned();
        let logv = enc.output.slice(s![.., l..]).to_owned();
        let std = logv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * &eps);
        let dec = self.decoder.forward_batch(z.view());
        let resid = &x - &dec.output;
        let gamma = self.obs_var();
        let sq: f64 = resid.iter().map(|r| r * r).sum();
        let nf = n as f64;
        let reconstruction = -0.5 * (d as f64 * (LN_2PI + self.log_obs_var) + sq / (gamma * nf));
        let kl = 0.5
            * mu
                .iter()
                .zip(logv.iter())
                .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
                .sum::<f64>()
            / nf;

        let d_dec = resid.mapv(|r| -r / (gamma * nf));
        let (g_dec, d_z) = self.decoder.backward_batch(&dec, d_dec.view());
        let mut d_enc = Array2::zeros((n, 2 * l));
        for i in 0..n {
            for k in 0..l {
                let (m, lv) = (mu[(i, k)], logv[(i, k)]);
                d_enc[(i, k)] = d_z[(i, k)] + m / nf;
                d_enc[(i, l + k)] = d_z[(i, k)] * eps[(i, k)] * 0.5 * std[(i, k)] + 0.5 * (lv.exp() - 1.0) / nf;
            }
        }
        let (g_enc, _) = self.encoder.backward_batch(&enc, d_enc.view());
        let g_gamma = 0.5 * d as f64 - 0.5 * sq / (gamma * nf);
        let mut gradient = g_enc;
        gradient.extend(g_dec);
        gradient.push(g_gamma);
        Ok(ElboTerms {
            elbo: reconstruction - kl,
            reconstruction,
            kl,
            gradient,
        })
    }

    /// ELBO with reparameterization noise drawn from `seed`.
    pub fn elbo(&self, batch: &DenseMatrix, seed: u64) -> Result<ElboTerms> {
        let x = to_array(batch);
        let mut rng = rng::stream(seed, 0);
        let eps = Array2::from_shape_fn((x.nrows(), self.latent_dim), |_| rng::normal(&mut rng));
        self.elbo_with_noise(x.view(), eps.view())
    }
}

fn to_array(m: &DenseMatrix) -> Array2<f64> {
    Array2::from_shape_vec((m.rows(), m.cols()), m.as_slice().to_vec()).expect("shape")
}

/// Number of latent coordinates whose posterior variance at `x` is below
/// `threshold`.
pub fn vae_dimensionality(model: &VaeModel, x: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return invalid("threshold must be positive");
    }
    let (_, var) = model.posterior(x)?;
    Ok(var.iter().filter(|&&v| v < threshold).count())
}

/// Most frequent value (smallest on ties).
pub fn mode(values: &[usize]) -> Option<usize> {
    let max = *values.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    values.iter().for_each(|&v| counts[v] += 1);
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 3000,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeCheckpoint {
    pub model: VaeModel,
    pub config: VaeTrainConfig,
    pub optimizer_state: OptimizerState,
    /// negative ELBO per step
    pub loss_history: Vec<f64>,
}

impl VaeCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, CHECKPOINT_KIND)
    }
}

/// Maximizes the ELBO with minibatches; step `k` uses stream `k + 1` of the
/// seed for the minibatch and the reparameterization noise.
pub fn train_vae(model: VaeModel, data: &DenseMatrix, config: &VaeTrainConfig) -> Result<VaeCheckpoint> {
    config.validate()?;
    if data.rows() == 0 || data.cols() != model.data_dim {
        return invalid("training data is empty or has the wrong width");
    }
    let mut state = VaeCheckpoint {
        optimizer_state: OptimizerState::new(&config.optimizer, model.n_params()),
        model,
        config: config.clone(),
        loss_history: Vec::with_capacity(config.steps),
    };
    let mut params = state.model.flat_params();
    for k in 0..config.steps {
        let mut rng: Rng = rng::stream(config.seed, k as u64 + 1);
        let mut x = Array2::zeros((config.batch_size, data.cols()));
        for i in 0..config.batch_size {
            let r = rng.random_range(0..data.rows());
            x.row_mut(i).iter_mut().zip(data.row(r)).for_each(|(a, b)| *a = *b);
        }
        let eps = Array2::from_shape_fn((config.batch_size, state.model.latent_dim), |_| rng::normal(&mut rng));
        let terms = state.model.elbo_with_noise(x.view(), eps.view())?;
        if !terms.elbo.is_finite() {
            return Err(Error::TrainingFailure {
                step: k,
                reason: format!("ELBO became {}", terms.elbo),
            });
        }
        state
            .optimizer_state
            .update(&config.optimizer, &mut params, &terms.gradient, 1.0);
        state.model.set_flat_params(&params).map_err(|_| Error::TrainingFailure {
            step: k,
            reason: "parameters became non-finite".into(),
        })?;
        state.loss_history.push(-terms.elbo);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_relative_error;

    fn tiny() -> VaeModel {
        let spec = VaeSpec {
            latent_dim: 2,
            hidden: vec![5],
            activation: Activation::Tanh,
        };
        let mut m = VaeModel::new(3, &spec, 1).unwrap();
        let mut rng = rng::stream(2, 0);
        let mut p = m.flat_params();
        p.iter_mut().for_each(|v| *v += 0.3 * rng::normal(&mut rng));
        m.set_flat_params(&p).unwrap();
        m
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny();
        let x = Array2::from_shape_fn((4, 3), |(i, k)| ((i * 3 + k) as f64 * 0.37).sin());
        let eps = Array2::from_shape_fn((4, 2), |(i, k)| ((i + 2 * k) as f64 * 0.91).cos());
        let analytic = m.elbo_with_noise(x.view(), eps.view()).unwrap().gradient;
        let base = m.flat_params();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..base.len())
            .map(|k| {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[k] += delta;
                    let mut mm = m.clone();
                    mm.set_flat_params(&p).unwrap();
                    -mm.elbo_with_noise(x.view(), eps.view()).unwrap().elbo
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect();
        let err = max_relative_error(&analytic, &numeric, 1e-3);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn elbo_is_deterministic_in_seed() {
        let m = tiny();
        let batch = DenseMatrix::from_fn(6, 3, |r, c| (r as f64 - c as f64) * 0.2);
        assert_eq!(m.elbo(&batch, 5).unwrap().elbo, m.elbo(&batch, 5).unwrap().elbo);
    }

    #[test]
    fn prior_posterior_has_zero_kl_and_full_count() {
        let spec = VaeSpec {
            latent_dim: 4,
            hidden: vec![8],
            activation: Activation::Softplus,
        };
        // the encoder output layer starts at zero: μ = 0, v = 1
        let m = VaeModel::new(3, &spec, 0).unwrap();
        let batch = DenseMatrix::from_fn(5, 3, |r, c| (r * c) as f64);
        assert_eq!(m.elbo(&batch, 1).unwrap().kl, 0.0);
        assert_eq!(vae_dimensionality(&m, &[1.0, 2.0, 3.0], DEFAULT_THRESHOLD).unwrap(), 0);
        assert_eq!(vae_dimensionality(&m, &[1.0, 2.0, 3.0], f64::INFINITY).unwrap(), 4);
        assert!(vae_dimensionality(&m, &[1.0, 2.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn uninformative_latent_collapses_to_prior() {
        let spec = VaeSpec {
            latent_dim: 3,
            hidden: vec![8],
            activation: Activation::Tanh,
        };
        let mut m = VaeModel::new(2, &spec, 3).unwrap();
        // perturb the encoder away from the prior, cut the decoder off from z
        let mut p = m.flat_params();
        let ne = m.encoder().params().len();
        let mut rng = rng::stream(4, 0);
        p[..ne].iter_mut().for_each(|v| *v += 0.5 * rng::normal(&mut rng));
        m.set_flat_params(&p).unwrap();
        let first_layer = 3 * 8;
        m.decoder_mut().params_mut()[..first_layer].iter_mut().for_each(|v| *v = 0.0);
        // constant data: the latent carries no information
        let data = DenseMatrix::from_fn(32, 2, |_, c| 0.5 - c as f64);
        let before = m.elbo(&data, 0).unwrap().kl;
        let cfg = VaeTrainConfig {
            batch_size: 32,
            steps: 600,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 1,
        };
        let trained = train_vae(m, &data, &cfg).unwrap().model;
        let after = trained.elbo(&data, 0).unwrap().kl;
        assert!(after < 0.05 * before, "KL {before} -> {after}");
    }

    #[test]
    fn dimensionality_is_monotone_in_threshold() {
        let m = tiny();
        let x = [0.3, -0.1, 0.8];
        let mut last = 0;
        for th in [1e-3, 0.1, 0.5, 1.0, 2.0, 10.0, f64::INFINITY] {
            let c = vae_dimensionality(&m, &x, th).unwrap();
            assert!(c >= last);
            last = c;
        }
        assert_eq!(last, 2);
    }

    #[test]
    fn mode_prefers_smallest_on_ties() {
        assert_eq!(mode(&[3, 2, 3, 2, 1]), Some(2));
        assert_eq!(mode(&[]), None);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let data = DenseMatrix::from_fn(16, 3, |r, c| ((r * 3 + c) as f64).cos());
        let cfg = VaeTrainConfig {
            batch_size: 8,
            steps: 5,
            ..VaeTrainConfig::default()
        };
        let ck = train_vae(tiny(), &data, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("vae-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vae.json");
        ck.save(&path).unwrap();
        assert_eq!(VaeCheckpoint::load(&path).unwrap(), ck);
        assert!(crate::scoremodel::ScoreCheckpoint::load(&path).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
