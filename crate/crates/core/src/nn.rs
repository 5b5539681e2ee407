//! Fully-connected networks with hand-written reverse-mode differentiation.
//!
//! Parameters live in one flat vector (layer by layer: weights row-major as
//! `out × in`, then biases) so optimizers, checkpoints and finite-difference
//! checks can treat them uniformly. Hidden layers apply a smooth activation;
//! the output layer is affine.

use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Tanh,
    Silu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values of a batched forward pass.
pub struct ForwardCache {
    /// input to each layer (`layer_inputs[0]` is the network input)
    layer_inputs: Vec<Array2<f64>>,
    /// pre-activations of the hidden layers
    pre_activations: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn param_count_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// LeCun-normal weights, zero biases.
    pub fn new(widths: Vec<usize>, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut mlp = Self::zeros(widths, activation)?;
        for l in 0..mlp.n_layers() {
            let (fan_in, fan_out) = (mlp.widths[l], mlp.widths[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let off = mlp.offset(l);
            for p in &mut mlp.params[off..off + fan_in * fan_out] {
                *p = std * rng::normal(rng);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return invalid(format!("invalid layer widths {widths:?}"));
        }
        let n = Self::param_count_for(&widths);
        Ok(Self {
            widths,
            activation,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(widths: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(widths, activation)?;
        if params.len() != mlp.params.len() {
            return invalid(format!(
                "expected {} parameters, got {}",
                mlp.params.len(),
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return invalid("non-finite parameter");
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    fn offset(&self, layer: usize) -> usize {
        Self::param_count_for(&self.widths[..=layer])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).expect("shape");
        let b = ArrayView1::from(&self.params[off + o * i..off + o * i + o]);
        (w, b)
    }

    /// Zeroes the weights and bias of the output layer.
    pub fn zero_output_layer(&mut self) {
        let l = self.n_layers() - 1;
        let off = self.offset(l);
        let end = off + self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        self.params[off..end].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("shape");
        self.forward_batch(x).output.into_raw_vec_and_offset().0
    }

    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> ForwardCache {
        assert_eq!(input.ncols(), self.input_width(), "input width mismatch");
        let mut layer_inputs = Vec::with_capacity(self.n_layers());
        let mut pre_activations = Vec::with_capacity(self.n_layers() - 1);
        let mut current = input.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = current.dot(&w.t());
            z += &b;
            layer_inputs.push(current);
            if l + 1 < self.n_layers() {
                let a = z.mapv(|v| self.activation.apply(v));
                pre_activations.push(z);
                current = a;
            } else {
                current = z;
            }
        }
        ForwardCache {
            layer_inputs,
            pre_activations,
            output: current,
        }
    }

    /// Back-propagates `d_output` (∂L/∂output, one row per sample) and returns
    /// the parameter gradient (summed over the batch) and ∂L/∂input.
    pub fn backward_batch(&self, cache: &ForwardCache, d_output: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = d_output.to_owned();
        for l in (0..self.n_layers()).rev() {
            let (w, _) = self.layer(l);
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            let gw = delta.t().dot(&cache.layer_inputs[l]);
            grad[off..off + o * i].copy_from_slice(gw.as_slice().expect("standard layout"));
            let gb = delta.sum_axis(Axis(0));
            grad[off + o * i..off + o * i + o].copy_from_slice(gb.as_slice().expect("contiguous"));
            let mut d_in = delta.dot(&w);
            if l > 0 {
                let z = &cache.pre_activations[l - 1];
                d_in.zip_mut_with(z, |d, &zv| *d *= self.activation.derivative(zv));
            }
            delta = d_in;
        }
        (grad, delta)
    }

    /// `∂output/∂input` at a single input, via one reverse sweep seeded with
    /// every output direction at once (row `i` = gradient of output `i`).
    pub fn input_jacobian(&self, input: &[f64]) -> Array2<f64> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("shape");
        let cache = self.forward_batch(x);
        let mut g: Array2<f64> = Array2::eye(self.output_width());
        for l in (0..self.n_layers()).rev() {
            let (w, _) = self.layer(l);
            g = g.dot(&w);
            if l > 0 {
                let z = cache.pre_activations[l - 1].row(0);
                let dz: Array1<f64> = z.mapv(|v| self.activation.derivative(v));
                g *= &dz;
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// plain momentum-free gradient descent
    Sgd { learning_rate: f64 },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate } | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0) || !lr.is_finite() {
            return invalid(format!("learning rate must be positive, got {lr}"));
        }
        Ok(())
    }
}

/// Optimizer moments; serialized with checkpoints so training can resume
/// bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    #[serde(default)]
    pub first_moment: Vec<f64>,
    #[serde(default)]
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, n_params: usize) -> Self {
        match config {
            OptimizerConfig::Sgd { .. } => Self {
                step: 0,
                first_moment: Vec::new(),
                second_moment: Vec::new(),
            },
            OptimizerConfig::Adam { .. } => Self {
                step: 0,
                first_moment: vec![0.0; n_params],
                second_moment: vec![0.0; n_params],
            },
        }
    }

    /// Applies one update `params -= step(grad)` scaled by `lr_scale`.
    pub fn update(&mut self, config: &OptimizerConfig, params: &mut [f64], grad: &[f64], lr_scale: f64) {
        self.step += 1;
        match *config {
            OptimizerConfig::Sgd { learning_rate } => {
                let lr = learning_rate * lr_scale;
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                eps,
            } => {
                if self.first_moment.len() != params.len() {
                    self.first_moment = vec![0.0; params.len()];
                    self.second_moment = vec![0.0; params.len()];
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let lr = learning_rate * lr_scale;
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Largest relative deviation between two gradients, with an absolute floor
/// for entries that are essentially zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Forward pass written out independently: explicit loops over the
    /// flat parameter layout.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let w = mlp.widths();
        let p = mlp.params();
        let mut off = 0;
        let mut h = x.to_vec();
        for l in 0..w.len() - 1 {
            let (ni, no) = (w[l], w[l + 1]);
            let mut out = vec![0.0; no];
            for o in 0..no {
                let mut acc = p[off + no * ni + o];
                for i in 0..ni {
                    acc += p[off + o * ni + i] * h[i];
                }
                out[o] = if l + 2 < w.len() { mlp.activation().apply(acc) } else { acc };
            }
            off += no * ni + no;
            h = out;
        }
        h
    }

    #[test]
    fn forward_matches_reference_chain() {
        let mut rng = rng::stream(1, 0);
        for act in [Activation::Softplus, Activation::Tanh, Activation::Silu] {
            let mlp = Mlp::new(vec![5, 7, 6, 3], act, &mut rng).unwrap();
            let mut mlp = mlp;
            for p in mlp.params_mut() {
                *p += 0.1 * rng::normal(&mut rng);
            }
            let x = rng::normal_vec(&mut rng, 5);
            let got = mlp.forward(&x);
            let want = reference_forward(&mlp, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Softplus, Activation::Tanh, Activation::Silu] {
            for &x in &[-35.0, -3.0, -0.2, 0.0, 0.7, 4.0, 40.0] {
                let h = 1e-5;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng::stream(2, 0);
        let mlp = Mlp::new(vec![3, 8, 2], Activation::Silu, &mut rng).unwrap();
        let xs = Array2::from_shape_fn((4, 3), |_| rng::normal(&mut rng));
        let target = Array2::from_shape_fn((4, 2), |_| rng::normal(&mut rng));
        let loss = |m: &Mlp| -> f64 {
            let out = m.forward_batch(xs.view()).output;
            (&out - &target).mapv(|v| v * v).sum() * 0.5
        };
        let cache = mlp.forward_batch(xs.view());
        let d_out = &cache.output - &target;
        let (grad, d_in) = mlp.backward_batch(&cache, d_out.view());
        let h = 1e-6;
        let mut numeric = vec![0.0; grad.len()];
        for k in 0..grad.len() {
            let mut plus = mlp.clone();
            plus.params_mut()[k] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[k] -= h;
            numeric[k] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        assert!(max_relative_error(&grad, &numeric, 1e-6) < 1e-4);
        // input gradient of the first sample
        for c in 0..3 {
            let mut xp = xs.clone();
            xp[(0, c)] += h;
            let mut xm = xs.clone();
            xm[(0, c)] -= h;
            let fp = (&mlp.forward_batch(xp.view()).output - &target).mapv(|v| v * v).sum() * 0.5;
            let fm = (&mlp.forward_batch(xm.view()).output - &target).mapv(|v| v * v).sum() * 0.5;
            assert!(((fp - fm) / (2.0 * h) - d_in[(0, c)]).abs() < 1e-6);
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let mut rng = rng::stream(3, 0);
        let mlp = Mlp::new(vec![4, 16, 16, 4], Activation::Tanh, &mut rng).unwrap();
        let x = rng::normal_vec(&mut rng, 4);
        let jac = mlp.input_jacobian(&x);
        let h = 1e-5;
        for c in 0..4 {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let fp = mlp.forward(&xp);
            let fm = mlp.forward(&xm);
            for r in 0..4 {
                assert!(((fp[r] - fm[r]) / (2.0 * h) - jac[(r, c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = rng::stream(4, 0);
        let mut mlp = Mlp::new(vec![3, 5, 2], Activation::Softplus, &mut rng).unwrap();
        mlp.zero_output_layer();
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn adam_and_sgd_decrease_a_quadratic() {
        for cfg in [OptimizerConfig::Sgd { learning_rate: 0.1 }, OptimizerConfig::adam(0.05)] {
            let mut p = vec![3.0, -2.0];
            let mut state = OptimizerState::new(&cfg, 2);
            for _ in 0..500 {
                let g = p.clone();
                state.update(&cfg, &mut p, &g, 1.0);
            }
            assert!(p.iter().all(|v| v.abs() < 1e-2), "{cfg:?}: {p:?}");
        }
        assert!(OptimizerConfig::Sgd { learning_rate: 0.0 }.validate().is_err());
    }
}
