//! A small dense feed-forward engine.
//!
//! Parameters of an [`Mlp`] are addressed as one flat vector, layer by layer,
//! weights row-major followed by biases. Gradients, [`AdamState`] moments and
//! serialized checkpoints all use that layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has width {got}, network expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("layer {layer} expects {expected} inputs but previous layer produces {got}")]
    LayerChain { layer: usize, expected: usize, got: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("cache does not match this network: {0}")]
    StaleCache(String),
    #[error("loss requires nonempty sequences of equal length (got {pred} and {target})")]
    EmptyOrMismatched { pred: usize, target: usize },
    #[error("network must have a single output for this operation, has {0}")]
    NotScalar(usize),
    #[error("invalid network: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Something that maps `ℝⁿ → ℝ`.
pub trait Evaluate {
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
}

/// An [`Evaluate`] that also exposes `∇ₓ f(x)`.
pub trait InputGradient: Evaluate {
    fn input_gradient(&self, x: &[f64]) -> Vec<f64>;
}

impl<T: Evaluate + ?Sized> Evaluate for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (**self).eval(x)
    }
}

impl<T: InputGradient + ?Sized> InputGradient for &T {
    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        (**self).input_gradient(x)
    }
}

/// Adapts a closure (and optionally its gradient) to the model traits.
pub struct FnModel<F, G = fn(&[f64]) -> Vec<f64>> {
    dim: usize,
    f: F,
    grad: Option<G>,
}

impl<F: Fn(&[f64]) -> f64> FnModel<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, grad: None }
    }
}

impl<F: Fn(&[f64]) -> f64, G: Fn(&[f64]) -> Vec<f64>> FnModel<F, G> {
    pub fn with_gradient(dim: usize, f: F, grad: G) -> Self {
        Self { dim, f, grad: Some(grad) }
    }
}

impl<F: Fn(&[f64]) -> f64, G> Evaluate for FnModel<F, G> {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl<F: Fn(&[f64]) -> f64, G: Fn(&[f64]) -> Vec<f64>> InputGradient for FnModel<F, G> {
    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.grad {
            Some(g) => g(x),
            None => finite_diff_grad(&self.f, x, 1e-5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    Swish,
    Softplus,
    Snake,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub const ALL: [Activation; 7] = [
        Activation::Identity,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
        Activation::Swish,
        Activation::Softplus,
        Activation::Snake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Swish => "swish",
            Activation::Softplus => "softplus",
            Activation::Snake => "snake",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Swish => z * sigmoid(z),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Snake => z + z.sin(),
        }
    }

    /// First derivative. `relu'(0)` is taken as 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(z),
            Activation::Snake => 1.0 + z.cos(),
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity | Activation::Relu => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Snake => -z.sin(),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uniform Glorot draw: entries in `±√(6/(fan_in + fan_out))`.
pub fn init_xavier(rows: usize, cols: usize, seed: u64) -> Matrix {
    xavier_with(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn xavier_with(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::new(rows, cols, data).expect("finite draws")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct DenseLayer {
    /// `outputs × inputs`.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<DenseLayer> for LayerRepr {
    fn from(l: DenseLayer) -> Self {
        LayerRepr {
            inputs: l.w.cols(),
            outputs: l.w.rows(),
            activation: l.act,
            weights: l.w.data().to_vec(),
            bias: l.b,
        }
    }
}

impl TryFrom<LayerRepr> for DenseLayer {
    type Error = String;

    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        let w = Matrix::new(r.outputs, r.inputs, r.weights).map_err(|e| e.to_string())?;
        if r.bias.len() != r.outputs {
            return Err(format!("bias has {} entries for {} outputs", r.bias.len(), r.outputs));
        }
        DenseLayer::new(w, r.bias, r.activation).map_err(|e| e.to_string())
    }
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vec<f64>, act: Activation) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(NnError::Invalid(format!("bias length {} != {} outputs", b.len(), w.rows())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Invalid("non-finite bias".into()));
        }
        Ok(Self { w, b, act })
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }

    /// Pre-activation `W·x + b`.
    pub fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs())
            .map(|i| crate::linalg::dot(self.w.row(i), x) + self.b[i])
            .collect()
    }
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input")
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr")]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

#[derive(Deserialize)]
struct MlpRepr {
    layers: Vec<DenseLayer>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = NnError;

    fn try_from(r: MlpRepr) -> Result<Self> {
        Mlp::from_layers(r.layers)
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::Invalid("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs() != pair[0].outputs() {
                return Err(NnError::LayerChain {
                    layer: i + 1,
                    expected: pair[1].inputs(),
                    got: pair[0].outputs(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Xavier-initialized network with zero biases. `sizes` lists every width
    /// from input to output; the last layer uses `output`, all others `hidden`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        Self::with_rng(sizes, hidden, output, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn with_rng(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                w: xavier_with(w[1], w[0], rng),
                b: vec![0.0; w[1]],
                act: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NnError::ParamLength {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            l.w = Matrix::new(r, c, params[off..off + r * c].to_vec()).map_err(|e| NnError::Invalid(e.to_string()))?;
            off += r * c;
            l.b.copy_from_slice(&params[off..off + r]);
            off += r;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(NnError::WidthMismatch {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = l.pre_activation(activations.last().unwrap());
            activations.push(z.iter().map(|&v| l.act.value(v)).collect());
            pre.push(z);
        }
        let y = activations.last().unwrap().clone();
        Ok((y, ForwardCache { activations, pre }))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in &self.layers {
            a = l.pre_activation(&a).into_iter().map(|z| l.act.value(z)).collect();
        }
        Ok(a)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.pre.len() != self.layers.len() || cache.activations.len() != self.layers.len() + 1 {
            return Err(NnError::StaleCache(format!(
                "{} cached layers for a {}-layer network",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if cache.pre[i].len() != l.outputs() || cache.activations[i].len() != l.inputs() {
                return Err(NnError::StaleCache(format!("layer {i} shape differs")));
            }
        }
        Ok(())
    }

    /// Reverse accumulation. Adds `∂L/∂θ` into `acc` (flat layout) and returns `∂L/∂x`.
    pub fn backward_into(&self, cache: &ForwardCache, dl_dy: &[f64], acc: &mut [f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if dl_dy.len() != self.output_width() {
            return Err(NnError::StaleCache(format!(
                "upstream gradient has {} entries for {} outputs",
                dl_dy.len(),
                self.output_width()
            )));
        }
        if acc.len() != self.param_count() {
            return Err(NnError::ParamLength {
                expected: self.param_count(),
                got: acc.len(),
            });
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }

        let mut upstream = dl_dy.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (rows, cols) = l.w.shape();
            let input = &cache.activations[li];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&cache.pre[li])
                .map(|(&g, &z)| g * l.act.derivative(z))
                .collect();
            let base = offsets[li];
            for i in 0..rows {
                let row = &mut acc[base + i * cols..base + (i + 1) * cols];
                for (r, &xj) in row.iter_mut().zip(input) {
                    *r += delta[i] * xj;
                }
                acc[base + rows * cols + i] += delta[i];
            }
            upstream = l.w.matvec_transpose(&delta).expect("shapes checked");
        }
        Ok(upstream)
    }

    pub fn backward(&self, cache: &ForwardCache, dl_dy: &[f64]) -> Result<Gradients> {
        let mut params = vec![0.0; self.param_count()];
        let input = self.backward_into(cache, dl_dy, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// `∇ₓ y` for a single-output network.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.output_width() != 1 {
            return Err(NnError::NotScalar(self.output_width()));
        }
        let (_, cache) = self.forward(x)?;
        let mut scratch = vec![0.0; self.param_count()];
        self.backward_into(&cache, &[1.0], &mut scratch)
    }

    /// Second-order pass for losses that depend on `∇ₓ y`.
    ///
    /// Returns `∇ₓ y` and accumulates `∂(cᵀ∇ₓ y)/∂θ` into `acc`. The scalar
    /// `cᵀ∇ₓ y` is the forward tangent of `y` along `c`, so this runs a tangent
    /// forward pass and then reverse-differentiates both the primal and the
    /// tangent streams.
    pub fn directional_gradient_backward(&self, x: &[f64], c: &[f64], acc: &mut [f64]) -> Result<Vec<f64>> {
        if self.output_width() != 1 {
            return Err(NnError::NotScalar(self.output_width()));
        }
        if c.len() != x.len() {
            return Err(NnError::WidthMismatch {
                expected: x.len(),
                got: c.len(),
            });
        }
        let (_, cache) = self.forward(x)?;
        let grad_x = {
            let mut scratch = vec![0.0; self.param_count()];
            self.backward_into(&cache, &[1.0], &mut scratch)?
        };

        // Tangents: dot_a[l] is d a_l along c, dot_z[l] is d z_l along c.
        let mut dot_a = vec![c.to_vec()];
        let mut dot_z = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate() {
            let dz = l.w.matvec(&dot_a[li]).expect("shapes checked");
            let da = dz.iter().zip(&cache.pre[li]).map(|(&t, &z)| l.act.derivative(z) * t).collect();
            dot_z.push(dz);
            dot_a.push(da);
        }

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }

        // Adjoints of the output tangent (seeded with 1) and of the primal output (0).
        let mut adj_dot_a = vec![1.0];
        let mut adj_a = vec![0.0];
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (rows, cols) = l.w.shape();
            let z = &cache.pre[li];
            let dz = &dot_z[li];
            let adj_dot_z: Vec<f64> = (0..rows).map(|i| adj_dot_a[i] * l.act.derivative(z[i])).collect();
            let adj_z: Vec<f64> = (0..rows)
                .map(|i| adj_a[i] * l.act.derivative(z[i]) + adj_dot_a[i] * l.act.second_derivative(z[i]) * dz[i])
                .collect();
            let a_in = &cache.activations[li];
            let dot_in = &dot_a[li];
            let base = offsets[li];
            for i in 0..rows {
                let row = &mut acc[base + i * cols..base + (i + 1) * cols];
                for j in 0..cols {
                    row[j] += adj_z[i] * a_in[j] + adj_dot_z[i] * dot_in[j];
                }
                acc[base + rows * cols + i] += adj_z[i];
            }
            adj_a = l.w.matvec_transpose(&adj_z).expect("shapes checked");
            adj_dot_a = l.w.matvec_transpose(&adj_dot_z).expect("shapes checked");
        }
        Ok(grad_x)
    }
}

impl Evaluate for Mlp {
    fn input_dim(&self) -> usize {
        self.input_width()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.predict(x).expect("input width")[0]
    }
}

impl InputGradient for Mlp {
    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        Mlp::input_gradient(self, x).expect("scalar network")
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ParamLength {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// `(1/m)·Σ(predᵢ − targetᵢ)²`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(NnError::EmptyOrMismatched {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            lr: 0.005,
            seed: 0,
            hidden: vec![10, 10],
            activation: Activation::Sigmoid,
            noise_std: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("hidden widths must be a nonempty list of positive sizes".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err("noise_std must be nonnegative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in Activation::ALL {
            for i in 0..=200 {
                let z = -5.0 + 0.05 * i as f64 + 0.0123;
                if act == Activation::Relu && z.abs() < 1e-3 {
                    continue;
                }
                let h = 1e-6;
                let fd = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
                let d = act.derivative(z);
                assert!((fd - d).abs() <= 1e-6 * d.abs().max(1.0), "{act} {z} {fd} {d}");
                let fd2 = (act.derivative(z + h) - act.derivative(z - h)) / (2.0 * h);
                let d2 = act.second_derivative(z);
                assert!((fd2 - d2).abs() <= 1e-6 * d2.abs().max(1.0), "{act}'' {z} {fd2} {d2}");
            }
        }
    }

    #[test]
    fn sigmoid_complement() {
        for i in 0..1000 {
            let z = -20.0 + 0.04 * i as f64;
            let s = Activation::Sigmoid;
            assert!((s.value(z) + s.value(-z) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn activation_names_round_trip() {
        for a in Activation::ALL {
            assert_eq!(Activation::from_name(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }

    #[test]
    fn zero_weight_network_outputs_bias() {
        let mut net = Mlp::new(&[3, 4, 1], Activation::Tanh, Activation::Identity, 0).unwrap();
        let n = net.param_count();
        net.set_params(&vec![0.0; n]).unwrap();
        net.layers_mut()[1].b[0] = 2.5;
        for x in [[0.0, 0.0, 0.0], [1.0, -4.0, 7.0]] {
            assert_eq!(net.eval(&x), 2.5);
        }
    }

    #[test]
    fn identity_layer_passes_through() {
        let layer = DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let net = Mlp::new(&[2, 10, 10, 1], Activation::Sigmoid, Activation::Identity, 17).unwrap();
        let x = [0.3, 0.3];
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut a = x.to_vec();
        for (li, l) in net.layers().iter().enumerate() {
            let mut next = Vec::new();
            for i in 0..l.outputs() {
                let mut z = l.b[i];
                for (j, aj) in a.iter().enumerate() {
                    z += l.w[(i, j)] * aj;
                }
                next.push(if li + 1 == net.layers().len() { z } else { sig(z) });
            }
            a = next;
        }
        assert!((net.eval(&x) - a[0]).abs() <= 1e-14);
    }

    #[test]
    fn width_mismatch_rejected() {
        let net = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, 0).unwrap();
        assert_eq!(net.forward(&[1.0]).unwrap_err(), NnError::WidthMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn linear_single_layer_closed_form_gradient() {
        let layer = DenseLayer::new(Matrix::from_rows(&[vec![1.5]]).unwrap(), vec![-0.5], Activation::Identity).unwrap();
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let (x, t) = (2.0, 1.0);
        let (y, cache) = net.forward(&[x]).unwrap();
        let g = net.backward(&cache, &[2.0 * (y[0] - t)]).unwrap();
        let r = 1.5 * x - 0.5 - t;
        assert_eq!(g.params, vec![2.0 * r * x, 2.0 * r]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::new(&[3, 5, 4, 1], Activation::Sigmoid, Activation::Identity, 3).unwrap();
        let x = [0.2, -0.7, 1.1];
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        let theta = net.params();
        let fd = finite_diff_grad(
            |p| {
                let mut n = net.clone();
                n.set_params(p).unwrap();
                n.eval(&x)
            },
            &theta,
            1e-5,
        );
        for (a, b) in g.params.iter().zip(&fd) {
            if a.abs().max(b.abs()) > 1e-8 {
                assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn relu_net_with_active_units_is_linear_map() {
        let mut net = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, 5).unwrap();
        for b in net.layers_mut()[0].b.iter_mut() {
            *b = 10.0;
        }
        let x = [0.1, 0.2];
        let w1 = &net.layers()[0].w;
        let w2 = &net.layers()[1].w;
        let expected: Vec<f64> = (0..2).map(|j| (0..3).map(|i| w2[(0, i)] * w1[(i, j)]).sum()).collect();
        let g = net.input_gradient(&x).unwrap();
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn input_gradient_of_linear_net_is_weights() {
        let layer = DenseLayer::new(Matrix::from_rows(&[vec![0.5, -2.0, 3.0]]).unwrap(), vec![1.0], Activation::Identity).unwrap();
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.input_gradient(&[9.0, 8.0, 7.0]).unwrap(), vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = AdamState::new(3, 0.1);
        let mut p = vec![1.0, 2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let (lr, g) = (0.01, 0.3);
        let mut st = AdamState::new(1, lr);
        let mut p = vec![0.0];
        let (mut m, mut v, mut expected) = (0.0, 0.0, 0.0);
        for t in 1..=3 {
            st.step(&mut p, &[g]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            expected -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - expected).abs() <= 1e-15);
        }
        // First step of Adam moves by almost exactly lr.
        let mut st = AdamState::new(1, lr);
        let mut p = vec![0.0];
        st.step(&mut p, &[g]).unwrap();
        assert!((p[0] + lr).abs() < 1e-9);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2, 0.1);
        assert!(st.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_of_gaussian_noise_approaches_variance() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = Normal::new(0.0, 0.25).unwrap();
        let m = 200_000;
        let xs: Vec<f64> = (0..m).map(|i| i as f64 / m as f64).collect();
        let pred: Vec<f64> = xs.iter().map(|x| x.cos()).collect();
        let target: Vec<f64> = pred.iter().map(|p| p + noise.sample(&mut rng)).collect();
        let loss = mse_loss(&pred, &target).unwrap();
        assert!((loss - 0.0625).abs() < 0.0625 * 0.02, "{loss}");
    }

    #[test]
    fn xavier_is_reproducible_and_bounded() {
        let a = init_xavier(10, 20, 0);
        assert_eq!(a, init_xavier(10, 20, 0));
        assert_ne!(a, init_xavier(10, 20, 1));
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn finite_diff_basic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() <= 1e-6);
        assert_eq!(finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-5), vec![0.0, 0.0]);
    }

    #[test]
    fn directional_backward_matches_finite_differences() {
        let net = Mlp::new(&[2, 6, 5, 1], Activation::Tanh, Activation::Identity, 8).unwrap();
        let x = [0.4, -0.9];
        let c = [0.7, -1.3];
        let mut acc = vec![0.0; net.param_count()];
        let gx = net.directional_gradient_backward(&x, &c, &mut acc).unwrap();
        assert_eq!(gx, net.input_gradient(&x).unwrap());
        let theta = net.params();
        let fd = finite_diff_grad(
            |p| {
                let mut n = net.clone();
                n.set_params(p).unwrap();
                let g = n.input_gradient(&x).unwrap();
                g[0] * c[0] + g[1] * c[1]
            },
            &theta,
            1e-5,
        );
        for (a, b) in acc.iter().zip(&fd) {
            if a.abs().max(b.abs()) > 1e-7 {
                assert!(rel_err(*a, *b) <= 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let net = Mlp::new(&[2, 7, 1], Activation::Swish, Activation::Identity, 21).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        let a: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert!(json.contains("\"activation\":\"swish\""));
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let bad = r#"{"layers":[{"inputs":2,"outputs":1,"activation":"tanh","weights":[1.0],"bias":[0.0]}]}"#;
        assert!(serde_json::from_str::<Mlp>(bad).is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
