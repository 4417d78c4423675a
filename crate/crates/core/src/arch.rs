//! The four model families and the machinery around them.
//!
//! | kind        | invariance mechanism                          | trunk passes per inference |
//! |-------------|-----------------------------------------------|----------------------------|
//! | `vn`        | none                                          | 1                          |
//! | `hln`       | hub layer `h(x) + p·h(Ax)`                    | 2                          |
//! | `hub-multi` | hub layer over all `2^k` block images         | `2^k`                      |
//! | `san`       | first layer `σ(Wx + b) + σ(WAx + b)`          | 1 (first layer twice)      |
//! | `iptn`      | input mapped into the PID, output times sign  | 1                          |
//!
//! The module also hosts the activation audit, which searches for biases `b*`
//! at which `σ(b* + z) − σ(b*)` is odd (even-parity case) and so freezes a
//! symmetrized first layer under inversion.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::metrics::RunRecord;
use crate::nn::{self, finite_diff_grad, xavier_with, Activation, AdamState, DenseLayer, Evaluate, Mlp, NnError, TrainConfig};
use crate::symmetry::{InvolutorySpec, Parity, Reparameterize, SymmetryError, SymmetrySpec};

/// Largest block count accepted by hub superposition (`2^k` trunk passes).
pub const MAX_HUB_BLOCKS: usize = 12;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error("symmetrized activations support only even parity")]
    UnsupportedParity,
    #[error("hub superposition over {0} blocks exceeds the limit of {MAX_HUB_BLOCKS}")]
    TooManyBlocks(usize),
    #[error("model {kind} requires {requirement}")]
    Incompatible { kind: ModelKind, requirement: &'static str },
    #[error("dataset is empty or inputs and targets differ in length")]
    BadDataset,
}

pub type Result<T> = std::result::Result<T, ArchError>;

/// Exact count of forward passes.
#[derive(Debug, Default)]
pub struct PassCounter {
    trunk: AtomicU64,
    first_layer: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub trunk_evals: u64,
    pub first_layer_evals: u64,
}

impl PassCounter {
    pub fn add_trunk(&self, n: u64) {
        self.trunk.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_first_layer(&self, n: u64) {
        self.first_layer.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCounts {
        PassCounts {
            trunk_evals: self.trunk.load(Ordering::Relaxed),
            first_layer_evals: self.first_layer.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.trunk.store(0, Ordering::Relaxed);
        self.first_layer.store(0, Ordering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        Self {
            trunk: AtomicU64::new(s.trunk_evals),
            first_layer: AtomicU64::new(s.first_layer_evals),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vn,
    Hln,
    San,
    Iptn,
    HubMulti,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vn => "vn",
            ModelKind::Hln => "hln",
            ModelKind::San => "san",
            ModelKind::Iptn => "iptn",
            ModelKind::HubMulti => "hub-multi",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hub-layered network: a trunk up to the last hidden layer, evaluated at
/// every image of the input under the symmetry, superposed with parity signs,
/// then a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubNetwork {
    pub trunk: Mlp,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    pub symmetry: SymmetrySpec,
}

struct HubTerm {
    point: Vec<f64>,
    coeff: f64,
}

impl HubNetwork {
    pub fn new(trunk: Mlp, head_w: Vec<f64>, head_b: f64, symmetry: SymmetrySpec) -> Result<Self> {
        if head_w.len() != trunk.output_width() {
            return Err(NnError::Invalid(format!("head has {} weights for {} hub units", head_w.len(), trunk.output_width())).into());
        }
        if let SymmetrySpec::Blocks(b) = &symmetry {
            if b.len() > MAX_HUB_BLOCKS {
                return Err(ArchError::TooManyBlocks(b.len()));
            }
        }
        Ok(Self {
            trunk,
            head_w,
            head_b,
            symmetry,
        })
    }

    fn parities(&self) -> Vec<Parity> {
        match &self.symmetry {
            SymmetrySpec::Single(s) => vec![s.parity()],
            SymmetrySpec::Blocks(b) => b.blocks().iter().map(|blk| blk.spec.parity()).collect(),
        }
    }

    /// `θ(p)`: the bias survives only when every parity is even.
    fn bias_scale(&self) -> f64 {
        let parities = self.parities();
        if parities.iter().all(|p| p.is_even()) {
            (1u64 << parities.len()) as f64
        } else {
            0.0
        }
    }

    /// All `2^k` images of `x`, indexed by the bitmask of applied blocks.
    fn terms(&self, x: &[f64]) -> Result<Vec<HubTerm>> {
        match &self.symmetry {
            SymmetrySpec::Single(s) => Ok(vec![
                HubTerm {
                    point: x.to_vec(),
                    coeff: 1.0,
                },
                HubTerm {
                    point: s.apply(x)?,
                    coeff: s.parity().sign(),
                },
            ]),
            SymmetrySpec::Blocks(b) => {
                if x.len() != b.dim() {
                    return Err(SymmetryError::ShapeMismatch {
                        expected: b.dim(),
                        got: x.len(),
                    }
                    .into());
                }
                let k = b.len();
                let mut terms = Vec::with_capacity(1 << k);
                for mask in 0..1usize << k {
                    let mut point = x.to_vec();
                    let mut coeff = 1.0;
                    for (j, blk) in b.blocks().iter().enumerate() {
                        if mask & (1 << j) != 0 {
                            let img = blk.spec.apply(&x[blk.range()])?;
                            point[blk.range()].copy_from_slice(&img);
                            coeff *= blk.spec.parity().sign();
                        }
                    }
                    terms.push(HubTerm { point, coeff });
                }
                Ok(terms)
            }
        }
    }

    /// Combines trunk outputs level by level: `F_j(y) = F_{j−1}(y) + p_j·F_{j−1}(T_j y)`.
    /// Each flip of block `j` swaps the two summands at level `j`, so the
    /// superposition is invariant bit for bit when the maps are exact.
    fn superpose(&self, mut vals: Vec<Vec<f64>>) -> Vec<f64> {
        let parities = self.parities();
        for (j, p) in parities.iter().enumerate() {
            let bit = 1 << j;
            for mask in 0..vals.len() {
                if mask & bit == 0 {
                    let (lo, hi) = vals.split_at_mut(mask | bit);
                    let other = &hi[0];
                    for (a, &b) in lo[mask].iter_mut().zip(other) {
                        *a = match p {
                            Parity::Even => *a + b,
                            Parity::Odd => *a - b,
                        };
                    }
                }
            }
        }
        vals.swap_remove(0)
    }

    pub fn hub_activations(&self, x: &[f64], counter: Option<&PassCounter>) -> Result<Vec<f64>> {
        let terms = self.terms(x)?;
        if let Some(c) = counter {
            c.add_trunk(terms.len() as u64);
        }
        let vals = terms
            .iter()
            .map(|t| self.trunk.predict(&t.point))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.superpose(vals))
    }

    pub fn forward(&self, x: &[f64], counter: Option<&PassCounter>) -> Result<f64> {
        let h = self.hub_activations(x, counter)?;
        Ok(nn_dot(&self.head_w, &h) + self.bias_scale() * self.head_b)
    }

    fn param_count(&self) -> usize {
        self.trunk.param_count() + self.head_w.len() + 1
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.trunk.params();
        p.extend_from_slice(&self.head_w);
        p.push(self.head_b);
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let t = self.trunk.param_count();
        self.trunk.set_params(&p[..t])?;
        let h = self.head_w.len();
        self.head_w.copy_from_slice(&p[t..t + h]);
        self.head_b = p[p.len() - 1];
        Ok(())
    }

    fn accumulate_grad(&self, x: &[f64], dl_dy: f64, acc: &mut [f64], counter: Option<&PassCounter>) -> Result<f64> {
        let terms = self.terms(x)?;
        if let Some(c) = counter {
            c.add_trunk(terms.len() as u64);
        }
        let t = self.trunk.param_count();
        let mut caches = Vec::with_capacity(terms.len());
        let mut vals = Vec::with_capacity(terms.len());
        for term in &terms {
            let (h, cache) = self.trunk.forward(&term.point)?;
            vals.push(h);
            caches.push(cache);
        }
        let hub = self.superpose(vals);
        let y = nn_dot(&self.head_w, &hub) + self.bias_scale() * self.head_b;
        let (trunk_acc, head_acc) = acc.split_at_mut(t);
        for (term, cache) in terms.iter().zip(&caches) {
            let upstream: Vec<f64> = self.head_w.iter().map(|w| dl_dy * term.coeff * w).collect();
            self.trunk.backward_into(cache, &upstream, trunk_acc)?;
        }
        for (g, h) in head_acc.iter_mut().zip(&hub) {
            *g += dl_dy * h;
        }
        head_acc[self.head_w.len()] += dl_dy * self.bias_scale();
        Ok(y)
    }
}

fn nn_dot(a: &[f64], b: &[f64]) -> f64 {
    crate::linalg::dot(a, b)
}

/// Hub superposition over single-coordinate sign flips.
pub fn hub_multi_forward(hub: &HubNetwork, x: &[f64], counter: &PassCounter) -> Result<f64> {
    hub.forward(x, Some(counter))
}

pub fn hln_forward(hub: &HubNetwork, x: &[f64], counter: &PassCounter) -> Result<f64> {
    hub.forward(x, Some(counter))
}

/// One row per first-layer node.
pub type Jacobian = Vec<Vec<f64>>;

/// Network whose first layer is symmetrized: `a(x) = σ(Wx + b) + σ(WAx + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaNetwork {
    pub first: DenseLayer,
    pub rest: Mlp,
    pub spec: InvolutorySpec,
}

impl SaNetwork {
    pub fn new(first: DenseLayer, rest: Mlp, spec: InvolutorySpec) -> Result<Self> {
        if spec.parity() != Parity::Even {
            return Err(ArchError::UnsupportedParity);
        }
        if first.inputs() != spec.dim() || rest.input_width() != first.outputs() {
            return Err(NnError::Invalid("symmetrized layer does not chain".into()).into());
        }
        Ok(Self { first, rest, spec })
    }

    /// Pre-activations at `x` and at `Ax`.
    fn first_pre(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let ax = self.spec.apply(x)?;
        if x.len() != self.first.inputs() {
            return Err(NnError::WidthMismatch {
                expected: self.first.inputs(),
                got: x.len(),
            }
            .into());
        }
        Ok((self.first.pre_activation(x), self.first.pre_activation(&ax), ax))
    }

    pub fn first_layer_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (z1, z2, _) = self.first_pre(x)?;
        let act = self.first.act;
        Ok(z1.iter().zip(&z2).map(|(&a, &b)| act.value(a) + act.value(b)).collect())
    }

    pub fn forward(&self, x: &[f64], counter: Option<&PassCounter>) -> Result<f64> {
        if let Some(c) = counter {
            c.add_first_layer(2);
            c.add_trunk(1);
        }
        let a = self.first_layer_activations(x)?;
        Ok(self.rest.predict(&a)?[0])
    }

    /// For node `i`: `∂aᵢ/∂wᵢ = σ'(zᵢ)x + σ'(z̃ᵢ)Ax` and
    /// `∂aᵢ/∂x = [σ'(zᵢ)I + σ'(z̃ᵢ)Aᵀ]wᵢ`.
    pub fn first_layer_jacobians(&self, x: &[f64]) -> Result<(Jacobian, Jacobian)> {
        let (z1, z2, ax) = self.first_pre(x)?;
        let act = self.first.act;
        let a = self.spec.matrix();
        let mut dw = Vec::with_capacity(z1.len());
        let mut dx = Vec::with_capacity(z1.len());
        for i in 0..z1.len() {
            let (d1, d2) = (act.derivative(z1[i]), act.derivative(z2[i]));
            dw.push(x.iter().zip(&ax).map(|(&u, &v)| d1 * u + d2 * v).collect());
            let w = self.first.w.row(i);
            let atw = a.matvec_transpose(w).expect("square");
            dx.push(w.iter().zip(&atw).map(|(&u, &v)| d1 * u + d2 * v).collect());
        }
        Ok((dw, dx))
    }

    fn param_count(&self) -> usize {
        self.first.param_count() + self.rest.param_count()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.first.w.data().to_vec();
        p.extend_from_slice(&self.first.b);
        p.extend(self.rest.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let (r, c) = self.first.w.shape();
        self.first.w = Matrix::new(r, c, p[..r * c].to_vec()).map_err(|e| NnError::Invalid(e.to_string()))?;
        self.first.b.copy_from_slice(&p[r * c..r * c + r]);
        self.rest.set_params(&p[r * c + r..])?;
        Ok(())
    }

    fn accumulate_grad(&self, x: &[f64], dl_dy: f64, acc: &mut [f64], counter: Option<&PassCounter>) -> Result<f64> {
        if let Some(c) = counter {
            c.add_first_layer(2);
            c.add_trunk(1);
        }
        let (z1, z2, ax) = self.first_pre(x)?;
        let act = self.first.act;
        let a: Vec<f64> = z1.iter().zip(&z2).map(|(&u, &v)| act.value(u) + act.value(v)).collect();
        let (y, cache) = self.rest.forward(&a)?;
        let (first_acc, rest_acc) = acc.split_at_mut(self.first.param_count());
        let up = self.rest.backward_into(&cache, &[dl_dy], rest_acc)?;
        let (rows, cols) = self.first.w.shape();
        for i in 0..rows {
            let d1 = up[i] * act.derivative(z1[i]);
            let d2 = up[i] * act.derivative(z2[i]);
            for j in 0..cols {
                first_acc[i * cols + j] += d1 * x[j] + d2 * ax[j];
            }
            first_acc[rows * cols + i] += d1 + d2;
        }
        Ok(y[0])
    }
}

pub fn san_forward(s: &SaNetwork, x: &[f64], counter: &PassCounter) -> Result<f64> {
    s.forward(x, Some(counter))
}

/// A plain network behind the PID reparameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IptNetwork {
    pub net: Mlp,
    pub symmetry: SymmetrySpec,
}

impl IptNetwork {
    pub fn forward(&self, x: &[f64], counter: Option<&PassCounter>) -> Result<f64> {
        let r = self.symmetry.reparam(x)?;
        if let Some(c) = counter {
            c.add_trunk(1);
        }
        if r.vanishes {
            return Ok(0.0);
        }
        Ok(r.sign * self.net.predict(&r.point)?[0])
    }
}

pub fn iptn_forward(net: &Mlp, spec: &SymmetrySpec, x: &[f64], counter: &PassCounter) -> Result<f64> {
    let r = spec.reparam(x)?;
    counter.add_trunk(1);
    if r.vanishes {
        return Ok(0.0);
    }
    Ok(r.sign * net.predict(&r.point)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Vn { net: Mlp },
    Hln(HubNetwork),
    San(SaNetwork),
    Iptn(IptNetwork),
    HubMulti(HubNetwork),
}

/// One of the model families together with its pass counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetricModel {
    #[serde(flatten)]
    pub arch: Architecture,
    #[serde(skip)]
    counter: PassCounter,
}

impl PartialEq for SymmetricModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
    }
}

/// Construction options beyond [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Activation of the symmetrized first layer (SAN only).
    pub san_activation: Activation,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            san_activation: Activation::Swish,
        }
    }
}

impl SymmetricModel {
    pub fn new(arch: Architecture) -> Self {
        Self {
            arch,
            counter: PassCounter::default(),
        }
    }

    pub fn build(kind: ModelKind, input_dim: usize, symmetry: Option<SymmetrySpec>, cfg: &TrainConfig, opts: BuildOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hidden = &cfg.hidden;
        let act = cfg.activation;
        let mut sizes = vec![input_dim];
        sizes.extend(hidden);
        let need_symmetry = |requirement| ArchError::Incompatible { kind, requirement };
        if let Some(s) = &symmetry {
            if s.dim() != input_dim {
                return Err(SymmetryError::ShapeMismatch {
                    expected: input_dim,
                    got: s.dim(),
                }
                .into());
            }
        }
        let arch = match kind {
            ModelKind::Vn => {
                sizes.push(1);
                Architecture::Vn {
                    net: Mlp::with_rng(&sizes, act, Activation::Identity, &mut rng)?,
                }
            }
            ModelKind::Iptn => {
                sizes.push(1);
                let symmetry = symmetry.ok_or(need_symmetry("a symmetry"))?;
                Architecture::Iptn(IptNetwork {
                    net: Mlp::with_rng(&sizes, act, Activation::Identity, &mut rng)?,
                    symmetry,
                })
            }
            ModelKind::Hln | ModelKind::HubMulti => {
                let symmetry = symmetry.ok_or(need_symmetry("a symmetry"))?;
                if kind == ModelKind::HubMulti && !matches!(symmetry, SymmetrySpec::Blocks(_)) {
                    return Err(need_symmetry("a block symmetry"));
                }
                let trunk = Mlp::with_rng(&sizes, act, act, &mut rng)?;
                let last = *hidden.last().expect("validated hidden widths");
                let head = xavier_with(1, last, &mut rng).data().to_vec();
                let hub = HubNetwork::new(trunk, head, 0.0, symmetry)?;
                if kind == ModelKind::Hln {
                    Architecture::Hln(hub)
                } else {
                    Architecture::HubMulti(hub)
                }
            }
            ModelKind::San => {
                let spec = match symmetry {
                    Some(SymmetrySpec::Single(s)) => s,
                    _ => return Err(need_symmetry("a single involutory symmetry")),
                };
                if spec.parity() != Parity::Even {
                    return Err(ArchError::UnsupportedParity);
                }
                let first = DenseLayer::new(
                    xavier_with(hidden[0], input_dim, &mut rng),
                    vec![0.0; hidden[0]],
                    opts.san_activation,
                )?;
                let rest = Mlp::with_rng(
                    &sizes[1..].iter().copied().chain([1]).collect::<Vec<_>>(),
                    act,
                    Activation::Identity,
                    &mut rng,
                )?;
                Architecture::San(SaNetwork::new(first, rest, spec)?)
            }
        };
        Ok(Self::new(arch))
    }

    pub fn kind(&self) -> ModelKind {
        match &self.arch {
            Architecture::Vn { .. } => ModelKind::Vn,
            Architecture::Hln(_) => ModelKind::Hln,
            Architecture::San(_) => ModelKind::San,
            Architecture::Iptn(_) => ModelKind::Iptn,
            Architecture::HubMulti(_) => ModelKind::HubMulti,
        }
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn input_width(&self) -> usize {
        match &self.arch {
            Architecture::Vn { net } => net.input_width(),
            Architecture::Hln(h) | Architecture::HubMulti(h) => h.trunk.input_width(),
            Architecture::San(s) => s.first.inputs(),
            Architecture::Iptn(i) => i.net.input_width(),
        }
    }

    fn forward_impl(&self, x: &[f64], counter: Option<&PassCounter>) -> Result<f64> {
        match &self.arch {
            Architecture::Vn { net } => {
                if let Some(c) = counter {
                    c.add_trunk(1);
                }
                Ok(net.predict(x)?[0])
            }
            Architecture::Hln(h) | Architecture::HubMulti(h) => h.forward(x, counter),
            Architecture::San(s) => s.forward(x, counter),
            Architecture::Iptn(i) => i.forward(x, counter),
        }
    }

    /// Counted inference.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.forward_impl(x, Some(&self.counter))
    }

    /// Inference that leaves the pass counter untouched (used for monitoring).
    pub fn evaluate_quiet(&self, x: &[f64]) -> Result<f64> {
        self.forward_impl(x, None)
    }

    pub fn param_count(&self) -> usize {
        match &self.arch {
            Architecture::Vn { net } => net.param_count(),
            Architecture::Hln(h) | Architecture::HubMulti(h) => h.param_count(),
            Architecture::San(s) => s.param_count(),
            Architecture::Iptn(i) => i.net.param_count(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.arch {
            Architecture::Vn { net } => net.params(),
            Architecture::Hln(h) | Architecture::HubMulti(h) => h.params(),
            Architecture::San(s) => s.params(),
            Architecture::Iptn(i) => i.net.params(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(NnError::ParamLength {
                expected: self.param_count(),
                got: p.len(),
            }
            .into());
        }
        match &mut self.arch {
            Architecture::Vn { net } => net.set_params(p)?,
            Architecture::Hln(h) | Architecture::HubMulti(h) => h.set_params(p)?,
            Architecture::San(s) => s.set_params(p)?,
            Architecture::Iptn(i) => i.net.set_params(p)?,
        }
        Ok(())
    }

    /// Adds `dl_dy · ∂y/∂θ` into `acc` and returns `y`.
    pub fn accumulate_grad(&self, x: &[f64], dl_dy: f64, acc: &mut [f64]) -> Result<f64> {
        self.accumulate_grad_impl(x, dl_dy, acc, Some(&self.counter))
    }

    fn accumulate_grad_impl(&self, x: &[f64], dl_dy: f64, acc: &mut [f64], counter: Option<&PassCounter>) -> Result<f64> {
        match &self.arch {
            Architecture::Vn { net } => {
                if let Some(c) = counter {
                    c.add_trunk(1);
                }
                let (y, cache) = net.forward(x)?;
                net.backward_into(&cache, &[dl_dy], acc)?;
                Ok(y[0])
            }
            Architecture::Iptn(IptNetwork { net, symmetry }) => {
                let r = symmetry.reparam(x)?;
                if let Some(c) = counter {
                    c.add_trunk(1);
                }
                if r.vanishes {
                    return Ok(0.0);
                }
                let (y, cache) = net.forward(&r.point)?;
                net.backward_into(&cache, &[dl_dy * r.sign], acc)?;
                Ok(r.sign * y[0])
            }
            Architecture::Hln(h) | Architecture::HubMulti(h) => h.accumulate_grad(x, dl_dy, acc, counter),
            Architecture::San(s) => s.accumulate_grad(x, dl_dy, acc, counter),
        }
    }

    /// Full-batch gradient of the MSE, uncounted. Used by gradient checks.
    pub fn mse_gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = xs.len() as f64;
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (x, &t) in xs.iter().zip(ys) {
            let y = self.evaluate_quiet(x)?;
            let r = y - t;
            loss += r * r / m;
            self.accumulate_grad_impl(x, 2.0 * r / m, &mut grad, None)?;
        }
        Ok((loss, grad))
    }
}

impl Evaluate for SymmetricModel {
    fn input_dim(&self) -> usize {
        self.input_width()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.forward(x).expect("input width")
    }
}

/// Monitoring hook run after each epoch; returns the violation to record.
pub type ViolationProbe<'a> = dyn Fn(&SymmetricModel) -> f64 + 'a;

/// Full-batch MSE regression with Adam.
///
/// IPTN data are moved into the PID once, before the first epoch. Each
/// record holds the loss at the start of its epoch and the violation and
/// cumulative trunk passes after its update.
pub fn train_regression(
    model: &mut SymmetricModel,
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &TrainConfig,
    probe: Option<&ViolationProbe<'_>>,
) -> Result<Vec<RunRecord>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(ArchError::BadDataset);
    }
    let (xs, ys) = match &model.arch {
        Architecture::Iptn(i) => crate::symmetry::reparam_dataset(xs, ys, &i.symmetry)?,
        _ => (xs.to_vec(), ys.to_vec()),
    };
    let m = xs.len() as f64;
    let mut adam = AdamState::new(model.param_count(), cfg.lr);
    let mut params = model.params();
    let mut records = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (x, &t) in xs.iter().zip(&ys) {
            // One counted pass per sample; the backward reuses its activations.
            let y = match &model.arch {
                Architecture::Vn { net } | Architecture::Iptn(IptNetwork { net, .. }) => {
                    model.counter.add_trunk(1);
                    let (y, cache) = net.forward(x)?;
                    let r = y[0] - t;
                    net.backward_into(&cache, &[2.0 * r / m], &mut grad)?;
                    y[0]
                }
                _ => {
                    let y = model.evaluate_quiet(x)?;
                    model.accumulate_grad(x, 2.0 * (y - t) / m, &mut grad)?;
                    y
                }
            };
            loss += (y - t) * (y - t) / m;
        }
        adam.step(&mut params, &grad)?;
        model.set_params(&params)?;
        let violation = probe.map_or(f64::NAN, |p| p(model));
        records.push(RunRecord {
            epoch,
            train_loss: loss,
            violation,
            trunk_evals: model.counter.snapshot().trunk_evals,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(records)
}

/// MSE of the model on a dataset, without touching the counter.
pub fn dataset_mse(model: &SymmetricModel, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
    let pred = xs.iter().map(|x| model.evaluate_quiet(x)).collect::<Result<Vec<_>>>()?;
    Ok(nn::mse_loss(&pred, ys)?)
}

/// Search window for [`audit_activation`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuditGrid {
    pub b_min: f64,
    pub b_max: f64,
    pub b_step: f64,
    /// The z window is `±(z_half_width + |b|)`, so the shifted argument `b + z`
    /// always reaches `±z_half_width`.
    pub z_half_width: f64,
    pub z_points: usize,
}

impl Default for AuditGrid {
    fn default() -> Self {
        Self {
            b_min: -10.0,
            b_max: 10.0,
            b_step: 1e-3,
            z_half_width: 8.0,
            z_points: 256,
        }
    }
}

impl AuditGrid {
    pub fn b_values(&self) -> Vec<f64> {
        let n = ((self.b_max - self.b_min) / self.b_step).round() as i64;
        let first = (self.b_min / self.b_step).round() as i64;
        (0..=n).map(|i| (first + i) as f64 * self.b_step).collect()
    }

    fn z_values(&self, b: f64) -> Vec<f64> {
        let half = self.z_half_width + b.abs();
        let n = self.z_points.max(2);
        (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditVerdict {
    Unsafe,
    SafeOnGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsafePointReport {
    pub activation: Activation,
    pub parity: Parity,
    /// Isolated unsafe biases, refined below the grid step.
    pub found: Vec<f64>,
    /// Ranges of the grid where every bias is unsafe.
    pub intervals: Vec<(f64, f64)>,
    pub search_grid: String,
    pub verdict: AuditVerdict,
}

impl fmt::Display for UnsafePointReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.parity.is_even() { "+" } else { "-" };
        match self.verdict {
            AuditVerdict::SafeOnGrid => write!(f, "SAFE{tag} on grid {}", self.search_grid),
            AuditVerdict::Unsafe => {
                let mut items: Vec<(f64, String)> = self.found.iter().map(|&b| (b, format_bias(b))).collect();
                items.extend(
                    self.intervals
                        .iter()
                        .map(|&(lo, hi)| (lo, format!("[{},{}]", format_bias(lo), format_bias(hi)))),
                );
                items.sort_by(|a, b| a.0.total_cmp(&b.0));
                let values: Vec<String> = items.into_iter().map(|(_, s)| s).collect();
                write!(f, "UNSAFE{tag} at b*={}", values.join(","))
            }
        }
    }
}

fn format_bias(b: f64) -> String {
    let s = format!("{:.3}", b);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" || s.is_empty() {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// `max_z |σ(b+z) + σ(b−z) − 2σ(b)|` for even parity (oddness of `σ_b`),
/// `max_z |σ(b+z) − σ(b−z)|` for odd parity (evenness of `σ(b + ·)`).
pub fn audit_residual(act: Activation, b: f64, parity: Parity, grid: &AuditGrid) -> f64 {
    let base = act.value(b);
    grid.z_values(b)
        .into_iter()
        .map(|z| match parity {
            Parity::Even => ((act.value(b + z) - base) + (act.value(b - z) - base)).abs(),
            Parity::Odd => (act.value(b + z) - act.value(b - z)).abs(),
        })
        .fold(0.0, f64::max)
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if hi - lo <= 1e-13 * (1.0 + lo.abs()) {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Grid search for biases `b*` at which the symmetrized activation loses
/// expressivity. Grid local minima of the residual are refined by
/// golden-section search; values whose residual is at most `tol` are reported.
pub fn audit_activation(act: Activation, grid: &AuditGrid, tol: f64, parity: Parity) -> UnsafePointReport {
    let bs = grid.b_values();
    let r: Vec<f64> = bs.iter().map(|&b| audit_residual(act, b, parity, grid)).collect();
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for i in 0..bs.len() {
        if r[i] <= tol {
            candidates.push((bs[i], r[i]));
        }
        let left_higher = i == 0 || r[i] < r[i - 1];
        let right_not_lower = i + 1 == bs.len() || r[i] <= r[i + 1];
        if left_higher && right_not_lower && i > 0 && i + 1 < bs.len() {
            let (b, v) = golden_min(|b| audit_residual(act, b, parity, grid), bs[i - 1], bs[i + 1]);
            if v <= tol {
                candidates.push((b, v));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Chains of candidates closer than two grid steps form one group. A group
    // wider than a few steps is a continuum of unsafe biases, not a point.
    let mut groups: Vec<Vec<(f64, f64)>> = Vec::new();
    for c in candidates {
        match groups.last_mut() {
            Some(g) if c.0 - g.last().expect("nonempty group").0 <= 2.0 * grid.b_step => g.push(c),
            _ => groups.push(vec![c]),
        }
    }
    let mut found = Vec::new();
    let mut intervals = Vec::new();
    for g in groups {
        let (lo, hi) = (g[0].0, g[g.len() - 1].0);
        if hi - lo > 4.0 * grid.b_step {
            intervals.push((lo, hi));
        } else {
            let best = g.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty group");
            found.push(best.0);
        }
    }
    UnsafePointReport {
        activation: act,
        parity,
        verdict: if found.is_empty() && intervals.is_empty() {
            AuditVerdict::SafeOnGrid
        } else {
            AuditVerdict::Unsafe
        },
        search_grid: format!(
            "b in [{}, {}] step {}, {} z points in ±({} + |b|), tol {tol:e}",
            grid.b_min, grid.b_max, grid.b_step, grid.z_points, grid.z_half_width
        ),
        found,
        intervals,
    }
}

/// Gradient magnitudes of a symmetrized first layer under `A = −I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpressivityProbe {
    pub max_weight_grad: f64,
    pub max_input_grad: f64,
    pub fd_max_weight_grad: f64,
    pub fd_max_input_grad: f64,
}

/// Builds a symmetrized first layer with the given activation and every bias
/// fixed to `bias`, under inversion `A = −I₂`, and reports the largest
/// first-layer gradient with respect to weights and inputs over random inputs,
/// both analytically and by central differences.
pub fn expressivity_probe(act: Activation, bias: f64, width: usize, seed: u64) -> Result<ExpressivityProbe> {
    let n = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = DenseLayer::new(xavier_with(width, n, &mut rng), vec![bias; width], act)?;
    let rest = Mlp::with_rng(&[width, 1], Activation::Identity, Activation::Identity, &mut rng)?;
    let san = SaNetwork::new(first, rest, InvolutorySpec::inversion(n, Parity::Even))?;

    // The activation is exactly constant when the layer is frozen, so a wide
    // step keeps difference noise far below the reporting threshold.
    let h = 1e-3;
    let mut probe = ExpressivityProbe {
        max_weight_grad: 0.0,
        max_input_grad: 0.0,
        fd_max_weight_grad: 0.0,
        fd_max_input_grad: 0.0,
    };
    for _ in 0..64 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (dw, dx) = san.first_layer_jacobians(&x)?;
        for i in 0..width {
            probe.max_weight_grad = dw[i].iter().fold(probe.max_weight_grad, |m, v| m.max(v.abs()));
            probe.max_input_grad = dx[i].iter().fold(probe.max_input_grad, |m, v| m.max(v.abs()));

            let node = |net: &SaNetwork, x: &[f64]| net.first_layer_activations(x).expect("width")[i];
            let fd_x = finite_diff_grad(|xx| node(&san, xx), &x, h);
            let w0 = san.first.w.row(i).to_vec();
            let fd_w = finite_diff_grad(
                |w| {
                    let mut s = san.clone();
                    for (j, &v) in w.iter().enumerate() {
                        s.first.w[(i, j)] = v;
                    }
                    node(&s, &x)
                },
                &w0,
                h,
            );
            probe.fd_max_input_grad = fd_x.iter().fold(probe.fd_max_input_grad, |m, v| m.max(v.abs()));
            probe.fd_max_weight_grad = fd_w.iter().fold(probe.fd_max_weight_grad, |m, v| m.max(v.abs()));
        }
    }
    Ok(probe)
}

/// Sigmoid, zero bias: the frozen configuration.
pub fn demonstrate_no_expressivity(width: usize, seed: u64) -> Result<ExpressivityProbe> {
    expressivity_probe(Activation::Sigmoid, 0.0, width, seed)
}
