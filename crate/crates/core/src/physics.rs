//! Hamiltonian neural network on the ideal spring `H = kq²/2 + p²/(2m)`.
//!
//! The network learns `H_θ(q, p)` from noisy `(q̇, ṗ)` by matching
//! `∂H_θ/∂p ≈ q̇` and `∂H_θ/∂q ≈ −ṗ`. With `use_ipt` the network sees only the
//! quadrant `q ≥ 0, p ≥ 0` (two single-coordinate blocks, both even), so
//! `H_θ` is invariant under each sign flip by construction.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::metrics::{violation_metric, RunRecord};
use crate::nn::{Activation, AdamState, Evaluate, InputGradient, Mlp, NnError, TrainConfig};
use crate::symmetry::{BlockInvarianceSpec, Parity, Reparameterize, SymmetryError, SymmetrySpec};

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error("invalid spring config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

/// Divergence threshold for rollouts.
pub const DIVERGENCE_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub q: f64,
    pub p: f64,
    pub qdot: f64,
    pub pdot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpringConfig {
    pub k: f64,
    pub m: f64,
    pub samples: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub amplitude_range: (f64, f64),
}

impl Default for SpringConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            m: 1.0,
            samples: 1000,
            noise_std: 0.05,
            seed: 0,
            amplitude_range: (0.5, 1.5),
        }
    }
}

impl SpringConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.amplitude_range;
        if !(self.k > 0.0 && self.m > 0.0) {
            return Err(PhysicsError::Config("k and m must be positive".into()));
        }
        if !(0.0 <= r0 && r0 < r1 && r1.is_finite()) {
            return Err(PhysicsError::Config(format!("bad amplitude range [{r0}, {r1}]")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PhysicsError::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn energy(&self, q: f64, p: f64) -> f64 {
        0.5 * self.k * q * q + p * p / (2.0 * self.m)
    }

    /// Closed-form trajectory from `(q0, p0)` at time `t`.
    pub fn exact_state(&self, q0: f64, p0: f64, t: f64) -> (f64, f64) {
        let w = (self.k / self.m).sqrt();
        let (s, c) = (w * t).sin_cos();
        (q0 * c + p0 / (self.m * w) * s, -self.m * w * q0 * s + p0 * c)
    }

    /// The true Hamiltonian as a model with analytic gradient.
    pub fn true_hamiltonian(&self) -> TrueHamiltonian {
        TrueHamiltonian { k: self.k, m: self.m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueHamiltonian {
    pub k: f64,
    pub m: f64,
}

impl Evaluate for TrueHamiltonian {
    fn input_dim(&self) -> usize {
        2
    }

    fn eval(&self, z: &[f64]) -> f64 {
        0.5 * self.k * z[0] * z[0] + z[1] * z[1] / (2.0 * self.m)
    }
}

impl InputGradient for TrueHamiltonian {
    fn input_gradient(&self, z: &[f64]) -> Vec<f64> {
        vec![self.k * z[0], z[1] / self.m]
    }
}

/// `(q, p)` uniform over the annulus `r0 ≤ ‖(q, p)‖ ≤ r1`; derivatives from
/// Hamilton's equations plus Gaussian noise.
pub fn gen_spring_data(cfg: &SpringConfig) -> Result<Vec<PhaseSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (r0, r1) = cfg.amplitude_range;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| PhysicsError::Config(e.to_string()))?;
    Ok((0..cfg.samples)
        .map(|_| {
            let r = rng.random_range(r0 * r0..=r1 * r1).sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (q, p) = (r * theta.cos(), r * theta.sin());
            let (e1, e2) = if cfg.noise_std > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            PhaseSample {
                q,
                p,
                qdot: p / cfg.m + e1,
                pdot: -cfg.k * q + e2,
            }
        })
        .collect())
}

/// Residuals `(∂H/∂q + ṗ, ∂H/∂p − q̇)` of one sample.
fn residual(grad: &[f64], s: &PhaseSample) -> [f64; 2] {
    [grad[0] + s.pdot, grad[1] - s.qdot]
}

/// `mean[(∂H/∂p − q̇)² + (∂H/∂q + ṗ)²]` for any model with input gradients.
pub fn hnn_loss_value<M: InputGradient + ?Sized>(model: &M, batch: &[PhaseSample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch
        .iter()
        .map(|s| {
            let r = residual(&model.input_gradient(&[s.q, s.p]), s);
            r[0] * r[0] + r[1] * r[1]
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// A learned Hamiltonian, optionally behind the PID reparameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnnModel {
    pub net: Mlp,
    pub symmetry: Option<SymmetrySpec>,
}

impl HnnModel {
    pub fn new(cfg: &TrainConfig, use_ipt: bool) -> Result<Self> {
        let mut sizes = vec![2];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, cfg.activation, Activation::Identity, cfg.seed)?,
            symmetry: use_ipt.then(quadrant_symmetry),
        })
    }

    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        match &self.symmetry {
            None => Ok(self.net.predict(z)?[0]),
            Some(s) => {
                let r = s.reparam(z)?;
                if r.vanishes {
                    return Ok(0.0);
                }
                Ok(r.sign * self.net.predict(&r.point)?[0])
            }
        }
    }

    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        match &self.symmetry {
            None => Ok(self.net.input_gradient(z)?),
            Some(s) => {
                let r = s.reparam(z)?;
                if r.vanishes {
                    return Ok(vec![0.0; z.len()]);
                }
                let g = s.jacobian_transpose_apply(&r, &self.net.input_gradient(&r.point)?);
                Ok(g.into_iter().map(|v| r.sign * v).collect())
            }
        }
    }

    /// Loss and its parameter gradient through the input-gradient computation.
    pub fn loss_and_grad(&self, batch: &[PhaseSample]) -> Result<(f64, Vec<f64>)> {
        let m = batch.len() as f64;
        let mut grad = vec![0.0; self.net.param_count()];
        let mut loss = 0.0;
        for s in batch {
            let z = [s.q, s.p];
            let (point, sign, reparam) = match &self.symmetry {
                None => (z.to_vec(), 1.0, None),
                Some(sym) => {
                    let r = sym.reparam(&z)?;
                    if r.vanishes {
                        loss += (s.pdot * s.pdot + s.qdot * s.qdot) / m;
                        continue;
                    }
                    (r.point.clone(), r.sign, Some(r))
                }
            };
            let g_inner = self.net.input_gradient(&point)?;
            let g = match (&self.symmetry, &reparam) {
                (Some(sym), Some(r)) => sym.jacobian_transpose_apply(r, &g_inner).into_iter().map(|v| sign * v).collect(),
                _ => g_inner,
            };
            let res = residual(&g, s);
            loss += (res[0] * res[0] + res[1] * res[1]) / m;
            // ∇H = sign·Jᵀ∇net(x′), so ∂L/∂θ = ∂/∂θ [cᵀ∇net(x′)] with c = (2/m)·sign·J·res.
            let scaled = [2.0 * res[0] / m, 2.0 * res[1] / m];
            let c: Vec<f64> = match (&self.symmetry, &reparam) {
                (Some(sym), Some(r)) => sym.jacobian_apply(r, &scaled).into_iter().map(|v| sign * v).collect(),
                _ => scaled.to_vec(),
            };
            self.net.directional_gradient_backward(&point, &c, &mut grad)?;
        }
        Ok((loss, grad))
    }
}

impl Evaluate for HnnModel {
    fn input_dim(&self) -> usize {
        2
    }

    fn eval(&self, z: &[f64]) -> f64 {
        self.energy(z).expect("phase point")
    }
}

impl InputGradient for HnnModel {
    fn input_gradient(&self, z: &[f64]) -> Vec<f64> {
        self.gradient(z).expect("phase point")
    }
}

/// Two single-coordinate blocks (`q ↦ −q`, `p ↦ −p`), both even.
pub fn quadrant_symmetry() -> SymmetrySpec {
    BlockInvarianceSpec::sign_flips(2, &[(0, Parity::Even), (1, Parity::Even)])
        .expect("valid blocks")
        .into()
}

pub fn hnn_loss(model: &HnnModel, batch: &[PhaseSample]) -> Result<(f64, Vec<f64>)> {
    model.loss_and_grad(batch)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Model energy `H_θ` at each state.
    pub energy: Vec<f64>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `t,q,p,energy` with round-trippable floats.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,q,p,energy\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.t[i], self.q[i], self.p[i], self.energy[i]
            );
        }
        s
    }
}

fn field<M: InputGradient + ?Sized>(model: &M, z: [f64; 2]) -> [f64; 2] {
    let g = model.input_gradient(&z);
    [g[1], -g[0]]
}

/// Classical RK4 on `ż = (∂H/∂p, −∂H/∂q)`. Stops early, flagged, once `‖z‖ > 10³`.
pub fn rollout<M: InputGradient + ?Sized>(model: &M, z0: [f64; 2], dt: f64, steps: usize) -> Trajectory {
    assert!(dt > 0.0, "dt must be positive");
    let mut tr = Trajectory::default();
    let mut z = z0;
    let push = |tr: &mut Trajectory, i: usize, z: [f64; 2]| {
        tr.t.push(i as f64 * dt);
        tr.q.push(z[0]);
        tr.p.push(z[1]);
        tr.energy.push(model.eval(&z));
    };
    push(&mut tr, 0, z);
    for i in 1..=steps {
        let k1 = field(model, z);
        let k2 = field(model, [z[0] + 0.5 * dt * k1[0], z[1] + 0.5 * dt * k1[1]]);
        let k3 = field(model, [z[0] + 0.5 * dt * k2[0], z[1] + 0.5 * dt * k2[1]]);
        let k4 = field(model, [z[0] + dt * k3[0], z[1] + dt * k3[1]]);
        for d in 0..2 {
            z[d] += dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        let r = z[0].hypot(z[1]);
        if r.is_nan() || r > DIVERGENCE_NORM {
            tr.diverged = true;
            break;
        }
        push(&mut tr, i, z);
    }
    tr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub z0: [f64; 2],
    pub dt: f64,
    pub steps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            z0: [1.0, 0.0],
            dt: 0.05,
            steps: 400,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HnnReport {
    pub model: HnnModel,
    pub records: Vec<RunRecord>,
    pub trajectory: Trajectory,
    /// Closed-form states at the rollout times.
    pub reference: Trajectory,
    /// Mean of `(q − q_ref)² + (p − p_ref)²` over the rollout.
    pub coord_mse: f64,
    /// Variance of `H_θ` along the rollout.
    pub energy_variance: f64,
    /// Variance of the true spring energy of the predicted states.
    pub true_energy_variance: f64,
    /// `V₊` under `(q, p) ↦ (−q, −p)` on a phase grid.
    pub violation: f64,
}

/// Uniform grid on `[−r, r]²`, `n` points per side, mirrored so that each
/// coordinate list is closed under negation.
pub fn phase_grid(r: f64, n: usize) -> Vec<Vec<f64>> {
    let axis = crate::metrics::mirrored_axis(r, n);
    axis.iter().flat_map(|&q| axis.iter().map(move |&p| vec![q, p])).collect()
}

/// Trains a Hamiltonian network with full-batch Adam, then rolls it out and
/// compares with the closed-form spring.
pub fn run_hnn_experiment(spring: &SpringConfig, use_ipt: bool, train: &TrainConfig, roll: &RolloutConfig) -> Result<HnnReport> {
    let data = gen_spring_data(spring)?;
    let mut model = HnnModel::new(train, use_ipt)?;
    let grid = phase_grid(spring.amplitude_range.1, 21);
    let neg = Matrix::from_diag(&[-1.0, -1.0]);
    let mut adam = AdamState::new(model.net.param_count(), train.lr);
    let mut params = model.net.params();
    let mut records = Vec::with_capacity(train.epochs);
    let start = Instant::now();
    for epoch in 1..=train.epochs {
        let (loss, grad) = model.loss_and_grad(&data)?;
        adam.step(&mut params, &grad)?;
        model.net.set_params(&params)?;
        records.push(RunRecord {
            epoch,
            train_loss: loss,
            violation: violation_metric(&model, &grid, &neg, Parity::Even).expect("nonempty grid"),
            trunk_evals: (epoch * data.len()) as u64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let trajectory = rollout(&model, roll.z0, roll.dt, roll.steps);
    let h_true = spring.true_hamiltonian();
    let mut reference = Trajectory::default();
    let mut sq = 0.0;
    for i in 0..trajectory.len() {
        let t = trajectory.t[i];
        let (q, p) = spring.exact_state(roll.z0[0], roll.z0[1], t);
        reference.t.push(t);
        reference.q.push(q);
        reference.p.push(p);
        reference.energy.push(h_true.eval(&[q, p]));
        sq += (trajectory.q[i] - q).powi(2) + (trajectory.p[i] - p).powi(2);
    }
    let coord_mse = sq / trajectory.len() as f64;
    let (_, std) = crate::metrics::mean_std(&trajectory.energy);
    let true_energy: Vec<f64> = (0..trajectory.len())
        .map(|i| h_true.eval(&[trajectory.q[i], trajectory.p[i]]))
        .collect();
    let (_, true_std) = crate::metrics::mean_std(&true_energy);
    Ok(HnnReport {
        violation: violation_metric(&model, &grid, &neg, Parity::Even).expect("nonempty grid"),
        model,
        records,
        trajectory,
        reference,
        coord_mse,
        energy_variance: std * std,
        true_energy_variance: true_std * true_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad;

    #[test]
    fn zero_noise_data_satisfies_hamiltons_equations() {
        for m in [1.0, 2.0] {
            let cfg = SpringConfig {
                noise_std: 0.0,
                m,
                k: 3.0,
                samples: 200,
                ..SpringConfig::default()
            };
            for s in gen_spring_data(&cfg).unwrap() {
                assert_eq!(s.qdot * m, s.p);
                assert_eq!(s.pdot, -3.0 * s.q);
                let r = s.q.hypot(s.p);
                assert!((0.5 - 1e-12..=1.5 + 1e-12).contains(&r));
            }
        }
    }

    #[test]
    fn noise_moment() {
        let cfg = SpringConfig {
            samples: 10_000,
            seed: 3,
            ..SpringConfig::default()
        };
        let d = gen_spring_data(&cfg).unwrap();
        let e: Vec<f64> = d.iter().map(|s| s.qdot - s.p).collect();
        let (_, std) = crate::metrics::mean_std(&e);
        assert!((std - 0.05).abs() <= 0.005, "{std}");
    }

    #[test]
    fn loss_of_true_and_zero_models() {
        let cfg = SpringConfig {
            noise_std: 0.0,
            ..SpringConfig::default()
        };
        let d = gen_spring_data(&cfg).unwrap();
        assert_eq!(hnn_loss_value(&cfg.true_hamiltonian(), &d), 0.0);
        let zero = crate::nn::FnModel::with_gradient(2, |_: &[f64]| 0.0, |_: &[f64]| vec![0.0, 0.0]);
        let expected = d.iter().map(|s| s.qdot * s.qdot + s.pdot * s.pdot).sum::<f64>() / d.len() as f64;
        assert!((hnn_loss_value(&zero, &d) - expected).abs() <= 1e-15);
    }

    #[test]
    fn true_loss_approaches_twice_noise_variance() {
        let cfg = SpringConfig {
            samples: 20_000,
            seed: 4,
            ..SpringConfig::default()
        };
        let d = gen_spring_data(&cfg).unwrap();
        let l = hnn_loss_value(&cfg.true_hamiltonian(), &d);
        assert!((l / (2.0 * 0.05 * 0.05) - 1.0).abs() <= 0.05, "{l}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let d = gen_spring_data(&SpringConfig {
            samples: 12,
            ..SpringConfig::default()
        })
        .unwrap();
        for use_ipt in [false, true] {
            let cfg = TrainConfig {
                hidden: vec![5, 4],
                activation: Activation::Tanh,
                seed: 9,
                ..TrainConfig::default()
            };
            let model = HnnModel::new(&cfg, use_ipt).unwrap();
            let (_, g) = model.loss_and_grad(&d).unwrap();
            let p0 = model.net.params();
            let fd = finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    m.net.set_params(p).unwrap();
                    hnn_loss_value(&m, &d)
                },
                &p0,
                1e-5,
            );
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "ipt={use_ipt}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rk4_conserves_true_energy() {
        let h = SpringConfig::default().true_hamiltonian();
        let tr = rollout(&h, [1.0, 0.0], 0.01, 2000);
        assert_eq!(tr.len(), 2001);
        let drift = tr.energy.iter().map(|e| (e - 0.5).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-6, "{drift}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let spring = SpringConfig::default();
        let h = spring.true_hamiltonian();
        let period = std::f64::consts::TAU;
        let err = |n: usize| {
            let tr = rollout(&h, [1.0, 0.0], period / n as f64, n);
            let (q, p) = spring.exact_state(1.0, 0.0, period);
            (tr.q[n] - q).hypot(tr.p[n] - p)
        };
        let ratio = err(50) / err(100);
        assert!((ratio - 16.0).abs() <= 1.0, "{ratio}");
    }

    #[test]
    fn zero_model_is_stationary_and_blowup_is_flagged() {
        let zero = crate::nn::FnModel::with_gradient(2, |_: &[f64]| 0.0, |_: &[f64]| vec![0.0, 0.0]);
        let tr = rollout(&zero, [0.3, -0.2], 0.1, 10);
        assert!(tr.q.iter().all(|&q| q == 0.3) && tr.p.iter().all(|&p| p == -0.2));
        // H = −p³ gives q̇ = −3p²: escapes quickly.
        let wild = crate::nn::FnModel::with_gradient(2, |z: &[f64]| -z[1].powi(3), |z: &[f64]| vec![0.0, -3.0 * z[1] * z[1]]);
        let tr = rollout(&wild, [0.0, 50.0], 0.1, 100);
        assert!(tr.diverged && tr.len() < 101);
    }

    #[test]
    fn ipt_model_is_even_and_its_flow_is_odd() {
        let cfg = TrainConfig {
            hidden: vec![6, 6],
            activation: Activation::Tanh,
            seed: 2,
            ..TrainConfig::default()
        };
        let model = HnnModel::new(&cfg, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            assert_eq!(model.eval(&z), model.eval(&[-z[0], -z[1]]));
            let (a, b) = (field(&model, z), field(&model, [-z[0], -z[1]]));
            assert_eq!([a[0], a[1]], [-b[0], -b[1]]);
        }
        let z0 = [0.83, 0.27];
        let a = rollout(&model, z0, 0.05, 200);
        let b = rollout(&model, [-z0[0], -z0[1]], 0.05, 200);
        for i in 0..a.len() {
            assert_eq!((a.q[i], a.p[i]), (-b.q[i], -b.p[i]));
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let h = SpringConfig::default().true_hamiltonian();
        let csv = rollout(&h, [1.0, 0.0], 0.1, 3).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,q,p,energy");
        assert_eq!(lines.len(), 5);
        let f: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f, vec![0.0, 1.0, 0.0, 0.5]);
    }
}
