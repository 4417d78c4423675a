//! Experiment orchestration: JSON configs in, CSV and JSON artifacts out.
//!
//! Every command resolves its configuration by overlaying the user's JSON on
//! the task defaults, writes its artifacts under the output directory, and
//! finishes with `manifest.json` (config hash, seed, artifact list).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{dataset_mse, train_regression, ArchError, AuditGrid, AuditVerdict, BuildOptions, ModelKind, SymmetricModel};
use crate::cnn::{self, chimera_probe_set, cnn_train, synth_symmetric_dataset, CnnError, CnnTrainConfig, ConvSpec, FlipAxis};
use crate::metrics::{mean_std, mirrored_axis, records_to_csv, violation_metric_with, RunRecord};
use crate::nn::{Activation, Evaluate, TrainConfig};
use crate::physics::{run_hnn_experiment, PhysicsError, RolloutConfig, SpringConfig};
use crate::symmetry::{BlockInvarianceSpec, InvolutorySpec, Parity, SymmetryError, SymmetrySpec};

/// Overrides the configured output directory.
pub const OUT_ENV: &str = "INVOLUTE_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for everything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) | HarnessError::Io(_) => 3,
        }
    }
}

impl From<ArchError> for HarnessError {
    fn from(e: ArchError) -> Self {
        match e {
            ArchError::UnsupportedParity | ArchError::TooManyBlocks(_) | ArchError::Incompatible { .. } => {
                HarnessError::Config(e.to_string())
            }
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<SymmetryError> for HarnessError {
    fn from(e: SymmetryError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<PhysicsError> for HarnessError {
    fn from(e: PhysicsError) -> Self {
        match e {
            PhysicsError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<CnnError> for HarnessError {
    fn from(e: CnnError) -> Self {
        match e {
            CnnError::Io(e) => HarnessError::Io(e),
            CnnError::BadKernel(_) | CnnError::FilterTooLarge { .. } | CnnError::BadLabel { .. } => HarnessError::Config(e.to_string()),
            CnnError::BadMagic
            | CnnError::MalformedHeader(_)
            | CnnError::ZeroMaxval
            | CnnError::TruncatedFile { .. }
            | CnnError::Dataset(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Toy1d,
    Toy2d,
    Hnn,
    Cnn,
    PidCheck,
    Audit,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Toy1d => "toy1d",
            Task::Toy2d => "toy2d",
            Task::Hnn => "hnn",
            Task::Cnn => "cnn",
            Task::PidCheck => "pid-check",
            Task::Audit => "audit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Vn,
    Hln,
    San,
    Iptn,
    HubMulti,
    Vcnn,
    Ikcnn,
}

impl ModelChoice {
    fn regression_kind(self) -> Option<ModelKind> {
        Some(match self {
            ModelChoice::Vn => ModelKind::Vn,
            ModelChoice::Hln => ModelKind::Hln,
            ModelChoice::San => ModelKind::San,
            ModelChoice::Iptn => ModelKind::Iptn,
            ModelChoice::HubMulti => ModelKind::HubMulti,
            ModelChoice::Vcnn | ModelChoice::Ikcnn => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Vcnn => "vcnn",
            ModelChoice::Ikcnn => "ikcnn",
            other => other.regression_kind().expect("regression model").name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Cos,
    Sin,
}

impl Target {
    fn eval(self, x: f64) -> f64 {
        match self {
            Target::Cos => x.cos(),
            Target::Sin => x.sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub samples: usize,
    /// Training inputs are uniform in `[−train_range, train_range]^n`.
    pub train_range: f64,
    pub violation_points: usize,
    pub violation_range: f64,
    /// Points per side of the `x,y,pred` grid (toy2d).
    pub grid_resolution: usize,
    pub san_activation: Activation,
    /// Defaults to `cos` for even parity and `sin` for odd (toy1d).
    pub target: Option<Target>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            train_range: 1.5,
            violation_points: 200,
            violation_range: 3.0,
            grid_resolution: 50,
            san_activation: Activation::Swish,
            target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HnnConfig {
    pub spring: SpringConfig,
    pub rollout: RolloutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub num_filters: usize,
    pub hidden: usize,
    pub flip_axis: FlipAxis,
    pub augment: bool,
    /// Directory of `subjectNN.*` PGM files; the synthetic set is used when absent.
    pub data_dir: Option<PathBuf>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 20,
            height: 12,
            width: 12,
            kernel_size: 3,
            num_filters: 8,
            hidden: 16,
            flip_axis: FlipAxis::Horizontal,
            augment: false,
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub activations: Vec<Activation>,
    pub parity: Parity,
    pub b_min: f64,
    pub b_max: f64,
    pub b_step: f64,
    pub z_half_width: f64,
    pub z_points: usize,
    pub tol: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        let g = AuditGrid::default();
        Self {
            activations: Activation::ALL.to_vec(),
            parity: Parity::Even,
            b_min: g.b_min,
            b_max: g.b_max,
            b_step: g.b_step,
            z_half_width: g.z_half_width,
            z_points: g.z_points,
            tol: 1e-6,
        }
    }
}

impl AuditConfig {
    pub fn grid(&self) -> AuditGrid {
        AuditGrid {
            b_min: self.b_min,
            b_max: self.b_max,
            b_step: self.b_step,
            z_half_width: self.z_half_width,
            z_points: self.z_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelChoice,
    pub spec: Option<SymmetrySpec>,
    pub train: TrainConfig,
    pub repeats: usize,
    pub seed: u64,
    #[serde(alias = "outDir")]
    pub out_dir: PathBuf,
    pub toy: ToyConfig,
    pub hnn: HnnConfig,
    pub cnn: CnnConfig,
    pub audit: AuditConfig,
}

impl ExperimentConfig {
    /// Task defaults, before any user overrides.
    pub fn defaults(task: Task) -> Self {
        let mut cfg = Self {
            task,
            model: ModelChoice::Iptn,
            spec: None,
            train: TrainConfig::default(),
            repeats: 1,
            seed: 0,
            out_dir: PathBuf::from("out"),
            toy: ToyConfig::default(),
            hnn: HnnConfig::default(),
            cnn: CnnConfig::default(),
            audit: AuditConfig::default(),
        };
        match task {
            Task::Toy1d => cfg.spec = Some(InvolutorySpec::inversion(1, Parity::Even).into()),
            Task::Toy2d => {
                cfg.spec = Some(per_axis_odd().into());
                cfg.toy.samples = 400;
                cfg.toy.train_range = 3.0;
                cfg.train.hidden = vec![16, 16];
                cfg.train.epochs = 3000;
                cfg.train.noise_std = 0.1;
            }
            Task::Hnn => {
                cfg.train.hidden = vec![20, 20];
                cfg.train.epochs = 1000;
                cfg.train.activation = Activation::Tanh;
            }
            Task::Cnn => {
                cfg.model = ModelChoice::Ikcnn;
                cfg.train.epochs = 200;
                cfg.train.lr = 1e-3;
            }
            Task::PidCheck | Task::Audit => {}
        }
        cfg
    }

    /// Overlays `user` (a JSON object) on the defaults of its `task`.
    pub fn from_json(user: &Value) -> Result<Self> {
        let task: Task = serde_json::from_value(
            user.get("task")
                .cloned()
                .ok_or_else(|| HarnessError::Config("missing \"task\"".into()))?,
        )
        .map_err(|e| HarnessError::Config(format!("task: {e}")))?;
        Self::from_json_for(task, user)
    }

    pub fn from_json_for(task: Task, user: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::defaults(task)).expect("defaults serialize");
        if !user.is_object() {
            return Err(HarnessError::Config("config must be a JSON object".into()));
        }
        merge(&mut base, user);
        base["task"] = serde_json::to_value(task).expect("task serializes");
        let cfg: Self = serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if matches!(self.task, Task::Toy1d | Task::Toy2d | Task::Hnn | Task::Cnn) {
            self.train.validate().map_err(HarnessError::Config)?;
        }
        let cnn_model = matches!(self.model, ModelChoice::Vcnn | ModelChoice::Ikcnn);
        match self.task {
            Task::Cnn if !cnn_model => return bad(format!("task cnn needs model vcnn or ikcnn, got {}", self.model.name())),
            Task::Toy1d | Task::Toy2d if cnn_model => return bad(format!("model {} belongs to task cnn", self.model.name())),
            Task::Hnn if !matches!(self.model, ModelChoice::Vn | ModelChoice::Iptn) => {
                return bad(format!("task hnn supports vn and iptn, got {}", self.model.name()))
            }
            Task::Hnn if self.train.activation == Activation::Relu => {
                return bad("relu has no second derivative; pick a smooth activation for hnn".into())
            }
            _ => {}
        }
        if matches!(self.task, Task::Toy1d | Task::Toy2d) {
            let dim = if self.task == Task::Toy1d { 1 } else { 2 };
            let spec = self
                .spec
                .as_ref()
                .ok_or_else(|| HarnessError::Config("a spec is required".into()))?;
            if crate::symmetry::Reparameterize::dim(spec) != dim {
                return bad(format!("{} needs a {dim}-dimensional spec", self.task.name()));
            }
            if self.toy.samples == 0 || self.toy.violation_points == 0 {
                return bad("samples and violation_points must be positive".into());
            }
            if self.task == Task::Toy2d && self.toy.grid_resolution < 2 {
                return bad("grid_resolution must be at least 2".into());
            }
            build_model(self, &self.train)?;
        }
        if self.task == Task::Cnn {
            let c = &self.cnn;
            if c.data_dir.is_none() && c.classes < 2 {
                return bad("cnn needs at least two classes".into());
            }
            if c.hidden == 0 || c.num_filters == 0 {
                return bad("cnn widths must be positive".into());
            }
        }
        if self.task == Task::Audit && !(self.audit.b_step > 0.0 && self.audit.b_min <= self.audit.b_max && self.audit.z_points >= 2) {
            return bad("audit grid is empty".into());
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn parity(&self) -> Parity {
        match &self.spec {
            Some(SymmetrySpec::Single(s)) => s.parity(),
            Some(SymmetrySpec::Blocks(b)) => {
                if b.blocks().iter().all(|blk| blk.spec.parity().is_even()) {
                    Parity::Even
                } else {
                    Parity::Odd
                }
            }
            None => Parity::Even,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut Value, user: &Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() && k != "spec" => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, u) => *b = u.clone(),
    }
}

/// `x ↦ −x` and `y ↦ −y`, each odd.
pub fn per_axis_odd() -> BlockInvarianceSpec {
    BlockInvarianceSpec::sign_flips(2, &[(0, Parity::Odd), (1, Parity::Odd)]).expect("valid blocks")
}

/// Resolves the output directory: explicit flag, then `INVOLUTE_OUT`, then the config.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub model: ModelChoice,
    pub config_hash: String,
    pub seed: u64,
    pub repeats: usize,
    pub artifacts: Vec<String>,
    pub version: String,
}

/// What a command produced: written files plus human-readable summary lines.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub artifacts: Vec<String>,
    pub summary: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, cfg: &ExperimentConfig, summary: Vec<String>) -> Result<Outcome> {
        self.write(
            "config.json",
            &(serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"),
        )?;
        let manifest = Manifest {
            task: cfg.task,
            model: cfg.model,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            repeats: cfg.repeats,
            artifacts: self.artifacts.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        )?;
        self.artifacts.push("manifest.json".into());
        Ok(Outcome {
            artifacts: self.artifacts,
            summary,
        })
    }
}

/// `0.0` for exact zeros, scientific otherwise.
pub fn fmt_value(v: f64) -> String {
    if v == 0.0 {
        "0.0".into()
    } else {
        format!("{v:.6e}")
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One trained regression run.
#[derive(Debug, Clone)]
pub struct RegressionRun {
    pub repeat: usize,
    pub seed: u64,
    pub model: SymmetricModel,
    pub records: Vec<RunRecord>,
    pub final_mse: f64,
    pub violation: f64,
}

/// Synthetic regression data: targets plus Gaussian noise.
pub fn toy_dataset(cfg: &ExperimentConfig, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = rng_stream(seed, 1);
    let noise = Normal::new(0.0, cfg.train.noise_std).expect("validated noise");
    let r = cfg.toy.train_range;
    let dim = if cfg.task == Task::Toy1d { 1 } else { 2 };
    let target = cfg
        .toy
        .target
        .unwrap_or(if cfg.parity().is_even() { Target::Cos } else { Target::Sin });
    let mut xs = Vec::with_capacity(cfg.toy.samples);
    let mut ys = Vec::with_capacity(cfg.toy.samples);
    for _ in 0..cfg.toy.samples {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-r..=r)).collect();
        let clean: f64 = x.iter().map(|&v| target.eval(v)).sum();
        let eps = if cfg.train.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        xs.push(x);
        ys.push(clean + eps);
    }
    (xs, ys)
}

/// Validation points, uniform on `[−violation_range, violation_range]^n`.
pub fn violation_points(cfg: &ExperimentConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_stream(seed, 2);
    let r = cfg.toy.violation_range;
    let dim = if cfg.task == Task::Toy1d { 1 } else { 2 };
    (0..cfg.toy.violation_points)
        .map(|_| (0..dim).map(|_| rng.random_range(-r..=r)).collect())
        .collect()
}

/// `V_p` of `model` under the configured symmetry; for block specs, the sum over blocks.
pub fn toy_violation<M: Evaluate + ?Sized>(model: &M, spec: &SymmetrySpec, points: &[Vec<f64>]) -> f64 {
    let v = match spec {
        SymmetrySpec::Single(s) => violation_metric_with(model, points, |x| s.apply(x).expect("width"), s.parity()),
        SymmetrySpec::Blocks(b) => b
            .blocks()
            .iter()
            .map(|blk| {
                violation_metric_with(
                    model,
                    points,
                    |x| {
                        let mut y = x.to_vec();
                        y[blk.range()].copy_from_slice(&blk.spec.apply(&x[blk.range()]).expect("width"));
                        y
                    },
                    blk.spec.parity(),
                )
            })
            .sum::<std::result::Result<f64, _>>(),
    };
    v.expect("nonempty validation set")
}

fn build_model(cfg: &ExperimentConfig, train: &TrainConfig) -> Result<SymmetricModel> {
    let kind = cfg.model.regression_kind().expect("validated");
    let dim = if cfg.task == Task::Toy1d { 1 } else { 2 };
    let spec = match kind {
        ModelKind::Vn => None,
        _ => cfg.spec.clone(),
    };
    Ok(SymmetricModel::build(
        kind,
        dim,
        spec,
        train,
        BuildOptions {
            san_activation: cfg.toy.san_activation,
        },
    )?)
}

/// Trains one repeat of a toy regression task.
pub fn run_regression(cfg: &ExperimentConfig, repeat: usize) -> Result<RegressionRun> {
    let seed = cfg.seed.wrapping_add(repeat as u64);
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let (xs, ys) = toy_dataset(cfg, seed);
    let points = violation_points(cfg, seed);
    let spec = cfg.spec.as_ref().expect("validated");
    let mut model = build_model(cfg, &train)?;
    let probe = |m: &SymmetricModel| toy_violation(&QuietModel(m), spec, &points);
    let records = train_regression(&mut model, &xs, &ys, &train, Some(&probe))?;
    let final_mse = dataset_mse(&model, &xs, &ys)?;
    if !final_mse.is_finite() {
        return Err(HarnessError::Numerical(format!("training diverged (mse {final_mse})")));
    }
    let violation = toy_violation(&QuietModel(&model), spec, &points);
    Ok(RegressionRun {
        repeat,
        seed,
        model,
        records,
        final_mse,
        violation,
    })
}

/// Evaluates without touching the pass counter.
struct QuietModel<'a>(&'a SymmetricModel);

impl Evaluate for QuietModel<'_> {
    fn input_dim(&self) -> usize {
        self.0.input_width()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.0.evaluate_quiet(x).expect("input width")
    }
}

/// Per-inference pass counts of a freshly built model.
pub fn passes_per_inference(model: &SymmetricModel, x: &[f64]) -> Result<(u64, u64)> {
    let probe = model.clone();
    probe.counter().reset();
    probe.forward(x)?;
    let c = probe.counter().snapshot();
    Ok((c.trunk_evals, c.first_layer_evals))
}

fn summary_table(runs: &[RegressionRun]) -> String {
    let mut s = String::from("run,seed,final_mse,violation,final_mse_std,violation_std\n");
    for r in runs {
        s += &format!("{},{},{:.16e},{:.16e},,\n", r.repeat, r.seed, r.final_mse, r.violation);
    }
    let (lm, ls) = mean_std(&runs.iter().map(|r| r.final_mse).collect::<Vec<_>>());
    let (vm, vs) = mean_std(&runs.iter().map(|r| r.violation).collect::<Vec<_>>());
    s += &format!("mean,,{lm:.16e},{vm:.16e},{ls:.16e},{vs:.16e}\n");
    s
}

fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<RegressionRun>> {
    let mut runs: Vec<RegressionRun> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_regression(cfg, r))
        .collect::<Result<_>>()?;
    runs.sort_by_key(|r| r.repeat);
    Ok(runs)
}

fn regression_summary(cfg: &ExperimentConfig, runs: &[RegressionRun]) -> Result<Vec<String>> {
    let (lm, ls) = mean_std(&runs.iter().map(|r| r.final_mse).collect::<Vec<_>>());
    let (vm, vs) = mean_std(&runs.iter().map(|r| r.violation).collect::<Vec<_>>());
    let probe_x = vec![0.5; if cfg.task == Task::Toy1d { 1 } else { 2 }];
    let (trunk, first) = passes_per_inference(&runs[0].model, &probe_x)?;
    Ok(vec![
        format!("model={} repeats={}", cfg.model.name(), runs.len()),
        format!("final_mse={} std={}", fmt_value(lm), fmt_value(ls)),
        format!("violation={} std={}", fmt_value(vm), fmt_value(vs)),
        format!("trunk_evals_per_inference={trunk} first_layer_evals_per_inference={first}"),
    ])
}

fn write_runs(w: &mut Writer, runs: &[RegressionRun]) -> Result<()> {
    for r in runs {
        w.write(&format!("run_{:03}.csv", r.repeat), &records_to_csv(&r.records))?;
        w.write(
            &format!("model_{:03}.json", r.repeat),
            &serde_json::to_string(&r.model).expect("model serializes"),
        )?;
    }
    w.write("summary.csv", &summary_table(runs))
}

pub fn cmd_toy1d(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    expect_task(cfg, Task::Toy1d)?;
    let runs = run_repeats(cfg)?;
    let mut w = Writer::new(out)?;
    write_runs(&mut w, &runs)?;
    let summary = regression_summary(cfg, &runs)?;
    w.finish(cfg, summary)
}

/// Model predictions on the mirrored `x,y` grid, `x` outer.
pub fn prediction_grid(model: &SymmetricModel, half: f64, n: usize) -> Result<Vec<[f64; 3]>> {
    let axis = mirrored_axis(half, n);
    let mut rows = Vec::with_capacity(n * n);
    for &x in &axis {
        for &y in &axis {
            rows.push([x, y, model.evaluate_quiet(&[x, y])?]);
        }
    }
    Ok(rows)
}

/// `max |pred(−x, y) + pred(x, y)|` over a grid from [`prediction_grid`].
pub fn grid_antisymmetry_residual(rows: &[[f64; 3]], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let a = rows[i * n + j][2];
            let b = rows[(n - 1 - i) * n + j][2];
            worst = worst.max((a + b).abs());
        }
    }
    worst
}

pub fn cmd_toy2d(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    expect_task(cfg, Task::Toy2d)?;
    let runs = run_repeats(cfg)?;
    let mut w = Writer::new(out)?;
    write_runs(&mut w, &runs)?;
    let n = cfg.toy.grid_resolution;
    let grid = prediction_grid(&runs[0].model, cfg.toy.violation_range, n)?;
    let mut csv = String::from("x,y,pred\n");
    for [x, y, p] in &grid {
        csv += &format!("{x:.16e},{y:.16e},{p:.16e}\n");
    }
    w.write("grid.csv", &csv)?;
    let mut summary = regression_summary(cfg, &runs)?;
    summary.push(format!("grid_antisymmetry_x={}", fmt_value(grid_antisymmetry_residual(&grid, n))));
    w.finish(cfg, summary)
}

pub fn cmd_hnn(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    expect_task(cfg, Task::Hnn)?;
    let use_ipt = cfg.model == ModelChoice::Iptn;
    let reports: Vec<_> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r as u64);
            let spring = SpringConfig {
                seed,
                ..cfg.hnn.spring.clone()
            };
            let train = TrainConfig { seed, ..cfg.train.clone() };
            run_hnn_experiment(&spring, use_ipt, &train, &cfg.hnn.rollout).map(|rep| (r, rep))
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut w = Writer::new(out)?;
    let mut table = String::from("run,final_loss,coord_mse,energy_variance,true_energy_variance,violation,diverged\n");
    for (r, rep) in &reports {
        if rep.trajectory.diverged {
            return Err(HarnessError::Numerical(format!("rollout of run {r} diverged")));
        }
        w.write(&format!("run_{r:03}.csv"), &records_to_csv(&rep.records))?;
        w.write(&format!("trajectory_{r:03}.csv"), &rep.trajectory.to_csv())?;
        w.write(&format!("reference_{r:03}.csv"), &rep.reference.to_csv())?;
        w.write(
            &format!("model_{r:03}.json"),
            &serde_json::to_string(&rep.model).expect("model serializes"),
        )?;
        let last = rep.records.last().map_or(f64::NAN, |x| x.train_loss);
        table += &format!(
            "{r},{last:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            rep.coord_mse, rep.energy_variance, rep.true_energy_variance, rep.violation, rep.trajectory.diverged
        );
    }
    w.write("summary.csv", &table)?;
    let pick = |f: &dyn Fn(&crate::physics::HnnReport) -> f64| mean_std(&reports.iter().map(|(_, r)| f(r)).collect::<Vec<_>>());
    let (cm, _) = pick(&|r| r.coord_mse);
    let (ev, _) = pick(&|r| r.energy_variance);
    let (tv, _) = pick(&|r| r.true_energy_variance);
    let (vm, _) = pick(&|r| r.violation);
    w.finish(
        cfg,
        vec![
            format!("model={} repeats={}", cfg.model.name(), cfg.repeats),
            format!(
                "coord_mse={} energy_variance={} true_energy_variance={}",
                fmt_value(cm),
                fmt_value(ev),
                fmt_value(tv)
            ),
            format!("violation={}", fmt_value(vm)),
        ],
    )
}

pub fn cmd_cnn(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    expect_task(cfg, Task::Cnn)?;
    let c = &cfg.cnn;
    let (images, labels, classes) = match &c.data_dir {
        Some(dir) => {
            let (imgs, labels, subjects) = cnn::load_subject_dir(dir)?;
            (imgs, labels, subjects.len())
        }
        None => {
            let (imgs, labels) = synth_symmetric_dataset(c.classes, c.per_class, c.height, c.width, cfg.seed);
            (imgs, labels, c.classes)
        }
    };
    let probe = chimera_probe_set(&images, &labels, c.flip_axis, cfg.seed.wrapping_add(1));
    let mut w = Writer::new(out)?;
    let mut table = String::from("run,seed,train_accuracy,flip_violation_before,flip_violation\n");
    let mut summary = vec![format!("model={} repeats={}", cfg.model.name(), cfg.repeats)];
    let runs: Vec<_> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let seed = cfg.seed.wrapping_add(r as u64);
            let tc = CnnTrainConfig {
                conv: ConvSpec {
                    kernel_size: c.kernel_size,
                    num_filters: c.num_filters,
                    invariant: cfg.model == ModelChoice::Ikcnn,
                    flip_axis: c.flip_axis,
                },
                hidden: c.hidden,
                epochs: cfg.train.epochs,
                lr: cfg.train.lr,
                seed,
                augment: c.augment,
            };
            let init = cnn::SmallCnn::new(tc.conv.clone(), images[0].height(), images[0].width(), tc.hidden, classes, seed)?;
            let before = init.flip_violation(&probe);
            let report = cnn_train(&images, &labels, classes, &tc, &probe)?;
            let acc = report.model.accuracy(&images, &labels)?;
            Ok((r, seed, before, acc, report))
        })
        .collect::<Result<_>>()?;
    let mut flips = Vec::new();
    let mut accs = Vec::new();
    for (r, seed, before, acc, report) in &runs {
        let after = report.model.flip_violation(&probe);
        w.write(&format!("run_{r:03}.csv"), &records_to_csv(&report.records))?;
        w.write(
            &format!("model_{r:03}.json"),
            &serde_json::to_string(&report.model).expect("model serializes"),
        )?;
        table += &format!("{r},{seed},{acc:.16e},{before:.16e},{after:.16e}\n");
        if report.degenerate {
            summary.push(format!("warning: run {r} saw a single class"));
        }
        flips.push(after);
        accs.push(*acc);
    }
    w.write("summary.csv", &table)?;
    let (fm, _) = mean_std(&flips);
    let (am, _) = mean_std(&accs);
    summary.push(format!("train_accuracy={}", fmt_value(am)));
    summary.push(format!("flip_violation={}", fmt_value(fm)));
    w.finish(cfg, summary)
}

/// Parses one vector per line; entries separated by whitespace or commas.
/// Blank lines and `#` comments are skipped. `−` (U+2212) is read as a minus.
pub fn parse_vectors(input: impl BufRead) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").replace('\u{2212}', "-");
        if line.trim().is_empty() {
            continue;
        }
        let v = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Classifies each vector into S0, S+ or S- and prints one label per line.
pub fn cmd_pid_check(cfg: &ExperimentConfig, vectors: &[Vec<f64>], out: &Path, stdout: &mut dyn Write) -> Result<Outcome> {
    expect_task(cfg, Task::PidCheck)?;
    let spec = match &cfg.spec {
        Some(SymmetrySpec::Single(s)) => s,
        Some(SymmetrySpec::Blocks(_)) => return Err(HarnessError::Config("pid-check takes a single involutory spec".into())),
        None => return Err(HarnessError::Config("pid-check needs a spec".into())),
    };
    let mut csv = String::from("index,label,boundary\n");
    let mut counts = [0usize; 3];
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != spec.dim() {
            return Err(HarnessError::Config(format!(
                "vector {} has {} entries, spec needs {}",
                i + 1,
                v.len(),
                spec.dim()
            )));
        }
        let m = spec.membership(v)?;
        writeln!(stdout, "{}", m.label)?;
        csv += &format!("{i},{},{}\n", m.label, m.boundary);
        counts[match m.label {
            crate::symmetry::PartitionLabel::S0 => 0,
            crate::symmetry::PartitionLabel::SPlus => 1,
            crate::symmetry::PartitionLabel::SMinus => 2,
        }] += 1;
    }
    let mut w = Writer::new(out)?;
    w.write("pid_check.csv", &csv)?;
    w.finish(cfg, vec![format!("S0={} S+={} S-={}", counts[0], counts[1], counts[2])])
}

pub fn cmd_audit(cfg: &ExperimentConfig, out: &Path, stdout: &mut dyn Write) -> Result<Outcome> {
    expect_task(cfg, Task::Audit)?;
    let grid = cfg.audit.grid();
    let reports: Vec<_> = cfg
        .audit
        .activations
        .par_iter()
        .map(|&act| crate::arch::audit_activation(act, &grid, cfg.audit.tol, cfg.audit.parity))
        .collect();
    let mut csv = String::from("activation,parity,verdict,b_lo,b_hi\n");
    for r in &reports {
        if reports.len() == 1 {
            writeln!(stdout, "{r}")?;
        } else {
            writeln!(stdout, "{}: {r}", r.activation)?;
        }
        let p = i64::from(r.parity);
        if r.verdict == AuditVerdict::SafeOnGrid {
            csv += &format!("{},{p},safe,,\n", r.activation);
        }
        for b in &r.found {
            csv += &format!("{},{p},unsafe,{b:.16e},{b:.16e}\n", r.activation);
        }
        for (lo, hi) in &r.intervals {
            csv += &format!("{},{p},unsafe,{lo:.16e},{hi:.16e}\n", r.activation);
        }
    }
    let mut w = Writer::new(out)?;
    w.write("audit.csv", &csv)?;
    let summary = reports.iter().map(|r| format!("{}: {r}", r.activation)).collect();
    w.finish(cfg, summary)
}

fn expect_task(cfg: &ExperimentConfig, task: Task) -> Result<()> {
    if cfg.task != task {
        return Err(HarnessError::Config(format!(
            "config is for task {}, not {}",
            cfg.task.name(),
            task.name()
        )));
    }
    Ok(())
}

/// Runs a model JSON (as written by the training commands) on each vector.
pub fn eval_model(model_json: &str, vectors: &[Vec<f64>], stdout: &mut dyn Write) -> Result<()> {
    let model: SymmetricModel = serde_json::from_str(model_json).map_err(|e| HarnessError::Config(format!("model: {e}")))?;
    for v in vectors {
        if v.len() != model.input_width() {
            return Err(HarnessError::Config(format!(
                "model takes {} inputs, got {}",
                model.input_width(),
                v.len()
            )));
        }
        writeln!(stdout, "{:.17e}", model.evaluate_quiet(v)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_overlay_user_fields() {
        let cfg = ExperimentConfig::from_json(&json!({"task": "hnn", "train": {"epochs": 7}})).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.activation, Activation::Tanh);
        assert_eq!(cfg.train.hidden, vec![20, 20]);
        assert_eq!(cfg.model, ModelChoice::Iptn);
    }

    #[test]
    fn incompatible_models_are_config_errors() {
        let odd = json!({"task": "toy1d", "model": "san", "spec": {"A": [[-1.0]], "parity": -1}});
        assert_eq!(ExperimentConfig::from_json(&odd).map(|_| ()).unwrap_err().exit_code(), 2);
        let cnn = json!({"task": "cnn", "model": "hln"});
        assert!(matches!(ExperimentConfig::from_json(&cnn), Err(HarnessError::Config(_))));
        let unknown = json!({"task": "toy1d", "epochs": 3});
        assert!(matches!(ExperimentConfig::from_json(&unknown), Err(HarnessError::Config(_))));
        let relu = json!({"task": "hnn", "train": {"activation": "relu"}});
        assert!(matches!(ExperimentConfig::from_json(&relu), Err(HarnessError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::defaults(Task::Toy1d);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn vectors_parse_with_commas_comments_and_unicode_minus() {
        let v = parse_vectors("\u{2212}3\n1, 2 ,3 # c\n\n# only comment\n".as_bytes()).unwrap();
        assert_eq!(v, vec![vec![-3.0], vec![1.0, 2.0, 3.0]]);
        assert!(parse_vectors("1 x".as_bytes()).is_err());
    }

    #[test]
    fn pid_check_labels_inversion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(&json!({"task": "pid-check", "spec": {"A": [[-1.0]], "parity": 1}})).unwrap();
        let mut out = Vec::new();
        cmd_pid_check(&cfg, &[vec![-3.0], vec![0.0], vec![2.0]], dir.path(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "S-\nS0\nS+\n");
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn toy1d_short_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(&json!({"task": "toy1d", "model": "iptn", "repeats": 2, "train": {"epochs": 20}})).unwrap();
        let o = cmd_toy1d(&cfg, dir.path()).unwrap();
        for name in [
            "run_000.csv",
            "run_001.csv",
            "model_000.json",
            "summary.csv",
            "config.json",
            "manifest.json",
        ] {
            assert!(o.artifacts.iter().any(|a| a == name), "{name}");
        }
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4);
        assert!(o.summary.iter().any(|l| l.starts_with("violation=0.0 ")));
        let log = fs::read_to_string(dir.path().join("run_000.csv")).unwrap();
        assert_eq!(log.lines().count(), 21);
    }
}
