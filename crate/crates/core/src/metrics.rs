//! Symmetry-violation metrics and the per-epoch run log.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{FlipAxis, Image};
use crate::linalg::Matrix;
use crate::nn::Evaluate;
use crate::symmetry::Parity;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("empty evaluation set")]
    EmptySet,
    #[error("malformed run log line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

pub const RUN_LOG_HEADER: &str = "epoch,train_loss,violation,trunk_evals,wall_ms";

/// `(1/m) Σ (f(x) − p·f(Ax))²`.
pub fn violation_metric<M: Evaluate + ?Sized>(model: &M, points: &[Vec<f64>], a: &Matrix, p: Parity) -> Result<f64, MetricsError> {
    violation_metric_with(model, points, |x| a.matvec(x).expect("point width"), p)
}

/// Same as [`violation_metric`] with an arbitrary point map (affine or blockwise).
pub fn violation_metric_with<M, F>(model: &M, points: &[Vec<f64>], map: F, p: Parity) -> Result<f64, MetricsError>
where
    M: Evaluate + ?Sized,
    F: Fn(&[f64]) -> Vec<f64>,
{
    if points.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let total: f64 = points
        .iter()
        .map(|x| {
            let r = model.eval(x) - p.sign() * model.eval(&map(x));
            r * r
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// Fraction of images whose predicted class changes under a flip.
pub fn flip_violation<F: Fn(&Image) -> usize>(classify: F, images: &[Image], axis: FlipAxis) -> Result<f64, MetricsError> {
    if images.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let changed = images.iter().filter(|img| classify(img) != classify(&img.flip(axis))).count();
    Ok(changed as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub violation: f64,
    pub trunk_evals: u64,
    pub wall_ms: f64,
}

/// Floats are written with 17 significant digits so they read back bit for bit.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(RUN_LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{},{:.16e}",
            r.epoch, r.train_loss, r.violation, r.trunk_evals, r.wall_ms
        );
    }
    s
}

pub fn emit_csv(records: &[RunRecord], path: &Path) -> Result<(), MetricsError> {
    fs::write(path, records_to_csv(records))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RUN_LOG_HEADER => {}
        _ => {
            return Err(MetricsError::Malformed {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| MetricsError::Malformed {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        out.push(RunRecord {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: f[1].parse().map_err(|_| bad("train_loss"))?,
            violation: f[2].parse().map_err(|_| bad("violation"))?,
            trunk_evals: f[3].parse().map_err(|_| bad("trunk_evals"))?,
            wall_ms: f[4].parse().map_err(|_| bad("wall_ms"))?,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    parse_csv(&fs::read_to_string(path)?)
}

/// `n` evenly spaced points on `[−half, half]` with `x[i] == −x[n−1−i]` bitwise.
pub fn mirrored_axis(half: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let mut axis = vec![0.0; n];
    for i in 0..n / 2 {
        let v = -half + 2.0 * half * i as f64 / (n - 1) as f64;
        axis[i] = v;
        axis[n - 1 - i] = -v;
    }
    axis
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
