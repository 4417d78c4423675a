//! Involutory partitions and the reparameterizations they enable.
//!
//! An involutory `A ≠ I` splits `ℝⁿ` into three disjoint sets: the fixed set
//! `S₀` (`Av = v`) and two halves `S₊`, `S₋` that `A` swaps. A vector's side is
//! decided in the diagonalizing coordinates `P⁻¹v`: scanning the `γ`
//! coordinates that `D` negates from last to first, the first nonzero one
//! decides. `S₀ ∪ S₊` is the principal involutory domain (PID).
//!
//! Any network restricted to the PID extends to an exactly invariant
//! function by mapping `x ∈ S₋` to `Ax` and scaling the output by the parity.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, diagonalize_involutory, InvolutoryDiagonalization, LinalgError, Matrix};
use crate::nn::{Evaluate, InputGradient};

/// Dot products with magnitude at most this are treated as zero.
pub const ZERO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymmetryError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("offset is incompatible with A: max |Aμ + μ| = {residual:e}")]
    IncompatibleOffset { residual: f64 },
    #[error("vector has length {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("parity must be +1 or -1, got {0}")]
    BadParity(i64),
    #[error("invalid block layout: {0}")]
    BadBlocks(String),
}

pub type Result<T> = std::result::Result<T, SymmetryError>;

/// Sign `p` in `f(Ax) = p·f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }

    pub fn is_even(self) -> bool {
        self == Parity::Even
    }
}

impl TryFrom<i64> for Parity {
    type Error = SymmetryError;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Parity::Even),
            -1 => Ok(Parity::Odd),
            other => Err(SymmetryError::BadParity(other)),
        }
    }
}

impl From<Parity> for i64 {
    fn from(p: Parity) -> i64 {
        match p {
            Parity::Even => 1,
            Parity::Odd => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionLabel {
    S0,
    SPlus,
    SMinus,
}

impl PartitionLabel {
    /// The label of `Av` given the label of `v`.
    pub fn swapped(self) -> Self {
        match self {
            PartitionLabel::S0 => PartitionLabel::S0,
            PartitionLabel::SPlus => PartitionLabel::SMinus,
            PartitionLabel::SMinus => PartitionLabel::SPlus,
        }
    }

    pub fn in_pid(self) -> bool {
        self != PartitionLabel::SMinus
    }
}

impl fmt::Display for PartitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionLabel::S0 => "S0",
            PartitionLabel::SPlus => "S+",
            PartitionLabel::SMinus => "S-",
        })
    }
}

/// Outcome of the membership scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Membership {
    pub label: PartitionLabel,
    /// A coordinate was skipped as zero before a deeper one decided the side.
    pub boundary: bool,
}

fn scan(v: &[f64], p_inv: &Matrix, gamma: usize) -> Membership {
    let n = p_inv.rows();
    let mut boundary = false;
    for i in (n - gamma..n).rev() {
        let e = linalg::dot(p_inv.row(i), v);
        if e > ZERO_TOL {
            return Membership {
                label: PartitionLabel::SPlus,
                boundary,
            };
        } else if e < -ZERO_TOL {
            return Membership {
                label: PartitionLabel::SMinus,
                boundary,
            };
        }
        boundary = true;
    }
    Membership {
        label: PartitionLabel::S0,
        boundary: false,
    }
}

/// `true` iff `v ∈ PID = S₀ ∪ S₊`. Costs at most `γ` dot products of length `n`.
pub fn vector_in_pid(v: &[f64], p_inv: &Matrix, gamma: usize, n: usize) -> Result<bool> {
    if v.len() != n || p_inv.shape() != (n, n) || gamma > n {
        return Err(SymmetryError::ShapeMismatch { expected: n, got: v.len() });
    }
    Ok(scan(v, p_inv, gamma).label.in_pid())
}

/// Validated involutory symmetry: matrix, parity, optional affine offset `μ`
/// (the map is `x ↦ Ax + μ`), and the cached diagonalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct InvolutorySpec {
    a: Matrix,
    parity: Parity,
    mu: Option<Vec<f64>>,
    shift: Vec<f64>,
    diag: InvolutoryDiagonalization,
    exact: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRepr {
    #[serde(rename = "A")]
    a: Matrix,
    parity: Parity,
    #[serde(default)]
    mu: Option<Vec<f64>>,
}

impl From<InvolutorySpec> for SpecRepr {
    fn from(s: InvolutorySpec) -> Self {
        SpecRepr {
            a: s.a,
            parity: s.parity,
            mu: s.mu,
        }
    }
}

impl TryFrom<SpecRepr> for InvolutorySpec {
    type Error = SymmetryError;

    fn try_from(r: SpecRepr) -> Result<Self> {
        match r.mu {
            Some(mu) => InvolutorySpec::affine(r.a, r.parity, mu),
            None => InvolutorySpec::new(r.a, r.parity),
        }
    }
}

impl InvolutorySpec {
    pub fn new(a: Matrix, parity: Parity) -> Result<Self> {
        let diag = diagonalize_involutory(&a)?;
        let n = a.rows();
        let exact = a.is_signed_permutation();
        Ok(Self {
            a,
            parity,
            mu: None,
            shift: vec![0.0; n],
            diag,
            exact,
        })
    }

    /// Affine symmetry `x ↦ Ax + μ`; requires `Aμ = −μ`.
    pub fn affine(a: Matrix, parity: Parity, mu: Vec<f64>) -> Result<Self> {
        let (_, shift) = affine_to_linear(&a, &mu)?;
        let mut spec = Self::new(a, parity)?;
        spec.exact = spec.exact && mu.iter().all(|&m| m == 0.0);
        spec.mu = Some(mu);
        spec.shift = shift;
        Ok(spec)
    }

    /// `−Iₙ` with the given parity.
    pub fn inversion(n: usize, parity: Parity) -> Self {
        Self::new(Matrix::identity(n).scale(-1.0), parity).expect("-I is involutory")
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn mu(&self) -> Option<&[f64]> {
        self.mu.as_deref()
    }

    /// Origin of the coordinates in which the map is linear (`μ/2`).
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn diagonalization(&self) -> &InvolutoryDiagonalization {
        &self.diag
    }

    /// Whether `x ↦ Ax` is computed without rounding (a signed permutation, no offset).
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(SymmetryError::ShapeMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `T(x) = Ax + μ`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut y = self.a.matvec(x)?;
        if let Some(mu) = &self.mu {
            y.iter_mut().zip(mu).for_each(|(v, m)| *v += m);
        }
        Ok(y)
    }

    fn centered(&self, x: &[f64]) -> Vec<f64> {
        if self.mu.is_none() {
            return x.to_vec();
        }
        x.iter().zip(&self.shift).map(|(a, s)| a - s).collect()
    }

    pub fn membership(&self, x: &[f64]) -> Result<Membership> {
        self.check(x)?;
        Ok(scan(&self.centered(x), &self.diag.p_inv, self.diag.gamma))
    }

    pub fn classify(&self, x: &[f64]) -> Result<PartitionLabel> {
        Ok(self.membership(x)?.label)
    }

    pub fn reparam_point(&self, x: &[f64]) -> Result<Reparam> {
        let m = self.membership(x)?;
        let flipped = m.label == PartitionLabel::SMinus;
        let point = if flipped { self.apply(x)? } else { x.to_vec() };
        Ok(Reparam {
            point,
            sign: if flipped { self.parity.sign() } else { 1.0 },
            flipped: vec![flipped],
            vanishes: m.label == PartitionLabel::S0 && self.parity == Parity::Odd,
            boundary: m.boundary,
        })
    }
}

/// Reduces `x ↦ Ax + μ` to a linear map about the origin `μ/2`.
///
/// Returns `(A, μ/2)`; in coordinates `x' = x − μ/2` the map is `x' ↦ Ax'`.
pub fn affine_to_linear(a: &Matrix, mu: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    let residual = linalg::involutory_residual(a)?;
    if residual > linalg::INVOLUTORY_TOL {
        return Err(LinalgError::NotInvolutory { residual }.into());
    }
    if mu.len() != a.rows() {
        return Err(SymmetryError::ShapeMismatch {
            expected: a.rows(),
            got: mu.len(),
        });
    }
    let amu = a.matvec(mu)?;
    let residual = amu.iter().zip(mu).fold(0.0f64, |m, (x, y)| m.max((x + y).abs()));
    if residual > linalg::INVOLUTORY_TOL {
        return Err(SymmetryError::IncompatibleOffset { residual });
    }
    Ok((a.clone(), mu.iter().map(|m| m / 2.0).collect()))
}

/// Result of mapping a point into the PID.
#[derive(Debug, Clone, PartialEq)]
pub struct Reparam {
    pub point: Vec<f64>,
    /// Product of the parities of the blocks that were mapped.
    pub sign: f64,
    /// Per block, whether the point was mapped by that block's transformation.
    pub flipped: Vec<bool>,
    /// An odd-parity block sees its fixed set: an invariant function is zero here.
    pub vanishes: bool,
    pub boundary: bool,
}

pub fn classify(v: &[f64], spec: &InvolutorySpec) -> Result<PartitionLabel> {
    spec.classify(v)
}

pub fn reparam_point(x: &[f64], spec: &InvolutorySpec) -> Result<Reparam> {
    spec.reparam_point(x)
}

/// Moves every `(x, t)` with `x ∈ S₋` to `(T(x), p·t)`. Done once, before training.
pub fn reparam_dataset<R: Reparameterize + ?Sized>(xs: &[Vec<f64>], ys: &[f64], spec: &R) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if xs.len() != ys.len() {
        return Err(SymmetryError::ShapeMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let mut out_x = Vec::with_capacity(xs.len());
    let mut out_y = Vec::with_capacity(ys.len());
    for (x, &t) in xs.iter().zip(ys) {
        let r = spec.reparam(x)?;
        out_y.push(r.sign * t);
        out_x.push(r.point);
    }
    Ok((out_x, out_y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceBlock {
    pub start: usize,
    pub end: usize,
    pub spec: InvolutorySpec,
}

impl InvarianceBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Independent involutory symmetries acting on disjoint coordinate ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockRepr", into = "BlockRepr")]
pub struct BlockInvarianceSpec {
    n: usize,
    blocks: Vec<InvarianceBlock>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRepr {
    n: usize,
    blocks: Vec<InvarianceBlock>,
}

impl From<BlockInvarianceSpec> for BlockRepr {
    fn from(b: BlockInvarianceSpec) -> Self {
        BlockRepr { n: b.n, blocks: b.blocks }
    }
}

impl TryFrom<BlockRepr> for BlockInvarianceSpec {
    type Error = SymmetryError;

    fn try_from(r: BlockRepr) -> Result<Self> {
        BlockInvarianceSpec::new(r.n, r.blocks)
    }
}

impl BlockInvarianceSpec {
    pub fn new(n: usize, mut blocks: Vec<InvarianceBlock>) -> Result<Self> {
        blocks.sort_by_key(|b| b.start);
        for b in &blocks {
            if b.start >= b.end || b.end > n {
                return Err(SymmetryError::BadBlocks(format!("range {}..{} not inside 0..{n}", b.start, b.end)));
            }
            if b.spec.dim() != b.end - b.start {
                return Err(SymmetryError::BadBlocks(format!(
                    "block {}..{} carries a {}-dimensional symmetry",
                    b.start,
                    b.end,
                    b.spec.dim()
                )));
            }
        }
        if let Some(w) = blocks.windows(2).find(|w| w[0].end > w[1].start) {
            return Err(SymmetryError::BadBlocks(format!(
                "ranges {}..{} and {}..{} overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
        Ok(Self { n, blocks })
    }

    /// One sign flip per listed coordinate, each with its own parity.
    pub fn sign_flips(n: usize, dims: &[(usize, Parity)]) -> Result<Self> {
        let blocks = dims
            .iter()
            .map(|&(d, p)| InvarianceBlock {
                start: d,
                end: d + 1,
                spec: InvolutorySpec::inversion(1, p),
            })
            .collect();
        Self::new(n, blocks)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[InvarianceBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn reparam_multi(&self, x: &[f64]) -> Result<Reparam> {
        if x.len() != self.n {
            return Err(SymmetryError::ShapeMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut point = x.to_vec();
        let mut sign = 1.0;
        let mut flipped = Vec::with_capacity(self.blocks.len());
        let mut vanishes = false;
        let mut boundary = false;
        for b in &self.blocks {
            let r = b.spec.reparam_point(&x[b.range()])?;
            point[b.range()].copy_from_slice(&r.point);
            sign *= r.sign;
            flipped.push(r.flipped[0]);
            vanishes |= r.vanishes;
            boundary |= r.boundary;
        }
        Ok(Reparam {
            point,
            sign,
            flipped,
            vanishes,
            boundary,
        })
    }
}

pub fn reparam_multi(x: &[f64], spec: &BlockInvarianceSpec) -> Result<Reparam> {
    spec.reparam_multi(x)
}

/// Common interface of [`InvolutorySpec`] and [`BlockInvarianceSpec`].
pub trait Reparameterize {
    fn dim(&self) -> usize;

    fn reparam(&self, x: &[f64]) -> Result<Reparam>;

    /// `J·v` for the Jacobian `J` of the point map recorded in `r` (sign excluded).
    fn jacobian_apply(&self, r: &Reparam, v: &[f64]) -> Vec<f64>;

    /// `Jᵀ·g`, sign excluded.
    fn jacobian_transpose_apply(&self, r: &Reparam, g: &[f64]) -> Vec<f64>;

    /// Whether every point map is exact in floating point.
    fn is_exact(&self) -> bool;
}

impl<T: Reparameterize + ?Sized> Reparameterize for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn reparam(&self, x: &[f64]) -> Result<Reparam> {
        (**self).reparam(x)
    }

    fn jacobian_apply(&self, r: &Reparam, v: &[f64]) -> Vec<f64> {
        (**self).jacobian_apply(r, v)
    }

    fn jacobian_transpose_apply(&self, r: &Reparam, g: &[f64]) -> Vec<f64> {
        (**self).jacobian_transpose_apply(r, g)
    }

    fn is_exact(&self) -> bool {
        (**self).is_exact()
    }
}

impl Reparameterize for InvolutorySpec {
    fn dim(&self) -> usize {
        InvolutorySpec::dim(self)
    }

    fn reparam(&self, x: &[f64]) -> Result<Reparam> {
        self.reparam_point(x)
    }

    fn jacobian_apply(&self, r: &Reparam, v: &[f64]) -> Vec<f64> {
        if r.flipped[0] {
            self.a.matvec(v).expect("shape")
        } else {
            v.to_vec()
        }
    }

    fn jacobian_transpose_apply(&self, r: &Reparam, g: &[f64]) -> Vec<f64> {
        if r.flipped[0] {
            self.a.matvec_transpose(g).expect("shape")
        } else {
            g.to_vec()
        }
    }

    fn is_exact(&self) -> bool {
        self.exact
    }
}

impl Reparameterize for BlockInvarianceSpec {
    fn dim(&self) -> usize {
        self.n
    }

    fn reparam(&self, x: &[f64]) -> Result<Reparam> {
        self.reparam_multi(x)
    }

    fn jacobian_apply(&self, r: &Reparam, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for (b, &f) in self.blocks.iter().zip(&r.flipped) {
            if f {
                let sub = b.spec.a.matvec(&v[b.range()]).expect("shape");
                out[b.range()].copy_from_slice(&sub);
            }
        }
        out
    }

    fn jacobian_transpose_apply(&self, r: &Reparam, g: &[f64]) -> Vec<f64> {
        let mut out = g.to_vec();
        for (b, &f) in self.blocks.iter().zip(&r.flipped) {
            if f {
                let sub = b.spec.a.matvec_transpose(&g[b.range()]).expect("shape");
                out[b.range()].copy_from_slice(&sub);
            }
        }
        out
    }

    fn is_exact(&self) -> bool {
        self.blocks.iter().all(|b| b.spec.exact)
    }
}

/// Either a single symmetry or a set of independent block symmetries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SymmetrySpec {
    Single(InvolutorySpec),
    Blocks(BlockInvarianceSpec),
}

impl From<InvolutorySpec> for SymmetrySpec {
    fn from(s: InvolutorySpec) -> Self {
        SymmetrySpec::Single(s)
    }
}

impl From<BlockInvarianceSpec> for SymmetrySpec {
    fn from(s: BlockInvarianceSpec) -> Self {
        SymmetrySpec::Blocks(s)
    }
}

impl Reparameterize for SymmetrySpec {
    fn dim(&self) -> usize {
        match self {
            SymmetrySpec::Single(s) => Reparameterize::dim(s),
            SymmetrySpec::Blocks(b) => b.dim(),
        }
    }

    fn reparam(&self, x: &[f64]) -> Result<Reparam> {
        match self {
            SymmetrySpec::Single(s) => s.reparam(x),
            SymmetrySpec::Blocks(b) => b.reparam(x),
        }
    }

    fn jacobian_apply(&self, r: &Reparam, v: &[f64]) -> Vec<f64> {
        match self {
            SymmetrySpec::Single(s) => s.jacobian_apply(r, v),
            SymmetrySpec::Blocks(b) => b.jacobian_apply(r, v),
        }
    }

    fn jacobian_transpose_apply(&self, r: &Reparam, g: &[f64]) -> Vec<f64> {
        match self {
            SymmetrySpec::Single(s) => s.jacobian_transpose_apply(r, g),
            SymmetrySpec::Blocks(b) => b.jacobian_transpose_apply(r, g),
        }
    }

    fn is_exact(&self) -> bool {
        match self {
            SymmetrySpec::Single(s) => Reparameterize::is_exact(s),
            SymmetrySpec::Blocks(b) => Reparameterize::is_exact(b),
        }
    }
}

/// A model evaluated through the PID reparameterization.
#[derive(Debug, Clone)]
pub struct Invariant<M, S> {
    pub model: M,
    pub spec: S,
}

impl<M: Evaluate, S: Reparameterize> Invariant<M, S> {
    pub fn try_eval(&self, x: &[f64]) -> Result<f64> {
        let r = self.spec.reparam(x)?;
        if r.vanishes {
            return Ok(0.0);
        }
        Ok(r.sign * self.model.eval(&r.point))
    }
}

impl<M: InputGradient, S: Reparameterize> Invariant<M, S> {
    /// `sign·Jᵀ·∇m(x')`, plus whether `x` sat on a partition boundary
    /// (where the reparameterized gradient is one-sided).
    pub fn gradient_flagged(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        let r = self.spec.reparam(x)?;
        let g = self.model.input_gradient(&r.point);
        let mut g = self.spec.jacobian_transpose_apply(&r, &g);
        if r.sign != 1.0 {
            g.iter_mut().for_each(|v| *v *= r.sign);
        }
        Ok((g, r.boundary || r.vanishes))
    }
}

impl<M: Evaluate, S: Reparameterize> Evaluate for Invariant<M, S> {
    fn input_dim(&self) -> usize {
        self.spec.dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.try_eval(x).expect("input matches symmetry dimension")
    }
}

impl<M: InputGradient, S: Reparameterize> InputGradient for Invariant<M, S> {
    fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.gradient_flagged(x).expect("input matches symmetry dimension").0
    }
}

/// `g(x) = sign·model(x')`, which satisfies `g(T x) = p·g(x)`.
pub fn wrap_inference<M: Evaluate, S: Reparameterize>(model: M, spec: S) -> Invariant<M, S> {
    Invariant { model, spec }
}

/// Same wrapper; its [`InputGradient`] impl differentiates through the reparameterization.
pub fn wrap_input_gradient<M: InputGradient, S: Reparameterize>(model: M, spec: S) -> Invariant<M, S> {
    Invariant { model, spec }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_involutory;
    use crate::nn::{finite_diff_grad, Activation, FnModel, Mlp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn neg_eye(n: usize) -> Matrix {
        Matrix::identity(n).scale(-1.0)
    }

    #[test]
    fn parity_json() {
        assert_eq!(serde_json::to_string(&Parity::Odd).unwrap(), "-1");
        assert_eq!(serde_json::from_str::<Parity>("1").unwrap(), Parity::Even);
        assert!(serde_json::from_str::<Parity>("0").is_err());
    }

    #[test]
    fn affine_reduction_examples() {
        let (_, shift) = affine_to_linear(&neg_eye(1), &[4.0]).unwrap();
        assert_eq!(shift, vec![2.0]);
        let (_, shift) = affine_to_linear(&neg_eye(2), &[0.0, 0.0]).unwrap();
        assert_eq!(shift, vec![0.0, 0.0]);
        assert!(matches!(affine_to_linear(&neg_eye(1), &[f64::MIN_POSITIVE]).map(|_| ()), Ok(())));
        assert!(matches!(
            affine_to_linear(&Matrix::identity(1), &[1.0]),
            Err(SymmetryError::IncompatibleOffset { .. })
        ));
        let shear = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            affine_to_linear(&shear, &[0.0, 0.0]),
            Err(SymmetryError::Linalg(LinalgError::NotInvolutory { .. }))
        ));
    }

    #[test]
    fn affine_reduction_by_substitution() {
        // Householder reflection for u = (1, 0) is diag(−1, 1).
        let a = Matrix::from_diag(&[-1.0, 1.0]);
        let mu = [3.0, 0.0];
        let (_, shift) = affine_to_linear(&a, &mu).unwrap();
        assert_eq!(shift, vec![1.5, 0.0]);
        let spec = InvolutorySpec::affine(a.clone(), Parity::Even, mu.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let tx = spec.apply(&x).unwrap();
            let lhs: Vec<f64> = tx.iter().zip(&shift).map(|(t, s)| t - s).collect();
            let centered: Vec<f64> = x.iter().zip(&shift).map(|(v, s)| v - s).collect();
            let rhs = a.matvec(&centered).unwrap();
            for (l, r) in lhs.iter().zip(&rhs) {
                assert!((l - r).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn membership_one_dimensional() {
        let d = diagonalize_involutory(&neg_eye(1)).unwrap();
        assert!(vector_in_pid(&[3.0], &d.p_inv, d.gamma, 1).unwrap());
        assert!(!vector_in_pid(&[-3.0], &d.p_inv, d.gamma, 1).unwrap());
        assert!(vector_in_pid(&[0.0], &d.p_inv, d.gamma, 1).unwrap());
        assert!(vector_in_pid(&[1.0, 2.0], &d.p_inv, d.gamma, 1).is_err());
    }

    #[test]
    fn fixed_subspace_is_s0() {
        let spec = InvolutorySpec::new(Matrix::from_diag(&[1.0, -1.0]), Parity::Even).unwrap();
        let d = spec.diagonalization();
        assert!(vector_in_pid(&[5.0, 0.0], &d.p_inv, d.gamma, 2).unwrap());
        assert_eq!(spec.classify(&[5.0, 0.0]).unwrap(), PartitionLabel::S0);
        let av = spec.apply(&[5.0, 0.0]).unwrap();
        assert!((av[0] - 5.0).abs() <= 1e-8 && av[1].abs() <= 1e-8);
    }

    #[test]
    fn recursive_sign_rule_for_inversion() {
        let spec = InvolutorySpec::inversion(2, Parity::Even);
        assert_eq!(spec.classify(&[0.0, 1.0]).unwrap(), PartitionLabel::SPlus);
        assert_eq!(spec.classify(&[0.0, -1.0]).unwrap(), PartitionLabel::SMinus);
        let m = spec.membership(&[-1.0, 0.0]).unwrap();
        assert_eq!(m.label, PartitionLabel::SMinus);
        assert!(m.boundary);
        assert_eq!(spec.classify(&[0.0, 0.0]).unwrap(), PartitionLabel::S0);
    }

    #[test]
    fn partition_complement_on_random_matrix() {
        let a = random_involutory(4, 2, 3).unwrap();
        let spec = InvolutorySpec::new(a.clone(), Parity::Even).unwrap();
        let d = spec.diagonalization();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let av = a.matvec(&v).unwrap();
            let label = spec.classify(&v).unwrap();
            assert_ne!(label, PartitionLabel::S0);
            let in_v = vector_in_pid(&v, &d.p_inv, d.gamma, 4).unwrap();
            let in_av = vector_in_pid(&av, &d.p_inv, d.gamma, 4).unwrap();
            assert!(in_v ^ in_av);
            assert_eq!(spec.classify(&av).unwrap(), label.swapped());
        }
    }

    #[test]
    fn reparam_point_one_dimensional() {
        let even = InvolutorySpec::inversion(1, Parity::Even);
        let r = even.reparam_point(&[-0.7]).unwrap();
        assert_eq!((r.point.clone(), r.sign), (vec![0.7], 1.0));
        let odd = InvolutorySpec::inversion(1, Parity::Odd);
        let r = odd.reparam_point(&[-0.7]).unwrap();
        assert_eq!((r.point.clone(), r.sign), (vec![0.7], -1.0));
        for x in [0.0, 0.3] {
            let r = odd.reparam_point(&[x]).unwrap();
            assert_eq!((r.point.clone(), r.sign), (vec![x], 1.0));
        }
        assert!(odd.reparam_point(&[0.0]).unwrap().vanishes);
    }

    #[test]
    fn reparam_dataset_examples() {
        let even = InvolutorySpec::inversion(1, Parity::Even);
        let (x, y) = reparam_dataset(&[vec![-0.5]], &[0.88], &even).unwrap();
        assert_eq!((x, y), (vec![vec![0.5]], vec![0.88]));
        let odd = InvolutorySpec::inversion(1, Parity::Odd);
        let (x, y) = reparam_dataset(&[vec![-0.5]], &[-0.48], &odd).unwrap();
        assert_eq!((x, y), (vec![vec![0.5]], vec![0.48]));
        assert!(reparam_dataset(&[vec![1.0]], &[], &odd).is_err());
    }

    #[test]
    fn reparam_dataset_lands_in_pid() {
        let spec = InvolutorySpec::new(random_involutory(3, 2, 12).unwrap(), Parity::Odd).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys = vec![1.0; 100];
        let (out, _) = reparam_dataset(&xs, &ys, &spec).unwrap();
        assert!(out.iter().all(|x| spec.classify(x).unwrap() != PartitionLabel::SMinus));
    }

    #[test]
    fn reparam_multi_example() {
        let blocks = BlockInvarianceSpec::new(
            3,
            vec![
                InvarianceBlock {
                    start: 0,
                    end: 2,
                    spec: InvolutorySpec::inversion(2, Parity::Odd),
                },
                InvarianceBlock {
                    start: 2,
                    end: 3,
                    spec: InvolutorySpec::inversion(1, Parity::Even),
                },
            ],
        )
        .unwrap();
        let r = reparam_multi(&[-1.0, -2.0, -3.0], &blocks).unwrap();
        assert_eq!(r.point, vec![1.0, 2.0, 3.0]);
        assert_eq!(r.sign, -1.0);
        let r = reparam_multi(&[1.0, 2.0, 3.0], &blocks).unwrap();
        assert_eq!((r.point, r.sign), (vec![1.0, 2.0, 3.0], 1.0));
    }

    #[test]
    fn block_validation() {
        let s = InvolutorySpec::inversion(2, Parity::Even);
        let overlapping = vec![
            InvarianceBlock {
                start: 0,
                end: 2,
                spec: s.clone(),
            },
            InvarianceBlock {
                start: 1,
                end: 3,
                spec: s.clone(),
            },
        ];
        assert!(BlockInvarianceSpec::new(4, overlapping).is_err());
        assert!(BlockInvarianceSpec::new(
            1,
            vec![InvarianceBlock {
                start: 0,
                end: 2,
                spec: s.clone()
            }]
        )
        .is_err());
        assert!(BlockInvarianceSpec::new(3, vec![InvarianceBlock { start: 0, end: 1, spec: s }]).is_err());
    }

    #[test]
    fn multi_reparam_unfolds_definition() {
        let blocks = BlockInvarianceSpec::sign_flips(3, &[(0, Parity::Odd), (1, Parity::Even), (2, Parity::Odd)]).unwrap();
        let net = Mlp::new(&[3, 6, 1], Activation::Tanh, Activation::Identity, 4).unwrap();
        let g = wrap_inference(&net, &blocks);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r = blocks.reparam_multi(&x).unwrap();
            assert_eq!(g.eval(&x), r.sign * net.eval(&r.point));
        }
    }

    #[test]
    fn wrapped_inference_is_exactly_invariant() {
        let net = Mlp::new(&[3, 8, 1], Activation::Sigmoid, Activation::Identity, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for parity in [Parity::Even, Parity::Odd] {
            let spec = InvolutorySpec::inversion(3, parity);
            let g = wrap_inference(&net, &spec);
            for _ in 0..1000 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
                let ax: Vec<f64> = x.iter().map(|v| -v).collect();
                assert_eq!(g.eval(&ax), parity.sign() * g.eval(&x));
            }
        }
    }

    #[test]
    fn wrapped_gradient_cases() {
        let quad = FnModel::with_gradient(2, |x: &[f64]| x[0] * x[0] + x[1] * x[1], |x: &[f64]| vec![2.0 * x[0], 2.0 * x[1]]);
        let spec = InvolutorySpec::inversion(2, Parity::Even);
        let g = wrap_input_gradient(&quad, &spec);
        for x in [[0.3, 0.5], [-0.3, -0.5], [1.0, -2.0], [-1.5, 0.25]] {
            assert_eq!(g.input_gradient(&x), vec![2.0 * x[0], 2.0 * x[1]]);
        }

        let net = Mlp::new(&[2, 5, 1], Activation::Tanh, Activation::Identity, 9).unwrap();
        let g = wrap_input_gradient(&net, &spec);
        assert_eq!(g.input_gradient(&[0.4, 0.2]), net.input_gradient(&[0.4, 0.2]).unwrap());
        let x = [-1.0, -1.0];
        let raw = net.input_gradient(&[1.0, 1.0]).unwrap();
        let expected: Vec<f64> = raw.iter().map(|v| -v).collect();
        assert_eq!(g.input_gradient(&x), expected);
        let fd = finite_diff_grad(|p| g.eval(p), &x, 1e-6);
        for (a, b) in expected.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-8));
        }
    }

    #[test]
    fn boundary_gradient_is_flagged() {
        let net = Mlp::new(&[2, 5, 1], Activation::Tanh, Activation::Identity, 9).unwrap();
        let spec = InvolutorySpec::inversion(2, Parity::Even);
        let g = wrap_input_gradient(&net, &spec);
        assert!(g.gradient_flagged(&[-1.0, 0.0]).unwrap().1);
        assert!(!g.gradient_flagged(&[-1.0, 0.5]).unwrap().1);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = InvolutorySpec::affine(Matrix::from_diag(&[-1.0, 1.0]), Parity::Odd, vec![2.0, 0.0]).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"A":[[-1.0,0.0],[0.0,1.0]],"parity":-1,"mu":[2.0,0.0]}"#);
        let back: InvolutorySpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let linear: InvolutorySpec = serde_json::from_str(r#"{"A":[[-1]],"parity":1,"mu":null}"#).unwrap();
        assert_eq!(linear.mu(), None);
        assert!(serde_json::from_str::<InvolutorySpec>(r#"{"A":[[1]],"parity":1}"#).is_err());
    }

    #[test]
    fn symmetry_spec_json_is_untagged() {
        let single: SymmetrySpec = serde_json::from_str(r#"{"A":[[-1]],"parity":1}"#).unwrap();
        assert!(matches!(single, SymmetrySpec::Single(_)));
        let blocks: SymmetrySpec = serde_json::from_str(
            r#"{"n":2,"blocks":[{"start":0,"end":1,"spec":{"A":[[-1]],"parity":-1}},{"start":1,"end":2,"spec":{"A":[[-1]],"parity":-1}}]}"#,
        )
        .unwrap();
        assert!(matches!(blocks, SymmetrySpec::Blocks(ref b) if b.len() == 2));
    }
}
