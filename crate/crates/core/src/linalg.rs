//! Dense row-major matrices and the constructive diagonalization of
//! involutory matrices.
//!
//! An involutory matrix satisfies `A·A = I`, so its spectrum is contained in
//! `{+1, −1}` and the two projectors `(I + A)/2` and `(I − A)/2` are exact
//! eigenprojectors. [`diagonalize_involutory`] orthogonalizes the columns of
//! each projector to obtain a basis `P` with `P⁻¹·A·P = diag(1, …, 1, −1, …, −1)`.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating `A·A ≈ I`.
pub const INVOLUTORY_TOL: f64 = 1e-8;
/// Columns whose residual norm falls below this after orthogonalization are dropped.
pub const RANK_DROP_TOL: f64 = 1e-9;
/// Smallest admissible pivot magnitude during LU factorization.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} of {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is singular to tolerance: pivot {pivot} has magnitude {magnitude:e}")]
    SingularMatrix { pivot: usize, magnitude: f64 },
    #[error("matrix is not involutory: max |A·A − I| = {residual:e}")]
    NotInvolutory { residual: f64 },
    #[error("the identity matrix has no nontrivial involutory partition")]
    IdentityExcluded,
    #[error("gamma {gamma} out of range 1..={n}")]
    InvalidGamma { n: usize, gamma: usize },
    #[error("eigenspace construction lost rank: found {plus} + {minus} basis vectors for n = {n}")]
    RankDeficient { n: usize, plus: usize, minus: usize },
    #[error("cannot parse matrix: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: i / cols.max(1),
                col: i % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Parse("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖self − other‖_max`.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec",
                lhs: self.shape(),
                rhs: (v.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ·v`.
    pub fn matvec_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec_transpose",
                lhs: self.shape(),
                rhs: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    /// True when every off-diagonal entry is zero and every diagonal entry is ±1.
    /// Products with such matrices are exact in floating point.
    pub fn is_signed_permutation(&self) -> bool {
        if !self.is_square() {
            return false;
        }
        (0..self.rows).all(|i| {
            let row = self.row(i);
            let nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            nonzero.len() == 1 && nonzero[0].abs() == 1.0
        }) && (0..self.cols).all(|j| (0..self.rows).filter(|&i| self[(i, j)] != 0.0).count() == 1)
    }

    /// Plain-text form: a `rows cols` header line, then one line of
    /// space-separated decimals per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| LinalgError::Parse("empty input".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| LinalgError::Parse(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(LinalgError::Parse(format!("header must be `rows cols`, got {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            if i >= rows {
                return Err(LinalgError::Parse(format!("more than {rows} rows")));
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| LinalgError::Parse(format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(LinalgError::Parse(format!("row {i} has {} entries, expected {cols}", row.len())));
            }
            data.extend(row);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::Parse(format!(
                "expected {rows} rows, got {}",
                data.len() / cols.max(1)
            )));
        }
        Self::new(rows, cols, data)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}", self.to_rows())
    }
}

impl FromStr for Matrix {
    type Err = LinalgError;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// JSON form is a list of rows.
impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a[(i, k)];
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Inverse by LU factorization with partial pivoting.
pub fn lu_inverse(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        let (p, magnitude) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if magnitude <= PIVOT_TOL {
            return Err(LinalgError::SingularMatrix { pivot: k, magnitude });
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            for j in k + 1..n {
                let u = lu[(k, j)];
                lu[(i, j)] -= factor * u;
            }
        }
    }

    // Solve L·U·x = e_perm for each column.
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let s: f64 = (0..i).map(|k| lu[(i, k)] * col[k]).sum();
            col[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| lu[(i, k)] * col[k]).sum();
            col[i] = (col[i] - s) / lu[(i, i)];
        }
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// `‖A·A − I‖_max ≤ tol`.
pub fn check_involutory(a: &Matrix, tol: f64) -> Result<bool> {
    Ok(involutory_residual(a)? <= tol)
}

pub fn involutory_residual(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    matmul(a, a)?.max_abs_diff(&Matrix::identity(a.rows))
}

/// Basis for `D = P⁻¹·A·P = diag(1^{n−γ}, −1^{γ})`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvolutoryDiagonalization {
    pub n: usize,
    /// Number of `−1` eigenvalues.
    pub gamma: usize,
    pub p: Matrix,
    pub p_inv: Matrix,
}

impl InvolutoryDiagonalization {
    /// The diagonal form `D`.
    pub fn diagonal(&self) -> Matrix {
        let d: Vec<f64> = (0..self.n).map(|i| if i < self.n - self.gamma { 1.0 } else { -1.0 }).collect();
        Matrix::from_diag(&d)
    }

    /// `P·D·P⁻¹`.
    pub fn reconstruct(&self) -> Matrix {
        let pd = matmul(&self.p, &self.diagonal()).expect("square factors");
        matmul(&pd, &self.p_inv).expect("square factors")
    }
}

/// Appends the columns of `src` that are linearly independent of `basis`
/// (modified Gram–Schmidt, reorthogonalized once).
fn extend_orthonormal(basis: &mut Vec<Vec<f64>>, src: &Matrix) {
    for j in 0..src.cols {
        let mut v = src.column(j);
        for _ in 0..2 {
            for b in basis.iter() {
                let c = dot(b, &v);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let nv = norm(&v);
        if nv > RANK_DROP_TOL {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
}

pub fn diagonalize_involutory(a: &Matrix) -> Result<InvolutoryDiagonalization> {
    let residual = involutory_residual(a)?;
    if residual > INVOLUTORY_TOL {
        return Err(LinalgError::NotInvolutory { residual });
    }
    let n = a.rows;
    let eye = Matrix::identity(n);
    if a.max_abs_diff(&eye)? <= INVOLUTORY_TOL {
        return Err(LinalgError::IdentityExcluded);
    }

    let plus_proj = eye.add(a)?.scale(0.5);
    let minus_proj = eye.sub(a)?.scale(0.5);
    let mut plus = Vec::new();
    extend_orthonormal(&mut plus, &plus_proj);
    let mut minus = Vec::new();
    extend_orthonormal(&mut minus, &minus_proj);
    if plus.len() + minus.len() != n {
        return Err(LinalgError::RankDeficient {
            n,
            plus: plus.len(),
            minus: minus.len(),
        });
    }
    let gamma = minus.len();

    let mut p = Matrix::zeros(n, n);
    for (j, col) in plus.iter().chain(minus.iter()).enumerate() {
        for (i, &v) in col.iter().enumerate() {
            p[(i, j)] = v;
        }
    }
    let p_inv = lu_inverse(&p)?;
    Ok(InvolutoryDiagonalization { n, gamma, p, p_inv })
}

/// Random involutory matrix with exactly `gamma` eigenvalues equal to `−1`.
///
/// The eigenbasis is a random orthonormal basis sheared by a unit upper
/// triangular factor, so the result is generally not symmetric while staying
/// well conditioned. `gamma == n` returns `−I` exactly.
pub fn random_involutory(n: usize, gamma: usize, seed: u64) -> Result<Matrix> {
    if gamma == 0 || gamma > n {
        return Err(LinalgError::InvalidGamma { n, gamma });
    }
    if gamma == n {
        return Ok(Matrix::identity(n).scale(-1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = loop {
        let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Matrix::new(n, n, data)?;
        let mut basis = Vec::new();
        extend_orthonormal(&mut basis, &m);
        if basis.len() == n {
            break basis;
        }
    };
    let mut q = Matrix::zeros(n, n);
    for (j, col) in raw.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q[(i, j)] = v;
        }
    }
    let mut shear = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            shear[(i, j)] = rng.random_range(-0.5..0.5);
        }
    }
    let basis = matmul(&q, &shear)?;
    let d: Vec<f64> = (0..n).map(|i| if i < n - gamma { 1.0 } else { -1.0 }).collect();
    let a = matmul(&matmul(&basis, &Matrix::from_diag(&d))?, &lu_inverse(&basis)?)?;
    Ok(a)
}
