//! Dense small-matrix numerical kernel: symmetric eigendecomposition,
//! definiteness tests, matrix square roots, Schur complements, discrete
//! Lyapunov solves and an LQR helper.
//!
//! Everything here operates on matrices of modest dimension (tube MPC
//! designs rarely exceed a dozen states plus filter states), so the
//! implementations favor robustness over asymptotic speed: the
//! eigensolver is a cyclic Jacobi sweep, the Lyapunov solver a squaring
//! iteration, the Riccati solver a fixed-point iteration.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative asymmetry tolerated by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Condition-number limit for matrix inverse square roots.
pub const INV_SQRT_COND_LIMIT: f64 = 1e12;

const JACOBI_MAX_SWEEPS: usize = 60;
const RICCATI_MAX_ITERS: usize = 10_000;
const RICCATI_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("Jacobi eigensolver did not converge within {0} sweeps")]
    EigNonConvergence(usize),
    #[error("partition block is singular or too ill-conditioned to invert")]
    IllConditionedPartition,
    #[error("matrix is not Schur stable")]
    NotSchurStable,
    #[error("Riccati iteration did not converge; pair may not be stabilizable")]
    NotStabilizable,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("condition number {cond:.3e} exceeds {limit:.1e}")]
    IllConditioned { cond: f64, limit: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A real symmetric matrix, stored explicitly symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix, rejecting inputs whose asymmetry exceeds
    /// [`SYMMETRY_TOL`] relative to the matrix scale. The stored matrix is
    /// `(m + m')/2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        let scale = m.amax().max(1e-300);
        let mut asym: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL * scale {
            return Err(LinalgError::NotSymmetric {
                asymmetry: asym / scale,
            });
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes a square matrix as `(m + m')/2` without an asymmetry check.
    /// Panics if the matrix is not square.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "symmetrize requires a square matrix");
        let sym = (&m + m.transpose()) * 0.5;
        Self { m: sym }
    }

    /// Symmetric matrix from row-major rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let n = rows.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "row {i} has wrong length");
            for (j, v) in r.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Self::new(m)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
        }
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diagonal(d: &[f64]) -> Self {
        Self {
            m: DMatrix::from_diagonal(&DVector::from_row_slice(d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// The quadratic form `x' M x`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "quadratic form dimension mismatch");
        (x.transpose() * &self.m * x)[(0, 0)]
    }

    /// `a' M a` for a matrix `a`, symmetrized.
    pub fn congruence(&self, a: &DMatrix<f64>) -> SymMatrix {
        assert_eq!(a.nrows(), self.dim(), "congruence dimension mismatch");
        SymMatrix::symmetrize(a.transpose() * &self.m * a)
    }

    pub fn scale(&self, alpha: f64) -> SymMatrix {
        SymMatrix {
            m: &self.m * alpha,
        }
    }
}

impl std::ops::Add<&SymMatrix> for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix {
            m: &self.m + &rhs.m,
        }
    }
}

impl std::ops::Sub<&SymMatrix> for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix {
            m: &self.m - &rhs.m,
        }
    }
}

/// Result of a symmetric eigendecomposition `M = V diag(values) V'`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `values`.
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(m: &SymMatrix) -> Result<SymEig, LinalgError> {
    let n = m.dim();
    if n == 0 {
        return Ok(SymEig {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let mut a = m.matrix().clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.amax().max(1e-300);

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].abs();
            }
        }
        if off <= 1e-14 * scale * (n as f64) {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    // avoid overflow in theta^2
                    0.5 / theta
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                a[(q, q)] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[(i, p)];
                        let aiq = a[(i, q)];
                        a[(i, p)] = c * aip - s * aiq;
                        a[(p, i)] = a[(i, p)];
                        a[(i, q)] = s * aip + c * aiq;
                        a[(q, i)] = a[(i, q)];
                    }
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::EigNonConvergence(JACOBI_MAX_SWEEPS));
    }

    // sort ascending, permuting eigenvector columns along
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (new, &old) in idx.iter().enumerate() {
        values[new] = a[(old, old)];
        let mut col = v.column(old).clone_owned();
        // canonical sign: largest-magnitude component positive
        let mut lead = 0;
        for i in 0..n {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col = -col;
        }
        vectors.set_column(new, &col);
    }
    Ok(SymEig { values, vectors })
}

/// Sign classification of a symmetric matrix relative to an eigenvalue margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    PositiveDefinite,
    NegativeDefinite,
    Indefinite,
    Singular,
}

/// Classifies `m` by its spectrum: `Singular` if any eigenvalue has
/// magnitude at most `margin`, otherwise positive/negative definite if all
/// eigenvalues clear `margin` on one side.
pub fn definiteness(m: &SymMatrix, margin: f64) -> Result<Definiteness, LinalgError> {
    if margin < 0.0 {
        return Err(LinalgError::InvalidArgument(
            "definiteness margin must be nonnegative".into(),
        ));
    }
    let eig = sym_eig(m)?;
    let n = m.dim();
    if n == 0 {
        return Ok(Definiteness::PositiveDefinite);
    }
    if eig.values.iter().any(|l| l.abs() <= margin) {
        return Ok(Definiteness::Singular);
    }
    let lmin = eig.values[0];
    let lmax = eig.values[n - 1];
    if lmin > margin {
        Ok(Definiteness::PositiveDefinite)
    } else if lmax < -margin {
        Ok(Definiteness::NegativeDefinite)
    } else {
        Ok(Definiteness::Indefinite)
    }
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &SymMatrix) -> Result<f64, LinalgError> {
    let eig = sym_eig(m)?;
    Ok(if m.dim() == 0 {
        f64::NEG_INFINITY
    } else {
        eig.values[m.dim() - 1]
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(m: &SymMatrix) -> Result<f64, LinalgError> {
    let eig = sym_eig(m)?;
    Ok(if m.dim() == 0 {
        f64::INFINITY
    } else {
        eig.values[0]
    })
}

/// Symmetric positive (semi)definite square root via eigendecomposition.
/// Eigenvalues below `-1e-10 * scale` are rejected; small negative dust is
/// clamped to zero.
pub fn sqrt_sym(m: &SymMatrix) -> Result<DMatrix<f64>, LinalgError> {
    let eig = sym_eig(m)?;
    let scale = m.matrix().amax().max(1e-300);
    let n = m.dim();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let l = eig.values[i];
        if l < -1e-10 * scale {
            return Err(LinalgError::NotPositiveDefinite);
        }
        d[(i, i)] = l.max(0.0).sqrt();
    }
    Ok(&eig.vectors * d * eig.vectors.transpose())
}

/// Symmetric inverse square root via eigendecomposition. Refuses matrices
/// that are not positive definite or whose condition number exceeds
/// [`INV_SQRT_COND_LIMIT`].
pub fn inv_sqrt_sym(m: &SymMatrix) -> Result<DMatrix<f64>, LinalgError> {
    let eig = sym_eig(m)?;
    let n = m.dim();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lmin = eig.values[0];
    let lmax = eig.values[n - 1];
    if lmin <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite);
    }
    let cond = lmax / lmin;
    if cond > INV_SQRT_COND_LIMIT {
        return Err(LinalgError::IllConditioned {
            cond,
            limit: INV_SQRT_COND_LIMIT,
        });
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = 1.0 / eig.values[i].sqrt();
    }
    Ok(&eig.vectors * d * eig.vectors.transpose())
}

/// Splits a positive definite `p` at index `split` into the Schur complement
/// of the trailing block and the complementary part:
/// `p_e = P11 - P21' P22^{-1} P21`, `p_diff = P11 - p_e`.
///
/// The returned pair satisfies `p_e + p_diff == P11` as assembled.
pub fn schur_reduce(p: &SymMatrix, split: usize) -> Result<(SymMatrix, SymMatrix), LinalgError> {
    let n = p.dim();
    if split == 0 || split >= n {
        return Err(LinalgError::InvalidArgument(format!(
            "split index {split} must lie strictly inside dimension {n}"
        )));
    }
    if !matches!(definiteness(p, 0.0)?, Definiteness::PositiveDefinite) {
        return Err(LinalgError::NotPositiveDefinite);
    }
    let p11 = p.matrix().view((0, 0), (split, split)).clone_owned();
    let p21 = p.matrix().view((split, 0), (n - split, split)).clone_owned();
    let p22 = SymMatrix::symmetrize(
        p.matrix()
            .view((split, split), (n - split, n - split))
            .clone_owned(),
    );
    let eig22 = sym_eig(&p22)?;
    let l22_min = eig22.values[0];
    let l22_max = eig22.values[n - split - 1];
    if l22_min <= 0.0 || l22_max / l22_min > INV_SQRT_COND_LIMIT {
        return Err(LinalgError::IllConditionedPartition);
    }
    let p22_inv = {
        let mut d = DMatrix::zeros(n - split, n - split);
        for i in 0..(n - split) {
            d[(i, i)] = 1.0 / eig22.values[i];
        }
        &eig22.vectors * d * eig22.vectors.transpose()
    };
    let p_diff_raw = SymMatrix::symmetrize(p21.transpose() * p22_inv * &p21);
    let p_e = SymMatrix::symmetrize(&p11 - p_diff_raw.matrix());
    // recompute the complement so that p_e + p_diff reproduces P11 exactly
    let p_diff = SymMatrix::symmetrize(&p11 - p_e.matrix());
    if !matches!(definiteness(&p_e, 0.0)?, Definiteness::PositiveDefinite) {
        return Err(LinalgError::IllConditionedPartition);
    }
    Ok((p_e, p_diff))
}

/// True when every power of `a` decays, i.e. the spectral radius is below 1.
/// Determined by repeated squaring of `a` with a divergence guard.
pub fn is_schur(a: &DMatrix<f64>) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    if a.nrows() == 0 {
        return true;
    }
    let mut m = a.clone();
    for _ in 0..64 {
        let norm = m.norm();
        if norm < 1e-12 {
            return true;
        }
        if !norm.is_finite() || norm > 1e100 {
            return false;
        }
        m = &m * &m;
    }
    false
}

/// Solves the discrete Lyapunov equation `a' S a - S = -q` for `S` by the
/// squaring iteration `S <- S + a_k' S a_k`, `a_k <- a_k^2`.
pub fn solve_discrete_lyapunov(
    a: &DMatrix<f64>,
    q: &SymMatrix,
) -> Result<SymMatrix, LinalgError> {
    let n = q.dim();
    if a.nrows() != n || a.ncols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "a is {}x{}, q is {}x{}",
            a.nrows(),
            a.ncols(),
            n,
            n
        )));
    }
    if !matches!(definiteness(q, 0.0)?, Definiteness::PositiveDefinite) {
        return Err(LinalgError::NotPositiveDefinite);
    }
    let mut s = q.matrix().clone();
    let mut m = a.clone();
    for _ in 0..128 {
        let mn = m.norm();
        if mn < 1e-150 {
            break;
        }
        if !mn.is_finite() || mn > 1e30 {
            return Err(LinalgError::NotSchurStable);
        }
        let term = m.transpose() * &s * &m;
        let done = term.amax() <= 1e-18 * s.amax().max(1.0);
        s += term;
        m = &m * &m;
        if done {
            break;
        }
    }
    let s = SymMatrix::symmetrize(s);
    let residual = (a.transpose() * s.matrix() * a - s.matrix() + q.matrix()).amax();
    if residual > 1e-9 * q.matrix().amax().max(1.0) {
        return Err(LinalgError::NotSchurStable);
    }
    Ok(s)
}

/// Infinite-horizon discrete LQR gain via fixed-point Riccati iteration.
///
/// Returns `gain` with the convention `u = gain * x`, so that
/// `a + b * gain` is Schur stable.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SymMatrix,
    r: &SymMatrix,
) -> Result<DMatrix<f64>, LinalgError> {
    solve_dare(a, b, q, r).map(|(_, gain)| gain)
}

/// Stabilizing solution of the discrete algebraic Riccati equation together
/// with the associated LQR gain, by fixed-point iteration from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SymMatrix,
    r: &SymMatrix,
) -> Result<(SymMatrix, DMatrix<f64>), LinalgError> {
    let n = a.nrows();
    let nu = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.dim() != n || r.dim() != nu {
        return Err(LinalgError::DimensionMismatch(
            "lqr_gain inputs are inconsistent".into(),
        ));
    }
    if !matches!(definiteness(q, 0.0)?, Definiteness::PositiveDefinite)
        || !matches!(definiteness(r, 0.0)?, Definiteness::PositiveDefinite)
    {
        return Err(LinalgError::NotPositiveDefinite);
    }
    let mut p = q.matrix().clone();
    let mut converged = false;
    for _ in 0..RICCATI_MAX_ITERS {
        let btp = b.transpose() * &p;
        let gram = SymMatrix::symmetrize(r.matrix() + &btp * b);
        let chol = nalgebra::linalg::Cholesky::new(gram.matrix().clone())
            .ok_or(LinalgError::NotStabilizable)?;
        let btpa = &btp * a;
        let gain_part = chol.solve(&btpa);
        let p_next_raw = a.transpose() * &p * a - btpa.transpose() * &gain_part + q.matrix();
        let p_next = SymMatrix::symmetrize(p_next_raw).into_matrix();
        let diff = (&p_next - &p).amax();
        let scale = p.amax().max(1.0);
        if !diff.is_finite() || p_next.amax() > 1e14 {
            return Err(LinalgError::NotStabilizable);
        }
        p = p_next;
        if diff <= RICCATI_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NotStabilizable);
    }
    let btp = b.transpose() * &p;
    let gram = SymMatrix::symmetrize(r.matrix() + &btp * b);
    let chol = nalgebra::linalg::Cholesky::new(gram.matrix().clone())
        .ok_or(LinalgError::NotStabilizable)?;
    let gain = -chol.solve(&(&btp * a));
    let a_cl = a + b * &gain;
    if !is_schur(&a_cl) {
        return Err(LinalgError::NotStabilizable);
    }
    Ok((SymMatrix::symmetrize(p), gain))
}
