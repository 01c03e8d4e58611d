//! Dense convex quadratic programming by a primal-dual interior-point
//! method with soft inequality constraints:
//!
//! ```text
//! min  1/2 d'Bd + c'd + pi * sum(xi)
//! s.t. A d <= b + xi,   xi >= 0
//! ```
//!
//! With the penalty `pi` large this behaves like the hard-constrained QP
//! whenever that is feasible (all `xi` vanish at the solution); when the
//! constraints are inconsistent the elastic terms absorb the conflict and
//! the returned `xi` exposes which rows could not be met. The dual of the
//! elastic form bounds the multipliers to `0 <= mu <= pi`, which keeps the
//! Newton systems of size `n` regardless of the number of rows.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Newton system could not be factored")]
    Factorization,
    #[error("iteration cap {0} exhausted before convergence")]
    MaxIterations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    /// Multipliers of the inequality rows, in `[0, penalty]`.
    pub mu: DVector<f64>,
    /// Elastic slack per row; nonzero entries mark rows the solver had to
    /// relax.
    pub xi: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub gap: f64,
}

impl QpSolution {
    /// Largest elastic relaxation over all rows.
    pub fn max_relaxation(&self) -> f64 {
        self.xi.amax().max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    pub penalty: f64,
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            penalty: 1e9,
            max_iterations: 120,
            tol: 1e-10,
        }
    }
}

/// Solves the soft-constrained QP. `b_mat` must be symmetric positive
/// semidefinite (it is regularized internally when needed). `warm` seeds
/// the primal variable only.
pub fn solve_qp(
    b_mat: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    warm: Option<&DVector<f64>>,
    opts: &QpOptions,
) -> Result<QpSolution, QpError> {
    let n = c.len();
    let m = b.len();
    if b_mat.nrows() != n || b_mat.ncols() != n {
        return Err(QpError::DimensionMismatch("Hessian must be n x n".into()));
    }
    if a.nrows() != m || a.ncols() != n {
        return Err(QpError::DimensionMismatch(format!(
            "constraint matrix is {}x{}, expected {}x{}",
            a.nrows(),
            a.ncols(),
            m,
            n
        )));
    }
    let pi = opts.penalty;
    let mut d = match warm {
        Some(w) if w.len() == n => w.clone(),
        _ => DVector::zeros(n),
    };
    if m == 0 {
        // unconstrained: single regularized solve
        let sol = factor_solve(b_mat, &(-(c.clone())), 0.0)?;
        return Ok(QpSolution {
            d: sol,
            mu: DVector::zeros(0),
            xi: DVector::zeros(0),
            status: QpStatus::Converged,
            iterations: 1,
            gap: 0.0,
        });
    }

    let ad = a * &d;
    let mut xi = DVector::from_fn(m, |i, _| (ad[i] - b[i]).max(0.0) + 1.0);
    let mut s = DVector::from_fn(m, |i, _| xi[i] + b[i] - ad[i]);
    let mut mu = DVector::from_element(m, (pi * 0.5).min(1.0));

    let scale = 1.0 + c.amax().max(b_mat.amax());
    let mut iterations = 0;
    loop {
        if iterations >= opts.max_iterations {
            return Ok(QpSolution {
                d,
                mu,
                xi,
                status: QpStatus::MaxIterations,
                iterations,
                gap: f64::NAN,
            });
        }
        iterations += 1;

        let r_d = b_mat * &d + c + a.transpose() * &mu;
        let r_p = a * &d + &s - &xi - b;
        let gap = (mu.dot(&s) + xi.iter().zip(mu.iter()).map(|(x, m)| x * (pi - m)).sum::<f64>())
            / (2.0 * m as f64);
        if r_d.amax() <= opts.tol * scale && r_p.amax() <= opts.tol * (1.0 + b.amax()) && gap <= opts.tol * scale {
            return Ok(QpSolution {
                d,
                mu,
                xi,
                status: QpStatus::Converged,
                iterations,
                gap,
            });
        }

        let tau = 0.1 * gap;
        // eliminate (s, xi) and then mu: D = s/mu + xi/(pi - mu)
        let mut dinv = DVector::zeros(m);
        let mut rhs_tilde = DVector::zeros(m);
        for i in 0..m {
            let dcoef = s[i] / mu[i] + xi[i] / (pi - mu[i]);
            dinv[i] = 1.0 / dcoef;
            let r_c1 = mu[i] * s[i] - tau;
            let r_c2 = (pi - mu[i]) * xi[i] - tau;
            rhs_tilde[i] = r_p[i] - r_c1 / mu[i] + r_c2 / (pi - mu[i]);
        }
        // (B + A' Dinv A) dd = -r_d - A' Dinv rhs_tilde
        let mut big = b_mat.clone();
        for i in 0..m {
            let row = a.row(i);
            let w = dinv[i];
            // rank-one update w * a_i a_i'
            for p in 0..n {
                let ap = row[p] * w;
                if ap == 0.0 {
                    continue;
                }
                for q in 0..n {
                    big[(p, q)] += ap * row[q];
                }
            }
        }
        let rhs = -(r_d + a.transpose() * DVector::from_fn(m, |i, _| dinv[i] * rhs_tilde[i]));
        let dd = factor_solve(&big, &rhs, 1e-12 * (1.0 + big.amax()))?;

        let add = a * &dd;
        let mut dmu = DVector::zeros(m);
        let mut ds = DVector::zeros(m);
        let mut dxi = DVector::zeros(m);
        for i in 0..m {
            let r_c1 = mu[i] * s[i] - tau;
            let r_c2 = (pi - mu[i]) * xi[i] - tau;
            dmu[i] = dinv[i] * (add[i] + rhs_tilde[i]);
            ds[i] = (-r_c1 - s[i] * dmu[i]) / mu[i];
            dxi[i] = (-r_c2 + xi[i] * dmu[i]) / (pi - mu[i]);
        }

        // fraction to the boundary
        let mut alpha = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha = alpha.min(-s[i] / ds[i]);
            }
            if dxi[i] < 0.0 {
                alpha = alpha.min(-xi[i] / dxi[i]);
            }
            if dmu[i] < 0.0 {
                alpha = alpha.min(-mu[i] / dmu[i]);
            }
            if dmu[i] > 0.0 {
                alpha = alpha.min((pi - mu[i]) / dmu[i]);
            }
        }
        alpha = (0.995 * alpha).min(1.0);
        d += &dd * alpha;
        s += &ds * alpha;
        xi += &dxi * alpha;
        mu += &dmu * alpha;
        for i in 0..m {
            s[i] = s[i].max(1e-300);
            xi[i] = xi[i].max(1e-300);
            mu[i] = mu[i].clamp(1e-300, pi * (1.0 - 1e-16));
        }
    }
}

/// Cholesky solve with escalating diagonal regularization.
fn factor_solve(
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
    reg0: f64,
) -> Result<DVector<f64>, QpError> {
    let n = m.nrows();
    let mut reg = reg0;
    loop {
        let mut h = m.clone();
        if reg > 0.0 {
            for i in 0..n {
                h[(i, i)] += reg;
            }
        }
        if let Some(ch) = nalgebra::linalg::Cholesky::new(h) {
            return Ok(ch.solve(rhs));
        }
        reg = if reg == 0.0 {
            1e-12 * (1.0 + m.amax())
        } else {
            reg * 100.0
        };
        if reg > 1e20 {
            return Err(QpError::Factorization);
        }
    }
}
