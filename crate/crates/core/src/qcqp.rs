//! Sequential quadratic programming for problems whose objective and
//! constraints are all (at most) quadratic. Each iteration linearizes the
//! constraints, solves a convex QP subproblem with the exact Lagrangian
//! Hessian (regularized to positive definiteness), and accepts steps
//! through a filter on (infeasibility, objective). Infeasible subproblems
//! are absorbed by the QP's elastic rows; a ramping penalty doubles as the
//! feasibility-restoration mechanism.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpOptions};

#[derive(Debug, Error)]
pub enum QcqpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Convex part of a constraint Hessian used in the SQP model. Concave
/// constraints linearize to an outer approximation, so dropping their
/// curvature keeps the subproblem convex without losing soundness.
#[derive(Debug, Clone, Default)]
pub enum ConvexPart {
    /// The Hessian is positive semidefinite; use it as is.
    #[default]
    Full,
    /// The Hessian is negative semidefinite (concave constraint).
    None,
    /// Indefinite Hessian with an explicitly supplied convex part.
    Split(DMatrix<f64>),
}

/// A quadratic expression `1/2 x'Hx + b'x + c`. `h = None` means linear.
#[derive(Debug, Clone)]
pub struct QuadExpr {
    pub h: Option<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub c: f64,
    pub convex_part: ConvexPart,
}

impl QuadExpr {
    pub fn linear(b: DVector<f64>, c: f64) -> Self {
        Self {
            h: None,
            b,
            c,
            convex_part: ConvexPart::Full,
        }
    }

    /// Quadratic with positive semidefinite Hessian.
    pub fn convex(h: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        Self {
            h: Some(h),
            b,
            c,
            convex_part: ConvexPart::Full,
        }
    }

    /// Quadratic with negative semidefinite Hessian.
    pub fn concave(h: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        Self {
            h: Some(h),
            b,
            c,
            convex_part: ConvexPart::None,
        }
    }

    /// Indefinite quadratic with an explicit convex Hessian part.
    pub fn split(h: DMatrix<f64>, h_plus: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        Self {
            h: Some(h),
            b,
            c,
            convex_part: ConvexPart::Split(h_plus),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.b.dot(x) + self.c;
        if let Some(h) = &self.h {
            v += 0.5 * (x.transpose() * h * x)[(0, 0)];
        }
        v
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.h {
            Some(h) => h * x + &self.b,
            None => self.b.clone(),
        }
    }
}

/// `minimize objective(x) s.t. constraints[j](x) <= 0 for all j`.
#[derive(Debug, Clone)]
pub struct QcqpProblem {
    pub n: usize,
    pub objective: QuadExpr,
    pub constraints: Vec<QuadExpr>,
}

impl QcqpProblem {
    pub fn new(n: usize, objective: QuadExpr) -> Self {
        Self {
            n,
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn add_constraint(&mut self, e: QuadExpr) {
        debug_assert_eq!(e.b.len(), self.n);
        self.constraints.push(e);
    }

    /// Worst constraint value (positive = infeasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.constraints
            .iter()
            .map(|g| g.value(x))
            .fold(0.0f64, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    /// KKT conditions met to tolerance.
    Optimal,
    /// A feasible point is returned but optimality was not certified.
    FeasibleSuboptimal,
    /// No point with violation below tolerance was found.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub status: SqpStatus,
    pub objective: f64,
    pub violation: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SqpOptions {
    pub max_iterations: usize,
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub penalty_init: f64,
    pub penalty_max: f64,
    /// Run a least-squares projection after convergence to push constraint
    /// residuals toward machine precision.
    pub polish: bool,
    /// Initial trust radius on the step (sup norm).
    pub trust_init: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tol_kkt: 1e-6,
            tol_feas: 1e-8,
            penalty_init: 1e4,
            penalty_max: 1e9,
            polish: true,
            trust_init: 1.0,
        }
    }
}

/// Minimum-norm correction steps onto the linearized active rows; squares
/// the residual per pass, so a near-feasible point lands at machine-level
/// feasibility in a few passes.
fn polish_feasibility(prob: &QcqpProblem, x: &mut DVector<f64>) {
    let n = prob.n;
    // a polish, not a rescue: only touch near-feasible points, bound every
    // correction, and never accept a step that worsens the violation
    if prob.max_violation(x) > 1e-4 {
        return;
    }
    for _ in 0..4 {
        let viol = prob.max_violation(x);
        if viol <= 1e-14 {
            break;
        }
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for g in &prob.constraints {
            let v = g.value(x);
            if v > -1e-7 {
                rows.push(g.gradient(x));
                rhs.push(-v);
            }
        }
        if rows.is_empty() {
            break;
        }
        let m = rows.len();
        let bound = 1e-2 * (1.0 + x.amax());
        let mut a = DMatrix::zeros(m + 2 * n, n);
        let mut b = DVector::zeros(m + 2 * n);
        for (i, r) in rows.iter().enumerate() {
            a.row_mut(i).copy_from(&r.transpose());
            b[i] = rhs[i];
        }
        for i in 0..n {
            a[(m + 2 * i, i)] = 1.0;
            b[m + 2 * i] = bound;
            a[(m + 2 * i + 1, i)] = -1.0;
            b[m + 2 * i + 1] = bound;
        }
        let eye = DMatrix::identity(n, n);
        match solve_qp(
            &eye,
            &DVector::zeros(n),
            &a,
            &b,
            None,
            &QpOptions {
                penalty: 1e10,
                max_iterations: 80,
                tol: 1e-13,
            },
        ) {
            Ok(sol) => {
                let trial = &*x + &sol.d;
                let tv = prob.max_violation(&trial);
                if std::env::var("SQP_DEBUG").is_ok() {
                    eprintln!(
                        "    polish pass: viol {viol:.3e} -> {tv:.3e}, |d|={:.3e}, rows={m}, relax={:.3e}",
                        sol.d.amax(),
                        sol.max_relaxation()
                    );
                }
                if tv < viol {
                    *x = trial;
                } else {
                    break;
                }
            }
            Err(_) => break,
        }
    }
}

struct FilterEntry {
    violation: f64,
    objective: f64,
}

/// Solves the QCQP from `x0` by filter SQP. The best feasible iterate seen
/// (including `x0` when feasible) is tracked and returned if the final
/// iterate is not an improvement, so with a feasible warm start the result
/// never costs more than the start.
pub fn solve_sqp(prob: &QcqpProblem, x0: &DVector<f64>, opts: &SqpOptions) -> Result<SqpResult, QcqpError> {
    let n = prob.n;
    if x0.len() != n {
        return Err(QcqpError::DimensionMismatch(format!(
            "start has length {}, expected {n}",
            x0.len()
        )));
    }
    let m = prob.constraints.len();
    let mut x = x0.clone();
    let mut mu = DVector::zeros(m);
    let mut penalty = opts.penalty_init;
    let mut trust = opts.trust_init;
    let mut filter: Vec<FilterEntry> = Vec::new();
    let mut best_feasible: Option<(DVector<f64>, f64, DVector<f64>)> = None;

    let consider_best =
        |best: &mut Option<(DVector<f64>, f64, DVector<f64>)>, x: &DVector<f64>, f: f64, v: f64, mu: &DVector<f64>| {
            if v <= opts.tol_feas {
                match best {
                    Some((_, bf, _)) if *bf <= f => {}
                    _ => *best = Some((x.clone(), f, mu.clone())),
                }
            }
        };

    let f0 = prob.objective.value(&x);
    let v0 = prob.max_violation(&x);
    consider_best(&mut best_feasible, &x, f0, v0, &mu);

    let mut iterations = 0;
    let mut kkt_residual = f64::INFINITY;
    while iterations < opts.max_iterations {
        iterations += 1;

        // linearization at x
        let f = prob.objective.value(&x);
        let grad_f = prob.objective.gradient(&x);
        let mut g_vals = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, n);
        for (j, gj) in prob.constraints.iter().enumerate() {
            g_vals[j] = gj.value(&x);
            jac.row_mut(j).copy_from(&gj.gradient(&x).transpose());
        }
        let violation = g_vals.iter().fold(0.0f64, |a, v| a.max(*v));

        // KKT residuals with current multipliers
        let stat = {
            let r = &grad_f + jac.transpose() * &mu;
            r.amax() / (1.0 + mu.amax())
        };
        let compl = (0..m)
            .map(|j| (mu[j] * g_vals[j]).abs())
            .fold(0.0f64, f64::max)
            / (1.0 + f.abs());
        kkt_residual = stat.max(compl).max(violation);
        if violation <= opts.tol_feas && stat <= opts.tol_kkt && compl <= opts.tol_kkt {
            if opts.polish {
                polish_feasibility(prob, &mut x);
            }
            let f = prob.objective.value(&x);
            let violation = prob.max_violation(&x);
            if std::env::var("SQP_DEBUG").is_ok() {
                eprintln!("  sqp optimal-exit: post-polish viol={violation:.3e}");
            }
            return Ok(SqpResult {
                x,
                multipliers: mu,
                status: SqpStatus::Optimal,
                objective: f,
                violation,
                kkt_residual,
                iterations,
            });
        }

        // convex model Hessian: objective curvature plus the convex part of
        // each constraint's curvature (concave rows are outer-approximated
        // by their linearization)
        let mut hess = match &prob.objective.h {
            Some(h) => h.clone(),
            None => DMatrix::zeros(n, n),
        };
        for (j, gj) in prob.constraints.iter().enumerate() {
            if mu[j] == 0.0 {
                continue;
            }
            match (&gj.h, &gj.convex_part) {
                (Some(h), ConvexPart::Full) => hess += h * mu[j],
                (_, ConvexPart::None) | (None, _) => {}
                (_, ConvexPart::Split(hp)) => hess += hp * mu[j],
            }
        }
        let mut b_qp = hess;
        let reg = 1e-10 * (1.0 + b_qp.amax());
        for i in 0..n {
            b_qp[(i, i)] += reg;
        }

        // QP subproblem over the near-active rows only: deeply satisfied
        // rows cannot activate within one step, and the line search checks
        // the full violation, so screening them out is sound
        let mut keep: Vec<usize> = Vec::with_capacity(m);
        for j in 0..m {
            let scale_j = 1.0 + jac.row(j).amax();
            if g_vals[j] > -0.2 * scale_j {
                keep.push(j);
            }
        }
        let mk = keep.len();
        // trust-region box rows |d_i| <= trust appended after the kept rows
        let mut jac_k = DMatrix::zeros(mk + 2 * n, n);
        let mut rhs_k = DVector::zeros(mk + 2 * n);
        for (row, &j) in keep.iter().enumerate() {
            jac_k.row_mut(row).copy_from(&jac.row(j));
            rhs_k[row] = -g_vals[j];
        }
        for i in 0..n {
            jac_k[(mk + 2 * i, i)] = 1.0;
            rhs_k[mk + 2 * i] = trust;
            jac_k[(mk + 2 * i + 1, i)] = -1.0;
            rhs_k[mk + 2 * i + 1] = trust;
        }
        let qp = solve_qp(
            &b_qp,
            &grad_f,
            &jac_k,
            &rhs_k,
            None,
            &QpOptions {
                penalty,
                max_iterations: 100,
                tol: 1e-11,
            },
        )?;
        let d = qp.d;
        let mut mu_new = DVector::zeros(m);
        for (row, &j) in keep.iter().enumerate() {
            mu_new[j] = qp.mu[row];
        }
        let step_norm = d.amax();
        let at_trust_boundary = step_norm >= 0.99 * trust;
        if step_norm <= 1e-14 * (1.0 + x.amax()) {
            // stationary for the current penalty
            if violation > opts.tol_feas && penalty < opts.penalty_max {
                penalty *= 10.0;
                continue;
            }
            break;
        }

        if std::env::var("SQP_DEBUG").is_ok() {
            eprintln!(
                "  sqp it={iterations} f={f:.9} viol={violation:.2e} stat={stat:.2e} compl={compl:.2e} |d|={step_norm:.2e} pen={penalty:.1e}"
            );
        }
        // filter line search on (violation, objective)
        let mut alpha = 1.0f64;
        let mut accepted = false;
        while alpha >= 1e-12 {
            let xt = &x + &d * alpha;
            let ft = prob.objective.value(&xt);
            let vt = prob.max_violation(&xt);
            let dominated = filter.iter().any(|e| {
                vt >= e.violation - 1e-12 * (1.0 + e.violation) && ft >= e.objective - 1e-12 * (1.0 + e.objective.abs())
            });
            // h-type steps reduce infeasibility; f-type steps reduce cost
            // without materially worsening feasibility
            let improves = vt < violation * (1.0 - 1e-4 * alpha) - 1e-16
                || (ft < f - 1e-4 * alpha * step_norm * step_norm
                    && vt <= (violation * 1.001).max(opts.tol_feas))
                || (vt <= opts.tol_feas && ft <= f);
            if !dominated && improves {
                filter.push(FilterEntry {
                    violation: vt,
                    objective: ft,
                });
                if filter.len() > 200 {
                    filter.remove(0);
                }
                x = xt;
                mu = mu_new.clone();
                consider_best(&mut best_feasible, &x, ft, vt, &mu);
                accepted = true;
                // trust-region update
                if alpha >= 1.0 - 1e-12 && at_trust_boundary {
                    trust = (trust * 2.0).min(64.0 * opts.trust_init);
                } else if alpha < 0.25 {
                    trust = (trust * 0.5).max(1e-10);
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            trust = (trust * 0.25).max(1e-10);
            if violation > opts.tol_feas && penalty < opts.penalty_max {
                penalty *= 10.0;
                filter.clear();
                continue;
            }
            break;
        }
    }

    // not certified optimal: fall back to the best feasible iterate
    let (mut x_final, mu_final) = match &best_feasible {
        Some((bx, _, bmu)) => (bx.clone(), bmu.clone()),
        None => (x, mu),
    };
    if opts.polish {
        polish_feasibility(prob, &mut x_final);
    }
    let f_final = prob.objective.value(&x_final);
    let v_final = prob.max_violation(&x_final);
    if std::env::var("SQP_DEBUG").is_ok() {
        eprintln!("  sqp fallback-exit: post-polish viol={v_final:.3e}");
    }
    let status = if v_final <= opts.tol_feas {
        SqpStatus::FeasibleSuboptimal
    } else {
        SqpStatus::Infeasible
    };
    Ok(SqpResult {
        x: x_final,
        multipliers: mu_final,
        status,
        objective: f_final,
        violation: v_final,
        kkt_residual,
        iterations,
    })
}

/// Solves from several starts and keeps the best outcome: optimal beats
/// suboptimal beats infeasible; ties break on objective. Stops at the
/// first KKT-certified start.
pub fn solve_sqp_multistart(
    prob: &QcqpProblem,
    starts: &[DVector<f64>],
    opts: &SqpOptions,
) -> Result<SqpResult, QcqpError> {
    let mut best: Option<SqpResult> = None;
    for x0 in starts {
        let res = solve_sqp(prob, x0, opts)?;
        let certified = res.status == SqpStatus::Optimal;
        let better = match &best {
            None => true,
            Some(b) => {
                let rank = |s: &SqpStatus| match s {
                    SqpStatus::Optimal => 0,
                    SqpStatus::FeasibleSuboptimal => 1,
                    SqpStatus::Infeasible => 2,
                };
                (rank(&res.status), res.objective) < (rank(&b.status), b.objective)
            }
        };
        if better {
            best = Some(res);
        }
        if certified {
            break;
        }
    }
    Ok(best.expect("at least one start required"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn convex_quad(h: &[f64], n: usize, b: &[f64], c: f64) -> QuadExpr {
        QuadExpr::convex(
            DMatrix::from_row_slice(n, n, h),
            DVector::from_row_slice(b),
            c,
        )
    }

    fn concave_quad(h: &[f64], n: usize, b: &[f64], c: f64) -> QuadExpr {
        QuadExpr::concave(
            DMatrix::from_row_slice(n, n, h),
            DVector::from_row_slice(b),
            c,
        )
    }

    #[test]
    fn convex_ball_constraint() {
        // min x^2 + y^2 s.t. (x-1)^2 + y^2 <= 1/4  =>  (1/2, 0)
        let mut prob = QcqpProblem::new(
            2,
            convex_quad(&[2.0, 0.0, 0.0, 2.0], 2, &[0.0, 0.0], 0.0),
        );
        prob.add_constraint(convex_quad(
            &[2.0, 0.0, 0.0, 2.0],
            2,
            &[-2.0, 0.0],
            1.0 - 0.25,
        ));
        let res = solve_sqp(
            &prob,
            &DVector::from_row_slice(&[1.0, 0.0]),
            &SqpOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, SqpStatus::Optimal);
        assert_relative_eq!(res.x[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(res.x[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn nonconvex_exterior_constraint() {
        // min (x - 0.2)^2 s.t. 1 - x^2 <= 0: optimum at x = 1
        let mut prob = QcqpProblem::new(1, convex_quad(&[2.0], 1, &[-0.4], 0.04));
        prob.add_constraint(concave_quad(&[-2.0], 1, &[0.0], 1.0));
        let res = solve_sqp(
            &prob,
            &DVector::from_row_slice(&[1.6]),
            &SqpOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, SqpStatus::Optimal);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn detects_infeasibility() {
        // x <= -1 and x >= 1
        let mut prob = QcqpProblem::new(1, convex_quad(&[2.0], 1, &[0.0], 0.0));
        prob.add_constraint(QuadExpr::linear(DVector::from_row_slice(&[1.0]), 1.0));
        prob.add_constraint(QuadExpr::linear(DVector::from_row_slice(&[-1.0]), 1.0));
        let res = solve_sqp(
            &prob,
            &DVector::from_row_slice(&[0.0]),
            &SqpOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, SqpStatus::Infeasible);
        assert!(res.violation > 0.5);
    }

    #[test]
    fn feasible_warm_start_never_worsens() {
        // strongly curved nonconvex constraint with a feasible start; the
        // returned point must be at least as good as the start
        let mut prob = QcqpProblem::new(
            2,
            convex_quad(&[2.0, 0.0, 0.0, 2.0], 2, &[0.0, -1.0], 0.0),
        );
        prob.add_constraint(QuadExpr::split(
            DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
            DVector::from_row_slice(&[0.0, 0.0]),
            0.5,
        ));
        let x0 = DVector::from_row_slice(&[1.2, 0.1]);
        assert!(prob.max_violation(&x0) <= 0.0);
        let f0 = prob.objective.value(&x0);
        let res = solve_sqp(&prob, &x0, &SqpOptions::default()).unwrap();
        assert!(res.violation <= 1e-8);
        assert!(res.objective <= f0 + 1e-9);
    }

    #[test]
    fn multistart_picks_feasible_branch() {
        // same exterior problem; a start deep in the infeasible hole plus a
        // good one
        let mut prob = QcqpProblem::new(1, convex_quad(&[2.0], 1, &[-0.4], 0.04));
        prob.add_constraint(concave_quad(&[-2.0], 1, &[0.0], 1.0));
        let res = solve_sqp_multistart(
            &prob,
            &[
                DVector::from_row_slice(&[0.0]),
                DVector::from_row_slice(&[1.4]),
            ],
            &SqpOptions::default(),
        )
        .unwrap();
        assert!(matches!(res.status, SqpStatus::Optimal));
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-5);
    }
}
