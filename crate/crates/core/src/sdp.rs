//! A small dense semidefinite-program solver.
//!
//! Problems are posed over scalar variables and symmetric matrix variables,
//! with affine LMI constraints (each an affine map from the variables to a
//! symmetric matrix required to clear a definiteness margin) and an optional
//! linear objective. Constraints are materialized by probing the affine map
//! on the coordinate basis, then solved with a two-phase log-det barrier
//! method: phase I minimizes the worst block eigenvalue until a strictly
//! feasible point is found (or infeasibility is certified through the
//! barrier duality gap), phase II follows the central path of the objective
//! with damped Newton steps.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{sym_eig, SymMatrix};

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("problem is infeasible (best achievable margin {best_margin:.3e})")]
    Infeasible { best_margin: f64 },
    #[error("iteration cap of {0} Newton steps exhausted")]
    MaxIterations(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("constraint '{name}' is not an affine symmetric map: {reason}")]
    BadConstraint { name: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Handle to a symmetric matrix decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymVar(usize);

/// Handle to a scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalarVar(usize);

#[derive(Debug, Clone)]
enum VarKind {
    Sym { dim: usize },
    Scalar,
}

#[derive(Debug, Clone)]
struct VarInfo {
    kind: VarKind,
    offset: usize,
}

/// Read access to a candidate assignment, handed to constraint builders
/// and used to extract solutions.
pub struct SdpPoint<'a> {
    vars: &'a [VarInfo],
    x: &'a [f64],
}

impl SdpPoint<'_> {
    /// Current value of a symmetric matrix variable.
    pub fn sym(&self, v: SymVar) -> SymMatrix {
        let info = &self.vars[v.0];
        let d = match info.kind {
            VarKind::Sym { dim } => dim,
            VarKind::Scalar => panic!("variable is scalar, not symmetric"),
        };
        let mut m = DMatrix::zeros(d, d);
        let mut k = info.offset;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = self.x[k];
                m[(j, i)] = self.x[k];
                k += 1;
            }
        }
        SymMatrix::symmetrize(m)
    }

    /// Current value of a scalar variable.
    pub fn scalar(&self, v: ScalarVar) -> f64 {
        let info = &self.vars[v.0];
        match info.kind {
            VarKind::Scalar => self.x[info.offset],
            VarKind::Sym { .. } => panic!("variable is symmetric, not scalar"),
        }
    }
}

/// Required sign of a constraint block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// The affine map must satisfy `S(x) >= margin * I`.
    PosSemidef,
    /// The affine map must satisfy `S(x) <= -margin * I`.
    NegSemidef,
}

/// A materialized constraint in canonical form `G(x) = c0 + sum x_k A_k <= 0`.
struct Block {
    name: String,
    dim: usize,
    c0: DMatrix<f64>,
    terms: Vec<(usize, DMatrix<f64>)>,
    scale: f64,
}

/// Semidefinite program under construction.
#[derive(Default)]
pub struct SdpProblem {
    vars: Vec<VarInfo>,
    n: usize,
    blocks: Vec<Block>,
    objective: Option<(DVector<f64>, f64)>,
}

/// Assignment returned by the solver.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    x: DVector<f64>,
    vars: Vec<VarInfo>,
    /// Smallest margin by which any constraint block clears zero, beyond
    /// the margins already folded into the blocks.
    pub feasibility_margin: f64,
    pub objective: Option<f64>,
    pub newton_iterations: usize,
}

impl SdpSolution {
    pub fn sym(&self, v: SymVar) -> SymMatrix {
        SdpPoint {
            vars: &self.vars,
            x: self.x.as_slice(),
        }
        .sym(v)
    }

    pub fn scalar(&self, v: ScalarVar) -> f64 {
        SdpPoint {
            vars: &self.vars,
            x: self.x.as_slice(),
        }
        .scalar(v)
    }
}

#[derive(Debug, Clone)]
pub struct SdpOptions {
    /// Global cap on Newton steps across both phases.
    pub max_newton_iterations: usize,
    /// Relative duality-gap tolerance on the objective.
    pub objective_tol: f64,
    /// Margin (beyond the per-constraint margins) that phase I tries to
    /// reach before handing over; also the depth target for pure
    /// feasibility problems.
    pub target_margin: f64,
    /// Barrier parameter multiplier between centerings.
    pub mu: f64,
    /// Optional initial assignment.
    pub init: Option<DVector<f64>>,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            max_newton_iterations: 50_000,
            objective_tol: 1e-8,
            target_margin: 1e-6,
            mu: 20.0,
            init: None,
        }
    }
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a symmetric `dim` x `dim` matrix variable.
    pub fn sym_var(&mut self, dim: usize) -> SymVar {
        let len = dim * (dim + 1) / 2;
        self.vars.push(VarInfo {
            kind: VarKind::Sym { dim },
            offset: self.n,
        });
        self.n += len;
        SymVar(self.vars.len() - 1)
    }

    /// Registers a scalar variable, optionally bounded below and/or above.
    pub fn scalar_var(&mut self, lower: Option<f64>, upper: Option<f64>) -> ScalarVar {
        self.vars.push(VarInfo {
            kind: VarKind::Scalar,
            offset: self.n,
        });
        self.n += 1;
        let v = ScalarVar(self.vars.len() - 1);
        let off = self.vars[v.0].offset;
        if let Some(lo) = lower {
            self.blocks.push(Block {
                name: format!("scalar#{} lower bound", v.0),
                dim: 1,
                c0: DMatrix::from_element(1, 1, lo),
                terms: vec![(off, DMatrix::from_element(1, 1, -1.0))],
                scale: lo.abs().max(1.0),
            });
        }
        if let Some(hi) = upper {
            self.blocks.push(Block {
                name: format!("scalar#{} upper bound", v.0),
                dim: 1,
                c0: DMatrix::from_element(1, 1, -hi),
                terms: vec![(off, DMatrix::from_element(1, 1, 1.0))],
                scale: hi.abs().max(1.0),
            });
        }
        v
    }

    pub fn n_variables(&self) -> usize {
        self.n
    }

    fn probe<R>(&self, f: &dyn Fn(&SdpPoint) -> R, x: &[f64]) -> R {
        f(&SdpPoint {
            vars: &self.vars,
            x,
        })
    }

    /// Adds an LMI constraint given as an affine map from the currently
    /// registered variables to a symmetric matrix. The map is probed on the
    /// coordinate basis to extract its coefficients, so it must be affine.
    pub fn add_lmi(
        &mut self,
        name: &str,
        sense: Sense,
        margin: f64,
        builder: impl Fn(&SdpPoint) -> DMatrix<f64>,
    ) -> Result<(), SdpError> {
        if margin < 0.0 {
            return Err(SdpError::InvalidArgument(format!(
                "constraint '{name}': margin must be nonnegative"
            )));
        }
        let zero = vec![0.0; self.n];
        let m0 = self.probe(&builder, &zero);
        let dim = m0.nrows();
        if m0.ncols() != dim {
            return Err(SdpError::BadConstraint {
                name: name.into(),
                reason: format!("map returns a {}x{} matrix", m0.nrows(), m0.ncols()),
            });
        }
        if dim == 0 {
            return Ok(());
        }
        let sym_tol = 1e-9 * m0.amax().max(1.0);
        if (m0.clone() - m0.transpose()).amax() > sym_tol {
            return Err(SdpError::BadConstraint {
                name: name.into(),
                reason: "map value is not symmetric".into(),
            });
        }
        let sign = match sense {
            Sense::NegSemidef => 1.0,
            Sense::PosSemidef => -1.0,
        };
        let mut scale: f64 = m0.amax().max(1.0);
        let mut terms = Vec::new();
        let mut probe_x = zero;
        for k in 0..self.n {
            probe_x[k] = 1.0;
            let mk = self.probe(&builder, &probe_x);
            probe_x[k] = 0.0;
            if mk.nrows() != dim || mk.ncols() != dim {
                return Err(SdpError::BadConstraint {
                    name: name.into(),
                    reason: "map dimension varies with the variables".into(),
                });
            }
            let ak = (mk - &m0) * sign;
            if ak.amax() > 0.0 {
                scale = scale.max(ak.amax());
                terms.push((k, SymMatrix::symmetrize(ak).into_matrix()));
            }
        }
        let c0 = SymMatrix::symmetrize(m0 * sign + DMatrix::identity(dim, dim) * margin)
            .into_matrix();
        self.blocks.push(Block {
            name: name.into(),
            dim,
            c0,
            terms,
            scale,
        });
        Ok(())
    }

    /// Sets a linear objective, probed the same way as constraints.
    pub fn set_objective(&mut self, f: impl Fn(&SdpPoint) -> f64) {
        let zero = vec![0.0; self.n];
        let f0 = self.probe(&(|p: &SdpPoint| f(p)), &zero);
        let mut c = DVector::zeros(self.n);
        let mut probe_x = zero;
        for k in 0..self.n {
            probe_x[k] = 1.0;
            c[k] = self.probe(&(|p: &SdpPoint| f(p)), &probe_x) - f0;
            probe_x[k] = 0.0;
        }
        self.objective = Some((c, f0));
    }

    /// Evaluates `G_j(x)` for a canonical block.
    fn block_value(block: &Block, x: &DVector<f64>, s_shift: f64) -> DMatrix<f64> {
        let mut g = block.c0.clone();
        for (k, a) in &block.terms {
            let xk = x[*k];
            if xk != 0.0 {
                g += a * xk;
            }
        }
        if s_shift != 0.0 {
            for i in 0..block.dim {
                g[(i, i)] -= s_shift;
            }
        }
        g
    }

    /// Solves the program. Feasibility problems (no objective) are driven
    /// to `target_margin` depth; objective problems follow the central path
    /// until the relative duality gap falls below `objective_tol`.
    pub fn solve(&self, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
        if self.n == 0 {
            return Err(SdpError::InvalidArgument("no decision variables".into()));
        }
        let mut budget = NewtonBudget {
            used: 0,
            cap: opts.max_newton_iterations,
        };
        let global_scale = self
            .blocks
            .iter()
            .map(|b| b.scale)
            .fold(1.0_f64, f64::max);

        let x0 = match &opts.init {
            Some(v) => {
                if v.len() != self.n {
                    return Err(SdpError::InvalidArgument(
                        "initial point has wrong dimension".into(),
                    ));
                }
                v.clone()
            }
            None => DVector::zeros(self.n),
        };

        let depth = opts.target_margin * global_scale.max(1.0);
        let x_feas = self.phase1(&x0, depth, opts, &mut budget)?;

        let Some((c, off)) = &self.objective else {
            let (margin, _) = self.margins(&x_feas);
            return Ok(SdpSolution {
                x: x_feas,
                vars: self.vars.clone(),
                feasibility_margin: margin,
                objective: None,
                newton_iterations: budget.used,
            });
        };

        let x_opt = self.phase2(&x_feas, c, opts, &mut budget)?;
        let (margin, _) = self.margins(&x_opt);
        if margin < 0.0 {
            return Err(SdpError::NumericalFailure(format!(
                "optimizer left the feasible region (margin {margin:.3e})"
            )));
        }
        let obj = c.dot(&x_opt) + off;
        Ok(SdpSolution {
            x: x_opt,
            vars: self.vars.clone(),
            feasibility_margin: margin,
            objective: Some(obj),
            newton_iterations: budget.used,
        })
    }

    /// Worst-case margin `min_j -lambda_max(G_j(x))` and the block index
    /// attaining it.
    fn margins(&self, x: &DVector<f64>) -> (f64, usize) {
        let mut worst = f64::INFINITY;
        let mut arg = 0;
        for (j, b) in self.blocks.iter().enumerate() {
            let g = SymMatrix::symmetrize(Self::block_value(b, x, 0.0));
            let lmax = sym_eig(&g)
                .map(|e| e.values[b.dim - 1])
                .unwrap_or(f64::INFINITY);
            if -lmax < worst {
                worst = -lmax;
                arg = j;
            }
        }
        (worst, arg)
    }

    /// Phase I: minimize the uniform shift `s` with `G_j(x) <= s I` until
    /// `s <= -depth`, or certify infeasibility via the barrier gap.
    fn phase1(
        &self,
        x0: &DVector<f64>,
        depth: f64,
        opts: &SdpOptions,
        budget: &mut NewtonBudget,
    ) -> Result<DVector<f64>, SdpError> {
        // initial shift strictly above the worst eigenvalue
        let mut s_needed = f64::NEG_INFINITY;
        for b in &self.blocks {
            let g = SymMatrix::symmetrize(Self::block_value(b, x0, 0.0));
            let lmax = sym_eig(&g)
                .map_err(|e| SdpError::NumericalFailure(e.to_string()))?
                .values[b.dim - 1];
            s_needed = s_needed.max(lmax);
        }
        if s_needed <= -depth {
            return Ok(x0.clone());
        }
        let mut z = DVector::zeros(self.n + 1);
        z.rows_mut(0, self.n).copy_from(x0);
        z[self.n] = s_needed + 0.1 * s_needed.abs().max(1.0);

        // objective: minimize s
        let mut c = DVector::zeros(self.n + 1);
        c[self.n] = 1.0;
        let m_total: f64 = self.blocks.iter().map(|b| b.dim as f64).sum();

        let mut t = 1.0 / z[self.n].abs().max(1.0);
        let stop = |zz: &DVector<f64>| zz[self.n] <= -depth;
        loop {
            let centered = self.newton_center(&mut z, &c, t, true, budget, Some(&stop))?;
            if stop(&z) {
                return Ok(z.rows(0, self.n).clone_owned());
            }
            if centered {
                let gap = m_total / t;
                let lower = z[self.n] - gap;
                if gap <= 0.25 * depth.max(1e-12) {
                    // certified: cannot go meaningfully below the current s
                    if z[self.n] < 0.0 {
                        // strictly feasible, just shallower than requested
                        return Ok(z.rows(0, self.n).clone_owned());
                    }
                    return Err(SdpError::Infeasible {
                        best_margin: -lower,
                    });
                }
            }
            t *= opts.mu;
        }
    }

    /// Phase II: follow the central path of the linear objective. The stop
    /// combines the barrier gap bound with stabilization of the objective
    /// between consecutive centerings, so a start far above the optimum
    /// cannot satisfy the relative gap test spuriously.
    fn phase2(
        &self,
        x0: &DVector<f64>,
        c: &DVector<f64>,
        opts: &SdpOptions,
        budget: &mut NewtonBudget,
    ) -> Result<DVector<f64>, SdpError> {
        let mut x = x0.clone();
        let m_total: f64 = self.blocks.iter().map(|b| b.dim as f64).sum();
        let f0 = c.dot(&x);
        let mut t = (m_total / (0.5 * (1.0 + f0.abs()))).max(1e-3);
        let mut f_prev = f64::INFINITY;
        loop {
            let centered = self.newton_center(&mut x, c, t, false, budget, None)?;
            let gap = m_total / t;
            let obj = c.dot(&x);
            if std::env::var("SDP_DEBUG").is_ok() {
                eprintln!("phase2 t={t:.3e} obj={obj:.8} gap={gap:.3e} centered={centered} newton={}", budget.used);
            }
            let tol = opts.objective_tol * (1.0 + obj.abs());
            if gap <= tol && (f_prev - obj).abs() <= 10.0 * tol {
                return Ok(x);
            }
            f_prev = obj;
            t *= opts.mu;
        }
    }

    /// Damped Newton descent on `t c'z - sum log det(-G_j)`, optionally in
    /// the phase-I lifted space (extra uniform-shift coordinate). Returns
    /// true when centered to tolerance.
    fn newton_center(
        &self,
        z: &mut DVector<f64>,
        c: &DVector<f64>,
        t: f64,
        lifted: bool,
        budget: &mut NewtonBudget,
        early_stop: Option<&dyn Fn(&DVector<f64>) -> bool>,
    ) -> Result<bool, SdpError> {
        let dim_z = z.len();
        let xs = |zz: &DVector<f64>| -> (DVector<f64>, f64) {
            if lifted {
                (zz.rows(0, self.n).clone_owned(), zz[self.n])
            } else {
                (zz.clone(), 0.0)
            }
        };

        let barrier = |zz: &DVector<f64>| -> Option<f64> {
            let (x, s) = xs(zz);
            let mut val = t * c.dot(zz);
            for b in &self.blocks {
                let g = Self::block_value(b, &x, s);
                let spd = SymMatrix::symmetrize(-g).into_matrix();
                let chol = nalgebra::linalg::Cholesky::new(spd)?;
                let mut logdet = 0.0;
                for i in 0..b.dim {
                    let d = chol.l()[(i, i)];
                    if d <= 0.0 || !d.is_finite() {
                        return None;
                    }
                    logdet += d.ln();
                }
                val -= 2.0 * logdet;
            }
            Some(val)
        };

        for _inner in 0..200 {
            if budget.used >= budget.cap {
                return Err(SdpError::MaxIterations(budget.cap));
            }
            budget.used += 1;

            let (x, s) = xs(z);
            let mut grad = c * t;
            let mut hess = DMatrix::<f64>::zeros(dim_z, dim_z);
            for b in &self.blocks {
                let g = Self::block_value(b, &x, s);
                let spd = SymMatrix::symmetrize(-g).into_matrix();
                let chol = nalgebra::linalg::Cholesky::new(spd).ok_or_else(|| {
                    SdpError::NumericalFailure(format!(
                        "iterate left the interior of '{}'",
                        b.name
                    ))
                })?;
                let s_inv = chol.inverse();
                // W_k = S^{-1} A_k for every active variable of the block,
                // including the lifted shift coordinate (-I)
                let mut active: Vec<(usize, DMatrix<f64>)> = Vec::new();
                for (k, a) in &b.terms {
                    active.push((*k, &s_inv * a));
                }
                if lifted {
                    active.push((self.n, -s_inv.clone()));
                }
                for (k, w) in &active {
                    // d/dx_k of -logdet(-G) = tr(S^{-1} A_k)
                    grad[*k] += w.trace();
                }
                for ai in 0..active.len() {
                    let (k, wk) = &active[ai];
                    for (l, wl) in active.iter().skip(ai) {
                        let mut tr = 0.0;
                        for r in 0..b.dim {
                            for cidx in 0..b.dim {
                                tr += wk[(r, cidx)] * wl[(cidx, r)];
                            }
                        }
                        hess[(*k, *l)] += tr;
                        if k != l {
                            hess[(*l, *k)] += tr;
                        }
                    }
                }
            }

            // damped factorization of the Newton system
            let mut lambda = 0.0;
            let delta = loop {
                let mut h = hess.clone();
                if lambda > 0.0 {
                    for i in 0..dim_z {
                        h[(i, i)] += lambda;
                    }
                }
                match nalgebra::linalg::Cholesky::new(h) {
                    Some(ch) => break -ch.solve(&grad),
                    None => {
                        lambda = if lambda == 0.0 {
                            1e-12 * hess.trace().abs().max(1.0)
                        } else {
                            lambda * 100.0
                        };
                        if lambda > 1e30 {
                            return Err(SdpError::NumericalFailure(
                                "Newton system could not be factored".into(),
                            ));
                        }
                    }
                }
            };

            let decrement = -grad.dot(&delta);
            if decrement <= 2e-10 {
                return Ok(true);
            }

            let phi0 = barrier(z).ok_or_else(|| {
                SdpError::NumericalFailure("barrier undefined at current iterate".into())
            })?;
            let slope = grad.dot(&delta);
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1e-13 {
                let trial = &*z + &delta * alpha;
                if let Some(phi) = barrier(&trial) {
                    if phi <= phi0 + 0.01 * alpha * slope {
                        *z = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // cannot make progress at this barrier weight
                return Ok(true);
            }
            if let Some(stop) = early_stop {
                if stop(z) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

struct NewtonBudget {
    used: usize,
    cap: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_lp_as_lmi() {
        // find p with -2p <= -1, minimize p  =>  p = 0.5
        let mut prob = SdpProblem::new();
        let p = prob.scalar_var(None, None);
        prob.add_lmi("halfline", Sense::NegSemidef, 0.0, move |pt| {
            DMatrix::from_element(1, 1, -2.0 * pt.scalar(p) + 1.0)
        })
        .unwrap();
        prob.set_objective(move |pt| pt.scalar(p));
        let sol = prob.solve(&SdpOptions::default()).unwrap();
        assert_relative_eq!(sol.scalar(p), 0.5, epsilon = 1e-6);
        assert!(sol.feasibility_margin >= 0.0);
    }

    #[test]
    fn lyapunov_feasibility() {
        // find P > 0 with A'PA - P < 0 for the Schur-stable A = 0.5 I;
        // bound P above to keep the homogeneous cone compact
        let a = DMatrix::<f64>::identity(3, 3) * 0.5;
        let mut prob = SdpProblem::new();
        let p = prob.sym_var(3);
        let a2 = a.clone();
        prob.add_lmi("decrease", Sense::NegSemidef, 1e-6, move |pt| {
            let pm = pt.sym(p);
            a2.transpose() * pm.matrix() * &a2 - pm.matrix()
        })
        .unwrap();
        prob.add_lmi("pos", Sense::PosSemidef, 1e-6, move |pt| {
            pt.sym(p).into_matrix()
        })
        .unwrap();
        prob.add_lmi("cap", Sense::NegSemidef, 0.0, move |pt| {
            pt.sym(p).into_matrix() - DMatrix::identity(3, 3) * 100.0
        })
        .unwrap();
        let sol = prob
            .solve(&SdpOptions {
                target_margin: 1e-3,
                ..Default::default()
            })
            .unwrap();
        let pm = sol.sym(p);
        let dec = SymMatrix::symmetrize(a.transpose() * pm.matrix() * &a - pm.matrix());
        assert!(crate::linalg::lambda_max(&dec).unwrap() < 0.0);
        assert!(crate::linalg::lambda_min(&pm).unwrap() > 0.0);
    }

    #[test]
    fn infeasible_is_reported() {
        // x <= -1 and x >= 1 simultaneously
        let mut prob = SdpProblem::new();
        let x = prob.scalar_var(None, None);
        prob.add_lmi("up", Sense::NegSemidef, 0.0, move |pt| {
            DMatrix::from_element(1, 1, pt.scalar(x) + 1.0)
        })
        .unwrap();
        prob.add_lmi("down", Sense::NegSemidef, 0.0, move |pt| {
            DMatrix::from_element(1, 1, -pt.scalar(x) + 1.0)
        })
        .unwrap();
        prob.set_objective(move |pt| pt.scalar(x));
        match prob.solve(&SdpOptions::default()) {
            Err(SdpError::Infeasible { .. }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn sdp_with_matrix_objective_coupling() {
        // minimize t with [[t, 1], [1, t]] >= 0  =>  t = 1
        let mut prob = SdpProblem::new();
        let t = prob.scalar_var(None, None);
        prob.add_lmi("soc", Sense::PosSemidef, 0.0, move |pt| {
            DMatrix::from_row_slice(2, 2, &[pt.scalar(t), 1.0, 1.0, pt.scalar(t)])
        })
        .unwrap();
        prob.set_objective(move |pt| pt.scalar(t));
        let sol = prob.solve(&SdpOptions::default()).unwrap();
        assert_relative_eq!(sol.scalar(t), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn rejects_nonaffine_probe_dimension_change() {
        let mut prob = SdpProblem::new();
        let x = prob.scalar_var(None, None);
        let res = prob.add_lmi("weird", Sense::NegSemidef, 0.0, move |pt| {
            let n = if pt.scalar(x) > 0.5 { 2 } else { 1 };
            DMatrix::zeros(n, n)
        });
        assert!(res.is_err());
    }

    #[test]
    fn scalar_bounds_contribute_blocks() {
        let mut prob = SdpProblem::new();
        let x = prob.scalar_var(Some(2.0), Some(10.0));
        prob.set_objective(move |pt| pt.scalar(x));
        let sol = prob.solve(&SdpOptions::default()).unwrap();
        assert_relative_eq!(sol.scalar(x), 2.0, epsilon = 1e-5);
    }
}
