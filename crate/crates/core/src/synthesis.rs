//! Offline design stage: assembly of the stability and design LMIs, the
//! tightening-minimizing semidefinite program, and the terminal ingredients
//! (local gain Lyapunov cost, terminal set sizes).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{
    definiteness, inv_sqrt_sym, lambda_max, lambda_min, is_schur, schur_reduce,
    solve_discrete_lyapunov, Definiteness, LinalgError, SymMatrix,
};
use crate::model::{
    assemble_augmented, AugmentedRealization, ConstraintSet, DelayMultiplierFamily,
    DisturbanceModel, IqcFilter, LinearSystem, ModelError, Multiplier,
};
use crate::sdp::{ScalarVar, SdpError, SdpOptions, SdpProblem, Sense, SymVar};
use crate::tube::{tighten_vector, TubeError};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("design infeasible at stage '{stage}': {source}")]
    Infeasible { stage: String, source: SdpError },
    #[error("no terminal set exists: {0}")]
    NoTerminalSet(String),
    #[error("terminal gain does not stabilize the nominal plant")]
    TerminalGainNotStabilizing,
    #[error("invalid design input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tube(#[from] TubeError),
}

/// Everything the online stage needs from the offline design.
#[derive(Debug, Clone)]
pub struct TubeParams {
    /// Contraction rate of the error bounding system.
    pub rho: f64,
    /// Joint Lyapunov matrix over (error, filter state).
    pub p: SymMatrix,
    /// Tube shape matrix: Schur complement of the filter block of `p`.
    pub p_e: SymMatrix,
    /// `P11 - p_e`, the correction weight in the measurement update.
    pub p_diff: SymMatrix,
    /// Disturbance gain in the tube recursion.
    pub gamma: f64,
    /// Nominal-excitation weight in the tube recursion.
    pub gamma_mat: SymMatrix,
    /// Pre-stabilizing error feedback.
    pub k: DMatrix<f64>,
    /// Per-row constraint tightening.
    pub c: DVector<f64>,
}

impl TubeParams {
    pub fn n_x(&self) -> usize {
        self.p_e.dim()
    }

    pub fn n_psi(&self) -> usize {
        self.p.dim() - self.p_e.dim()
    }

    /// `||ybar||^2_Gamma`.
    pub fn y_norm_sq(&self, y_bar: &DVector<f64>) -> f64 {
        self.gamma_mat.quadratic_form(y_bar)
    }

    /// Consistency check of all stored pieces.
    pub fn validate(&self, cons: Option<&ConstraintSet>) -> Result<(), SynthesisError> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(SynthesisError::InvalidInput(format!(
                "rho = {} must lie in (0, 1)",
                self.rho
            )));
        }
        if self.gamma <= 0.0 {
            return Err(SynthesisError::InvalidInput("gamma must be positive".into()));
        }
        for (name, m) in [("p", &self.p), ("p_e", &self.p_e), ("gamma_mat", &self.gamma_mat)] {
            if !matches!(definiteness(m, 0.0)?, Definiteness::PositiveDefinite) {
                return Err(SynthesisError::InvalidInput(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        let scale = self.p.matrix().amax();
        if lambda_min(&self.p_diff)? < -1e-9 * scale {
            return Err(SynthesisError::InvalidInput(
                "p_diff must be positive semidefinite".into(),
            ));
        }
        let n_x = self.n_x();
        for i in 0..n_x {
            for j in 0..n_x {
                let sum = self.p_e.matrix()[(i, j)] + self.p_diff.matrix()[(i, j)];
                if (sum - self.p.matrix()[(i, j)]).abs() > 1e-9 * scale.max(1.0) {
                    return Err(SynthesisError::InvalidInput(
                        "p_e + p_diff does not reproduce the leading block of p".into(),
                    ));
                }
            }
        }
        if self.c.iter().any(|v| *v < 0.0) {
            return Err(SynthesisError::InvalidInput(
                "tightening entries must be nonnegative".into(),
            ));
        }
        if let Some(cons) = cons {
            let c_ref = tighten_vector(&self.p_e, &self.k, cons)?;
            if (self.c.clone() - c_ref).amax() > 1e-8 {
                return Err(SynthesisError::InvalidInput(
                    "stored tightening vector is inconsistent with p_e and K".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Terminal ingredients: local gain, terminal cost matrix and the joint
/// (nominal state, tube size) terminal set
/// `Omega = { (x, s) : ||x||^2_S <= x_omega, 0 <= s <= s_omega }`.
#[derive(Debug, Clone)]
pub struct TerminalSet {
    pub k_omega: DMatrix<f64>,
    pub s_mat: SymMatrix,
    pub x_omega: f64,
    pub s_omega: f64,
}

impl TerminalSet {
    pub fn contains(&self, x: &DVector<f64>, s: f64, tol: f64) -> bool {
        s >= -tol
            && s <= self.s_omega + tol
            && self.s_mat.quadratic_form(x) <= self.x_omega + tol
    }
}

/// The closed error loop's stability LMI in the variable `P` for a fixed
/// multiplier:
///
/// ```text
/// [I 0; At Bt; Ct Dt]' diag(-rho^2 P, P, M) [I 0; At Bt; Ct Dt]
/// ```
#[derive(Debug, Clone)]
pub struct StabilityLmi {
    outer: DMatrix<f64>,
    pub rho: f64,
    n_aug: usize,
    n_z: usize,
}

/// Assembles the stability-LMI fragment for the augmented realization.
pub fn assemble_stability_lmi(
    aug: &AugmentedRealization,
    rho: f64,
) -> Result<StabilityLmi, SynthesisError> {
    if rho <= 0.0 || rho > 1.0 {
        return Err(SynthesisError::InvalidInput(format!(
            "rho = {rho} must lie in (0, 1]"
        )));
    }
    let n_aug = aug.a_tilde.nrows();
    let n_w = aug.b_tilde.ncols();
    let n_z = aug.c_tilde.nrows();
    let cols = n_aug + n_w;
    let mut outer = DMatrix::zeros(2 * n_aug + n_z, cols);
    outer
        .view_mut((0, 0), (n_aug, n_aug))
        .copy_from(&DMatrix::identity(n_aug, n_aug));
    outer
        .view_mut((n_aug, 0), (n_aug, n_aug))
        .copy_from(&aug.a_tilde);
    outer
        .view_mut((n_aug, n_aug), (n_aug, n_w))
        .copy_from(&aug.b_tilde);
    outer
        .view_mut((2 * n_aug, 0), (n_z, n_aug))
        .copy_from(&aug.c_tilde);
    outer
        .view_mut((2 * n_aug, n_aug), (n_z, n_w))
        .copy_from(&aug.d_tilde);
    Ok(StabilityLmi {
        outer,
        rho,
        n_aug,
        n_z,
    })
}

impl StabilityLmi {
    /// Value of the fragment at `(P, M)`.
    pub fn eval(&self, p: &SymMatrix, m: &SymMatrix) -> SymMatrix {
        assert_eq!(p.dim(), self.n_aug);
        assert_eq!(m.dim(), self.n_z);
        let n = 2 * self.n_aug + self.n_z;
        let mut mid = DMatrix::zeros(n, n);
        mid.view_mut((0, 0), (self.n_aug, self.n_aug))
            .copy_from(&(p.matrix() * (-self.rho * self.rho)));
        mid.view_mut((self.n_aug, self.n_aug), (self.n_aug, self.n_aug))
            .copy_from(p.matrix());
        mid.view_mut((2 * self.n_aug, 2 * self.n_aug), (self.n_z, self.n_z))
            .copy_from(m.matrix());
        SymMatrix::symmetrize(self.outer.transpose() * mid * &self.outer)
    }
}

/// The design LMI in `(P, M, Gamma, gamma)`: the stability LMI extended
/// with the disturbance and nominal-excitation input columns and the
/// `-diag(gamma Xi, Gamma)` corner.
#[derive(Debug, Clone)]
pub struct DesignLmi {
    outer: DMatrix<f64>,
    pub rho: f64,
    xi: SymMatrix,
    n_aug: usize,
    n_z: usize,
    n_d: usize,
    n_y: usize,
}

/// Assembles the design-LMI fragment. The extra input columns are
/// `[B_d; B_psi1 D_d]` for the disturbance and `[0; B_psi1]` for the
/// nominal output, with feedthrough row `[D_psi1 D_d, D_psi1]`.
pub fn assemble_design_lmi(
    aug: &AugmentedRealization,
    sys: &LinearSystem,
    filt: &IqcFilter,
    rho: f64,
    xi: &SymMatrix,
) -> Result<DesignLmi, SynthesisError> {
    if rho <= 0.0 || rho > 1.0 {
        return Err(SynthesisError::InvalidInput(format!(
            "rho = {rho} must lie in (0, 1]"
        )));
    }
    let n_aug = aug.a_tilde.nrows();
    let n_w = aug.b_tilde.ncols();
    let n_z = aug.c_tilde.nrows();
    let n_d = sys.n_d();
    let n_y = sys.n_y();
    let n_psi = filt.n_psi();
    if xi.dim() != n_d {
        return Err(SynthesisError::InvalidInput(format!(
            "Xi must be {n_d}x{n_d}"
        )));
    }
    let cols = n_aug + n_w + n_d + n_y;
    let rows = 2 * n_aug + n_z + n_d + n_y;
    let mut outer = DMatrix::zeros(rows, cols);
    outer
        .view_mut((0, 0), (n_aug, n_aug))
        .copy_from(&DMatrix::identity(n_aug, n_aug));
    outer
        .view_mut((n_aug, 0), (n_aug, n_aug))
        .copy_from(&aug.a_tilde);
    outer
        .view_mut((n_aug, n_aug), (n_aug, n_w))
        .copy_from(&aug.b_tilde);
    // disturbance column [B_d; B_psi1 D_d]
    outer
        .view_mut((n_aug, n_aug + n_w), (sys.n_x(), n_d))
        .copy_from(&sys.b_d);
    outer
        .view_mut((n_aug + sys.n_x(), n_aug + n_w), (n_psi, n_d))
        .copy_from(&(&filt.b_psi1 * &sys.d_d));
    // nominal-output column [0; B_psi1]
    outer
        .view_mut((n_aug + sys.n_x(), n_aug + n_w + n_d), (n_psi, n_y))
        .copy_from(&filt.b_psi1);
    // filter output row
    outer
        .view_mut((2 * n_aug, 0), (n_z, n_aug))
        .copy_from(&aug.c_tilde);
    outer
        .view_mut((2 * n_aug, n_aug), (n_z, n_w))
        .copy_from(&aug.d_tilde);
    outer
        .view_mut((2 * n_aug, n_aug + n_w), (n_z, n_d))
        .copy_from(&(&filt.d_psi1 * &sys.d_d));
    outer
        .view_mut((2 * n_aug, n_aug + n_w + n_d), (n_z, n_y))
        .copy_from(&filt.d_psi1);
    // identity over (d, ybar)
    outer
        .view_mut((2 * n_aug + n_z, n_aug + n_w), (n_d + n_y, n_d + n_y))
        .copy_from(&DMatrix::identity(n_d + n_y, n_d + n_y));
    Ok(DesignLmi {
        outer,
        rho,
        xi: xi.clone(),
        n_aug,
        n_z,
        n_d,
        n_y,
    })
}

impl DesignLmi {
    /// Value of the fragment at `(P, M, Gamma, gamma)`.
    pub fn eval(
        &self,
        p: &SymMatrix,
        m: &SymMatrix,
        gamma_mat: &SymMatrix,
        gamma: f64,
    ) -> SymMatrix {
        assert_eq!(p.dim(), self.n_aug);
        assert_eq!(m.dim(), self.n_z);
        assert_eq!(gamma_mat.dim(), self.n_y);
        let n = 2 * self.n_aug + self.n_z + self.n_d + self.n_y;
        let mut mid = DMatrix::zeros(n, n);
        mid.view_mut((0, 0), (self.n_aug, self.n_aug))
            .copy_from(&(p.matrix() * (-self.rho * self.rho)));
        mid.view_mut((self.n_aug, self.n_aug), (self.n_aug, self.n_aug))
            .copy_from(p.matrix());
        mid.view_mut((2 * self.n_aug, 2 * self.n_aug), (self.n_z, self.n_z))
            .copy_from(m.matrix());
        let base = 2 * self.n_aug + self.n_z;
        mid.view_mut((base, base), (self.n_d, self.n_d))
            .copy_from(&(self.xi.matrix() * (-gamma)));
        mid.view_mut(
            (base + self.n_d, base + self.n_d),
            (self.n_y, self.n_y),
        )
        .copy_from(&(gamma_mat.matrix() * -1.0));
        SymMatrix::symmetrize(self.outer.transpose() * mid * &self.outer)
    }
}

/// Multiplier specification for the design stage: either a fixed matrix or
/// the delay family, in which case `M` and the weight `X` become decision
/// variables constrained by `M >= M_tau(X)` for every delay and `X >= 0`.
#[derive(Debug, Clone)]
pub enum MultiplierSpec {
    Fixed(Multiplier),
    DelayFamily(DelayMultiplierFamily),
}

/// Inputs shared by the design-stage entry points.
#[derive(Debug, Clone)]
pub struct DesignInputs<'a> {
    pub sys: &'a LinearSystem,
    pub filt: &'a IqcFilter,
    pub k: &'a DMatrix<f64>,
    pub rho: f64,
    pub dist: &'a DisturbanceModel,
    pub constraints: &'a ConstraintSet,
    pub multiplier: &'a MultiplierSpec,
}

/// Knobs of the design solve.
#[derive(Debug, Clone)]
pub struct DesignOptions {
    /// Absolute strict-definiteness margin imposed on the design LMI,
    /// scaled internally by `max(1, gamma)`.
    pub lmi_margin: f64,
    /// Margin for `P`.
    pub p_margin: f64,
    pub sdp: SdpOptions,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            lmi_margin: 4e-6,
            p_margin: 1e-6,
            sdp: SdpOptions::default(),
        }
    }
}

/// Result of the tightening-minimizing design solve.
#[derive(Debug, Clone)]
pub struct DesignOutput {
    pub tube: TubeParams,
    pub multiplier: Multiplier,
    /// Delay-family weight, when the multiplier was synthesized.
    pub x_iqc: Option<SymMatrix>,
    /// Achieved margin of the design LMI (smallest eigenvalue distance).
    pub lmi_margin: f64,
    /// Optimal value of the tightening objective (sum of squared row
    /// tightenings, through their epigraph variables).
    pub objective: f64,
}

fn validate_inputs(inp: &DesignInputs) -> Result<(), SynthesisError> {
    let sys = inp.sys;
    if inp.k.nrows() != sys.n_u() || inp.k.ncols() != sys.n_x() {
        return Err(SynthesisError::InvalidInput(
            "feedback gain has wrong shape".into(),
        ));
    }
    if inp.filt.n_y() != sys.n_y() || inp.filt.n_w() != sys.n_w() {
        return Err(SynthesisError::InvalidInput(
            "filter input dimensions do not match the plant".into(),
        ));
    }
    if inp.dist.n_d() != sys.n_d() {
        return Err(SynthesisError::InvalidInput(
            "disturbance model dimension does not match the plant".into(),
        ));
    }
    if inp.constraints.h_mat.ncols() != sys.n_x() + sys.n_u() {
        return Err(SynthesisError::InvalidInput(
            "constraint rows have wrong width".into(),
        ));
    }
    if !(inp.rho > 0.0 && inp.rho < 1.0) {
        return Err(SynthesisError::InvalidInput(format!(
            "rho = {} must lie in (0, 1)",
            inp.rho
        )));
    }
    match inp.multiplier {
        MultiplierSpec::Fixed(m) => {
            if m.m.dim() != inp.filt.n_z() {
                return Err(SynthesisError::InvalidInput(
                    "multiplier dimension does not match the filter output".into(),
                ));
            }
        }
        MultiplierSpec::DelayFamily(f) => {
            if f.n_z() != inp.filt.n_z() || f.n_y != sys.n_y() {
                return Err(SynthesisError::InvalidInput(
                    "delay family does not match the filter".into(),
                ));
            }
        }
    }
    Ok(())
}

enum MultVars {
    Fixed(SymMatrix),
    Family { m: SymVar, x: SymVar },
}

/// Registers the multiplier variables and their family constraints; returns
/// an accessor for the multiplier value inside constraint builders.
fn register_multiplier(
    prob: &mut SdpProblem,
    spec: &MultiplierSpec,
) -> Result<MultVars, SynthesisError> {
    match spec {
        MultiplierSpec::Fixed(m) => Ok(MultVars::Fixed(m.m.clone())),
        MultiplierSpec::DelayFamily(family) => {
            let m = prob.sym_var(family.n_z());
            let x = prob.sym_var(family.n_y);
            for tau in 0..=family.tau_max {
                let fam = family.clone();
                prob.add_lmi(
                    &format!("multiplier dominates delay {tau}"),
                    Sense::PosSemidef,
                    0.0,
                    move |pt| {
                        let mm = pt.sym(m);
                        let xx = pt.sym(x);
                        let mt = fam.m_tau(tau, &xx).expect("tau in range");
                        mm.matrix() - mt.matrix()
                    },
                )?;
            }
            prob.add_lmi("delay weight nonnegative", Sense::PosSemidef, 0.0, move |pt| {
                pt.sym(x).into_matrix()
            })?;
            Ok(MultVars::Family { m, x })
        }
    }
}

/// Solves the tightening-minimizing design program at fixed `(Gamma, gamma)`:
/// over `P` (and the multiplier when synthesized) subject to the design LMI,
/// minimize the sum of per-row tightening epigraph variables `gamma_i`
/// linked to `P` by the three-block Schur LMIs
///
/// ```text
/// [P22   P21   0  ]
/// [P21'  P11   v_i]  >= 0,   v_i = (F_i [I; K])'
/// [0     v_i'  g_i]
/// ```
///
/// so that `c_i^2 <= g_i` at the optimum.
pub fn minimize_tightening(
    inp: &DesignInputs,
    gamma_mat_fix: &SymMatrix,
    gamma_fix: f64,
    opts: &DesignOptions,
) -> Result<DesignOutput, SynthesisError> {
    validate_inputs(inp)?;
    if gamma_mat_fix.dim() != inp.sys.n_y() {
        return Err(SynthesisError::InvalidInput(
            "Gamma has wrong dimension".into(),
        ));
    }
    if gamma_fix <= 0.0 {
        return Err(SynthesisError::InvalidInput("gamma must be positive".into()));
    }
    let aug = assemble_augmented(inp.sys, inp.k, inp.filt)?;
    let design = assemble_design_lmi(&aug, inp.sys, inp.filt, inp.rho, &inp.dist.xi)?;

    let n_x = inp.sys.n_x();
    let n_psi = inp.filt.n_psi();
    let n_aug = n_x + n_psi;
    let n_rows = inp.constraints.n_rows();

    let scale = gamma_fix.max(gamma_mat_fix.matrix().amax()).max(1.0);
    let margin = opts.lmi_margin * scale;
    let p_margin = opts.p_margin * scale;

    let mut prob = SdpProblem::new();
    let p_var = prob.sym_var(n_aug);
    let mult = register_multiplier(&mut prob, inp.multiplier)?;
    let (m_var, x_var) = match &mult {
        MultVars::Fixed(_) => (None, None),
        MultVars::Family { m, x, .. } => (Some(*m), Some(*x)),
    };
    // the epigraph variables need a (generous) upper bound: the barrier of
    // an unbounded epigraph has no analytic center and the feasibility
    // phase would drift upward
    let g_vars: Vec<ScalarVar> = (0..n_rows)
        .map(|_| prob.scalar_var(Some(0.0), Some(1e6)))
        .collect();

    let design_cl = design.clone();
    let gm = gamma_mat_fix.clone();
    let mult_value = move |pt: &crate::sdp::SdpPoint| -> SymMatrix {
        match &mult {
            MultVars::Fixed(m) => m.clone(),
            MultVars::Family { m, .. } => pt.sym(*m),
        }
    };
    prob.add_lmi("design", Sense::NegSemidef, margin, move |pt| {
        let p = pt.sym(p_var);
        let m = mult_value(pt);
        design_cl.eval(&p, &m, &gm, gamma_fix).into_matrix()
    })?;
    prob.add_lmi("p positive", Sense::PosSemidef, p_margin, move |pt| {
        pt.sym(p_var).into_matrix()
    })?;

    // Schur epigraph blocks, one per constraint row
    let mut ik = DMatrix::zeros(n_x + inp.sys.n_u(), n_x);
    ik.view_mut((0, 0), (n_x, n_x))
        .copy_from(&DMatrix::identity(n_x, n_x));
    ik.view_mut((n_x, 0), (inp.sys.n_u(), n_x)).copy_from(inp.k);
    for i in 0..n_rows {
        let fi = inp.constraints.h_mat.row(i).transpose();
        let v = ik.transpose() * fi; // n_x x 1
        let g_i = g_vars[i];
        prob.add_lmi(
            &format!("tightening epigraph row {i}"),
            Sense::PosSemidef,
            0.0,
            move |pt| {
                let p = pt.sym(p_var);
                let dim = n_psi + n_x + 1;
                let mut blk = DMatrix::zeros(dim, dim);
                blk.view_mut((0, 0), (n_psi, n_psi))
                    .copy_from(&p.matrix().view((n_x, n_x), (n_psi, n_psi)).clone_owned());
                blk.view_mut((0, n_psi), (n_psi, n_x))
                    .copy_from(&p.matrix().view((n_x, 0), (n_psi, n_x)).clone_owned());
                blk.view_mut((n_psi, 0), (n_x, n_psi))
                    .copy_from(&p.matrix().view((0, n_x), (n_x, n_psi)).clone_owned());
                blk.view_mut((n_psi, n_psi), (n_x, n_x))
                    .copy_from(&p.matrix().view((0, 0), (n_x, n_x)).clone_owned());
                blk.view_mut((n_psi, n_psi + n_x), (n_x, 1)).copy_from(&v);
                blk.view_mut((n_psi + n_x, n_psi), (1, n_x))
                    .copy_from(&v.transpose());
                blk[(dim - 1, dim - 1)] = pt.scalar(g_i);
                blk
            },
        )?;
    }

    let g_all = g_vars.clone();
    prob.set_objective(move |pt| g_all.iter().map(|g| pt.scalar(*g)).sum());

    let sol = prob.solve(&opts.sdp).map_err(|e| match e {
        SdpError::Infeasible { .. } => SynthesisError::Infeasible {
            stage: "tightening-minimizing design".into(),
            source: e,
        },
        other => SynthesisError::Sdp(other),
    })?;

    let p = sol.sym(p_var);
    let (p_e, p_diff) = if n_psi == 0 {
        (p.clone(), SymMatrix::zeros(n_x))
    } else {
        schur_reduce(&p, n_x)?
    };
    let c = tighten_vector(&p_e, inp.k, inp.constraints)?;
    let tube = TubeParams {
        rho: inp.rho,
        p: p.clone(),
        p_e,
        p_diff,
        gamma: gamma_fix,
        gamma_mat: gamma_mat_fix.clone(),
        k: inp.k.clone(),
        c,
    };
    let multiplier = match (inp.multiplier, m_var) {
        (MultiplierSpec::Fixed(m), _) => m.clone(),
        (MultiplierSpec::DelayFamily(_), Some(mv)) => Multiplier::new(sol.sym(mv)),
        _ => unreachable!("family multiplier always registers a variable"),
    };
    let x_iqc = x_var.map(|xv| sol.sym(xv));
    // re-verify the LMI margin by eigendecomposition
    let lhs = design.eval(&p, &multiplier.m, gamma_mat_fix, gamma_fix);
    let achieved = -lambda_max(&lhs)?;
    if achieved < 0.5 * margin {
        return Err(SynthesisError::Sdp(SdpError::NumericalFailure(format!(
            "post-solve margin {achieved:.3e} below half the requested {margin:.3e}"
        ))));
    }
    Ok(DesignOutput {
        tube,
        multiplier,
        x_iqc,
        lmi_margin: achieved,
        objective: sol.objective.unwrap_or(f64::NAN),
    })
}

/// Pre-pass that proposes equal scalar weights `Gamma = gamma = t` by
/// minimizing the smallest feasible `t`, then doubling it for headroom.
pub fn propose_gamma(inp: &DesignInputs, opts: &DesignOptions) -> Result<f64, SynthesisError> {
    validate_inputs(inp)?;
    let aug = assemble_augmented(inp.sys, inp.k, inp.filt)?;
    let design = assemble_design_lmi(&aug, inp.sys, inp.filt, inp.rho, &inp.dist.xi)?;
    let n_aug = inp.sys.n_x() + inp.filt.n_psi();
    let n_y = inp.sys.n_y();

    let mut prob = SdpProblem::new();
    let p_var = prob.sym_var(n_aug);
    let mult = register_multiplier(&mut prob, inp.multiplier)?;
    let t = prob.scalar_var(Some(0.0), Some(1e9));

    let design_cl = design.clone();
    let mult_value = move |pt: &crate::sdp::SdpPoint| -> SymMatrix {
        match &mult {
            MultVars::Fixed(m) => m.clone(),
            MultVars::Family { m, .. } => pt.sym(*m),
        }
    };
    prob.add_lmi("design", Sense::NegSemidef, 1e-6, move |pt| {
        let p = pt.sym(p_var);
        let m = mult_value(pt);
        let tv = pt.scalar(t);
        let gm = SymMatrix::symmetrize(DMatrix::identity(n_y, n_y) * tv);
        design_cl.eval(&p, &m, &gm, tv).into_matrix()
    })?;
    prob.add_lmi("p positive", Sense::PosSemidef, 1e-9, move |pt| {
        pt.sym(p_var).into_matrix()
    })?;
    prob.set_objective(move |pt| pt.scalar(t));

    let sol = prob.solve(&opts.sdp).map_err(|e| match e {
        SdpError::Infeasible { .. } => SynthesisError::Infeasible {
            stage: "weight pre-pass".into(),
            source: e,
        },
        other => SynthesisError::Sdp(other),
    })?;
    Ok(2.0 * sol.scalar(t))
}

/// Existence condition for a terminal set: every row must strictly clear
/// the steady-state disturbance tightening,
/// `f_i > sqrt(gamma) d_max / sqrt(1 - rho^2) * c_i`.
pub fn check_terminal_existence(
    cons: &ConstraintSet,
    tube: &TubeParams,
    dist: &DisturbanceModel,
) -> bool {
    let base = (tube.gamma.max(0.0)).sqrt() * dist.d_max / (1.0 - tube.rho * tube.rho).sqrt();
    (0..cons.n_rows()).all(|i| cons.h_vec[i] > base * tube.c[i])
}

/// Constructs the terminal ingredients for a given local gain: the
/// Lyapunov terminal cost `S` with `Q' = Q + K_omega' R K_omega`, then the
/// largest `x_omega` (by bisection) for which constraint satisfaction and
/// positive invariance hold, with
/// `s_omega(x) = (x lambda_max(L) + gamma d_max^2) / (1 - rho^2)`.
///
/// When `s_omega_override` is given, `s_omega` is pinned to it (after a
/// validity re-check) and `x_omega` is maximized at that fixed level.
pub fn terminal_ingredients(
    sys: &LinearSystem,
    tube: &TubeParams,
    dist: &DisturbanceModel,
    cons: &ConstraintSet,
    q: &SymMatrix,
    r: &SymMatrix,
    k_omega: &DMatrix<f64>,
    s_omega_override: Option<f64>,
) -> Result<TerminalSet, SynthesisError> {
    if k_omega.nrows() != sys.n_u() || k_omega.ncols() != sys.n_x() {
        return Err(SynthesisError::InvalidInput(
            "terminal gain has wrong shape".into(),
        ));
    }
    if !cons.origin_interior() {
        return Err(SynthesisError::NoTerminalSet(
            "origin is not strictly feasible".into(),
        ));
    }
    if !check_terminal_existence(cons, tube, dist) {
        return Err(SynthesisError::NoTerminalSet(
            "steady-state disturbance tightening exceeds a constraint bound".into(),
        ));
    }
    let a_cl = &sys.a + &sys.b_u * k_omega;
    if !is_schur(&a_cl) {
        return Err(SynthesisError::TerminalGainNotStabilizing);
    }
    let q_prime = SymMatrix::symmetrize(q.matrix() + k_omega.transpose() * r.matrix() * k_omega);
    let s_mat = solve_discrete_lyapunov(&a_cl, &q_prime)?;
    let s_inv_half = inv_sqrt_sym(&s_mat)?;
    let c_cl = &sys.c + &sys.d_u * k_omega;
    let l_mat = SymMatrix::symmetrize(
        s_inv_half.transpose() * c_cl.transpose() * tube.gamma_mat.matrix() * &c_cl * &s_inv_half,
    );
    let lam_l = lambda_max(&l_mat)?.max(0.0);
    let rho_sq = tube.rho * tube.rho;
    let s_floor = tube.gamma * dist.d_max * dist.d_max / (1.0 - rho_sq);
    let s_of_x = |x: f64| (x * lam_l + tube.gamma * dist.d_max * dist.d_max) / (1.0 - rho_sq);

    // per-row gain of sqrt(x_omega): h_i = ||S^{-1/2} [I; K_omega]' F_i'||
    let mut ik = DMatrix::zeros(sys.n_x() + sys.n_u(), sys.n_x());
    ik.view_mut((0, 0), (sys.n_x(), sys.n_x()))
        .copy_from(&DMatrix::identity(sys.n_x(), sys.n_x()));
    ik.view_mut((sys.n_x(), 0), (sys.n_u(), sys.n_x()))
        .copy_from(k_omega);
    let h: Vec<f64> = (0..cons.n_rows())
        .map(|i| {
            let fi = cons.h_mat.row(i).transpose();
            (&s_inv_half * (ik.transpose() * fi)).norm()
        })
        .collect();

    let rows_ok = |x: f64, s_om: f64| -> bool {
        (0..cons.n_rows()).all(|i| {
            let rhs = cons.h_vec[i] - s_om.max(0.0).sqrt() * tube.c[i];
            rhs >= 0.0 && x.max(0.0).sqrt() * h[i] <= rhs
        })
    };

    let (x_omega, s_omega) = match s_omega_override {
        None => {
            // upper end of the bracket: rows at the disturbance-only level
            let mut x_hi = f64::INFINITY;
            for i in 0..cons.n_rows() {
                if h[i] > 0.0 {
                    let rhs = cons.h_vec[i] - s_floor.sqrt() * tube.c[i];
                    x_hi = x_hi.min((rhs / h[i]) * (rhs / h[i]));
                }
            }
            if !x_hi.is_finite() {
                // unconstrained in x: cap by invariance alone being automatic
                x_hi = 1e12;
            }
            let ok = |x: f64| rows_ok(x, s_of_x(x));
            let mut lo = 0.0;
            let mut hi = x_hi;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (lo, s_of_x(lo))
        }
        Some(s_om) => {
            if s_om <= s_floor {
                return Err(SynthesisError::NoTerminalSet(format!(
                    "requested s_omega {s_om:.6e} is within the disturbance floor {s_floor:.6e}"
                )));
            }
            // invariance cap: s_of_x(x) <= s_om
            let cap = if lam_l > 0.0 {
                (s_om * (1.0 - rho_sq) - tube.gamma * dist.d_max * dist.d_max) / lam_l
            } else {
                f64::INFINITY
            };
            let mut x_hi = cap;
            for i in 0..cons.n_rows() {
                if h[i] > 0.0 {
                    let rhs = cons.h_vec[i] - s_om.sqrt() * tube.c[i];
                    if rhs <= 0.0 {
                        return Err(SynthesisError::NoTerminalSet(format!(
                            "requested s_omega tightens row {i} past its bound"
                        )));
                    }
                    x_hi = x_hi.min((rhs / h[i]) * (rhs / h[i]));
                }
            }
            if !x_hi.is_finite() {
                x_hi = 1e12;
            }
            let ok = |x: f64| x <= cap && rows_ok(x, s_om);
            let mut lo = 0.0;
            let mut hi = x_hi;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (lo, s_om)
        }
    };
    if x_omega <= 0.0 {
        return Err(SynthesisError::NoTerminalSet(
            "bisection collapsed to an empty terminal region".into(),
        ));
    }
    Ok(TerminalSet {
        k_omega: k_omega.clone(),
        s_mat,
        x_omega,
        s_omega,
    })
}

/// One sampled violation of the terminal conditions.
#[derive(Debug, Clone)]
pub struct TerminalViolation {
    pub item: u8,
    pub depth: f64,
}

/// Sampling check of the three terminal conditions over `n` points of the
/// terminal set (invariance, tightened constraint satisfaction, terminal
/// cost decrease). Deterministic for a fixed seed.
pub fn sample_terminal_set(
    sys: &LinearSystem,
    tube: &TubeParams,
    dist: &DisturbanceModel,
    cons: &ConstraintSet,
    q: &SymMatrix,
    r: &SymMatrix,
    term: &TerminalSet,
    n: usize,
    seed: u64,
) -> Result<Vec<TerminalViolation>, SynthesisError> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_x = sys.n_x();
    let s_inv_half = inv_sqrt_sym(&term.s_mat)?;
    let a_cl = &sys.a + &sys.b_u * &term.k_omega;
    let c_cl = &sys.c + &sys.d_u * &term.k_omega;
    let tol = 1e-9;
    let mut violations = Vec::new();
    for _ in 0..n {
        // uniform over the ellipsoid ||x||_S^2 <= x_omega
        let dir = {
            let mut v = DVector::from_fn(n_x, |_, _| rng.random_range(-1.0..1.0f64));
            while v.norm() < 1e-6 {
                v = DVector::from_fn(n_x, |_, _| rng.random_range(-1.0..1.0f64));
            }
            v.normalize()
        };
        let u: f64 = rng.random_range(0.0..1.0f64);
        let radius = term.x_omega.sqrt() * u.powf(1.0 / n_x as f64);
        let x = &s_inv_half * (dir * radius);
        let s: f64 = if term.s_omega > 0.0 {
            rng.random_range(0.0..term.s_omega)
        } else {
            0.0
        };

        // item 1: positive invariance of (x, s)
        let x_next = &a_cl * &x;
        let y_loc = &c_cl * &x;
        let s_next = tube.rho * tube.rho * s
            + tube.gamma_mat.quadratic_form(&y_loc)
            + tube.gamma * dist.d_max * dist.d_max;
        let x_next_level = term.s_mat.quadratic_form(&x_next);
        if x_next_level > term.x_omega + tol * term.x_omega.max(1.0) {
            violations.push(TerminalViolation {
                item: 1,
                depth: x_next_level - term.x_omega,
            });
        }
        if s_next > term.s_omega + tol * term.s_omega.max(1.0) {
            violations.push(TerminalViolation {
                item: 1,
                depth: s_next - term.s_omega,
            });
        }
        // item 2: tightened constraints under the local gain
        let u_loc = &term.k_omega * &x;
        for i in 0..cons.n_rows() {
            let lhs = cons.row_value(i, &x, &u_loc);
            let rhs = cons.h_vec[i] - s.max(0.0).sqrt() * tube.c[i];
            if lhs > rhs + tol {
                violations.push(TerminalViolation {
                    item: 2,
                    depth: lhs - rhs,
                });
            }
        }
        // item 3: terminal cost decrease
        let dec = term.s_mat.quadratic_form(&x_next) - term.s_mat.quadratic_form(&x)
            + q.quadratic_form(&x)
            + r.quadratic_form(&u_loc);
        if dec > tol {
            violations.push(TerminalViolation {
                item: 3,
                depth: dec,
            });
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_delay_iqc, DelayMultiplierFamily};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn delay_example_system() -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.05, -0.3, 0.0, 0.95]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn example_constraints() -> ConstraintSet {
        ConstraintSet::new(
            DMatrix::from_row_slice(
                6,
                3,
                &[
                    1.0, 0.0, 0.0, //
                    -1.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, //
                    0.0, -1.0, 0.0, //
                    0.0, 0.0, 1.0, //
                    0.0, 0.0, -1.0,
                ],
            ),
            DVector::from_row_slice(&[0.4, 0.4, 0.2, 0.2, 0.1, 0.1]),
        )
        .unwrap()
    }

    fn printed_p() -> SymMatrix {
        SymMatrix::from_rows(&[
            &[5.9, -8.1, -4.15, -11.7],
            &[-8.1, 15.7, 6.0, 22.2],
            &[-4.15, 6.0, 40.2, -17.0],
            &[-11.7, 22.2, -17.0, 81.7],
        ])
        .unwrap()
    }

    fn printed_m() -> SymMatrix {
        SymMatrix::from_rows(&[
            &[29.0, 14.5, 0.0],
            &[14.5, 25.4, 0.0],
            &[0.0, 0.0, -20.7],
        ])
        .unwrap()
    }

    fn k_gain() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[0.18, -0.35])
    }

    /// Design LMI at the published (rounded) constants: feasible up to the
    /// rounding slack of one printed decimal.
    #[test]
    fn design_lmi_at_reference_values() {
        let sys = delay_example_system();
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let aug = assemble_augmented(&sys, &k_gain(), &filt).unwrap();
        let xi = SymMatrix::identity(1);
        let design = assemble_design_lmi(&aug, &sys, &filt, 0.95, &xi).unwrap();
        let lhs = design.eval(
            &printed_p(),
            &printed_m(),
            &SymMatrix::from_diagonal(&[244.0]),
            244.0,
        );
        assert_eq!(lhs.dim(), 7);
        let lmax = lambda_max(&lhs).unwrap();
        assert!(lmax <= 0.5, "lambda_max = {lmax}");
        // classification through the definiteness margin for rounded prints
        let class = definiteness(&lhs, 0.5).unwrap();
        assert!(matches!(
            class,
            Definiteness::NegativeDefinite | Definiteness::Singular
        ));
    }

    #[test]
    fn stability_lmi_at_reference_values() {
        let sys = delay_example_system();
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let aug = assemble_augmented(&sys, &k_gain(), &filt).unwrap();
        let stab = assemble_stability_lmi(&aug, 0.95).unwrap();
        let lhs = stab.eval(&printed_p(), &printed_m());
        assert_eq!(lhs.dim(), 5);
        assert!(lambda_max(&lhs).unwrap() <= 0.5);
    }

    /// Without an uncertainty channel the stability fragment reduces to the
    /// plain Lyapunov decrease.
    #[test]
    fn stability_lmi_degenerate_channel() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 0),
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let filt = crate::model::IqcFilter::static_filter(
            DMatrix::zeros(0, 1),
            DMatrix::zeros(0, 0),
        )
        .unwrap();
        let k = DMatrix::zeros(1, 2);
        let aug = assemble_augmented(&sys, &k, &filt).unwrap();
        let stab = assemble_stability_lmi(&aug, 0.9).unwrap();
        let p = SymMatrix::from_rows(&[&[2.0, 0.1], &[0.1, 1.5]]).unwrap();
        let lhs = stab.eval(&p, &SymMatrix::zeros(0));
        let expect = SymMatrix::symmetrize(
            sys.a.transpose() * p.matrix() * &sys.a - p.matrix() * 0.81,
        );
        assert!((lhs.matrix() - expect.matrix()).amax() < 1e-14);
    }

    /// Scaling (P, M) jointly scales the stability fragment; scaling
    /// (P, M, Gamma, gamma) jointly scales the design fragment.
    #[test]
    fn lmi_homogeneity() {
        let sys = delay_example_system();
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let aug = assemble_augmented(&sys, &k_gain(), &filt).unwrap();
        let xi = SymMatrix::identity(1);
        let design = assemble_design_lmi(&aug, &sys, &filt, 0.95, &xi).unwrap();
        let alpha = 3.7;
        let base = design.eval(
            &printed_p(),
            &printed_m(),
            &SymMatrix::from_diagonal(&[244.0]),
            244.0,
        );
        let scaled = design.eval(
            &printed_p().scale(alpha),
            &printed_m().scale(alpha),
            &SymMatrix::from_diagonal(&[244.0 * alpha]),
            244.0 * alpha,
        );
        assert!((scaled.matrix() - base.matrix() * alpha).amax() < 1e-9);
    }

    /// Feasibility is preserved when Gamma and gamma are enlarged.
    #[test]
    fn design_lmi_monotone_in_weights() {
        let sys = delay_example_system();
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let aug = assemble_augmented(&sys, &k_gain(), &filt).unwrap();
        let xi = SymMatrix::identity(1);
        let design = assemble_design_lmi(&aug, &sys, &filt, 0.95, &xi).unwrap();
        let g1 = SymMatrix::from_diagonal(&[244.0]);
        let g2 = SymMatrix::from_diagonal(&[300.0]);
        let l1 = design.eval(&printed_p(), &printed_m(), &g1, 244.0);
        let l2 = design.eval(&printed_p(), &printed_m(), &g2, 260.0);
        // difference is negative semidefinite
        let diff = &l2 - &l1;
        assert!(lambda_max(&diff).unwrap() <= 1e-12);
    }

    /// Degenerate disturbance channel: the extra corner reduces to Gamma.
    #[test]
    fn design_lmi_no_disturbance_channel() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.05, -0.3, 0.0, 0.95]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let aug = assemble_augmented(&sys, &k_gain(), &filt).unwrap();
        let design = assemble_design_lmi(&aug, &sys, &filt, 0.95, &SymMatrix::zeros(0)).unwrap();
        let lhs = design.eval(
            &printed_p(),
            &printed_m(),
            &SymMatrix::from_diagonal(&[244.0]),
            1.0,
        );
        // columns: 4 states + w + ybar
        assert_eq!(lhs.dim(), 6);
    }

    fn example_inputs<'a>(
        sys: &'a LinearSystem,
        filt: &'a IqcFilter,
        k: &'a DMatrix<f64>,
        dist: &'a DisturbanceModel,
        cons: &'a ConstraintSet,
        spec: &'a MultiplierSpec,
        rho: f64,
    ) -> DesignInputs<'a> {
        DesignInputs {
            sys,
            filt,
            k,
            rho,
            dist,
            constraints: cons,
            multiplier: spec,
        }
    }

    #[test]
    fn minimize_tightening_reference_design() {
        let sys = delay_example_system();
        let (filt, family) = build_delay_iqc(2, 1).unwrap();
        let k = k_gain();
        let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
        let cons = example_constraints();
        let spec = MultiplierSpec::DelayFamily(family.clone());
        let inp = example_inputs(&sys, &filt, &k, &dist, &cons, &spec, 0.95);
        let out = minimize_tightening(
            &inp,
            &SymMatrix::from_diagonal(&[244.0]),
            244.0,
            &DesignOptions::default(),
        )
        .unwrap();
        // margin and positive definiteness
        assert!(out.lmi_margin >= 1e-6 * 244.0, "margin {}", out.lmi_margin);
        assert!(matches!(
            definiteness(&out.tube.p, 0.0).unwrap(),
            Definiteness::PositiveDefinite
        ));
        out.tube.validate(Some(&cons)).unwrap();
        // the optimized tightening lands close to the reference run
        let c = &out.tube.c;
        assert_relative_eq!(c[0], 0.7709, max_relative = 0.05);
        assert_relative_eq!(c[2], 0.5252, max_relative = 0.05);
        assert_relative_eq!(c[4], 0.1359, max_relative = 0.10);
        assert_relative_eq!(c[0], c[1], max_relative = 1e-9);
        // multiplier dominates every family member
        let x = out.x_iqc.as_ref().unwrap();
        for tau in 0..=2usize {
            let mt = family.m_tau(tau, x).unwrap();
            let diff = &out.multiplier.m - &mt;
            assert!(lambda_min(&diff).unwrap() >= -1e-7);
        }
        // epigraph tightness: c_i^2 <= g_i + 1e-8 is implied by optimality;
        // check directly against the reported objective
        let sum_c_sq: f64 = c.iter().map(|v| v * v).sum();
        assert!(sum_c_sq <= out.objective + 1e-6, "{} vs {}", sum_c_sq, out.objective);
    }

    #[test]
    fn minimize_tightening_rejects_fast_rate() {
        // the closed error loop has spectral radius ~0.83, so rho = 0.5 is
        // impossible
        let sys = delay_example_system();
        let (filt, family) = build_delay_iqc(2, 1).unwrap();
        let k = k_gain();
        let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
        let cons = example_constraints();
        let spec = MultiplierSpec::DelayFamily(family);
        let inp = example_inputs(&sys, &filt, &k, &dist, &cons, &spec, 0.5);
        match minimize_tightening(
            &inp,
            &SymMatrix::from_diagonal(&[244.0]),
            244.0,
            &DesignOptions::default(),
        ) {
            Err(SynthesisError::Infeasible { .. }) => {}
            other => panic!("expected infeasibility, got {:?}", other.map(|o| o.objective)),
        }
    }

    #[test]
    fn propose_gamma_runs() {
        let sys = delay_example_system();
        let (filt, family) = build_delay_iqc(2, 1).unwrap();
        let k = k_gain();
        let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
        let cons = example_constraints();
        let spec = MultiplierSpec::DelayFamily(family);
        let inp = example_inputs(&sys, &filt, &k, &dist, &cons, &spec, 0.95);
        let t = propose_gamma(&inp, &DesignOptions::default()).unwrap();
        assert!(t > 0.0 && t < 100.0, "proposed weight {t}");
    }

    fn reference_tube(cons: &ConstraintSet) -> TubeParams {
        let p = printed_p();
        let (p_e, p_diff) = schur_reduce(&p, 2).unwrap();
        let k = k_gain();
        let c = tighten_vector(&p_e, &k, cons).unwrap();
        TubeParams {
            rho: 0.95,
            p,
            p_e,
            p_diff,
            gamma: 244.0,
            gamma_mat: SymMatrix::from_diagonal(&[244.0]),
            k,
            c,
        }
    }

    #[test]
    fn terminal_existence_sweep() {
        let cons = example_constraints();
        let tube = reference_tube(&cons);
        let dist_ok = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
        assert!(check_terminal_existence(&cons, &tube, &dist_ok));
        // zero disturbance: trivially satisfied for positive bounds
        let dist_zero = DisturbanceModel::new(SymMatrix::identity(1), 0.0).unwrap();
        assert!(check_terminal_existence(&cons, &tube, &dist_zero));
        // inflate d_max until a row crosses; the first to go is the second
        // state row: d = f_i sqrt(1-rho^2) / (sqrt(gamma) c_i)
        let c2 = tube.c[2];
        let expect = 0.2 * (1.0 - 0.95f64 * 0.95).sqrt() / (244.0f64.sqrt() * c2);
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let dist = DisturbanceModel::new(SymMatrix::identity(1), mid).unwrap();
            if check_terminal_existence(&cons, &tube, &dist) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_relative_eq!(lo, expect, max_relative = 1e-6);
        let dist_big = DisturbanceModel::new(SymMatrix::identity(1), 0.05).unwrap();
        assert!(!check_terminal_existence(&cons, &tube, &dist_big));
    }

    #[test]
    fn terminal_ingredients_reference() {
        let sys = delay_example_system();
        let cons = example_constraints();
        let tube = reference_tube(&cons);
        let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
        let q = SymMatrix::identity(2);
        let r = SymMatrix::identity(1);
        let k_om = DMatrix::from_row_slice(1, 2, &[0.19, -0.28]);
        let term = terminal_ingredients(&sys, &tube, &dist, &cons, &q, &r, &k_om, None).unwrap();
        // Lyapunov cost (exact solution of the decrease equation)
        assert_relative_eq!(term.s_mat.matrix()[(0, 0)], 9.25590836, epsilon = 1e-5);
        assert_relative_eq!(term.s_mat.matrix()[(1, 1)], 7.5985405, epsilon = 1e-5);
        // free bisection lands near the reference region size
        assert!(
            term.x_omega > 0.0039 / 2.0 && term.x_omega < 0.0039 * 2.0,
            "x_omega = {}",
            term.x_omega
        );
        assert!(term.s_omega > 0.0 && term.s_omega < 0.2);

        // pinned tube-size cap reproduces the published operating point
        let term2 =
            terminal_ingredients(&sys, &tube, &dist, &cons, &q, &r, &k_om, Some(0.1)).unwrap();
        assert_eq!(term2.s_omega, 0.1);
        assert!(
            term2.x_omega > 0.0039 / 2.0 && term2.x_omega < 0.0039 * 2.0,
            "x_omega = {}",
            term2.x_omega
        );
        // sampling the three terminal conditions finds no violations
        let viols = sample_terminal_set(&sys, &tube, &dist, &cons, &q, &r, &term2, 1000, 42)
            .unwrap();
        assert!(viols.is_empty(), "{} violations", viols.len());
    }

    #[test]
    fn terminal_degenerate_disturbance_free() {
        // d_max = 0 and Gamma ~ 0: the tube floor vanishes and the region is
        // limited by the state/input constraints alone
        let sys = delay_example_system();
        let cons = example_constraints();
        let mut tube = reference_tube(&cons);
        tube.gamma_mat = SymMatrix::zeros(1);
        let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.0).unwrap();
        let q = SymMatrix::identity(2);
        let r = SymMatrix::identity(1);
        let k_om = DMatrix::from_row_slice(1, 2, &[0.19, -0.28]);
        let term = terminal_ingredients(&sys, &tube, &dist, &cons, &q, &r, &k_om, None).unwrap();
        assert_eq!(term.s_omega, 0.0);
        assert!(term.x_omega > 0.01);
        let viols =
            sample_terminal_set(&sys, &tube, &dist, &cons, &q, &r, &term, 500, 7).unwrap();
        assert!(viols.is_empty());
    }

    #[test]
    fn sampler_detects_oversized_region() {
        let sys = delay_example_system();
        let cons = example_constraints();
        let tube = reference_tube(&cons);
        let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
        let q = SymMatrix::identity(2);
        let r = SymMatrix::identity(1);
        let k_om = DMatrix::from_row_slice(1, 2, &[0.19, -0.28]);
        let term =
            terminal_ingredients(&sys, &tube, &dist, &cons, &q, &r, &k_om, Some(0.1)).unwrap();
        let oversized = TerminalSet {
            s_omega: term.s_omega * 2.0,
            ..term
        };
        let viols =
            sample_terminal_set(&sys, &tube, &dist, &cons, &q, &r, &oversized, 1000, 42).unwrap();
        assert!(viols.iter().any(|v| v.item == 2));
    }
}
