//! The online optimal control problem and the receding-horizon controller.
//!
//! The problem optimizes the nominal input sequence and the nominal initial
//! state, with the tube size propagated alongside: the tube recursion is
//! relaxed to an inequality (sound, since a larger tube only tightens
//! constraints) and the square roots in the tightened rows are removed by
//! squaring with a sign side-constraint, so every constraint is at most
//! quadratic and the problem is handed to the SQP layer.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::SymMatrix;
use crate::model::{ConstraintSet, DisturbanceModel, IqcFilter, LinearSystem};
use crate::qcqp::{
    solve_sqp_multistart, QcqpError, QcqpProblem, QuadExpr, SqpOptions, SqpStatus,
};
use crate::qp::{solve_qp, QpOptions};
use crate::synthesis::{SynthesisError, TerminalSet, TubeParams};
use crate::tube::{tube_measurement_update, tube_predict, TubeError};

/// Rows with a tightening coefficient below this stay linear instead of
/// being squared (the squared form would be vacuous).
const TIGHTENING_EPS: f64 = 1e-12;

/// Feasibility tolerance for accepting a solution or a candidate.
pub const FEAS_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("problem infeasible at the initial time (violation {violation:.3e})")]
    InfeasibleAtStart { violation: f64 },
    #[error("problem became infeasible at t = {t}; this should be impossible for a valid design")]
    UnexpectedInfeasible { t: usize },
    #[error("solution failed re-verification: worst {worst:.3e} at stage {stage_k} row {row} (terminal x {term_x:.3e}, terminal s {term_s:.3e})")]
    SolutionRejected {
        worst: f64,
        stage_k: usize,
        row: usize,
        term_x: f64,
        term_s: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("the exact tube update needs a reconstructible filter state: {0}")]
    UnsupportedMode(String),
    #[error(transparent)]
    Qcqp(#[from] QcqpError),
    #[error(transparent)]
    Tube(#[from] TubeError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Measurement-update rule used for the re-optimized tube size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubeUpdateMode {
    /// The general update, valid whether or not the filter state is known.
    General,
    /// The tighter update using the reconstructed filter state; requires
    /// `B_psi2 = 0` and an output that does not read the disturbance.
    Exact,
    /// Exact when the filter state is reconstructible, general otherwise.
    Auto,
}

/// Handling of the nominal initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// The nominal initial state is a decision variable.
    FreeInitialState,
    /// The nominal initial state is pinned (to the measured state at t = 0,
    /// to the shifted prediction afterwards).
    FixedInitialState,
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub sys: LinearSystem,
    pub filt: IqcFilter,
    pub tube: TubeParams,
    pub terminal: TerminalSet,
    pub constraints: ConstraintSet,
    pub dist: DisturbanceModel,
    pub horizon: usize,
    pub q: SymMatrix,
    pub r: SymMatrix,
    pub s_cost: SymMatrix,
    pub update_mode: TubeUpdateMode,
    pub init_mode: InitMode,
    pub sqp: SqpOptions,
}

impl MpcConfig {
    /// Resolves `Auto` and checks that the exact mode is actually usable.
    pub fn resolved_update_mode(&self) -> Result<TubeUpdateMode, MpcError> {
        let reconstructible = self.filt.b_psi2.amax() == 0.0
            && self.sys.d_w.amax() == 0.0
            && (self.sys.n_d() == 0 || self.sys.d_d.amax() == 0.0);
        match self.update_mode {
            TubeUpdateMode::General => Ok(TubeUpdateMode::General),
            TubeUpdateMode::Exact => {
                if reconstructible {
                    Ok(TubeUpdateMode::Exact)
                } else {
                    Err(MpcError::UnsupportedMode(
                        "filter state depends on unmeasured signals".into(),
                    ))
                }
            }
            TubeUpdateMode::Auto => Ok(if reconstructible {
                TubeUpdateMode::Exact
            } else {
                TubeUpdateMode::General
            }),
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::InvalidConfig("horizon must be at least 1".into()));
        }
        let n_x = self.sys.n_x();
        let n_u = self.sys.n_u();
        if self.q.dim() != n_x || self.r.dim() != n_u || self.s_cost.dim() != n_x {
            return Err(MpcError::InvalidConfig(
                "cost weight dimensions do not match the plant".into(),
            ));
        }
        for (name, w) in [("q", &self.q), ("r", &self.r), ("s_cost", &self.s_cost)] {
            if crate::linalg::lambda_min(w).map_err(SynthesisError::Linalg)? <= 0.0 {
                return Err(MpcError::InvalidConfig(format!(
                    "cost weight {name} must be positive definite"
                )));
            }
        }
        if self.tube.n_x() != n_x || self.constraints.h_mat.ncols() != n_x + n_u {
            return Err(MpcError::InvalidConfig(
                "tube or constraint dimensions do not match the plant".into(),
            ));
        }
        if self.tube.c.len() != self.constraints.n_rows() {
            return Err(MpcError::InvalidConfig(
                "tightening vector length does not match the constraint rows".into(),
            ));
        }
        self.resolved_update_mode()?;
        Ok(())
    }
}

/// Data carried across the measurement update at `t >= 1`.
#[derive(Debug, Clone)]
pub struct MeasurementData {
    /// One-step-ahead nominal state from the previous solution.
    pub z1_prev: DVector<f64>,
    /// One-step-ahead tube size from the previous solution.
    pub s1_prev: f64,
    /// Reconstructed filter state (exact mode only).
    pub psi: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "suboptimal",
            SolveStatus::Infeasible => "infeasible",
        };
        write!(f, "{s}")
    }
}

/// Solution of the online problem. `s_seq` holds the tube sizes recomputed
/// exactly from the recursion (not the relaxed solver values), and the
/// stored trajectory replays the nominal dynamics exactly.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub z0: DVector<f64>,
    pub v_bar: Vec<DVector<f64>>,
    pub z_bar: Vec<DVector<f64>>,
    pub y_bar: Vec<DVector<f64>>,
    pub s_seq: Vec<f64>,
    pub cost: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
}

/// The assembled online problem for one time step.
pub struct Ocp {
    pub problem: QcqpProblem,
    n_x: usize,
    n_u: usize,
    horizon: usize,
    has_r: bool,
    x_t: DVector<f64>,
    meas: Option<MeasurementData>,
}

impl Ocp {
    pub fn n_dec(&self) -> usize {
        self.n_x + self.horizon * self.n_u + self.horizon + 1 + usize::from(self.has_r)
    }

    fn idx_v(&self, k: usize) -> usize {
        self.n_x + k * self.n_u
    }

    fn idx_s(&self, k: usize) -> usize {
        self.n_x + self.horizon * self.n_u + k
    }

    fn idx_r(&self) -> usize {
        self.n_x + self.horizon * self.n_u + self.horizon + 1
    }

    /// Packs structured pieces into a decision vector.
    pub fn pack(
        &self,
        z0: &DVector<f64>,
        v: &[DVector<f64>],
        s: &[f64],
        r: f64,
    ) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_dec());
        x.rows_mut(0, self.n_x).copy_from(z0);
        for (k, vk) in v.iter().enumerate() {
            x.rows_mut(self.idx_v(k), self.n_u).copy_from(vk);
        }
        for (k, sk) in s.iter().enumerate() {
            x[self.idx_s(k)] = *sk;
        }
        if self.has_r {
            x[self.idx_r()] = r;
        }
        x
    }

    fn unpack(&self, x: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let z0 = x.rows(0, self.n_x).clone_owned();
        let v = (0..self.horizon)
            .map(|k| x.rows(self.idx_v(k), self.n_u).clone_owned())
            .collect();
        (z0, v)
    }

    /// Exact tube sequence for a given `(z0, v)` under the configured
    /// measurement update.
    fn exact_tube_sequence(
        &self,
        cfg: &MpcConfig,
        z0: &DVector<f64>,
        y_bars: &[DVector<f64>],
    ) -> Result<Vec<f64>, MpcError> {
        let e0 = &self.x_t - z0;
        let s0 = match &self.meas {
            None => {
                // initial time: ||e0||^2 in the leading block of P
                let n_x = self.n_x;
                let p11 = SymMatrix::symmetrize(
                    cfg.tube.p.matrix().view((0, 0), (n_x, n_x)).clone_owned(),
                );
                p11.quadratic_form(&e0)
            }
            Some(meas) => {
                let e1 = &self.x_t - &meas.z1_prev;
                match &meas.psi {
                    None => tube_measurement_update(meas.s1_prev, &e1, &e0, &cfg.tube)?,
                    Some(psi) => {
                        crate::tube::exact_update(meas.s1_prev, &e1, Some(psi), &e0, &cfg.tube)?
                    }
                }
            }
        };
        let mut s_seq = Vec::with_capacity(self.horizon + 1);
        s_seq.push(s0);
        for y in y_bars {
            let yn = cfg.tube.y_norm_sq(y);
            let prev = *s_seq.last().unwrap();
            s_seq.push(tube_predict(prev, yn, &cfg.tube, cfg.dist.d_max));
        }
        Ok(s_seq)
    }

    /// Converts an accepted decision vector into a structured solution:
    /// replays the nominal dynamics, recomputes the exact tube sequence and
    /// re-verifies every tightened row in original (square-root) form.
    pub fn extract_solution(
        &self,
        cfg: &MpcConfig,
        x: &DVector<f64>,
        status: SolveStatus,
        kkt_residual: f64,
    ) -> Result<MpcSolution, MpcError> {
        let (z0, v) = self.unpack(x);
        let mut z_bar = Vec::with_capacity(self.horizon + 1);
        let mut y_bar = Vec::with_capacity(self.horizon);
        z_bar.push(z0.clone());
        for vk in v.iter() {
            let zk = z_bar.last().unwrap();
            y_bar.push(&cfg.sys.c * zk + &cfg.sys.d_u * vk);
            z_bar.push(&cfg.sys.a * zk + &cfg.sys.b_u * vk);
        }
        let s_seq = self.exact_tube_sequence(cfg, &z0, &y_bar)?;

        // re-verify in the original form with the exact tube sizes
        let mut worst = f64::NEG_INFINITY;
        let mut worst_at = (0usize, usize::MAX);
        for k in 0..self.horizon {
            let sqrt_s = s_seq[k].max(0.0).sqrt();
            for i in 0..cfg.constraints.n_rows() {
                let lhs = cfg.constraints.row_value(i, &z_bar[k], &v[k])
                    + sqrt_s * cfg.tube.c[i]
                    - cfg.constraints.h_vec[i];
                if lhs > worst {
                    worst = lhs;
                    worst_at = (k, i);
                }
            }
        }
        let term_x = cfg.terminal.s_mat.quadratic_form(&z_bar[self.horizon]) - cfg.terminal.x_omega;
        let term_s = s_seq[self.horizon] - cfg.terminal.s_omega;
        worst = worst.max(term_x).max(term_s);
        if worst > FEAS_TOL {
            return Err(MpcError::SolutionRejected {
                worst,
                stage_k: worst_at.0,
                row: worst_at.1,
                term_x,
                term_s,
            });
        }

        let mut cost = cfg.s_cost.quadratic_form(&z_bar[self.horizon]);
        for k in 0..self.horizon {
            cost += cfg.q.quadratic_form(&z_bar[k]) + cfg.r.quadratic_form(&v[k]);
        }
        Ok(MpcSolution {
            z0,
            v_bar: v,
            z_bar,
            y_bar,
            s_seq,
            cost,
            status,
            kkt_residual,
        })
    }
}

/// Builds the online problem at state `x_t`. `meas` must be `None` exactly
/// at the initial time.
pub fn build_ocp(
    cfg: &MpcConfig,
    x_t: &DVector<f64>,
    meas: Option<MeasurementData>,
) -> Result<Ocp, MpcError> {
    let n_x = cfg.sys.n_x();
    let n_u = cfg.sys.n_u();
    let t_h = cfg.horizon;
    if x_t.len() != n_x {
        return Err(MpcError::InvalidConfig("state has wrong dimension".into()));
    }
    let has_r = match &meas {
        Some(m) => m.psi.is_none(),
        None => false,
    };
    let n = n_x + t_h * n_u + (t_h + 1) + usize::from(has_r);
    let idx_v = |k: usize| n_x + k * n_u;
    let idx_s = |k: usize| n_x + t_h * n_u + k;
    let idx_r = n_x + t_h * n_u + t_h + 1;

    // state-elimination maps: z_k = G_k x_dec, y_k = Y_k x_dec
    let mut g_maps: Vec<DMatrix<f64>> = Vec::with_capacity(t_h + 1);
    let mut g0 = DMatrix::zeros(n_x, n);
    g0.view_mut((0, 0), (n_x, n_x))
        .copy_from(&DMatrix::identity(n_x, n_x));
    g_maps.push(g0);
    for k in 0..t_h {
        let mut next = &cfg.sys.a * &g_maps[k];
        for col in 0..n_u {
            let bcol = cfg.sys.b_u.column(col).clone_owned();
            let target = idx_v(k) + col;
            for rowi in 0..n_x {
                next[(rowi, target)] += bcol[rowi];
            }
        }
        g_maps.push(next);
    }
    let y_map = |k: usize| -> DMatrix<f64> {
        let mut y = &cfg.sys.c * &g_maps[k];
        for col in 0..n_u {
            let dcol = cfg.sys.d_u.column(col).clone_owned();
            let target = idx_v(k) + col;
            for rowi in 0..cfg.sys.n_y() {
                y[(rowi, target)] += dcol[rowi];
            }
        }
        y
    };

    // cost
    let mut h_cost = DMatrix::zeros(n, n);
    for k in 0..t_h {
        h_cost += g_maps[k].transpose() * cfg.q.matrix() * &g_maps[k] * 2.0;
        let mut u_sel = DMatrix::zeros(n_u, n);
        u_sel
            .view_mut((0, idx_v(k)), (n_u, n_u))
            .copy_from(&DMatrix::identity(n_u, n_u));
        h_cost += u_sel.transpose() * cfg.r.matrix() * &u_sel * 2.0;
    }
    h_cost += g_maps[t_h].transpose() * cfg.s_cost.matrix() * &g_maps[t_h] * 2.0;
    let objective = QuadExpr::convex(
        SymMatrix::symmetrize(h_cost).into_matrix(),
        DVector::zeros(n),
        0.0,
    );
    let mut prob = QcqpProblem::new(n, objective);

    // initial tube size definition
    match &meas {
        None => {
            let p11 = SymMatrix::symmetrize(
                cfg.tube.p.matrix().view((0, 0), (n_x, n_x)).clone_owned(),
            );
            // (x_t - z0)' P11 (x_t - z0) - s0 <= 0
            let mut h = DMatrix::zeros(n, n);
            h.view_mut((0, 0), (n_x, n_x))
                .copy_from(&(p11.matrix() * 2.0));
            let mut b = DVector::zeros(n);
            let w = p11.matrix() * x_t;
            for i in 0..n_x {
                b[i] = -2.0 * w[i];
            }
            b[idx_s(0)] = -1.0;
            prob.add_constraint(QuadExpr::convex(h, b, p11.quadratic_form(x_t)));
            if cfg.init_mode == InitMode::FixedInitialState {
                pin_z0(&mut prob, n, n_x, x_t);
            }
        }
        Some(m) => {
            if m.z1_prev.len() != n_x {
                return Err(MpcError::InvalidConfig(
                    "previous prediction has wrong dimension".into(),
                ));
            }
            let e1 = x_t - &m.z1_prev;
            match &m.psi {
                None => {
                    // general update with r >= ||e0 - e1||_{P_diff}
                    let e1_norm = cfg.tube.p_e.quadratic_form(&e1);
                    let gap = (m.s1_prev - e1_norm).max(0.0);
                    let const_d = gap.sqrt();
                    // s0 >= ||x_t - z0||_Pe^2 + r^2 + 2 const_d r + (s1 - ||e1||_Pe^2)
                    let mut h = DMatrix::zeros(n, n);
                    h.view_mut((0, 0), (n_x, n_x))
                        .copy_from(&(cfg.tube.p_e.matrix() * 2.0));
                    h[(idx_r, idx_r)] = 2.0;
                    let mut b = DVector::zeros(n);
                    let w = cfg.tube.p_e.matrix() * x_t;
                    for i in 0..n_x {
                        b[i] = -2.0 * w[i];
                    }
                    b[idx_r] = 2.0 * const_d;
                    b[idx_s(0)] = -1.0;
                    prob.add_constraint(QuadExpr::convex(
                        h,
                        b,
                        cfg.tube.p_e.quadratic_form(x_t) + m.s1_prev - e1_norm,
                    ));
                    // ||bz - z0||_{P_diff}^2 - r^2 <= 0, bz = z1_prev
                    let mut h2 = DMatrix::zeros(n, n);
                    h2.view_mut((0, 0), (n_x, n_x))
                        .copy_from(&(cfg.tube.p_diff.matrix() * 2.0));
                    h2[(idx_r, idx_r)] = -2.0;
                    let mut h2_plus = h2.clone();
                    h2_plus[(idx_r, idx_r)] = 0.0;
                    let mut b2 = DVector::zeros(n);
                    let w2 = cfg.tube.p_diff.matrix() * &m.z1_prev;
                    for i in 0..n_x {
                        b2[i] = -2.0 * w2[i];
                    }
                    prob.add_constraint(QuadExpr::split(
                        h2,
                        h2_plus,
                        b2,
                        cfg.tube.p_diff.quadratic_form(&m.z1_prev),
                    ));
                    // r >= 0
                    let mut br = DVector::zeros(n);
                    br[idx_r] = -1.0;
                    prob.add_constraint(QuadExpr::linear(br, 0.0));
                }
                Some(psi) => {
                    // exact update: s0 >= s1 + ||[e0; psi]||_P^2 - ||[e1; psi]||_P^2
                    let n_psi = cfg.tube.n_psi();
                    if psi.len() != n_psi {
                        return Err(MpcError::InvalidConfig(
                            "filter state has wrong dimension".into(),
                        ));
                    }
                    let p11 = SymMatrix::symmetrize(
                        cfg.tube.p.matrix().view((0, 0), (n_x, n_x)).clone_owned(),
                    );
                    let p21 = cfg
                        .tube
                        .p
                        .matrix()
                        .view((n_x, 0), (n_psi, n_x))
                        .clone_owned();
                    let w_psi = p21.transpose() * psi; // n_x
                    let mut h = DMatrix::zeros(n, n);
                    h.view_mut((0, 0), (n_x, n_x))
                        .copy_from(&(p11.matrix() * 2.0));
                    let mut b = DVector::zeros(n);
                    let w = p11.matrix() * x_t;
                    for i in 0..n_x {
                        b[i] = -2.0 * w[i] - 2.0 * w_psi[i];
                    }
                    b[idx_s(0)] = -1.0;
                    let c0 = p11.quadratic_form(x_t) + 2.0 * w_psi.dot(x_t) + m.s1_prev
                        - p11.quadratic_form(&e1)
                        - 2.0 * w_psi.dot(&e1);
                    prob.add_constraint(QuadExpr::convex(h, b, c0));
                }
            }
            if cfg.init_mode == InitMode::FixedInitialState {
                pin_z0(&mut prob, n, n_x, &m.z1_prev);
            }
        }
    }

    // tube recursion (relaxed) and nonnegativity
    let gamma_d = cfg.tube.gamma * cfg.dist.d_max * cfg.dist.d_max;
    let rho_sq = cfg.tube.rho * cfg.tube.rho;
    for k in 0..t_h {
        let yk = y_map(k);
        let h = yk.transpose() * cfg.tube.gamma_mat.matrix() * &yk * 2.0;
        let mut b = DVector::zeros(n);
        b[idx_s(k)] = rho_sq;
        b[idx_s(k + 1)] = -1.0;
        prob.add_constraint(QuadExpr::convex(
            SymMatrix::symmetrize(h).into_matrix(),
            b,
            gamma_d,
        ));
    }
    for k in 0..=t_h {
        let mut b = DVector::zeros(n);
        b[idx_s(k)] = -1.0;
        prob.add_constraint(QuadExpr::linear(b, 0.0));
    }

    // tightened constraint rows, squared, with the sign side-constraint
    for k in 0..t_h {
        let mut m_k = DMatrix::zeros(n_x + n_u, n);
        m_k.view_mut((0, 0), (n_x, n)).copy_from(&g_maps[k]);
        m_k.view_mut((n_x, idx_v(k)), (n_u, n_u))
            .copy_from(&DMatrix::identity(n_u, n_u));
        for i in 0..cfg.constraints.n_rows() {
            let fi = cfg.constraints.h_mat.row(i).clone_owned();
            let a_row = (fi * &m_k).transpose(); // n
            let f_i = cfg.constraints.h_vec[i];
            let c_i = cfg.tube.c[i];
            if c_i < TIGHTENING_EPS {
                prob.add_constraint(QuadExpr::linear(a_row, -f_i));
            } else {
                // c_i^2 s_k - (f_i - a'x)^2 <= 0
                let mut h = DMatrix::zeros(n, n);
                for p in 0..n {
                    let ap = a_row[p];
                    if ap == 0.0 {
                        continue;
                    }
                    for q in 0..n {
                        h[(p, q)] -= 2.0 * ap * a_row[q];
                    }
                }
                let mut b = &a_row * (2.0 * f_i);
                b[idx_s(k)] += c_i * c_i;
                prob.add_constraint(QuadExpr::concave(h, b, -f_i * f_i));
                // sign side-constraint a'x <= f_i
                prob.add_constraint(QuadExpr::linear(a_row, -f_i));
            }
        }
    }

    // terminal set
    let h_term =
        g_maps[t_h].transpose() * cfg.terminal.s_mat.matrix() * &g_maps[t_h] * 2.0;
    prob.add_constraint(QuadExpr::convex(
        SymMatrix::symmetrize(h_term).into_matrix(),
        DVector::zeros(n),
        -cfg.terminal.x_omega,
    ));
    let mut b_term = DVector::zeros(n);
    b_term[idx_s(t_h)] = 1.0;
    prob.add_constraint(QuadExpr::linear(b_term, -cfg.terminal.s_omega));

    Ok(Ocp {
        problem: prob,
        n_x,
        n_u,
        horizon: t_h,
        has_r,
        x_t: x_t.clone(),
        meas,
    })
}

fn pin_z0(prob: &mut QcqpProblem, n: usize, n_x: usize, target: &DVector<f64>) {
    for i in 0..n_x {
        let mut b = DVector::zeros(n);
        b[i] = 1.0;
        prob.add_constraint(QuadExpr::linear(b.clone(), -target[i]));
        b[i] = -1.0;
        prob.add_constraint(QuadExpr::linear(b, target[i]));
    }
}

/// The shifted warm start built from the previous optimal solution: inputs
/// shifted and extended with the local terminal gain, tube sizes shifted
/// and extended through the tube recursion.
pub fn candidate_shift(
    cfg: &MpcConfig,
    ocp: &Ocp,
    prev: &MpcSolution,
) -> Result<DVector<f64>, MpcError> {
    let t_h = cfg.horizon;
    if prev.v_bar.len() != t_h || prev.s_seq.len() != t_h + 1 {
        return Err(MpcError::InvalidConfig(
            "previous solution has a different horizon".into(),
        ));
    }
    let z0 = prev.z_bar[1].clone();
    let mut v: Vec<DVector<f64>> = Vec::with_capacity(t_h);
    for k in 0..t_h - 1 {
        v.push(prev.v_bar[k + 1].clone());
    }
    let z_term = prev.z_bar[t_h].clone();
    v.push(&cfg.terminal.k_omega * &z_term);
    let mut s: Vec<f64> = Vec::with_capacity(t_h + 1);
    for k in 0..t_h {
        s.push(prev.s_seq[k + 1]);
    }
    let y_term = &cfg.sys.c * &z_term + &cfg.sys.d_u * v.last().unwrap();
    s.push(tube_predict(
        prev.s_seq[t_h],
        cfg.tube.y_norm_sq(&y_term),
        &cfg.tube,
        cfg.dist.d_max,
    ));
    let r = match &ocp.meas {
        Some(m) if m.psi.is_none() => {
            let e0 = &ocp.x_t - &z0;
            let e1 = &ocp.x_t - &m.z1_prev;
            let diff = e0 - e1;
            cfg.tube.p_diff.quadratic_form(&diff).max(0.0).sqrt()
        }
        _ => 0.0,
    };
    Ok(ocp.pack(&z0, &v, &s, r))
}

/// Diagnostics of one controller step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub t: usize,
    /// Worst constraint value of the shifted candidate before solving
    /// (`None` at the initial time).
    pub candidate_violation: Option<f64>,
    pub candidate_cost: Option<f64>,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    /// True when the returned solution is the unimproved shifted candidate.
    pub used_candidate: bool,
}

/// Outcome of one controller step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub u: DVector<f64>,
    pub solution: MpcSolution,
    pub diagnostics: StepDiagnostics,
}

/// The applied control law `u = v0 + K (x_t - z0)`.
pub fn control_law(sol: &MpcSolution, x_t: &DVector<f64>, tube: &TubeParams) -> DVector<f64> {
    &sol.v_bar[0] + &tube.k * (x_t - &sol.z0)
}

/// Receding-horizon controller: owns the previous solution and, in exact
/// mode, the reconstructed filter state.
pub struct Controller {
    pub cfg: MpcConfig,
    mode: TubeUpdateMode,
    t: usize,
    prev: Option<MpcSolution>,
    psi_hat: DVector<f64>,
}

impl Controller {
    pub fn new(cfg: MpcConfig) -> Result<Self, MpcError> {
        cfg.validate()?;
        let mode = cfg.resolved_update_mode()?;
        let n_psi = cfg.filt.n_psi();
        Ok(Self {
            cfg,
            mode,
            t: 0,
            prev: None,
            psi_hat: DVector::zeros(n_psi),
        })
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Initial-state starts tried at `t = 0`: the measured state with a
    /// local-gain rollout, the origin at rest, and an interior point from a
    /// small feasibility QP.
    fn initial_starts(&self, ocp: &Ocp, x_t: &DVector<f64>) -> Vec<DVector<f64>> {
        let cfg = &self.cfg;
        let t_h = cfg.horizon;
        let n_x = cfg.sys.n_x();
        let n_u = cfg.sys.n_u();
        let rollout = |z0: &DVector<f64>| -> DVector<f64> {
            let mut v = Vec::with_capacity(t_h);
            let mut z = z0.clone();
            let mut ys = Vec::with_capacity(t_h);
            for _ in 0..t_h {
                let vk = &cfg.terminal.k_omega * &z;
                ys.push(&cfg.sys.c * &z + &cfg.sys.d_u * &vk);
                z = &cfg.sys.a * &z + &cfg.sys.b_u * &vk;
                v.push(vk);
            }
            let s_seq = ocp
                .exact_tube_sequence(cfg, z0, &ys)
                .unwrap_or_else(|_| vec![0.0; t_h + 1]);
            ocp.pack(z0, &v, &s_seq, 0.0)
        };
        let mut starts = vec![rollout(x_t)];
        if cfg.init_mode == InitMode::FreeInitialState {
            starts.push(rollout(&DVector::zeros(n_x)));
            // interior seed: pull z0 toward x_t inside the shrunk polytope
            let p11 = SymMatrix::symmetrize(
                cfg.tube.p.matrix().view((0, 0), (n_x, n_x)).clone_owned(),
            );
            let nv = n_x + n_u;
            let mut b_qp = DMatrix::zeros(nv, nv);
            b_qp.view_mut((0, 0), (n_x, n_x))
                .copy_from(&(p11.matrix() * 2.0));
            for i in 0..n_u {
                b_qp[(n_x + i, n_x + i)] = 1e-6;
            }
            let mut c_qp = DVector::zeros(nv);
            let w = p11.matrix() * x_t;
            for i in 0..n_x {
                c_qp[i] = -2.0 * w[i];
            }
            let shrink = 0.8;
            if let Ok(seed) = solve_qp(
                &b_qp,
                &c_qp,
                &cfg.constraints.h_mat,
                &(cfg.constraints.h_vec.clone() * shrink),
                None,
                &QpOptions::default(),
            ) {
                let z0 = seed.d.rows(0, n_x).clone_owned();
                starts.push(rollout(&z0));
            }
        }
        starts
    }

    /// One controller step: measure `x_t`, solve, return the applied input.
    pub fn step(&mut self, x_t: &DVector<f64>) -> Result<StepOutcome, MpcError> {
        let step_timer = std::time::Instant::now();
        let cfg_clone = self.cfg.clone();
        let (outcome, sol_store) = if self.t == 0 {
            let ocp = build_ocp(&cfg_clone, x_t, None)?;
            let mut starts = self.initial_starts(&ocp, x_t);
            if cfg_clone.init_mode == InitMode::FreeInitialState {
                // solve the pinned variant first: when the measured state
                // sits on the constraint boundary the only feasible initial
                // nominal state is the measurement itself, which the pinned
                // rows hold exactly; its solution then seeds the free solve
                let mut pinned_cfg = cfg_clone.clone();
                pinned_cfg.init_mode = InitMode::FixedInitialState;
                let pinned_ocp = build_ocp(&pinned_cfg, x_t, None)?;
                let pinned = crate::qcqp::solve_sqp(
                    &pinned_ocp.problem,
                    &starts[0],
                    &cfg_clone.sqp,
                )?;
                if std::env::var("MPC_DEBUG").is_ok() {
                    eprintln!(
                        "t=0 pinned: status={:?} viol={:.3e} iters={} obj={:.6} free_viol={:.3e}",
                        pinned.status,
                        pinned.violation,
                        pinned.iterations,
                        pinned.objective,
                        ocp.problem.max_violation(&pinned.x)
                    );
                }
                // even a marginally infeasible pinned point is a useful
                // warm start for the free problem
                if pinned.violation < 1e-3 {
                    starts.insert(0, pinned.x);
                }
            }
            let res = solve_sqp_multistart(&ocp.problem, &starts, &cfg_clone.sqp)?;
            if res.status == SqpStatus::Infeasible {
                return Err(MpcError::InfeasibleAtStart {
                    violation: res.violation,
                });
            }
            let status = match res.status {
                SqpStatus::Optimal => SolveStatus::Optimal,
                _ => SolveStatus::FeasibleSuboptimal,
            };
            let solution = ocp.extract_solution(&cfg_clone, &res.x, status, res.kkt_residual)?;
            let u = control_law(&solution, x_t, &cfg_clone.tube);
            let diagnostics = StepDiagnostics {
                t: self.t,
                candidate_violation: None,
                candidate_cost: None,
                sqp_iterations: res.iterations,
                kkt_residual: res.kkt_residual,
                used_candidate: false,
            };
            (
                StepOutcome {
                    u,
                    solution: solution.clone(),
                    diagnostics,
                },
                solution,
            )
        } else {
            let prev = self.prev.as_ref().expect("previous solution exists");
            let meas = MeasurementData {
                z1_prev: prev.z_bar[1].clone(),
                s1_prev: prev.s_seq[1],
                psi: match self.mode {
                    TubeUpdateMode::Exact => Some(self.psi_hat.clone()),
                    _ => None,
                },
            };
            let ocp = build_ocp(&cfg_clone, x_t, Some(meas))?;
            let cand = candidate_shift(&cfg_clone, &ocp, prev)?;
            let cand_violation = ocp.problem.max_violation(&cand);
            let cand_cost = ocp.problem.objective.value(&cand);
            let res = crate::qcqp::solve_sqp(&ocp.problem, &cand, &cfg_clone.sqp)?;
            let (x_best, status, kkt, used_candidate) = if res.status == SqpStatus::Infeasible
                || res.objective > cand_cost + 1e-9
            {
                if cand_violation > FEAS_TOL {
                    return Err(MpcError::UnexpectedInfeasible { t: self.t });
                }
                (cand, SolveStatus::FeasibleSuboptimal, res.kkt_residual, true)
            } else {
                let status = match res.status {
                    SqpStatus::Optimal => SolveStatus::Optimal,
                    _ => SolveStatus::FeasibleSuboptimal,
                };
                (res.x, status, res.kkt_residual, false)
            };
            let solution = ocp.extract_solution(&cfg_clone, &x_best, status, kkt)?;
            let u = control_law(&solution, x_t, &cfg_clone.tube);
            if std::env::var("MPC_DEBUG").is_ok() {
                eprintln!(
                    "t={} iters={} status={:?} kkt={:.2e} cand_viol={:.2e} used_cand={} cost={:.6} step_ms={:.1}",
                    self.t, res.iterations, res.status, kkt, cand_violation, used_candidate, solution.cost,
                    step_timer.elapsed().as_secs_f64() * 1e3
                );
            }
            let diagnostics = StepDiagnostics {
                t: self.t,
                candidate_violation: Some(cand_violation),
                candidate_cost: Some(cand_cost),
                sqp_iterations: res.iterations,
                kkt_residual: kkt,
                used_candidate,
            };
            (
                StepOutcome {
                    u,
                    solution: solution.clone(),
                    diagnostics,
                },
                solution,
            )
        };

        // advance the reconstructed filter state (exact mode)
        if self.mode == TubeUpdateMode::Exact && self.cfg.filt.n_psi() > 0 {
            let y_t = &self.cfg.sys.c * x_t + &self.cfg.sys.d_u * &outcome.u;
            self.psi_hat = &self.cfg.filt.a_psi * &self.psi_hat + &self.cfg.filt.b_psi1 * y_t;
        }
        self.prev = Some(sol_store);
        self.t += 1;
        Ok(outcome)
    }
}
