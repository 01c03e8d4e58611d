//! Closed-loop simulation of the true uncertain plant under the tube MPC,
//! disturbance generation, brute-force worst-case error oracles, a
//! delay-ignorant baseline controller, and trace import/export with exact
//! replay.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{solve_dare, LinalgError, SymMatrix};
use crate::model::{delay_operator, ConstraintSet, DelayUncertainty, DisturbanceModel, LinearSystem, ModelError};
use crate::mpc::{Controller, MpcError, SolveStatus};
use crate::qp::{solve_qp, QpError, QpOptions};
use crate::synthesis::TubeParams;
use crate::tube::tube_predict;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("controller infeasible at the initial state (violation {violation:.3e})")]
    InfeasibleAtStart { violation: f64 },
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("the uncertainty channel must not feed through the output (D_w = 0 required)")]
    AlgebraicLoop,
    #[error("enumeration budget exceeded: {0} combinations")]
    EnumerationBudget(u128),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Disturbance generation policy for closed-loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbancePolicy {
    Zero,
    /// Uniform over the admissible ellipsoid.
    Uniform,
    /// On the boundary of the admissible ellipsoid with random direction.
    Vertex,
}

fn sample_disturbance(
    policy: DisturbancePolicy,
    dist: &DisturbanceModel,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let n_d = dist.n_d();
    if n_d == 0 || dist.d_max == 0.0 {
        return DVector::zeros(n_d);
    }
    match policy {
        DisturbancePolicy::Zero => DVector::zeros(n_d),
        DisturbancePolicy::Uniform | DisturbancePolicy::Vertex => {
            // direction from a rejection-sampled unit ball
            let mut u = DVector::zeros(n_d);
            loop {
                for i in 0..n_d {
                    u[i] = rng.random_range(-1.0..1.0);
                }
                let norm = u.norm();
                if norm > 1e-3 && norm <= 1.0 {
                    break;
                }
            }
            let w = crate::linalg::inv_sqrt_sym(&dist.xi).expect("Xi positive definite");
            match policy {
                DisturbancePolicy::Uniform => &w * u * dist.d_max,
                _ => {
                    let dir = u.normalize();
                    &w * dir * dist.d_max
                }
            }
        }
    }
}

/// One step of a closed-loop record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub d: DVector<f64>,
    pub tau: usize,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub z0: DVector<f64>,
    pub v0: DVector<f64>,
    pub s0: f64,
    /// One-step-ahead nominal state and tube size of the solved problem.
    pub z1: DVector<f64>,
    pub s1: f64,
    pub status: SolveStatus,
    pub cost: f64,
    /// Worst shifted-candidate constraint value before solving (t >= 1).
    pub candidate_violation: Option<f64>,
    /// Full predicted trajectory, kept at selected times only.
    pub predicted: Option<PredictedTrajectory>,
}

/// Full predicted trajectory at one time step.
#[derive(Debug, Clone)]
pub struct PredictedTrajectory {
    pub z_bar: Vec<DVector<f64>>,
    pub v_bar: Vec<DVector<f64>>,
    pub s_seq: Vec<f64>,
}

/// Time-indexed closed-loop record.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub records: Vec<StepRecord>,
    /// State after the last recorded step (absent on imported traces).
    pub x_final: Option<DVector<f64>>,
    pub n_x: usize,
    pub n_u: usize,
    pub n_d: usize,
    pub n_w: usize,
}

impl SimTrace {
    /// Worst realized constraint value `max_i (F_i [x; u] - f_i)` over the
    /// trace; nonpositive means every constraint held.
    pub fn max_constraint_violation(&self, cons: &ConstraintSet) -> f64 {
        self.records
            .iter()
            .map(|r| cons.max_violation(&r.x, &r.u))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_state_norm(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.x.norm())
            .fold(0.0f64, f64::max)
    }
}

/// Options of a closed-loop run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub n_steps: usize,
    pub seed: u64,
    pub policy: DisturbancePolicy,
    /// Times at which the full predicted trajectory is retained.
    pub record_predictions: Vec<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            n_steps: 50,
            seed: 0,
            policy: DisturbancePolicy::Uniform,
            record_predictions: vec![0],
        }
    }
}

/// Runs the closed loop of the true uncertain plant (delay uncertainty on
/// the `w` channel) under the given controller. Deterministic for fixed
/// seeds. Infeasibility at `t = 0` aborts the run; infeasibility later is
/// a hard error.
pub fn closed_loop_run(
    sys: &LinearSystem,
    unc: &DelayUncertainty,
    controller: &mut Controller,
    x0: &DVector<f64>,
    opts: &RunOptions,
) -> Result<SimTrace, SimError> {
    if sys.n_w() > 0 && sys.d_w.amax() != 0.0 {
        return Err(SimError::AlgebraicLoop);
    }
    let n_steps = opts.n_steps;
    let taus = unc.realize(n_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    let zero_w = DVector::zeros(sys.n_w());
    let mut y_hist: Vec<DVector<f64>> = vec![DVector::zeros(sys.n_y()); unc.tau_max];
    for t in 0..n_steps {
        let outcome = match controller.step(&x) {
            Ok(o) => o,
            Err(MpcError::InfeasibleAtStart { violation }) => {
                return Err(SimError::InfeasibleAtStart { violation })
            }
            Err(e) => return Err(SimError::Mpc(e)),
        };
        let d = sample_disturbance(opts.policy, &controller.cfg.dist, &mut rng);
        let y = sys.output(&x, &zero_w, &d, &outcome.u);
        y_hist.push(y.clone());
        let w = delay_operator(&y_hist, taus[t])?;
        let x_next = sys.step(&x, &w, &d, &outcome.u);
        let sol = &outcome.solution;
        records.push(StepRecord {
            t,
            x: x.clone(),
            u: outcome.u.clone(),
            d,
            tau: taus[t],
            w,
            y,
            z0: sol.z0.clone(),
            v0: sol.v_bar[0].clone(),
            s0: sol.s_seq[0],
            z1: sol.z_bar[1].clone(),
            s1: sol.s_seq[1],
            status: sol.status,
            cost: sol.cost,
            candidate_violation: outcome.diagnostics.candidate_violation,
            predicted: if opts.record_predictions.contains(&t) {
                Some(PredictedTrajectory {
                    z_bar: sol.z_bar.clone(),
                    v_bar: sol.v_bar.clone(),
                    s_seq: sol.s_seq.clone(),
                })
            } else {
                None
            },
        });
        x = x_next;
    }
    Ok(SimTrace {
        records,
        x_final: Some(x),
        n_x: sys.n_x(),
        n_u: sys.n_u(),
        n_d: sys.n_d(),
        n_w: sys.n_w(),
    })
}

/// Worst-case open-loop error oracle: enumerates every delay schedule and
/// disturbance-vertex sequence over the horizon, propagates the true error
/// recursion, and compares against the tube sizes driven by the same
/// nominal excitation.
#[derive(Debug, Clone)]
pub struct WorstErrorReport {
    /// `max ||e_k||^2_{P_e}` over all enumerated sequences, `k = 0..=h`.
    pub max_err_sq: Vec<f64>,
    /// Tube bound `s_k` from the recursion with the same excitation.
    pub s_bound: Vec<f64>,
    /// Steps at which the bound was violated (should be empty).
    pub violations: Vec<usize>,
    pub combinations: u64,
}

pub fn brute_force_worst_error(
    sys: &LinearSystem,
    k_gain: &DMatrix<f64>,
    tube: &TubeParams,
    dist: &DisturbanceModel,
    horizon: usize,
    delay_set: &[usize],
    d_vertices: &[DVector<f64>],
    y_bar: &[DVector<f64>],
) -> Result<WorstErrorReport, SimError> {
    if sys.d_w.amax() != 0.0 {
        return Err(SimError::AlgebraicLoop);
    }
    if y_bar.len() < horizon {
        return Err(SimError::Mpc(MpcError::InvalidConfig(
            "nominal excitation shorter than the horizon".into(),
        )));
    }
    let n_choices = (delay_set.len() as u128) * (d_vertices.len().max(1) as u128);
    let total = n_choices.pow(horizon as u32);
    if total > 20_000_000 {
        return Err(SimError::EnumerationBudget(total));
    }
    let tau_max = delay_set.iter().copied().max().unwrap_or(0);
    let a_k = &sys.a + &sys.b_u * k_gain;
    let c_k = &sys.c + &sys.d_u * k_gain;
    let n_vert = d_vertices.len().max(1);
    let zero_d = DVector::zeros(sys.n_d());

    // tube bound with the same nominal excitation, starting from e0 = 0
    let mut s_bound = vec![0.0f64; horizon + 1];
    for j in 0..horizon {
        s_bound[j + 1] = tube_predict(
            s_bound[j],
            tube.y_norm_sq(&y_bar[j]),
            tube,
            dist.d_max,
        );
    }

    let radix = delay_set.len() * n_vert;
    let mut max_err_sq = vec![0.0f64; horizon + 1];
    let mut combos = 0u64;
    let mut counter = vec![0usize; horizon];
    loop {
        combos += 1;
        let mut e = DVector::zeros(sys.n_x());
        let mut hist: Vec<DVector<f64>> = vec![DVector::zeros(sys.n_y()); tau_max];
        for (j, choice) in counter.iter().enumerate() {
            let tau = delay_set[choice % delay_set.len()];
            let d = if d_vertices.is_empty() {
                &zero_d
            } else {
                &d_vertices[choice / delay_set.len()]
            };
            let y = &c_k * &e + &sys.d_d * d + &y_bar[j];
            hist.push(y);
            let w = delay_operator(&hist, tau)?;
            e = &a_k * &e + &sys.b_w * &w + &sys.b_d * d;
            let err = tube.p_e.quadratic_form(&e);
            if err > max_err_sq[j + 1] {
                max_err_sq[j + 1] = err;
            }
        }
        // advance the mixed-radix counter
        let mut pos = 0;
        while pos < horizon {
            counter[pos] += 1;
            if counter[pos] < radix {
                break;
            }
            counter[pos] = 0;
            pos += 1;
        }
        if pos == horizon {
            break;
        }
    }

    let violations = (0..=horizon)
        .filter(|&j| max_err_sq[j] > s_bound[j] + 1e-12 * s_bound[j].max(1.0))
        .collect();
    Ok(WorstErrorReport {
        max_err_sq,
        s_bound,
        violations,
        combinations: combos,
    })
}

/// Outcome flags of the delay-ignorant baseline run.
#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub diverged: bool,
    pub stopped_at: Option<usize>,
    pub max_constraint_violation: f64,
}

/// Nominal MPC baseline: a delay-ignorant linear MPC with the Riccati cost
/// as terminal weight, the measured state as (fixed) nominal initial state,
/// no tube and no tightening. The plant still runs with the true delay.
#[allow(clippy::too_many_arguments)]
pub fn nominal_mpc_baseline(
    sys: &LinearSystem,
    q: &SymMatrix,
    r: &SymMatrix,
    horizon: usize,
    cons: &ConstraintSet,
    dist: &DisturbanceModel,
    x0: &DVector<f64>,
    unc: &DelayUncertainty,
    opts: &RunOptions,
) -> Result<(SimTrace, BaselineReport), SimError> {
    if sys.d_w.amax() != 0.0 {
        return Err(SimError::AlgebraicLoop);
    }
    let n_x = sys.n_x();
    let n_u = sys.n_u();
    let t_h = horizon;
    let (p_lqr, _) = solve_dare(&sys.a, &sys.b_u, q, r)?;

    // condensed maps: z_k = A^k x + G_k v
    let nv = t_h * n_u;
    let mut pow_a: Vec<DMatrix<f64>> = vec![DMatrix::identity(n_x, n_x)];
    for k in 0..t_h {
        pow_a.push(&sys.a * &pow_a[k]);
    }
    let mut g_maps: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n_x, nv)];
    for k in 0..t_h {
        let mut g = &sys.a * &g_maps[k];
        for col in 0..n_u {
            let bcol = sys.b_u.column(col).clone_owned();
            for rowi in 0..n_x {
                g[(rowi, k * n_u + col)] += bcol[rowi];
            }
        }
        g_maps.push(g);
    }
    let mut h_qp = DMatrix::zeros(nv, nv);
    let mut f_map = DMatrix::zeros(nv, n_x); // linear term = 2 f_map x
    for k in 0..t_h {
        h_qp += g_maps[k].transpose() * q.matrix() * &g_maps[k] * 2.0;
        f_map += g_maps[k].transpose() * q.matrix() * &pow_a[k] * 2.0;
        let mut u_sel = DMatrix::zeros(n_u, nv);
        u_sel
            .view_mut((0, k * n_u), (n_u, n_u))
            .copy_from(&DMatrix::identity(n_u, n_u));
        h_qp += u_sel.transpose() * r.matrix() * &u_sel * 2.0;
    }
    h_qp += g_maps[t_h].transpose() * p_lqr.matrix() * &g_maps[t_h] * 2.0;
    f_map += g_maps[t_h].transpose() * p_lqr.matrix() * &pow_a[t_h] * 2.0;
    let h_qp = SymMatrix::symmetrize(h_qp).into_matrix();

    // constraint rows F [z_k; v_k] <= f for k = 0..T-1
    let n_rows = cons.n_rows();
    let mut a_qp = DMatrix::zeros(t_h * n_rows, nv);
    let mut bx_map = DMatrix::zeros(t_h * n_rows, n_x);
    for k in 0..t_h {
        let mut stack = DMatrix::zeros(n_x + n_u, nv);
        stack.view_mut((0, 0), (n_x, nv)).copy_from(&g_maps[k]);
        stack
            .view_mut((n_x, k * n_u), (n_u, n_u))
            .copy_from(&DMatrix::identity(n_u, n_u));
        let mut xpart = DMatrix::zeros(n_x + n_u, n_x);
        xpart.view_mut((0, 0), (n_x, n_x)).copy_from(&pow_a[k]);
        a_qp
            .view_mut((k * n_rows, 0), (n_rows, nv))
            .copy_from(&(&cons.h_mat * &stack));
        bx_map
            .view_mut((k * n_rows, 0), (n_rows, n_x))
            .copy_from(&(&cons.h_mat * &xpart));
    }

    let taus = unc.realize(opts.n_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    let mut x = x0.clone();
    let zero_w = DVector::zeros(sys.n_w());
    let mut y_hist: Vec<DVector<f64>> = vec![DVector::zeros(sys.n_y()); unc.tau_max];
    let mut report = BaselineReport {
        diverged: false,
        stopped_at: None,
        max_constraint_violation: f64::NEG_INFINITY,
    };
    for t in 0..opts.n_steps {
        if x.norm() > 1e3 {
            report.diverged = true;
            report.stopped_at = Some(t);
            break;
        }
        let c_qp = &f_map * &x;
        let b_rows = DVector::from_fn(t_h * n_rows, |i, _| {
            cons.h_vec[i % n_rows] - (&bx_map * &x)[i]
        });
        let qp = solve_qp(
            &h_qp,
            &c_qp,
            &a_qp,
            &b_rows,
            None,
            &QpOptions {
                penalty: 1e8,
                ..Default::default()
            },
        )?;
        let u = qp.d.rows(0, n_u).clone_owned();
        let d = sample_disturbance(opts.policy, dist, &mut rng);
        let y = sys.output(&x, &zero_w, &d, &u);
        y_hist.push(y.clone());
        let w = delay_operator(&y_hist, taus[t])?;
        let x_next = sys.step(&x, &w, &d, &u);
        let z1 = &sys.a * &x + &sys.b_u * &u;
        let viol = cons.max_violation(&x, &u);
        report.max_constraint_violation = report.max_constraint_violation.max(viol);
        records.push(StepRecord {
            t,
            x: x.clone(),
            u: u.clone(),
            d,
            tau: taus[t],
            w,
            y,
            z0: x.clone(),
            v0: u,
            s0: 0.0,
            z1,
            s1: 0.0,
            status: if qp.max_relaxation() > 1e-6 {
                SolveStatus::Infeasible
            } else {
                SolveStatus::Optimal
            },
            cost: f64::NAN,
            candidate_violation: None,
            predicted: None,
        });
        x = x_next;
    }
    Ok((
        SimTrace {
            records,
            x_final: Some(x),
            n_x,
            n_u,
            n_d: sys.n_d(),
            n_w: sys.n_w(),
        },
        report,
    ))
}

fn scalar_or_indexed(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }
}

fn trace_header(trace: &SimTrace) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=trace.n_x).map(|i| format!("x{i}")));
    cols.extend(scalar_or_indexed("u", trace.n_u));
    if trace.n_d > 0 {
        cols.extend(scalar_or_indexed("d", trace.n_d));
    }
    cols.push("tau".into());
    if trace.n_w > 0 {
        cols.extend(scalar_or_indexed("w", trace.n_w));
    }
    cols.push("s0".into());
    cols.extend((1..=trace.n_x).map(|i| format!("z0{i}")));
    if trace.n_u == 1 {
        cols.push("v0".into());
    } else {
        cols.extend((1..=trace.n_u).map(|i| format!("v0{i}")));
    }
    cols.push("status".into());
    cols.push("cost".into());
    cols
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the trace as CSV with a documented header:
/// `t, x1.., u(.., ) d.., tau, w.., s0, z01.., v0.., status, cost`,
/// floats at 17 significant digits so numeric fields round-trip exactly.
pub fn export_trace(trace: &SimTrace, path: &Path) -> Result<(), SimError> {
    let mut out = String::new();
    let header = trace_header(trace);
    out.push_str(&header.join(","));
    out.push('\n');
    for rec in &trace.records {
        let mut fields: Vec<String> = vec![rec.t.to_string()];
        fields.extend(rec.x.iter().map(|v| fmt_float(*v)));
        fields.extend(rec.u.iter().map(|v| fmt_float(*v)));
        if trace.n_d > 0 {
            fields.extend(rec.d.iter().map(|v| fmt_float(*v)));
        }
        fields.push(rec.tau.to_string());
        if trace.n_w > 0 {
            fields.extend(rec.w.iter().map(|v| fmt_float(*v)));
        }
        fields.push(fmt_float(rec.s0));
        fields.extend(rec.z0.iter().map(|v| fmt_float(*v)));
        fields.extend(rec.v0.iter().map(|v| fmt_float(*v)));
        fields.push(rec.status.to_string());
        fields.push(fmt_float(rec.cost));
        let mut line = String::new();
        write!(line, "{}", fields.join(",")).unwrap();
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a trace back. Only the CSV fields are recovered; predictions and
/// the final state are absent.
pub fn import_trace(path: &Path) -> Result<SimTrace, SimError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SimError::Parse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_x = cols.iter().filter(|c| c.starts_with('x') && c[1..].parse::<usize>().is_ok()).count();
    let n_u = cols
        .iter()
        .filter(|c| **c == "u" || (c.starts_with('u') && c[1..].parse::<usize>().is_ok()))
        .count();
    let n_d = cols
        .iter()
        .filter(|c| **c == "d" || (c.starts_with('d') && c[1..].parse::<usize>().is_ok()))
        .count();
    let n_w = cols
        .iter()
        .filter(|c| **c == "w" || (c.starts_with('w') && c[1..].parse::<usize>().is_ok()))
        .count();
    let expect = 1 + n_x + n_u + n_d + 1 + n_w + 1 + n_x + n_u + 2;
    if cols.len() != expect {
        return Err(SimError::Parse {
            line: 1,
            reason: format!("header has {} columns, expected {}", cols.len(), expect),
        });
    }
    struct Cursor<'a> {
        fields: Vec<&'a str>,
        pos: usize,
        line: usize,
    }
    impl<'a> Cursor<'a> {
        fn next(&mut self) -> &'a str {
            let f = self.fields[self.pos];
            self.pos += 1;
            f
        }
        fn float(&mut self) -> Result<f64, SimError> {
            let s = self.next();
            s.parse::<f64>().map_err(|e| SimError::Parse {
                line: self.line,
                reason: format!("bad float '{s}': {e}"),
            })
        }
        fn index(&mut self) -> Result<usize, SimError> {
            let s = self.next();
            s.parse::<usize>().map_err(|e| SimError::Parse {
                line: self.line,
                reason: format!("bad index '{s}': {e}"),
            })
        }
        fn vector(&mut self, n: usize) -> Result<DVector<f64>, SimError> {
            let mut v = DVector::zeros(n);
            for i in 0..n {
                v[i] = self.float()?;
            }
            Ok(v)
        }
    }

    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expect {
            return Err(SimError::Parse {
                line: lineno + 1,
                reason: format!("row has {} fields, expected {}", fields.len(), expect),
            });
        }
        let mut cur = Cursor {
            fields,
            pos: 0,
            line: lineno + 1,
        };
        let t = cur.index()?;
        let x = cur.vector(n_x)?;
        let u = cur.vector(n_u)?;
        let d = cur.vector(n_d)?;
        let tau = cur.index()?;
        let w = cur.vector(n_w)?;
        let s0 = cur.float()?;
        let z0 = cur.vector(n_x)?;
        let v0 = cur.vector(n_u)?;
        let status = match cur.next() {
            "optimal" => SolveStatus::Optimal,
            "suboptimal" => SolveStatus::FeasibleSuboptimal,
            "infeasible" => SolveStatus::Infeasible,
            other => {
                return Err(SimError::Parse {
                    line: lineno + 1,
                    reason: format!("unknown status '{other}'"),
                })
            }
        };
        let cost = cur.float()?;
        let y = DVector::zeros(0);
        records.push(StepRecord {
            t,
            x,
            u,
            d,
            tau,
            w,
            y,
            z0,
            v0,
            s0,
            z1: DVector::zeros(n_x),
            s1: f64::NAN,
            status,
            cost,
            candidate_violation: None,
            predicted: None,
        });
    }
    Ok(SimTrace {
        records,
        x_final: None,
        n_x,
        n_u,
        n_d,
        n_w,
    })
}

/// Replay check: every transition recomputes exactly from the logged
/// inputs, and the logged `w` matches the delay operator applied to the
/// reconstructed output history.
#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub max_state_deviation: f64,
    pub max_w_deviation: f64,
    pub transitions_checked: usize,
}

pub fn verify_replay(trace: &SimTrace, sys: &LinearSystem) -> Result<ReplayReport, SimError> {
    if sys.d_w.amax() != 0.0 {
        return Err(SimError::AlgebraicLoop);
    }
    let tau_max = trace.records.iter().map(|r| r.tau).max().unwrap_or(0);
    let zero_w = DVector::zeros(sys.n_w());
    let mut y_hist: Vec<DVector<f64>> = vec![DVector::zeros(sys.n_y()); tau_max];
    let mut max_state_dev = 0.0f64;
    let mut max_w_dev = 0.0f64;
    let mut transitions = 0usize;
    for (i, rec) in trace.records.iter().enumerate() {
        let y = sys.output(&rec.x, &zero_w, &rec.d, &rec.u);
        y_hist.push(y);
        let w_replay = delay_operator(&y_hist, rec.tau)?;
        max_w_dev = max_w_dev.max((w_replay - &rec.w).amax());
        let x_next = sys.step(&rec.x, &rec.w, &rec.d, &rec.u);
        let x_ref = trace
            .records
            .get(i + 1)
            .map(|r| r.x.clone())
            .or_else(|| trace.x_final.clone());
        if let Some(xr) = x_ref {
            max_state_dev = max_state_dev.max((x_next - xr).amax());
            transitions += 1;
        }
    }
    Ok(ReplayReport {
        max_state_deviation: max_state_dev,
        max_w_deviation: max_w_dev,
        transitions_checked: transitions,
    })
}
