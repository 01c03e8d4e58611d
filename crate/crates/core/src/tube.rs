//! Online tube machinery: the constraint-tightening vector, the tube-size
//! recursions (open-loop prediction and measurement update), the exact
//! filter-state variant, and containment verification of simulated runs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{inv_sqrt_sym, LinalgError, SymMatrix};
use crate::model::ConstraintSet;
use crate::sim::SimTrace;
use crate::synthesis::TubeParams;

/// Absolute slack treated as floating-point dust when the measurement
/// update takes the square root of `s1 - ||e1||^2`.
const CONTAINMENT_DUST: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TubeError {
    #[error("tube shape matrix is not positive definite")]
    NotPositiveDefinite,
    #[error(
        "containment broken: previous tube size {s1:.6e} is below the error bound {e_norm_sq:.6e}"
    )]
    ContainmentBroken { s1: f64, e_norm_sq: f64 },
    #[error("exact update requires a known filter state")]
    UnsupportedMode,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One node of the tube: the scalar size together with the error and
/// filter state when they are known.
#[derive(Debug, Clone)]
pub struct TubeState {
    pub s: f64,
    pub e: Option<DVector<f64>>,
    pub psi: Option<DVector<f64>>,
}

/// Per-row tightening `c_i = || P_e^{-1/2} [I K']' F_i' ||`, the amount by
/// which row `i` must back off per unit of tube radius.
pub fn tighten_vector(
    p_e: &SymMatrix,
    k: &DMatrix<f64>,
    cons: &ConstraintSet,
) -> Result<DVector<f64>, TubeError> {
    let n_x = p_e.dim();
    let n_u = k.nrows();
    if k.ncols() != n_x {
        return Err(TubeError::DimensionMismatch(format!(
            "gain has {} columns, expected {}",
            k.ncols(),
            n_x
        )));
    }
    if cons.h_mat.ncols() != n_x + n_u {
        return Err(TubeError::DimensionMismatch(format!(
            "constraint rows have width {}, expected {}",
            cons.h_mat.ncols(),
            n_x + n_u
        )));
    }
    let w = inv_sqrt_sym(p_e).map_err(|e| match e {
        LinalgError::NotPositiveDefinite => TubeError::NotPositiveDefinite,
        other => TubeError::Linalg(other),
    })?;
    // stacked [I; K]
    let mut ik = DMatrix::zeros(n_x + n_u, n_x);
    ik.view_mut((0, 0), (n_x, n_x))
        .copy_from(&DMatrix::identity(n_x, n_x));
    ik.view_mut((n_x, 0), (n_u, n_x)).copy_from(k);
    let mut c = DVector::zeros(cons.n_rows());
    for i in 0..cons.n_rows() {
        let fi = cons.h_mat.row(i).transpose();
        let v = &w * (ik.transpose() * fi);
        c[i] = v.norm();
    }
    Ok(c)
}

/// Open-loop tube propagation `s+ = rho^2 s + gamma d_max^2 + ||ybar||^2_Gamma`.
/// The caller supplies the weighted nominal excitation `||ybar||^2_Gamma`.
pub fn tube_predict(s: f64, y_bar_norm_sq_gamma: f64, tp: &TubeParams, d_max: f64) -> f64 {
    tp.rho * tp.rho * s + tp.gamma * d_max * d_max + y_bar_norm_sq_gamma
}

/// Measurement update of the tube size when the nominal initial state is
/// re-optimized: with `e0` the new error, `e1` the previous one-step error
/// and `s1` the previous tube size,
///
/// ```text
/// s0 = s1 + ||e0||^2_Pe - ||e1||^2_Pe + ||e0-e1||^2_Pdiff
///        + 2 ||e0-e1||_Pdiff sqrt(s1 - ||e1||^2_Pe)
/// ```
pub fn tube_measurement_update(
    s1: f64,
    e1: &DVector<f64>,
    e0: &DVector<f64>,
    tp: &TubeParams,
) -> Result<f64, TubeError> {
    let n_x = tp.p_e.dim();
    if e0.len() != n_x || e1.len() != n_x {
        return Err(TubeError::DimensionMismatch(
            "error vectors must match the state dimension".into(),
        ));
    }
    let e1_norm_sq = tp.p_e.quadratic_form(e1);
    let gap = s1 - e1_norm_sq;
    let dust = CONTAINMENT_DUST * s1.abs().max(1.0);
    if gap < -dust {
        return Err(TubeError::ContainmentBroken {
            s1,
            e_norm_sq: e1_norm_sq,
        });
    }
    let gap = gap.max(0.0);
    let diff = e0 - e1;
    let diff_norm_sq = tp.p_diff.quadratic_form(&diff).max(0.0);
    let diff_norm = diff_norm_sq.sqrt();
    Ok(s1 + tp.p_e.quadratic_form(e0) - e1_norm_sq + diff_norm_sq + 2.0 * diff_norm * gap.sqrt())
}

/// Tighter measurement update available when the filter state is known:
/// `c0 = c1 + ||[e0; psi]||^2_P - ||[e1; psi]||^2_P`.
pub fn exact_update(
    c1: f64,
    e1: &DVector<f64>,
    psi1: Option<&DVector<f64>>,
    e0: &DVector<f64>,
    tp: &TubeParams,
) -> Result<f64, TubeError> {
    let psi = psi1.ok_or(TubeError::UnsupportedMode)?;
    let n_x = tp.p_e.dim();
    let n_psi = tp.p.dim() - n_x;
    if e0.len() != n_x || e1.len() != n_x || psi.len() != n_psi {
        return Err(TubeError::DimensionMismatch(
            "error or filter-state vectors have wrong length".into(),
        ));
    }
    let stack = |e: &DVector<f64>| {
        let mut v = DVector::zeros(n_x + n_psi);
        v.rows_mut(0, n_x).copy_from(e);
        v.rows_mut(n_x, n_psi).copy_from(psi);
        v
    };
    Ok(c1 + tp.p.quadratic_form(&stack(e0)) - tp.p.quadratic_form(&stack(e1)))
}

/// A single containment violation found in a trace.
#[derive(Debug, Clone)]
pub struct ContainmentViolation {
    /// Time the bound was predicted.
    pub t: usize,
    /// Prediction offset (0: re-optimized bound, 1: one-step-ahead bound).
    pub k: usize,
    pub error_norm_sq: f64,
    pub tube_size: f64,
    /// `tube_size - error_norm_sq`, negative for a violation.
    pub slack: f64,
}

/// Containment report over a closed-loop trace.
#[derive(Debug, Clone)]
pub struct ContainmentReport {
    pub violations: Vec<ContainmentViolation>,
    pub min_slack: f64,
    pub checks: usize,
}

impl ContainmentReport {
    pub fn certified(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `||e_{k|t}||^2_{P_e} <= s_{k|t}` along a closed-loop trace for
/// the re-optimized bound (`k = 0`) at every step and the one-step-ahead
/// bound (`k = 1`) across consecutive steps.
pub fn verify_containment(trace: &SimTrace, tp: &TubeParams) -> ContainmentReport {
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut checks = 0;
    let tol = CONTAINMENT_DUST;
    let mut push = |t: usize, k: usize, err: f64, s: f64| {
        let slack = s - err;
        if slack < min_slack {
            min_slack = slack;
        }
        if slack < -tol * s.abs().max(1.0) {
            violations.push(ContainmentViolation {
                t,
                k,
                error_norm_sq: err,
                tube_size: s,
                slack,
            });
        }
    };
    for (idx, rec) in trace.records.iter().enumerate() {
        let e0 = &rec.x - &rec.z0;
        push(rec.t, 0, tp.p_e.quadratic_form(&e0), rec.s0);
        checks += 1;
        let x_next = trace
            .records
            .get(idx + 1)
            .map(|r| r.x.clone())
            .or_else(|| trace.x_final.clone());
        if let Some(xn) = x_next {
            let e1 = &xn - &rec.z1;
            push(rec.t, 1, tp.p_e.quadratic_form(&e1), rec.s1);
            checks += 1;
        }
    }
    ContainmentReport {
        violations,
        min_slack,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_from_p(p: SymMatrix, rho: f64) -> TubeParams {
        let n_x = 2;
        let (p_e, p_diff) = crate::linalg::schur_reduce(&p, n_x).unwrap();
        TubeParams {
            rho,
            p,
            p_e,
            p_diff,
            gamma: 244.0,
            gamma_mat: SymMatrix::from_diagonal(&[244.0]),
            k: DMatrix::from_row_slice(1, 2, &[0.18, -0.35]),
            c: DVector::zeros(1),
        }
    }

    fn reference_p() -> SymMatrix {
        SymMatrix::from_rows(&[
            &[5.9, -8.1, -4.15, -11.7],
            &[-8.1, 15.7, 6.0, 22.2],
            &[-4.15, 6.0, 40.2, -17.0],
            &[-11.7, 22.2, -17.0, 81.7],
        ])
        .unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrize(&raw * raw.transpose() + DMatrix::identity(n, n) * 0.3)
    }

    #[test]
    fn tightening_reference_rows() {
        // input-only row with K = 0 backs off by zero
        let p_e = SymMatrix::identity(2);
        let k0 = DMatrix::zeros(1, 2);
        let cons = ConstraintSet::new(
            DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
            DVector::from_row_slice(&[1.0, 1.0]),
        )
        .unwrap();
        let c = tighten_vector(&p_e, &k0, &cons).unwrap();
        assert_eq!(c[0], 0.0);
        assert_relative_eq!(c[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn tightening_matches_sampled_maximum() {
        // c_i equals the maximum of F_i [e; K e] over the P_e unit ball,
        // attained at the analytic maximizer direction
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p_e = random_spd(&mut rng, 2);
        let k = DMatrix::from_row_slice(1, 2, &[0.18, -0.35]);
        let cons = ConstraintSet::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.3, -0.2, 0.7]),
            DVector::from_row_slice(&[1.0, 1.0]),
        )
        .unwrap();
        let c = tighten_vector(&p_e, &k, &cons).unwrap();
        let w = inv_sqrt_sym(&p_e).unwrap();
        for i in 0..2 {
            let fi = cons.h_mat.row(i).clone_owned();
            let row_val = |e: &DVector<f64>| {
                let u = &k * e;
                fi[0] * e[0] + fi[1] * e[1] + fi[2] * u[0]
            };
            // analytic maximizer: e* = P_e^{-1/2} v / ||v||, v = P_e^{-1/2}(F_i [I;K])'
            let mut ik = DMatrix::zeros(3, 2);
            ik[(0, 0)] = 1.0;
            ik[(1, 1)] = 1.0;
            ik.view_mut((2, 0), (1, 2)).copy_from(&k);
            let v = &w * (ik.transpose() * fi.transpose());
            if v.norm() > 0.0 {
                let e_star = &w * (&v / v.norm());
                assert_relative_eq!(row_val(&e_star), c[i], epsilon = 1e-8);
            }
            // random boundary samples never exceed c_i
            for _ in 0..200 {
                let raw = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                if raw.norm() < 1e-9 {
                    continue;
                }
                let e = &w * (&raw / raw.norm());
                assert!(row_val(&e) <= c[i] + 1e-9);
            }
        }
    }

    #[test]
    fn predict_basics() {
        let tp = params_from_p(reference_p(), 0.95);
        assert_eq!(tube_predict(0.0, 0.0, &tp, 0.0), 0.0);
        assert_relative_eq!(tube_predict(1.0, 0.0, &tp, 0.0), 0.9025, epsilon = 1e-12);
        // worked-example magnitudes: rho=0.95, gamma=244, d_max=0.001, ybar=0.05
        let y = DVector::from_row_slice(&[0.05]);
        let yn = tp.gamma_mat.quadratic_form(&y);
        let s_next = tube_predict(1.0, yn, &tp, 0.001);
        assert_relative_eq!(s_next, 0.9025 + 0.000244 + 0.61, epsilon = 1e-12);
        // monotone in each argument
        assert!(tube_predict(2.0, yn, &tp, 0.001) > s_next);
        assert!(tube_predict(1.0, yn * 1.1, &tp, 0.001) > s_next);
        assert!(tube_predict(1.0, yn, &tp, 0.002) > s_next);
    }

    #[test]
    fn measurement_update_fixed_points() {
        let tp = params_from_p(reference_p(), 0.95);
        let e = DVector::from_row_slice(&[0.05, -0.02]);
        let s1 = tp.p_e.quadratic_form(&e) + 0.3;
        // e0 = e1 leaves the tube size unchanged
        let s0 = tube_measurement_update(s1, &e, &e, &tp).unwrap();
        assert_relative_eq!(s0, s1, epsilon = 1e-12);
        // containment precondition
        assert!(matches!(
            tube_measurement_update(0.0, &e, &e, &tp),
            Err(TubeError::ContainmentBroken { .. })
        ));
    }

    #[test]
    fn measurement_update_block_diagonal() {
        // P21 = 0: s0 = s1 + ||e0||^2_P11 - ||e1||^2_P11
        let p = SymMatrix::from_rows(&[
            &[2.0, 0.3, 0.0, 0.0],
            &[0.3, 1.5, 0.0, 0.0],
            &[0.0, 0.0, 4.0, 0.0],
            &[0.0, 0.0, 0.0, 4.0],
        ])
        .unwrap();
        let tp = params_from_p(p, 0.9);
        let e1 = DVector::from_row_slice(&[0.1, 0.0]);
        let e0 = DVector::from_row_slice(&[0.0, 0.2]);
        let s1 = 1.0;
        let s0 = tube_measurement_update(s1, &e1, &e0, &tp).unwrap();
        let expect = s1 + tp.p_e.quadratic_form(&e0) - tp.p_e.quadratic_form(&e1);
        assert_relative_eq!(s0, expect, epsilon = 1e-12);
    }

    /// Grid oracle for the measurement update: maximize the tube-size
    /// increment over all filter states consistent with the previous bound,
    /// directly on the boundary ellipse.
    fn grid_max_increment(
        p: &SymMatrix,
        e1: &DVector<f64>,
        e0: &DVector<f64>,
        s1: f64,
        grid: usize,
    ) -> f64 {
        let p11 = SymMatrix::symmetrize(p.matrix().view((0, 0), (2, 2)).clone_owned());
        let p21 = p.matrix().view((2, 0), (2, 2)).clone_owned();
        let p22 = SymMatrix::symmetrize(p.matrix().view((2, 2), (2, 2)).clone_owned());
        let e22 = sym_eig(&p22).unwrap();
        let mut d = DMatrix::zeros(2, 2);
        for i in 0..2 {
            d[(i, i)] = 1.0 / e22.values[i].sqrt();
        }
        let l = &e22.vectors * d * e22.vectors.transpose(); // P22^{-1/2}
        let p22_inv = &l * &l;
        let center = -(&p22_inv * (&p21 * e1));
        let pe_e1 = {
            let t = &p21 * e1;
            p11.quadratic_form(e1) - (t.transpose() * &p22_inv * &t)[(0, 0)]
        };
        let radius = (s1 - pe_e1).max(0.0).sqrt();
        let full = |e: &DVector<f64>, psi: &DVector<f64>| {
            let mut v = DVector::zeros(4);
            v.rows_mut(0, 2).copy_from(e);
            v.rows_mut(2, 2).copy_from(psi);
            p.quadratic_form(&v)
        };
        let mut best = f64::NEG_INFINITY;
        for g in 0..grid {
            let th = 2.0 * std::f64::consts::PI * (g as f64) / (grid as f64);
            let dir = DVector::from_row_slice(&[th.cos(), th.sin()]);
            let psi = &center + &l * (dir * radius);
            let val = full(e0, &psi) - full(e1, &psi);
            if val > best {
                best = val;
            }
        }
        best
    }

    #[test]
    fn measurement_update_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_spd(&mut rng, 4);
            let tp = params_from_p(p.clone(), 0.95);
            let e1 = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let e0 = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let s1 = tp.p_e.quadratic_form(&e1) + rng.random_range(0.01..1.0);
            let s0 = tube_measurement_update(s1, &e1, &e0, &tp).unwrap();
            let inc = grid_max_increment(&p, &e1, &e0, s1, 20001);
            assert!(
                (s0 - s1 - inc).abs() <= 1e-6 * (1.0 + inc.abs()),
                "closed form {} vs grid {}",
                s0 - s1,
                inc
            );
        }
    }

    #[test]
    fn exact_update_dominated_by_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tested = 0;
        while tested < 2000 {
            let p = random_spd(&mut rng, 4);
            let tp = params_from_p(p.clone(), 0.95);
            let e1 = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let e0 = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let s1 = tp.p_e.quadratic_form(&e1) + rng.random_range(0.01..1.0);
            // sample a filter state consistent with ||[e1; psi]||_P^2 <= s1
            let psi = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let mut v = DVector::zeros(4);
            v.rows_mut(0, 2).copy_from(&e1);
            v.rows_mut(2, 2).copy_from(&psi);
            if tp.p.quadratic_form(&v) > s1 {
                continue;
            }
            tested += 1;
            let c0 = exact_update(s1, &e1, Some(&psi), &e0, &tp).unwrap();
            let s0 = tube_measurement_update(s1, &e1, &e0, &tp).unwrap();
            assert!(c0 <= s0 + 1e-9, "exact {c0} > general {s0}");
        }
        // e0 = e1 keeps the exact bound unchanged, psi = 0 reduces to P11
        let tp = params_from_p(reference_p(), 0.95);
        let e = DVector::from_row_slice(&[0.1, 0.0]);
        let psi0 = DVector::zeros(2);
        let c0 = exact_update(2.0, &e, Some(&psi0), &e, &tp).unwrap();
        assert_relative_eq!(c0, 2.0, epsilon = 1e-14);
        assert!(matches!(
            exact_update(2.0, &e, None, &e, &tp),
            Err(TubeError::UnsupportedMode)
        ));
    }
}
