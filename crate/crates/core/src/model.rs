//! Data model for the plant, the uncertainty channel, the IQC filter and
//! multiplier, plus the input-delay uncertainty used by the worked example:
//! the delay operator itself, its shift/difference filter and the family of
//! admissible multipliers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{definiteness, Definiteness, LinalgError, SymMatrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("delay {tau} outside the admissible range [0, {tau_max}]")]
    TauOutOfRange { tau: usize, tau_max: usize },
    #[error("fixed delay schedule has {have} entries, {need} required")]
    ScheduleTooShort { have: usize, need: usize },
    #[error("matrix must be positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Discrete-time plant
/// `x+ = A x + B_w w + B_d d + B_u u`, `y = C x + D_w w + D_d d + D_u u`,
/// where `w` is the uncertainty channel output, `d` an ellipsoid-bounded
/// disturbance and `y` the signal entering the uncertainty.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_w: DMatrix<f64>,
    pub d_d: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
}

impl LinearSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b_w: DMatrix<f64>,
        b_d: DMatrix<f64>,
        b_u: DMatrix<f64>,
        c: DMatrix<f64>,
        d_w: DMatrix<f64>,
        d_d: DMatrix<f64>,
        d_u: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n_x = a.nrows();
        if a.ncols() != n_x {
            return Err(ModelError::DimensionMismatch("A must be square".into()));
        }
        let n_y = c.nrows();
        if c.ncols() != n_x {
            return Err(ModelError::DimensionMismatch(
                "C must have as many columns as states".into(),
            ));
        }
        let pairs = [
            ("B_w/D_w", b_w.ncols(), d_w.ncols()),
            ("B_d/D_d", b_d.ncols(), d_d.ncols()),
            ("B_u/D_u", b_u.ncols(), d_u.ncols()),
        ];
        for (name, bc, dc) in pairs {
            if bc != dc {
                return Err(ModelError::DimensionMismatch(format!(
                    "{name} column counts disagree ({bc} vs {dc})"
                )));
            }
        }
        for (name, m, rows) in [
            ("B_w", &b_w, n_x),
            ("B_d", &b_d, n_x),
            ("B_u", &b_u, n_x),
            ("D_w", &d_w, n_y),
            ("D_d", &d_d, n_y),
            ("D_u", &d_u, n_y),
        ] {
            if m.nrows() != rows {
                return Err(ModelError::DimensionMismatch(format!(
                    "{name} must have {rows} rows, got {}",
                    m.nrows()
                )));
            }
        }
        Ok(Self {
            a,
            b_w,
            b_d,
            b_u,
            c,
            d_w,
            d_d,
            d_u,
        })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }
    pub fn n_d(&self) -> usize {
        self.b_d.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// One plant step `A x + B_w w + B_d d + B_u u`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        d: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a * x + &self.b_w * w + &self.b_d * d + &self.b_u * u
    }

    /// Plant output `C x + D_w w + D_d d + D_u u`.
    pub fn output(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        d: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        &self.c * x + &self.d_w * w + &self.d_d * d + &self.d_u * u
    }
}

/// Ellipsoidal disturbance bound `||d||_Xi <= d_max` with `Xi` positive
/// definite.
#[derive(Debug, Clone)]
pub struct DisturbanceModel {
    pub xi: SymMatrix,
    pub d_max: f64,
}

impl DisturbanceModel {
    pub fn new(xi: SymMatrix, d_max: f64) -> Result<Self, ModelError> {
        if d_max < 0.0 {
            return Err(ModelError::InvalidArgument(
                "d_max must be nonnegative".into(),
            ));
        }
        if xi.dim() > 0 && !matches!(definiteness(&xi, 0.0)?, Definiteness::PositiveDefinite) {
            return Err(ModelError::NotPositiveDefinite("Xi".into()));
        }
        Ok(Self { xi, d_max })
    }

    pub fn n_d(&self) -> usize {
        self.xi.dim()
    }

    pub fn norm_sq(&self, d: &DVector<f64>) -> f64 {
        self.xi.quadratic_form(d)
    }
}

/// State-space realization of the IQC filter driven by `(y, w)`:
/// `psi+ = A_psi psi + B_psi1 y + B_psi2 w`,
/// `z = C_psi psi + D_psi1 y + D_psi2 w`, initialized with `psi_0 = 0`.
#[derive(Debug, Clone)]
pub struct IqcFilter {
    pub a_psi: DMatrix<f64>,
    pub b_psi1: DMatrix<f64>,
    pub b_psi2: DMatrix<f64>,
    pub c_psi: DMatrix<f64>,
    pub d_psi1: DMatrix<f64>,
    pub d_psi2: DMatrix<f64>,
}

impl IqcFilter {
    pub fn new(
        a_psi: DMatrix<f64>,
        b_psi1: DMatrix<f64>,
        b_psi2: DMatrix<f64>,
        c_psi: DMatrix<f64>,
        d_psi1: DMatrix<f64>,
        d_psi2: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n_psi = a_psi.nrows();
        let n_z = c_psi.nrows();
        if a_psi.ncols() != n_psi {
            return Err(ModelError::DimensionMismatch("A_psi must be square".into()));
        }
        if b_psi1.nrows() != n_psi || b_psi2.nrows() != n_psi {
            return Err(ModelError::DimensionMismatch(
                "filter input matrices must match the filter state dimension".into(),
            ));
        }
        if c_psi.ncols() != n_psi {
            return Err(ModelError::DimensionMismatch(
                "C_psi must have one column per filter state".into(),
            ));
        }
        if d_psi1.nrows() != n_z || d_psi2.nrows() != n_z {
            return Err(ModelError::DimensionMismatch(
                "filter feedthrough rows must match the output dimension".into(),
            ));
        }
        if d_psi1.ncols() != b_psi1.ncols() || d_psi2.ncols() != b_psi2.ncols() {
            return Err(ModelError::DimensionMismatch(
                "filter input widths disagree between state and output maps".into(),
            ));
        }
        Ok(Self {
            a_psi,
            b_psi1,
            b_psi2,
            c_psi,
            d_psi1,
            d_psi2,
        })
    }

    /// Degenerate static filter with no state, `z = D_psi1 y + D_psi2 w`.
    pub fn static_filter(d_psi1: DMatrix<f64>, d_psi2: DMatrix<f64>) -> Result<Self, ModelError> {
        let n_z = d_psi1.nrows();
        Self::new(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, d_psi1.ncols()),
            DMatrix::zeros(0, d_psi2.ncols()),
            DMatrix::zeros(n_z, 0),
            d_psi1,
            d_psi2,
        )
    }

    pub fn n_psi(&self) -> usize {
        self.a_psi.nrows()
    }
    pub fn n_z(&self) -> usize {
        self.c_psi.nrows()
    }
    pub fn n_y(&self) -> usize {
        self.b_psi1.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_psi2.ncols()
    }

    /// One filter step; returns `(psi_next, z)`.
    pub fn step(
        &self,
        psi: &DVector<f64>,
        y: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
        if psi.len() != self.n_psi() || y.len() != self.n_y() || w.len() != self.n_w() {
            return Err(ModelError::DimensionMismatch(format!(
                "filter step got psi/y/w of lengths {}/{}/{}, expected {}/{}/{}",
                psi.len(),
                y.len(),
                w.len(),
                self.n_psi(),
                self.n_y(),
                self.n_w()
            )));
        }
        let psi_next = &self.a_psi * psi + &self.b_psi1 * y + &self.b_psi2 * w;
        let z = &self.c_psi * psi + &self.d_psi1 * y + &self.d_psi2 * w;
        Ok((psi_next, z))
    }
}

/// The symmetric matrix weighting the filter output in the IQC sum.
#[derive(Debug, Clone)]
pub struct Multiplier {
    pub m: SymMatrix,
}

impl Multiplier {
    pub fn new(m: SymMatrix) -> Self {
        Self { m }
    }
}

/// Polytopic state/input constraints `F [x; u] <= f`, row-wise.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self, ModelError> {
        if h_mat.nrows() == 0 {
            return Err(ModelError::InvalidArgument(
                "constraint set must have at least one row".into(),
            ));
        }
        if h_mat.nrows() != h_vec.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} constraint rows but {} bounds",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        Ok(Self { h_mat, h_vec })
    }

    pub fn n_rows(&self) -> usize {
        self.h_mat.nrows()
    }

    /// True when the origin lies strictly inside the constraint polytope.
    pub fn origin_interior(&self) -> bool {
        self.h_vec.iter().all(|f| *f > 0.0)
    }

    /// `F_i [x; u]` for row `i`.
    pub fn row_value(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..x.len() {
            acc += self.h_mat[(i, j)] * x[j];
        }
        for j in 0..u.len() {
            acc += self.h_mat[(i, x.len() + j)] * u[j];
        }
        acc
    }

    /// Worst signed violation `max_i (F_i [x;u] - f_i)`; nonpositive means
    /// feasible.
    pub fn max_violation(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (0..self.n_rows())
            .map(|i| self.row_value(i, x, u) - self.h_vec[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Augmented realization of the error interconnection with the filter
/// appended, the transfer from `w` to the filter output `z`.
#[derive(Debug, Clone)]
pub struct AugmentedRealization {
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub d_tilde: DMatrix<f64>,
    pub n_x: usize,
    pub n_psi: usize,
}

/// Assembles the augmented realization for the closed error loop
/// `A_K = A + B_u K`, `C_K = C + D_u K`:
///
/// ```text
/// a_tilde = [A_K        0    ]   b_tilde = [B_w              ]
///           [B_psi1 C_K A_psi]             [B_psi1 D_w + B_psi2]
/// c_tilde = [D_psi1 C_K C_psi]   d_tilde = D_psi1 D_w + D_psi2
/// ```
pub fn assemble_augmented(
    sys: &LinearSystem,
    k: &DMatrix<f64>,
    filt: &IqcFilter,
) -> Result<AugmentedRealization, ModelError> {
    let (n_x, n_u, n_w, n_y) = (sys.n_x(), sys.n_u(), sys.n_w(), sys.n_y());
    if k.nrows() != n_u || k.ncols() != n_x {
        return Err(ModelError::DimensionMismatch(format!(
            "feedback gain must be {}x{}, got {}x{}",
            n_u,
            n_x,
            k.nrows(),
            k.ncols()
        )));
    }
    if filt.n_y() != n_y || filt.n_w() != n_w {
        return Err(ModelError::DimensionMismatch(
            "filter input dimensions do not match the plant".into(),
        ));
    }
    let n_psi = filt.n_psi();
    let a_k = &sys.a + &sys.b_u * k;
    let c_k = &sys.c + &sys.d_u * k;

    let mut a_tilde = DMatrix::zeros(n_x + n_psi, n_x + n_psi);
    a_tilde.view_mut((0, 0), (n_x, n_x)).copy_from(&a_k);
    a_tilde
        .view_mut((n_x, 0), (n_psi, n_x))
        .copy_from(&(&filt.b_psi1 * &c_k));
    a_tilde
        .view_mut((n_x, n_x), (n_psi, n_psi))
        .copy_from(&filt.a_psi);

    let mut b_tilde = DMatrix::zeros(n_x + n_psi, n_w);
    b_tilde.view_mut((0, 0), (n_x, n_w)).copy_from(&sys.b_w);
    b_tilde
        .view_mut((n_x, 0), (n_psi, n_w))
        .copy_from(&(&filt.b_psi1 * &sys.d_w + &filt.b_psi2));

    let mut c_tilde = DMatrix::zeros(filt.n_z(), n_x + n_psi);
    c_tilde
        .view_mut((0, 0), (filt.n_z(), n_x))
        .copy_from(&(&filt.d_psi1 * &c_k));
    c_tilde
        .view_mut((0, n_x), (filt.n_z(), n_psi))
        .copy_from(&filt.c_psi);

    let d_tilde = &filt.d_psi1 * &sys.d_w + &filt.d_psi2;

    Ok(AugmentedRealization {
        a_tilde,
        b_tilde,
        c_tilde,
        d_tilde,
        n_x,
        n_psi,
    })
}

/// Family of admissible multipliers for the input-delay uncertainty: for
/// each delay `tau` the filter output satisfies `||z||^2_{M_tau(X)} = 0`,
/// where `M_tau(X) = diag(X_tau, -X)` and `X_tau = diag(0, 1_tau) (x) X`
/// with `1_tau` the all-ones block. Any `M` with `M >= M_tau(X)` for all
/// `tau` and some `X >= 0` certifies the IQC.
#[derive(Debug, Clone)]
pub struct DelayMultiplierFamily {
    pub tau_max: usize,
    pub n_y: usize,
}

impl DelayMultiplierFamily {
    /// Dimension of the filter output `z`.
    pub fn n_z(&self) -> usize {
        (self.tau_max + 1) * self.n_y
    }

    /// The member `M_tau(X)` for weight `x` (an `n_y` x `n_y` block).
    pub fn m_tau(&self, tau: usize, x: &SymMatrix) -> Result<SymMatrix, ModelError> {
        if tau > self.tau_max {
            return Err(ModelError::TauOutOfRange {
                tau,
                tau_max: self.tau_max,
            });
        }
        if x.dim() != self.n_y {
            return Err(ModelError::DimensionMismatch(format!(
                "weight block must be {0}x{0}",
                self.n_y
            )));
        }
        let nz = self.n_z();
        let ny = self.n_y;
        let mut m = DMatrix::zeros(nz, nz);
        // all-ones block over the last tau history slots
        for bi in (self.tau_max - tau)..self.tau_max {
            for bj in (self.tau_max - tau)..self.tau_max {
                for i in 0..ny {
                    for j in 0..ny {
                        m[(bi * ny + i, bj * ny + j)] = x.matrix()[(i, j)];
                    }
                }
            }
        }
        for i in 0..ny {
            for j in 0..ny {
                m[(self.tau_max * ny + i, self.tau_max * ny + j)] = -x.matrix()[(i, j)];
            }
        }
        Ok(SymMatrix::symmetrize(m))
    }
}

/// Builds the shift/difference filter and multiplier family for an unknown,
/// possibly time-varying input delay of at most `tau_max` steps.
///
/// The filter state holds the last `tau_max` values of `y`; the output
/// stacks the successive differences of the history followed by `w`, so
/// that `B_psi2 = 0` and the filter state is reconstructible from `y`.
pub fn build_delay_iqc(
    tau_max: usize,
    n_y: usize,
) -> Result<(IqcFilter, DelayMultiplierFamily), ModelError> {
    if tau_max < 1 || n_y < 1 {
        return Err(ModelError::InvalidArgument(
            "delay IQC requires tau_max >= 1 and n_y >= 1".into(),
        ));
    }
    let n_psi = tau_max * n_y;
    let n_z = (tau_max + 1) * n_y;

    // shift register over the y history
    let mut a_psi = DMatrix::zeros(n_psi, n_psi);
    for b in 0..tau_max.saturating_sub(1) {
        for i in 0..n_y {
            a_psi[(b * n_y + i, (b + 1) * n_y + i)] = 1.0;
        }
    }
    let mut b_psi1 = DMatrix::zeros(n_psi, n_y);
    for i in 0..n_y {
        b_psi1[((tau_max - 1) * n_y + i, i)] = 1.0;
    }
    let b_psi2 = DMatrix::zeros(n_psi, n_y);

    // difference structure: rows b < tau_max give psi_b - psi_{b+1}
    // (with psi_{tau_max} read from the current input y), last row passes w
    let mut c_psi = DMatrix::zeros(n_z, n_psi);
    for b in 0..tau_max {
        for i in 0..n_y {
            c_psi[(b * n_y + i, b * n_y + i)] = 1.0;
            if b + 1 < tau_max {
                c_psi[(b * n_y + i, (b + 1) * n_y + i)] = -1.0;
            }
        }
    }
    let mut d_psi1 = DMatrix::zeros(n_z, n_y);
    for i in 0..n_y {
        d_psi1[((tau_max - 1) * n_y + i, i)] = -1.0;
    }
    let mut d_psi2 = DMatrix::zeros(n_z, n_y);
    for i in 0..n_y {
        d_psi2[(tau_max * n_y + i, i)] = 1.0;
    }

    let filt = IqcFilter::new(a_psi, b_psi1, b_psi2, c_psi, d_psi1, d_psi2)?;
    Ok((filt, DelayMultiplierFamily { tau_max, n_y }))
}

/// The delay operator `w_t = y_{t - tau} - y_t` evaluated on a history
/// whose last entry is the current `y_t`. The history is expected to be
/// zero-padded before time zero.
pub fn delay_operator(history: &[DVector<f64>], tau: usize) -> Result<DVector<f64>, ModelError> {
    if history.is_empty() {
        return Err(ModelError::InvalidArgument("empty y history".into()));
    }
    let t = history.len() - 1;
    if tau > t {
        return Err(ModelError::TauOutOfRange { tau, tau_max: t });
    }
    Ok(&history[t - tau] - &history[t])
}

/// Delay schedule: either a fixed sequence or a seeded uniform draw over
/// `[0, tau_max]`. Seeding is mandatory for reproducibility.
#[derive(Debug, Clone)]
pub enum DelaySchedule {
    Fixed(Vec<usize>),
    SeededUniform { seed: u64 },
}

/// The delay uncertainty: a bound `tau_max` together with a schedule of
/// realized delays.
#[derive(Debug, Clone)]
pub struct DelayUncertainty {
    pub tau_max: usize,
    pub schedule: DelaySchedule,
}

impl DelayUncertainty {
    pub fn new(tau_max: usize, schedule: DelaySchedule) -> Result<Self, ModelError> {
        if let DelaySchedule::Fixed(seq) = &schedule {
            for &tau in seq {
                if tau > tau_max {
                    return Err(ModelError::TauOutOfRange { tau, tau_max });
                }
            }
        }
        Ok(Self { tau_max, schedule })
    }

    /// Materializes the first `n` delays of the schedule.
    pub fn realize(&self, n: usize) -> Result<Vec<usize>, ModelError> {
        match &self.schedule {
            DelaySchedule::Fixed(seq) => {
                if seq.len() < n {
                    Err(ModelError::ScheduleTooShort {
                        have: seq.len(),
                        need: n,
                    })
                } else {
                    Ok(seq[..n].to_vec())
                }
            }
            DelaySchedule::SeededUniform { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok((0..n).map(|_| rng.random_range(0..=self.tau_max)).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::lambda_min;
    use approx::assert_relative_eq;

    /// Reference plant of the worked input-delay design: unstable first
    /// mode, delayed input rewritten as `w = y_{t-tau} - y_t` with `y = u`.
    pub(crate) fn delay_example_system() -> LinearSystem {
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

    #[test]
    fn delay_filter_matches_reference_shape() {
        let (filt, fam) = build_delay_iqc(2, 1).unwrap();
        assert_eq!(filt.n_psi(), 2);
        assert_eq!(filt.n_z(), 3);
        assert_eq!(
            filt.a_psi,
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        );
        assert_eq!(filt.b_psi1, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(filt.b_psi2.amax(), 0.0);
        assert_eq!(
            filt.c_psi,
            DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.0, 1.0, 0.0, 0.0])
        );
        assert_eq!(filt.d_psi1, DMatrix::from_row_slice(3, 1, &[0.0, -1.0, 0.0]));
        assert_eq!(filt.d_psi2, DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]));
        assert_eq!(fam.n_z(), 3);
    }

    #[test]
    fn delay_filter_state_is_history() {
        // psi = [y_{-2}; y_{-1}], inputs y_0, w_0
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let psi = DVector::from_row_slice(&[3.0, 5.0]);
        let y = DVector::from_row_slice(&[7.0]);
        let w = DVector::from_row_slice(&[11.0]);
        let (psi_next, z) = filt.step(&psi, &y, &w).unwrap();
        assert_eq!(psi_next, DVector::from_row_slice(&[5.0, 7.0]));
        assert_eq!(z, DVector::from_row_slice(&[3.0 - 5.0, 5.0 - 7.0, 11.0]));
    }

    #[test]
    fn filter_step_zero_and_static() {
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let (psi_next, z) = filt
            .step(&DVector::zeros(2), &DVector::zeros(1), &DVector::zeros(1))
            .unwrap();
        assert_eq!(psi_next.amax(), 0.0);
        assert_eq!(z.amax(), 0.0);

        let st = IqcFilter::static_filter(
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let (psi_next, z) = st
            .step(
                &DVector::zeros(0),
                &DVector::from_row_slice(&[2.0]),
                &DVector::from_row_slice(&[3.0]),
            )
            .unwrap();
        assert_eq!(psi_next.len(), 0);
        assert_eq!(z, DVector::from_row_slice(&[2.0, 3.0]));
    }

    #[test]
    fn m_tau_members() {
        let fam = DelayMultiplierFamily { tau_max: 2, n_y: 1 };
        let x = SymMatrix::from_diagonal(&[20.7]);
        let m0 = fam.m_tau(0, &x).unwrap();
        assert_eq!(m0.matrix()[(0, 0)], 0.0);
        assert_eq!(m0.matrix()[(1, 1)], 0.0);
        assert_eq!(m0.matrix()[(2, 2)], -20.7);
        let m1 = fam.m_tau(1, &x).unwrap();
        assert_eq!(m1.matrix()[(1, 1)], 20.7);
        assert_eq!(m1.matrix()[(0, 0)], 0.0);
        let m2 = fam.m_tau(2, &x).unwrap();
        assert_eq!(m2.matrix()[(0, 1)], 20.7);
        assert_eq!(m2.matrix()[(0, 0)], 20.7);
        assert!(fam.m_tau(3, &x).is_err());
    }

    #[test]
    fn delay_operator_basics() {
        let h: Vec<DVector<f64>> = [0.0, 0.0, 1.0, 3.0]
            .iter()
            .map(|v| DVector::from_row_slice(&[*v]))
            .collect();
        assert_eq!(delay_operator(&h, 0).unwrap().amax(), 0.0);
        assert_eq!(delay_operator(&h, 1).unwrap()[0], 1.0 - 3.0);
        assert!(delay_operator(&h, 4).is_err());
        // constant history: zero for every delay
        let c: Vec<DVector<f64>> = (0..4).map(|_| DVector::from_row_slice(&[2.5])).collect();
        for tau in 0..4 {
            assert_eq!(delay_operator(&c, tau).unwrap().amax(), 0.0);
        }
    }

    /// Telescoping identity: for any history and any realized delay, the
    /// filter output annihilates the family member, `||z||^2_{M_tau(X)} = 0`.
    #[test]
    fn delay_identity_holds_along_trajectories() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (filt, fam) = build_delay_iqc(2, 1).unwrap();
        for _ in 0..50 {
            let steps = 12;
            let ys: Vec<DVector<f64>> =
                (0..steps).map(|_| DVector::from_fn(1, |_, _| rng.random_range(-2.0..2.0))).collect();
            let raw = DMatrix::from_fn(1, 1, |_, _| rng.random_range(0.01..5.0));
            let x = SymMatrix::symmetrize(raw);
            let mut psi = DVector::zeros(2);
            let mut hist: Vec<DVector<f64>> = vec![DVector::zeros(1); 2];
            for t in 0..steps {
                let tau = rng.random_range(0..=2usize);
                hist.push(ys[t].clone());
                let w = delay_operator(&hist, tau).unwrap();
                let (psi_next, z) = filt.step(&psi, &ys[t], &w).unwrap();
                let m_tau = fam.m_tau(tau, &x).unwrap();
                let val = m_tau.quadratic_form(&z);
                assert!(val.abs() <= 1e-12, "identity violated: {val}");
                psi = psi_next;
            }
        }
    }

    /// Any multiplier dominating the whole family yields a nonnegative
    /// exponentially-weighted sum along delay trajectories.
    #[test]
    fn dominating_multiplier_gives_nonnegative_iqc_sum() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (filt, fam) = build_delay_iqc(2, 1).unwrap();
        let x = SymMatrix::from_diagonal(&[20.7]);
        // reference multiplier from the worked design
        let m = SymMatrix::from_rows(&[
            &[29.0, 14.5, 0.0],
            &[14.5, 25.4, 0.0],
            &[0.0, 0.0, -20.7],
        ])
        .unwrap();
        // dominance may fail for a printed multiplier; enforce it here by
        // shifting the history block enough to cover every member.
        let mut shift = 0.0f64;
        for tau in 0..=2 {
            let diff = &m - &fam.m_tau(tau, &x).unwrap();
            shift = shift.min(lambda_min(&diff).unwrap());
        }
        let bump = (-shift).max(0.0) + 1e-9;
        let mut m_dom = m.matrix().clone();
        for i in 0..2 {
            m_dom[(i, i)] += bump;
        }
        let m_dom = SymMatrix::symmetrize(m_dom);
        for tau in 0..=2 {
            let diff = &m_dom - &fam.m_tau(tau, &x).unwrap();
            assert!(lambda_min(&diff).unwrap() >= -1e-12);
        }

        let rho = 0.95f64;
        for _ in 0..20 {
            let steps = 15;
            let mut psi = DVector::zeros(2);
            let mut hist: Vec<DVector<f64>> = vec![DVector::zeros(1); 2];
            let mut partial = 0.0;
            for t in 0..steps {
                let tau = rng.random_range(0..=2usize);
                let y = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
                hist.push(y.clone());
                let w = delay_operator(&hist, tau).unwrap();
                let (psi_next, z) = filt.step(&psi, &y, &w).unwrap();
                partial += rho.powi(-2 * (t as i32)) * m_dom.quadratic_form(&z);
                assert!(partial >= -1e-9, "hard IQC sum negative at t={t}: {partial}");
                psi = psi_next;
            }
        }
    }

    #[test]
    fn augmented_assembly_reference_blocks() {
        let sys = delay_example_system();
        let k = DMatrix::from_row_slice(1, 2, &[0.18, -0.35]);
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let aug = assemble_augmented(&sys, &k, &filt).unwrap();
        let expect_a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.05, -0.3, 0.0, 0.0, //
                0.18, 0.6, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.18, -0.35, 0.0, 0.0,
            ],
        );
        assert!((aug.a_tilde.clone() - expect_a).amax() < 1e-15);
        assert_eq!(
            aug.b_tilde,
            DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 0.0, 0.0])
        );
        let expect_c = DMatrix::from_row_slice(
            3,
            4,
            &[
                0.0, 0.0, 1.0, -1.0, //
                -0.18, 0.35, 0.0, 1.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        );
        assert!((aug.c_tilde.clone() - expect_c).amax() < 1e-15);
        assert_eq!(aug.d_tilde, DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]));
        // upper-right block of a_tilde is zero
        assert_eq!(aug.a_tilde.view((0, 2), (2, 2)).amax(), 0.0);
    }

    #[test]
    fn augmented_static_filter_degenerate() {
        let sys = delay_example_system();
        let k = DMatrix::zeros(1, 2);
        let st = IqcFilter::static_filter(DMatrix::identity(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let aug = assemble_augmented(&sys, &k, &st).unwrap();
        // with n_psi = 0, K = 0, D_u = 1: a_tilde = A, c_tilde = D_psi1 * C = 0
        assert!((aug.a_tilde.clone() - &sys.a).amax() < 1e-15);
        assert_eq!(aug.c_tilde.amax(), 0.0);
    }

    #[test]
    fn augmented_assembly_is_linear_in_inputs() {
        // linearity in B_w: assembling with B_w and 2*B_w scales b_tilde's
        // plant block linearly
        let sys = delay_example_system();
        let mut sys2 = sys.clone();
        sys2.b_w *= 2.0;
        let k = DMatrix::from_row_slice(1, 2, &[0.18, -0.35]);
        let (filt, _) = build_delay_iqc(2, 1).unwrap();
        let a1 = assemble_augmented(&sys, &k, &filt).unwrap();
        let a2 = assemble_augmented(&sys2, &k, &filt).unwrap();
        assert!((a2.b_tilde.view((0, 0), (2, 1)).clone_owned()
            - a1.b_tilde.view((0, 0), (2, 1)).clone_owned() * 2.0)
            .amax()
            < 1e-15);
    }

    #[test]
    fn schedule_realization() {
        let fixed = DelayUncertainty::new(2, DelaySchedule::Fixed(vec![0, 1, 2, 2])).unwrap();
        assert_eq!(fixed.realize(3).unwrap(), vec![0, 1, 2]);
        assert!(fixed.realize(5).is_err());
        assert!(DelayUncertainty::new(1, DelaySchedule::Fixed(vec![2])).is_err());

        let seeded = DelayUncertainty::new(2, DelaySchedule::SeededUniform { seed: 9 }).unwrap();
        let a = seeded.realize(40).unwrap();
        let b = seeded.realize(40).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| *t <= 2));
        assert!(a.iter().any(|t| *t != a[0]));
    }

    #[test]
    fn dimension_validation() {
        let bad = LinearSystem::new(
            DMatrix::zeros(2, 3),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        );
        assert!(bad.is_err());
        assert!(ConstraintSet::new(DMatrix::zeros(0, 3), DVector::zeros(0)).is_err());
    }
}
