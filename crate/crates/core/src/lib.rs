//! Robust tube-based model predictive control for discrete-time linear
//! systems in feedback with dynamic uncertainties described by hard
//! exponentially-weighted integral quadratic constraints (IQCs).
//!
//! The crate is organized around the offline/online split of tube MPC:
//!
//! * [`linalg`] — dense symmetric-matrix kernel (Jacobi eigensolver,
//!   Schur complements, discrete Lyapunov/Riccati solves).
//! * [`model`] — plant, uncertainty filter and multiplier data model,
//!   including the input-delay IQC used throughout the examples.
//! * [`sdp`] — a small dense semidefinite-program solver.
//! * [`synthesis`] — offline design: tube shape matrix, constraint
//!   tightening and terminal ingredients.
//! * [`tube`] — online tube-size recursions and containment checks.
//! * [`qp`]/[`qcqp`] — dense convex QP solver and the SQP layer for the
//!   quadratically-constrained online problem.
//! * [`mpc`] — the receding-horizon controller.
//! * [`sim`] — closed-loop simulation, worst-case oracles and trace I/O.
//! * [`artifact`] — serialization of a finished design to a file the
//!   online stage can load.

pub mod artifact;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod qcqp;
pub mod qp;
pub mod sdp;
pub mod sim;
pub mod synthesis;
pub mod tube;

pub use linalg::{Definiteness, LinalgError, SymMatrix};
pub use model::{
    ConstraintSet, DelaySchedule, DelayUncertainty, DisturbanceModel, IqcFilter, LinearSystem,
    Multiplier,
};
pub use synthesis::{TerminalSet, TubeParams};

