//! Joint design of a linear sensor, Kalman filter and certainty-equivalence
//! controller for finite-horizon LQG problems in which every nat of
//! acquired information carries a price.
//!
//! Pipeline:
//! 1. [`riccati::riccati_backward`] computes controller gains and the
//!    weights `Θ_t` that price estimation error.
//! 2. [`maxdet::solve_schedule`] picks the optimal posterior covariance
//!    schedule by determinant maximization under LMI constraints.
//! 3. [`synthesis::assemble_policy`] realizes the schedule with a linear
//!    sensor `y_t = C_t x_t + v_t` and Kalman gains `L_t`.
//! 4. [`simulate`] checks the design by Monte Carlo; [`oracle`] holds
//!    brute-force references used by the tests.

mod dd;
pub mod linalg;
pub mod maxdet;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod simulate;
pub mod spacecraft;
pub mod synthesis;
#[doc(hidden)]
pub mod test_support;

pub use maxdet::{build_maxdet, kkt_report, solve_schedule, MaxDetProblem, SolveError, SolverSettings};
pub use model::{
    validate_problem, CovarianceSchedule, ProblemSpec, RiccatiTables, SensorPolicy, SimulationReport,
};
pub use riccati::{analytic_min_control_cost, constant_c, riccati_backward};
pub use synthesis::{assemble_policy, RankTolerance};

