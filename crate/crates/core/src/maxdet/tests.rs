use super::*;
use crate::oracle::{grid_search_schedule, GridSpec};
use crate::test_support::{random_orthogonal, random_scalar_spec, random_spec, scalar_spec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn s(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn solve(spec: &ProblemSpec) -> (MaxDetProblem, CovarianceSchedule) {
    let (_, problem, schedule) = schedule_for(spec, &SolverSettings::default()).unwrap();
    (problem, schedule)
}

fn assert_identity(schedule: &CovarianceSchedule) {
    let gap = schedule.objective_value - (schedule.info_cost + schedule.control_cost_predicted);
    assert!(gap.abs() <= 1e-6, "objective {} vs info+control {}", schedule.objective_value, schedule.info_cost + schedule.control_cost_predicted);
}

#[test]
fn single_step_reduces_to_one_scalar() {
    let spec = scalar_spec(1, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 2.0);
    let tables = riccati::riccati_backward(&spec).unwrap();
    let problem = build_maxdet(&spec, &tables, &SolverSettings::default());
    assert_eq!(problem.num_variables(), 1);
    let f = |p: f64| problem.objective(&[s(p)], &[]).unwrap() - problem.constant;
    // ½Θp − (γ/2) ln p with Θ = 1, γ = 1.
    for p in [0.3, 1.0, 1.7] {
        assert!((f(p) - (0.5 * p - 0.5 * p.ln())).abs() < 1e-14);
    }
    let slacks = problem.constraint_slacks(&[s(2.5)], &[]);
    assert!(slacks.iter().any(|(_, v)| *v < 0.0), "p above P_init must be infeasible");
}

#[test]
fn two_step_scalar_constraints() {
    let spec = scalar_spec(2, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
    let tables = riccati::riccati_backward(&spec).unwrap();
    let problem = build_maxdet(&spec, &tables, &SolverSettings::default());
    assert_eq!(problem.num_variables(), 3);
    let feasible = |p1: f64, pi1: f64, p2: f64| {
        problem.constraint_slacks(&[s(p1), s(p2)], &[s(pi1)]).iter().all(|(_, v)| *v >= -1e-12)
    };
    // π₁ ≤ (p₁⁻¹ + 1)⁻¹ through the Schur block.
    let p1 = 0.8;
    let pi_max = 1.0 / (1.0 / p1 + 1.0);
    assert!(feasible(p1, pi_max, 1.0));
    assert!(!feasible(p1, pi_max + 1e-6, 1.0));
    // p₂ ≤ p₁ + 1 and p₁ ≤ P_init.
    assert!(feasible(p1, 0.1, p1 + 1.0));
    assert!(!feasible(p1, 0.1, p1 + 1.0 + 1e-6));
    assert!(!feasible(1.0 + 1e-6, 0.1, 1.0));
}

#[test]
fn saturating_pi_closes_schur_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let spec = random_spec(&mut rng, 3, 2);
        let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let p = &g * g.transpose() + DMatrix::identity(3, 3) * 0.2;
        let pi = saturating_pi(&p, &spec.a[0], &spec.w[0]);
        let a = &spec.a[0];
        let schur = &p - &pi - &p * a.transpose() * linalg::inv_pd(&(&spec.w[0] + a * &p * a.transpose())).unwrap() * a * &p;
        assert!(schur.norm() <= 1e-8 * p.norm());
        // Π saturates: the block matrix is singular with nullity n.
        let ev = linalg::sym_eigenvalues(&schur);
        assert!(ev.iter().all(|v| v.abs() < 1e-8));
    }
}

#[test]
fn interior_optimum_closed_form() {
    let spec = scalar_spec(1, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 2.0);
    let (problem, schedule) = solve(&spec);
    let p = schedule.p_post[0][(0, 0)];
    assert!((p - 1.0).abs() < 1e-6, "p = {p}");
    assert!((schedule.objective_value - problem.constant - 0.5).abs() < 1e-7);
    let kkt = kkt_report(&problem, &schedule);
    assert!(kkt.stationarity <= 1e-7, "{kkt:?}");
    assert!((0.5 - 0.5 / p).abs() <= 1e-7);
    assert_identity(&schedule);
}

#[test]
fn bound_active_optimum() {
    let spec = scalar_spec(1, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 0.5);
    let (problem, schedule) = solve(&spec);
    let p = schedule.p_post[0][(0, 0)];
    assert!((p - 0.5).abs() < 1e-6, "p = {p}");
    let reduced = schedule.objective_value - problem.constant;
    assert!((reduced - (0.25 + 0.5 * 2.0_f64.ln())).abs() < 1e-6, "{reduced}");
    let kkt = kkt_report(&problem, &schedule);
    let bound = kkt.constraints.iter().find(|c| c.label == "P_1 <= P_init").unwrap();
    assert!(bound.complementarity <= SolverSettings::default().tol_optimality, "{bound:?}");
    assert!(bound.multiplier_trace > 0.1, "active bound carries a multiplier: {bound:?}");
}

#[test]
fn non_optimal_point_fails_stationarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let spec = random_spec(&mut rng, 2, 3);
    let (problem, schedule) = solve(&spec);
    let (p0, pi0) = problem.initial_point();
    let mut other = schedule.clone();
    other.p_post = p0;
    other.pi = pi0;
    let kkt = kkt_report(&problem, &other);
    assert!(kkt.stationarity > 1e-2, "{kkt:?}");
    assert!(kkt_report(&problem, &schedule).stationarity <= 1e-7);
}

#[test]
fn zero_theta_saturates_upper_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut spec = random_spec(&mut rng, 2, 4);
    for q in &mut spec.q {
        q.fill(0.0);
    }
    let (_, schedule) = solve(&spec);
    for t in 0..spec.horizon {
        let rel = linalg::rel_frobenius(&schedule.p_post[t], &schedule.p_prior[t]);
        assert!(rel < 1e-6, "step {t}: {rel}");
    }
    assert!(schedule.info_cost.abs() < 1e-6);
}

#[test]
fn matches_grid_oracle_on_scalar_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..12 {
        let horizon = rng.random_range(1..=4);
        let spec = random_scalar_spec(&mut rng, horizon);
        let (problem, schedule) = solve(&spec);
        let grid = grid_search_schedule(&spec, GridSpec::default(), problem.epsilon);
        let v = schedule.objective_value;
        assert!(grid.best_value >= v - 1e-3 * v.abs(), "oracle {} below solver {v}", grid.best_value);
        assert!((grid.best_value - v).abs() <= 1e-3 * v.abs());
        assert_identity(&schedule);
    }
}

#[test]
fn objective_identity_and_feasibility_on_matrix_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..8 {
        let n = rng.random_range(1..=4);
        let horizon = rng.random_range(1..=6);
        let spec = random_spec(&mut rng, n, horizon);
        let (problem, schedule) = solve(&spec);
        assert_identity(&schedule);
        assert!(schedule.diagnostics.feasibility_residual <= 1e-8);
        let kkt = kkt_report(&problem, &schedule);
        assert!(kkt.stationarity <= 1e-7, "{kkt:?}");
        assert!(kkt.feasibility_residual <= 1e-8);
        for t in 0..spec.horizon {
            assert!(linalg::is_positive_semidefinite(&(&schedule.p_prior[t] - &schedule.p_post[t])));
        }
    }
}

#[test]
fn decreasing_gamma_profile_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut spec = random_scalar_spec(&mut rng, 3);
    spec.gamma = vec![2.0, 1.2, 0.5];
    let (problem, schedule) = solve(&spec);
    assert_identity(&schedule);
    let grid = grid_search_schedule(&spec, GridSpec::default(), problem.epsilon);
    assert!((grid.best_value - schedule.objective_value).abs() <= 1e-3 * schedule.objective_value.abs());
}

#[test]
fn increasing_gamma_is_rejected() {
    let mut spec = scalar_spec(2, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
    spec.gamma = vec![1.0, 2.0];
    let err = schedule_for(&spec, &SolverSettings::default()).unwrap_err();
    assert!(matches!(err, SolveError::IncreasingGamma { step: 1 }));
}

#[test]
fn constant_matches_footnote_for_constant_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let spec = random_spec(&mut rng, 3, 5);
    let tables = riccati::riccati_backward(&spec).unwrap();
    let problem = build_maxdet(&spec, &tables, &SolverSettings::default());
    assert!((problem.constant - problem.constant_c).abs() < 1e-10 * problem.constant.abs().max(1.0));
}

#[test]
fn gamma_scaling_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..5 {
        let horizon = rng.random_range(1..=3);
        let spec = random_scalar_spec(&mut rng, horizon);
        let (_, base) = solve(&spec);
        let (_, scaled) = solve(&spec.with_gamma_scale(3.0));
        assert!(scaled.objective_value >= base.objective_value - 1e-6);
        for t in 0..spec.horizon {
            assert!(scaled.p_post[t][(0, 0)] >= base.p_post[t][(0, 0)] - 1e-6);
        }
    }
}

#[test]
fn orthogonal_change_of_coordinates_preserves_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let spec = random_spec(&mut rng, 3, 4);
    let u = random_orthogonal(&mut rng, 3);
    let ut = u.transpose();
    let mut rotated = spec.clone();
    for t in 0..spec.horizon {
        rotated.a[t] = &u * &spec.a[t] * &ut;
        rotated.b[t] = &u * &spec.b[t];
        rotated.w[t] = &u * &spec.w[t] * &ut;
        rotated.q[t] = &u * &spec.q[t] * &ut;
    }
    rotated.p_init = &u * &spec.p_init * &ut;
    let rotated = rotated.validated().unwrap();
    let (_, a) = solve(&spec);
    let (_, b) = solve(&rotated);
    assert!((a.objective_value - b.objective_value).abs() < 1e-6);
}

#[test]
fn solves_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let spec = random_spec(&mut rng, 3, 5);
    let (_, a) = solve(&spec);
    let (_, b) = solve(&spec);
    assert_eq!(a, b);
}

#[test]
fn iteration_cap_returns_best_iterate() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let spec = random_spec(&mut rng, 2, 3);
    let settings = SolverSettings { max_iterations: 3, ..SolverSettings::default() };
    match schedule_for(&spec, &settings) {
        Err(SolveError::MaxIterations(best)) => {
            assert!(!best.diagnostics.converged);
            assert_eq!(best.diagnostics.iterations, 3);
            assert_eq!(best.p_post.len(), 3);
        }
        other => panic!("expected MaxIterations, got {other:?}"),
    }
}

#[test]
fn bad_settings_are_rejected() {
    let spec = scalar_spec(1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
    for settings in [
        SolverSettings { barrier_reduction: 1.0, ..SolverSettings::default() },
        SolverSettings { tol_optimality: 0.0, ..SolverSettings::default() },
        SolverSettings { epsilon: Some(-1.0), ..SolverSettings::default() },
    ] {
        assert!(matches!(schedule_for(&spec, &settings), Err(SolveError::Settings(_))));
    }
    // ε above every feasible Π.
    let settings = SolverSettings { epsilon: Some(10.0), ..SolverSettings::default() };
    assert!(matches!(schedule_for(&spec, &settings), Err(SolveError::InfeasibleStart(_))));
}

#[test]
fn epsilon_shift_has_negligible_effect() {
    let spec = scalar_spec(3, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
    let tables = riccati::riccati_backward(&spec).unwrap();
    let settings = SolverSettings::default();
    let problem = build_maxdet(&spec, &tables, &settings);
    assert!(epsilon_sensitivity(&problem, &settings).unwrap().abs() < 1e-6);
}

#[test]
fn extreme_gamma_scales_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for scale in [1e-6, 1e9] {
        for _ in 0..3 {
            let spec = random_spec(&mut rng, 3, 4).with_gamma_scale(scale);
            let (problem, schedule) = solve(&spec);
            assert_identity(&schedule);
            assert!(kkt_report(&problem, &schedule).feasibility_residual <= 1e-8);
        }
    }
}
