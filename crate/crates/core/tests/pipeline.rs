use infolqg::maxdet::{schedule_for, SolverSettings};
use infolqg::oracle::dp_control_cost;
use infolqg::riccati::full_information_cost;
use infolqg::simulate::{estimate_costs, lqr_baseline, SimConfig};
use infolqg::spacecraft::{discretize_zoh, SpacecraftParams};
use infolqg::synthesis::round_trip_errors;
use infolqg::test_support::random_spec;
use infolqg::{analytic_min_control_cost, assemble_policy, validate_problem, RankTolerance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedule_policy_and_costs_agree(seed in any::<u64>(), n in 1usize..=3, horizon in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, n, horizon);
        prop_assert!(validate_problem(&spec).is_ok());
        let (tables, _, schedule) = schedule_for(&spec, &SolverSettings::default()).unwrap();
        let gap = schedule.objective_value - schedule.info_cost - schedule.control_cost_predicted;
        prop_assert!(gap.abs() <= 1e-6, "identity gap {gap}");

        let policy = assemble_policy(&spec, &tables, &schedule, RankTolerance::default()).unwrap();
        for (t, e) in round_trip_errors(&spec, &policy, &schedule).into_iter().enumerate() {
            prop_assert!(e <= 1e-6, "step {}: {e}", t + 1);
        }
        let analytic = analytic_min_control_cost(&spec, &tables, &schedule.p_post).unwrap();
        prop_assert!((analytic - schedule.control_cost_predicted).abs() <= 1e-9 * analytic.abs().max(1.0));
        let sensors: Vec<_> = policy.c.iter().cloned().zip(policy.v.iter().cloned()).collect();
        let dp = dp_control_cost(&spec, &sensors);
        prop_assert!((analytic - dp).abs() <= 1e-6 * analytic.abs().max(1.0), "{analytic} vs {dp}");
        // Measuring can only help the controller.
        prop_assert!(full_information_cost(&spec, &tables) <= analytic * (1.0 + 1e-12));
    }
}

#[test]
fn monte_carlo_matches_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = random_spec(&mut rng, 2, 4);
    let (tables, _, schedule) = schedule_for(&spec, &SolverSettings::default()).unwrap();
    let policy = assemble_policy(&spec, &tables, &schedule, RankTolerance::default()).unwrap();
    let config = SimConfig { num_trials: 20_000, master_seed: 11, ..SimConfig::default() };
    let report = estimate_costs(&spec, &policy, &config).unwrap();
    let z = (report.empirical_control_cost - report.predicted_control_cost) / report.standard_error;
    assert!(z.abs() < 4.0, "z = {z}");
    assert!((report.total_info_cost - schedule.info_cost).abs() <= 1e-6 * schedule.info_cost.abs().max(1.0));

    let lqr = lqr_baseline(&spec, &config).unwrap();
    assert!(lqr.predicted_control_cost <= report.predicted_control_cost);
    assert!(lqr.total_info_cost.is_infinite());
}

#[test]
fn spacecraft_default_runs_end_to_end() {
    let spec = discretize_zoh(&SpacecraftParams::default()).unwrap();
    assert_eq!((spec.a[0].nrows(), spec.horizon), (6, 70));
    let (tables, _, schedule) = schedule_for(&spec, &SolverSettings::default()).unwrap();
    let policy = assemble_policy(&spec, &tables, &schedule, RankTolerance::default()).unwrap();
    let worst = round_trip_errors(&spec, &policy, &schedule).into_iter().fold(0.0, f64::max);
    assert!(worst <= 1e-6, "round trip {worst}");
    assert!(policy.r.iter().all(|&r| r <= 6));
    let report = estimate_costs(&spec, &policy, &SimConfig { num_trials: 2_000, master_seed: 1, ..SimConfig::default() })
        .unwrap();
    assert!(report.info_rates.iter().all(|r| r.is_finite() && *r >= 0.0));
    let z = (report.empirical_control_cost - report.predicted_control_cost) / report.standard_error;
    assert!(z.abs() < 4.0, "z = {z}");
}
