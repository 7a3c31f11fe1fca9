//! Brute-force references for the tests.
//!
//! Nothing here calls into `riccati`, `maxdet` or `synthesis`: the grid
//! search redoes the scalar Riccati algebra by hand, and the dynamic
//! programming evaluation builds its own recursion from the joint
//! quadratic form in `(x, u)` using LU inverses.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::model::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points_per_dim: usize,
    /// Each round shrinks the search window tenfold around the incumbent.
    pub refinement_rounds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points_per_dim: 400, refinement_rounds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub best_value: f64,
    /// Scalar posterior variances `p_1 … p_T`.
    pub best_schedule: Vec<f64>,
    /// Incumbent value after the initial grid and after every refinement.
    pub round_values: Vec<f64>,
}

struct ScalarData {
    a: Vec<f64>,
    w: Vec<f64>,
    gamma: Vec<f64>,
    theta: Vec<f64>,
    p0: f64,
    /// ½ n_1 p0 + ½ Σ w_t s_t
    offset: f64,
}

fn scalar_data(spec: &ProblemSpec) -> ScalarData {
    let horizon = spec.horizon;
    let e = |m: &DMatrix<f64>| m[(0, 0)];
    let mut theta = vec![0.0; horizon];
    let mut s = vec![0.0; horizon];
    let mut n_next = 0.0;
    for t in (0..horizon).rev() {
        let (a, b, q, r) = (e(&spec.a[t]), e(&spec.b[t]), e(&spec.q[t]), e(&spec.r[t]));
        let st = q + if t + 1 < horizon { n_next } else { 0.0 };
        let mt = b * b * st + r;
        let kt = -b * st * a / mt;
        theta[t] = kt * kt * mt;
        n_next = a * a * (st - st * st * b * b / mt);
        s[t] = st;
    }
    let p0 = e(&spec.p_init);
    let w: Vec<f64> = spec.w.iter().map(e).collect();
    let offset = 0.5 * n_next * p0 + 0.5 * w.iter().zip(&s).map(|(w, s)| w * s).sum::<f64>();
    ScalarData { a: spec.a.iter().map(e).collect(), w, gamma: spec.gamma.clone(), theta, p0, offset }
}

/// Exact `J_info + min J_cont` of a scalar schedule, or `None` if infeasible.
pub fn scalar_schedule_value(spec: &ProblemSpec, p: &[f64], epsilon: f64) -> Option<f64> {
    let d = scalar_data(spec);
    let mut prior = d.p0;
    let mut v = d.offset;
    for t in 0..spec.horizon {
        if !(p[t] >= epsilon && p[t] <= prior) {
            return None;
        }
        v += 0.5 * d.theta[t] * p[t] + 0.5 * d.gamma[t] * (prior.ln() - p[t].ln());
        prior = d.a[t] * d.a[t] * p[t] + d.w[t];
    }
    Some(v)
}

fn log_grid(lo: f64, hi: f64, points: usize, extra: Option<f64>) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..points)
        .map(|i| (llo + (lhi - llo) * i as f64 / (points - 1) as f64).exp())
        .collect();
    g[0] = lo;
    g[points - 1] = hi;
    if let Some(x) = extra {
        g.push(x);
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Dynamic program over one set of grids. Returns (value, argmin path).
fn grid_dp(d: &ScalarData, grids: &[Vec<f64>]) -> Option<(f64, Vec<f64>)> {
    let horizon = grids.len();
    // value[t][i]: best cost-to-go from p_t = grids[t][i], excluding the
    // γ_t ln(prior_t) term that belongs to the previous stage.
    let mut value: Vec<Vec<f64>> = vec![Vec::new(); horizon];
    let mut choice: Vec<Vec<usize>> = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let stage = |p: f64| 0.5 * d.theta[t] * p - 0.5 * d.gamma[t] * p.ln();
        if t + 1 == horizon {
            value[t] = grids[t].iter().map(|&p| stage(p)).collect();
            choice[t] = vec![usize::MAX; grids[t].len()];
            continue;
        }
        // Prefix minima of the next stage (grids are sorted ascending).
        let next = &value[t + 1];
        let mut pref_val = Vec::with_capacity(next.len());
        let mut pref_arg = Vec::with_capacity(next.len());
        let (mut bv, mut ba) = (f64::INFINITY, usize::MAX);
        for (i, &v) in next.iter().enumerate() {
            if v < bv {
                bv = v;
                ba = i;
            }
            pref_val.push(bv);
            pref_arg.push(ba);
        }
        let mut vt = Vec::with_capacity(grids[t].len());
        let mut ct = Vec::with_capacity(grids[t].len());
        for &p in &grids[t] {
            let bound = d.a[t] * d.a[t] * p + d.w[t];
            let count = grids[t + 1].partition_point(|&q| q <= bound);
            if count == 0 {
                vt.push(f64::INFINITY);
                ct.push(usize::MAX);
            } else {
                vt.push(stage(p) + 0.5 * d.gamma[t + 1] * bound.ln() + pref_val[count - 1]);
                ct.push(pref_arg[count - 1]);
            }
        }
        value[t] = vt;
        choice[t] = ct;
    }
    let count = grids[0].partition_point(|&q| q <= d.p0);
    let (mut best, mut arg) = (f64::INFINITY, usize::MAX);
    for i in 0..count {
        if value[0][i] < best {
            best = value[0][i];
            arg = i;
        }
    }
    if !best.is_finite() {
        return None;
    }
    let mut path = Vec::with_capacity(horizon);
    let mut idx = arg;
    for t in 0..horizon {
        path.push(grids[t][idx]);
        idx = choice[t][idx];
    }
    Some((best + 0.5 * d.gamma[0] * d.p0.ln() + d.offset, path))
}

/// Nested-grid search over scalar covariance schedules `ε ≤ p_t ≤ prior_t`,
/// minimizing the exact best-response cost. Grids are log-spaced.
///
/// Panics if the problem is not scalar.
pub fn grid_search_schedule(spec: &ProblemSpec, grid: GridSpec, epsilon: f64) -> GridResult {
    assert!(spec.state_dims.iter().all(|&n| n == 1), "grid oracle needs a scalar state");
    assert!(grid.points_per_dim >= 10);
    let d = scalar_data(spec);
    let horizon = spec.horizon;
    let mut upper = vec![d.p0];
    for t in 0..horizon - 1 {
        upper.push(d.a[t] * d.a[t] * upper[t] + d.w[t]);
    }
    let mut windows: Vec<(f64, f64)> = upper.iter().map(|&u| (epsilon, u)).collect();
    let mut incumbent: Option<Vec<f64>> = None;
    let mut best = f64::INFINITY;
    let mut round_values = Vec::new();
    for _round in 0..=grid.refinement_rounds {
        let grids: Vec<Vec<f64>> = (0..horizon)
            .map(|t| {
                let extra = incumbent.as_ref().map(|p| p[t]);
                log_grid(windows[t].0, windows[t].1, grid.points_per_dim, extra)
            })
            .collect();
        if let Some((v, path)) = grid_dp(&d, &grids) {
            if v <= best {
                best = v;
                incumbent = Some(path);
            }
        }
        round_values.push(best);
        let Some(p) = incumbent.as_ref() else { break };
        for t in 0..horizon {
            let (lo, hi) = windows[t];
            let half = 0.05 * (hi.ln() - lo.ln());
            let center = p[t].ln();
            windows[t] = ((center - half).exp().max(epsilon), (center + half).exp().min(upper[t]));
        }
    }
    GridResult { best_value: best, best_schedule: incumbent.unwrap_or_default(), round_values }
}

/// Stage quantities of the dynamic program at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DpStage {
    pub cost_to_go: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub value_weight: DMatrix<f64>,
    pub error_weight: DMatrix<f64>,
}

/// Backward recursion through the joint quadratic form
/// `[x; u]ᵀ H [x; u]` with `H = [A B]ᵀ S [A B] + diag(0, R)`, minimized
/// over `u` by the Schur complement.
pub fn dp_stages(spec: &ProblemSpec) -> Vec<DpStage> {
    let horizon = spec.horizon;
    let mut out: Vec<DpStage> = Vec::with_capacity(horizon);
    let mut next_value: Option<DMatrix<f64>> = None;
    for t in (0..horizon).rev() {
        let (n, m) = (spec.n(t), spec.m(t));
        let s = match &next_value {
            Some(v) => &spec.q[t] + v,
            None => spec.q[t].clone(),
        };
        let mut ab = DMatrix::zeros(spec.n(t + 1), n + m);
        ab.view_mut((0, 0), (spec.n(t + 1), n)).copy_from(&spec.a[t]);
        ab.view_mut((0, n), (spec.n(t + 1), m)).copy_from(&spec.b[t]);
        let mut h = ab.transpose() * &s * &ab;
        let mut huu = h.view((n, n), (m, m)).into_owned();
        huu += &spec.r[t];
        h.view_mut((n, n), (m, m)).copy_from(&huu);
        let hxx = h.view((0, 0), (n, n)).into_owned();
        let hux = h.view((n, 0), (m, n)).into_owned();
        let huu_inv = huu.clone().lu().try_inverse().expect("R positive definite");
        let gain = -(&huu_inv * &hux);
        let error_weight = hux.transpose() * &huu_inv * &hux;
        let value_weight = &hxx - &error_weight;
        next_value = Some(value_weight.clone());
        out.push(DpStage { cost_to_go: s, gain, value_weight, error_weight });
    }
    out.reverse();
    out
}

/// Optimal expected control cost for a fixed linear sensor
/// `y_t = C_t x_t + v_t`, `v_t ~ N(0, V_t)`: the dynamic-programming value
/// `½E‖x_1‖²_{N_1} + ½Σ_k [Tr(W_k S_k) + Tr(Θ_k P_{k|k})]` with the
/// posterior covariances propagated in information form.
pub fn dp_control_cost(spec: &ProblemSpec, sensors: &[(DMatrix<f64>, DMatrix<f64>)]) -> f64 {
    let stages = dp_stages(spec);
    let inv = |m: &DMatrix<f64>| m.clone().lu().try_inverse().expect("invertible");
    let mut prior = spec.p_init.clone();
    let mut total = 0.5 * (&stages[0].value_weight * &spec.p_init).trace();
    for t in 0..spec.horizon {
        let (c, v) = &sensors[t];
        let post = if c.nrows() == 0 {
            prior.clone()
        } else {
            inv(&(inv(&prior) + c.transpose() * inv(v) * c))
        };
        total += 0.5 * ((&spec.w[t] * &stages[t].cost_to_go).trace() + (&stages[t].error_weight * &post).trace());
        prior = &spec.a[t] * &post * spec.a[t].transpose() + &spec.w[t];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{random_scalar_spec, scalar_spec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interior_optimum_matches_closed_form() {
        // A = B = 1, Q = R = 2 gives Θ = 1; γ = 1, P_init = 2 → p* = γ/Θ = 1.
        let spec = scalar_spec(1, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 2.0);
        let res = grid_search_schedule(&spec, GridSpec::default(), 1e-9);
        assert!((res.best_schedule[0] - 1.0).abs() < 1e-4, "{:?}", res.best_schedule);
        let d = scalar_data(&spec);
        assert!((d.theta[0] - 1.0).abs() < 1e-15);
        let c = 0.5 * 2.0_f64.ln() + d.offset;
        assert!((res.best_value - (0.5 + c)).abs() < 1e-8);
    }

    #[test]
    fn closed_form_clamp_on_random_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let spec = random_scalar_spec(&mut rng, 1);
            let d = scalar_data(&spec);
            let p_star = (spec.gamma[0] / d.theta[0]).clamp(1e-9, d.p0);
            let res = grid_search_schedule(&spec, GridSpec::default(), 1e-9);
            assert!((res.best_schedule[0] - p_star).abs() <= 1e-4 * p_star.max(1e-3));
        }
    }

    #[test]
    fn zero_weight_saturates_upper_bound() {
        let spec = scalar_spec(1, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.5);
        let res = grid_search_schedule(&spec, GridSpec::default(), 1e-9);
        assert_eq!(res.best_schedule[0], 1.5);
    }

    #[test]
    fn refinement_never_increases_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let spec = random_scalar_spec(&mut rng, 3);
            let res = grid_search_schedule(&spec, GridSpec { points_per_dim: 60, refinement_rounds: 4 }, 1e-9);
            for w in res.round_values.windows(2) {
                assert!(w[1] <= w[0]);
            }
            let again = scalar_schedule_value(&spec, &res.best_schedule, 1e-9).unwrap();
            assert!((again - res.best_value).abs() < 1e-10 * again.abs().max(1.0));
        }
    }

    #[test]
    fn dp_cost_zero_without_state_weight() {
        let spec = scalar_spec(3, 0.9, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0);
        let sensors = vec![(DMatrix::zeros(0, 1), DMatrix::zeros(0, 0)); 3];
        assert_eq!(dp_control_cost(&spec, &sensors), 0.0);
    }

    #[test]
    fn dp_cost_full_sensing_limit() {
        let spec = scalar_spec(3, 1.1, 0.7, 0.5, 1.0, 0.3, 1.0, 2.0);
        let stages = dp_stages(&spec);
        let limit = 0.5 * stages[0].value_weight[(0, 0)] * 2.0
            + 0.5 * (0..3).map(|t| 0.5 * stages[t].cost_to_go[(0, 0)]).sum::<f64>();
        let sensors = vec![(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, 1e-12)); 3];
        let cost = dp_control_cost(&spec, &sensors);
        assert!((cost - limit).abs() < 1e-9, "{cost} vs {limit}");
    }
}
