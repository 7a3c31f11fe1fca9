//! Realizing a covariance schedule: sensor factorization, Kalman gains and
//! the assembled certainty-equivalence policy.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, rel_frobenius, symmetrize};
use crate::model::{CovarianceSchedule, ProblemSpec, RiccatiTables, SensorPolicy};

/// Clamped negative eigenvalues above this fraction of the information scale
/// are reported with a warning.
const CLAMP_WARN: f64 = 1e-6;
/// Beyond this fraction the schedule is rejected as infeasible.
const CLAMP_FAIL: f64 = 1e-4;

/// Numerical rank rule for information increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTolerance {
    pub rel_threshold: f64,
    pub abs_floor: f64,
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self { rel_threshold: 1e-7, abs_floor: 1e-12 }
    }
}

impl RankTolerance {
    pub fn check(&self) -> Result<(), SynthesisError> {
        if self.rel_threshold > 0.0 && self.abs_floor > 0.0 {
            Ok(())
        } else {
            Err(SynthesisError::Tolerance(*self))
        }
    }

    fn cutoff(&self, lambda_max: f64) -> f64 {
        (self.rel_threshold * lambda_max).max(self.abs_floor)
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("rank tolerance must be positive: {0:?}")]
    Tolerance(RankTolerance),
    #[error("information increment at step {step} has eigenvalue {eigenvalue:.3e} (scale {scale:.3e})")]
    NotPsd { step: usize, eigenvalue: f64, scale: f64 },
    #[error("covariance at step {step} is not positive definite")]
    Covariance { step: usize },
    #[error("singular innovation covariance at step {step}")]
    Innovation { step: usize },
    #[error("schedule has {got} steps, problem has {expected}")]
    Horizon { expected: usize, got: usize },
}

/// `Δ_t = P_post⁻¹ − P_prior⁻¹` with small negative eigenvalues clamped.
/// `t` is 0-based.
pub fn information_increment(schedule: &CovarianceSchedule, t: usize) -> Result<DMatrix<f64>, SynthesisError> {
    let step = t + 1;
    let post_inv = linalg::inv_pd(&schedule.p_post[t]).ok_or(SynthesisError::Covariance { step })?;
    let prior_inv = linalg::inv_pd(&schedule.p_prior[t]).ok_or(SynthesisError::Covariance { step })?;
    let delta = symmetrize(&(&post_inv - &prior_inv));
    let eig = SymmetricEigen::new(delta.clone());
    let lo = eig.eigenvalues.min();
    if lo >= 0.0 {
        return Ok(delta);
    }
    let scale = linalg::sym_eigenvalues(&post_inv).last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    if -lo > CLAMP_FAIL * scale {
        return Err(SynthesisError::NotPsd { step, eigenvalue: lo, scale });
    }
    if -lo > CLAMP_WARN * scale {
        log::warn!("step {step}: clamping information increment eigenvalue {lo:.3e} (scale {scale:.3e})");
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose())))
}

/// Canonical factorization `Δ = CᵀV⁻¹C` with `C = Λ_r^{1/2}U_rᵀ`, `V = I_r`.
///
/// Eigenvectors are ordered by decreasing eigenvalue and signed so their
/// largest-magnitude entry is positive.
pub fn factor_sensor(delta: &DMatrix<f64>, tol: RankTolerance) -> (usize, DMatrix<f64>, DMatrix<f64>) {
    let n = delta.nrows();
    let eig = SymmetricEigen::new(symmetrize(delta));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lambda_max = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let cutoff = tol.cutoff(lambda_max);
    let kept: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    let r = kept.len();
    let mut c = DMatrix::zeros(r, n);
    for (row, &i) in kept.iter().enumerate() {
        let mut u = eig.eigenvectors.column(i).into_owned();
        let pivot = u.iamax();
        if u[pivot] < 0.0 {
            u = -u;
        }
        let s = eig.eigenvalues[i].sqrt();
        for j in 0..n {
            c[(row, j)] = s * u[j];
        }
    }
    (r, c, DMatrix::identity(r, r))
}

/// `L_t = P_prior C_tᵀ (C_t P_prior C_tᵀ + V_t)⁻¹`; `n × 0` when `r_t = 0`.
pub fn kalman_gains(
    schedule: &CovarianceSchedule,
    sensors: &[(DMatrix<f64>, DMatrix<f64>)],
) -> Result<Vec<DMatrix<f64>>, SynthesisError> {
    sensors
        .iter()
        .enumerate()
        .map(|(t, (c, v))| {
            let p = &schedule.p_prior[t];
            if c.nrows() == 0 {
                return Ok(DMatrix::zeros(p.nrows(), 0));
            }
            let pct = p * c.transpose();
            let innovation = symmetrize(&(c * &pct + v));
            let chol = innovation.cholesky().ok_or(SynthesisError::Innovation { step: t + 1 })?;
            // L = P Cᵀ S⁻¹ = (S⁻¹ C P)ᵀ
            Ok(chol.solve(&pct.transpose()).transpose())
        })
        .collect()
}

/// Bundles sensors, Kalman gains and controller gains for `schedule`.
///
/// The rank cutoff is applied relative to the larger of `λ_max(Δ_t)` and
/// `λ_max(P_prior⁻¹)`, so increments that are negligible next to the prior
/// information do not produce sensing channels.
pub fn assemble_policy(
    spec: &ProblemSpec,
    tables: &RiccatiTables,
    schedule: &CovarianceSchedule,
    tol: RankTolerance,
) -> Result<SensorPolicy, SynthesisError> {
    tol.check()?;
    if schedule.horizon() != spec.horizon {
        return Err(SynthesisError::Horizon { expected: spec.horizon, got: schedule.horizon() });
    }
    let mut sensors = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let delta = information_increment(schedule, t)?;
        let prior_inv =
            linalg::inv_pd(&schedule.p_prior[t]).ok_or(SynthesisError::Covariance { step: t + 1 })?;
        let prior_scale = linalg::sym_eigenvalues(&prior_inv).last().copied().unwrap_or(0.0);
        let step_tol = RankTolerance { abs_floor: tol.abs_floor.max(tol.rel_threshold * prior_scale), ..tol };
        let (_, c, v) = factor_sensor(&delta, step_tol);
        sensors.push((c, v));
    }
    let l = kalman_gains(schedule, &sensors)?;
    let r = sensors.iter().map(|(c, _)| c.nrows()).collect();
    let (c, v) = sensors.into_iter().unzip();
    Ok(SensorPolicy { r, c, v, l, k: tables.k.clone() })
}

/// Prior and posterior covariances realized by `policy`, starting from
/// `P_init`. Posterior updates use the Joseph form.
pub fn propagate_covariances(spec: &ProblemSpec, policy: &SensorPolicy) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let mut prior = Vec::with_capacity(spec.horizon);
    let mut post = Vec::with_capacity(spec.horizon);
    let mut p = spec.p_init.clone();
    for t in 0..spec.horizon {
        let n = p.nrows();
        let updated = if policy.r[t] == 0 {
            p.clone()
        } else {
            let (c, v, l) = (&policy.c[t], &policy.v[t], &policy.l[t]);
            let i_lc = DMatrix::identity(n, n) - l * c;
            symmetrize(&(&i_lc * &p * i_lc.transpose() + l * v * l.transpose()))
        };
        let next = symmetrize(&(&spec.a[t] * &updated * spec.a[t].transpose() + &spec.w[t]));
        prior.push(p);
        post.push(updated);
        p = next;
    }
    (prior, post)
}

/// Per-step relative Frobenius error between realized and scheduled `P_post`.
pub fn round_trip_errors(spec: &ProblemSpec, policy: &SensorPolicy, schedule: &CovarianceSchedule) -> Vec<f64> {
    let (_, post) = propagate_covariances(spec, policy);
    post.iter().zip(&schedule.p_post).map(|(a, b)| rel_frobenius(a, b)).collect()
}
