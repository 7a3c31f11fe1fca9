//! Backward Riccati recursion and the closed-form control costs built on it.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{self, symmetrize, trace_product};
use crate::model::{ProblemSpec, RiccatiTables};

#[derive(Debug, Error, PartialEq)]
pub enum RiccatiError {
    #[error("M_{step} = BᵀSB + R is not positive definite")]
    IllConditioned { step: usize },
    #[error("dimension mismatch at step {step}: {what}")]
    Dimension { step: usize, what: &'static str },
}

/// `S_T = Q_T`, `S_t = Q_t + N_{t+1}`, `M_t = B_tᵀS_tB_t + R_t`,
/// `N_t = A_tᵀ(S_t − S_tB_tM_t⁻¹B_tᵀS_t)A_t`, `K_t = −M_t⁻¹B_tᵀS_tA_t`,
/// `Θ_t = K_tᵀM_tK_t`.
pub fn riccati_backward(spec: &ProblemSpec) -> Result<RiccatiTables, RiccatiError> {
    let horizon = spec.horizon;
    let mut s = vec![DMatrix::zeros(0, 0); horizon];
    let mut m = s.clone();
    let mut n = s.clone();
    let mut k = s.clone();
    let mut theta = s.clone();

    for t in (0..horizon).rev() {
        let (a, b) = (&spec.a[t], &spec.b[t]);
        let s_t = if t + 1 == horizon { spec.q[t].clone() } else { symmetrize(&(&spec.q[t] + &n[t + 1])) };
        let m_t = symmetrize(&(b.transpose() * &s_t * b + &spec.r[t]));
        let chol = m_t.clone().cholesky().ok_or(RiccatiError::IllConditioned { step: t + 1 })?;
        let bt_s = b.transpose() * &s_t;
        // M⁻¹BᵀS, applied through the factorization.
        let minv_bt_s = chol.solve(&bt_s);
        let k_t = -(&minv_bt_s * a);
        let inner = &s_t - &bt_s.transpose() * &minv_bt_s;
        let n_t = symmetrize(&(a.transpose() * symmetrize(&inner) * a));
        let theta_t = symmetrize(&(k_t.transpose() * &m_t * &k_t));
        s[t] = s_t;
        m[t] = m_t;
        n[t] = n_t;
        k[t] = k_t;
        theta[t] = theta_t;
    }
    Ok(RiccatiTables { s, m, n, k, theta })
}

/// Minimum expected control cost for a fixed sensing schedule:
/// `½Tr(N_1P_init) + ½Σ_k [Tr(W_kS_k) + Tr(Θ_kP_post_k)]`.
pub fn analytic_min_control_cost(
    spec: &ProblemSpec,
    tables: &RiccatiTables,
    p_post: &[DMatrix<f64>],
) -> Result<f64, RiccatiError> {
    if tables.horizon() != spec.horizon || p_post.len() != spec.horizon {
        return Err(RiccatiError::Dimension { step: 0, what: "horizon" });
    }
    for (t, p) in p_post.iter().enumerate() {
        if p.shape() != tables.theta[t].shape() {
            return Err(RiccatiError::Dimension { step: t + 1, what: "P_post vs Theta" });
        }
    }
    let mut total = 0.5 * trace_product(&tables.n[0], &spec.p_init);
    for t in 0..spec.horizon {
        total += 0.5 * (trace_product(&spec.w[t], &tables.s[t]) + trace_product(&tables.theta[t], &p_post[t]));
    }
    Ok(total)
}

/// Cost of exact state feedback: the analytic control cost with `P_post = 0`.
pub fn full_information_cost(spec: &ProblemSpec, tables: &RiccatiTables) -> f64 {
    let mut total = 0.5 * trace_product(&tables.n[0], &spec.p_init);
    for t in 0..spec.horizon {
        total += 0.5 * trace_product(&spec.w[t], &tables.s[t]);
    }
    total
}

/// The constant added to the max-det objective:
///
/// ```text
/// C = Σ_{t<T} [ (γ_t n_t / 2) ln(γ_{t+1}/γ_t) + (γ_t / 2) ln det W_t ]
///     + (γ_1 / 2) ln det P_init + ½Tr(N_1 P_init) + ½ Σ_t Tr(W_t S_t)
/// ```
///
/// Natural logarithms throughout.
pub fn constant_c(spec: &ProblemSpec, tables: &RiccatiTables) -> f64 {
    let g = &spec.gamma;
    let mut c = 0.0;
    for t in 0..spec.horizon.saturating_sub(1) {
        c += 0.5 * g[t] * spec.n(t) as f64 * (g[t + 1] / g[t]).ln();
        c += 0.5 * g[t] * linalg::log_det_pd(&spec.w[t]).unwrap_or(f64::NAN);
    }
    c += 0.5 * g[0] * linalg::log_det_pd(&spec.p_init).unwrap_or(f64::NAN);
    c + full_information_cost(spec, tables)
}
