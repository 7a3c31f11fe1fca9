//! Nadir-pointing spacecraft with magnetic torquers: linearized attitude
//! dynamics about the orbital frame, a periodic field model, and
//! zero-order-hold discretization.
//!
//! State `(φ, θ, ψ, ω_φ, ω_θ, ω_ψ)`, input the torquer dipole `(u_x, u_y, u_z)`.
//! With the field in µT, dipoles in A·m² and inertias in kg·m², torques are
//! in µN·m, so angles come out in µrad and rates in µrad/s.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_positive_definite, symmetrize};
use crate::model::{ModelError, ProblemSpec};

/// `offset + amplitude·cos(ω₀t + phase)` for one field axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldAxis {
    pub offset: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl FieldAxis {
    fn at(&self, omega: f64, t: f64) -> f64 {
        self.offset + self.amplitude * (omega * t + self.phase).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacecraftParams {
    /// ω₀ in rad/s.
    pub orbital_rate: f64,
    /// `(I_x, I_y, I_z)` in kg·m².
    pub inertia: [f64; 3],
    /// `b(t)` in orbital coordinates, µT; period `2π/ω₀`.
    pub field: [FieldAxis; 3],
    /// Continuous-time noise intensity for `(w_φ, w_θ, w_ψ, n_φ, n_θ, n_ψ)`.
    pub noise_intensity: Vec<Vec<f64>>,
    /// Seconds.
    pub sample_period: f64,
    pub horizon_minutes: f64,
    pub state_weight: Vec<Vec<f64>>,
    pub input_weight: Vec<Vec<f64>>,
    /// Information price per step; a single entry is broadcast.
    pub gamma: Vec<f64>,
    pub p_init: Vec<Vec<f64>>,
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    (0..v.len()).map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect()).collect()
}

impl Default for SpacecraftParams {
    /// Illustrative values: a small satellite in a 90-minute polar orbit
    /// with a tilted-dipole field, `b_x = β₁cos ω₀t`, `b_y = β₂`,
    /// `b_z = 2β₁sin ω₀t`.
    fn default() -> Self {
        let beta1 = 20.0;
        let beta2 = 5.0;
        Self {
            orbital_rate: 2.0 * PI / (90.0 * 60.0),
            inertia: [27.0, 17.0, 25.0],
            field: [
                FieldAxis { offset: 0.0, amplitude: beta1, phase: 0.0 },
                FieldAxis { offset: beta2, amplitude: 0.0, phase: 0.0 },
                FieldAxis { offset: 0.0, amplitude: 2.0 * beta1, phase: -PI / 2.0 },
            ],
            noise_intensity: diag(&[20.0, 20.0, 20.0, 2e-3, 2e-3, 2e-3]),
            sample_period: 120.0,
            horizon_minutes: 140.0,
            state_weight: diag(&[1e-6, 1e-6, 1e-6, 1e-2, 1e-2, 1e-2]),
            input_weight: diag(&[1.0, 1.0, 1.0]),
            gamma: vec![0.02],
            p_init: diag(&[1e6, 1e6, 1e6, 1.0, 1.0, 1.0]),
        }
    }
}

#[derive(Debug, Error)]
pub enum SpacecraftError {
    #[error("invalid parameter: {0}")]
    Params(String),
    #[error("discretized process noise W_{step} is not positive definite")]
    NonPDNoise { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn matrix(rows: &[Vec<f64>], n: usize, name: &str) -> Result<DMatrix<f64>, SpacecraftError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(SpacecraftError::Params(format!("{name} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl SpacecraftParams {
    pub fn check(&self) -> Result<(), SpacecraftError> {
        let bad = |msg: &str| Err(SpacecraftError::Params(msg.into()));
        if !(self.orbital_rate > 0.0 && self.orbital_rate.is_finite()) {
            return bad("orbital_rate must be positive");
        }
        if self.inertia.iter().any(|&i| !(i > 0.0 && i.is_finite())) {
            return bad("inertias must be positive");
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return bad("sample_period must be positive");
        }
        if self.gamma.is_empty() {
            return bad("gamma must have at least one entry");
        }
        self.horizon().map(|_| ())
    }

    /// `(σ_x, σ_y, σ_z)`.
    pub fn sigmas(&self) -> [f64; 3] {
        let [ix, iy, iz] = self.inertia;
        [(iy - iz) / ix, (iz - ix) / iy, (ix - iy) / iz]
    }

    pub fn field_at(&self, t: f64) -> [f64; 3] {
        self.field.map(|f| f.at(self.orbital_rate, t))
    }

    /// Number of sampling periods in the horizon.
    pub fn horizon(&self) -> Result<usize, SpacecraftError> {
        let steps = self.horizon_minutes * 60.0 / self.sample_period;
        let rounded = steps.round();
        if rounded < 1.0 || (steps - rounded).abs() > 1e-9 * steps.max(1.0) {
            return Err(SpacecraftError::Params("sample_period must divide the horizon".into()));
        }
        Ok(rounded as usize)
    }
}

/// `(A_c, B_c(t))` of the linearized attitude dynamics.
pub fn continuous_model(params: &SpacecraftParams, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let w0 = params.orbital_rate;
    let [sx, sy, sz] = params.sigmas();
    let [ix, iy, iz] = params.inertia;
    let mut a = DMatrix::zeros(6, 6);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    a[(3, 0)] = -4.0 * w0 * w0 * sx;
    a[(3, 5)] = w0 * (1.0 - sx);
    a[(4, 1)] = 3.0 * w0 * w0 * sy;
    a[(5, 2)] = w0 * w0 * sz;
    a[(5, 3)] = -w0 * (1.0 + sz);

    let [bx, by, bz] = params.field_at(t);
    let mut b = DMatrix::zeros(6, 3);
    b[(3, 1)] = bz / ix;
    b[(3, 2)] = -by / ix;
    b[(4, 0)] = -bz / iy;
    b[(4, 2)] = bx / iy;
    b[(5, 0)] = by / iz;
    b[(5, 1)] = -bx / iz;
    (a, b)
}

/// Zero-order hold over `h`: `A = e^{A_c h}`, `B = ∫₀ʰ e^{A_c s} ds · B_c`,
/// and `W = ∫₀ʰ e^{A_c s} Σ e^{A_cᵀ s} ds` by Van Loan's construction.
pub fn zoh(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    intensity: &DMatrix<f64>,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = a_c.nrows();
    let m = b_c.ncols();

    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a_c);
    aug.view_mut((0, n), (n, m)).copy_from(b_c);
    let e = (aug * h).exp();
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, m)).into_owned();

    let mut vl = DMatrix::zeros(2 * n, 2 * n);
    vl.view_mut((0, 0), (n, n)).copy_from(&(-a_c));
    vl.view_mut((0, n), (n, n)).copy_from(intensity);
    vl.view_mut((n, n), (n, n)).copy_from(&a_c.transpose());
    let f = (vl * h).exp();
    let g22 = f.view((n, n), (n, n)).transpose();
    let g12 = f.view((0, n), (n, n)).into_owned();
    let w = symmetrize(&(&g22 * g12));
    (a, b, w)
}

/// Discrete-time problem over the configured horizon, with `b(·)` frozen
/// at the midpoint of each sampling interval.
pub fn discretize_zoh(params: &SpacecraftParams) -> Result<ProblemSpec, SpacecraftError> {
    params.check()?;
    let horizon = params.horizon()?;
    let h = params.sample_period;
    let sigma = matrix(&params.noise_intensity, 6, "noise_intensity")?;
    let q = matrix(&params.state_weight, 6, "state_weight")?;
    let r = matrix(&params.input_weight, 3, "input_weight")?;
    let p_init = matrix(&params.p_init, 6, "p_init")?;
    let gamma = match params.gamma.len() {
        1 => vec![params.gamma[0]; horizon],
        l if l == horizon => params.gamma.clone(),
        l => return Err(SpacecraftError::Params(format!("gamma has {l} entries, expected 1 or {horizon}"))),
    };

    let (mut a, mut b, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..horizon {
        let (a_c, b_c) = continuous_model(params, (t as f64 + 0.5) * h);
        let (a_t, b_t, w_t) = zoh(&a_c, &b_c, &sigma, h);
        if !is_positive_definite(&w_t) {
            return Err(SpacecraftError::NonPDNoise { step: t + 1 });
        }
        a.push(a_t);
        b.push(b_t);
        w.push(w_t);
    }
    Ok(ProblemSpec::from_steps(a, b, w, vec![q; horizon], vec![r; horizon], gamma, p_init)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gravity_gradient_entry() {
        let p = SpacecraftParams::default();
        let w0 = 2.0 * PI / 5400.0;
        let (a, _) = continuous_model(&p, 0.0);
        assert_relative_eq!(a[(3, 0)], -4.0 * w0 * w0 * p.sigmas()[0], max_relative = 1e-15);
        assert_eq!(a[(5, 5)], 0.0);
    }

    #[test]
    fn symmetric_body_has_no_gravity_gradient() {
        let p = SpacecraftParams { inertia: [10.0; 3], ..SpacecraftParams::default() };
        assert_eq!(p.sigmas(), [0.0; 3]);
        let (a, _) = continuous_model(&p, 0.0);
        assert_eq!(a[(3, 0)], 0.0);
        assert_eq!(a[(4, 1)], 0.0);
        assert_eq!(a[(5, 2)], 0.0);
        assert_eq!(a[(3, 5)], p.orbital_rate);
    }

    #[test]
    fn input_matrix_pattern() {
        let z = FieldAxis { offset: 0.0, amplitude: 0.0, phase: 0.0 };
        let p = SpacecraftParams {
            field: [z, z, FieldAxis { offset: 3.0, ..z }],
            ..SpacecraftParams::default()
        };
        let (_, b) = continuous_model(&p, 100.0);
        let [ix, iy, _] = p.inertia;
        assert_eq!(b.rows(0, 3).norm(), 0.0);
        assert_eq!(b[(3, 1)], 3.0 / ix);
        assert_eq!(b[(4, 0)], -3.0 / iy);
        let nonzero = b.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn zero_dynamics_discretize_trivially() {
        let a_c = DMatrix::zeros(3, 3);
        let b_c = DMatrix::from_element(3, 1, 2.0);
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let (a, b, w) = zoh(&a_c, &b_c, &sigma, 0.5);
        assert!((a - DMatrix::identity(3, 3)).norm() < 1e-15);
        assert!((b - DMatrix::from_element(3, 1, 1.0)).norm() < 1e-15);
        assert!((w - sigma * 0.5).norm() < 1e-14);
    }

    #[test]
    fn van_loan_matches_scalar_closed_form() {
        let a_c = DMatrix::from_element(1, 1, -0.7);
        let (a, b, w) = zoh(&a_c, &DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 2.0), 1.3);
        let e = (-0.7f64 * 1.3).exp();
        assert_relative_eq!(a[(0, 0)], e, max_relative = 1e-14);
        assert_relative_eq!(b[(0, 0)], (1.0 - e) / 0.7, max_relative = 1e-13);
        assert_relative_eq!(w[(0, 0)], 2.0 * (1.0 - e * e) / 1.4, max_relative = 1e-13);
    }

    #[test]
    fn small_step_recovers_generator() {
        let p = SpacecraftParams::default();
        let (a_c, b_c) = continuous_model(&p, 0.0);
        let sigma = DMatrix::identity(6, 6);
        let mut prev = f64::INFINITY;
        for h in [1e-1, 1e-2, 1e-3] {
            let (a, _, _) = zoh(&a_c, &b_c, &sigma, h);
            let err = ((a - DMatrix::identity(6, 6)) / h - &a_c).norm();
            assert!(err <= 2.0 * h * a_c.norm_squared().max(1e-12) + 1e-12, "h={h} err={err}");
            assert!(err <= prev);
            prev = err;
        }
    }

    #[test]
    fn defaults_give_seventy_steps() {
        let p = SpacecraftParams::default();
        assert_eq!(p.horizon().unwrap(), 70);
        let spec = discretize_zoh(&p).unwrap();
        assert_eq!(spec.horizon, 70);
        assert!(spec.a.iter().all(|a| a.clone().try_inverse().is_some()));
    }

    #[test]
    fn field_uses_interval_midpoint() {
        let p = SpacecraftParams::default();
        let spec = discretize_zoh(&p).unwrap();
        let (a_c, b_c) = continuous_model(&p, 60.0);
        let sigma = matrix(&p.noise_intensity, 6, "").unwrap();
        let (_, b, _) = zoh(&a_c, &b_c, &sigma, 120.0);
        assert_eq!(spec.b[0], b);
    }

    #[test]
    fn rank_deficient_noise_is_rejected() {
        let mut p = SpacecraftParams::default();
        p.noise_intensity = diag(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(discretize_zoh(&p), Err(SpacecraftError::NonPDNoise { step: 1 })));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let p = SpacecraftParams { sample_period: 7.7, ..SpacecraftParams::default() };
        assert!(matches!(discretize_zoh(&p), Err(SpacecraftError::Params(_))));
        let p = SpacecraftParams { inertia: [1.0, -1.0, 1.0], ..SpacecraftParams::default() };
        assert!(p.check().is_err());
    }
}
