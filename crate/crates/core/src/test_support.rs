//! Instance generators shared by unit tests, integration tests and the
//! acceptance suite.

use nalgebra::DMatrix;
use rand::Rng;

use crate::model::ProblemSpec;

fn s(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Time-invariant scalar problem.
#[allow(clippy::too_many_arguments)]
pub fn scalar_spec(horizon: usize, a: f64, b: f64, w: f64, q: f64, r: f64, gamma: f64, p_init: f64) -> ProblemSpec {
    ProblemSpec::time_invariant(horizon, s(a), s(b), s(w), s(q), s(r), gamma, s(p_init)).expect("valid scalar spec")
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale)
}

fn random_spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, n, 1.0);
    &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

/// Random time-varying problem with fixed state dimension `n`, input
/// dimension in `1..=n`, and a constant information price.
pub fn random_spec<R: Rng>(rng: &mut R, n: usize, horizon: usize) -> ProblemSpec {
    let m = rng.random_range(1..=n);
    let gamma = rng.random_range(0.2..2.0);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut w = Vec::new();
    let mut q = Vec::new();
    let mut r = Vec::new();
    for _ in 0..horizon {
        a.push(gaussian_matrix(rng, n, n, 1.2 / (n as f64).sqrt()));
        b.push(gaussian_matrix(rng, n, m, 1.0));
        w.push(random_spd(rng, n, 0.1));
        q.push(random_spd(rng, n, 0.05));
        r.push(random_spd(rng, m, 0.2));
    }
    let p_init = random_spd(rng, n, 0.3);
    ProblemSpec::from_steps(a, b, w, q, r, vec![gamma; horizon], p_init).expect("valid random spec")
}

/// Random scalar problem (`n_t = m_t = 1`) with constant information price.
pub fn random_scalar_spec<R: Rng>(rng: &mut R, horizon: usize) -> ProblemSpec {
    let gamma = rng.random_range(0.2..2.0);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut w = Vec::new();
    let mut q = Vec::new();
    let mut r = Vec::new();
    for _ in 0..horizon {
        a.push(s(rng.random_range(-1.5..1.5)));
        b.push(s(rng.random_range(0.3..1.5)));
        w.push(s(rng.random_range(0.1..1.5)));
        q.push(s(rng.random_range(0.1..3.0)));
        r.push(s(rng.random_range(0.1..2.0)));
    }
    let p_init = s(rng.random_range(0.3..3.0));
    ProblemSpec::from_steps(a, b, w, q, r, vec![gamma; horizon], p_init).expect("valid random scalar spec")
}

/// Random orthogonal matrix (QR of a random square matrix).
pub fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, n, n, 1.0).qr().q()
}
