//! Small dense linear-algebra helpers shared by the synthesis pipeline.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`; matrices are small
//! (state dimension well under 100), so clarity wins over blocking.

use nalgebra::{DMatrix, SymmetricEigen};

/// Relative threshold for the positive-definiteness test.
pub const PD_THRESHOLD: f64 = 1e-10;

/// Largest relative asymmetry silently removed by symmetrization.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `‖M − Mᵀ‖_F / max(1, ‖M‖_F)`, or infinity for a non-square matrix.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

/// Scale-aware positive-definiteness test:
/// `λ_min > δ · (1 + max |λ|)` with `δ = PD_THRESHOLD`.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let ev = sym_eigenvalues(m);
    if ev.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    ev.first().is_none_or(|&lo| lo > PD_THRESHOLD * (1.0 + scale))
}

/// Positive semidefinite up to the same relative threshold.
pub fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    let ev = sym_eigenvalues(m);
    if ev.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    ev.first().is_none_or(|&lo| lo >= -PD_THRESHOLD * (1.0 + scale))
}

/// `log det` of a symmetric positive definite matrix via Cholesky.
/// Returns `None` when the factorization fails.
pub fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let chol = symmetrize(m).cholesky()?;
    let l = chol.l_dirty();
    Some(2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn inv_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let chol = symmetrize(m).cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// Solve `M X = B` for symmetric positive definite `M`.
pub fn solve_pd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky()?;
    Some(chol.solve(rhs))
}

/// Symmetric square root of a PSD matrix through its spectral
/// factorization; negative rounding noise is clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    symmetrize(&(&scaled * eig.eigenvectors.transpose()))
}

/// `Tr(A B)` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Relative Frobenius distance `‖A − B‖ / max(‖B‖, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

/// Convert row-major nested rows into a matrix; `None` on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double-double accumulator for compensated sums of products.
#[derive(Default, Clone, Copy)]
struct Acc {
    hi: f64,
    lo: f64,
}

impl Acc {
    fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        self.hi = s;
        self.lo += e;
    }

    fn add_prod(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.add(p);
        self.lo += a.mul_add(b, -p);
    }

    fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// `A P Aᵀ + W − Q` evaluated with compensated arithmetic, so a small gap
/// between nearly equal covariances keeps its relative accuracy.
pub fn propagation_gap(a: &DMatrix<f64>, p: &DMatrix<f64>, w: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = a.shape();
    // A P as a double-double pair.
    let mut ap_hi = DMatrix::zeros(n, k);
    let mut ap_lo = DMatrix::zeros(n, k);
    for i in 0..n {
        for l in 0..k {
            let mut acc = Acc::default();
            for m in 0..k {
                acc.add_prod(a[(i, m)], p[(m, l)]);
            }
            let (hi, lo) = two_sum(acc.hi, acc.lo);
            ap_hi[(i, l)] = hi;
            ap_lo[(i, l)] = lo;
        }
    }
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = Acc::default();
            for l in 0..k {
                acc.add_prod(ap_hi[(i, l)], a[(j, l)]);
                acc.lo += ap_lo[(i, l)] * a[(j, l)];
            }
            acc.add(w[(i, j)]);
            acc.add(-q[(i, j)]);
            out[(i, j)] = acc.value();
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}

/// `ln det(Q + D) − ln det Q` for `Q ≻ 0` and symmetric `D`, accurate
/// relative to the result when `D` is small.
pub fn log_det_increase(q: &DMatrix<f64>, d: &DMatrix<f64>) -> Option<f64> {
    let l = symmetrize(q).cholesky()?.unpack();
    let half = l.solve_lower_triangular(d)?;
    let e = l.solve_lower_triangular(&half.transpose())?;
    let ev = sym_eigenvalues(&e);
    if ev.iter().any(|&v| !(v > -1.0)) {
        return None;
    }
    Some(ev.iter().map(|v| v.ln_1p()).sum())
}
