//! Covariance scheduling as a determinant-maximization program.
//!
//! Variables are the posterior covariances `P_t` (`t = 1..T`) and the
//! auxiliary matrices `Π_t` (`t < T`); `Π_T` is replaced by `P_T`. The
//! program is
//!
//! ```text
//! minimize   Σ_t ½Tr(Θ_t P_t) − Σ_{t<T} (γ_{t+1}/2) ln det Π_t
//!            − Σ_{t<T} ((γ_t − γ_{t+1})/2) ln det P_t − (γ_T/2) ln det P_T + const
//! subject to Π_t ⪰ εI (t < T),  P_T ⪰ εI,  P_1 ⪯ P_init,
//!            P_{t+1} ⪯ A_t P_t A_tᵀ + W_t,
//!            [P_t − Π_t, P_t A_tᵀ; A_t P_t, W_t + A_t P_t A_tᵀ] ⪰ 0   (t < T).
//! ```
//!
//! With constant γ the middle sum vanishes. The solver is a primal
//! path-following barrier method: each centering problem
//! `τ·f(x) − Σ ln det F_i(x)` is minimized by damped Newton steps, then
//! `τ` grows geometrically until the duality-gap bound `m/τ` (m = total
//! size of the constraint LMIs) meets the optimality tolerance.

mod barrier;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dd::{self, Dd, DdMatrix};
use crate::linalg::{self, symmetrize, trace_product};
use crate::model::{self, CovarianceSchedule, ProblemSpec, RiccatiTables, SolverDiagnostics};
use crate::riccati;
use barrier::{AffineMatrix, BlockTridiag, Point, Term, TermEval, TermKind, VarSlot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tol_feasibility: f64,
    /// Relative duality-gap target (absolute once |objective| exceeds 1).
    pub tol_optimality: f64,
    /// Cap on the total number of Newton steps.
    pub max_iterations: usize,
    /// Factor applied to `1/τ` after each centering, in (0, 1).
    pub barrier_reduction: f64,
    /// `Π_t ⪰ εI` shift; `None` selects `1e-9 · tr(P_init)/n_1`.
    pub epsilon: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_feasibility: 1e-8,
            tol_optimality: 1e-7,
            max_iterations: 200,
            barrier_reduction: 0.2,
            epsilon: None,
        }
    }
}

impl SolverSettings {
    pub fn check(&self) -> Result<(), SolveError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tol_feasibility) || !positive(self.tol_optimality) {
            return Err(SolveError::Settings("tolerances must be positive".into()));
        }
        if !(self.barrier_reduction > 0.0 && self.barrier_reduction < 1.0) {
            return Err(SolveError::Settings("barrier_reduction must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(SolveError::Settings("max_iterations must be positive".into()));
        }
        if let Some(eps) = self.epsilon {
            if !positive(eps) {
                return Err(SolveError::Settings("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error(
        "gamma increases from step {step} to {} (nonconvex information cost); only nonincreasing profiles are supported",
        .step + 1
    )]
    IncreasingGamma { step: usize },
    #[error("initial point is not strictly feasible (epsilon too large?): {0}")]
    InfeasibleStart(String),
    #[error("no convergence after {} Newton steps (gap bound {:.3e})", .0.diagnostics.iterations, .0.diagnostics.optimality_residual)]
    MaxIterations(Box<CovarianceSchedule>),
    #[error("Newton system could not be factored")]
    Numerical,
    #[error(transparent)]
    Riccati(#[from] riccati::RiccatiError),
}

/// Data of the covariance-scheduling program.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxDetProblem {
    pub horizon: usize,
    /// `n_1 … n_T`.
    pub dims: Vec<usize>,
    pub theta: Vec<DMatrix<f64>>,
    pub gamma: Vec<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    pub p_init: DMatrix<f64>,
    pub epsilon: f64,
    /// Constant making the objective equal `J_info + min J_cont` at optimal `Π`.
    pub constant: f64,
    /// The footnote constant `C`; equals `constant` for constant γ.
    pub constant_c: f64,
    /// `½Tr(N_1 P_init) + ½Σ Tr(W_t S_t)`.
    pub control_offset: f64,
}

pub fn default_epsilon(spec: &ProblemSpec) -> f64 {
    1e-9 * spec.p_init.trace() / spec.n(0) as f64
}

/// Encodes the scheduling program for `spec` with Riccati data `tables`.
pub fn build_maxdet(spec: &ProblemSpec, tables: &RiccatiTables, settings: &SolverSettings) -> MaxDetProblem {
    let horizon = spec.horizon;
    let g = &spec.gamma;
    let control_offset = riccati::full_information_cost(spec, tables);
    let mut constant = control_offset + 0.5 * g[0] * linalg::log_det_pd(&spec.p_init).unwrap_or(f64::NAN);
    for t in 0..horizon.saturating_sub(1) {
        constant += 0.5 * g[t + 1] * linalg::log_det_pd(&spec.w[t]).unwrap_or(f64::NAN);
    }
    MaxDetProblem {
        horizon,
        dims: spec.state_dims[..horizon].to_vec(),
        theta: tables.theta.clone(),
        gamma: g.clone(),
        a: spec.a.clone(),
        w: spec.w.clone(),
        p_init: spec.p_init.clone(),
        epsilon: settings.epsilon.unwrap_or_else(|| default_epsilon(spec)),
        constant,
        constant_c: riccati::constant_c(spec, tables),
        control_offset,
    }
}

#[derive(Clone)]
struct Layout {
    p: Vec<VarSlot>,
    pi: Vec<Option<VarSlot>>,
    block_sizes: Vec<usize>,
    block_start: Vec<usize>,
}

impl Layout {
    fn total(&self) -> usize {
        *self.block_start.last().unwrap_or(&0)
    }

    fn pi_or_p(&self, t: usize) -> VarSlot {
        self.pi[t].unwrap_or(self.p[t])
    }
}

impl MaxDetProblem {
    fn layout(&self) -> Layout {
        let mut p = Vec::with_capacity(self.horizon);
        let mut pi = Vec::with_capacity(self.horizon);
        let mut block_sizes = Vec::with_capacity(self.horizon);
        let mut block_start = vec![0];
        for t in 0..self.horizon {
            let n = self.dims[t];
            let d = n * (n + 1) / 2;
            p.push(VarSlot { block: t, offset: 0, n });
            let size = if t + 1 < self.horizon {
                pi.push(Some(VarSlot { block: t, offset: d, n }));
                2 * d
            } else {
                pi.push(None);
                d
            };
            block_sizes.push(size);
            block_start.push(block_start[t] + size);
        }
        Layout { p, pi, block_sizes, block_start }
    }

    /// Number of scalar decision variables after eliminating `Π_T`.
    pub fn num_variables(&self) -> usize {
        self.layout().total()
    }

    /// Total size `m` of the constraint LMIs (the duality-gap numerator).
    pub fn barrier_dimension(&self) -> usize {
        self.terms(&self.layout())
            .iter()
            .filter(|t| t.kind == TermKind::Constraint)
            .map(|t| t.map.dim())
            .sum()
    }

    fn terms(&self, lay: &Layout) -> Vec<Term> {
        let horizon = self.horizon;
        let mut terms = Vec::new();
        let ident = |e: &DMatrix<f64>| e.clone();
        let neg = |e: &DMatrix<f64>| -e;

        for t in 0..horizon {
            let n = self.dims[t];
            let slot = lay.pi_or_p(t);
            let mut f = AffineMatrix::new(-DMatrix::identity(n, n) * self.epsilon);
            f.add_var(slot, ident);
            terms.push(Term { kind: TermKind::Constraint, label: format!("Pi_{} >= eps I", t + 1), map: f });
        }

        let mut f = AffineMatrix::new(self.p_init.clone());
        f.add_var(lay.p[0], neg);
        terms.push(Term { kind: TermKind::Constraint, label: "P_1 <= P_init".into(), map: f });

        for t in 0..horizon.saturating_sub(1) {
            let a = &self.a[t];
            let at = a.transpose();
            let mut f = AffineMatrix::new(self.w[t].clone());
            f.add_var(lay.p[t], |e| a * e * &at);
            f.add_var(lay.p[t + 1], neg);
            terms.push(Term {
                kind: TermKind::Constraint,
                label: format!("P_{} <= A P_{} A' + W", t + 2, t + 1),
                map: f,
            });

            let (n, n_next) = (self.dims[t], a.nrows());
            let mut constant = DMatrix::zeros(n + n_next, n + n_next);
            constant.view_mut((n, n), (n_next, n_next)).copy_from(&self.w[t]);
            let mut f = AffineMatrix::new(constant);
            f.add_var(lay.p[t], |e| {
                let mut blk = DMatrix::zeros(n + n_next, n + n_next);
                let ae = a * e;
                blk.view_mut((0, 0), (n, n)).copy_from(e);
                blk.view_mut((n, 0), (n_next, n)).copy_from(&ae);
                blk.view_mut((0, n), (n, n_next)).copy_from(&ae.transpose());
                blk.view_mut((n, n), (n_next, n_next)).copy_from(&(&ae * &at));
                blk
            });
            f.add_var(lay.pi[t].expect("Pi slot for t < T"), |e| {
                let mut blk = DMatrix::zeros(n + n_next, n + n_next);
                blk.view_mut((0, 0), (n, n)).copy_from(&(-e));
                blk
            });
            terms.push(Term { kind: TermKind::Constraint, label: format!("Schur block {}", t + 1), map: f });
        }

        for t in 0..horizon {
            let n = self.dims[t];
            let zero = || AffineMatrix::new(DMatrix::zeros(n, n));
            if t + 1 < horizon {
                let mut f = zero();
                f.add_var(lay.pi[t].expect("Pi slot for t < T"), ident);
                terms.push(Term {
                    kind: TermKind::Objective { weight: 0.5 * self.gamma[t + 1] },
                    label: format!("logdet Pi_{}", t + 1),
                    map: f,
                });
                let drop = 0.5 * (self.gamma[t] - self.gamma[t + 1]);
                if drop != 0.0 {
                    let mut f = zero();
                    f.add_var(lay.p[t], ident);
                    terms.push(Term {
                        kind: TermKind::Objective { weight: drop },
                        label: format!("logdet P_{}", t + 1),
                        map: f,
                    });
                }
            } else {
                let mut f = zero();
                f.add_var(lay.p[t], ident);
                terms.push(Term {
                    kind: TermKind::Objective { weight: 0.5 * self.gamma[t] },
                    label: format!("logdet P_{}", t + 1),
                    map: f,
                });
            }
        }
        terms
    }

    /// Gradient of the linear part `Σ ½Tr(Θ_t P_t)` in coordinates.
    fn linear_cost(&self, lay: &Layout) -> DVector<f64> {
        let mut c = DVector::zeros(lay.total());
        for t in 0..self.horizon {
            let slot = lay.p[t];
            let base = lay.block_start[t] + slot.offset;
            for (k, (i, j)) in barrier::sym_pairs(slot.n).into_iter().enumerate() {
                c[base + k] = if i == j { 0.5 * self.theta[t][(i, i)] } else { self.theta[t][(i, j)] };
            }
        }
        c
    }

    fn pack(&self, lay: &Layout, p_post: &[DMatrix<f64>], pi: &[DMatrix<f64>]) -> DVector<f64> {
        let mut x = DVector::zeros(lay.total());
        for t in 0..self.horizon {
            lay.p[t].write(&mut x, &lay.block_start, &p_post[t]);
            if let Some(slot) = lay.pi[t] {
                slot.write(&mut x, &lay.block_start, &pi[t]);
            }
        }
        x
    }

    fn unpack(&self, lay: &Layout, x: &DVector<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let p: Vec<DMatrix<f64>> = lay.p.iter().map(|s| s.read(x, &lay.block_start)).collect();
        let pi = (0..self.horizon).map(|t| lay.pi_or_p(t).read(x, &lay.block_start)).collect();
        (p, pi)
    }

    /// Objective value (including the constant) at `(P, Π)`, or `None`
    /// outside the domain of the log-det terms. `pi` may have `T − 1` or
    /// `T` entries; `Π_T` is always taken as `P_T`.
    ///
    /// The log-det terms are regrouped as
    /// `γ₁/2 ln(det P_init / det P₁) + Σ γ_{t+1}/2 ln(det W_t det P_t / (det Π_t det P_{t+1}))`
    /// and each ratio is formed in double-double arithmetic, so large `γ`
    /// does not amplify rounding of terms that cancel.
    pub fn objective(&self, p_post: &[DMatrix<f64>], pi: &[DMatrix<f64>]) -> Option<f64> {
        let pi_dets = (0..self.horizon.saturating_sub(1))
            .map(|t| {
                linalg::min_eigenvalue(&pi[t]).gt(&0.0).then_some(())?;
                DdMatrix::from_f64(&pi[t]).determinant()
            })
            .collect::<Option<Vec<_>>>()?;
        self.regrouped_objective(p_post, &pi_dets)
    }

    /// Objective at `(P, Π_sat(P))` with `Π_sat = (P⁻¹ + AᵀW⁻¹A)⁻¹` formed in
    /// double-double arithmetic. This is the value of the best feasible `Π`
    /// for the given `P`.
    pub fn saturated_objective(&self, p_post: &[DMatrix<f64>]) -> Option<f64> {
        let pi_dets = (0..self.horizon.saturating_sub(1))
            .map(|t| {
                let p = DdMatrix::from_f64(&p_post[t]);
                let w = DdMatrix::from_f64(&self.w[t]);
                let a = DdMatrix::from_f64(&self.a[t]);
                let n = p.rows;
                let info = p.solve(&DdMatrix::identity(n))?.add(&a.transpose().mul(&w.solve(&a)?));
                let (m, e) = info.determinant()?;
                Some((Dd::ONE / m, -e))
            })
            .collect::<Option<Vec<_>>>()?;
        self.regrouped_objective(p_post, &pi_dets)
    }

    fn regrouped_objective(&self, p_post: &[DMatrix<f64>], pi_dets: &[(Dd, i64)]) -> Option<f64> {
        let det = |m: &DMatrix<f64>| -> Option<(Dd, i64)> {
            linalg::is_positive_definite(m).then_some(())?;
            DdMatrix::from_f64(m).determinant()
        };
        let mul = |x: (Dd, i64), y: (Dd, i64)| (x.0 * y.0, x.1 + y.1);
        let p_dets = p_post[..self.horizon].iter().map(det).collect::<Option<Vec<_>>>()?;
        let mut f = self.control_cost(p_post);
        f += 0.5 * self.gamma[0] * dd::ln_ratio(det(&self.p_init)?, p_dets[0])?;
        for t in 0..self.horizon.saturating_sub(1) {
            let num = mul(det(&self.w[t])?, p_dets[t]);
            let den = mul(pi_dets[t], p_dets[t + 1]);
            f += 0.5 * self.gamma[t + 1] * dd::ln_ratio(num, den)?;
        }
        Some(f)
    }

    /// Smallest eigenvalue of every constraint slack at `(P, Π)`.
    pub fn constraint_slacks(&self, p_post: &[DMatrix<f64>], pi: &[DMatrix<f64>]) -> Vec<(String, f64)> {
        let lay = self.layout();
        let x = Point::new(self.pack(&lay, p_post, pi));
        self.terms(&lay)
            .iter()
            .filter(|t| t.kind == TermKind::Constraint)
            .map(|t| (t.label.clone(), linalg::min_eigenvalue(&t.map.eval(&x, &lay.block_start))))
            .collect()
    }

    /// Strictly feasible starting point: `P_1 = ½P_init`,
    /// `P_{t+1} = ½(A_tP_tA_tᵀ + W_t)`, `Π_t = ½(P_t⁻¹ + A_tᵀW_t⁻¹A_t)⁻¹`.
    pub fn initial_point(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut p = Vec::with_capacity(self.horizon);
        p.push(&self.p_init * 0.5);
        for t in 0..self.horizon - 1 {
            let a = &self.a[t];
            p.push(symmetrize(&((a * &p[t] * a.transpose() + &self.w[t]) * 0.5)));
        }
        let mut pi = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            if t + 1 < self.horizon {
                pi.push(saturating_pi(&p[t], &self.a[t], &self.w[t]) * 0.5);
            } else {
                pi.push(p[t].clone());
            }
        }
        (p, pi)
    }

    /// `Σ_t (γ_t/2)(ln det P_prior_t − ln det P_post_t)` for a schedule.
    fn info_cost(&self, p_post: &[DMatrix<f64>]) -> f64 {
        model::information_rates(&self.a, &self.w, &self.p_init, p_post).iter().zip(&self.gamma).map(|(r, g)| g * r).sum()
    }

    fn control_cost(&self, p_post: &[DMatrix<f64>]) -> f64 {
        self.control_offset
            + 0.5 * self.theta.iter().zip(p_post).map(|(th, p)| trace_product(th, p)).sum::<f64>()
    }

    fn priors(&self, p_post: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let mut out = vec![self.p_init.clone()];
        for t in 1..self.horizon {
            let a = &self.a[t - 1];
            out.push(symmetrize(&(a * &p_post[t - 1] * a.transpose() + &self.w[t - 1])));
        }
        out
    }
}

/// The largest `Π` allowed by the Schur block: `(P⁻¹ + AᵀW⁻¹A)⁻¹`.
pub fn saturating_pi(p: &DMatrix<f64>, a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let p_inv = linalg::inv_pd(p).expect("P positive definite");
    let w_inv_a = linalg::solve_pd(w, a).expect("W positive definite");
    linalg::inv_pd(&symmetrize(&(p_inv + a.transpose() * w_inv_a))).expect("positive definite")
}

struct Engine<'a> {
    lay: Layout,
    terms: Vec<Term>,
    c: DVector<f64>,
    problem: &'a MaxDetProblem,
}

impl Engine<'_> {
    fn factor_all(&self, x: &Point) -> Option<Vec<TermEval>> {
        self.terms.iter().map(|t| t.factor(x, &self.lay.block_start)).collect()
    }

    fn weight(kind: TermKind, tau: f64) -> f64 {
        match kind {
            TermKind::Constraint => 1.0,
            TermKind::Objective { weight } => tau * weight,
        }
    }

    /// Eigenvalues of `L_i⁻¹ F_i'(d) L_i⁻ᵀ` for every term, with
    /// `F_i(x) = L_i L_iᵀ`. Along the ray `x + s·d` each log-det changes by
    /// `Σ ln(1 + sμ)`, which is exact and free of cancellation.
    fn directional(&self, evals: &[TermEval], d: &DVector<f64>) -> Vec<DVector<f64>> {
        self.terms
            .iter()
            .zip(evals)
            .map(|(term, ev)| {
                let y = Term::whiten(ev, &term.map.direction(d, &self.lay.block_start));
                y.symmetric_eigenvalues()
            })
            .collect()
    }

    /// `φ(x + s·d) − φ(x)` for the centering function
    /// `φ = τ f − Σ ln det F_i`; `None` if the step leaves the domain.
    fn phi_change(&self, mus: &[DVector<f64>], c_dot_d: f64, tau: f64, s: f64) -> Option<f64> {
        let mut v = tau * s * c_dot_d;
        for (term, mu) in self.terms.iter().zip(mus) {
            let mut ld = 0.0;
            for &m in mu.iter() {
                if !(1.0 + s * m > 0.0) {
                    return None;
                }
                ld += (s * m).ln_1p();
            }
            v -= Self::weight(term.kind, tau) * ld;
        }
        v.is_finite().then_some(v)
    }

    fn objective(&self, x: &Point) -> Option<f64> {
        let evals = self.factor_all(x)?;
        let mut v = self.c.dot(&x.value()) + self.problem.constant;
        for (term, ev) in self.terms.iter().zip(&evals) {
            if let TermKind::Objective { weight } = term.kind {
                v -= weight * Term::log_det(ev);
            }
        }
        Some(v)
    }

    fn split(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.lay.block_sizes.len())
            .map(|b| v.rows(self.lay.block_start[b], self.lay.block_sizes[b]).into_owned())
            .collect()
    }

    fn gradient_hessian(&self, x: &Point, tau: f64) -> Option<(DVector<f64>, BlockTridiag)> {
        let evals = self.factor_all(x)?;
        self.gradient_hessian_at(&evals, tau)
    }

    fn gradient_hessian_at(&self, evals: &[TermEval], tau: f64) -> Option<(DVector<f64>, BlockTridiag)> {
        let mut g = &self.c * tau;
        let mut h = BlockTridiag::zeros(&self.lay.block_sizes);
        for (term, ev) in self.terms.iter().zip(evals) {
            let alpha = Self::weight(term.kind, tau);
            let ys = term.whitened(ev);
            let coords = &term.map.coords;
            for (k, yk) in ys.iter().enumerate() {
                let gk = coords[k];
                g[self.lay.block_start[gk.0] + gk.1] -= alpha * yk.trace();
                for (l, yl) in ys.iter().enumerate() {
                    let gl = coords[l];
                    if gl.0 < gk.0 || (gl.0 == gk.0 && l < k) {
                        continue;
                    }
                    let hkl = alpha * yk.dot(yl);
                    h.add(gk, gl, hkl);
                    if gl.0 == gk.0 && l != k {
                        h.add(gl, gk, hkl);
                    }
                }
            }
        }
        Some((g, h))
    }

    fn newton_direction(&self, g: &DVector<f64>, h: &BlockTridiag) -> Option<DVector<f64>> {
        let rhs: Vec<DVector<f64>> = self.split(&(-g));
        let mut shift = 0.0;
        let scale = h.diag.iter().map(|d| d.diagonal().amax()).fold(0.0, f64::max).max(1.0);
        for _ in 0..8 {
            let attempt = if shift == 0.0 {
                h.solve(&rhs)
            } else {
                let mut hs = h.clone();
                for d in &mut hs.diag {
                    for i in 0..d.nrows() {
                        d[(i, i)] += shift;
                    }
                }
                hs.solve(&rhs)
            };
            if let Some(parts) = attempt {
                let mut out = DVector::zeros(self.lay.total());
                for (b, part) in parts.iter().enumerate() {
                    out.rows_mut(self.lay.block_start[b], part.len()).copy_from(part);
                }
                return Some(out);
            }
            shift = if shift == 0.0 { 1e-14 * scale } else { shift * 100.0 };
        }
        None
    }

    fn min_constraint_eig(&self, x: &Point) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.kind == TermKind::Constraint)
            .map(|t| linalg::min_eigenvalue(&t.map.eval(x, &self.lay.block_start)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Solves the scheduling program and returns the optimal covariance
/// schedule with its cost decomposition.
pub fn solve_schedule(problem: &MaxDetProblem, settings: &SolverSettings) -> Result<CovarianceSchedule, SolveError> {
    settings.check()?;
    for t in 0..problem.horizon.saturating_sub(1) {
        let (g0, g1) = (problem.gamma[t], problem.gamma[t + 1]);
        if g1 > g0 * (1.0 + 1e-12) {
            return Err(SolveError::IncreasingGamma { step: t + 1 });
        }
    }
    let lay = problem.layout();
    let engine = Engine { terms: problem.terms(&lay), c: problem.linear_cost(&lay), lay, problem };
    let m_dim: usize = engine
        .terms
        .iter()
        .filter(|t| t.kind == TermKind::Constraint)
        .map(|t| t.map.dim())
        .sum();

    let (p0, pi0) = problem.initial_point();
    let mut x = Point::new(problem.pack(&engine.lay, &p0, &pi0));
    if engine.factor_all(&x).is_none() {
        return Err(SolveError::InfeasibleStart(format!(
            "min slack eigenvalue {:.3e} with epsilon {:.3e}",
            engine.min_constraint_eig(&x),
            problem.epsilon
        )));
    }

    let mut tau = initial_tau(&engine, &x);
    let mut iterations = 0usize;
    let mut outer = 0usize;
    let mu = 1.0 / settings.barrier_reduction;
    let mut converged = false;

    // Centering stops early at λ² ≤ LOOSE; f(x) − f(x*(τ)) ≤ λ²/τ then
    // bounds the extra suboptimality. The last center is polished tightly so
    // the dual estimates F⁻¹/τ are accurate.
    const LOOSE: f64 = 1e-3;
    const TIGHT: f64 = 1e-10;
    let mut polish = false;
    'outer: loop {
        outer += 1;
        let stop = if polish { TIGHT } else { LOOSE };
        let mut decrement_sq;
        let mut prev_sq = f64::INFINITY;
        let mut stalls = 0;
        loop {
            if iterations >= settings.max_iterations {
                break 'outer;
            }
            let evals = engine.factor_all(&x).ok_or(SolveError::Numerical)?;
            let (g, h) = engine.gradient_hessian_at(&evals, tau).ok_or(SolveError::Numerical)?;
            let dx = engine.newton_direction(&g, &h).ok_or(SolveError::Numerical)?;
            decrement_sq = -g.dot(&dx);
            if !(decrement_sq.is_finite()) {
                return Err(SolveError::Numerical);
            }
            // A λ² that stops halving signals the rounding floor: once in the
            // polish phase, after a few tries while centering.
            if decrement_sq <= stop {
                break;
            }
            if decrement_sq > 0.5 * prev_sq {
                stalls += 1;
                if polish || stalls >= 5 {
                    break;
                }
            } else {
                stalls = 0;
            }
            prev_sq = prev_sq.min(decrement_sq);
            iterations += 1;
            let lambda = decrement_sq.max(0.0).sqrt();
            let full = if lambda < 0.2 {
                // Quadratic-convergence region: the full step stays in the
                // Dikin ellipsoid.
                Some(x.step(&dx, 1.0)).filter(|trial| engine.factor_all(trial).is_some())
            } else {
                None
            };
            match full.or_else(|| line_search(&engine, &x, &evals, &dx, tau, decrement_sq)) {
                Some(next) => x = next,
                None => break,
            }
        }
        let gap = (m_dim as f64 + decrement_sq.max(0.0)) / tau;
        let f = engine.objective(&x).ok_or(SolveError::Numerical)?;
        let target = settings.tol_optimality * f.abs().clamp(1e-2, 1.0);
        log::debug!("outer {outer}: tau {tau:.3e} gap {gap:.3e} lam2 {decrement_sq:.3e} target {target:.3e} objective {f:.10} newton {iterations}");
        if polish {
            converged = true;
            break;
        }
        if gap <= target {
            polish = true;
            outer -= 1;
            continue;
        }
        // Predictor: the central path behaves like x* + v/τ, so move along
        // the tangent to the estimate at μτ before re-centering.
        let (g1, h) = engine.gradient_hessian(&x, tau).ok_or(SolveError::Numerical)?;
        let (g0, _) = engine.gradient_hessian(&x, 0.0).ok_or(SolveError::Numerical)?;
        let next = tau * mu;
        if let Some(dir) = engine.newton_direction(&(&g1 - &g0), &h) {
            let dir = dir * (1.0 - tau / next);
            let evals = engine.factor_all(&x).ok_or(SolveError::Numerical)?;
            let mus = engine.directional(&evals, &dir);
            let c_dir = engine.c.dot(&dir);
            let mut s = 1.0;
            while s > 1e-3 {
                if engine.phi_change(&mus, c_dir, next, s).is_some_and(|d| d < 0.0) {
                    let trial = x.step(&dir, s);
                    if engine.factor_all(&trial).is_some() {
                        x = trial;
                        break;
                    }
                }
                s *= 0.5;
            }
        }
        tau = next;
    }

    let (p_post, pi) = problem.unpack(&engine.lay, &x.value());
    let p_prior = problem.priors(&p_post);
    // Report the value at the saturated Π, a feasible point no worse than
    // the iterate, where the objective equals J_info + J_cont exactly.
    let objective_value = problem
        .saturated_objective(&p_post)
        .or_else(|| engine.objective(&x))
        .ok_or(SolveError::Numerical)?;
    let diagnostics = SolverDiagnostics {
        feasibility_residual: (-engine.min_constraint_eig(&x)).max(0.0),
        optimality_residual: m_dim as f64 / tau,
        iterations,
        outer_iterations: outer,
        barrier_parameter: tau,
        epsilon: problem.epsilon,
        converged,
    };
    let schedule = CovarianceSchedule {
        info_cost: problem.info_cost(&p_post),
        control_cost_predicted: problem.control_cost(&p_post),
        objective_value,
        constant: problem.constant,
        p_post,
        pi,
        p_prior,
        diagnostics,
    };
    if converged {
        Ok(schedule)
    } else {
        Err(SolveError::MaxIterations(Box::new(schedule)))
    }
}

/// `τ` minimizing `‖τ∇f + ∇barrier‖` at the starting point, clamped to
/// three decades around the ratio of gradient norms.
fn initial_tau(engine: &Engine<'_>, x: &Point) -> f64 {
    let (g1, _) = engine.gradient_hessian(x, 1.0).expect("feasible start");
    let (g0, _) = engine.gradient_hessian(x, 0.0).expect("feasible start");
    let gf = &g1 - &g0;
    let denom = gf.norm_squared();
    if !(denom > 0.0) || !denom.is_finite() {
        return 1.0;
    }
    let ratio = g0.norm() / denom.sqrt();
    let tau = -gf.dot(&g0) / denom;
    if tau.is_finite() {
        tau.clamp(1e-3 * ratio, 1e3 * ratio)
    } else {
        ratio
    }
}

/// Backtracking: first stay strictly feasible, then satisfy Armijo.
fn line_search(
    engine: &Engine<'_>,
    x: &Point,
    evals: &[TermEval],
    dx: &DVector<f64>,
    tau: f64,
    decrement_sq: f64,
) -> Option<Point> {
    const ALPHA: f64 = 0.01;
    const BETA: f64 = 0.5;
    let mus = engine.directional(evals, dx);
    let c_dx = engine.c.dot(dx);
    let mut s = 1.0;
    while s > 1e-14 {
        if engine.phi_change(&mus, c_dx, tau, s).is_some_and(|d| d <= -ALPHA * s * decrement_sq) {
            let trial = x.step(dx, s);
            if engine.factor_all(&trial).is_some() {
                return Some(trial);
            }
        }
        s *= BETA;
    }
    None
}

/// Per-constraint complementarity summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub label: String,
    pub min_slack_eigenvalue: f64,
    /// `Tr Z` of the dual estimate `Z = F⁻¹/τ`.
    pub multiplier_trace: f64,
    /// `Tr(Z F)`.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `‖∇f − Σ F_i*(Z_i)‖ / max(1, ‖c‖, ‖∇ logdet part‖)`.
    pub stationarity: f64,
    /// Raw `‖∇f − Σ F_i*(Z_i)‖`.
    pub stationarity_abs: f64,
    pub complementarity_gap: f64,
    pub feasibility_residual: f64,
    pub constraints: Vec<ConstraintReport>,
}

/// Optimality residuals of `schedule` using dual estimates `Z_i = F_i⁻¹/τ`
/// with `τ` taken from the schedule's diagnostics.
pub fn kkt_report(problem: &MaxDetProblem, schedule: &CovarianceSchedule) -> KktReport {
    let lay = problem.layout();
    let x = Point::new(problem.pack(&lay, &schedule.p_post, &schedule.pi));
    let tau = schedule.diagnostics.barrier_parameter;
    let engine = Engine { terms: problem.terms(&lay), c: problem.linear_cost(&lay), lay: lay.clone(), problem };
    // Inside the Dikin ellipsoid (λ < 1) the Newton-corrected estimate
    // (F⁻¹ − F⁻¹ F'(dx) F⁻¹)/τ is a positive semidefinite dual point;
    // elsewhere fall back to F⁻¹/τ.
    let correction = engine.gradient_hessian(&x, tau).and_then(|(g, h)| {
        let dx = engine.newton_direction(&g, &h)?;
        let lambda_sq = -g.dot(&dx);
        (lambda_sq.is_finite() && lambda_sq < 1.0).then_some(dx)
    });
    let Engine { terms, c, .. } = engine;
    let mut grad_obj = DVector::zeros(lay.total());
    let mut dual = DVector::zeros(lay.total());
    let mut constraints = Vec::new();
    let mut feas = 0.0_f64;
    let mut complementarity_gap = 0.0;
    let mut interior = true;

    for term in &terms {
        let sym = symmetrize(&term.map.eval(&x, &lay.block_start));
        // The inverse comes from the double-double factor: near-active slacks
        // lose their small eigenvalues when rounded before inversion.
        let inverse = term.factor(&x, &lay.block_start).map(|ev| {
            let n = ev.l.nrows();
            let l_inv = ev.l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("nonsingular factor");
            symmetrize(&(l_inv.transpose() * l_inv))
        });
        match term.kind {
            TermKind::Objective { weight } => {
                if let Some(inv) = &inverse {
                    for ((blk, loc), fk) in term.map.coords.iter().zip(&term.map.basis) {
                        grad_obj[lay.block_start[*blk] + loc] -= weight * trace_product(inv, fk);
                    }
                } else {
                    interior = false;
                }
            }
            TermKind::Constraint => {
                let min_eig = linalg::min_eigenvalue(&sym);
                feas = feas.max(-min_eig);
                match inverse {
                    Some(inv) if min_eig > 0.0 => {
                        let z = match &correction {
                            Some(dx) => {
                                let mut dir = DMatrix::zeros(sym.nrows(), sym.ncols());
                                for ((blk, loc), fk) in term.map.coords.iter().zip(&term.map.basis) {
                                    dir += fk * dx[lay.block_start[*blk] + loc];
                                }
                                symmetrize(&(&inv - &inv * dir * &inv)) / tau
                            }
                            None => inv / tau,
                        };
                        for ((blk, loc), fk) in term.map.coords.iter().zip(&term.map.basis) {
                            dual[lay.block_start[*blk] + loc] += trace_product(&z, fk);
                        }
                        let comp = trace_product(&z, &sym);
                        complementarity_gap += comp;
                        constraints.push(ConstraintReport {
                            label: term.label.clone(),
                            min_slack_eigenvalue: min_eig,
                            multiplier_trace: z.trace(),
                            complementarity: comp,
                        });
                    }
                    _ => {
                        interior = false;
                        constraints.push(ConstraintReport {
                            label: term.label.clone(),
                            min_slack_eigenvalue: min_eig,
                            multiplier_trace: f64::INFINITY,
                            complementarity: f64::NAN,
                        });
                    }
                }
            }
        }
    }
    let residual = &c + &grad_obj - &dual;
    let scale = 1.0_f64.max(c.norm()).max(grad_obj.norm());
    let (stationarity_abs, stationarity) =
        if interior { (residual.norm(), residual.norm() / scale) } else { (f64::INFINITY, f64::INFINITY) };
    KktReport { stationarity, stationarity_abs, complementarity_gap, feasibility_residual: feas, constraints }
}

/// Change in optimal value when `ε` grows tenfold.
pub fn epsilon_sensitivity(problem: &MaxDetProblem, settings: &SolverSettings) -> Result<f64, SolveError> {
    let base = solve_schedule(problem, settings)?;
    let mut bumped = problem.clone();
    bumped.epsilon *= 10.0;
    let other = solve_schedule(&bumped, settings)?;
    Ok(other.objective_value - base.objective_value)
}

/// Steps 1–2 in one call: Riccati tables, program, optimal schedule.
pub fn schedule_for(
    spec: &ProblemSpec,
    settings: &SolverSettings,
) -> Result<(RiccatiTables, MaxDetProblem, CovarianceSchedule), SolveError> {
    let tables = riccati::riccati_backward(spec)?;
    let problem = build_maxdet(spec, &tables, settings);
    let schedule = solve_schedule(&problem, settings)?;
    Ok((tables, problem, schedule))
}

#[cfg(test)]
mod tests;
