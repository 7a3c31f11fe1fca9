//! Log-det barrier machinery over block-tridiagonal symmetric-matrix variables.
//!
//! Decision variables are symmetric matrices stored by their upper
//! triangle. Coordinate `x_ij` (i ≤ j) multiplies the basis matrix
//! `e_i e_jᵀ + e_j e_iᵀ` (or `e_i e_iᵀ` on the diagonal), so a coordinate
//! equals the corresponding matrix entry. Variables are grouped into time
//! blocks; every term couples at most two consecutive blocks, which keeps
//! the Newton system block tridiagonal.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dd::{Dd, DdMatrix};

/// Upper-triangle coordinate list for an `n × n` symmetric matrix.
pub(crate) fn sym_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push((i, j));
        }
    }
    out
}

pub(crate) fn sym_basis(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// A symmetric-matrix variable placed at `offset` inside time block `block`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct VarSlot {
    pub block: usize,
    pub offset: usize,
    pub n: usize,
}

impl VarSlot {
    pub fn read(&self, x: &DVector<f64>, block_start: &[usize]) -> DMatrix<f64> {
        let base = block_start[self.block] + self.offset;
        let mut m = DMatrix::zeros(self.n, self.n);
        for (k, (i, j)) in sym_pairs(self.n).into_iter().enumerate() {
            m[(i, j)] = x[base + k];
            m[(j, i)] = x[base + k];
        }
        m
    }

    pub fn write(&self, x: &mut DVector<f64>, block_start: &[usize], m: &DMatrix<f64>) {
        let base = block_start[self.block] + self.offset;
        for (k, (i, j)) in sym_pairs(self.n).into_iter().enumerate() {
            x[base + k] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
}

/// Iterate kept as an unevaluated sum `hi + lo`. Slacks of nearly active
/// constraints fall far below the rounding of O(1) coordinates; the extra
/// word keeps them resolvable.
#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub hi: DVector<f64>,
    pub lo: DVector<f64>,
}

impl Point {
    pub fn new(x: DVector<f64>) -> Self {
        let lo = DVector::zeros(x.len());
        Self { hi: x, lo }
    }

    pub fn get(&self, i: usize) -> Dd {
        Dd { hi: self.hi[i], lo: self.lo[i] }
    }

    pub fn value(&self) -> DVector<f64> {
        &self.hi + &self.lo
    }

    /// `self + s·dx`.
    pub fn step(&self, dx: &DVector<f64>, s: f64) -> Self {
        let mut out = self.clone();
        for i in 0..dx.len() {
            let v = self.get(i) + Dd::from_f64(s * dx[i]);
            out.hi[i] = v.hi;
            out.lo[i] = v.lo;
        }
        out
    }
}

/// `F(x) = F₀ + Σ_k x_k F_k`, restricted to the coordinates it touches.
#[derive(Debug, Clone)]
pub(crate) struct AffineMatrix {
    pub constant: DMatrix<f64>,
    /// (block, local index) of every coordinate.
    pub coords: Vec<(usize, usize)>,
    pub basis: Vec<DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn new(constant: DMatrix<f64>) -> Self {
        Self { constant, coords: Vec::new(), basis: Vec::new() }
    }

    /// Adds the linear map `E ↦ map(E)` applied to variable `slot`.
    pub fn add_var(&mut self, slot: VarSlot, map: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) {
        for (k, (i, j)) in sym_pairs(slot.n).into_iter().enumerate() {
            let image = map(&sym_basis(slot.n, i, j));
            debug_assert_eq!(image.shape(), self.constant.shape());
            self.coords.push((slot.block, slot.offset + k));
            self.basis.push(image);
        }
    }

    pub fn eval_dd(&self, x: &Point, block_start: &[usize]) -> DdMatrix {
        let mut f = DdMatrix::from_f64(&self.constant);
        for ((blk, loc), fk) in self.coords.iter().zip(&self.basis) {
            let v = x.get(block_start[*blk] + loc);
            if v.hi == 0.0 {
                continue;
            }
            for i in 0..fk.nrows() {
                for j in 0..fk.ncols() {
                    let e = fk[(i, j)];
                    if e != 0.0 {
                        f[(i, j)] = f[(i, j)] + Dd::from_f64(e) * v;
                    }
                }
            }
        }
        f
    }

    pub fn eval(&self, x: &Point, block_start: &[usize]) -> DMatrix<f64> {
        let f = self.eval_dd(x, block_start);
        DMatrix::from_fn(f.rows, f.cols, |i, j| f[(i, j)].to_f64())
    }

    /// Linear part `Σ_k d_k F_k`.
    pub fn direction(&self, d: &DVector<f64>, block_start: &[usize]) -> DMatrix<f64> {
        let mut f = DMatrix::zeros(self.dim(), self.dim());
        for ((blk, loc), fk) in self.coords.iter().zip(&self.basis) {
            let v = d[block_start[*blk] + loc];
            if v != 0.0 {
                f += fk * v;
            }
        }
        f
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum TermKind {
    /// `F(x) ⪰ 0`, barrier `−ln det F`.
    Constraint,
    /// Objective contribution `−weight · ln det G(x)`.
    Objective { weight: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub kind: TermKind,
    pub label: String,
    pub map: AffineMatrix,
}

/// Cholesky factor of a term's matrix at a point, computed in double-double
/// and rounded entrywise, so tiny pivots keep their relative accuracy.
pub(crate) struct TermEval {
    pub l: DMatrix<f64>,
}

impl Term {
    pub fn factor(&self, x: &Point, block_start: &[usize]) -> Option<TermEval> {
        let l = self.map.eval_dd(x, block_start).cholesky_lower()?;
        (0..l.nrows()).all(|i| l[(i, i)] > 0.0).then_some(TermEval { l })
    }

    pub fn log_det(eval: &TermEval) -> f64 {
        2.0 * (0..eval.l.nrows()).map(|i| eval.l[(i, i)].ln()).sum::<f64>()
    }

    /// `L⁻¹ F L⁻ᵀ`.
    pub fn whiten(eval: &TermEval, f: &DMatrix<f64>) -> DMatrix<f64> {
        let half = eval.l.solve_lower_triangular(f).expect("nonsingular factor");
        let y = eval.l.solve_lower_triangular(&half.transpose()).expect("nonsingular factor");
        (&y + y.transpose()) * 0.5
    }

    /// Whitened basis matrices `Y_k = L⁻¹ F_k L⁻ᵀ`.
    pub fn whitened(&self, eval: &TermEval) -> Vec<DMatrix<f64>> {
        self.map.basis.iter().map(|fk| Self::whiten(eval, fk)).collect()
    }
}

/// Symmetric block-tridiagonal matrix: `diag[t]` and `upper[t]` (block row
/// `t`, column `t+1`).
#[derive(Debug, Clone)]
pub(crate) struct BlockTridiag {
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiag {
    pub fn zeros(sizes: &[usize]) -> Self {
        let diag = sizes.iter().map(|&b| DMatrix::zeros(b, b)).collect();
        let upper = sizes.windows(2).map(|w| DMatrix::zeros(w[0], w[1])).collect();
        Self { diag, upper }
    }

    /// Adds `h` at global position (k, l) given as (block, local) pairs.
    /// Only entries with `block(k) ≤ block(l)` are stored.
    pub fn add(&mut self, k: (usize, usize), l: (usize, usize), h: f64) {
        if k.0 == l.0 {
            self.diag[k.0][(k.1, l.1)] += h;
        } else if l.0 == k.0 + 1 {
            self.upper[k.0][(k.1, l.1)] += h;
        }
    }

    /// Solves `H y = r` by block Cholesky. Returns `None` if a pivot block
    /// is not positive definite.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
        let nb = self.diag.len();
        let mut chols: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(nb);
        // X_t = L_{t−1}⁻¹ U_{t−1}
        let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(nb);
        for t in 0..nb {
            let mut s = self.diag[t].clone();
            if t > 0 {
                let l_prev = chols[t - 1].l();
                let x = l_prev.solve_lower_triangular(&self.upper[t - 1])?;
                s -= x.transpose() * &x;
                xs.push(x);
            } else {
                xs.push(DMatrix::zeros(0, 0));
            }
            let s = (&s + s.transpose()) * 0.5;
            chols.push(s.cholesky()?);
        }
        let mut z: Vec<DVector<f64>> = Vec::with_capacity(nb);
        for t in 0..nb {
            let mut r = rhs[t].clone();
            if t > 0 {
                r -= xs[t].transpose() * &z[t - 1];
            }
            z.push(chols[t].l().solve_lower_triangular(&r)?);
        }
        let mut y = vec![DVector::zeros(0); nb];
        for t in (0..nb).rev() {
            let mut r = z[t].clone();
            if t + 1 < nb {
                r -= &xs[t + 1] * &y[t + 1];
            }
            y[t] = chols[t].l().tr_solve_lower_triangular(&r)?;
        }
        Some(y)
    }
}
