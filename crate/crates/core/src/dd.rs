//! Double-double arithmetic for the few places where `f64` rounding of
//! log-determinants is amplified by large weights.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// One Newton correction of the `f64` root.
    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::from_f64(self.hi.max(0.0).sqrt());
        }
        let r = self.hi.sqrt();
        let rr = Dd::from_f64(r) * Dd::from_f64(r);
        let (hi, lo) = quick_two_sum(r, (self - rr).to_f64() / (2.0 * r));
        Dd { hi, lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

/// Row-major square or rectangular matrix of double-doubles.
#[derive(Debug, Clone)]
pub(crate) struct DdMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<Dd>,
}

impl DdMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Dd::ZERO; rows * cols] }
    }

    pub fn from_f64(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = Dd::from_f64(m[(i, j)]);
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn mul(&self, o: &DdMatrix) -> DdMatrix {
        assert_eq!(self.cols, o.rows);
        let mut out = Self::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for j in 0..o.cols {
                let mut acc = Dd::ZERO;
                for k in 0..self.cols {
                    acc = acc + self[(i, k)] * o[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    pub fn add(&self, o: &DdMatrix) -> DdMatrix {
        let data = self.data.iter().zip(&o.data).map(|(a, b)| *a + *b).collect();
        DdMatrix { rows: self.rows, cols: self.cols, data }
    }

    /// `self⁻¹ · rhs` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &DdMatrix) -> Option<DdMatrix> {
        let n = self.rows;
        let mut a = self.clone();
        let mut b = rhs.clone();
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[(i, col)].abs().hi.total_cmp(&a[(j, col)].abs().hi))?;
            if a[(pivot, col)].hi == 0.0 {
                return None;
            }
            a.swap_rows(col, pivot);
            b.swap_rows(col, pivot);
            for row in col + 1..n {
                let factor = a[(row, col)] / a[(col, col)];
                for k in col..n {
                    a[(row, k)] = a[(row, k)] - factor * a[(col, k)];
                }
                for k in 0..b.cols {
                    b[(row, k)] = b[(row, k)] - factor * b[(col, k)];
                }
            }
        }
        for col in (0..n).rev() {
            for k in 0..b.cols {
                let mut v = b[(col, k)];
                for j in col + 1..n {
                    v = v - a[(col, j)] * b[(j, k)];
                }
                b[(col, k)] = v / a[(col, col)];
            }
        }
        Some(b)
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = Dd::ONE;
        }
        out
    }

    /// Determinant as `(mantissa, exponent)` with the value `mantissa·2^exponent`,
    /// so products of many pivots cannot overflow.
    pub fn determinant(&self) -> Option<(Dd, i64)> {
        let n = self.rows;
        let mut a = self.clone();
        let mut det = Dd::ONE;
        let mut exp = 0i64;
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[(i, col)].abs().hi.total_cmp(&a[(j, col)].abs().hi))?;
            let p = a[(pivot, col)];
            if p.hi == 0.0 || !p.hi.is_finite() {
                return None;
            }
            if pivot != col {
                a.swap_rows(col, pivot);
                det = -det;
            }
            for row in col + 1..n {
                let factor = a[(row, col)] / p;
                for k in col..n {
                    a[(row, k)] = a[(row, k)] - factor * a[(col, k)];
                }
            }
            det = det * p;
            let (m, e) = frexp(det.hi);
            let scale = m / det.hi;
            det = Dd { hi: m, lo: det.lo * scale };
            exp += e;
        }
        Some((det, exp))
    }

    /// Lower Cholesky factor of a symmetric matrix, rounded to `f64`. `None`
    /// unless every pivot is positive.
    pub fn cholesky_lower(&self) -> Option<DMatrix<f64>> {
        let n = self.rows;
        let mut l = DdMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d = d - l[(j, k)] * l[(j, k)];
            }
            if !(d.hi > 0.0) || !d.hi.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut v = self[(i, j)];
                for k in 0..j {
                    v = v - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / djj;
            }
        }
        Some(DMatrix::from_fn(n, n, |i, j| l[(i, j)].to_f64()))
    }

    fn swap_rows(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        for k in 0..self.cols {
            self.data.swap(i * self.cols + k, j * self.cols + k);
        }
    }
}

impl std::ops::Index<(usize, usize)> for DdMatrix {
    type Output = Dd;
    fn index(&self, (i, j): (usize, usize)) -> &Dd {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DdMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Dd {
        &mut self.data[i * self.cols + j]
    }
}

/// `x = m·2^e` with `0.5 ≤ |m| < 1`; exact.
fn frexp(x: f64) -> (f64, i64) {
    if x == 0.0 || !x.is_finite() {
        return (x, 0);
    }
    let bits = x.to_bits();
    let raw = ((bits >> 52) & 0x7ff) as i64;
    if raw == 0 {
        let (m, e) = frexp(x * 2f64.powi(64));
        return (m, e - 64);
    }
    let e = raw - 1022;
    let m = f64::from_bits((bits & !(0x7ff << 52)) | (1022 << 52));
    (m, e)
}

/// `ln(num / den)` for positive determinants given as `(mantissa, exponent)`,
/// accurate relative to the result when the ratio is close to one.
pub(crate) fn ln_ratio(num: (Dd, i64), den: (Dd, i64)) -> Option<f64> {
    let q = num.0 / den.0;
    if !(q.hi > 0.0) {
        return None;
    }
    let e = (num.1 - den.1) as f64;
    let (m, qe) = frexp(q.hi);
    let q = Dd { hi: m, lo: q.lo * (m / q.hi) };
    let e = e + qe as f64;
    // q ∈ [0.5, 1): write q·2^e = (2q)·2^(e−1) when that is closer to one.
    let (q, e) = if e > 0.0 { (q * Dd::from_f64(2.0), e - 1.0) } else { (q, e) };
    let minus_one = (q - Dd::ONE).to_f64();
    Some(minus_one.ln_1p() + e * std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_resolves_tiny_pivot() {
        // [[1, 1], [1, 1 + δ]] with δ below f64 resolution of the entries.
        let delta = Dd::from_f64(1e-20);
        let mut m = DdMatrix::identity(2);
        m[(0, 1)] = Dd::ONE;
        m[(1, 0)] = Dd::ONE;
        m[(1, 1)] = Dd::ONE + delta;
        let l = m.cholesky_lower().unwrap();
        assert_eq!(l[(0, 0)], 1.0);
        assert!((l[(1, 1)] - 1e-10).abs() < 1e-24);
        let two = Dd::from_f64(2.0).sqrt();
        assert!((two * two - Dd::from_f64(2.0)).to_f64().abs() < 1e-30);
    }

    #[test]
    fn arithmetic_keeps_extra_precision() {
        let third = Dd::ONE / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0) - Dd::ONE;
        assert!(back.to_f64().abs() < 1e-30);
        let tiny = (Dd::ONE + Dd::from_f64(1e-20)) - Dd::ONE;
        assert!((tiny.to_f64() - 1e-20).abs() < 1e-35);
    }

    #[test]
    fn determinant_and_solve() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (d, e) = DdMatrix::from_f64(&m).determinant().unwrap();
        let det = d.to_f64() * 2f64.powi(e as i32);
        assert!((det - m.determinant()).abs() < 1e-12);
        let inv = DdMatrix::from_f64(&m).solve(&DdMatrix::identity(3)).unwrap();
        let prod = DdMatrix::from_f64(&m).mul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)].to_f64() - target).abs() < 1e-28);
            }
        }
    }

    #[test]
    fn log_ratio_near_one() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut b = a.clone();
        b[(0, 0)] += 1e-13;
        let num = DdMatrix::from_f64(&b).determinant().unwrap();
        let den = DdMatrix::from_f64(&a).determinant().unwrap();
        let d = b[(0, 0)] - a[(0, 0)];
        let expected = (d / (2.0 * 1.0 - 0.3 * 0.3)).ln_1p();
        let got = ln_ratio(num, den).unwrap();
        assert!((got - expected).abs() < 1e-25, "{got:e} vs {expected:e}");
        assert!((ln_ratio(den, den).unwrap()).abs() < 1e-30);
        let big = DdMatrix::from_f64(&(&a * 1e200)).determinant().unwrap();
        assert!((ln_ratio(big, den).unwrap() - 2.0 * 200.0 * 10f64.ln()).abs() < 1e-9);
    }
}
