//! Symmetric tridiagonal eigensolver: Sturm-sequence bisection for the
//! eigenvalues, inverse iteration for the vectors, and a pivoted tridiagonal
//! LU shared with the complex resolvent solves.

use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
{
    fn zero() -> Self;
    fn from_real(x: f64) -> Self;
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_real(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// Number of eigenvalues strictly below `x`.
pub fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    SturmSequence::new(diag, off).count(x)
}

/// Sturm counter with the squared off-diagonal and pivot floor precomputed.
struct SturmSequence<'a> {
    diag: &'a [f64],
    off_sq: Vec<f64>,
    pivmin: f64,
}

impl<'a> SturmSequence<'a> {
    fn new(diag: &'a [f64], off: &[f64]) -> Self {
        Self {
            diag,
            off_sq: off.iter().map(|e| e * e).collect(),
            pivmin: pivot_floor(diag, off),
        }
    }

    fn count(&self, x: f64) -> usize {
        let pivmin = self.pivmin;
        let mut count = 0;
        let mut d = self.diag[0] - x;
        if d.abs() < pivmin {
            d = -pivmin;
        }
        if d < 0.0 {
            count += 1;
        }
        for (di, e2) in self.diag[1..].iter().zip(&self.off_sq) {
            d = di - x - e2 / d;
            if d.abs() < pivmin {
                d = -pivmin;
            }
            count += usize::from(d < 0.0);
        }
        count
    }

    fn count_many<const L: usize>(&self, x: [f64; L]) -> [usize; L] {
        let pivmin = self.pivmin;
        let mut count = [0usize; L];
        let mut d = [0.0; L];
        for l in 0..L {
            d[l] = self.diag[0] - x[l];
            if d[l].abs() < pivmin {
                d[l] = -pivmin;
            }
            count[l] += usize::from(d[l] < 0.0);
        }
        for (di, e2) in self.diag[1..].iter().zip(&self.off_sq) {
            for l in 0..L {
                d[l] = di - x[l] - e2 / d[l];
                if d[l].abs() < pivmin {
                    d[l] = -pivmin;
                }
                count[l] += usize::from(d[l] < 0.0);
            }
        }
        count
    }
}

fn pivot_floor(diag: &[f64], off: &[f64]) -> f64 {
    let scale = off
        .iter()
        .map(|e| e * e)
        .fold(1.0f64, f64::max)
        .max(diag.iter().fold(0.0f64, |m, d| m.max(d.abs())));
    f64::MIN_POSITIVE * scale
}

/// Number of simultaneous probes per bisection sweep.
const PROBES: usize = 7;

/// Gershgorin enclosure of the spectrum.
pub fn gershgorin(diag: &[f64], off: &[f64]) -> (f64, f64) {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - left - right);
        hi = hi.max(diag[i] + left + right);
    }
    (lo, hi)
}

/// Max-row-sum norm.
pub fn matrix_norm(diag: &[f64], off: &[f64]) -> f64 {
    let n = diag.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
            let right = if i + 1 < n { off[i].abs() } else { 0.0 };
            diag[i].abs() + left + right
        })
        .fold(0.0, f64::max)
}

/// The `k` smallest eigenvalues in increasing order, each bisected until the
/// bracket midpoint stops moving.
pub fn lowest_eigenvalues(diag: &[f64], off: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1 && k <= diag.len());
    let (glo, ghi) = gershgorin(diag, off);
    let pad = 2.0 * f64::EPSILON * glo.abs().max(ghi.abs()) + f64::MIN_POSITIVE;
    let mut lower = vec![glo - pad; k];
    let mut upper = vec![ghi + pad; k];
    let mut values = Vec::with_capacity(k);
    let sturm = SturmSequence::new(diag, off);
    for j in 0..k {
        if j > 0 {
            lower[j] = lower[j].max(values[j - 1]);
        }
        let (mut lo, mut hi) = (lower[j], upper[j]);
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            // Seven probes per sweep: independent recurrences overlap in the
            // pipeline, so splitting in eight costs little more than halving.
            let width = hi - lo;
            let mut probes = [0.0; PROBES];
            for (m, p) in probes.iter_mut().enumerate() {
                *p = lo + width * (m + 1) as f64 / (PROBES + 1) as f64;
            }
            let spread = probes.windows(2).all(|w| w[0] < w[1]) && lo < probes[0] && probes[PROBES - 1] < hi;
            let (probes, counts): (Vec<f64>, Vec<usize>) = if spread {
                (probes.to_vec(), sturm.count_many(probes).to_vec())
            } else {
                (vec![mid], vec![sturm.count(mid)])
            };
            for (&x, &c) in probes.iter().zip(&counts) {
                // Every index below c has its eigenvalue under x, the rest above.
                for (i, (l, u)) in lower.iter_mut().zip(upper.iter_mut()).enumerate().skip(j) {
                    if i < c {
                        *u = u.min(x);
                    } else {
                        *l = l.max(x);
                    }
                }
                if c > j {
                    hi = hi.min(x);
                } else {
                    lo = lo.max(x);
                }
            }
        }
        values.push(0.5 * (lo + hi));
    }
    values
}

/// Pivoted LU of a general tridiagonal matrix (row interchanges as in
/// LAPACK `gttrf`). Near-zero pivots are lifted to `pivot_floor` so that
/// shifts equal to an eigenvalue still yield a usable solve.
pub struct TridiagLu<S: Scalar> {
    lower: Vec<S>,
    diag: Vec<S>,
    upper: Vec<S>,
    upper2: Vec<S>,
    swapped: Vec<bool>,
}

impl<S: Scalar> TridiagLu<S> {
    pub fn factor(sub: &[S], diag: &[S], sup: &[S], pivot_floor: f64) -> Self {
        let n = diag.len();
        assert!(n >= 1 && sub.len() + 1 == n && sup.len() + 1 == n);
        let mut dl = sub.to_vec();
        let mut d = diag.to_vec();
        let mut du = sup.to_vec();
        let mut du2 = vec![S::zero(); n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n - 1 {
            if d[i].modulus() >= dl[i].modulus() {
                if d[i].modulus() != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] = d[i + 1] - fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        for p in d.iter_mut() {
            if p.modulus() < pivot_floor {
                *p = S::from_real(pivot_floor);
            }
        }
        Self {
            lower: dl,
            diag: d,
            upper: du,
            upper2: du2,
            swapped,
        }
    }

    /// Overwrites `b` with the solution.
    pub fn solve(&self, b: &mut [S]) {
        let n = self.diag.len();
        assert_eq!(b.len(), n);
        for i in 0..n - 1 {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.lower[i] * b[i];
            } else {
                b[i + 1] = b[i + 1] - self.lower[i] * b[i];
            }
        }
        b[n - 1] = b[n - 1] / self.diag[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.upper[n - 2] * b[n - 1]) / self.diag[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.upper[i] * b[i + 1] - self.upper2[i] * b[i + 2]) / self.diag[i];
        }
    }
}

/// `y = T x` for the symmetric tridiagonal `T`.
pub fn apply_symmetric(diag: &[f64], off: &[f64], x: &[f64], y: &mut [f64]) {
    let n = diag.len();
    for i in 0..n {
        let mut s = diag[i] * x[i];
        if i > 0 {
            s += off[i - 1] * x[i - 1];
        }
        if i + 1 < n {
            s += off[i] * x[i + 1];
        }
        y[i] = s;
    }
}

/// Euclidean norm of `(T − λ) x`.
pub fn residual_norm(diag: &[f64], off: &[f64], lambda: f64, x: &[f64]) -> f64 {
    let mut y = vec![0.0; x.len()];
    apply_symmetric(diag, off, x, &mut y);
    y.iter()
        .zip(x)
        .map(|(yi, xi)| (yi - lambda * xi).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

pub struct InverseIteration {
    /// Unit Euclidean norm.
    pub vector: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Eigenvector for the (already accurate) eigenvalue `lambda`, kept
/// orthogonal to the unit vectors in `cluster`.
pub fn inverse_iteration(diag: &[f64], off: &[f64], lambda: f64, cluster: &[&[f64]]) -> InverseIteration {
    const MAX_ITER: usize = 8;
    let n = diag.len();
    let norm = matrix_norm(diag, off);
    let shifted: Vec<f64> = diag.iter().map(|d| d - lambda).collect();
    let lu = TridiagLu::factor(off, &shifted, off, f64::EPSILON * norm);
    let target = 4.0 * f64::EPSILON * norm * (n as f64).sqrt();

    // Deterministic, sign-definite start (Weyl sequence in [0.5, 1.5)).
    let mut x: Vec<f64> = (0..n)
        .map(|i| 0.5 + (i as f64 * 0.618_033_988_749_894_9).fract())
        .collect();
    normalize(&mut x);
    let mut best = x.clone();
    let mut best_residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        lu.solve(&mut x);
        for q in cluster {
            let dot: f64 = x.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            for (xi, qi) in x.iter_mut().zip(q.iter()) {
                *xi -= dot * qi;
            }
        }
        if normalize(&mut x) == 0.0 {
            break;
        }
        let res = residual_norm(diag, off, lambda, &x);
        if res < best_residual {
            best_residual = res;
            best.copy_from_slice(&x);
        }
        if it >= 2 && res <= target {
            break;
        }
    }
    if refine_tails(diag, off, lambda, &mut best) {
        normalize(&mut best);
        best_residual = best_residual.min(residual_norm(diag, off, lambda, &best));
    }
    InverseIteration {
        vector: best,
        residual: best_residual,
        iterations,
    }
}

/// Re-solves the decaying ends of an eigenvector.
///
/// Inverse iteration leaves entries with absolute error of order `ε‖v‖`,
/// which swamps tails many decades below the peak. Where a row is strictly
/// diagonally dominant after the shift (a classically forbidden region) the
/// end block with the matching entry held fixed is an M-matrix system, and its
/// solution is accurate relative to each entry. Only entries below 1e-3 of
/// the peak are touched. Returns whether anything changed.
fn refine_tails(diag: &[f64], off: &[f64], lambda: f64, v: &mut [f64]) -> bool {
    let n = v.len();
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if n < 3 || peak == 0.0 {
        return false;
    }
    let coupling = |i: usize| {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < n { off[i].abs() } else { 0.0 };
        left + right
    };
    let in_tail = |i: usize| v[i].abs() < 1e-3 * peak && diag[i] - lambda > coupling(i);
    let left_end = (0..n).take_while(|&i| in_tail(i)).count();
    let right_start = n - (0..n).rev().take_while(|&i| in_tail(i)).count();
    if left_end >= right_start {
        return false;
    }
    let mut changed = false;
    if left_end > 0 {
        // Rows 0..left_end with v[left_end] as the Dirichlet value on the right.
        let rows: Vec<usize> = (0..left_end).collect();
        changed |= solve_block(diag, off, lambda, v, &rows, left_end);
    }
    if right_start < n {
        let rows: Vec<usize> = (right_start..n).rev().collect();
        changed |= solve_block(diag, off, lambda, v, &rows, right_start - 1);
    }
    changed
}

/// Thomas sweep over `rows`, ordered from the open end towards `anchor`,
/// with `v[anchor]` fixed.
fn solve_block(diag: &[f64], off: &[f64], lambda: f64, v: &mut [f64], rows: &[usize], anchor: usize) -> bool {
    // Coupling between consecutive nodes `i` and `j` (|i − j| = 1).
    let link = |i: usize, j: usize| off[i.min(j)];
    let m = rows.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    for k in 0..m {
        let i = rows[k];
        let next = if k + 1 < m { rows[k + 1] } else { anchor };
        let mut pivot = diag[i] - lambda;
        let mut rhs = 0.0;
        if k > 0 {
            let prev = rows[k - 1];
            pivot -= link(prev, i) * c[k - 1];
            rhs -= link(prev, i) * d[k - 1];
        }
        if k + 1 < m {
            c[k] = link(i, next) / pivot;
        } else {
            rhs -= link(i, anchor) * v[anchor];
        }
        d[k] = rhs / pivot;
    }
    let mut changed = false;
    let mut x = d[m - 1];
    for k in (0..m).rev() {
        if k + 1 < m {
            x = d[k] - c[k] * x;
        }
        if v[rows[k]] != x {
            v[rows[k]] = x;
            changed = true;
        }
    }
    changed
}
