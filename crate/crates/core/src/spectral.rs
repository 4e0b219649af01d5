//! Finite-difference fibers `h(ξ) = −d²/dx² + (ξ − a(x))²` on a truncated
//! interval with Dirichlet ends, and their lowest eigenpairs.
//!
//! All windows for a given field share one node lattice `x = (m + ½)·h` with
//! `h` fixed by the default half-width. Moving ξ only slides the window over
//! the lattice, so quantities like `λ₁(ξ)` vary smoothly in ξ instead of
//! picking up `O(h²)` jitter from re-gridding.

use serde::{Deserialize, Serialize};

use crate::fields::VectorPotential;
use crate::tridiag::{self, inverse_iteration, lowest_eigenvalues};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_left: f64,
    pub x_right: f64,
    /// Interior nodes; the end points carry the Dirichlet condition.
    pub n: usize,
    pub h: f64,
    /// `a⁻¹(ξ)` for windows built by `choose_window`, the midpoint otherwise.
    pub center: f64,
}

impl Grid {
    pub fn new(x_left: f64, x_right: f64, n: usize) -> Result<Self> {
        if n < 3 || !(x_right > x_left) || !x_left.is_finite() || !x_right.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid needs n >= 3 and x_left < x_right, got n = {n} on [{x_left}, {x_right}]"
            )));
        }
        Ok(Self {
            x_left,
            x_right,
            n,
            h: (x_right - x_left) / (n + 1) as f64,
            center: 0.5 * (x_left + x_right),
        })
    }

    /// Interior node `i`, `0 ≤ i < n`.
    pub fn node(&self, i: usize) -> f64 {
        self.x_left + (i + 1) as f64 * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.x_right - self.x_left)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowOptions {
    /// Default half-width is `half_width_factor / √b₋`.
    pub half_width_factor: f64,
    /// Interior nodes of the default window; fixes the lattice spacing.
    pub n: usize,
    /// Required `q(edge) − (2k+1)b₊` in units of `b₊`.
    pub margin: f64,
    /// Widening stops at `max_half_width_factor / √b₋`.
    pub max_half_width_factor: f64,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            half_width_factor: 12.0,
            n: 2000,
            margin: 25.0,
            max_half_width_factor: 1e4,
        }
    }
}

impl WindowOptions {
    pub fn with_n(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn lattice_spacing(&self, b_minus: f64) -> f64 {
        2.0 * self.half_width_factor / b_minus.sqrt() / (self.n + 1) as f64
    }
}

fn margin_ok<P: VectorPotential + ?Sized>(
    field: &P,
    xi: f64,
    grid: &Grid,
    k: usize,
    opts: &WindowOptions,
) -> bool {
    let (_, b_plus) = field.field_bounds();
    let need = ((2 * k + 1) as f64 + opts.margin) * b_plus;
    let q_left = (xi - field.potential(grid.x_left)).powi(2);
    let q_right = (xi - field.potential(grid.x_right)).powi(2);
    q_left >= need && q_right >= need
}

/// Lattice window of `n_interior` nodes centred as close as possible on `center`.
fn lattice_window(center: f64, h: f64, n_interior: usize) -> Grid {
    let half = 0.5 * (n_interior + 1) as f64 * h;
    let m_left = ((center - half) / h - 0.5).round();
    let x_left = h * (m_left + 0.5);
    Grid {
        x_left,
        x_right: x_left + (n_interior + 1) as f64 * h,
        n: n_interior,
        h,
        center,
    }
}

pub fn choose_window<P: VectorPotential + ?Sized>(field: &P, xi: f64, k: usize) -> Result<Grid> {
    choose_window_with(field, xi, k, &WindowOptions::default())
}

/// Window around `x* = a⁻¹(ξ)` with enough confinement at both ends for the
/// lowest `k` eigenvalues; widened node by node on the same lattice when the
/// default half-width is too short.
pub fn choose_window_with<P: VectorPotential + ?Sized>(
    field: &P,
    xi: f64,
    k: usize,
    opts: &WindowOptions,
) -> Result<Grid> {
    if !xi.is_finite() {
        return Err(Error::Window {
            xi,
            reason: "non-finite momentum".into(),
        });
    }
    if k == 0 || opts.n < 3 {
        return Err(Error::InvalidArgument(format!(
            "window needs k >= 1 and n >= 3, got k = {k}, n = {}",
            opts.n
        )));
    }
    let (b_minus, b_plus) = field.field_bounds();
    let h = opts.lattice_spacing(b_minus);
    let max_half_width = opts.max_half_width_factor / b_minus.sqrt();
    let center = field.inverse_potential(xi);

    let grid = lattice_window(center, h, opts.n);
    if margin_ok(field, xi, &grid, k, opts) {
        return Ok(grid);
    }

    let reach = (((2 * k + 1) as f64 + opts.margin) * b_plus).sqrt();
    let left = center - field.inverse_potential(xi - reach);
    let right = field.inverse_potential(xi + reach) - center;
    let mut half = left.max(right) + 2.0 * h;
    loop {
        if half > max_half_width {
            return Err(Error::Window {
                xi,
                reason: format!("margin for {k} eigenvalues needs half-width beyond {max_half_width}"),
            });
        }
        let n_interior = ((2.0 * half / h).ceil() as usize).saturating_sub(1).max(opts.n);
        let grid = lattice_window(center, h, n_interior);
        if margin_ok(field, xi, &grid, k, opts) {
            return Ok(grid);
        }
        half *= 1.05;
    }
}

/// Symmetric tridiagonal discretization of one fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberOperator {
    pub xi: f64,
    pub diag: Vec<f64>,
    pub offdiag: Vec<f64>,
    pub grid: Grid,
    /// `q(x_i, ξ)` at the interior nodes.
    pub potential: Vec<f64>,
    /// `a(x_i)` at the interior nodes.
    pub a_nodes: Vec<f64>,
}

impl FiberOperator {
    /// Builds the fiber from sampled vector-potential values on `grid`.
    pub fn from_potential_values(xi: f64, grid: Grid, a_nodes: Vec<f64>) -> Self {
        assert_eq!(a_nodes.len(), grid.n);
        let kinetic = 2.0 / (grid.h * grid.h);
        let potential: Vec<f64> = a_nodes.iter().map(|a| (xi - a).powi(2)).collect();
        let diag = potential.iter().map(|q| kinetic + q).collect();
        Self {
            xi,
            diag,
            offdiag: vec![-1.0 / (grid.h * grid.h); grid.n - 1],
            grid,
            potential,
            a_nodes,
        }
    }

    /// Same grid and kinetic part with `delta[i]` added to the diagonal.
    pub fn shifted(&self, delta: &[f64]) -> Self {
        let mut out = self.clone();
        for ((d, q), dq) in out.diag.iter_mut().zip(out.potential.iter_mut()).zip(delta) {
            *d += dq;
            *q += dq;
        }
        out
    }

    /// `v(x_i, ξ) = 2(ξ − a(x_i))`.
    pub fn velocity(&self) -> Vec<f64> {
        self.a_nodes.iter().map(|a| 2.0 * (self.xi - a)).collect()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        tridiag::apply_symmetric(&self.diag, &self.offdiag, x, y);
    }

    pub fn norm(&self) -> f64 {
        tridiag::matrix_norm(&self.diag, &self.offdiag)
    }

    /// Number of eigenvalues strictly below `x`.
    pub fn count_below(&self, x: f64) -> usize {
        tridiag::sturm_count(&self.diag, &self.offdiag, x)
    }
}

pub fn assemble<P: VectorPotential + ?Sized>(field: &P, xi: f64, grid: Grid) -> FiberOperator {
    let a_nodes = (0..grid.n).map(|i| field.potential(grid.node(i))).collect();
    FiberOperator::from_potential_values(xi, grid, a_nodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: f64,
    /// Interior-node values, normalized so that `h·Σφ² = 1`.
    pub phi: Vec<f64>,
    /// `(h·Σφ²)^{1/2}` as returned.
    pub norm: f64,
}

/// Grid inner product `h·Σ uᵢvᵢ` (the trapezoid rule with zero end values).
pub fn l2_inner(h: f64, u: &[f64], v: &[f64]) -> f64 {
    h * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
}

pub fn l2_norm(h: f64, u: &[f64]) -> f64 {
    l2_inner(h, u, u).sqrt()
}

/// The `k` smallest eigenpairs, strictly increasing.
///
/// The ground state comes back non-negative (up to 1e-12); higher states have
/// their first significant entry positive.
pub fn lowest_eigenpairs(op: &FiberOperator, k: usize) -> Result<Vec<EigenPair>> {
    let n = op.grid.n;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenpairs from a fiber with {n} nodes"
        )));
    }
    let xi = op.xi;
    let values = lowest_eigenvalues(&op.diag, &op.offdiag, k);
    for pair in values.windows(2) {
        if pair[1] - pair[0] < 1e-8 {
            return Err(Error::Eigen {
                xi,
                reason: format!(
                    "eigenvalues {} and {} are not separated by 1e-8",
                    pair[0], pair[1]
                ),
            });
        }
    }
    let cluster_width = 1e-5 * op.norm();
    let scale = op.grid.h.sqrt();
    let mut unit: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut pairs = Vec::with_capacity(k);
    for (j, &lambda) in values.iter().enumerate() {
        let cluster: Vec<&[f64]> = values[..j]
            .iter()
            .zip(unit.iter())
            .filter(|(mu, _)| (lambda - **mu).abs() < cluster_width)
            .map(|(_, v)| v.as_slice())
            .collect();
        let it = inverse_iteration(&op.diag, &op.offdiag, lambda, &cluster);
        if !(it.residual <= 1e-9 * lambda.abs()) {
            return Err(Error::Eigen {
                xi,
                reason: format!(
                    "inverse iteration for eigenvalue {j} stagnated at residual {:e}",
                    it.residual
                ),
            });
        }
        let mut v = it.vector;
        fix_sign(&mut v, j == 0);
        if j == 0 {
            let floor = -1e-12 * scale;
            if let Some(bad) = v.iter().position(|&x| x < floor) {
                return Err(Error::Eigen {
                    xi,
                    reason: format!("ground state changes sign at node {bad}"),
                });
            }
        }
        let phi: Vec<f64> = v.iter().map(|x| x / scale).collect();
        let norm = l2_norm(op.grid.h, &phi);
        unit.push(v);
        pairs.push(EigenPair { lambda, phi, norm });
    }
    Ok(pairs)
}

fn fix_sign(v: &mut [f64], ground: bool) {
    let flip = if ground {
        v.iter().sum::<f64>() < 0.0
    } else {
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter().find(|x| x.abs() > 1e-3 * peak).is_some_and(|x| *x < 0.0)
    };
    if flip {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// One solved fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberSpectrum {
    pub op: FiberOperator,
    pub pairs: Vec<EigenPair>,
}

impl FiberSpectrum {
    pub fn xi(&self) -> f64 {
        self.op.xi
    }

    pub fn grid(&self) -> &Grid {
        &self.op.grid
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.lambda).collect()
    }

    pub fn ground(&self) -> &EigenPair {
        &self.pairs[0]
    }

    /// `⟨v φ₁, φ₁⟩ = h·Σ 2(ξ − a(xᵢ))·φ₁(xᵢ)²`.
    pub fn velocity_moment(&self) -> f64 {
        let phi = &self.pairs[0].phi;
        let xi = self.op.xi;
        self.op.grid.h
            * self
                .op
                .a_nodes
                .iter()
                .zip(phi)
                .map(|(a, p)| 2.0 * (xi - a) * p * p)
                .sum::<f64>()
    }
}

/// Window, assembly and eigensolve for one fiber.
pub fn solve_fiber<P: VectorPotential + ?Sized>(
    field: &P,
    xi: f64,
    k: usize,
    opts: &WindowOptions,
) -> Result<FiberSpectrum> {
    let grid = choose_window_with(field, xi, k, opts)?;
    let op = assemble(field, xi, grid);
    let pairs = lowest_eigenpairs(&op, k)?;
    Ok(FiberSpectrum { op, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::MagneticField;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_window_for_constant_field() {
        let f = MagneticField::constant(1.0).unwrap();
        let g = choose_window(&f, 0.0, 2).unwrap();
        assert_eq!(g.center, 0.0);
        assert_eq!(g.n, 2000);
        assert_abs_diff_eq!(g.x_left, -12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.x_right, 12.0, epsilon = 1e-12);
        let g = choose_window(&f, 3.0, 2).unwrap();
        assert_abs_diff_eq!(g.center, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn window_center_round_trips_through_potential() {
        let f = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
        let g = choose_window(&f, 5.0, 2).unwrap();
        assert_abs_diff_eq!(f.eval_a(g.center), 5.0, epsilon = 1e-10);
    }

    #[test]
    fn window_widens_for_many_eigenvalues() {
        let f = MagneticField::constant(1.0).unwrap();
        let g = choose_window(&f, 0.0, 200).unwrap();
        assert!(g.half_width() > 12.0);
        assert_abs_diff_eq!(g.h, WindowOptions::default().lattice_spacing(1.0), epsilon = 0.0);
        assert!(g.x_left.powi(2) - 401.0 >= 25.0);
    }

    #[test]
    fn pure_laplacian_stencil() {
        let grid = Grid::new(0.0, 4.0, 3).unwrap();
        assert_eq!(grid.h, 1.0);
        let op = FiberOperator::from_potential_values(0.0, grid, vec![0.0; 3]);
        assert_eq!(op.diag, vec![2.0, 2.0, 2.0]);
        assert_eq!(op.offdiag, vec![-1.0, -1.0]);
    }

    #[test]
    fn harmonic_oscillator_diagonal() {
        let f = MagneticField::constant(1.0).unwrap();
        let g = choose_window(&f, 0.0, 1).unwrap();
        let op = assemble(&f, 0.0, g);
        for i in [0, 500, 1999] {
            let x = g.node(i);
            assert_abs_diff_eq!(op.diag[i], 2.0 / (g.h * g.h) + x * x, epsilon = 1e-9);
        }
    }

    #[test]
    fn landau_levels() {
        let f = MagneticField::constant(1.0).unwrap();
        let op = assemble(&f, 0.0, choose_window(&f, 0.0, 3).unwrap());
        let pairs = lowest_eigenpairs(&op, 3).unwrap();
        for (j, p) in pairs.iter().enumerate() {
            let exact = (2 * j + 1) as f64;
            assert!((p.lambda - exact).abs() / exact < 1e-4);
            assert_abs_diff_eq!(p.norm, 1.0, epsilon = 1e-10);
        }
        assert!(pairs[0].phi.iter().all(|&x| x >= -1e-12));
    }
}
