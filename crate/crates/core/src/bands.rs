//! ξ-sweeps of the fiber spectrum: band functions, velocity moments and the
//! first-band isolation certificate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::VectorPotential;
use crate::spectral::{l2_inner, solve_fiber, Grid, WindowOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiGrid {
    pub xi_min: f64,
    pub xi_max: f64,
    pub m: usize,
    pub values: Vec<f64>,
}

impl XiGrid {
    pub fn new(xi_min: f64, xi_max: f64, m: usize) -> Result<Self> {
        if m < 2 || !(xi_max > xi_min) || !xi_min.is_finite() || !xi_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ξ-grid needs m >= 2 and xi_min < xi_max, got m = {m} on [{xi_min}, {xi_max}]"
            )));
        }
        let step = (xi_max - xi_min) / (m - 1) as f64;
        let values = (0..m)
            .map(|i| {
                if i + 1 == m {
                    xi_max
                } else {
                    xi_min + i as f64 * step
                }
            })
            .collect();
        Ok(Self {
            xi_min,
            xi_max,
            m,
            values,
        })
    }

    /// `[−8√b₊, 8√b₊]` with 161 nodes.
    pub fn default_for(b_plus: f64) -> Self {
        let half = 8.0 * b_plus.sqrt();
        Self::new(-half, half, 161).expect("positive b_plus")
    }

    pub fn spacing(&self) -> f64 {
        (self.xi_max - self.xi_min) / (self.m - 1) as f64
    }
}

/// Ground-state data of one fiber, kept for inner products across ξ.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberRecord {
    pub grid: Grid,
    pub phi1: Vec<f64>,
    pub a_nodes: Vec<f64>,
    /// `Σ_{2 ≤ j ≤ j_max} ⟨φ₁, φ_j⟩²`, zero up to rounding.
    pub higher_overlap: f64,
}

impl FiberRecord {
    /// `φ₁` at arbitrary points: linear interpolation, zero outside the window.
    pub fn resample(&self, xs: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        xs.iter()
            .map(|&x| {
                if x <= g.x_left || x >= g.x_right {
                    return 0.0;
                }
                let s = (x - g.x_left) / g.h;
                let i = (s.floor() as usize).min(g.n);
                let t = s - i as f64;
                // Node i of the padded vector is x_left + i·h; ends are zero.
                let at = |k: usize| if k == 0 || k > g.n { 0.0 } else { self.phi1[k - 1] };
                (1.0 - t) * at(i) + t * at(i + 1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandTable {
    pub xi_grid: XiGrid,
    pub j_max: usize,
    /// `lambda[i][j − 1] = λ_j(ξ_i)`.
    pub lambda: Vec<Vec<f64>>,
    /// `⟨v(·, ξ_i) φ₁, φ₁⟩`.
    pub vmoment: Vec<f64>,
    pub fibers: Vec<FiberRecord>,
    pub b_minus: f64,
    pub b_plus: f64,
}

pub fn compute_bands<P: VectorPotential + ?Sized>(
    field: &P,
    xi_grid: &XiGrid,
    j_max: usize,
) -> Result<BandTable> {
    compute_bands_with(field, xi_grid, j_max, &WindowOptions::default())
}

/// Solves every fiber of `xi_grid` in parallel; the collected rows keep grid order.
pub fn compute_bands_with<P: VectorPotential + ?Sized>(
    field: &P,
    xi_grid: &XiGrid,
    j_max: usize,
    opts: &WindowOptions,
) -> Result<BandTable> {
    if j_max == 0 {
        return Err(Error::InvalidArgument("j_max must be at least 1".into()));
    }
    let (b_minus, b_plus) = field.field_bounds();
    if b_plus >= 3.0 * b_minus {
        log::warn!("bands of a gap-inadmissible field ({b_minus}, {b_plus}) may overlap");
    }
    let rows: Vec<(Vec<f64>, f64, FiberRecord)> = xi_grid
        .values
        .par_iter()
        .map(|&xi| {
            let fiber = solve_fiber(field, xi, j_max, opts)?;
            let vm = fiber.velocity_moment();
            let h = fiber.op.grid.h;
            let phi1 = &fiber.pairs[0].phi;
            let higher_overlap = fiber.pairs[1..]
                .iter()
                .map(|p| l2_inner(h, phi1, &p.phi).powi(2))
                .sum();
            let record = FiberRecord {
                grid: fiber.op.grid,
                phi1: fiber.pairs[0].phi.clone(),
                a_nodes: fiber.op.a_nodes.clone(),
                higher_overlap,
            };
            Ok((fiber.lambdas(), vm, record))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lambda = Vec::with_capacity(rows.len());
    let mut vmoment = Vec::with_capacity(rows.len());
    let mut fibers = Vec::with_capacity(rows.len());
    for (l, v, f) in rows {
        lambda.push(l);
        vmoment.push(v);
        fibers.push(f);
    }
    Ok(BandTable {
        xi_grid: xi_grid.clone(),
        j_max,
        lambda,
        vmoment,
        fibers,
        b_minus,
        b_plus,
    })
}

impl BandTable {
    pub fn m(&self) -> usize {
        self.xi_grid.m
    }

    /// `λ_j` over the ξ-grid, `j` 1-based.
    pub fn band(&self, j: usize) -> Vec<f64> {
        assert!(j >= 1 && j <= self.j_max);
        self.lambda.iter().map(|row| row[j - 1]).collect()
    }

    /// `(i, j, λ_j(ξ_i))` outside `[(2j−1)b₋ − tol, (2j−1)b₊ + tol]`.
    pub fn band_bound_violations(&self, tol: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.lambda.iter().enumerate() {
            for (jj, &l) in row.iter().enumerate() {
                let level = (2 * jj + 1) as f64;
                if l < level * self.b_minus - tol || l > level * self.b_plus + tol {
                    out.push((i, jj + 1, l));
                }
            }
        }
        out
    }

    pub fn gap_certificate(&self) -> Result<GapCertificate> {
        if self.j_max < 2 {
            return Err(Error::InvalidArgument("gap certificate needs j_max >= 2".into()));
        }
        let l1 = self.band(1);
        let l2 = self.band(2);
        let max_first = l1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_second = l2.iter().copied().fold(f64::INFINITY, f64::min);
        let min_fiber_gap = l1
            .iter()
            .zip(&l2)
            .map(|(a, b)| b - a)
            .fold(f64::INFINITY, f64::min);
        Ok(GapCertificate {
            min_fiber_gap,
            isolation: min_second - max_first,
            required: 3.0 * self.b_minus - self.b_plus,
        })
    }
}

/// Band-gap data certifying that the first band is isolated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCertificate {
    /// `min_ξ (λ₂ − λ₁)(ξ)`.
    pub min_fiber_gap: f64,
    /// `min_ξ λ₂ − max_ξ λ₁`; negative means the first two bands overlap.
    pub isolation: f64,
    /// `3b₋ − b₊`.
    pub required: f64,
}

impl GapCertificate {
    pub fn holds(&self, tol: f64) -> bool {
        self.required > 0.0 && self.isolation >= self.required - tol
    }

    pub fn overlap(&self) -> f64 {
        (-self.isolation).max(0.0)
    }
}

/// `h·Σ 2(ξ − a(xᵢ))·φ₁(xᵢ)²` for row `xi_index`, recomputed from stored data.
pub fn velocity_moment(table: &BandTable, xi_index: usize) -> f64 {
    let xi = table.xi_grid.values[xi_index];
    let f = &table.fibers[xi_index];
    f.grid.h
        * f.a_nodes
            .iter()
            .zip(&f.phi1)
            .map(|(a, p)| 2.0 * (xi - a) * p * p)
            .sum::<f64>()
}

/// Central differences of `λ_j` over the ξ-grid, first-order one-sided at the ends.
pub fn band_derivative_fd(table: &BandTable, j: usize) -> Result<Vec<f64>> {
    let m = table.m();
    if m < 5 {
        return Err(Error::InvalidArgument(format!(
            "band derivative needs at least 5 ξ-nodes, got {m}"
        )));
    }
    if j == 0 || j > table.j_max {
        return Err(Error::InvalidArgument(format!(
            "band index {j} outside 1..={}",
            table.j_max
        )));
    }
    let lam = table.band(j);
    let x = &table.xi_grid.values;
    let mut d = Vec::with_capacity(m);
    d.push((lam[1] - lam[0]) / (x[1] - x[0]));
    for i in 1..m - 1 {
        d.push((lam[i + 1] - lam[i - 1]) / (x[i + 1] - x[i - 1]));
    }
    d.push((lam[m - 1] - lam[m - 2]) / (x[m - 1] - x[m - 2]));
    Ok(d)
}

/// Largest interior deviation between the velocity moment and the centred
/// band difference.
pub fn feynman_hellmann_deviation(table: &BandTable) -> Result<f64> {
    let d = band_derivative_fd(table, 1)?;
    Ok((1..table.m() - 1)
        .map(|i| (table.vmoment[i] - d[i]).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::MagneticField;
    use approx::assert_abs_diff_eq;

    #[test]
    fn xi_grid_spacing() {
        let g = XiGrid::new(-5.0, 5.0, 41).unwrap();
        assert_abs_diff_eq!(g.spacing(), 0.25, epsilon = 1e-15);
        assert_eq!(g.values[40], 5.0);
        assert!(XiGrid::new(1.0, 1.0, 5).is_err());
        let d = XiGrid::default_for(2.0);
        assert_eq!(d.m, 161);
        assert_abs_diff_eq!(d.xi_max, 8.0 * 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn flat_bands_for_constant_field() {
        let f = MagneticField::constant(1.0).unwrap();
        let grid = XiGrid::new(-5.0, 5.0, 41).unwrap();
        let t = compute_bands_with(&f, &grid, 2, &WindowOptions::with_n(1000)).unwrap();
        for row in &t.lambda {
            assert!((row[0] - 1.0).abs() < 4e-4);
            assert!((row[1] - 3.0).abs() < 2e-3);
        }
        for v in &t.vmoment {
            assert!(v.abs() < 1e-6);
        }
        for d in band_derivative_fd(&t, 1).unwrap() {
            assert!(d.abs() < 1e-8);
        }
    }

    #[test]
    fn resample_reproduces_nodes_and_vanishes_outside() {
        let f = MagneticField::constant(1.0).unwrap();
        let grid = XiGrid::new(-1.0, 1.0, 5).unwrap();
        let t = compute_bands_with(&f, &grid, 1, &WindowOptions::with_n(200)).unwrap();
        let rec = &t.fibers[2];
        let nodes = rec.grid.nodes();
        let back = rec.resample(&nodes);
        for (a, b) in back.iter().zip(&rec.phi1) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(
            rec.resample(&[rec.grid.x_left - 1.0, rec.grid.x_right + 1.0]),
            vec![0.0, 0.0]
        );
    }
}
