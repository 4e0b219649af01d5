//! Inverse pathways: current data → first band, band and ground-state data →
//! vector potential, and a regularized least-squares fit of a compact
//! perturbation of `a` to current data.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::current::{lattice_cover, ChiProfile, CurrentRoute, MeasurementFile, MeasurementRecord};
use crate::fields::{MagneticField, PerturbationW, VectorPotential};
use crate::quadrature::{cumulative_trapezoid, simpson_weights};
use crate::spectral::{
    assemble, choose_window_with, l2_inner, l2_norm, lowest_eigenpairs, FiberOperator, Grid, WindowOptions,
};
use crate::{Error, Result};

/// Allowed left-end miss of the anchored band before a warning is logged.
pub const TAIL_TOLERANCE: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentRecord {
    pub chi: ChiProfile,
    pub theta: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentData {
    pub records: Vec<CurrentRecord>,
}

impl CurrentData {
    pub fn from_measurements(file: &MeasurementFile) -> Result<Self> {
        let records: Vec<CurrentRecord> = file
            .records
            .iter()
            .map(|r| CurrentRecord {
                chi: r.chi_params,
                theta: r.theta,
                noise_sigma: r.noise_sigma,
            })
            .collect();
        let data = Self { records };
        data.validate()?;
        Ok(data)
    }

    pub fn to_records(&self, route: CurrentRoute) -> Vec<MeasurementRecord> {
        self.records
            .iter()
            .map(|r| MeasurementRecord {
                chi_params: r.chi,
                theta: r.theta,
                route,
                error_estimate: 0.0,
                noise_sigma: r.noise_sigma,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidArgument("current data set is empty".into()));
        }
        for r in &self.records {
            r.chi.validate()?;
            if !r.theta.is_finite() || !(r.noise_sigma >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite current or negative noise level in record centred at {}",
                    r.chi.center
                )));
            }
        }
        Ok(())
    }

    pub fn chis(&self) -> Vec<ChiProfile> {
        self.records.iter().map(|r| r.chi).collect()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.theta).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// `λ₁(+∞) = b₊`.
    PlusInfinity,
    /// `λ₁(−∞) = b₋`.
    MinusInfinity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambda1Estimate {
    /// Bump centres, increasing.
    pub xi: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub derivative: Vec<f64>,
    pub anchor: Anchor,
    /// Miss at the un-anchored end: `λ₁(ξ_first) − b₋` for the `+∞` anchor.
    pub far_end_mismatch: f64,
}

pub fn recover_lambda1(data: &CurrentData, b_minus: f64, b_plus: f64) -> Result<Lambda1Estimate> {
    recover_lambda1_anchored(data, b_minus, b_plus, Anchor::PlusInfinity)
}

/// Midpoint deconvolution `λ₁'(cᵢ) ≈ ϑ(χᵢ)/‖χᵢ‖²`, cumulative trapezoid,
/// and a constant fixed by the chosen end of the band.
pub fn recover_lambda1_anchored(
    data: &CurrentData,
    b_minus: f64,
    b_plus: f64,
    anchor: Anchor,
) -> Result<Lambda1Estimate> {
    data.validate()?;
    let mut records = data.records.clone();
    records.sort_by(|a, b| a.chi.center.total_cmp(&b.chi.center));
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "band recovery needs at least two bumps".into(),
        ));
    }
    let xi: Vec<f64> = records.iter().map(|r| r.chi.center).collect();
    let mut gaps: Vec<f64> = xi.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidArgument("bump centres must be distinct".into()));
    }
    let spacing = {
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    };
    for w in xi.windows(2) {
        if w[1] - w[0] > 2.0 * spacing * (1.0 + 1e-9) {
            return Err(Error::CoverageGap {
                left: w[0],
                right: w[1],
            });
        }
    }
    if records.iter().any(|r| r.chi.width > 2.0 * spacing * (1.0 + 1e-9)) {
        log::warn!("bumps wider than twice their spacing; midpoint deconvolution degrades");
    }
    let derivative: Vec<f64> = records.iter().map(|r| r.theta / r.chi.norm_sq()).collect();
    let running = cumulative_trapezoid(&xi, &derivative);
    let total = running[running.len() - 1];
    let (shift, far_end_mismatch) = match anchor {
        Anchor::PlusInfinity => (b_plus - total, b_plus - total - b_minus),
        Anchor::MinusInfinity => (b_minus, b_minus + total - b_plus),
    };
    if far_end_mismatch.abs() > TAIL_TOLERANCE {
        log::warn!(
            "recovered band misses the far limit by {far_end_mismatch:e}; data may not come from this field class"
        );
    }
    Ok(Lambda1Estimate {
        lambda1: running.iter().map(|v| v + shift).collect(),
        xi,
        derivative,
        anchor,
        far_end_mismatch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub xi0: f64,
    /// Largest `|LHS + tail − RHS|` over `±ξ₀`.
    pub residual: f64,
    pub relative_residual: f64,
    /// `Σ_{j=2}^{J} (λ_j − λ₁)² ⟨φ̃₁, φ_j⟩²` per sign of ξ₀.
    pub lhs: [f64; 2],
    /// `‖(q − q̃ + Δλ) φ̃₁‖²` per sign; equals `‖(q̃ − q)φ̃₁‖²` when energies match.
    pub rhs: [f64; 2],
    pub tail: [f64; 2],
    /// `λ̃₁ − λ₁` per sign.
    pub energy_gap: [f64; 2],
    /// `max_i |q̃ − q|` over both signs.
    pub potential_gap: f64,
    /// `max ‖φ̃₁ − φ₁‖₂` over both signs.
    pub state_gap: f64,
    pub threshold: f64,
}

impl IdentityReport {
    pub fn potentials_equal(&self) -> bool {
        self.potential_gap <= self.threshold
    }

    pub fn ground_states_equal(&self) -> bool {
        self.state_gap <= self.threshold
    }

    pub fn energies_match(&self, tol: f64) -> bool {
        self.energy_gap.iter().all(|g| g.abs() <= tol)
    }

    /// Both sides of the equivalence agree.
    pub fn dichotomy_holds(&self) -> bool {
        self.potentials_equal() == self.ground_states_equal()
    }
}

/// Checks the Plancherel identity `Σ_{j≥2}(λ_j − λ₁)²⟨φ̃₁, φ_j⟩² = ‖gφ̃₁‖²`,
/// `g = q − q̃ + (λ̃₁ − λ₁)`, at `±xi0` on a common grid, and tests both sides
/// of the equivalence "equal potentials ⟺ equal ground states".
pub fn lemma1_residual(
    field: &MagneticField,
    field_tilde: &MagneticField,
    xi0: f64,
    j_max: usize,
) -> Result<IdentityReport> {
    if field.base() != field_tilde.base() {
        return Err(Error::NonCompact(
            "the two fields differ in their base profiles, not by a compact perturbation".into(),
        ));
    }
    if j_max < 2 {
        return Err(Error::InvalidArgument("identity check needs j_max >= 2".into()));
    }
    let threshold = 1e-8;
    let mut report = IdentityReport {
        xi0,
        residual: 0.0,
        relative_residual: 0.0,
        lhs: [0.0; 2],
        rhs: [0.0; 2],
        tail: [0.0; 2],
        energy_gap: [0.0; 2],
        potential_gap: 0.0,
        state_gap: 0.0,
        threshold,
    };
    let opts = WindowOptions::default();
    for (s, xi) in [xi0, -xi0].into_iter().enumerate() {
        let grid = choose_window_with(field, xi, j_max, &opts)?;
        let op = assemble(field, xi, grid);
        let op_t = assemble(field_tilde, xi, grid);
        let pairs = lowest_eigenpairs(&op, j_max)?;
        let tilde = lowest_eigenpairs(&op_t, 1)?.remove(0);
        let h = grid.h;
        let lambda1 = pairs[0].lambda;
        let d_lambda = tilde.lambda - lambda1;
        let g_phi: Vec<f64> = op
            .potential
            .iter()
            .zip(&op_t.potential)
            .zip(&tilde.phi)
            .map(|((q, qt), p)| (q - qt + d_lambda) * p)
            .collect();
        let rhs = l2_inner(h, &g_phi, &g_phi);
        let lhs: f64 = pairs[1..]
            .iter()
            .map(|p| ((p.lambda - lambda1) * l2_inner(h, &tilde.phi, &p.phi)).powi(2))
            .sum();
        let captured: f64 = pairs.iter().map(|p| l2_inner(h, &g_phi, &p.phi).powi(2)).sum();
        let tail = (rhs - captured).max(0.0);
        let residual = (lhs + tail - rhs).abs();
        report.lhs[s] = lhs;
        report.rhs[s] = rhs;
        report.tail[s] = tail;
        report.energy_gap[s] = d_lambda;
        report.residual = report.residual.max(residual);
        report.relative_residual =
            report
                .relative_residual
                .max(if rhs > 0.0 { residual / rhs } else { residual });
        let q_gap = op
            .potential
            .iter()
            .zip(&op_t.potential)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let diff: Vec<f64> = pairs[0].phi.iter().zip(&tilde.phi).map(|(a, b)| a - b).collect();
        report.potential_gap = report.potential_gap.max(q_gap);
        report.state_gap = report.state_gap.max(l2_norm(h, &diff));
    }
    Ok(report)
}

/// Ground energy and its sensitivities to every hat coefficient,
/// `∂λ₁/∂c_k = h·Σ −v(xᵢ)ψ_k(xᵢ)φ₁(xᵢ)²`, for the potential `a + w`.
fn ground_sensitivity<P: VectorPotential + ?Sized>(
    base: &P,
    w: &PerturbationW,
    xi: f64,
    grid: Grid,
) -> Result<(f64, Vec<f64>)> {
    let nodes = grid.nodes();
    let a: Vec<f64> = nodes.iter().map(|&x| base.potential(x) + w.w(x)).collect();
    let op = FiberOperator::from_potential_values(xi, grid, a);
    let pair = lowest_eigenpairs(&op, 1)?.remove(0);
    let grads = (0..w.basis_size())
        .map(|k| {
            grid.h
                * nodes
                    .iter()
                    .zip(&op.a_nodes)
                    .zip(&pair.phi)
                    .map(|((&x, a), p)| -2.0 * (xi - a) * w.basis(k, x) * p * p)
                    .sum::<f64>()
        })
        .collect();
    Ok((pair.lambda, grads))
}

/// Minimal-norm Gauss–Newton correction of the coefficients of `w` until
/// `a + w` has the same ground energies as `a` at `±xi0`.
pub fn balance_perturbation(field: &MagneticField, w: &PerturbationW, xi0: f64) -> Result<PerturbationW> {
    let k = w.basis_size();
    let base = field.base();
    let opts = WindowOptions::default();
    let xis = [xi0, -xi0];
    let mut grids = Vec::new();
    let mut targets = Vec::new();
    for &xi in &xis {
        let grid = choose_window_with(&base, xi, 1, &opts)?;
        let zero = PerturbationW::zero(w.support_radius, k);
        targets.push(ground_sensitivity(&base, &zero, xi, grid)?.0);
        grids.push(grid);
    }
    let mut current = w.clone();
    current.admissible = false;
    let residual = |w: &PerturbationW| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut resid = DVector::zeros(2);
        let mut jac = DMatrix::zeros(2, k);
        for s in 0..2 {
            let (lambda, grads) = ground_sensitivity(&base, w, xis[s], grids[s])?;
            resid[s] = lambda - targets[s];
            jac.row_mut(s).copy_from_slice(&grads);
        }
        Ok((resid, jac))
    };
    let (mut resid, mut jac) = residual(&current)?;
    for iteration in 0..MAX_BALANCE_ITERATIONS {
        if resid.amax() <= 1e-13 {
            return Ok(current);
        }
        let gram = &jac * jac.transpose();
        let Some(step) = gram.cholesky().map(|ch| -(jac.transpose() * ch.solve(&resid))) else {
            return Err(Error::NonConvergence {
                iterations: iteration,
                gradient_norm: resid.amax(),
            });
        };
        // Backtrack: the two rows are nearly parallel, so full steps can overshoot.
        let mut t = 1.0;
        loop {
            let mut trial = current.clone();
            for (c, d) in trial.coefficients.iter_mut().zip(step.iter()) {
                *c += t * d;
            }
            let (r, j) = residual(&trial)?;
            if r.norm() < resid.norm() {
                current = trial;
                resid = r;
                jac = j;
                break;
            }
            t *= 0.5;
            if t < 1e-6 {
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    gradient_norm: resid.amax(),
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_BALANCE_ITERATIONS,
        gradient_norm: resid.amax(),
    })
}

const MAX_BALANCE_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    /// Indices where the two root candidates were equally consistent.
    pub flagged: Vec<usize>,
    /// `max |a − (q₋ − q₊)/(4ξ₀)|`, an algebraic cross-check.
    pub linear_identity_gap: f64,
}

/// Recovers `a` from `q₊ = (ξ₀ − a)²` and `q₋ = (−ξ₀ − a)²` sampled on `x`
/// (increasing). Roots `ξ₀ ∓ √q₊` are ranked by consistency with `q₋`, then
/// by the sign constraint `±a ≥ 0` on `±x ≥ 0`; remaining ties are resolved
/// by continuity from resolved neighbours.
pub fn extract_a_from_band_data(x: &[f64], q_plus: &[f64], q_minus: &[f64], xi0: f64) -> Result<Extraction> {
    if !(xi0 > 0.0) {
        return Err(Error::InvalidArgument(format!("ξ₀ must be positive, got {xi0}")));
    }
    let n = x.len();
    if q_plus.len() != n || q_minus.len() != n || n == 0 {
        return Err(Error::InvalidArgument(
            "x, q_plus and q_minus must have equal non-zero length".into(),
        ));
    }
    let mut a: Vec<Option<f64>> = vec![None; n];
    let mut pairs = vec![(0.0, 0.0); n];
    let mut flagged = Vec::new();
    for i in 0..n {
        if x[i] == 0.0 {
            a[i] = Some(0.0);
            continue;
        }
        let s = q_plus[i].max(0.0).sqrt();
        let cands = [xi0 - s, xi0 + s];
        pairs[i] = (cands[0], cands[1]);
        let miss = |c: f64| ((xi0 + c).powi(2) - q_minus[i]).abs();
        let (m0, m1) = (miss(cands[0]), miss(cands[1]));
        let tie_tol = 1e-12 * (1.0 + q_plus[i] + q_minus[i]);
        if (m0 - m1).abs() > tie_tol {
            a[i] = Some(if m0 < m1 { cands[0] } else { cands[1] });
            continue;
        }
        let sign_ok = |c: f64| c * x[i].signum() >= 0.0;
        match (sign_ok(cands[0]), sign_ok(cands[1])) {
            (true, false) => a[i] = Some(cands[0]),
            (false, true) => a[i] = Some(cands[1]),
            _ => flagged.push(i),
        }
    }
    // Continuity sweep: extrapolate from resolved neighbours, left to right then back.
    for pass in 0..2 {
        let order: Vec<usize> = if pass == 0 {
            (0..n).collect()
        } else {
            (0..n).rev().collect()
        };
        let mut prev: Vec<usize> = Vec::new();
        for &i in &order {
            if a[i].is_none() && !prev.is_empty() {
                let j = prev[prev.len() - 1];
                let guess = if prev.len() >= 2 {
                    let k = prev[prev.len() - 2];
                    let slope = (a[j].unwrap() - a[k].unwrap()) / (x[j] - x[k]);
                    a[j].unwrap() + slope * (x[i] - x[j])
                } else {
                    a[j].unwrap()
                };
                let (c0, c1) = pairs[i];
                a[i] = Some(if (c0 - guess).abs() <= (c1 - guess).abs() {
                    c0
                } else {
                    c1
                });
            }
            if a[i].is_some() {
                prev.push(i);
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for (i, v) in a.iter().enumerate() {
        match v {
            Some(v) => out.push(*v),
            None => return Err(Error::Unresolved { x: x[i] }),
        }
    }
    let linear_identity_gap = out
        .iter()
        .zip(q_plus.iter().zip(q_minus))
        .map(|(v, (qp, qm))| (v - (qm - qp) / (4.0 * xi0)).abs())
        .fold(0.0, f64::max);
    Ok(Extraction {
        x: x.to_vec(),
        a: out,
        flagged,
        linear_identity_gap,
    })
}

/// Discrete inverse of the fiber: `qᵢ = λ − (−φᵢ₋₁ + 2φᵢ − φᵢ₊₁)/(h²φᵢ)`.
/// Entries where `φᵢ` is below `floor·max φ` are `None`.
pub fn potential_from_ground_state(lambda: f64, phi: &[f64], h: f64, floor: f64) -> Vec<Option<f64>> {
    let n = phi.len();
    let peak = phi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    (0..n)
        .map(|i| {
            let p = phi[i];
            if p.abs() <= floor * peak {
                return None;
            }
            let left = if i > 0 { phi[i - 1] } else { 0.0 };
            let right = if i + 1 < n { phi[i + 1] } else { 0.0 };
            Some(lambda - (2.0 * p - left - right) / (h * h * p))
        })
        .collect()
}

/// Potentials `q(·, ±ξ₀)` reconstructed from the ground states of the two
/// fibers, on the lattice nodes both windows share and where both states exceed
/// `floor` relative to their peaks.
pub fn band_data_potentials<P: VectorPotential + ?Sized>(
    field: &P,
    xi0: f64,
    floor: f64,
    window: &WindowOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut sides = Vec::new();
    for xi in [xi0, -xi0] {
        let grid = choose_window_with(field, xi, 1, window)?;
        let op = assemble(field, xi, grid);
        let pair = lowest_eigenpairs(&op, 1)?.remove(0);
        let q = potential_from_ground_state(pair.lambda, &pair.phi, grid.h, floor);
        sides.push((grid, q));
    }
    let (gp, qp) = &sides[0];
    let (gm, qm) = &sides[1];
    // Same lattice: node offsets differ by an integer.
    let shift = ((gm.x_left - gp.x_left) / gp.h).round() as i64;
    let mut xs = Vec::new();
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for (i, q) in qp.iter().enumerate() {
        let j = i as i64 - shift;
        if j < 0 || j >= gm.n as i64 {
            continue;
        }
        if let (Some(a), Some(b)) = (q, qm[j as usize]) {
            xs.push(gp.node(i));
            plus.push(*a);
            minus.push(b);
        }
    }
    Ok((xs, plus, minus))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionMethod {
    G3Extraction,
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub method: ReconstructionMethod,
    pub x: Vec<f64>,
    pub a_recovered: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_true: Option<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub support_radius: f64,
    pub misfit_history: Vec<f64>,
    pub gradient_norm: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linf_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub support_radius: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// ξ spacing of the model table.
    pub table_step: f64,
    pub window: WindowOptions,
    /// Ground-truth perturbation, for the reported sup-norm error.
    pub truth: Option<PerturbationW>,
    /// Accept supports at or beyond `r0` (logged).
    pub allow_wide_support: bool,
    /// Points of the output x-grid over `[−2r, 2r]`.
    pub output_points: usize,
}

impl FitOptions {
    pub fn new(support_radius: f64) -> Self {
        Self {
            support_radius,
            max_iter: 200,
            grad_tol: 1e-10,
            table_step: 0.01,
            window: WindowOptions::default(),
            truth: None,
            allow_wide_support: false,
            output_points: 401,
        }
    }
}

struct ModelFiber {
    xi: f64,
    grid: Grid,
    a_prior: Vec<f64>,
    /// Node range `[lo, hi)` meeting `(−r, r)`.
    support: (usize, usize),
    /// `basis[k][i − lo]`.
    basis: Vec<Vec<f64>>,
    /// The ground state never reaches the support; λ₁ is frozen at its prior value.
    frozen: Option<f64>,
}

/// Current functional of `a_prior + Σ c_k ψ_k` for a fixed set of profiles,
/// evaluated by the integration-by-parts route on a fixed ξ-table.
pub struct CurrentModel {
    chis: Vec<ChiProfile>,
    fibers: Vec<ModelFiber>,
    /// Per profile: first fiber index and weights `−wᵢ (χ²)'(ξᵢ)`.
    weights: Vec<(usize, Vec<f64>)>,
    support_radius: f64,
    basis_size: usize,
}

pub struct ModelEvaluation {
    pub theta: Vec<f64>,
    /// `jacobian[(n, k)] = ∂ϑ(χ_n)/∂c_k`.
    pub jacobian: DMatrix<f64>,
}

impl CurrentModel {
    pub fn new(
        prior: &MagneticField,
        support_radius: f64,
        basis_size: usize,
        chis: &[ChiProfile],
        table_step: f64,
        window: &WindowOptions,
    ) -> Result<Self> {
        if chis.is_empty() || basis_size == 0 || !(table_step > 0.0) {
            return Err(Error::InvalidArgument(
                "model needs profiles, a positive table step and a non-empty basis".into(),
            ));
        }
        for c in chis {
            c.validate()?;
        }
        let lo = chis.iter().map(|c| c.support().0).fold(f64::INFINITY, f64::min);
        let hi = chis
            .iter()
            .map(|c| c.support().1)
            .fold(f64::NEG_INFINITY, f64::max);
        let first = (lo / table_step).floor() as i64 - 1;
        let last = (hi / table_step).ceil() as i64 + 1;
        let xis: Vec<f64> = (first..=last).map(|m| m as f64 * table_step).collect();
        let basis = PerturbationW::zero(support_radius, basis_size);
        let r = support_radius;
        let fibers = xis
            .par_iter()
            .map(|&xi| {
                let grid = choose_window_with(prior, xi, 1, window)?;
                let nodes = grid.nodes();
                let a_prior: Vec<f64> = nodes.iter().map(|&x| prior.eval_a(x)).collect();
                let s_lo = nodes.partition_point(|&x| x <= -r);
                let s_hi = nodes.partition_point(|&x| x < r);
                let basis_vals: Vec<Vec<f64>> = (0..basis_size)
                    .map(|k| nodes[s_lo..s_hi].iter().map(|&x| basis.basis(k, x)).collect())
                    .collect();
                let op = FiberOperator::from_potential_values(xi, grid, a_prior.clone());
                let pair = lowest_eigenpairs(&op, 1)?.remove(0);
                let peak = pair.phi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
                let reach = pair.phi[s_lo.min(grid.n - 1)..s_hi.max(s_lo + 1).min(grid.n)]
                    .iter()
                    .fold(0.0f64, |m, p| m.max(p.abs()));
                let frozen = if s_hi <= s_lo || reach <= 1e-150 * peak {
                    Some(pair.lambda)
                } else {
                    None
                };
                Ok(ModelFiber {
                    xi,
                    grid,
                    a_prior,
                    support: (s_lo, s_hi),
                    basis: basis_vals,
                    frozen,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = chis
            .iter()
            .map(|chi| {
                let (lo, hi) = chi.support();
                let (i0, i1) = lattice_cover(xis[0], table_step, lo, hi);
                let i0 = i0.max(0) as usize;
                let i1 = (i1.max(0) as usize).min(xis.len() - 1);
                let w = simpson_weights(i1 - i0 + 1, table_step);
                let mut coeffs: Vec<f64> = (i0..=i1)
                    .zip(w)
                    .map(|(i, wi)| -wi * 2.0 * chi.value(xis[i]) * chi.derivative(xis[i]))
                    .collect();
                // Measure λ₁ from its value at the node nearest the centre, so the
                // quadrature error of ∫(χ²)' = 0 is not multiplied by λ₁.
                let reference =
                    (((chi.center - xis[i0]) / table_step).round().max(0.0) as usize).min(coeffs.len() - 1);
                let total: f64 = coeffs.iter().sum();
                coeffs[reference] -= total;
                (i0, coeffs)
            })
            .collect();
        Ok(Self {
            chis: chis.to_vec(),
            fibers,
            weights,
            support_radius,
            basis_size,
        })
    }

    pub fn chis(&self) -> &[ChiProfile] {
        &self.chis
    }

    pub fn basis_size(&self) -> usize {
        self.basis_size
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    fn solve_fiber(&self, f: &ModelFiber, c: &[f64]) -> Result<(f64, Vec<f64>)> {
        if let Some(l) = f.frozen {
            return Ok((l, vec![0.0; self.basis_size]));
        }
        let (lo, hi) = f.support;
        let mut a = f.a_prior.clone();
        for (k, ck) in c.iter().enumerate() {
            for (ai, b) in a[lo..hi].iter_mut().zip(&f.basis[k]) {
                *ai += ck * b;
            }
        }
        let op = FiberOperator::from_potential_values(f.xi, f.grid, a);
        let pair = lowest_eigenpairs(&op, 1)?.remove(0);
        let grads = f
            .basis
            .iter()
            .map(|bk| {
                f.grid.h
                    * (lo..hi)
                        .zip(bk)
                        .map(|(i, b)| -2.0 * (f.xi - op.a_nodes[i]) * b * pair.phi[i].powi(2))
                        .sum::<f64>()
            })
            .collect();
        Ok((pair.lambda, grads))
    }

    pub fn evaluate(&self, c: &[f64]) -> Result<ModelEvaluation> {
        assert_eq!(c.len(), self.basis_size);
        let solved = self
            .fibers
            .par_iter()
            .map(|f| self.solve_fiber(f, c))
            .collect::<Result<Vec<_>>>()?;
        let mut theta = Vec::with_capacity(self.chis.len());
        let mut jacobian = DMatrix::zeros(self.chis.len(), self.basis_size);
        for (n, (i0, w)) in self.weights.iter().enumerate() {
            let mut t = 0.0;
            for (off, wi) in w.iter().enumerate() {
                let (lambda, grads) = &solved[i0 + off];
                t += wi * lambda;
                for (k, g) in grads.iter().enumerate() {
                    jacobian[(n, k)] += wi * g;
                }
            }
            theta.push(t);
        }
        Ok(ModelEvaluation { theta, jacobian })
    }
}

/// Noise-free currents of `prior + w` for `chis`, through the same model the
/// fit uses.
pub fn synthesize_currents(
    prior: &MagneticField,
    w: &PerturbationW,
    chis: &[ChiProfile],
    table_step: f64,
    window: &WindowOptions,
) -> Result<CurrentData> {
    let model = CurrentModel::new(prior, w.support_radius, w.basis_size(), chis, table_step, window)?;
    let eval = model.evaluate(&w.coefficients)?;
    Ok(CurrentData {
        records: chis
            .iter()
            .zip(eval.theta)
            .map(|(&chi, theta)| CurrentRecord {
                chi,
                theta,
                noise_sigma: 0.0,
            })
            .collect(),
    })
}

/// Pool-adjacent-violators: non-decreasing least-squares fit of `y`.
fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Constraints on the cell slopes `σ_m` of `w` keeping `b + w'` monotone and
/// inside `[b₋, b₊]`. In the shifted variable `τ_m = σ_m + (jumps of b at
/// interior knots 1..=m)` monotonicity reads `τ` non-decreasing.
struct SlopeCone {
    shift: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SlopeCone {
    fn new(prior: &MagneticField, basis: &PerturbationW) -> Self {
        let k = basis.basis_size();
        let knots = basis.breakpoints();
        let jump = |x: f64| prior.eval_b(x) - prior.eval_b(x - 1e-12 * (1.0 + x.abs()));
        let before = |x: f64| prior.eval_b(x - 1e-12 * (1.0 + x.abs()));
        let (b_minus, b_plus) = (prior.b_minus(), prior.b_plus());
        let mut shift = vec![0.0; k + 1];
        for m in 1..=k {
            shift[m] = shift[m - 1] + jump(knots[m]);
        }
        let mut lower = Vec::with_capacity(k + 1);
        let mut upper = Vec::with_capacity(k + 1);
        for m in 0..=k {
            let mut lo = b_minus - prior.eval_b(knots[m]);
            let mut hi = b_plus - before(knots[m + 1]);
            if m == 0 {
                lo = lo.max(-jump(knots[0]));
            }
            if m == k {
                hi = hi.min(jump(knots[k + 1]));
            }
            lower.push(lo + shift[m]);
            upper.push(hi + shift[m]);
        }
        Self { shift, lower, upper }
    }

    fn contains(&self, sigma: &[f64], tol: f64) -> bool {
        let tau: Vec<f64> = sigma.iter().zip(&self.shift).map(|(s, b)| s + b).collect();
        tau.windows(2).all(|w| w[0] <= w[1] + tol)
            && tau
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| *t >= lo - tol && *t <= hi + tol)
            && sigma.iter().sum::<f64>().abs() <= tol
    }

    /// Orthonormal basis (in coefficient space) of the directions that keep
    /// every active constraint at `sigma` active: pooled runs of equal `τ` move
    /// together, runs touching a bound stay put, and the slopes keep summing to zero.
    fn face_basis(&self, sigma: &[f64], delta: f64) -> DMatrix<f64> {
        let k = sigma.len() - 1;
        let tau: Vec<f64> = sigma.iter().zip(&self.shift).map(|(s, b)| s + b).collect();
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-11 * (1.0 + a.abs() + b.abs());
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for m in 0..=k {
            match blocks.last_mut() {
                Some(b) if tol(tau[b[b.len() - 1]], tau[m]) => b.push(m),
                _ => blocks.push(vec![m]),
            }
        }
        blocks.retain(|b| {
            !b.iter()
                .any(|&m| tol(tau[m], self.lower[m]) || tol(tau[m], self.upper[m]))
        });
        if blocks.len() < 2 {
            return DMatrix::zeros(k, 0);
        }
        // Block direction in coefficient space: c_m = Δ·Σ_{i≤m} σ_i.
        let lift = |block: &[usize]| -> DVector<f64> {
            let mut ds = vec![0.0; k + 1];
            for &m in block {
                ds[m] = 1.0 / block.len() as f64;
            }
            DVector::from_vec(coefficients_from_slopes(&ds, delta))
        };
        let columns: Vec<DVector<f64>> = blocks.windows(2).map(|w| lift(&w[0]) - lift(&w[1])).collect();
        let m = DMatrix::from_columns(&columns);
        let svd = m.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let top = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&v| v > 1e-12 * top).count();
        u.columns(0, rank).into_owned()
    }

    /// Alternating isotonic fit, box clip and zero-sum shift.
    fn project(&self, sigma: &[f64]) -> Vec<f64> {
        let tol = 1e-13;
        let mut s = sigma.to_vec();
        for _ in 0..200 {
            if self.contains(&s, tol) {
                break;
            }
            let tau: Vec<f64> = s.iter().zip(&self.shift).map(|(a, b)| a + b).collect();
            let tau: Vec<f64> = isotonic(&tau)
                .into_iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(t, (lo, hi))| t.clamp(*lo, *hi))
                .collect();
            s = tau.iter().zip(&self.shift).map(|(t, b)| t - b).collect();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            for v in s.iter_mut() {
                *v -= mean;
            }
        }
        s
    }
}

/// Damping increases tried per step before the subspace is abandoned.
const MAX_DAMPING_RAISES: usize = 16;

fn slopes_from_coefficients(c: &[f64], delta: f64) -> Vec<f64> {
    let k = c.len();
    (0..=k)
        .map(|m| {
            let left = if m == 0 { 0.0 } else { c[m - 1] };
            let right = if m == k { 0.0 } else { c[m] };
            (right - left) / delta
        })
        .collect()
}

fn coefficients_from_slopes(s: &[f64], delta: f64) -> Vec<f64> {
    let mut c = Vec::with_capacity(s.len() - 1);
    let mut acc = 0.0;
    for v in &s[..s.len() - 1] {
        acc += v * delta;
        c.push(acc);
    }
    c
}

/// Levenberg–Marquardt fit of hat coefficients `c` minimizing
/// `Σ (ϑ(χᵢ; a + w_c) − θᵢ)² + reg·‖c‖²`, iterates kept in the monotone-field cone.
pub fn fit_field(
    data: &CurrentData,
    prior: &MagneticField,
    basis_size: usize,
    reg: f64,
    opts: &FitOptions,
) -> Result<ReconstructionResult> {
    data.validate()?;
    if !(reg >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularization {reg} must be >= 0"
        )));
    }
    let r = opts.support_radius;
    let r0 = prior.r0()?;
    if r >= r0 {
        if opts.allow_wide_support {
            log::warn!("fit support {r} is not below r0 = {r0}; uniqueness is not guaranteed");
        } else {
            return Err(Error::SupportTooWide { radius: r, r0 });
        }
    }
    let model = CurrentModel::new(prior, r, basis_size, &data.chis(), opts.table_step, &opts.window)?;
    let observed = DVector::from_vec(data.thetas());
    let basis = PerturbationW::zero(r, basis_size);
    let cone = SlopeCone::new(prior, &basis);
    let delta = basis.spacing();

    let objective = |eval: &ModelEvaluation, c: &DVector<f64>| -> (f64, DVector<f64>) {
        let resid = DVector::from_vec(eval.theta.clone()) - &observed;
        (resid.norm_squared() + reg * c.norm_squared(), resid)
    };

    let mut c = DVector::zeros(basis_size);
    let mut eval = model.evaluate(c.as_slice())?;
    let (mut phi, mut resid) = objective(&eval, &c);
    let mut history = vec![phi];
    let jtj0 = eval.jacobian.transpose() * &eval.jacobian;
    let mut mu = 1e-3
        * (0..basis_size)
            .map(|k| jtj0[(k, k)])
            .fold(0.0, f64::max)
            .max(1e-300);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    while iterations < opts.max_iter {
        let jt = eval.jacobian.transpose();
        let grad = &jt * &resid + &c * reg;
        // Stationarity is measured on the face of the cone the iterate lies on.
        let face = cone.face_basis(&slopes_from_coefficients(c.as_slice(), delta), delta);
        grad_norm = 2.0 * (face.transpose() * &grad).norm();
        if 2.0 * grad.norm() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut normal = &jt * &eval.jacobian;
        for k in 0..basis_size {
            normal[(k, k)] += reg;
        }
        // Reduced step within the face first; a full step may leave it.
        let full = DMatrix::identity(basis_size, basis_size);
        let subspaces: Vec<&DMatrix<f64>> = if grad_norm >= opts.grad_tol && face.ncols() > 0 {
            vec![&face, &full]
        } else {
            vec![&full]
        };
        let mut accepted = false;
        'spaces: for z in subspaces {
            let reduced_normal = z.transpose() * &normal * z;
            let reduced_grad = z.transpose() * &grad;
            for _ in 0..MAX_DAMPING_RAISES {
                let mut damped = reduced_normal.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += mu;
                }
                let Some(y) = damped.cholesky().map(|ch| ch.solve(&(-&reduced_grad))) else {
                    mu *= 10.0;
                    continue;
                };
                let trial_raw = &c + z * y;
                let slopes = slopes_from_coefficients(trial_raw.as_slice(), delta);
                let trial = DVector::from_vec(coefficients_from_slopes(&cone.project(&slopes), delta));
                if (&trial - &c).norm() <= 1e-15 * (1.0 + c.norm()) {
                    break;
                }
                let trial_eval = model.evaluate(trial.as_slice())?;
                let (trial_phi, trial_resid) = objective(&trial_eval, &trial);
                if trial_phi < phi {
                    c = trial;
                    eval = trial_eval;
                    phi = trial_phi;
                    resid = trial_resid;
                    history.push(phi);
                    mu = (mu / 3.0).max(1e-300);
                    accepted = true;
                    break 'spaces;
                }
                mu *= 4.0;
            }
        }
        if !accepted {
            // No representable decrease anywhere in the cone.
            converged = grad_norm < opts.grad_tol || phi <= f64::EPSILON * history[0];
            if !converged {
                log::warn!("fit stalled after {iterations} iterations at gradient norm {grad_norm:e}");
            }
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            gradient_norm: grad_norm,
        });
    }

    let recovered = PerturbationW::unchecked(r, c.as_slice().to_vec());
    let points = opts.output_points.max(2);
    let x: Vec<f64> = (0..points)
        .map(|i| -2.0 * r + 4.0 * r * i as f64 / (points - 1) as f64)
        .collect();
    let a_recovered: Vec<f64> = x.iter().map(|&s| prior.eval_a(s) + recovered.w(s)).collect();
    let a_true: Option<Vec<f64>> = opts
        .truth
        .as_ref()
        .map(|t| x.iter().map(|&s| prior.eval_a(s) + t.w(s)).collect());
    let linf_error = a_true.as_ref().map(|t| {
        t.iter()
            .zip(&a_recovered)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    });
    Ok(ReconstructionResult {
        method: ReconstructionMethod::GaussNewton,
        x,
        a_recovered,
        a_true,
        coefficients: c.as_slice().to_vec(),
        support_radius: r,
        misfit_history: history,
        gradient_norm: grad_norm,
        iterations,
        linf_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(isotonic(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn slopes_round_trip() {
        let c = [0.3, -0.1, 0.2];
        let s = slopes_from_coefficients(&c, 0.1);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 0.0, epsilon = 1e-14);
        let back = coefficients_from_slopes(&s, 0.1);
        for (a, b) in back.iter().zip(&c) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn cone_keeps_admissible_hat_and_repairs_bad_one() {
        let prior = MagneticField::step(1.0, 2.0, 0.0).unwrap();
        let basis = PerturbationW::zero(0.2, 3);
        let cone = SlopeCone::new(&prior, &basis);
        let good = slopes_from_coefficients(&[0.025, 0.05, 0.025], basis.spacing());
        assert!(cone.contains(&good, 1e-12));
        assert_eq!(cone.project(&good), good);
        let bad = slopes_from_coefficients(&[-0.05, 0.05, -0.05], basis.spacing());
        assert!(!cone.contains(&bad, 1e-12));
        let fixed = cone.project(&bad);
        assert!(cone.contains(&fixed, 1e-12));
        let w = PerturbationW::new(0.2, coefficients_from_slopes(&fixed, basis.spacing())).unwrap();
        assert!(crate::fields::perturb(&prior, w).is_ok());
    }

    #[test]
    fn extraction_recovers_linear_potential() {
        let xi0 = 0.7;
        let x: Vec<f64> = (0..=200).map(|i| -5.0 + 0.05 * i as f64).collect();
        let qp: Vec<f64> = x.iter().map(|a| (xi0 - a).powi(2)).collect();
        let qm: Vec<f64> = x.iter().map(|a| (-xi0 - a).powi(2)).collect();
        let e = extract_a_from_band_data(&x, &qp, &qm, xi0).unwrap();
        for (a, t) in e.a.iter().zip(&x) {
            assert_abs_diff_eq!(a, t, epsilon = 1e-10);
        }
    }

    #[test]
    fn discrete_potential_inverse_is_exact_on_the_stencil() {
        let f = MagneticField::constant(1.0).unwrap();
        let grid = choose_window_with(&f, 0.4, 1, &WindowOptions::default()).unwrap();
        let op = assemble(&f, 0.4, grid);
        let pair = lowest_eigenpairs(&op, 1).unwrap().remove(0);
        let q = potential_from_ground_state(pair.lambda, &pair.phi, grid.h, 1e-6);
        let mut checked = 0;
        for (i, v) in q.iter().enumerate() {
            if let Some(v) = v {
                assert!((v - op.potential[i]).abs() < 1e-5 * (1.0 + op.potential[i]));
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
