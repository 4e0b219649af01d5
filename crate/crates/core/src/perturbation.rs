//! Second-order perturbation theory of the ground fiber under `a ↦ a + εw`:
//! contour spectral projections, the series `F_ξ(ε)`, the coefficient `A₂`
//! by two routes, and the κ-window on which `A₂` is coercive.
//!
//! With `ω = −v·w` the perturbed potential is `q + ℓ_ε`, `ℓ_ε = εω + ε²w²`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{r0_bound, PerturbationW, VectorPotential};
use crate::spectral::{
    assemble, choose_window, choose_window_with, l2_inner, lowest_eigenpairs, FiberOperator, WindowOptions,
};
use crate::tridiag::TridiagLu;
use crate::{Error, Result};

/// Minimum distance between a contour node and any eigenvalue.
const NODE_CLEARANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub rho: f64,
    pub nodes: usize,
}

impl ContourSpec {
    /// Radius `(3b₋ − b₊)/2` with 64 nodes.
    pub fn default_for(b_minus: f64, b_plus: f64) -> Result<Self> {
        let spec = Self {
            rho: 0.5 * (3.0 * b_minus - b_plus),
            nodes: 64,
        };
        spec.validate(b_minus, b_plus)?;
        Ok(spec)
    }

    pub fn validate(&self, b_minus: f64, b_plus: f64) -> Result<()> {
        let gap = 3.0 * b_minus - b_plus;
        if !(self.rho > 0.0 && self.rho < gap) {
            return Err(Error::Contour(format!(
                "radius {} outside (0, 3b₋ − b₊) = (0, {gap})",
                self.rho
            )));
        }
        if self.nodes < 16 || !self.nodes.is_multiple_of(2) {
            return Err(Error::Contour(format!(
                "contour needs an even node count >= 16, got {}",
                self.nodes
            )));
        }
        Ok(())
    }

    fn angles(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes).map(move |k| std::f64::consts::TAU * k as f64 / self.nodes as f64)
    }
}

/// Riesz projection onto the eigenvalues of `op` inside the circle
/// `|z − center| = rho`, by the trapezoid rule with one factored resolvent per node.
pub struct ContourProjector {
    pub center: f64,
    pub spec: ContourSpec,
    nodes: Vec<Complex64>,
    phases: Vec<Complex64>,
    factors: Vec<TridiagLu<Complex64>>,
    n: usize,
}

/// Contour projector for the eigenvalue near `lambda1`, certified by Sturm
/// counts to enclose exactly one eigenvalue with all nodes clear of the spectrum.
pub fn projection_contour(op: &FiberOperator, lambda1: f64, spec: &ContourSpec) -> Result<ContourProjector> {
    if !(spec.rho > 0.0) || spec.nodes < 16 || !spec.nodes.is_multiple_of(2) {
        return Err(Error::Contour(format!("malformed contour {spec:?}")));
    }
    let lo = lambda1 - spec.rho;
    let hi = lambda1 + spec.rho;
    let inside = op.count_below(hi) - op.count_below(lo);
    if inside != 1 {
        return Err(Error::Contour(format!(
            "circle of radius {} around {lambda1} encloses {inside} eigenvalues at ξ = {}",
            spec.rho, op.xi
        )));
    }
    for edge in [lo, hi] {
        if op.count_below(edge + NODE_CLEARANCE) != op.count_below(edge - NODE_CLEARANCE) {
            return Err(Error::Contour(format!(
                "eigenvalue within {NODE_CLEARANCE} of contour crossing {edge} at ξ = {}",
                op.xi
            )));
        }
    }
    let off: Vec<Complex64> = op.offdiag.iter().map(|&e| Complex64::new(e, 0.0)).collect();
    let floor = f64::EPSILON * op.norm();
    let phases: Vec<Complex64> = spec.angles().map(|t| Complex64::from_polar(1.0, t)).collect();
    let nodes: Vec<Complex64> = phases.iter().map(|p| lambda1 + spec.rho * p).collect();
    let factors = nodes
        .par_iter()
        .map(|&z| {
            let d: Vec<Complex64> = op.diag.iter().map(|&x| Complex64::new(x, 0.0) - z).collect();
            TridiagLu::factor(&off, &d, &off, floor)
        })
        .collect();
    Ok(ContourProjector {
        center: lambda1,
        spec: *spec,
        nodes,
        phases,
        factors,
        n: op.grid.n,
    })
}

impl ContourProjector {
    pub fn node(&self, k: usize) -> Complex64 {
        self.nodes[k]
    }

    /// `(T − z_k)⁻¹ b` in place.
    pub fn resolvent_solve(&self, k: usize, b: &mut [Complex64]) {
        self.factors[k].solve(b);
    }

    /// `Σ_k weight_k · f(k)` with trapezoid weights `ρ e^{iθ_k}/N`, so that the
    /// result approximates `(1/2πi)∮ g(z) dz` when `f(k) = g(z_k)`.
    fn contour_sum<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..self.nodes.len()).into_par_iter().map(f).collect()
    }

    fn weight(&self, k: usize) -> Complex64 {
        self.phases[k] * (self.spec.rho / self.spec.nodes as f64)
    }

    /// `p u = −(1/2πi)∮ (T − z)⁻¹ u dz`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n);
        let terms = self.contour_sum(|k| {
            let mut x: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            self.resolvent_solve(k, &mut x);
            let w = self.weight(k);
            x.into_iter().map(|xi| (w * xi).re).collect::<Vec<f64>>()
        });
        let mut out = vec![0.0; self.n];
        for t in &terms {
            for (o, v) in out.iter_mut().zip(t) {
                *o -= v;
            }
        }
        out
    }
}

/// Sup-norm constant with `‖ℓ_ε‖_∞ ≤ ε·C(ξ)` for `ε ≤ 1`: `C = δ(M + δ)`,
/// `δ = max|w|`, `M = sup_{[−r, r]} |v(·, ξ)|`.
pub fn perturbation_constant<P: VectorPotential + ?Sized>(field: &P, w: &PerturbationW, xi: f64) -> f64 {
    let delta = w.coefficients.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let r = w.support_radius;
    let m = 2.0
        * (xi - field.potential(-r))
            .abs()
            .max((xi - field.potential(r)).abs());
    delta * (m + delta)
}

/// `ε⋆ = min(1, (3b₋ − b₊ − ρ)/C, ρ/C)`.
pub fn epsilon_star(b_minus: f64, b_plus: f64, c_bound: f64, rho: f64) -> f64 {
    if c_bound == 0.0 {
        return 1.0;
    }
    1f64.min((3.0 * b_minus - b_plus - rho) / c_bound)
        .min(rho / c_bound)
}

/// Smallest `ε⋆` over a set of momenta; the uniform choice for lattice experiments.
pub fn epsilon_star_uniform<P: VectorPotential + ?Sized>(
    field: &P,
    w: &PerturbationW,
    xis: &[f64],
    spec: &ContourSpec,
) -> f64 {
    let (b_minus, b_plus) = field.field_bounds();
    xis.iter()
        .map(|&xi| epsilon_star(b_minus, b_plus, perturbation_constant(field, w, xi), spec.rho))
        .fold(1.0, f64::min)
}

/// Base fiber data shared by every ε at one ξ.
pub struct FiberPerturbation {
    pub op: FiberOperator,
    pub lambda1: f64,
    pub phi1: Vec<f64>,
    /// `ω(x_i, ξ) = −v(x_i, ξ) w(x_i)`.
    pub omega: Vec<f64>,
    /// `w(x_i)`.
    pub w_nodes: Vec<f64>,
    pub c_bound: f64,
    pub epsilon_star: f64,
    pub spec: ContourSpec,
    b_minus: f64,
    b_plus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FxiValue {
    pub epsilon: f64,
    /// `⟨p_ε φ₁, ℓ_ε φ₁⟩`.
    pub value: f64,
    /// `(λ_{ε,1} − λ₁)⟨p_ε φ₁, φ₁⟩`.
    pub difference_form: f64,
    pub lambda1: f64,
    pub lambda_eps: f64,
    pub c_bound: f64,
    pub epsilon_star: f64,
    /// `max_i |ℓ_ε(x_i)|`.
    pub ell_sup: f64,
}

impl FiberPerturbation {
    pub fn new<P: VectorPotential + ?Sized>(
        field: &P,
        w: &PerturbationW,
        xi: f64,
        spec: &ContourSpec,
    ) -> Result<Self> {
        let (b_minus, b_plus) = field.field_bounds();
        spec.validate(b_minus, b_plus)?;
        let op = assemble(field, xi, choose_window(field, xi, 2)?);
        let pairs = lowest_eigenpairs(&op, 2)?;
        let w_nodes: Vec<f64> = op.grid.nodes().iter().map(|&x| w.w(x)).collect();
        let omega = op
            .velocity()
            .iter()
            .zip(&w_nodes)
            .map(|(v, wv)| -v * wv)
            .collect();
        let c_bound = perturbation_constant(field, w, xi);
        Ok(Self {
            lambda1: pairs[0].lambda,
            phi1: pairs[0].phi.clone(),
            omega,
            w_nodes,
            c_bound,
            epsilon_star: epsilon_star(b_minus, b_plus, c_bound, spec.rho),
            spec: *spec,
            op,
            b_minus,
            b_plus,
        })
    }

    pub fn ell(&self, epsilon: f64) -> Vec<f64> {
        self.omega
            .iter()
            .zip(&self.w_nodes)
            .map(|(o, w)| epsilon * o + epsilon * epsilon * w * w)
            .collect()
    }

    /// `A₁ = ⟨ωφ₁, φ₁⟩`.
    pub fn first_coefficient(&self) -> f64 {
        let h = self.op.grid.h;
        h * self
            .omega
            .iter()
            .zip(&self.phi1)
            .map(|(o, p)| o * p * p)
            .sum::<f64>()
    }

    pub fn evaluate(&self, epsilon: f64) -> Result<FxiValue> {
        if !(epsilon > 0.0 && epsilon < self.epsilon_star) {
            return Err(Error::EpsilonOutOfRange {
                epsilon,
                epsilon_star: self.epsilon_star,
            });
        }
        let ell = self.ell(epsilon);
        let perturbed = self.op.shifted(&ell);
        let lambda_eps = lowest_eigenpairs(&perturbed, 1)?[0].lambda;
        let projector = projection_contour(&perturbed, self.lambda1, &self.spec)?;
        let projected = projector.apply(&self.phi1);
        let h = self.op.grid.h;
        let ell_phi: Vec<f64> = ell.iter().zip(&self.phi1).map(|(l, p)| l * p).collect();
        let value = l2_inner(h, &projected, &ell_phi);
        let difference_form = (lambda_eps - self.lambda1) * l2_inner(h, &projected, &self.phi1);
        if (value - difference_form).abs() > 1e-8 * (1.0 + value.abs()) {
            return Err(Error::Mismatch(format!(
                "F_ξ forms disagree at ξ = {}, ε = {epsilon}: {value} vs {difference_form}",
                self.op.xi
            )));
        }
        Ok(FxiValue {
            epsilon,
            value,
            difference_form,
            lambda1: self.lambda1,
            lambda_eps,
            c_bound: self.c_bound,
            epsilon_star: self.epsilon_star,
            ell_sup: ell.iter().fold(0.0f64, |m, l| m.max(l.abs())),
        })
    }

    /// `⟨p₁φ₁, w²φ₁⟩ + (1/2πi)∮ ⟨r(z) ω r(z) φ₁, ωφ₁⟩ dz`, every resolvent
    /// applied by a linear solve.
    pub fn a2_contour(&self) -> Result<f64> {
        let projector = projection_contour(&self.op, self.lambda1, &self.spec)?;
        let h = self.op.grid.h;
        let projected = projector.apply(&self.phi1);
        let w2_phi: Vec<f64> = self
            .w_nodes
            .iter()
            .zip(&self.phi1)
            .map(|(w, p)| w * w * p)
            .collect();
        let first = l2_inner(h, &projected, &w2_phi);
        let omega_phi: Vec<f64> = self.omega.iter().zip(&self.phi1).map(|(o, p)| o * p).collect();
        let terms = projector.contour_sum(|k| {
            let mut x: Vec<Complex64> = self.phi1.iter().map(|&p| Complex64::new(p, 0.0)).collect();
            projector.resolvent_solve(k, &mut x);
            for (xi, o) in x.iter_mut().zip(&self.omega) {
                *xi *= o;
            }
            projector.resolvent_solve(k, &mut x);
            let g: Complex64 = x.iter().zip(&omega_phi).map(|(a, b)| a * b).sum::<Complex64>() * h;
            (projector.weight(k) * g).re
        });
        Ok(first + terms.iter().sum::<f64>())
    }

    pub fn b_limits(&self) -> (f64, f64) {
        (self.b_minus, self.b_plus)
    }
}

/// `F_ξ(ε)` at one `(ξ, ε)`; `value` is the inner-product form, which is
/// cross-checked against the eigenvalue-difference form.
pub fn f_xi<P: VectorPotential + ?Sized>(
    field: &P,
    w: &PerturbationW,
    xi: f64,
    epsilon: f64,
    spec: &ContourSpec,
) -> Result<FxiValue> {
    FiberPerturbation::new(field, w, xi, spec)?.evaluate(epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2Sum {
    /// `‖wφ₁‖² − Σ_{j=2}^{J} ω_j²/(λ_j − λ₁)`.
    pub value: f64,
    /// Bound on the omitted terms; the full coefficient lies in `[value − tail_bound, value]`.
    pub tail_bound: f64,
    pub w_phi_norm_sq: f64,
    /// `ω₁ = A₁`.
    pub first_coefficient: f64,
    pub j_max: usize,
}

/// `A₂` from the spectral sum over the lowest `j_max` fibers' eigenpairs.
///
/// The tail denominator is the smaller of `(2J+1)b₋ − b₊` and the computed
/// discrete gap `λ_{J+1} − λ₁`.
pub fn a2_sum<P: VectorPotential + ?Sized>(
    field: &P,
    w: &PerturbationW,
    xi: f64,
    j_max: usize,
) -> Result<A2Sum> {
    a2_sum_with(field, w, xi, j_max, &WindowOptions::default())
}

pub fn a2_sum_with<P: VectorPotential + ?Sized>(
    field: &P,
    w: &PerturbationW,
    xi: f64,
    j_max: usize,
    opts: &WindowOptions,
) -> Result<A2Sum> {
    if j_max < 6 {
        return Err(Error::InvalidArgument(format!(
            "A₂ sum needs j_max >= 6, got {j_max}"
        )));
    }
    let (b_minus, b_plus) = field.field_bounds();
    let op = assemble(field, xi, choose_window_with(field, xi, j_max + 1, opts)?);
    let pairs = lowest_eigenpairs(&op, j_max + 1)?;
    let h = op.grid.h;
    let phi1 = &pairs[0].phi;
    let w_nodes: Vec<f64> = op.grid.nodes().iter().map(|&x| w.w(x)).collect();
    let omega_phi: Vec<f64> = op
        .velocity()
        .iter()
        .zip(&w_nodes)
        .zip(phi1)
        .map(|((v, wv), p)| -v * wv * p)
        .collect();
    let w_phi_norm_sq = h * w_nodes
        .iter()
        .zip(phi1)
        .map(|(wv, p)| (wv * p).powi(2))
        .sum::<f64>();
    let coefficients: Vec<f64> = pairs[..j_max]
        .iter()
        .map(|p| l2_inner(h, &omega_phi, &p.phi))
        .collect();
    let lambda1 = pairs[0].lambda;
    let series: f64 = coefficients[1..]
        .iter()
        .zip(&pairs[1..j_max])
        .map(|(c, p)| c * c / (p.lambda - lambda1))
        .sum();
    let captured: f64 = coefficients.iter().map(|c| c * c).sum();
    let remainder = (l2_inner(h, &omega_phi, &omega_phi) - captured).max(0.0);
    let analytic_gap = (2 * j_max + 1) as f64 * b_minus - b_plus;
    let discrete_gap = pairs[j_max].lambda - lambda1;
    let tail_bound = remainder / analytic_gap.min(discrete_gap);
    Ok(A2Sum {
        value: w_phi_norm_sq - series,
        tail_bound,
        w_phi_norm_sq,
        first_coefficient: coefficients[0],
        j_max,
    })
}

pub fn a2_contour<P: VectorPotential + ?Sized>(
    field: &P,
    w: &PerturbationW,
    xi: f64,
    spec: &ContourSpec,
) -> Result<f64> {
    FiberPerturbation::new(field, w, xi, spec)?.a2_contour()
}

/// Least-squares coefficients `[A₁, …, A_d]` of `F(ε) ≈ Σ_{n=1}^{d} A_n εⁿ`.
pub fn fit_series(epsilons: &[f64], values: &[f64], degree: usize) -> Result<Vec<f64>> {
    if degree == 0 || epsilons.len() != values.len() || epsilons.len() < degree {
        return Err(Error::InvalidArgument(format!(
            "series fit of degree {degree} from {} samples",
            epsilons.len()
        )));
    }
    let rows = epsilons.len();
    let mut a = DMatrix::from_fn(rows, degree, |i, j| epsilons[i].powi(j as i32 + 1));
    let scales: Vec<f64> = (0..degree)
        .map(|j| a.column(j).amax().max(f64::MIN_POSITIVE))
        .collect();
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }
    let b = DVector::from_column_slice(values);
    let svd = a.svd(true, true);
    let x = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidArgument(format!("series fit failed: {e}")))?;
    Ok(x.iter().zip(&scales).map(|(c, s)| c / s).collect())
}

/// `r(κ) = (1 − κ)^{1/2} r₀`.
pub fn r_kappa(b_minus: f64, b_plus: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidArgument(format!("κ = {kappa} outside (0, 1)")));
    }
    Ok((1.0 - kappa).sqrt() * r0_bound(b_minus, b_plus)?)
}

/// `(−ξ(κ), ξ(κ))` with `ξ(κ) = b₊(r(κ) − r)`.
pub fn kappa_window(b_minus: f64, b_plus: f64, r: f64, kappa: f64) -> Result<(f64, f64)> {
    let rk = r_kappa(b_minus, b_plus, kappa)?;
    if !(r >= 0.0 && r < rk) {
        return Err(Error::SupportTooWide { radius: r, r0: rk });
    }
    let xi = b_plus * (rk - r);
    Ok((-xi, xi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub xi: f64,
    pub epsilons: Vec<f64>,
    pub lambda_eps1: Vec<f64>,
    pub f_values: Vec<f64>,
    pub f_difference_form: Vec<f64>,
    pub lambda1: f64,
    pub c_bound: f64,
    pub epsilon_star: f64,
    pub a1: f64,
    /// Coefficients `A₁..A₄` of the ε-ladder fit.
    pub fit: Vec<f64>,
    pub a2: f64,
    pub a2_tail_bound: f64,
    pub a2_contour: f64,
    pub w_phi_norm_sq: f64,
    pub kappa: f64,
    pub window: (f64, f64),
}

/// Everything the perturbation experiments need at one ξ.
#[allow(clippy::too_many_arguments)]
pub fn perturb_report<P: VectorPotential + ?Sized>(
    field: &P,
    w: &PerturbationW,
    xi: f64,
    epsilons: &[f64],
    spec: &ContourSpec,
    j_max: usize,
    kappa: f64,
) -> Result<PerturbReport> {
    let (b_minus, b_plus) = field.field_bounds();
    let setup = FiberPerturbation::new(field, w, xi, spec)?;
    let values = epsilons
        .iter()
        .map(|&e| setup.evaluate(e))
        .collect::<Result<Vec<_>>>()?;
    let f_values: Vec<f64> = values.iter().map(|v| v.value).collect();
    let fit = if epsilons.len() >= 4 {
        fit_series(epsilons, &f_values, 4)?
    } else {
        Vec::new()
    };
    let sum = a2_sum(field, w, xi, j_max)?;
    Ok(PerturbReport {
        xi,
        epsilons: epsilons.to_vec(),
        lambda_eps1: values.iter().map(|v| v.lambda_eps).collect(),
        f_difference_form: values.iter().map(|v| v.difference_form).collect(),
        f_values,
        lambda1: setup.lambda1,
        c_bound: setup.c_bound,
        epsilon_star: setup.epsilon_star,
        a1: setup.first_coefficient(),
        fit,
        a2: sum.value,
        a2_tail_bound: sum.tail_bound,
        a2_contour: setup.a2_contour()?,
        w_phi_norm_sq: sum.w_phi_norm_sq,
        kappa,
        window: kappa_window(b_minus, b_plus, w.support_radius, kappa)?,
    })
}
