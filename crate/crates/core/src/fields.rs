//! Monotone one-dimensional magnetic fields `b(x)` and their primitives
//! `a(x) = ∫₀ˣ b`.
//!
//! Every field is bracketed by its limits `b_minus ≤ b(x) ≤ b_plus` and is
//! non-decreasing. Jumps in `b` are allowed (the sharp step, repeated
//! piecewise-linear knots); `b` is then taken right-continuous and `a` stays
//! Lipschitz.

use serde::{Deserialize, Serialize};

use crate::quadrature::adaptive_gauss_kronrod;
use crate::{Error, Result};

/// Tanh profiles are clamped to their limits beyond this many scale lengths.
pub const TANH_CUTOFF: f64 = 20.0;

/// Anything the spectral code needs from a vector potential.
pub trait VectorPotential: Sync {
    fn potential(&self, x: f64) -> f64;

    /// `(b_minus, b_plus)`.
    fn field_bounds(&self) -> (f64, f64);

    /// Solves `potential(x) = target`, relying only on monotonicity and the
    /// lower field bound.
    fn inverse_potential(&self, target: f64) -> f64 {
        let (b_minus, _) = self.field_bounds();
        let reach = target.abs() / b_minus + 1.0;
        let (mut lo, mut hi) = (-reach, reach);
        while self.potential(lo) > target {
            lo *= 2.0;
        }
        while self.potential(hi) < target {
            hi *= 2.0;
        }
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                return if (self.potential(lo) - target).abs() <= (self.potential(hi) - target).abs() {
                    lo
                } else {
                    hi
                };
            }
            if self.potential(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Constant,
    Tanh,
    SmoothedStep,
    PiecewiseLinear,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Constant,
    /// `b = m + d·tanh((x − center)/scale)` with `m, d` the mean and half-spread of the limits.
    Tanh {
        center: f64,
        scale: f64,
    },
    /// Cubic `3t² − 2t³` ramp over `[center − half_width, center + half_width]`;
    /// `half_width = 0` is a sharp right-continuous step at `center`.
    SmoothedStep {
        center: f64,
        half_width: f64,
    },
    /// Linear interpolation between `(x, b)` knots, constant beyond the ends.
    /// Repeated abscissae encode jumps.
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
    },
}

/// Hat-basis perturbation `w = ã − a` supported in `[−r, r]`.
///
/// Hat `m` (1-based) peaks at `−r + m·Δ` with `Δ = 2r/(K+1)`, so `w(±r) = 0`
/// holds by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationW {
    pub support_radius: f64,
    pub coefficients: Vec<f64>,
    /// When set, `perturb` rejects coefficients that take `b̃` out of the class.
    #[serde(default = "default_true")]
    pub admissible: bool,
}

fn default_true() -> bool {
    true
}

impl PerturbationW {
    pub fn new(support_radius: f64, coefficients: Vec<f64>) -> Result<Self> {
        if !(support_radius.is_finite() && support_radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "support radius must be positive, got {support_radius}"
            )));
        }
        if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "perturbation needs at least one finite coefficient".into(),
            ));
        }
        Ok(Self {
            support_radius,
            coefficients,
            admissible: true,
        })
    }

    /// Same basis, no class-membership check (used for search directions and model iterates).
    pub fn unchecked(support_radius: f64, coefficients: Vec<f64>) -> Self {
        Self {
            support_radius,
            coefficients,
            admissible: false,
        }
    }

    pub fn zero(support_radius: f64, basis_size: usize) -> Self {
        Self::unchecked(support_radius, vec![0.0; basis_size])
    }

    pub fn basis_size(&self) -> usize {
        self.coefficients.len()
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.support_radius / (self.coefficients.len() + 1) as f64
    }

    pub fn knot(&self, m: usize) -> f64 {
        -self.support_radius + m as f64 * self.spacing()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            support_radius: self.support_radius,
            coefficients: self.coefficients.iter().map(|c| c * factor).collect(),
            admissible: self.admissible,
        }
    }

    /// Value at the `m`-th knot (0 and K+1 are the support ends).
    fn node_value(&self, m: usize) -> f64 {
        if m == 0 || m > self.coefficients.len() {
            0.0
        } else {
            self.coefficients[m - 1]
        }
    }

    /// Locates `x` in a knot cell; `None` outside `[−r, r)`.
    fn cell(&self, x: f64) -> Option<(usize, f64)> {
        let r = self.support_radius;
        if !(x >= -r && x < r) {
            return None;
        }
        let delta = self.spacing();
        let k = self.coefficients.len();
        let mut m = ((x + r) / delta).floor() as usize;
        m = m.min(k);
        // Guard against rounding placing x on the wrong side of a knot.
        if x < self.knot(m) && m > 0 {
            m -= 1;
        } else if m < k && x >= self.knot(m + 1) {
            m += 1;
        }
        Some((m, (x - self.knot(m)) / delta))
    }

    pub fn w(&self, x: f64) -> f64 {
        match self.cell(x) {
            None => 0.0,
            Some((m, t)) => (1.0 - t) * self.node_value(m) + t * self.node_value(m + 1),
        }
    }

    /// Right derivative `w'(x)`.
    pub fn w_slope(&self, x: f64) -> f64 {
        match self.cell(x) {
            None => 0.0,
            Some((m, _)) => (self.node_value(m + 1) - self.node_value(m)) / self.spacing(),
        }
    }

    /// Value of the `k`-th (0-based) hat function.
    pub fn basis(&self, k: usize, x: f64) -> f64 {
        let peak = self.knot(k + 1);
        let t = ((x - peak) / self.spacing()).abs();
        if t < 1.0 && x.abs() < self.support_radius {
            1.0 - t
        } else {
            0.0
        }
    }

    /// Interior knots of the basis, including the support ends.
    pub fn breakpoints(&self) -> Vec<f64> {
        (0..=self.coefficients.len() + 1).map(|m| self.knot(m)).collect()
    }
}

/// Element of the admissible field class, with an optional compact perturbation of `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagneticField {
    b_minus: f64,
    b_plus: f64,
    profile: Profile,
    perturbation: Option<PerturbationW>,
    gap_admissible: bool,
}

/// `(3b₋ − b₊)^{1/2} / (2b₊)`: the support radius below which the uniqueness
/// argument for compact perturbations applies.
pub fn r0_bound(b_minus: f64, b_plus: f64) -> Result<f64> {
    if !(b_minus > 0.0 && b_plus >= b_minus && b_plus < 3.0 * b_minus) {
        return Err(Error::GapInadmissible { b_minus, b_plus });
    }
    Ok((3.0 * b_minus - b_plus).sqrt() / (2.0 * b_plus))
}

fn ln_cosh(t: f64) -> f64 {
    let u = t.abs();
    u + (-2.0 * u).exp().ln_1p() - std::f64::consts::LN_2
}

impl MagneticField {
    pub fn new(b_minus: f64, b_plus: f64, profile: Profile, allow_gap_violation: bool) -> Result<Self> {
        if !(b_minus.is_finite() && b_plus.is_finite() && b_minus > 0.0) {
            return Err(Error::InvalidField(format!(
                "field limits must be finite and positive, got ({b_minus}, {b_plus})"
            )));
        }
        if b_plus < b_minus {
            return Err(Error::InvalidField(format!(
                "b_plus {b_plus} below b_minus {b_minus}: field would decrease"
            )));
        }
        let gap_admissible = b_plus < 3.0 * b_minus;
        if !gap_admissible && !allow_gap_violation {
            return Err(Error::GapInadmissible { b_minus, b_plus });
        }
        match &profile {
            Profile::Constant => {
                if b_minus != b_plus {
                    return Err(Error::InvalidField(
                        "constant profile needs b_minus == b_plus".into(),
                    ));
                }
            }
            Profile::Tanh { center, scale } => {
                if !(center.is_finite() && scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidField(format!(
                        "tanh profile needs a finite center and positive scale, got ({center}, {scale})"
                    )));
                }
            }
            Profile::SmoothedStep { center, half_width } => {
                if !(center.is_finite() && half_width.is_finite() && *half_width >= 0.0) {
                    return Err(Error::InvalidField(format!(
                        "smoothed step needs a finite center and non-negative half width, got ({center}, {half_width})"
                    )));
                }
            }
            Profile::PiecewiseLinear { knots } => validate_knots(knots, b_minus, b_plus)?,
        }
        Ok(Self {
            b_minus,
            b_plus,
            profile,
            perturbation: None,
            gap_admissible,
        })
    }

    pub fn constant(b: f64) -> Result<Self> {
        Self::new(b, b, Profile::Constant, false)
    }

    pub fn tanh(b_minus: f64, b_plus: f64, center: f64, scale: f64) -> Result<Self> {
        Self::new(b_minus, b_plus, Profile::Tanh { center, scale }, false)
    }

    pub fn smoothed_step(b_minus: f64, b_plus: f64, center: f64, half_width: f64) -> Result<Self> {
        Self::new(
            b_minus,
            b_plus,
            Profile::SmoothedStep { center, half_width },
            false,
        )
    }

    /// Sharp step from `b_minus` to `b_plus` at `center`.
    pub fn step(b_minus: f64, b_plus: f64, center: f64) -> Result<Self> {
        Self::smoothed_step(b_minus, b_plus, center, 0.0)
    }

    pub fn piecewise_linear(b_minus: f64, b_plus: f64, knots: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(b_minus, b_plus, Profile::PiecewiseLinear { knots }, false)
    }

    pub fn b_minus(&self) -> f64 {
        self.b_minus
    }

    pub fn b_plus(&self) -> f64 {
        self.b_plus
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn perturbation(&self) -> Option<&PerturbationW> {
        self.perturbation.as_ref()
    }

    pub fn is_gap_admissible(&self) -> bool {
        self.gap_admissible
    }

    pub fn kind(&self) -> FieldKind {
        if self.perturbation.is_some() {
            return FieldKind::Perturbed;
        }
        match self.profile {
            Profile::Constant => FieldKind::Constant,
            Profile::Tanh { .. } => FieldKind::Tanh,
            Profile::SmoothedStep { .. } => FieldKind::SmoothedStep,
            Profile::PiecewiseLinear { .. } => FieldKind::PiecewiseLinear,
        }
    }

    /// The field with its perturbation removed.
    pub fn base(&self) -> MagneticField {
        MagneticField {
            perturbation: None,
            ..self.clone()
        }
    }

    pub fn r0(&self) -> Result<f64> {
        r0_bound(self.b_minus, self.b_plus)
    }

    fn base_b(&self, x: f64) -> f64 {
        let (lo, hi) = (self.b_minus, self.b_plus);
        match &self.profile {
            Profile::Constant => lo,
            Profile::Tanh { center, scale } => {
                let t = (x - center) / scale;
                if t >= TANH_CUTOFF {
                    hi
                } else if t <= -TANH_CUTOFF {
                    lo
                } else {
                    (0.5 * (hi + lo) + 0.5 * (hi - lo) * t.tanh()).clamp(lo, hi)
                }
            }
            Profile::SmoothedStep { center, half_width } => {
                if x < center - half_width {
                    lo
                } else if x >= center + half_width {
                    hi
                } else {
                    let t = (x - (center - half_width)) / (2.0 * half_width);
                    lo + (hi - lo) * t * t * (3.0 - 2.0 * t)
                }
            }
            Profile::PiecewiseLinear { knots } => piecewise_value(knots, x),
        }
    }

    /// Antiderivative of the base profile, up to an additive constant.
    fn base_antiderivative(&self, x: f64) -> f64 {
        let (lo, hi) = (self.b_minus, self.b_plus);
        match &self.profile {
            Profile::Constant => lo * x,
            Profile::Tanh { center, scale } => {
                0.5 * (hi + lo) * x + 0.5 * (hi - lo) * scale * ln_cosh((x - center) / scale)
            }
            Profile::SmoothedStep { center, half_width } => {
                let start = center - half_width;
                if x <= start {
                    lo * x
                } else if *half_width == 0.0 || x >= center + half_width {
                    lo * x + (hi - lo) * (x - center)
                } else {
                    let width = 2.0 * half_width;
                    let t = (x - start) / width;
                    lo * x + (hi - lo) * width * t * t * t * (1.0 - 0.5 * t)
                }
            }
            Profile::PiecewiseLinear { knots } => piecewise_antiderivative(knots, x),
        }
    }

    pub fn eval_b(&self, x: f64) -> f64 {
        let base = self.base_b(x);
        match &self.perturbation {
            Some(w) => base + w.w_slope(x),
            None => base,
        }
    }

    pub fn eval_a(&self, x: f64) -> f64 {
        let base = self.base_antiderivative(x) - self.base_antiderivative(0.0);
        match &self.perturbation {
            Some(w) => base + w.w(x),
            None => base,
        }
    }

    /// Known locations of jumps or kinks in `b`, used as quadrature breakpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = match &self.profile {
            Profile::Constant | Profile::Tanh { .. } => Vec::new(),
            Profile::SmoothedStep { center, half_width } => vec![center - half_width, center + half_width],
            Profile::PiecewiseLinear { knots } => knots.iter().map(|k| k.0).collect(),
        };
        if let Some(w) = &self.perturbation {
            out.extend(w.breakpoints());
        }
        out
    }

    /// `∫₀ˣ b` by adaptive quadrature (absolute tolerance 1e-12); the oracle
    /// for the closed forms.
    pub fn eval_a_quadrature(&self, x: f64) -> f64 {
        adaptive_gauss_kronrod(|s| self.eval_b(s), 0.0, x, &self.breakpoints(), 1e-12).value
    }

    pub fn inverse_a(&self, target: f64) -> f64 {
        self.inverse_potential(target)
    }

    pub fn sample_potential(&self, xs: &[f64]) -> Vec<PotentialSample> {
        xs.iter()
            .map(|&x| PotentialSample {
                x,
                a_of_x: self.eval_a(x),
            })
            .collect()
    }

    /// Serializable description of this field.
    pub fn to_spec(&self) -> FieldSpec {
        let params = match &self.profile {
            Profile::Constant => Vec::new(),
            Profile::Tanh { center, scale } => vec![*center, *scale],
            Profile::SmoothedStep { center, half_width } => vec![*center, *half_width],
            Profile::PiecewiseLinear { knots } => knots.iter().flat_map(|&(x, b)| [x, b]).collect(),
        };
        let kind = match self.profile {
            Profile::Constant => FieldKind::Constant,
            Profile::Tanh { .. } => FieldKind::Tanh,
            Profile::SmoothedStep { .. } => FieldKind::SmoothedStep,
            Profile::PiecewiseLinear { .. } => FieldKind::PiecewiseLinear,
        };
        FieldSpec {
            kind,
            b_minus: self.b_minus,
            b_plus: self.b_plus,
            params,
            perturbation: self.perturbation.clone(),
            allow_gap_violation: !self.gap_admissible,
        }
    }
}

impl VectorPotential for MagneticField {
    fn potential(&self, x: f64) -> f64 {
        self.eval_a(x)
    }

    fn field_bounds(&self) -> (f64, f64) {
        (self.b_minus, self.b_plus)
    }
}

fn validate_knots(knots: &[(f64, f64)], b_minus: f64, b_plus: f64) -> Result<()> {
    if knots.is_empty() {
        return Err(Error::InvalidField(
            "piecewise-linear profile has no knots".into(),
        ));
    }
    if knots.iter().any(|(x, b)| !x.is_finite() || !b.is_finite()) {
        return Err(Error::InvalidField("non-finite knot".into()));
    }
    for pair in knots.windows(2) {
        if pair[1].0 < pair[0].0 {
            return Err(Error::InvalidField("knot abscissae must be sorted".into()));
        }
        if pair[1].1 < pair[0].1 {
            return Err(Error::InvalidField(format!(
                "knot values decrease at x = {}",
                pair[1].0
            )));
        }
    }
    let tol = 1e-12 * b_plus;
    if (knots[0].1 - b_minus).abs() > tol || (knots[knots.len() - 1].1 - b_plus).abs() > tol {
        return Err(Error::InvalidField(
            "first and last knot values must equal b_minus and b_plus".into(),
        ));
    }
    Ok(())
}

/// Right-continuous piecewise-linear interpolation.
fn piecewise_value(knots: &[(f64, f64)], x: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x < first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    // Last knot with abscissa <= x; repeated abscissae resolve to the right value.
    let i = knots.partition_point(|k| k.0 <= x) - 1;
    let (x0, b0) = knots[i];
    let (x1, b1) = knots[i + 1];
    b0 + (b1 - b0) * (x - x0) / (x1 - x0)
}

/// `∫_{x_0}^{x} b` with the profile extended by constants.
fn piecewise_antiderivative(knots: &[(f64, f64)], x: f64) -> f64 {
    let first = knots[0];
    if x <= first.0 {
        return first.1 * (x - first.0);
    }
    let mut acc = 0.0;
    for pair in knots.windows(2) {
        let (x0, b0) = pair[0];
        let (x1, b1) = pair[1];
        if x <= x0 {
            return acc;
        }
        if x < x1 {
            let bx = b0 + (b1 - b0) * (x - x0) / (x1 - x0);
            return acc + 0.5 * (b0 + bx) * (x - x0);
        }
        acc += 0.5 * (b0 + b1) * (x1 - x0);
    }
    let last = knots[knots.len() - 1];
    acc + last.1 * (x - last.0)
}

/// Grid check that `b̃ = b + w'` stays non-decreasing and inside `[b_minus, b_plus]`.
fn check_admissible(field: &MagneticField, w: &PerturbationW) -> Result<()> {
    let r = w.support_radius;
    let step = 1e-3 * r;
    let steps = 2200;
    let tol = 1e-12 * field.b_plus;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=steps {
        let x = -1.1 * r + i as f64 * step;
        let b = field.base_b(x) + w.w_slope(x);
        if b < field.b_minus - tol || b > field.b_plus + tol {
            return Err(Error::InadmissiblePerturbation(format!(
                "perturbed field {b} leaves [{}, {}] at x = {x}",
                field.b_minus, field.b_plus
            )));
        }
        if b < prev - tol {
            return Err(Error::InadmissiblePerturbation(format!(
                "perturbed field decreases at x = {x}"
            )));
        }
        prev = b;
    }
    Ok(())
}

/// Returns the field with potential `a + w`.
///
/// A support radius at or above `r0_bound` is accepted with a warning since
/// only the uniqueness experiments need it below the bound.
pub fn perturb(field: &MagneticField, w: PerturbationW) -> Result<MagneticField> {
    if field.perturbation.is_some() {
        return Err(Error::InvalidArgument(
            "field already carries a perturbation; perturb its base instead".into(),
        ));
    }
    if !(w.support_radius > 0.0) || w.coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("malformed perturbation".into()));
    }
    if let Ok(r0) = field.r0() {
        if w.support_radius >= r0 {
            log::warn!(
                "perturbation support radius {} is not below r0 = {r0}",
                w.support_radius
            );
        }
    }
    if w.admissible {
        check_admissible(field, &w)?;
    }
    Ok(MagneticField {
        perturbation: Some(w),
        ..field.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialSample {
    pub x: f64,
    pub a_of_x: f64,
}

/// Config-file form of a field.
///
/// `params` by kind: constant `[]`, tanh `[center, scale]`, smoothed_step
/// `[center, half_width]`, piecewise_linear `[x0, b0, x1, b1, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub b_minus: f64,
    pub b_plus: f64,
    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default)]
    pub perturbation: Option<PerturbationW>,
    #[serde(default)]
    pub allow_gap_violation: bool,
}

impl FieldSpec {
    pub fn build(&self) -> Result<MagneticField> {
        let want = |n: usize| -> Result<()> {
            if self.params.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidField(format!(
                    "{:?} field takes {n} params, got {}",
                    self.kind,
                    self.params.len()
                )))
            }
        };
        let profile = match self.kind {
            FieldKind::Constant => {
                want(0)?;
                Profile::Constant
            }
            FieldKind::Tanh => {
                want(2)?;
                Profile::Tanh {
                    center: self.params[0],
                    scale: self.params[1],
                }
            }
            FieldKind::SmoothedStep => {
                want(2)?;
                Profile::SmoothedStep {
                    center: self.params[0],
                    half_width: self.params[1],
                }
            }
            FieldKind::PiecewiseLinear => {
                if self.params.is_empty() || !self.params.len().is_multiple_of(2) {
                    return Err(Error::InvalidField(
                        "piecewise_linear params must be (x, b) pairs".into(),
                    ));
                }
                Profile::PiecewiseLinear {
                    knots: self.params.chunks(2).map(|c| (c[0], c[1])).collect(),
                }
            }
            FieldKind::Perturbed => {
                return Err(Error::InvalidField(
                    "give the base kind and a `perturbation` table instead of kind = perturbed".into(),
                ))
            }
        };
        let field = MagneticField::new(self.b_minus, self.b_plus, profile, self.allow_gap_violation)?;
        match &self.perturbation {
            Some(w) => {
                PerturbationW::new(w.support_radius, w.coefficients.clone())?;
                perturb(&field, w.clone())
            }
            None => Ok(field),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_field_examples() {
        let f = MagneticField::constant(1.0).unwrap();
        assert_eq!(f.eval_b(5.0), 1.0);
        assert_eq!(f.eval_a(2.5), 2.5);
        assert_eq!(f.eval_a(0.0), 0.0);
        assert_eq!(f.kind(), FieldKind::Constant);
    }

    #[test]
    fn tanh_midpoint_and_cutoff() {
        let f = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
        assert_eq!(f.eval_b(0.0), 1.5);
        assert_eq!(f.eval_b(25.0), 2.0);
        assert_eq!(f.eval_b(-25.0), 1.0);
    }

    #[test]
    fn smoothed_step_limit_past_cutoff() {
        let f = MagneticField::smoothed_step(1.0, 2.0, 0.0, 3.0).unwrap();
        assert_eq!(f.eval_b(100.0), 2.0);
        assert_eq!(f.eval_b(-100.0), 1.0);
        assert_eq!(f.eval_b(0.0), 1.5);
    }

    #[test]
    fn tanh_primitive_matches_quadrature() {
        let f = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
        let closed = f.eval_a(10.0) + f.eval_a(-10.0);
        let quad = f.eval_a_quadrature(10.0) + f.eval_a_quadrature(-10.0);
        // 2·(1/2)·ln cosh 10
        let expected = ln_cosh(10.0);
        assert_abs_diff_eq!(closed, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(quad, expected, epsilon = 2e-12);
    }

    #[test]
    fn closed_forms_match_quadrature_for_all_families() {
        let fields = [
            MagneticField::tanh(1.0, 2.0, 0.3, 0.7).unwrap(),
            MagneticField::smoothed_step(1.0, 2.5, -0.4, 1.2).unwrap(),
            MagneticField::step(0.8, 1.9, 0.25).unwrap(),
            MagneticField::piecewise_linear(1.0, 2.0, vec![(-1.0, 1.0), (0.0, 1.2), (0.0, 1.5), (2.0, 2.0)])
                .unwrap(),
        ];
        for f in &fields {
            for &x in &[-7.0, -1.3, -0.2, 0.0, 0.1, 0.8, 2.6, 9.0] {
                assert_abs_diff_eq!(f.eval_a(x), f.eval_a_quadrature(x), epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn r0_examples() {
        assert_abs_diff_eq!(r0_bound(1.0, 2.0).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r0_bound(1.0, 1.5).unwrap(), 1.5f64.sqrt() / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            r0_bound(1.0, 2.999).unwrap(),
            0.001f64.sqrt() / 5.998,
            epsilon = 1e-15
        );
        assert!(r0_bound(1.0, 3.0).is_err());
        assert!(r0_bound(0.0, 1.0).is_err());
    }

    #[test]
    fn gap_violation_needs_override() {
        assert!(matches!(
            MagneticField::tanh(1.0, 3.5, 0.0, 1.0),
            Err(Error::GapInadmissible { .. })
        ));
        let f = MagneticField::new(
            1.0,
            3.5,
            Profile::Tanh {
                center: 0.0,
                scale: 1.0,
            },
            true,
        )
        .unwrap();
        assert!(!f.is_gap_admissible());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let f = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
        let g = perturb(&f, PerturbationW::new(0.2, vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        for i in 0..100 {
            let x = -5.0 + 0.1 * i as f64;
            assert_eq!(f.eval_a(x), g.eval_a(x));
        }
    }

    #[test]
    fn hat_on_step_keeps_support_and_class() {
        let f = MagneticField::step(1.0, 2.0, 0.0).unwrap();
        let w = PerturbationW::new(0.2, vec![0.1]).unwrap();
        let g = perturb(&f, w).unwrap();
        assert_eq!(g.kind(), FieldKind::Perturbed);
        assert_abs_diff_eq!(g.eval_a(0.2) - f.eval_a(0.2), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.eval_a(0.0) - f.eval_a(0.0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(g.eval_b(-0.1), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.eval_b(0.1), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn scaled_perturbation_is_linear_at_origin() {
        let f = MagneticField::step(1.0, 2.0, 0.0).unwrap();
        let w = PerturbationW::new(0.2, vec![0.1]).unwrap();
        let d: Vec<f64> = [1.0, 0.5, 0.25]
            .iter()
            .map(|&e| perturb(&f, w.scaled(e)).unwrap().eval_a(0.0) - f.eval_a(0.0))
            .collect();
        assert_abs_diff_eq!(d[1], 0.5 * d[0], epsilon = 1e-16);
        assert_abs_diff_eq!(d[2], 0.25 * d[0], epsilon = 1e-16);
    }

    #[test]
    fn hat_on_smooth_field_is_rejected() {
        let f = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
        let w = PerturbationW::new(0.2, vec![0.05]).unwrap();
        assert!(matches!(
            perturb(&f, w.clone()),
            Err(Error::InadmissiblePerturbation(_))
        ));
        let unchecked = PerturbationW::unchecked(0.2, vec![0.05]);
        assert!(perturb(&f, unchecked).is_ok());
    }

    #[test]
    fn inverse_potential_round_trip() {
        let f = MagneticField::tanh(1.0, 2.0, 0.0, 1.0).unwrap();
        let x = f.inverse_a(5.0);
        assert_abs_diff_eq!(f.eval_a(x), 5.0, epsilon = 1e-10);
        let c = MagneticField::constant(1.0).unwrap();
        assert_abs_diff_eq!(c.inverse_a(3.0), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn spec_round_trip_through_json() {
        let f = perturb(
            &MagneticField::step(1.0, 2.0, 0.0).unwrap(),
            PerturbationW::new(0.2, vec![0.05]).unwrap(),
        )
        .unwrap();
        let text = serde_json::to_string(&f.to_spec()).unwrap();
        let back: FieldSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.build().unwrap(), f);
    }
}
