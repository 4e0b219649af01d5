//! The edge-current functional `ϑ(χ) = ∫ χ(ξ)² ⟨v φ₁, φ₁⟩ dξ` and its
//! independent evaluation routes.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bands::{band_derivative_fd, BandTable, GapCertificate};
use crate::quadrature::{adaptive_gauss_kronrod, simpson_with_estimate};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiKind {
    /// `A·exp(1 − 1/(1 − s²))`, `s = (ξ − center)/width`; smooth, peak `A`.
    SmoothBump,
    /// Flat top of height `A` with cosine ramps of length `taper` at both ends.
    RaisedCosine,
}

/// Real, compactly supported momentum profile on `[center − width, center + width]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiProfile {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
    pub kind: ChiKind,
    /// Ramp length of the raised cosine; `None` means `width` (a Hann window).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taper: Option<f64>,
}

impl ChiProfile {
    pub fn smooth_bump(center: f64, width: f64, amplitude: f64) -> Self {
        Self {
            center,
            width,
            amplitude,
            kind: ChiKind::SmoothBump,
            taper: None,
        }
    }

    pub fn raised_cosine(center: f64, width: f64, amplitude: f64, taper: Option<f64>) -> Self {
        Self {
            center,
            width,
            amplitude,
            kind: ChiKind::RaisedCosine,
            taper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let taper_ok = match self.taper {
            Some(t) => t > 0.0 && t <= self.width,
            None => true,
        };
        if !(self.center.is_finite()
            && self.width.is_finite()
            && self.width > 0.0
            && self.amplitude.is_finite()
            && taper_ok)
        {
            return Err(Error::InvalidArgument(format!("malformed χ profile {self:?}")));
        }
        Ok(())
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.width, self.center + self.width)
    }

    fn ramp(&self) -> f64 {
        self.taper.unwrap_or(self.width)
    }

    pub fn value(&self, xi: f64) -> f64 {
        let u = xi - self.center;
        if u.abs() >= self.width {
            return 0.0;
        }
        match self.kind {
            ChiKind::SmoothBump => {
                let s = u / self.width;
                self.amplitude * (1.0 - 1.0 / (1.0 - s * s)).exp()
            }
            ChiKind::RaisedCosine => {
                let tau = self.ramp();
                let start = self.width - tau;
                if u.abs() <= start {
                    self.amplitude
                } else {
                    let phase = std::f64::consts::PI * (u.abs() - start) / tau;
                    0.5 * self.amplitude * (1.0 + phase.cos())
                }
            }
        }
    }

    pub fn derivative(&self, xi: f64) -> f64 {
        let u = xi - self.center;
        if u.abs() >= self.width {
            return 0.0;
        }
        match self.kind {
            ChiKind::SmoothBump => {
                let s = u / self.width;
                let one = 1.0 - s * s;
                self.value(xi) * (-2.0 * s / (one * one)) / self.width
            }
            ChiKind::RaisedCosine => {
                let tau = self.ramp();
                let start = self.width - tau;
                if u.abs() <= start {
                    0.0
                } else {
                    let k = std::f64::consts::PI / tau;
                    -0.5 * self.amplitude * (k * (u.abs() - start)).sin() * k * u.signum()
                }
            }
        }
    }

    /// `‖χ‖₂²` by adaptive quadrature.
    pub fn norm_sq(&self) -> f64 {
        let (lo, hi) = self.support();
        let mut breaks = vec![self.center];
        if self.kind == ChiKind::RaisedCosine {
            let start = self.width - self.ramp();
            breaks.extend([self.center - start, self.center + start]);
        }
        let tol = 1e-15 * self.amplitude * self.amplitude * self.width;
        adaptive_gauss_kronrod(|x| self.value(x).powi(2), lo, hi, &breaks, tol).value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurrentRoute {
    FiberQuadrature,
    BandDerivative,
    ByParts,
    Evolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentResult {
    pub theta: f64,
    pub route: CurrentRoute,
    pub quad_error_estimate: f64,
}

/// Index range of table nodes covering `[lo, hi]`.
fn covering_range(table: &BandTable, lo: f64, hi: f64) -> Result<(usize, usize)> {
    let g = &table.xi_grid;
    if lo < g.xi_min || hi > g.xi_max {
        return Err(Error::SupportOutsideTable {
            lo,
            hi,
            xi_min: g.xi_min,
            xi_max: g.xi_max,
        });
    }
    let (first, last) = lattice_cover(g.xi_min, g.spacing(), lo, hi);
    let first = first.max(0) as usize;
    let last = (last.max(0) as usize).min(g.m - 1);
    Ok((first, last.max(first + 1)))
}

/// Lattice indices `(i, j)` of `origin + k·step` with `i` the last node at or
/// below `lo` and `j` the first at or above `hi`. Nodes within `1e-9·step` of
/// an end count as on it, so tables built on the same lattice from different
/// origins select the same nodes.
pub(crate) fn lattice_cover(origin: f64, step: f64, lo: f64, hi: f64) -> (i64, i64) {
    let slack = 1e-9;
    let first = ((lo - origin) / step + slack).floor() as i64;
    let last = ((hi - origin) / step - slack).ceil() as i64;
    (first, last)
}

pub(crate) fn nearest_node(table: &BandTable, xi: f64) -> usize {
    let g = &table.xi_grid;
    (((xi - g.xi_min) / g.spacing()).round().max(0.0) as usize).min(g.m - 1)
}

fn integrate_nodes(table: &BandTable, range: (usize, usize), integrand: impl Fn(usize) -> f64) -> (f64, f64) {
    let values: Vec<f64> = (range.0..=range.1).map(integrand).collect();
    let r = simpson_with_estimate(&values, table.xi_grid.spacing());
    (r.value, r.error_estimate)
}

/// `∫ weight(ξ) ⟨v φ₁, φ₁⟩ dξ` over table nodes covering `[lo, hi]`, for a
/// weight that vanishes outside that interval (e.g. a sum of squared profiles).
pub fn theta_weighted(
    table: &BandTable,
    weight: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
) -> Result<CurrentResult> {
    let range = covering_range(table, lo, hi)?;
    let xs = &table.xi_grid.values;
    let (theta, err) = integrate_nodes(table, range, |i| weight(xs[i]) * table.vmoment[i]);
    Ok(CurrentResult {
        theta,
        route: CurrentRoute::FiberQuadrature,
        quad_error_estimate: err,
    })
}

pub fn theta_fiber(table: &BandTable, chi: &ChiProfile) -> Result<CurrentResult> {
    chi.validate()?;
    let (lo, hi) = chi.support();
    theta_weighted(table, |x| chi.value(x).powi(2), lo, hi)
}

/// `∫ χ² λ₁'` with `λ₁'` from finite differences of the band table.
pub fn theta_band(table: &BandTable, chi: &ChiProfile) -> Result<CurrentResult> {
    chi.validate()?;
    let (lo, hi) = chi.support();
    let range = covering_range(table, lo, hi)?;
    let d = band_derivative_fd(table, 1)?;
    let xs = &table.xi_grid.values;
    let (theta, err) = integrate_nodes(table, range, |i| chi.value(xs[i]).powi(2) * d[i]);
    Ok(CurrentResult {
        theta,
        route: CurrentRoute::BandDerivative,
        quad_error_estimate: err,
    })
}

/// `−∫ (χ²)' (λ₁ − λ₁(c))`; no boundary terms since `χ` is compactly
/// supported, and the reference level `λ₁(c)` at the node nearest the profile
/// centre only removes the quadrature error of `∫ (χ²)' = 0`.
pub fn theta_by_parts(table: &BandTable, chi: &ChiProfile) -> Result<CurrentResult> {
    chi.validate()?;
    let (lo, hi) = chi.support();
    let range = covering_range(table, lo, hi)?;
    let xs = &table.xi_grid.values;
    let reference = table.lambda[nearest_node(table, chi.center)][0];
    let (theta, err) = integrate_nodes(table, range, |i| {
        -2.0 * chi.value(xs[i]) * chi.derivative(xs[i]) * (table.lambda[i][0] - reference)
    });
    Ok(CurrentResult {
        theta,
        route: CurrentRoute::ByParts,
        quad_error_estimate: err,
    })
}

/// Velocity expectation of the evolved state `e^{−itλ₁(ξ)} χ(ξ) φ₁(x, ξ)`,
/// one value per time, integrated in the fiber representation.
pub fn evolve_velocity(table: &BandTable, chi: &ChiProfile, times: &[f64]) -> Result<Vec<f64>> {
    chi.validate()?;
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "evolution times must be finite and non-negative, got {t}"
        )));
    }
    let (lo, hi) = chi.support();
    let range = covering_range(table, lo, hi)?;
    let xs = &table.xi_grid.values;
    times
        .iter()
        .map(|&t| {
            let (value, _) = integrate_nodes(table, range, |i| {
                let xi = xs[i];
                let fiber = &table.fibers[i];
                let phase = Complex64::from_polar(1.0, -t * table.lambda[i][0]);
                let c = chi.value(xi);
                let inner: f64 = fiber
                    .a_nodes
                    .iter()
                    .zip(&fiber.phi1)
                    .map(|(a, p)| {
                        let u = phase * (c * p);
                        2.0 * (xi - a) * (u * u.conj()).re
                    })
                    .sum();
                fiber.grid.h * inner
            });
            Ok(value)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// Share of `‖χ φ₁‖²` carried by bands `2..=j_max`; zero up to rounding.
    pub higher_band_fraction: f64,
    /// Nodes in `supp χ` where `λ₁` leaves `[b₋ − tol, b₊ + tol]`.
    pub escapes: Vec<f64>,
    pub certificate: GapCertificate,
    pub tol: f64,
}

impl ConcentrationReport {
    pub fn passes(&self) -> bool {
        self.escapes.is_empty() && self.certificate.holds(self.tol)
    }
}

/// Checks that the first-band state built from `χ` lives in the energy
/// interval `(b₋, b₊)`: `λ₁` stays in the band on `supp χ` and the band is isolated.
pub fn energy_concentration_check(
    table: &BandTable,
    chi: &ChiProfile,
    tol: f64,
) -> Result<ConcentrationReport> {
    chi.validate()?;
    if table.j_max < 3 {
        return Err(Error::InvalidArgument(
            "energy concentration check needs j_max >= 3".into(),
        ));
    }
    let (lo, hi) = chi.support();
    let (first, last) = covering_range(table, lo, hi)?;
    let xs = &table.xi_grid.values;
    let mut mass = 0.0;
    let mut leaked = 0.0;
    let mut escapes = Vec::new();
    let span = first..=last;
    for ((&x, fiber), row) in xs[span.clone()]
        .iter()
        .zip(&table.fibers[span.clone()])
        .zip(&table.lambda[span])
    {
        let c2 = chi.value(x).powi(2);
        mass += c2;
        leaked += c2 * fiber.higher_overlap;
        let l = row[0];
        if c2 > 0.0 && (l < table.b_minus - tol || l > table.b_plus + tol) {
            escapes.push(x);
        }
    }
    Ok(ConcentrationReport {
        higher_band_fraction: if mass > 0.0 { leaked / mass } else { 0.0 },
        escapes,
        certificate: table.gap_certificate()?,
        tol,
    })
}

/// `max |Δ²_ξ (χ φ₁)| / δξ²` over the union window of `supp χ`: a grid
/// estimate of the second ξ-derivative of the fiber state.
pub fn xi_smoothness(table: &BandTable, chi: &ChiProfile) -> Result<f64> {
    chi.validate()?;
    let (lo, hi) = chi.support();
    let (first, last) = covering_range(table, lo, hi)?;
    if last < first + 2 {
        return Ok(0.0);
    }
    let fibers = &table.fibers[first..=last];
    let x_lo = fibers.iter().map(|f| f.grid.x_left).fold(f64::INFINITY, f64::min);
    let x_hi = fibers
        .iter()
        .map(|f| f.grid.x_right)
        .fold(f64::NEG_INFINITY, f64::max);
    let h = fibers[0].grid.h;
    let count = ((x_hi - x_lo) / h).ceil() as usize + 1;
    let xs: Vec<f64> = (0..count).map(|k| x_lo + k as f64 * h).collect();
    let states: Vec<Vec<f64>> = (first..=last)
        .map(|i| {
            let c = chi.value(table.xi_grid.values[i]);
            table.fibers[i].resample(&xs).into_iter().map(|p| c * p).collect()
        })
        .collect();
    let d2 = table.xi_grid.spacing().powi(2);
    let mut worst = 0.0f64;
    for w in states.windows(3) {
        for ((a, b), c) in w[0].iter().zip(&w[1]).zip(&w[2]).take(count) {
            worst = worst.max((c - 2.0 * b + a).abs() / d2);
        }
    }
    Ok(worst)
}

/// One synthetic measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub chi_params: ChiProfile,
    pub theta: f64,
    pub route: CurrentRoute,
    pub error_estimate: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementHeader {
    pub schema: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_minus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_plus: Option<f64>,
}

/// Wire format for current data consumed by the inverse pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFile {
    pub header: MeasurementHeader,
    pub records: Vec<MeasurementRecord>,
}

pub const MEASUREMENT_SCHEMA: &str = "iwatsuka.measurements/1";

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bump_shape() {
        let chi = ChiProfile::smooth_bump(1.0, 0.5, 2.0);
        assert_eq!(chi.value(1.0), 2.0);
        assert_eq!(chi.value(1.5), 0.0);
        assert_eq!(chi.value(0.4), 0.0);
        let h = 1e-6;
        for x in [0.7, 0.9, 1.2, 1.45] {
            let fd = (chi.value(x + h) - chi.value(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(chi.derivative(x), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn raised_cosine_flat_top_and_derivative() {
        let chi = ChiProfile::raised_cosine(0.0, 3.0, 1.0, Some(1.0));
        assert_eq!(chi.value(1.9), 1.0);
        assert_abs_diff_eq!(chi.value(2.5), 0.5, epsilon = 1e-15);
        let h = 1e-6;
        for x in [-2.7, -2.2, 2.4, 2.9] {
            let fd = (chi.value(x + h) - chi.value(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(chi.derivative(x), fd, epsilon = 1e-6);
        }
        // Flat part 4, each ramp contributes ∫cos⁴-type mass 3/8.
        assert_abs_diff_eq!(chi.norm_sq(), 4.0 + 2.0 * 0.375, epsilon = 1e-12);
    }

    #[test]
    fn hann_norm() {
        let chi = ChiProfile::raised_cosine(0.0, 2.0, 3.0, None);
        assert_abs_diff_eq!(chi.norm_sq(), 9.0 * 2.0 * 0.75, epsilon = 1e-12);
    }

    #[test]
    fn measurement_json_round_trip() {
        let file = MeasurementFile {
            header: MeasurementHeader {
                schema: MEASUREMENT_SCHEMA.into(),
                version: "0.1.0".into(),
                config_hash: "00".into(),
                seed: 3,
                b_minus: Some(1.0),
                b_plus: Some(2.0),
            },
            records: vec![MeasurementRecord {
                chi_params: ChiProfile::smooth_bump(0.1, 0.2, 1.0),
                theta: 0.25,
                route: CurrentRoute::FiberQuadrature,
                error_estimate: 1e-9,
                noise_sigma: 0.0,
            }],
        };
        let text = serde_json::to_string(&file).unwrap();
        assert_eq!(serde_json::from_str::<MeasurementFile>(&text).unwrap(), file);
    }
}
