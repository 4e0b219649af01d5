//! Run configuration: one TOML file per pipeline invocation. The schema is
//! documented in `docs/config.md`; unknown keys are rejected at every level.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use iwatsuka::current::{ChiProfile, CurrentRoute};
use iwatsuka::fields::{FieldSpec, PerturbationW};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Bands,
    Current,
    Perturb,
    Invert,
    Extract,
    Selftest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Required by every command except `selftest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_spec: Option<FieldSpec>,
    /// Defaults to `[−8√b₊, 8√b₊]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_window: Option<[f64; 2]>,
    #[serde(default = "default_xi_nodes")]
    pub xi_nodes: usize,
    /// Interior nodes of the default fiber window.
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_j_max")]
    pub j_max: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output directory.
    #[serde(default = "default_output_path")]
    pub output_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current: Option<CurrentSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invert: Option<InvertSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extract: Option<ExtractSection>,
}

/// Evenly spaced smooth bumps `first, first + step, …, last`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpFamily {
    pub first: f64,
    pub last: f64,
    pub count: usize,
    pub width: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

impl BumpFamily {
    pub fn profiles(&self) -> Vec<ChiProfile> {
        let step = if self.count > 1 {
            (self.last - self.first) / (self.count - 1) as f64
        } else {
            0.0
        };
        (0..self.count)
            .map(|i| ChiProfile::smooth_bump(self.first + i as f64 * step, self.width, self.amplitude))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentSection {
    #[serde(default)]
    pub profiles: Vec<ChiProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bumps: Option<BumpFamily>,
    #[serde(default = "default_route")]
    pub route: CurrentRoute,
    /// Standard deviation of seeded Gaussian noise added to every current.
    #[serde(default)]
    pub noise_sigma: f64,
}

impl CurrentSection {
    pub fn all_profiles(&self) -> Vec<ChiProfile> {
        let mut out = self.profiles.clone();
        if let Some(b) = &self.bumps {
            out.extend(b.profiles());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub perturbation: PerturbationW,
    pub xi: Vec<f64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Eigenpairs in the truncated second-order sum.
    #[serde(default = "default_a2_terms")]
    pub a2_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSection {
    /// Measurement JSON, relative to the config file's directory.
    pub measurements: String,
    pub support_radius: f64,
    #[serde(default = "default_basis_size")]
    pub basis_size: usize,
    #[serde(default)]
    pub reg: f64,
    #[serde(default = "default_table_step")]
    pub table_step: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PerturbationW>,
    #[serde(default)]
    pub allow_wide_support: bool,
    /// Seeded Gaussian noise added to the measured currents before fitting.
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractSection {
    pub xi0: f64,
    /// Ground-state values below `floor · max φ₁` are not inverted.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_xi_nodes() -> usize {
    161
}
fn default_grid_n() -> usize {
    2000
}
fn default_j_max() -> usize {
    3
}
fn default_output_path() -> String {
    "out".into()
}
fn one() -> f64 {
    1.0
}
fn default_route() -> CurrentRoute {
    CurrentRoute::FiberQuadrature
}
fn default_epsilons() -> Vec<f64> {
    (1..=10).map(|k| k as f64 * 1e-3).collect()
}
fn default_kappa() -> f64 {
    0.75
}
fn default_a2_terms() -> usize {
    400
}
fn default_basis_size() -> usize {
    1
}
fn default_table_step() -> f64 {
    0.01
}
fn default_max_iter() -> usize {
    200
}
fn default_grad_tol() -> f64 {
    1e-10
}
fn default_floor() -> f64 {
    1e-6
}

fn invalid(key: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {why}"))
}

fn finite_positive(key: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be finite and positive, got {v}")))
    }
}

fn in_range(key: &str, v: usize, lo: usize, hi: usize) -> Result<(), CliError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in [{lo}, {hi}], got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        in_range("grid_n", self.grid_n, 50, 200_000)?;
        in_range("xi_nodes", self.xi_nodes, 2, 100_001)?;
        in_range("j_max", self.j_max, 1, 2000)?;
        if let Some([lo, hi]) = self.xi_window {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(
                    "xi_window",
                    format!("needs finite lo < hi, got [{lo}, {hi}]"),
                ));
            }
        }
        if self.output_path.is_empty() {
            return Err(invalid("output_path", "must not be empty"));
        }
        if self.command != Command::Selftest {
            let spec = self
                .field_spec
                .as_ref()
                .ok_or_else(|| invalid("field_spec", "required by this command"))?;
            spec.build()?;
        }
        let need = |present: bool, section: &str| -> Result<(), CliError> {
            if present {
                Ok(())
            } else {
                Err(invalid(section, "section required by this command"))
            }
        };
        match self.command {
            Command::Current => {
                need(self.current.is_some(), "current")?;
                let c = self.current.as_ref().unwrap();
                if c.all_profiles().is_empty() {
                    return Err(invalid("current", "needs `profiles` or `bumps`"));
                }
                if let Some(b) = &c.bumps {
                    in_range("current.bumps.count", b.count, 1, 100_000)?;
                    finite_positive("current.bumps.width", b.width)?;
                }
                for p in c.all_profiles() {
                    p.validate()?;
                }
                if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite()) {
                    return Err(invalid("current.noise_sigma", "must be finite and non-negative"));
                }
            }
            Command::Perturb => {
                need(self.perturb.is_some(), "perturb")?;
                let p = self.perturb.as_ref().unwrap();
                if p.xi.is_empty() || p.xi.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("perturb.xi", "needs at least one finite momentum"));
                }
                if p.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                    return Err(invalid("perturb.epsilons", "must be finite and positive"));
                }
                if !(p.kappa > 0.0 && p.kappa < 1.0) {
                    return Err(invalid(
                        "perturb.kappa",
                        format!("must lie in (0, 1), got {}", p.kappa),
                    ));
                }
                in_range("perturb.a2_terms", p.a2_terms, 2, 5000)?;
                PerturbationW::new(p.perturbation.support_radius, p.perturbation.coefficients.clone())?;
            }
            Command::Invert => {
                need(self.invert.is_some(), "invert")?;
                let i = self.invert.as_ref().unwrap();
                finite_positive("invert.support_radius", i.support_radius)?;
                finite_positive("invert.table_step", i.table_step)?;
                finite_positive("invert.grad_tol", i.grad_tol)?;
                in_range("invert.basis_size", i.basis_size, 1, 64)?;
                in_range("invert.max_iter", i.max_iter, 1, 10_000)?;
                if !(i.reg >= 0.0 && i.reg.is_finite()) {
                    return Err(invalid("invert.reg", "must be finite and non-negative"));
                }
                if !(i.noise_sigma >= 0.0 && i.noise_sigma.is_finite()) {
                    return Err(invalid("invert.noise_sigma", "must be finite and non-negative"));
                }
            }
            Command::Extract => {
                need(self.extract.is_some(), "extract")?;
                let e = self.extract.as_ref().unwrap();
                finite_positive("extract.xi0", e.xi0)?;
                if !(e.floor > 0.0 && e.floor < 1.0) {
                    return Err(invalid("extract.floor", "must lie in (0, 1)"));
                }
            }
            Command::Bands | Command::Selftest => {}
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (output directory excluded) and
    /// any extra input bytes, hex encoded.
    pub fn hash(&self, inputs: &[&[u8]]) -> String {
        let mut canonical = self.clone();
        canonical.output_path.clear();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        for input in inputs {
            hasher.update(input);
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BANDS: &str = r#"
command = "bands"
j_max = 2
[field_spec]
kind = "tanh"
b_minus = 1.0
b_plus = 2.0
params = [0.0, 1.0]
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml(BANDS).unwrap();
        assert_eq!(c.command, Command::Bands);
        assert_eq!((c.grid_n, c.xi_nodes, c.j_max, c.seed), (2000, 161, 2, 0));
        assert_eq!(c.output_path, "out");
    }

    #[test]
    fn rejects_unknown_keys_everywhere() {
        assert!(RunConfig::from_toml(&format!("{BANDS}\nbogus = 1\n")).is_err());
        let nested = BANDS.replace("params = [0.0, 1.0]", "params = [0.0, 1.0]\nextra = 2");
        assert!(RunConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let bad = BANDS.replace("j_max = 2", "j_max = 0");
        assert!(matches!(RunConfig::from_toml(&bad), Err(CliError::Config(_))));
        let bad = BANDS.replace("j_max = 2", "j_max = 2\nxi_window = [3.0, -3.0]");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad = BANDS.replace("b_plus = 2.0", "b_plus = 4.0");
        assert!(RunConfig::from_toml(&bad).is_err());
        assert!(RunConfig::from_toml(
            "command = \"invert\"\n[field_spec]\nkind = \"constant\"\nb_minus = 1.0\nb_plus = 1.0\n"
        )
        .is_err());
    }

    #[test]
    fn hash_ignores_the_output_directory_only() {
        let a = RunConfig::from_toml(BANDS).unwrap();
        let mut b = a.clone();
        b.output_path = "elsewhere".into();
        assert_eq!(a.hash(&[]), b.hash(&[]));
        b.seed = 1;
        assert_ne!(a.hash(&[]), b.hash(&[]));
        assert_ne!(a.hash(&[]), a.hash(&[b"data"]));
        assert_eq!(a.hash(&[]).len(), 64);
    }
}
