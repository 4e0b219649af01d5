use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use iwatsuka::bands::{compute_bands_with, feynman_hellmann_deviation, BandTable, GapCertificate, XiGrid};
use iwatsuka::current::{
    evolve_velocity, theta_band, theta_by_parts, theta_fiber, ChiProfile, CurrentResult, CurrentRoute,
    MeasurementFile, MeasurementHeader, MeasurementRecord, MEASUREMENT_SCHEMA,
};
use iwatsuka::export::{
    bands_csv, to_json, write_csv, ArtifactHeader, BANDS_CSV_SCHEMA, RECONSTRUCTION_CSV_SCHEMA,
};
use iwatsuka::fields::{MagneticField, VectorPotential};
use iwatsuka::inverse::{
    band_data_potentials, extract_a_from_band_data, fit_field, recover_lambda1, CurrentData, FitOptions,
};
use iwatsuka::perturbation::{perturb_report, ContourSpec};
use iwatsuka::spectral::WindowOptions;

use crate::config::{Command, RunConfig};
use crate::{selftest, Artifact, CliError, JsonArtifact, JsonHeader, RunOutput, VERSION};

const BAND_TOLERANCE: f64 = 2e-3;

/// Schema tags and hash shared by every artifact of one run.
struct Provenance {
    config_hash: String,
    seed: u64,
}

impl Provenance {
    fn csv(&self, schema: &str, file_name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Artifact {
        Artifact {
            file_name: file_name.into(),
            contents: write_csv(&self.csv_header(schema), columns, rows),
        }
    }

    fn csv_header(&self, schema: &str) -> ArtifactHeader {
        ArtifactHeader {
            schema: schema.into(),
            version: VERSION.into(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }

    fn json<T: Serialize>(&self, schema: &str, file_name: &str, result: T) -> Result<Artifact, CliError> {
        let wrapped = JsonArtifact {
            header: JsonHeader {
                schema: schema.into(),
                version: VERSION.into(),
                config_hash: self.config_hash.clone(),
                seed: self.seed,
            },
            result,
        };
        Ok(Artifact {
            file_name: file_name.into(),
            contents: to_json(&wrapped)?,
        })
    }
}

pub const BANDS_JSON_SCHEMA: &str = "iwatsuka.bands-summary/1";
pub const CURRENTS_CSV_SCHEMA: &str = "iwatsuka.currents/1";
pub const PERTURB_CSV_SCHEMA: &str = "iwatsuka.perturb/1";
pub const PERTURB_JSON_SCHEMA: &str = "iwatsuka.perturb-report/1";
pub const RECONSTRUCTION_JSON_SCHEMA: &str = "iwatsuka.reconstruction-result/1";
pub const LAMBDA1_CSV_SCHEMA: &str = "iwatsuka.lambda1/1";
pub const EXTRACTION_CSV_SCHEMA: &str = "iwatsuka.extraction/1";
pub const EXTRACTION_JSON_SCHEMA: &str = "iwatsuka.extraction-summary/1";
pub const SELFTEST_JSON_SCHEMA: &str = "iwatsuka.selftest/1";

fn field(config: &RunConfig) -> Result<MagneticField, CliError> {
    let spec = config
        .field_spec
        .as_ref()
        .ok_or_else(|| CliError::Config("field_spec: required by this command".into()))?;
    Ok(spec.build()?)
}

fn xi_grid(config: &RunConfig, field: &MagneticField) -> Result<XiGrid, CliError> {
    let [lo, hi] = config.xi_window.unwrap_or_else(|| {
        let g = XiGrid::default_for(field.b_plus());
        [g.xi_min, g.xi_max]
    });
    Ok(XiGrid::new(lo, hi, config.xi_nodes)?)
}

fn window(config: &RunConfig) -> WindowOptions {
    WindowOptions::with_n(config.grid_n)
}

fn noise(seed: u64, sigma: f64, count: usize) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; count];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("validated noise level");
    (0..count).map(|_| normal.sample(&mut rng)).collect()
}

/// Executes the pipeline named by `config`. Relative input paths resolve
/// against `base_dir`.
pub fn run(config: &RunConfig, base_dir: &Path) -> Result<RunOutput, CliError> {
    config.validate()?;
    match config.command {
        Command::Bands => bands(config),
        Command::Current => current(config),
        Command::Perturb => perturb(config),
        Command::Invert => invert(config, base_dir),
        Command::Extract => extract(config),
        Command::Selftest => run_selftest(config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandsSummary {
    pub xi_min: f64,
    pub xi_max: f64,
    pub xi_nodes: usize,
    pub j_max: usize,
    pub b_minus: f64,
    pub b_plus: f64,
    /// Entries outside `[(2j−1)b₋, (2j−1)b₊]` by more than the tolerance.
    pub band_bound_violations: usize,
    pub band_tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_certificate: Option<GapCertificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feynman_hellmann_deviation: Option<f64>,
}

fn bands(config: &RunConfig) -> Result<RunOutput, CliError> {
    let field = field(config)?;
    let grid = xi_grid(config, &field)?;
    let table = compute_bands_with(&field, &grid, config.j_max, &window(config))?;
    let prov = Provenance {
        config_hash: config.hash(&[]),
        seed: config.seed,
    };
    let summary = BandsSummary {
        xi_min: grid.xi_min,
        xi_max: grid.xi_max,
        xi_nodes: grid.m,
        j_max: config.j_max,
        b_minus: table.b_minus,
        b_plus: table.b_plus,
        band_bound_violations: table.band_bound_violations(BAND_TOLERANCE).len(),
        band_tolerance: BAND_TOLERANCE,
        gap_certificate: if config.j_max >= 2 {
            Some(table.gap_certificate()?)
        } else {
            None
        },
        feynman_hellmann_deviation: feynman_hellmann_deviation(&table).ok(),
    };
    let mut lines = vec![format!(
        "bands: {} nodes on [{}, {}], j_max {}, {} bound violations",
        grid.m, grid.xi_min, grid.xi_max, config.j_max, summary.band_bound_violations
    )];
    if let Some(d) = summary.feynman_hellmann_deviation {
        lines.push(format!("feynman-hellmann deviation {d:e}"));
    }
    Ok(RunOutput {
        artifacts: vec![
            Artifact {
                file_name: "bands.csv".into(),
                contents: bands_csv(&table, &prov.csv_header(BANDS_CSV_SCHEMA)),
            },
            prov.json(BANDS_JSON_SCHEMA, "bands.json", &summary)?,
        ],
        summary: lines,
        failure: None,
    })
}

fn theta_by_route(
    table: &BandTable,
    chi: &ChiProfile,
    route: CurrentRoute,
) -> Result<CurrentResult, CliError> {
    Ok(match route {
        CurrentRoute::FiberQuadrature => theta_fiber(table, chi)?,
        CurrentRoute::BandDerivative => theta_band(table, chi)?,
        CurrentRoute::ByParts => theta_by_parts(table, chi)?,
        CurrentRoute::Evolution => CurrentResult {
            theta: evolve_velocity(table, chi, &[0.0])?[0],
            route,
            quad_error_estimate: 0.0,
        },
    })
}

fn current(config: &RunConfig) -> Result<RunOutput, CliError> {
    let section = config.current.as_ref().expect("validated");
    let field = field(config)?;
    let grid = xi_grid(config, &field)?;
    let table = compute_bands_with(&field, &grid, config.j_max, &window(config))?;
    let profiles = section.all_profiles();
    let jitter = noise(config.seed, section.noise_sigma, profiles.len());
    let records = profiles
        .iter()
        .zip(&jitter)
        .map(|(chi, n)| {
            let r = theta_by_route(&table, chi, section.route)?;
            Ok(MeasurementRecord {
                chi_params: *chi,
                theta: r.theta + n,
                route: section.route,
                error_estimate: r.quad_error_estimate,
                noise_sigma: section.noise_sigma,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let prov = Provenance {
        config_hash: config.hash(&[]),
        seed: config.seed,
    };
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            vec![
                r.chi_params.center,
                r.chi_params.width,
                r.chi_params.amplitude,
                r.theta,
                r.error_estimate,
            ]
        })
        .collect();
    let file = MeasurementFile {
        header: MeasurementHeader {
            schema: MEASUREMENT_SCHEMA.into(),
            version: VERSION.into(),
            config_hash: prov.config_hash.clone(),
            seed: config.seed,
            b_minus: Some(field.b_minus()),
            b_plus: Some(field.b_plus()),
        },
        records,
    };
    Ok(RunOutput {
        artifacts: vec![
            Artifact {
                file_name: "measurements.json".into(),
                contents: to_json(&file)?,
            },
            prov.csv(
                CURRENTS_CSV_SCHEMA,
                "currents.csv",
                &["center", "width", "amplitude", "theta", "error_estimate"],
                &rows,
            ),
        ],
        summary: vec![format!(
            "current: {} profiles via {:?}",
            rows.len(),
            section.route
        )],
        failure: None,
    })
}

fn perturb(config: &RunConfig) -> Result<RunOutput, CliError> {
    let section = config.perturb.as_ref().expect("validated");
    let field = field(config)?;
    let (b_minus, b_plus) = field.field_bounds();
    let spec = ContourSpec::default_for(b_minus, b_plus)?;
    let reports = section
        .xi
        .par_iter()
        .map(|&xi| {
            perturb_report(
                &field,
                &section.perturbation,
                xi,
                &section.epsilons,
                &spec,
                section.a2_terms,
                section.kappa,
            )
        })
        .collect::<iwatsuka::Result<Vec<_>>>()?;
    let prov = Provenance {
        config_hash: config.hash(&[]),
        seed: config.seed,
    };
    let rows: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            vec![
                r.xi,
                r.lambda1,
                r.c_bound,
                r.epsilon_star,
                r.a1,
                r.fit.get(1).copied().unwrap_or(f64::NAN),
                r.a2,
                r.a2_contour,
                r.a2_tail_bound,
                r.w_phi_norm_sq,
            ]
        })
        .collect();
    Ok(RunOutput {
        artifacts: vec![
            prov.csv(
                PERTURB_CSV_SCHEMA,
                "perturb.csv",
                &[
                    "xi",
                    "lambda_1",
                    "c_bound",
                    "epsilon_star",
                    "a1",
                    "a2_fit",
                    "a2_sum",
                    "a2_contour",
                    "a2_tail_bound",
                    "w_phi_norm_sq",
                ],
                &rows,
            ),
            prov.json(PERTURB_JSON_SCHEMA, "perturb.json", &reports)?,
        ],
        summary: vec![format!("perturb: {} momenta", reports.len())],
        failure: None,
    })
}

fn invert(config: &RunConfig, base_dir: &Path) -> Result<RunOutput, CliError> {
    let section = config.invert.as_ref().expect("validated");
    let prior = field(config)?;
    let path = base_dir.join(&section.measurements);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let file: MeasurementFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("invert.measurements: {}: {e}", path.display())))?;
    if file.header.schema != MEASUREMENT_SCHEMA {
        return Err(CliError::Config(format!(
            "invert.measurements: schema {} is not {MEASUREMENT_SCHEMA}",
            file.header.schema
        )));
    }
    let mut data = CurrentData::from_measurements(&file)?;
    for (r, n) in data
        .records
        .iter_mut()
        .zip(noise(config.seed, section.noise_sigma, file.records.len()))
    {
        r.theta += n;
        r.noise_sigma = r.noise_sigma.max(section.noise_sigma);
    }
    let mut opts = FitOptions::new(section.support_radius);
    opts.max_iter = section.max_iter;
    opts.grad_tol = section.grad_tol;
    opts.table_step = section.table_step;
    opts.window = window(config);
    opts.truth = section.truth.clone();
    opts.allow_wide_support = section.allow_wide_support;
    let result = fit_field(&data, &prior, section.basis_size, section.reg, &opts)?;
    let prov = Provenance {
        config_hash: config.hash(&[&bytes]),
        seed: config.seed,
    };
    let rows: Vec<Vec<f64>> = result
        .x
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let truth = result.a_true.as_ref().map_or(f64::NAN, |t| t[i]);
            vec![x, truth, result.a_recovered[i]]
        })
        .collect();
    let mut summary = vec![format!(
        "invert: {} iterations, gradient norm {:e}, coefficients {:?}",
        result.iterations, result.gradient_norm, result.coefficients
    )];
    if let Some(e) = result.linf_error {
        summary.push(format!("linf_error {e:e}"));
    }
    let mut artifacts = vec![
        prov.csv(
            RECONSTRUCTION_CSV_SCHEMA,
            "reconstruction.csv",
            &["x", "a_true", "a_recovered"],
            &rows,
        ),
        prov.json(RECONSTRUCTION_JSON_SCHEMA, "reconstruction.json", &result)?,
    ];
    match recover_lambda1(&data, prior.b_minus(), prior.b_plus()) {
        Ok(est) => {
            let rows: Vec<Vec<f64>> = (0..est.xi.len())
                .map(|i| vec![est.xi[i], est.lambda1[i], est.derivative[i]])
                .collect();
            artifacts.push(prov.csv(
                LAMBDA1_CSV_SCHEMA,
                "lambda1.csv",
                &["xi", "lambda_1", "derivative"],
                &rows,
            ));
            summary.push(format!(
                "lambda_1 recovered; far-end mismatch {:e}",
                est.far_end_mismatch
            ));
        }
        Err(e) => summary.push(format!("lambda_1 not recovered: {e}")),
    }
    Ok(RunOutput {
        artifacts,
        summary,
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub xi0: f64,
    pub points: usize,
    pub flagged: usize,
    pub linf_error: f64,
    pub linear_identity_gap: f64,
}

fn extract(config: &RunConfig) -> Result<RunOutput, CliError> {
    let section = config.extract.as_ref().expect("validated");
    let field = field(config)?;
    let (x, q_plus, q_minus) = band_data_potentials(&field, section.xi0, section.floor, &window(config))?;
    let ex = extract_a_from_band_data(&x, &q_plus, &q_minus, section.xi0)?;
    let truth: Vec<f64> = x.iter().map(|&s| field.potential(s)).collect();
    let linf_error = truth
        .iter()
        .zip(&ex.a)
        .map(|(t, a)| (t - a).abs())
        .fold(0.0, f64::max);
    let prov = Provenance {
        config_hash: config.hash(&[]),
        seed: config.seed,
    };
    let rows: Vec<Vec<f64>> = (0..x.len())
        .map(|i| vec![x[i], q_plus[i], q_minus[i], ex.a[i], truth[i]])
        .collect();
    let summary = ExtractionSummary {
        xi0: section.xi0,
        points: x.len(),
        flagged: ex.flagged.len(),
        linf_error,
        linear_identity_gap: ex.linear_identity_gap,
    };
    Ok(RunOutput {
        artifacts: vec![
            prov.csv(
                EXTRACTION_CSV_SCHEMA,
                "extraction.csv",
                &["x", "q_plus", "q_minus", "a_extracted", "a_true"],
                &rows,
            ),
            prov.json(EXTRACTION_JSON_SCHEMA, "extraction.json", &summary)?,
        ],
        summary: vec![format!(
            "extract: {} points, {} flagged, linf_error {linf_error:e}",
            summary.points, summary.flagged
        )],
        failure: None,
    })
}

fn run_selftest(config: &RunConfig) -> Result<RunOutput, CliError> {
    let checks = selftest::run_suite(config.seed, &window(config));
    let total = checks.len();
    let failed = checks.iter().filter(|c| !c.passed).count();
    let prov = Provenance {
        config_hash: config.hash(&[]),
        seed: config.seed,
    };
    let mut summary: Vec<String> = checks.iter().map(|c| c.line()).collect();
    summary.push(format!("selftest: {} passed, {failed} failed", total - failed));
    Ok(RunOutput {
        artifacts: vec![prov.json(SELFTEST_JSON_SCHEMA, "selftest.json", &checks)?],
        summary,
        failure: (failed > 0).then_some(CliError::SelftestFailed { failed, total }),
    })
}
