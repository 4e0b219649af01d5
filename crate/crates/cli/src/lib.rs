//! Pipelines behind the `iwatsuka` binary. Every command turns a validated
//! [`RunConfig`] into a list of in-memory artifacts; writing them is a
//! separate, single-threaded step so that outputs are byte-identical for a
//! fixed config and seed whatever the thread pool.

pub mod config;
pub mod pipelines;
pub mod selftest;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Command, RunConfig};
pub use pipelines::run;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] iwatsuka::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} self-test checks failed")]
    SelftestFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for rejected input, 2 for failures inside a computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::SelftestFailed { .. } => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        if self.exit_code() == 2 {
            "numerical"
        } else {
            "validation"
        }
    }

    /// One-line JSON record for stderr, with the offending ξ or ε when known.
    pub fn to_line(&self) -> String {
        let mut record = serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Core(e) = self {
            use iwatsuka::Error as E;
            match e {
                E::Window { xi, .. } | E::Eigen { xi, .. } => record["xi"] = (*xi).into(),
                E::EpsilonOutOfRange { epsilon, .. } => record["epsilon"] = (*epsilon).into(),
                E::Unresolved { x } => record["x"] = (*x).into(),
                _ => {}
            }
        }
        record.to_string()
    }
}

/// Provenance block of every JSON artifact; mirrors the CSV header line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonHeader {
    pub schema: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonArtifact<T> {
    pub header: JsonHeader,
    pub result: T,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub file_name: String,
    pub contents: String,
}

#[derive(Debug)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
    /// Set when the run completed but the result is a failure (self-test).
    pub failure: Option<CliError>,
}

/// Writes every artifact into `dir`, creating it if needed.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    artifacts
        .iter()
        .map(|a| {
            let path = dir.join(&a.file_name);
            fs::write(&path, a.contents.as_bytes()).map_err(|e| CliError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Runs `config` inside a dedicated pool of `threads` workers.
pub fn run_with_threads(config: &RunConfig, base_dir: &Path, threads: usize) -> Result<RunOutput, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    pool.install(|| run(config, base_dir))
}
