use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error(
        "gap condition 0 < b_minus < b_plus < 3 b_minus violated (b_minus = {b_minus}, b_plus = {b_plus})"
    )]
    GapInadmissible { b_minus: f64, b_plus: f64 },

    #[error("perturbation leaves the admissible field class: {0}")]
    InadmissiblePerturbation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no admissible window for xi = {xi}: {reason}")]
    Window { xi: f64, reason: String },

    #[error("eigensolver failed at xi = {xi}: {reason}")]
    Eigen { xi: f64, reason: String },

    #[error("contour projection failed: {0}")]
    Contour(String),

    #[error("epsilon = {epsilon} outside the admissible range (0, {epsilon_star})")]
    EpsilonOutOfRange { epsilon: f64, epsilon_star: f64 },

    #[error("chi support [{lo}, {hi}] exceeds the table range [{xi_min}, {xi_max}]")]
    SupportOutsideTable {
        lo: f64,
        hi: f64,
        xi_min: f64,
        xi_max: f64,
    },

    #[error("bump coverage gap between xi = {left} and xi = {right}")]
    CoverageGap { left: f64, right: f64 },

    #[error("perturbation is not compactly supported: {0}")]
    NonCompact(String),

    #[error("sign ambiguity left unresolved at x = {x}")]
    Unresolved { x: f64 },

    #[error("support radius {radius} is not below r0 = {r0}")]
    SupportTooWide { radius: f64, r0: f64 },

    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("numerical cross-check failed: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Failures that come out of a numerical computation rather than from
    /// rejecting the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Window { .. }
                | Error::Eigen { .. }
                | Error::Contour(_)
                | Error::Unresolved { .. }
                | Error::NonConvergence { .. }
                | Error::Mismatch(_)
        )
    }
}
