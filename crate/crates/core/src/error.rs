use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A point or configuration lies outside the region where a closed-form
    /// object is defined (antipodal directions, coincident centers, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Zero is numerically an eigenvalue of the Dirichlet realization of `-Δ + q`.
    #[error(
        "0 is an eigenvalue of -Δ+q within discretization accuracy \
         (nearest eigenvalue {eigenvalue:.4e}, accuracy band {band:.4e}, condition estimate {condition:.3e})"
    )]
    ZeroEigenvalue {
        eigenvalue: f64,
        band: f64,
        condition: f64,
    },

    #[error("singular or ill-conditioned system (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("h = {h} lies outside the semiclassical regime h <= {h0}")]
    OutsideSemiclassical { h: f64, h0: f64 },

    #[error("constrained solve infeasible: residual {residual:.3e}")]
    Infeasible { residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::InvalidInput(msg.into()))
}
