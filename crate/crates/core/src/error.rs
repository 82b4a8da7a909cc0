use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("simulation diverged at step {step}{}", bias_note(*.bias))]
    SimulationDiverged { step: u64, bias: Option<f64> },

    #[error("no eligible samples: {0}")]
    EmptyDataset(&'static str),

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("generation diverged at ODE step {step}")]
    GenerationDiverged { step: usize },

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error("degenerate encoder: {0}")]
    DegenerateEncoder(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn bias_note(bias: Option<f64>) -> String {
    match bias {
        Some(v) => format!(" (bias magnitude {v:.4e})"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
