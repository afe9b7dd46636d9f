use std::path::Path;

use curvedit::datagen::DatagenError;
use curvedit::editing::EditError;
use curvedit::evalmem::EvalError;
use curvedit::kfac::KfacError;
use curvedit::linalg::LinalgError;
use curvedit::nn::NnError;
use curvedit::spectral::SpectralError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError::Missing(path.display().to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

fn linalg(e: LinalgError) -> CliError {
    match e {
        LinalgError::Dimension(_) => CliError::Other(e.to_string()),
        _ => CliError::Numeric(e.to_string()),
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        linalg(e)
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite(_) | NnError::Diverged { .. } => CliError::Numeric(e.to_string()),
            NnError::InvalidArch(_) | NnError::Config(_) => CliError::Config(e.to_string()),
            NnError::Linalg(l) => linalg(l),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<KfacError> for CliError {
    fn from(e: KfacError) -> Self {
        match e {
            KfacError::Linalg(l) => linalg(l),
            KfacError::Nn(n) => n.into(),
            KfacError::CounterOverflow | KfacError::Empty(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EditError> for CliError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::DegenerateCurvature(_) | EditError::Diverged(_) => CliError::Numeric(e.to_string()),
            EditError::Plan(_) => CliError::Config(e.to_string()),
            EditError::MissingFactors(_) => CliError::Missing(e.to_string()),
            EditError::Linalg(l) => linalg(l),
            EditError::Nn(n) => n.into(),
            EditError::Shape(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Nn(n) => n.into(),
            EvalError::Input(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Bands(_) => CliError::Config(e.to_string()),
            SpectralError::MissingFactors(_) => CliError::Missing(e.to_string()),
            SpectralError::Linalg(l) => linalg(l),
            SpectralError::Nn(n) => n.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Spec(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}
