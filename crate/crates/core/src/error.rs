use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::conic::ConicError;
use crate::diffsys::DiffSysError;
use crate::iqc::IqcError;
use crate::linalg::LinalgError;
use crate::poly::PolyError;
use crate::sim::SimError;
use crate::sosp::SosError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Iqc(#[from] IqcError),
    #[error(transparent)]
    DiffSys(#[from] DiffSysError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, Error>;
