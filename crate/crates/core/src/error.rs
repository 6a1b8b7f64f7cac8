use thiserror::Error;

/// Errors produced by kernel validation, linear algebra and quadrature.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("incompatible kernels: {0}")]
    IncompatibleKernels(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("argument outside the design interval: {what} = {value}, interval [{a}, {b}]")]
    DomainViolation { what: &'static str, value: f64, a: f64, b: f64 },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureFailure(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
