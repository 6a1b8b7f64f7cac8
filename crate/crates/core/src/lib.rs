//! Optimal experimental designs for regression with correlated observations.
//!
//! The error process is assumed to have a *triangular* covariance kernel,
//! `K(t, t') = u(min) * v(max)`, the class that covers Brownian motion, the
//! exponential (Ornstein-Uhlenbeck) kernel and many other standard models.
//! For these kernels the inverse covariance matrix on any grid is tridiagonal
//! in closed form, the best linear unbiased estimator can be emulated by a
//! signed (or matrix-weighted) least-squares estimator, and the optimal
//! designs have explicit weak limits: point masses at both interval endpoints
//! plus a signed density inside.
//!
//! The crate provides, bottom to top:
//!
//! * [`kernel`] - triangular kernels, the monotone reparameterisation `Q`,
//!   and time-space (Doob) transforms between kernels;
//! * [`model`] - regression function bundles with analytic derivatives;
//! * [`covmat`] - covariance matrices, their closed-form tridiagonal
//!   inverses and Cholesky factors;
//! * [`estimators`] - WLSE / BLUE / signed and matrix-weighted estimators
//!   with exact covariance formulas;
//! * [`design`] - optimal signed weights on finite grids;
//! * [`asymptotic`] - limiting designs, the continuous-time optimal variance
//!   `D*`, BLUE measures and design transforms;
//! * [`discretize`] - practical `(N+2)`-point plans obtained by quantile
//!   discretisation of the limiting density;
//! * [`simulate`] - Monte Carlo verification and a Nelder-Mead exact-design
//!   baseline.

pub mod asymptotic;
pub mod covmat;
pub mod design;
pub mod discretize;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod model;
pub mod quad;
pub mod simulate;

pub use asymptotic::{
    blue_measure, brownian_limiting_design, continuous_mwe_covariance,
    continuous_variance_functional, d_criterion, design_doob_transform, limiting_design,
    matrix_design_doob_transform, matrix_limiting_design, optimal_covariance_matrix,
    optimal_variance_dstar, LimitingDesign, MatrixLimitingDesign, Representation,
};
pub use covmat::{build_sigma, cholesky_factor, dense_inverse, tridiagonal_inverse, CovarianceMatrix};
pub use design::{
    design_points, optimal_mwe_vectors, optimal_signed_weights, optimal_signed_weights_triangular,
    variance_functional, MatrixWeightedDesign, SignedDesign,
};
pub use discretize::{
    finite_plan, matrix_finite_plan, matrix_plan_covariance, plan_variance, quantile_points,
    FiniteDesignPlan, MatrixFinitePlan,
};
pub use error::{Error, Result};
pub use estimators::{
    blue, design_matrix, diagonal_weights, mwe, olse, one_column_weights, slse, wlse,
    EstimatorKind, EstimatorReport,
};
pub use kernel::{DoobMap, KernelSpec, TriangularKernel};
pub use model::{ModelSpec, RegressionModel};
pub use simulate::{
    monte_carlo_variance, optimize_exact_blue_design, sample_gp, EstimationTarget,
    ExactDesignSearch, SimulationReport,
};
