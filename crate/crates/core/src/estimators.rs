//! Linear estimators and their exact covariance formulas.
//!
//! Everything is expressed through the design matrix `X` (`N x m`, row `j`
//! holding `f(t_j)^T`) and the error covariance `Sigma`. The general weighted
//! estimator is `(X^T W X)^{-1} X^T W Y`; matrix-weighted estimators replace
//! `X^T W` by a matrix `C` whose `j`-th column is `O_j f(t_j)`.

use nalgebra::{DMatrix, DVector};

use crate::covmat::{build_sigma, precision_matrix};
use crate::error::{Error, Result};
use crate::kernel::TriangularKernel;
use crate::model::RegressionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Olse,
    Wlse,
    Blue,
    Slse,
    Mwe,
}

/// Estimate plus its exact covariance under the supplied `Sigma`.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub kind: EstimatorKind,
}

/// `X` with `X[j, i] = f_i(t_j)`.
pub fn design_matrix(model: &RegressionModel, points: &[f64]) -> DMatrix<f64> {
    let m = model.dimension();
    let mut x = DMatrix::zeros(points.len(), m);
    for (j, &t) in points.iter().enumerate() {
        x.row_mut(j).copy_from_slice(model.eval(t).as_slice());
    }
    x
}

fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{what} is singular")))
}

/// Weighted least squares `(X^T W X)^{-1} X^T W Y` with covariance
/// `(X^T W X)^{-1} X^T W Sigma W^T X (X^T W^T X)^{-1}`.
pub fn wlse(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<EstimatorReport> {
    let xtw = x.transpose() * w;
    let normal = &xtw * x;
    let normal_inv = invert(&normal, "X^T W X")?;
    let estimate = &normal_inv * (&xtw * y);
    let covariance = &normal_inv * (&xtw * sigma * xtw.transpose()) * normal_inv.transpose();
    Ok(EstimatorReport { estimate, covariance, kind: EstimatorKind::Wlse })
}

/// Covariance of the WLSE alone (no data needed).
pub fn wlse_covariance(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let xtw = x.transpose() * w;
    let normal_inv = invert(&(&xtw * x), "X^T W X")?;
    Ok(&normal_inv * (&xtw * sigma * xtw.transpose()) * normal_inv.transpose())
}

/// Ordinary least squares, the `W = I` case.
pub fn olse(x: &DMatrix<f64>, sigma: &DMatrix<f64>, y: &DVector<f64>) -> Result<EstimatorReport> {
    let id = DMatrix::identity(x.nrows(), x.nrows());
    let mut report = wlse(x, &id, sigma, y)?;
    report.kind = EstimatorKind::Olse;
    Ok(report)
}

/// Signed least squares: `W = diag(s)` with `s_i` in `{-1, +1}`.
pub fn slse(
    x: &DMatrix<f64>,
    signs: &[i8],
    sigma: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<EstimatorReport> {
    if signs.len() != x.nrows() {
        return Err(Error::InvalidDesign("sign vector length mismatch".into()));
    }
    if signs.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::InvalidDesign("signs must be ±1".into()));
    }
    let w = DMatrix::from_diagonal(&DVector::from_iterator(
        signs.len(),
        signs.iter().map(|&s| s as f64),
    ));
    let mut report = wlse(x, &w, sigma, y)?;
    report.kind = EstimatorKind::Slse;
    Ok(report)
}

/// BLUE from an explicit `Sigma^{-1}`: covariance `(X^T Sigma^{-1} X)^{-1}`.
pub fn blue_with_precision(
    x: &DMatrix<f64>,
    sigma_inv: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<EstimatorReport> {
    let xtp = x.transpose() * sigma_inv;
    let info = &xtp * x;
    let covariance = invert(&info, "X^T Sigma^{-1} X")?;
    let estimate = &covariance * (&xtp * y);
    Ok(EstimatorReport { estimate, covariance, kind: EstimatorKind::Blue })
}

/// BLUE `(X^T Sigma^{-1} X)^{-1} X^T Sigma^{-1} Y`, with `Sigma^{-1}` taken
/// from the dense LU path.
pub fn blue(x: &DMatrix<f64>, sigma: &DMatrix<f64>, y: &DVector<f64>) -> Result<EstimatorReport> {
    let sigma_inv = invert(sigma, "Sigma")?;
    blue_with_precision(x, &sigma_inv, y)
}

/// BLUE on a triangular kernel, using the closed-form tridiagonal inverse.
pub fn blue_triangular(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    points: &[f64],
    y: &DVector<f64>,
) -> Result<EstimatorReport> {
    let cov = build_sigma(kernel, points)?;
    let x = design_matrix(model, points);
    blue_with_precision(&x, &precision_matrix(&cov)?, y)
}

/// Variance of the BLUE in the one-parameter case, `1 / (f^T Sigma^{-1} f)`.
pub fn blue_variance_scalar(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    points: &[f64],
) -> Result<f64> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("scalar BLUE variance needs m = 1".into()));
    }
    let cov = build_sigma(kernel, points)?;
    let f = DVector::from_iterator(points.len(), points.iter().map(|&t| model.scalar(t)));
    let info = f.dot(&(precision_matrix(&cov)? * &f));
    if info <= 0.0 {
        return Err(Error::Singular(format!("f^T Sigma^{{-1}} f = {info}")));
    }
    Ok(1.0 / info)
}

/// Matrix-weighted estimator `M^{-1} C Y` with `C = (O_1 f(t_1), ...,
/// O_N f(t_N))`, `M = C X`; covariance `M^{-1} C Sigma C^T M^{-T}`.
pub fn mwe(
    points: &[f64],
    weights: &[DMatrix<f64>],
    model: &RegressionModel,
    sigma: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<EstimatorReport> {
    let c = mwe_c_matrix(points, weights, model)?;
    mwe_from_c(&c, points, model, sigma, y)
}

/// Assembles `C` from per-point matrix weights.
pub fn mwe_c_matrix(
    points: &[f64],
    weights: &[DMatrix<f64>],
    model: &RegressionModel,
) -> Result<DMatrix<f64>> {
    let m = model.dimension();
    if weights.len() != points.len() {
        return Err(Error::InvalidDesign("one matrix weight per point required".into()));
    }
    let mut c = DMatrix::zeros(m, points.len());
    for (j, (&t, o)) in points.iter().zip(weights).enumerate() {
        if o.nrows() != m || o.ncols() != m {
            return Err(Error::InvalidDesign(format!("weight {j} is not {m} x {m}")));
        }
        c.set_column(j, &(o * model.eval(t)));
    }
    Ok(c)
}

/// MWE given an explicit `C` matrix.
pub fn mwe_from_c(
    c: &DMatrix<f64>,
    points: &[f64],
    model: &RegressionModel,
    sigma: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<EstimatorReport> {
    let x = design_matrix(model, points);
    let info = c * &x;
    let info_inv = c_inverse(&info)?;
    let estimate = &info_inv * (c * y);
    let covariance = &info_inv * (c * sigma * c.transpose()) * info_inv.transpose();
    Ok(EstimatorReport { estimate, covariance, kind: EstimatorKind::Mwe })
}

/// Covariance of the MWE alone (no data needed).
pub fn mwe_covariance(
    c: &DMatrix<f64>,
    points: &[f64],
    model: &RegressionModel,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let x = design_matrix(model, points);
    let info = c * &x;
    let info_inv = c_inverse(&info)?;
    Ok(&info_inv * (c * sigma * c.transpose()) * info_inv.transpose())
}

fn c_inverse(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    info.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("generalized information matrix M = C X is singular".into()))
}

/// One-column matrix weights realizing a given WLSE as an MWE:
/// `omega_j = (X^T W)_j / f_1(t_j)`, `O_j = omega_j e_1^T`.
pub fn one_column_weights(
    model: &RegressionModel,
    points: &[f64],
    w: &DMatrix<f64>,
) -> Result<Vec<DVector<f64>>> {
    let x = design_matrix(model, points);
    let xtw = x.transpose() * w;
    let mut out = Vec::with_capacity(points.len());
    for (j, &t) in points.iter().enumerate() {
        let f1 = model.eval(t)[0];
        if f1.abs() < 1e-14 {
            return Err(Error::InvalidDesign(format!("f_1({t}) = 0 at support point {j}")));
        }
        out.push(xtw.column(j) / f1);
    }
    Ok(out)
}

/// Diagonal matrix weights realizing a given WLSE as an MWE:
/// `(O_j)_kk = (X^T W)_{k, j} / f_k(t_j)`. Returned as diagonal vectors.
pub fn diagonal_weights(
    model: &RegressionModel,
    points: &[f64],
    w: &DMatrix<f64>,
) -> Result<Vec<DVector<f64>>> {
    let x = design_matrix(model, points);
    let xtw = x.transpose() * w;
    let m = model.dimension();
    let mut out = Vec::with_capacity(points.len());
    for (j, &t) in points.iter().enumerate() {
        let ft = model.eval(t);
        let mut diag = DVector::zeros(m);
        for k in 0..m {
            if ft[k].abs() < 1e-14 {
                return Err(Error::InvalidDesign(format!(
                    "f_{}({t}) = 0 at support point {j}",
                    k + 1
                )));
            }
            diag[k] = xtw[(k, j)] / ft[k];
        }
        out.push(diag);
    }
    Ok(out)
}

/// Expands a one-column weight vector to the full `m x m` matrix
/// `O = omega e_1^T`.
pub fn one_column_matrix(omega: &DVector<f64>) -> DMatrix<f64> {
    let m = omega.len();
    let mut o = DMatrix::zeros(m, m);
    o.set_column(0, omega);
    o
}

/// Expands diagonal entries to the full matrix.
pub fn diagonal_matrix(diag: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(diag)
}
