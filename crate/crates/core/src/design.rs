//! Discrete signed and matrix-weighted designs with exact optimal weights.
//!
//! On a fixed grid the variance of the signed least-squares estimator is
//! minimized by `w_i* = c (e_i^T Sigma^{-1} f) / f(t_i)`, which reaches the
//! BLUE variance `1 / (f^T Sigma^{-1} f)`. For triangular kernels the same
//! weights come out of the tridiagonal inverse in O(N) without forming any
//! matrix. Weights are canonicalized to `sum |w_i| = 1` with the last
//! nonzero weight positive so results are reproducible.

use nalgebra::{DMatrix, DVector};

use crate::covmat::{build_sigma, precision_matrix};
use crate::error::{Error, Result};
use crate::estimators::{design_matrix, mwe_covariance, one_column_matrix};
use crate::kernel::TriangularKernel;
use crate::model::RegressionModel;

/// Threshold below which `f(t_i)` counts as a zero and the point is dropped.
const F_ZERO: f64 = 1e-14;

/// A discrete signed design: increasing points with signed weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDesign {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SignedDesign {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidDesign("points/weights length mismatch".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidDesign("points must be strictly increasing".into()));
        }
        Ok(SignedDesign { points, weights })
    }

    /// Scales to `sum |w_i| = 1` and flips the overall sign so the last
    /// nonzero weight is positive.
    pub fn normalized(mut self) -> Self {
        let total: f64 = self.weights.iter().map(|w| w.abs()).sum();
        if total > 0.0 {
            let sign = self
                .weights
                .iter()
                .rev()
                .find(|w| w.abs() > 0.0)
                .map(|w| w.signum())
                .unwrap_or(1.0);
            for w in &mut self.weights {
                *w *= sign / total;
            }
        }
        self
    }
}

/// A discrete matrix-weighted design; `weights[j]` is the `m x m` matrix
/// attached to `points[j]` (the `1/N` convention is applied where used).
#[derive(Debug, Clone)]
pub struct MatrixWeightedDesign {
    pub points: Vec<f64>,
    pub weights: Vec<DMatrix<f64>>,
}

impl MatrixWeightedDesign {
    /// Exact covariance of the associated MWE under the kernel.
    pub fn covariance(
        &self,
        model: &RegressionModel,
        kernel: &TriangularKernel,
    ) -> Result<DMatrix<f64>> {
        let sigma = build_sigma(kernel, &self.points)?;
        let c = crate::estimators::mwe_c_matrix(&self.points, &self.weights, model)?;
        mwe_covariance(&c, &self.points, model, sigma.matrix())
    }
}

/// Variance functional of a signed design for the one-parameter model:
/// `D(xi) = sum_ij K(t_i, t_j) w_i w_j f_i f_j / (sum_i w_i f_i^2)^2`.
pub fn variance_functional(
    design: &SignedDesign,
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<f64> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("variance functional needs m = 1".into()));
    }
    let f: Vec<f64> = design.points.iter().map(|&t| model.scalar(t)).collect();
    let denom: f64 = design
        .weights
        .iter()
        .zip(&f)
        .map(|(w, fi)| w * fi * fi)
        .sum();
    if denom.abs() < 1e-300 {
        return Err(Error::InvalidDesign("sum w_i f^2(t_i) = 0".into()));
    }
    let mut num = 0.0;
    for (i, &ti) in design.points.iter().enumerate() {
        for (j, &tj) in design.points.iter().enumerate() {
            num += kernel.eval(ti, tj)? * design.weights[i] * design.weights[j] * f[i] * f[j];
        }
    }
    Ok(num / (denom * denom))
}

fn retained_points(model: &RegressionModel, points: &[f64]) -> Vec<f64> {
    points.iter().copied().filter(|&t| model.scalar(t).abs() >= F_ZERO).collect()
}

/// Optimal signed weights via the dense inverse, `w_i* = c (Sigma^{-1} f)_i / f_i`.
/// Points where `f` vanishes are removed first.
pub fn optimal_signed_weights(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    points: &[f64],
) -> Result<SignedDesign> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("signed weights need m = 1".into()));
    }
    let pts = retained_points(model, points);
    if pts.is_empty() {
        return Err(Error::InvalidDesign("f vanishes at every design point".into()));
    }
    if pts.len() == 1 {
        return SignedDesign::new(pts, vec![1.0]);
    }
    let cov = build_sigma(kernel, &pts)?;
    let sigma_inv = crate::covmat::dense_inverse(cov.matrix())?;
    let f = DVector::from_iterator(pts.len(), pts.iter().map(|&t| model.scalar(t)));
    let sf = &sigma_inv * &f;
    let weights: Vec<f64> = sf.iter().zip(f.iter()).map(|(s, fi)| s / fi).collect();
    Ok(SignedDesign::new(pts, weights)?.normalized())
}

/// The same optimal weights assembled from the closed-form tridiagonal
/// inverse in O(N): only neighbouring `q`-differences enter.
pub fn optimal_signed_weights_triangular(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    points: &[f64],
) -> Result<SignedDesign> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("signed weights need m = 1".into()));
    }
    let pts = retained_points(model, points);
    if pts.is_empty() {
        return Err(Error::InvalidDesign("f vanishes at every design point".into()));
    }
    if pts.len() == 1 {
        return SignedDesign::new(pts, vec![1.0]);
    }
    let n = pts.len();
    let u: Vec<f64> = pts.iter().map(|&t| kernel.u(t)).collect();
    let v: Vec<f64> = pts.iter().map(|&t| kernel.v(t)).collect();
    let q: Vec<f64> = u.iter().zip(&v).map(|(u, v)| u / v).collect();
    let f: Vec<f64> = pts.iter().map(|&t| model.scalar(t)).collect();
    for w in q.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Singular("tied q-values".into()));
        }
    }
    let mut weights = vec![0.0; n];
    weights[0] = u[1] / (f[0] * v[0] * v[1] * (q[1] - q[0])) * (f[0] / u[0] - f[1] / u[1]);
    weights[n - 1] =
        1.0 / (f[n - 1] * v[n - 1] * (q[n - 1] - q[n - 2])) * (f[n - 1] / v[n - 1] - f[n - 2] / v[n - 2]);
    for i in 1..n - 1 {
        weights[i] = 1.0 / (f[i] * v[i])
            * ((q[i + 1] - q[i - 1]) * f[i] / (v[i] * (q[i + 1] - q[i]) * (q[i] - q[i - 1]))
                - f[i - 1] / (v[i - 1] * (q[i] - q[i - 1]))
                - f[i + 1] / (v[i + 1] * (q[i + 1] - q[i])));
    }
    Ok(SignedDesign::new(pts, weights)?.normalized())
}

/// Optimal one-column matrix weights (`O_j = omega_j e_1^T` with
/// `omega_j = (X^T Sigma^{-1})_j / f_1(t_j)`), built from the tridiagonal
/// inverse. The resulting MWE covariance equals the BLUE covariance.
pub fn optimal_mwe_vectors(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    points: &[f64],
) -> Result<MatrixWeightedDesign> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidDesign("empty point set".into()));
    }
    for (j, &t) in points.iter().enumerate() {
        if model.eval(t)[0].abs() < F_ZERO {
            return Err(Error::InvalidDesign(format!("f_1({t}) = 0 at support point {j}")));
        }
    }
    let cov = build_sigma(kernel, points)?;
    let prec = precision_matrix(&cov)?;
    let x = design_matrix(model, points);
    let xtp = x.transpose() * &prec;
    let mut weights = Vec::with_capacity(n);
    for (j, &t) in points.iter().enumerate() {
        let omega = xtp.column(j) / model.eval(t)[0];
        weights.push(one_column_matrix(&omega.into_owned()));
    }
    Ok(MatrixWeightedDesign { points: points.to_vec(), weights })
}

/// Interior design points `t_i = Q^{-1}((i - 1/2) / N)`, `i = 1..N`.
pub fn design_points(kernel: &TriangularKernel, n: usize) -> Result<Vec<f64>> {
    (1..=n)
        .map(|i| kernel.q_quantile((i as f64 - 0.5) / n as f64))
        .collect()
}
