//! Covariance matrices on point grids and their closed-form inverses.
//!
//! For a triangular kernel with strictly increasing `q`-values the inverse of
//! `Sigma = (K(t_i, t_j))` is symmetric tridiagonal and can be written down
//! entry by entry, giving an O(N) path that the estimator and design code
//! rides everywhere. A pivoted-LU dense inverse stays available as an oracle
//! and for the numeric exact-design baseline.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::TriangularKernel;

/// Relative `q`-gap below which the closed-form inverse is refused.
const Q_GAP_GUARD: f64 = 1e-12;

/// `Sigma` on a strictly increasing grid, with the kernel sections cached.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    points: Vec<f64>,
    sigma: DMatrix<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
}

impl CovarianceMatrix {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn q_values(&self) -> &[f64] {
        &self.q
    }
}

/// Builds `Sigma_ij = u(t_i) v(t_j)` for `i <= j` on a strictly increasing
/// grid inside the kernel domain.
pub fn build_sigma(kernel: &TriangularKernel, points: &[f64]) -> Result<CovarianceMatrix> {
    if points.is_empty() {
        return Err(Error::InvalidDesign("empty point set".into()));
    }
    let (a, b) = kernel.domain();
    let eps = 1e-12 * (b - a);
    for w in points.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidDesign(format!(
                "points must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    for &t in points {
        if t < a - eps || t > b + eps {
            return Err(Error::DomainViolation { what: "point", value: t, a, b });
        }
    }
    let n = points.len();
    let u: Vec<f64> = points.iter().map(|&t| kernel.u(t)).collect();
    let v: Vec<f64> = points.iter().map(|&t| kernel.v(t)).collect();
    let q: Vec<f64> = u.iter().zip(&v).map(|(u, v)| u / v).collect();
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let k = u[i] * v[j];
            sigma[(i, j)] = k;
            sigma[(j, i)] = k;
        }
    }
    Ok(CovarianceMatrix { points: points.to_vec(), sigma, u, v, q })
}

/// Closed-form tridiagonal inverse of a triangular-kernel covariance matrix.
///
/// Requires `N >= 2` and strictly increasing `q`-values; refuses grids whose
/// smallest `q`-gap is below `1e-12` of the total `q`-range, since every
/// entry divides by such gaps.
pub fn tridiagonal_inverse(cov: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    let n = cov.len();
    if n < 2 {
        return Err(Error::InvalidDesign("tridiagonal inverse needs N >= 2".into()));
    }
    let (u, v, q) = (&cov.u, &cov.v, &cov.q);
    let span = q[n - 1] - q[0];
    for w in q.windows(2) {
        let gap = w[1] - w[0];
        if gap <= 0.0 {
            return Err(Error::Singular("tied q-values".into()));
        }
        if gap < Q_GAP_GUARD * span {
            return Err(Error::Singular(format!(
                "q-gap {gap:e} below guard ({Q_GAP_GUARD:e} of range {span:e})"
            )));
        }
    }
    let mut inv = DMatrix::zeros(n, n);
    inv[(0, 0)] = u[1] / (u[0] * v[0] * v[1] * (q[1] - q[0]));
    inv[(n - 1, n - 1)] = 1.0 / (v[n - 1] * v[n - 1] * (q[n - 1] - q[n - 2]));
    for i in 1..n - 1 {
        inv[(i, i)] = (q[i + 1] - q[i - 1]) / (v[i] * v[i] * (q[i] - q[i - 1]) * (q[i + 1] - q[i]));
    }
    for i in 0..n - 1 {
        let off = -1.0 / (v[i] * v[i + 1] * (q[i + 1] - q[i]));
        inv[(i, i + 1)] = off;
        inv[(i + 1, i)] = off;
    }
    Ok(inv)
}

/// Inverse of `Sigma` usable for any grid size: closed form for `N >= 2`,
/// the scalar reciprocal for `N = 1`.
pub fn precision_matrix(cov: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    if cov.len() == 1 {
        let k = cov.sigma[(0, 0)];
        if k <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!("K(t, t) = {k}")));
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / k));
    }
    tridiagonal_inverse(cov)
}

/// Dense inverse by pivoted LU; the oracle path.
pub fn dense_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sigma
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("LU inverse failed".into()))
}

/// Lower-triangular Cholesky factor `L` with `L L^T = Sigma`.
pub fn cholesky_factor(cov: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    Cholesky::new(cov.sigma.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))
}

/// `Sigma^{-1} x` for a vector, via the closed-form inverse.
pub fn precision_apply(cov: &CovarianceMatrix, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(precision_matrix(cov)? * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brownian_cov(points: &[f64]) -> CovarianceMatrix {
        let b = points.last().unwrap() + 0.5;
        let k = TriangularKernel::brownian(0.5, b).unwrap();
        build_sigma(&k, points).unwrap()
    }

    #[test]
    fn sigma_brownian_values() {
        let cov = brownian_cov(&[1.0, 1.5, 2.0]);
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 1.5, 1.5, 1.0, 1.5, 2.0]);
        assert_abs_diff_eq!(cov.matrix(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn sigma_exponential_values() {
        let k = TriangularKernel::exp_pair(1.0, 1.0, 0.5, 2.5).unwrap();
        let cov = build_sigma(&k, &[1.0, 2.0]).unwrap();
        let e1 = (-1.0f64).exp();
        assert_abs_diff_eq!(cov.matrix()[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.matrix()[(0, 1)], e1, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.matrix()[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sigma_single_point() {
        let k = TriangularKernel::power_pair(2.0, 1.0, 1.0, 2.0).unwrap();
        let cov = build_sigma(&k, &[1.5]).unwrap();
        assert_abs_diff_eq!(cov.matrix()[(0, 0)], 1.5f64.powi(3), epsilon = 1e-15);
    }

    #[test]
    fn unordered_points_rejected() {
        let k = TriangularKernel::brownian(1.0, 2.0).unwrap();
        assert!(build_sigma(&k, &[1.5, 1.2]).is_err());
        assert!(build_sigma(&k, &[1.2, 1.2]).is_err());
    }

    #[test]
    fn tridiagonal_brownian_3x3() {
        let cov = brownian_cov(&[1.0, 1.5, 2.0]);
        let inv = tridiagonal_inverse(&cov).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[3.0, -2.0, 0.0, -2.0, 4.0, -2.0, 0.0, -2.0, 2.0]);
        assert_abs_diff_eq!(&inv, &expected, epsilon = 1e-12);
    }

    #[test]
    fn tridiagonal_brownian_2x2() {
        let cov = brownian_cov(&[1.0, 2.0]);
        let inv = tridiagonal_inverse(&cov).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        assert_abs_diff_eq!(&inv, &expected, epsilon = 1e-12);
    }

    fn random_kernel(rng: &mut ChaCha8Rng) -> TriangularKernel {
        let a = rng.gen_range(0.3..1.5);
        let b = a + rng.gen_range(0.5..2.0);
        match rng.gen_range(0..4) {
            0 => TriangularKernel::brownian(a, b).unwrap(),
            1 => TriangularKernel::exp_pair(
                rng.gen_range(0.3..1.5),
                rng.gen_range(0.3..1.5),
                a,
                b,
            )
            .unwrap(),
            2 => TriangularKernel::power_pair(rng.gen_range(1.5..3.0), rng.gen_range(0.2..1.2), a, b)
                .unwrap(),
            _ => TriangularKernel::affine_pair(rng.gen_range(0.1..1.0), b + rng.gen_range(0.5..2.0), -1.0, a, b)
                .unwrap(),
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, kernel: &TriangularKernel, n: usize) -> Vec<f64> {
        let (a, b) = kernel.domain();
        let mut pts: Vec<f64> = (0..n).map(|_| rng.gen_range(a..b)).collect();
        pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pts.dedup_by(|x, y| (*x - *y).abs() < 1e-4 * (b - a));
        pts
    }

    /// Tridiagonal vs dense LU inverse on 100 random kernels and grids.
    #[test]
    fn tridiagonal_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let kernel = random_kernel(&mut rng);
            let n = rng.gen_range(2..50);
            let pts = random_grid(&mut rng, &kernel, n);
            if pts.len() < 2 {
                continue;
            }
            let cov = build_sigma(&kernel, &pts).unwrap();
            let tri = tridiagonal_inverse(&cov).unwrap();
            let dense = dense_inverse(cov.matrix()).unwrap();
            let scale = dense.amax();
            assert!(
                (&tri - &dense).amax() <= 1e-9 * scale,
                "mismatch {} for {kernel:?} n={}",
                (&tri - &dense).amax() / scale,
                pts.len()
            );
        }
    }

    #[test]
    fn inverse_identity_and_off_tridiagonal_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernel = random_kernel(&mut rng);
        let pts = random_grid(&mut rng, &kernel, 200);
        let cov = build_sigma(&kernel, &pts).unwrap();
        let inv = tridiagonal_inverse(&cov).unwrap();
        let n = cov.len();
        let id = DMatrix::<f64>::identity(n, n);
        assert!((cov.matrix() * &inv - &id).amax() < 1e-10 * inv.amax().max(1.0));
        assert!((&inv * cov.matrix() - &id).amax() < 1e-10 * inv.amax().max(1.0));
        for i in 0..n {
            for j in 0..n {
                if j > i + 1 || i > j + 1 {
                    assert_eq!(inv[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn near_tied_q_guard() {
        let k = TriangularKernel::brownian(0.0_f64.max(1e-9), 1.0).unwrap();
        let pts = [0.2, 0.2 + 1e-14, 0.9];
        // grid is strictly increasing but the q-gap is below the guard
        let cov = build_sigma(&k, &pts).unwrap();
        assert!(matches!(tridiagonal_inverse(&cov), Err(Error::Singular(_))));
    }

    #[test]
    fn cholesky_examples() {
        let k = TriangularKernel::brownian(0.5, 3.0).unwrap();
        let cov = build_sigma(&k, &[1.0]).unwrap();
        assert_abs_diff_eq!(cholesky_factor(&cov).unwrap()[(0, 0)], 1.0, epsilon = 1e-15);

        let cov = build_sigma(&k, &[1.0, 2.0]).unwrap();
        let l = cholesky_factor(&cov).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert_abs_diff_eq!(&l, &expected, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let kernel = random_kernel(&mut rng);
            let pts = random_grid(&mut rng, &kernel, rng.gen_range(2..40));
            if pts.len() < 2 {
                continue;
            }
            let cov = build_sigma(&kernel, &pts).unwrap();
            let l = cholesky_factor(&cov).unwrap();
            let recon = &l * l.transpose();
            assert!((recon - cov.matrix()).amax() <= 1e-10 * cov.matrix().amax());
        }
    }

    /// Positive definiteness via Cholesky success on random grids.
    #[test]
    fn gram_positive_definite_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let kernel = random_kernel(&mut rng);
            let pts = random_grid(&mut rng, &kernel, rng.gen_range(1..30));
            let cov = build_sigma(&kernel, &pts).unwrap();
            assert!(cholesky_factor(&cov).is_ok(), "{kernel:?} {pts:?}");
        }
    }
}
