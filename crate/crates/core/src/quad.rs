//! Composite Gauss-Legendre quadrature with adaptive panel halving.
//!
//! A single 64-node panel is exact for polynomials up to degree 127; panels
//! are split until two refinement levels agree, so merely piecewise-smooth
//! integrands (absolute values of signed densities, kernel sections) still
//! converge. Summation order is deterministic: left subinterval before right.

use nalgebra::DMatrix;
use once_cell::sync::Lazy;

use crate::error::{Error, Result};

const PANEL_NODES: usize = 64;
const MAX_DEPTH: usize = 28;

/// Default absolute tolerance for interval subdivision.
pub const DEFAULT_TOL: f64 = 1e-11;

static GL64: Lazy<Vec<(f64, f64)>> = Lazy::new(|| legendre_rule(PANEL_NODES));

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1],
/// computed by Newton iteration on the Legendre recurrence.
fn legendre_rule(n: usize) -> Vec<(f64, f64)> {
    let mut rule = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_eval(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_eval(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((x, w));
    }
    rule.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    rule
}

/// Value and derivative of the Legendre polynomial P_n at x.
fn legendre_eval(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn panel<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for &(x, w) in GL64.iter() {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Adaptive integral of `f` over `[a, b]` to absolute tolerance `tol`
/// (interpreted per subinterval, scaled by its share of the domain).
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let whole = panel(&mut f, a, b);
    adaptive(&mut f, a, b, whole, tol, 0)
}

fn adaptive<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let mid = 0.5 * (a + b);
    let left = panel(f, a, mid);
    let right = panel(f, mid, b);
    let refined = left + right;
    if (refined - whole).abs() <= tol.max(1e-14 * refined.abs()) {
        return Ok(refined);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::QuadratureFailure(format!(
            "no convergence on [{a}, {b}] after {MAX_DEPTH} bisections"
        )));
    }
    let l = adaptive(f, a, mid, left, 0.5 * tol, depth + 1)?;
    let r = adaptive(f, mid, b, right, 0.5 * tol, depth + 1)?;
    Ok(l + r)
}

/// Adaptive integral of a matrix-valued integrand, refined on the max norm.
pub fn integrate_matrix<F: FnMut(f64) -> DMatrix<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<DMatrix<f64>> {
    if a == b {
        let probe = f(a);
        return Ok(DMatrix::zeros(probe.nrows(), probe.ncols()));
    }
    let whole = panel_matrix(&mut f, a, b);
    adaptive_matrix(&mut f, a, b, whole, tol, 0)
}

fn panel_matrix<F: FnMut(f64) -> DMatrix<f64>>(f: &mut F, a: f64, b: f64) -> DMatrix<f64> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc: Option<DMatrix<f64>> = None;
    for &(x, w) in GL64.iter() {
        let v = f(mid + half * x) * w;
        acc = Some(match acc {
            None => v,
            Some(s) => s + v,
        });
    }
    acc.unwrap() * half
}

fn adaptive_matrix<F: FnMut(f64) -> DMatrix<f64>>(
    f: &mut F,
    a: f64,
    b: f64,
    whole: DMatrix<f64>,
    tol: f64,
    depth: usize,
) -> Result<DMatrix<f64>> {
    let mid = 0.5 * (a + b);
    let left = panel_matrix(f, a, mid);
    let right = panel_matrix(f, mid, b);
    let refined = &left + &right;
    let err = (&refined - &whole).amax();
    if err <= tol.max(1e-14 * refined.amax()) {
        return Ok(refined);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::QuadratureFailure(format!(
            "matrix integrand: no convergence on [{a}, {b}]"
        )));
    }
    let l = adaptive_matrix(f, a, mid, left, 0.5 * tol, depth + 1)?;
    let r = adaptive_matrix(f, mid, b, right, 0.5 * tol, depth + 1)?;
    Ok(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomial_is_exact_on_one_panel() {
        let v = integrate(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(v, 4.0 - 4.0 + 2.0, epsilon = 1e-13);
    }

    #[test]
    fn kinked_integrand_converges() {
        // |sin| over a full period, kink at pi
        let v = integrate(|x| x.sin().abs(), 0.0, 2.0 * std::f64::consts::PI, 1e-12).unwrap();
        assert_abs_diff_eq!(v, 4.0, epsilon = 1e-10);
    }

    #[test]
    fn runge_function() {
        let v = integrate(|x| 1.0 / (1.0 + 25.0 * x * x), -1.0, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(v, 2.0 * (5.0f64).atan() / 5.0, epsilon = 1e-11);
    }

    #[test]
    fn matrix_integrand_matches_scalar() {
        let m = integrate_matrix(
            |x| DMatrix::from_row_slice(1, 2, &[x.exp(), x]),
            0.0,
            1.0,
            1e-12,
        )
        .unwrap();
        assert_abs_diff_eq!(m[(0, 0)], std::f64::consts::E - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(0, 1)], 0.5, epsilon = 1e-13);
    }
}
