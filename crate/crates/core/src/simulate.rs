//! Monte Carlo verification of the exact variance formulas and a numeric
//! exact-design baseline.
//!
//! Replicate `r` always draws from the ChaCha stream `(seed, r)`, so serial
//! and parallel evaluation orders produce bit-identical results.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::asymptotic::d_criterion;
use crate::covmat::{build_sigma, cholesky_factor, dense_inverse};
use crate::design::{design_points, MatrixWeightedDesign};
use crate::discretize::{FiniteDesignPlan, MatrixFinitePlan};
use crate::error::{Error, Result};
use crate::estimators::{design_matrix, mwe_c_matrix};
use crate::kernel::TriangularKernel;
use crate::model::RegressionModel;

/// Draws one zero-mean Gaussian vector with covariance `Sigma` on the grid.
pub fn sample_gp(kernel: &TriangularKernel, points: &[f64], seed: u64) -> Result<DVector<f64>> {
    let cov = build_sigma(kernel, points)?;
    let l = cholesky_factor(&cov)?;
    let mut rng = replicate_rng(seed, 0);
    Ok(&l * standard_normal_vector(&mut rng, points.len()))
}

fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// What to re-estimate per replicate. Every target reduces to a linear map
/// `theta_hat = A Y`, which is precomputed once.
#[derive(Debug, Clone)]
pub enum EstimationTarget {
    /// Diagonal-weight WLSE on the given points.
    Wlse { points: Vec<f64>, weights: Vec<f64> },
    /// BLUE on the given points.
    Blue { points: Vec<f64> },
    /// Matrix-weighted estimator.
    Mwe(MatrixWeightedDesign),
}

impl From<&FiniteDesignPlan> for EstimationTarget {
    fn from(plan: &FiniteDesignPlan) -> Self {
        EstimationTarget::Wlse { points: plan.points.clone(), weights: plan.weights.clone() }
    }
}

impl From<&MatrixFinitePlan> for EstimationTarget {
    fn from(plan: &MatrixFinitePlan) -> Self {
        EstimationTarget::Mwe(plan.as_design())
    }
}

impl EstimationTarget {
    pub fn points(&self) -> &[f64] {
        match self {
            EstimationTarget::Wlse { points, .. } => points,
            EstimationTarget::Blue { points } => points,
            EstimationTarget::Mwe(design) => &design.points,
        }
    }

    /// The estimator as `theta_hat = A Y`.
    fn linear_map(
        &self,
        model: &RegressionModel,
        kernel: &TriangularKernel,
    ) -> Result<DMatrix<f64>> {
        let x = design_matrix(model, self.points());
        match self {
            EstimationTarget::Wlse { points, weights } => {
                if weights.len() != points.len() {
                    return Err(Error::InvalidDesign("weights/points length mismatch".into()));
                }
                let w = DMatrix::from_diagonal(&DVector::from_vec(weights.clone()));
                let xtw = x.transpose() * &w;
                let normal = (&xtw * &x)
                    .lu()
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("X^T W X is singular".into()))?;
                Ok(normal * xtw)
            }
            EstimationTarget::Blue { points } => {
                let cov = build_sigma(kernel, points)?;
                let prec = crate::covmat::precision_matrix(&cov)?;
                let xtp = x.transpose() * prec;
                let info = (&xtp * &x)
                    .lu()
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("information matrix is singular".into()))?;
                Ok(info * xtp)
            }
            EstimationTarget::Mwe(design) => {
                let c = mwe_c_matrix(&design.points, &design.weights, model)?;
                let info = (&c * &x)
                    .lu()
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("M = C X is singular".into()))?;
                Ok(info * c)
            }
        }
    }
}

/// Empirical vs analytic covariance of an estimator over seeded replicates.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub replicates: usize,
    pub seed: u64,
    pub estimate_mean: DVector<f64>,
    pub empirical_covariance: DMatrix<f64>,
    pub analytic_covariance: DMatrix<f64>,
    /// Per-entry standard errors of the empirical covariance.
    pub covariance_std_errors: DMatrix<f64>,
    /// Per-entry standard errors of the mean.
    pub mean_std_errors: DVector<f64>,
}

impl SimulationReport {
    /// Largest per-entry deviation measured in standard errors.
    pub fn max_covariance_z(&self) -> f64 {
        let mut z = 0.0f64;
        for i in 0..self.empirical_covariance.nrows() {
            for j in 0..self.empirical_covariance.ncols() {
                let se = self.covariance_std_errors[(i, j)];
                if se > 0.0 {
                    z = z.max(
                        (self.empirical_covariance[(i, j)] - self.analytic_covariance[(i, j)])
                            .abs()
                            / se,
                    );
                }
            }
        }
        z
    }
}

/// Runs the replicated experiment `y = X theta + eps`, re-estimating with
/// the target's linear map, and compares the empirical covariance against
/// the analytic one.
pub fn monte_carlo_variance(
    target: &EstimationTarget,
    model: &RegressionModel,
    kernel: &TriangularKernel,
    theta_true: &DVector<f64>,
    replicates: usize,
    seed: u64,
) -> Result<SimulationReport> {
    if replicates < 1000 {
        return Err(Error::InvalidDesign(format!(
            "need at least 1000 replicates, got {replicates}"
        )));
    }
    if theta_true.len() != model.dimension() {
        return Err(Error::InvalidModel("theta dimension mismatch".into()));
    }
    let points = target.points().to_vec();
    let n = points.len();
    let m = model.dimension();
    let a_map = target.linear_map(model, kernel)?;
    let cov = build_sigma(kernel, &points)?;
    let l = cholesky_factor(&cov)?;
    let analytic = &a_map * cov.matrix() * a_map.transpose();

    let x = design_matrix(model, &points);
    let mean_signal = &x * theta_true;

    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(replicates);
    for rep in 0..replicates {
        let mut rng = replicate_rng(seed, rep as u64);
        let y = &mean_signal + &l * standard_normal_vector(&mut rng, n);
        draws.push(&a_map * y);
    }

    let mut mean = DVector::zeros(m);
    for d in &draws {
        mean += d;
    }
    mean /= replicates as f64;

    let mut cov_emp = DMatrix::zeros(m, m);
    let mut second = DMatrix::zeros(m, m); // running sum of squared products
    for d in &draws {
        let c = d - &mean;
        let outer = &c * c.transpose();
        cov_emp += &outer;
        second += outer.component_mul(&outer);
    }
    cov_emp /= (replicates - 1) as f64;
    // SE of each covariance entry from the empirical variance of the products
    let mut se = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let mean_prod = cov_emp[(i, j)] * (replicates - 1) as f64 / replicates as f64;
            let var_prod = (second[(i, j)] / replicates as f64 - mean_prod * mean_prod).max(0.0);
            se[(i, j)] = (var_prod / replicates as f64).sqrt();
        }
    }
    let mean_se = DVector::from_fn(m, |k, _| (cov_emp[(k, k)] / replicates as f64).sqrt());

    Ok(SimulationReport {
        replicates,
        seed,
        estimate_mean: mean,
        empirical_covariance: cov_emp,
        analytic_covariance: analytic,
        covariance_std_errors: se,
        mean_std_errors: mean_se,
    })
}

// ---------------------------------------------------------------------------
// exact-design baseline
// ---------------------------------------------------------------------------

/// Result of the derivative-free exact-design search.
#[derive(Debug, Clone)]
pub struct ExactDesignSearch {
    pub points: Vec<f64>,
    /// BLUE variance (`m = 1`) or D-criterion of the BLUE covariance.
    pub criterion: f64,
    /// False when every restart hit the iteration cap before settling.
    pub converged: bool,
}

/// BLUE criterion at an arbitrary point set via the dense path; large
/// penalty when the points collapse or the matrices go singular.
fn blue_criterion(model: &RegressionModel, kernel: &TriangularKernel, points: &mut [f64]) -> f64 {
    const PENALTY: f64 = 1e120;
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = kernel.domain();
    let min_gap = 1e-9 * (hi - lo);
    if points.windows(2).any(|w| w[1] - w[0] < min_gap) {
        return PENALTY;
    }
    let cov = match build_sigma(kernel, points) {
        Ok(c) => c,
        Err(_) => return PENALTY,
    };
    let sigma_inv = match dense_inverse(cov.matrix()) {
        Ok(s) => s,
        Err(_) => return PENALTY,
    };
    let x = design_matrix(model, points);
    let info = x.transpose() * sigma_inv * &x;
    match info.lu().try_inverse() {
        Some(cov) => {
            let val =
                if model.dimension() == 1 { cov[(0, 0)] } else { d_criterion(&cov) };
            if val.is_finite() && val > 0.0 {
                val
            } else {
                PENALTY
            }
        }
        None => PENALTY,
    }
}

/// Searches for an exact `n`-point design minimizing the BLUE variance
/// (or its D-criterion) by Nelder-Mead on logit-transformed points, with
/// seeded random restarts. `hint` seeds the first restart, so the result is
/// never worse than the hint design. The optimum is local, not certified
/// global.
pub fn optimize_exact_blue_design(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    n_points: usize,
    restarts: usize,
    seed: u64,
    hint: Option<&[f64]>,
) -> Result<ExactDesignSearch> {
    if n_points < model.dimension() {
        return Err(Error::InvalidDesign(format!(
            "need at least m = {} points, got {n_points}",
            model.dimension()
        )));
    }
    let (a, b) = kernel.domain();
    let to_time = |x: f64| a + (b - a) / (1.0 + (-x).exp());
    let to_logit = |t: f64| {
        let z = ((t - a) / (b - a)).clamp(1e-12, 1.0 - 1e-12);
        (z / (1.0 - z)).ln()
    };
    let objective = |x: &[f64]| -> f64 {
        let mut pts: Vec<f64> = x.iter().map(|&xi| to_time(xi)).collect();
        blue_criterion(model, kernel, &mut pts)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for restart in 0..restarts.max(1) {
        let start: Vec<f64> = if restart == 0 {
            match hint {
                Some(h) if h.len() == n_points => h.iter().map(|&t| to_logit(t)).collect(),
                _ => design_points(kernel, n_points)?.iter().map(|&t| to_logit(t)).collect(),
            }
        } else {
            (0..n_points).map(|_| rng.gen_range(-2.5..2.5)).collect()
        };
        let (x, value, converged) = nelder_mead(&objective, &start, 500 * n_points.max(2));
        let improves = best.as_ref().map(|(_, v, _)| value < *v).unwrap_or(true);
        if improves {
            let mut pts: Vec<f64> = x.iter().map(|&xi| to_time(xi)).collect();
            pts.sort_by(|p, q| p.partial_cmp(q).unwrap());
            best = Some((pts, value, converged));
        } else if converged {
            if let Some((_, _, flag)) = best.as_mut() {
                *flag = *flag || converged;
            }
        }
    }
    let (points, criterion, converged) = best.unwrap();
    Ok(ExactDesignSearch { points, criterion, converged })
}

/// Plain Nelder-Mead (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2). Returns the best vertex, its value and whether the simplex
/// collapsed before the evaluation cap.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64, bool) {
    let n = start.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v = eval(start);
    simplex.push((start.to_vec(), v));
    for i in 0..n {
        let mut x = start.to_vec();
        x[i] += if x[i].abs() > 1.0 { 0.25 * x[i].abs() } else { 0.5 };
        let v = eval(&x);
        simplex.push((x, v));
    }
    let mut converged = false;
    while evals.get() < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        if (f_worst - f_best).abs() <= 1e-12 * (1.0 + f_best.abs()) {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in simplex.iter().take(n) {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let reflect: Vec<f64> =
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| 2.0 * c - w).collect();
        let f_reflect = eval(&reflect);
        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> =
                centroid.iter().zip(&simplex[n].0).map(|(c, w)| 3.0 * c - 2.0 * w).collect();
            let f_expand = eval(&expand);
            simplex[n] = if f_expand < f_reflect { (expand, f_expand) } else { (reflect, f_reflect) };
            continue;
        }
        if f_reflect < simplex[n - 1].1 {
            simplex[n] = (reflect, f_reflect);
            continue;
        }
        let contract: Vec<f64> = if f_reflect < simplex[n].1 {
            centroid.iter().zip(&reflect).map(|(c, r)| 0.5 * (c + r)).collect()
        } else {
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| 0.5 * (c + w)).collect()
        };
        let f_contract = eval(&contract);
        if f_contract < simplex[n].1.min(f_reflect) {
            simplex[n] = (contract, f_contract);
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].0.clone();
        for item in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best.iter().zip(&item.0).map(|(b, x)| 0.5 * (b + x)).collect();
            let v = eval(&x);
            *item = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    (simplex[0].0.clone(), simplex[0].1, converged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sample_gp_replays_bit_identically() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let pts = [1.0, 1.4, 2.0];
        let a = sample_gp(&kernel, &pts, 42).unwrap();
        let b = sample_gp(&kernel, &pts, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_gp(&kernel, &pts, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_gp_variance_and_increments() {
        let kernel = TriangularKernel::brownian(0.5, 2.5).unwrap();
        let pts = [1.0, 2.0];
        let reps = 40_000;
        let (mut var1, mut var_inc) = (0.0, 0.0);
        let cov = build_sigma(&kernel, &pts).unwrap();
        let l = cholesky_factor(&cov).unwrap();
        for rep in 0..reps {
            let mut rng = replicate_rng(4242, rep);
            let eps = &l * standard_normal_vector(&mut rng, 2);
            var1 += eps[0] * eps[0];
            let inc = eps[1] - eps[0];
            var_inc += inc * inc;
        }
        var1 /= reps as f64;
        var_inc /= reps as f64;
        // Var eps(1) = 1, Var(eps(2) - eps(1)) = 1; SE ~ sqrt(2/R) ~ 0.007
        assert_abs_diff_eq!(var1, 1.0, epsilon = 0.03);
        assert_abs_diff_eq!(var_inc, 1.0, epsilon = 0.03);
    }

    #[test]
    fn monte_carlo_blue_variance_matches() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::linear(1.0, 2.0).unwrap();
        let target = EstimationTarget::Blue { points: vec![1.0, 1.5, 2.0] };
        let theta = DVector::from_element(1, 0.7);
        let report =
            monte_carlo_variance(&target, &model, &kernel, &theta, 20_000, 7).unwrap();
        assert_abs_diff_eq!(report.analytic_covariance[(0, 0)], 0.5, epsilon = 1e-12);
        assert!(report.max_covariance_z() < 3.0, "z = {}", report.max_covariance_z());
        // unbiasedness within 3 SE
        assert!((report.estimate_mean[0] - 0.7).abs() < 3.0 * report.mean_std_errors[0]);
    }

    #[test]
    fn monte_carlo_replays() {
        let kernel = TriangularKernel::exp_pair(1.0, 1.0, 1.0, 2.0).unwrap();
        let model = RegressionModel::linear(1.0, 2.0).unwrap();
        let target = EstimationTarget::Blue { points: vec![1.0, 1.3, 1.9] };
        let theta = DVector::from_element(1, 0.0);
        let a = monte_carlo_variance(&target, &model, &kernel, &theta, 2000, 5).unwrap();
        let b = monte_carlo_variance(&target, &model, &kernel, &theta, 2000, 5).unwrap();
        assert_eq!(a.empirical_covariance, b.empirical_covariance);
        assert_eq!(a.estimate_mean, b.estimate_mean);
        // theta = 0: mean within 3 SE of zero
        assert!(a.estimate_mean[0].abs() < 3.0 * a.mean_std_errors[0]);
    }

    #[test]
    fn monte_carlo_se_scaling() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::quadratic(1.0, 1.0, 2.0).unwrap();
        let target = EstimationTarget::Blue { points: vec![1.0, 1.25, 1.5, 2.0] };
        let theta = DVector::from_element(1, 1.0);
        let small = monte_carlo_variance(&target, &model, &kernel, &theta, 5000, 11).unwrap();
        let large = monte_carlo_variance(&target, &model, &kernel, &theta, 20_000, 11).unwrap();
        let ratio = small.covariance_std_errors[(0, 0)] / large.covariance_std_errors[(0, 0)];
        // quadrupling reps halves the SE, within 20%
        assert!((ratio - 2.0).abs() < 0.4, "ratio = {ratio}");
    }

    #[test]
    fn rejects_tiny_replicate_counts() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::linear(1.0, 2.0).unwrap();
        let target = EstimationTarget::Blue { points: vec![1.5] };
        let theta = DVector::from_element(1, 0.0);
        assert!(monte_carlo_variance(&target, &model, &kernel, &theta, 10, 1).is_err());
    }

    #[test]
    fn optimizer_single_point_linear_goes_to_b() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::linear(1.0, 2.0).unwrap();
        let search = optimize_exact_blue_design(&model, &kernel, 1, 6, 3, None).unwrap();
        assert_abs_diff_eq!(search.points[0], 2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(search.criterion, 0.5, epsilon = 1e-5);
    }

    #[test]
    fn optimizer_location_model_reaches_a() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::location(1.0, 2.0).unwrap();
        let search = optimize_exact_blue_design(&model, &kernel, 3, 6, 9, None).unwrap();
        assert_abs_diff_eq!(search.points[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(search.criterion, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn optimizer_never_worse_than_hint() {
        let kernel = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::quadratic(1.0, 1.0, 2.0).unwrap();
        let hint = [1.0, 1.24, 1.56, 2.0];
        let hint_var = crate::estimators::blue_variance_scalar(&model, &kernel, &hint).unwrap();
        let search =
            optimize_exact_blue_design(&model, &kernel, 4, 4, 17, Some(&hint)).unwrap();
        assert!(search.criterion <= hint_var + 1e-12);
        assert!(search.criterion <= 0.0756);
    }
}
