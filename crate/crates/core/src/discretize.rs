//! Finite `(N+2)`-point plans approximating a limiting design.
//!
//! The endpoint masses are kept as explicit weights while the interior
//! signed density is approximated by `N` points with equal absolute mass:
//! quantiles `t_i = F^{-1}(i / (N+1))` of `phi = |p| / Integral |p|`, each
//! carrying `sign(p(t_i))`. The WLSE weight matrix is
//! `W_N = diag(N P_a, s_1 P, ..., s_N P, N P_b)` with `P = 1 - |P_a| - |P_b|`.
//! Matrix designs are handled per estimation direction, with deterministic
//! thinning when the component densities are not proportional.

use nalgebra::{DMatrix, DVector};

use crate::asymptotic::{sign_change_breakpoints, LimitingDesign, MatrixLimitingDesign, Representation};
use crate::covmat::build_sigma;
use crate::design::MatrixWeightedDesign;
use crate::error::{Error, Result};
use crate::estimators::{design_matrix, mwe_c_matrix, mwe_covariance, wlse_covariance};
use crate::kernel::ScalarFn;
use crate::model::RegressionModel;
use crate::kernel::TriangularKernel;
use crate::quad;

use std::sync::Arc;

const DENSITY_GRID: usize = 2048;

/// Practical plan: `{a, t_1, ..., t_N, b}` with the diagonal of `W_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDesignPlan {
    /// All `N + 2` observation points including both endpoints.
    pub points: Vec<f64>,
    /// Diagonal of `W_N`, aligned with `points`.
    pub weights: Vec<f64>,
    /// Interior signs `s_i = sign(p(t_i))` (0 on the degenerate path).
    pub signs: Vec<i8>,
    pub mass_a: f64,
    pub mass_b: f64,
    /// Interior budget `P = 1 - |P_a| - |P_b|`.
    pub interior_mass: f64,
}

impl FiniteDesignPlan {
    pub fn interior_points(&self) -> &[f64] {
        &self.points[1..self.points.len() - 1]
    }

    pub fn n_interior(&self) -> usize {
        self.points.len() - 2
    }
}

/// Matrix-weighted plan in the diagonal representation.
#[derive(Debug, Clone)]
pub struct MatrixFinitePlan {
    /// All `N + 2` observation points including both endpoints.
    pub points: Vec<f64>,
    /// Endpoint matrix masses (unscaled; `N` is applied in `C`).
    pub mass_a: DMatrix<f64>,
    pub mass_b: DMatrix<f64>,
    /// Interior sign matrix entries `s_{j,k}` (`N x m`).
    pub signs: Vec<Vec<i8>>,
    /// Diagonal of `P`: `P_kk = N Integral |O_kk| / sum_j |s_{j,k}|`.
    pub p_diag: DVector<f64>,
}

impl MatrixFinitePlan {
    pub fn dimension(&self) -> usize {
        self.p_diag.len()
    }

    pub fn n_interior(&self) -> usize {
        self.points.len() - 2
    }

    /// Effective matrix weight at plan index `j` (including `N` and `P`
    /// scalings), i.e. the matrix whose product with `f(t_j)` is the `C`
    /// column.
    pub fn effective_weight(&self, j: usize) -> DMatrix<f64> {
        let n = self.n_interior() as f64;
        let m = self.dimension();
        if j == 0 {
            return &self.mass_a * n.max(1.0);
        }
        if j == self.points.len() - 1 {
            return &self.mass_b * n.max(1.0);
        }
        let mut diag = DVector::zeros(m);
        for k in 0..m {
            diag[k] = self.signs[j - 1][k] as f64 * self.p_diag[k];
        }
        DMatrix::from_diagonal(&diag)
    }

    /// The plan as a plain matrix-weighted design (effective weights).
    pub fn as_design(&self) -> MatrixWeightedDesign {
        let weights = (0..self.points.len()).map(|j| self.effective_weight(j)).collect();
        MatrixWeightedDesign { points: self.points.clone(), weights }
    }
}

/// Piecewise cumulative of a nonnegative density, supporting leftmost
/// quantile inversion.
struct DensityCdf {
    phi: ScalarFn,
    breaks: Vec<f64>,
    cum: Vec<f64>,
    total: f64,
}

impl DensityCdf {
    fn new(phi: ScalarFn, breaks: Vec<f64>) -> Result<Self> {
        let mut cum = vec![0.0];
        let mut total = 0.0;
        for w in breaks.windows(2) {
            total += quad::integrate(|t| phi(t), w[0], w[1], quad::DEFAULT_TOL)?;
            cum.push(total);
        }
        Ok(DensityCdf { phi, breaks, cum, total })
    }

    fn eval(&self, t: f64) -> Result<f64> {
        if t <= self.breaks[0] {
            return Ok(0.0);
        }
        if t >= *self.breaks.last().unwrap() {
            return Ok(self.total);
        }
        let k = self.breaks.partition_point(|&x| x <= t) - 1;
        Ok(self.cum[k] + quad::integrate(|x| (self.phi)(x), self.breaks[k], t, quad::DEFAULT_TOL)?)
    }

    /// Smallest `t` with `F(t) >= z * total`.
    fn quantile(&self, z: f64) -> Result<f64> {
        let target = z * self.total;
        let (a, b) = (self.breaks[0], *self.breaks.last().unwrap());
        let (mut lo, mut hi) = (a, b);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid)? >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

/// `N` strictly increasing interior quantile points `F^{-1}(i / (N+1))` of a
/// nonnegative density on `(a, b)`; the density need not be pre-normalized.
/// When the inverse is set-valued the smallest element is taken.
pub fn quantile_points(
    phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    domain: (f64, f64),
    n: usize,
) -> Result<Vec<f64>> {
    let phi: ScalarFn = Arc::new(phi);
    quantile_points_with_breaks(&phi, vec![domain.0, domain.1], domain, n)
}

fn quantile_points_with_breaks(
    phi: &ScalarFn,
    mut breaks: Vec<f64>,
    domain: (f64, f64),
    n: usize,
) -> Result<Vec<f64>> {
    let (a, b) = domain;
    breaks.retain(|&t| t >= a && t <= b);
    if breaks.first() != Some(&a) {
        breaks.insert(0, a);
    }
    if breaks.last() != Some(&b) {
        breaks.push(b);
    }
    // negative probe guards misuse
    for i in 0..=64 {
        let t = a + (b - a) * i as f64 / 64.0;
        if phi(t) < 0.0 {
            return Err(Error::InvalidDesign(format!("density is negative at t = {t}")));
        }
    }
    let cdf = DensityCdf::new(Arc::clone(phi), breaks)?;
    if cdf.total <= 0.0 {
        return Err(Error::InvalidDesign(
            "density integrates to zero; use the degenerate (atoms-only) path".into(),
        ));
    }
    let mut pts = Vec::with_capacity(n);
    for i in 1..=n {
        pts.push(cdf.quantile(i as f64 / (n + 1) as f64)?);
    }
    for w in pts.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidDesign(
                "quantile points collide; observation points cannot repeat".into(),
            ));
        }
    }
    Ok(pts)
}

/// Builds the `(N+2)`-point plan from a normalized limiting design.
///
/// A density that is identically zero yields the degenerate path: the `N`
/// interior observations are kept (equispaced) but weighted zero, so the
/// plan reduces to the endpoint atoms.
pub fn finite_plan(limiting: &LimitingDesign, n: usize) -> Result<FiniteDesignPlan> {
    let (a, b) = limiting.domain;
    let total = limiting.total_mass()?;
    if total <= 0.0 {
        return Err(Error::InvalidDesign("limiting design is identically zero".into()));
    }
    // renormalize defensively so P = 1 - |P_a| - |P_b| holds exactly
    let mass_a = limiting.mass_a / total;
    let mass_b = limiting.mass_b / total;
    let interior = 1.0 - mass_a.abs() - mass_b.abs();
    let p = Arc::clone(&limiting.density);

    let degenerate = interior <= 1e-12;
    let (points_in, signs): (Vec<f64>, Vec<i8>) = if degenerate {
        let pts = (1..=n).map(|i| a + (b - a) * i as f64 / (n + 1) as f64).collect();
        (pts, vec![0; n])
    } else {
        let breaks = sign_change_breakpoints(&limiting.density, limiting.domain);
        let p_in = Arc::clone(&limiting.density);
        let phi: ScalarFn = Arc::new(move |t| p_in(t).abs());
        let pts = quantile_points_with_breaks(&phi, breaks, limiting.domain, n)?;
        let signs = pts.iter().map(|&t| if p(t) >= 0.0 { 1i8 } else { -1 }).collect();
        (pts, signs)
    };

    let mut points = Vec::with_capacity(n + 2);
    points.push(a);
    points.extend_from_slice(&points_in);
    points.push(b);
    for w in points.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidDesign("plan points are not strictly increasing".into()));
        }
    }
    let interior_mass = if degenerate { 0.0 } else { interior };
    let scale = (n as f64).max(1.0);
    let mut weights = Vec::with_capacity(n + 2);
    weights.push(scale * mass_a);
    for &s in &signs {
        weights.push(s as f64 * interior_mass);
    }
    weights.push(scale * mass_b);
    Ok(FiniteDesignPlan { points, weights, signs, mass_a, mass_b, interior_mass })
}

/// Exact WLSE variance of the plan for the one-parameter model.
pub fn plan_variance(
    plan: &FiniteDesignPlan,
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<f64> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("scalar plan variance needs m = 1".into()));
    }
    let x = design_matrix(model, &plan.points);
    let sigma = build_sigma(kernel, &plan.points)?;
    let w = DMatrix::from_diagonal(&DVector::from_vec(plan.weights.clone()));
    Ok(wlse_covariance(&x, &w, sigma.matrix())?[(0, 0)])
}

/// Exact MWE covariance of a matrix plan.
pub fn matrix_plan_covariance(
    plan: &MatrixFinitePlan,
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<DMatrix<f64>> {
    let design = plan.as_design();
    let sigma = build_sigma(kernel, &design.points)?;
    let c = mwe_c_matrix(&design.points, &design.weights, model)?;
    mwe_covariance(&c, &design.points, model, sigma.matrix())
}

/// Builds the matrix plan from a diagonal-representation limiting design.
///
/// If every nonzero component density is proportional to every other, the
/// support comes from the quantiles of the shared density and the signs are
/// all `±1`; otherwise the support is equidistant and each direction is
/// thinned deterministically (error diffusion on the acceptance ratio
/// `|O_kk(t_j)| / max_t |O_kk|`, accumulator seeded at 1/2).
pub fn matrix_finite_plan(limiting: &MatrixLimitingDesign, n: usize) -> Result<MatrixFinitePlan> {
    if limiting.representation != Representation::Diagonal {
        return Err(Error::Unsupported(
            "matrix plans are built from the diagonal representation".into(),
        ));
    }
    let (a, b) = limiting.domain;
    let m = limiting.dimension;

    // per-component density closures and their sup norms
    let comps: Vec<ScalarFn> = (0..m)
        .map(|k| {
            let dens = Arc::clone(&limiting.density);
            let f: ScalarFn = Arc::new(move |t| dens(t)[(k, k)]);
            f
        })
        .collect();
    let mut sup = vec![0.0f64; m];
    for i in 0..=DENSITY_GRID {
        let t = a + (b - a) * i as f64 / DENSITY_GRID as f64;
        for k in 0..m {
            sup[k] = sup[k].max(comps[k](t).abs());
        }
    }
    let overall = sup.iter().cloned().fold(0.0, f64::max);
    let active: Vec<usize> =
        (0..m).filter(|&k| sup[k] > 1e-12 * overall.max(1e-300) && sup[k] > 0.0).collect();

    // abs integrals per component
    let mut abs_integral = vec![0.0f64; m];
    for &k in &active {
        let breaks = sign_change_breakpoints(&comps[k], (a, b));
        let ck = Arc::clone(&comps[k]);
        for w in breaks.windows(2) {
            abs_integral[k] +=
                quad::integrate(|t| ck(t).abs(), w[0], w[1], quad::DEFAULT_TOL)?.abs();
        }
    }

    let proportional = active.len() <= 1
        || {
            let k0 = active[0];
            let mut ok = true;
            'outer: for &k in &active[1..] {
                let mut ratio: Option<f64> = None;
                for i in 0..=256 {
                    let t = a + (b - a) * i as f64 / 256.0;
                    let (x, y) = (comps[k](t), comps[k0](t));
                    if y.abs() > 1e-9 * sup[k0] {
                        let r = x / y;
                        match ratio {
                            None => ratio = Some(r),
                            Some(r0) => {
                                if (r - r0).abs() > 1e-9 * r0.abs().max(sup[k] / sup[k0]) {
                                    ok = false;
                                    break 'outer;
                                }
                            }
                        }
                    } else if x.abs() > 1e-9 * sup[k] {
                        ok = false; // one vanishes where the other does not
                        break 'outer;
                    }
                }
            }
            ok
        };

    let (points_in, signs) = if active.is_empty() {
        // atoms-only plan; interior points unused
        let pts: Vec<f64> = (1..=n).map(|i| a + (b - a) * i as f64 / (n + 1) as f64).collect();
        (pts, vec![vec![0i8; m]; n])
    } else if proportional {
        let l = active[0];
        let cl = Arc::clone(&comps[l]);
        let phi: ScalarFn = Arc::new(move |t| cl(t).abs());
        let breaks = sign_change_breakpoints(&comps[l], (a, b));
        let pts = quantile_points_with_breaks(&phi, breaks, (a, b), n)?;
        let signs = pts
            .iter()
            .map(|&t| {
                (0..m)
                    .map(|k| {
                        if active.contains(&k) {
                            if comps[k](t) >= 0.0 {
                                1i8
                            } else {
                                -1
                            }
                        } else {
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        (pts, signs)
    } else {
        let pts: Vec<f64> = (1..=n).map(|i| a + (b - a) * i as f64 / (n + 1) as f64).collect();
        let mut signs = vec![vec![0i8; m]; n];
        for &k in &active {
            let mut acc = 0.5;
            for (j, &t) in pts.iter().enumerate() {
                acc += comps[k](t).abs() / sup[k];
                if acc >= 1.0 {
                    signs[j][k] = if comps[k](t) >= 0.0 { 1 } else { -1 };
                    acc -= 1.0;
                }
            }
            if signs.iter().all(|row| row[k] == 0) {
                // never fired: keep the strongest point so the direction is observed
                let (jmax, _) = pts
                    .iter()
                    .enumerate()
                    .max_by(|(_, x), (_, y)| {
                        comps[k](**x).abs().partial_cmp(&comps[k](**y).abs()).unwrap()
                    })
                    .unwrap();
                signs[jmax][k] = if comps[k](pts[jmax]) >= 0.0 { 1 } else { -1 };
            }
        }
        (pts, signs)
    };

    let mut p_diag = DVector::zeros(m);
    for &k in &active {
        let count: f64 = signs.iter().map(|row| row[k].unsigned_abs() as f64).sum();
        if count > 0.0 {
            p_diag[k] = n as f64 * abs_integral[k] / count;
        }
    }

    let mut points = Vec::with_capacity(n + 2);
    points.push(a);
    points.extend_from_slice(&points_in);
    points.push(b);
    Ok(MatrixFinitePlan {
        points,
        mass_a: limiting.mass_a.clone(),
        mass_b: limiting.mass_b.clone(),
        signs,
        p_diag,
    })
}

// ---------------------------------------------------------------------------
// CSV serialization
// ---------------------------------------------------------------------------

fn fmt_sig(x: f64) -> String {
    format!("{x:.11e}")
}

/// Scalar plan as CSV with columns `t, w`.
pub fn write_plan_csv(plan: &FiniteDesignPlan) -> String {
    let mut out = String::from("t,w\n");
    for (t, w) in plan.points.iter().zip(&plan.weights) {
        out.push_str(&format!("{},{}\n", fmt_sig(*t), fmt_sig(*w)));
    }
    out
}

/// Rebuilds a scalar plan from `t, w` CSV.
pub fn read_plan_csv(text: &str) -> Result<FiniteDesignPlan> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('t')) {
            continue;
        }
        let mut it = line.split(',');
        let t: f64 = parse_field(it.next(), i)?;
        let w: f64 = parse_field(it.next(), i)?;
        points.push(t);
        weights.push(w);
    }
    if points.len() < 2 {
        return Err(Error::InvalidDesign("plan needs at least the two endpoints".into()));
    }
    let n = points.len() - 2;
    let scale = (n as f64).max(1.0);
    let mass_a = weights[0] / scale;
    let mass_b = weights[points.len() - 1] / scale;
    let signs: Vec<i8> =
        weights[1..points.len() - 1].iter().map(|w| w.signum() as i8).collect();
    let interior_mass =
        weights[1..points.len() - 1].iter().map(|w| w.abs()).fold(0.0, f64::max);
    Ok(FiniteDesignPlan { points, weights, signs, mass_a, mass_b, interior_mass })
}

/// Matrix plan as CSV: columns `t` then the effective `m x m` weight in
/// row-major order.
pub fn write_matrix_plan_csv(plan: &MatrixFinitePlan) -> String {
    let m = plan.dimension();
    let mut header = String::from("t");
    for r in 0..m {
        for c in 0..m {
            header.push_str(&format!(",o{}{}", r + 1, c + 1));
        }
    }
    let mut out = header + "\n";
    for (j, t) in plan.points.iter().enumerate() {
        let o = plan.effective_weight(j);
        let mut row = fmt_sig(*t);
        for r in 0..m {
            for c in 0..m {
                row.push(',');
                row.push_str(&fmt_sig(o[(r, c)]));
            }
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Rebuilds a matrix plan from CSV as a plain matrix-weighted design.
pub fn read_matrix_plan_csv(text: &str) -> Result<MatrixWeightedDesign> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('t')) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let m2 = fields.len() - 1;
        let m = (m2 as f64).sqrt().round() as usize;
        if m * m != m2 || m == 0 {
            return Err(Error::InvalidDesign(format!(
                "row {i}: {m2} weight entries do not form a square matrix"
            )));
        }
        let t: f64 = parse_field(fields.first().copied(), i)?;
        let mut o = DMatrix::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                o[(r, c)] = parse_field(fields.get(1 + r * m + c).copied(), i)?;
            }
        }
        points.push(t);
        weights.push(o);
    }
    if points.is_empty() {
        return Err(Error::InvalidDesign("empty matrix plan".into()));
    }
    Ok(MatrixWeightedDesign { points, weights })
}

fn parse_field(field: Option<&str>, line: usize) -> Result<f64> {
    field
        .ok_or_else(|| Error::InvalidDesign(format!("line {line}: missing field")))?
        .trim()
        .parse()
        .map_err(|e| Error::InvalidDesign(format!("line {line}: {e}")))
}
