//! Limiting optimal designs and the continuous-time optimum.
//!
//! As the grid `t_{i,N} = Q^{-1}((i - 1/2) / N)` densifies, the optimal
//! signed weights converge to a signed measure with masses at the interval
//! endpoints plus a signed density inside:
//!
//! ```text
//! P_a = c [f(a) u'(a)/u(a) - f'(a)] / (f(a) v(a)^2 q'(a))
//! P_b = c h'(b) / (f(b) v(b) q'(b))
//! p(t) = -c [h'(t) / q'(t)]' / (f(t) v(t)),     h = f / v
//! ```
//!
//! This measure minimizes the continuous-time variance functional, whose
//! minimum - the BLUE variance for observing the whole trajectory - is
//!
//! ```text
//! D* = [ h(a)^2 / q(a) + Integral_a^b h'(t)^2 / q'(t) dt ]^{-1}
//! ```
//!
//! (the `s = q(t)` substitution of the time-changed form). Multi-parameter
//! models get the same structure componentwise, with one-column or diagonal
//! matrix weights, and `D* = M^{-1}` for the matrix analogue `M` of the
//! bracket above. Designs move between kernels by the time-space transform:
//! masses scale by `alpha^2`, densities pick up the time-change Jacobian.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{DoobMap, ScalarFn, TriangularKernel};
use crate::model::RegressionModel;
use crate::quad;

const GRID: usize = 1024;

/// Signed measure `P_a delta_a + P_b delta_b + p(t) dt` on `[a, b]`.
///
/// Also used for the BLUE measure `mu* = f xi**`, which has the same shape.
#[derive(Clone)]
pub struct LimitingDesign {
    pub mass_a: f64,
    pub mass_b: f64,
    pub density: ScalarFn,
    pub domain: (f64, f64),
    /// Scale applied to the `c = 1` construction (display bookkeeping).
    pub c: f64,
}

impl std::fmt::Debug for LimitingDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "LimitingDesign(P_a={}, P_b={}, domain=[{}, {}])",
            self.mass_a, self.mass_b, self.domain.0, self.domain.1
        )
    }
}

impl LimitingDesign {
    pub fn density_at(&self, t: f64) -> f64 {
        (self.density)(t)
    }

    /// `|P_a| + |P_b| + Integral |p|`.
    pub fn total_mass(&self) -> Result<f64> {
        let breaks = sign_change_breakpoints(&self.density, self.domain);
        let mut total = self.mass_a.abs() + self.mass_b.abs();
        let p = Arc::clone(&self.density);
        for w in breaks.windows(2) {
            total += quad::integrate(|t| p(t).abs(), w[0], w[1], quad::DEFAULT_TOL)?.abs();
        }
        Ok(total)
    }

    /// Evenly spaced `(t, p(t))` samples for reporting.
    pub fn density_samples(&self, n: usize) -> Vec<(f64, f64)> {
        let (a, b) = self.domain;
        (0..n)
            .map(|i| {
                let t = a + (b - a) * (i as f64 + 0.5) / n as f64;
                (t, self.density_at(t))
            })
            .collect()
    }
}

/// Matrix weight layout produced by the multi-parameter constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// `O = omega e_1^T`: only the first column is populated.
    OneColumn,
    /// Diagonal matrices throughout.
    Diagonal,
}

/// Matrix-weighted limiting design `O_a delta_a + O_b delta_b + O(t) dt`.
#[derive(Clone)]
pub struct MatrixLimitingDesign {
    pub mass_a: DMatrix<f64>,
    pub mass_b: DMatrix<f64>,
    pub density: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
    pub representation: Representation,
    pub dimension: usize,
    pub domain: (f64, f64),
}

impl std::fmt::Debug for MatrixLimitingDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "MatrixLimitingDesign(m={}, {:?}, domain=[{}, {}])",
            self.dimension, self.representation, self.domain.0, self.domain.1
        )
    }
}

impl MatrixLimitingDesign {
    pub fn density_at(&self, t: f64) -> DMatrix<f64> {
        (self.density)(t)
    }
}

// ---------------------------------------------------------------------------
// scalar limiting designs
// ---------------------------------------------------------------------------

fn check_regularity(model: &RegressionModel, kernel: &TriangularKernel) -> Result<()> {
    model.check_same_domain(kernel)?;
    let (a, b) = kernel.domain();
    for i in 0..=GRID {
        let t = a + (b - a) * i as f64 / GRID as f64;
        if kernel.dq(t) <= 0.0 {
            return Err(Error::InvalidKernel(format!("q'({t}) <= 0")));
        }
        if kernel.q(t) <= 0.0 {
            return Err(Error::InvalidKernel(format!("q({t}) <= 0")));
        }
    }
    Ok(())
}

fn check_scalar_positive(model: &RegressionModel, kernel: &TriangularKernel) -> Result<()> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("scalar limiting design needs m = 1".into()));
    }
    let (a, b) = kernel.domain();
    for i in 0..=GRID {
        let t = a + (b - a) * i as f64 / GRID as f64;
        if model.scalar(t) <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "f({t}) <= 0: sign-changing or vanishing f is not supported in the scalar path"
            )));
        }
    }
    Ok(())
}

/// Scalar mass/density formulas evaluated at `c = 1`, componentwise over the
/// model (component `j` uses `f_j`). Returns `(mass_a, mass_b, density)`
/// vectors/closure.
fn limit_parts(
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> (DVector<f64>, DVector<f64>, Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>) {
    let (a, b) = kernel.domain();
    let m = model.dimension();

    let fa = model.eval(a);
    let dfa = model.deriv1(a);
    let va = kernel.v(a);
    let dqa = kernel.dq(a);
    let ua = kernel.u(a);
    let dua = kernel.du(a);
    let mut mass_a = DVector::zeros(m);
    for j in 0..m {
        mass_a[j] = (fa[j] * dua / ua - dfa[j]) / (fa[j] * va * va * dqa);
    }

    let fb = model.eval(b);
    let hb1 = model.h_d1(kernel, b);
    let vb = kernel.v(b);
    let dqb = kernel.dq(b);
    let mut mass_b = DVector::zeros(m);
    for j in 0..m {
        mass_b[j] = hb1[j] / (fb[j] * vb * dqb);
    }

    let model_c = model.clone();
    let kernel_c = kernel.clone();
    let density = move |t: f64| -> DVector<f64> {
        let f = model_c.eval(t);
        let h1 = model_c.h_d1(&kernel_c, t);
        let h2 = model_c.h_d2(&kernel_c, t);
        let dq = kernel_c.dq(t);
        let d2q = kernel_c.d2q(t);
        let v = kernel_c.v(t);
        // [h'/q']' = (h'' q' - h' q'') / q'^2
        let mut out = DVector::zeros(model_c.dimension());
        for j in 0..model_c.dimension() {
            out[j] = -(h2[j] * dq - h1[j] * d2q) / (dq * dq) / (f[j] * v);
        }
        out
    };
    (mass_a, mass_b, Arc::new(density))
}

/// Limiting design at `c = 1`, i.e. the raw mass/density formulas. Used by
/// the table fixtures and as the seed for normalization.
pub fn limiting_design_raw(
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<LimitingDesign> {
    check_scalar_positive(model, kernel)?;
    check_regularity(model, kernel)?;
    let (mass_a, mass_b, density) = limit_parts(model, kernel);
    Ok(LimitingDesign {
        mass_a: mass_a[0],
        mass_b: mass_b[0],
        density: Arc::new(move |t| density(t)[0]),
        domain: kernel.domain(),
        c: 1.0,
    })
}

/// Canonically normalized limiting design: total mass one, overall sign
/// chosen so the density is predominantly positive (falling back to the
/// endpoint masses when the density vanishes identically).
pub fn limiting_design(
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<LimitingDesign> {
    let raw = limiting_design_raw(model, kernel)?;
    normalize(raw)
}

fn normalize(raw: LimitingDesign) -> Result<LimitingDesign> {
    let (a, b) = raw.domain;
    let total = raw.total_mass()?;
    if total <= 0.0 {
        return Err(Error::InvalidDesign("limiting design is identically zero".into()));
    }
    let p = Arc::clone(&raw.density);
    let signed = quad::integrate(|t| p(t), a, b, quad::DEFAULT_TOL)?;
    let sign = if signed.abs() > 1e-10 * total {
        signed.signum()
    } else if raw.mass_b.abs() > 1e-12 * total {
        raw.mass_b.signum()
    } else {
        raw.mass_a.signum()
    };
    let scale = sign / total;
    let p2 = Arc::clone(&raw.density);
    Ok(LimitingDesign {
        mass_a: raw.mass_a * scale,
        mass_b: raw.mass_b * scale,
        density: Arc::new(move |t| p2(t) * scale),
        domain: raw.domain,
        c: raw.c * scale,
    })
}

/// Fast path for Brownian motion on `[a, b]`, `0 < a`:
/// `P_a = c (f(a) - a f'(a)) / (a f(a))`, `P_b = c f'(b) / f(b)`,
/// `p = -c f'' / f`. Agrees with the general construction.
pub fn brownian_limiting_design(model: &RegressionModel) -> Result<LimitingDesign> {
    let (a, b) = model.domain();
    if a <= 0.0 {
        return Err(Error::InvalidKernel(format!("Brownian design needs a > 0, got {a}")));
    }
    let kernel = TriangularKernel::brownian(a, b)?;
    check_scalar_positive(model, &kernel)?;
    let mass_a = (model.scalar(a) - model.scalar_d1(a) * a) / (a * model.scalar(a));
    let mass_b = model.scalar_d1(b) / model.scalar(b);
    let m = model.clone();
    let raw = LimitingDesign {
        mass_a,
        mass_b,
        density: Arc::new(move |t| -m.scalar_d2(t) / m.scalar(t)),
        domain: (a, b),
        c: 1.0,
    };
    normalize(raw)
}

// ---------------------------------------------------------------------------
// optimal variance / covariance
// ---------------------------------------------------------------------------

/// Minimal variance of any linear unbiased estimator observing the full
/// trajectory: `D* = [h(a)^2 / q(a) + Integral h'^2 / q' dt]^{-1}`.
pub fn optimal_variance_dstar(
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<f64> {
    check_scalar_positive(model, kernel)?;
    check_regularity(model, kernel)?;
    let m = optimal_information_matrix(model, kernel)?;
    let info = m[(0, 0)];
    if info <= 0.0 {
        return Err(Error::Singular(format!("information {info} is not positive")));
    }
    Ok(1.0 / info)
}

/// The matrix `M = h(a) h(a)^T / q(a) + Integral h' h'^T / q' dt` whose
/// inverse is the continuous-time BLUE covariance.
pub fn optimal_information_matrix(
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<DMatrix<f64>> {
    model.check_same_domain(kernel)?;
    let (a, b) = kernel.domain();
    let qa = kernel.q(a);
    if qa <= 0.0 {
        return Err(Error::InvalidKernel(format!("q(a) = {qa} must be positive")));
    }
    let ha = model.h(kernel, a);
    let mut m = &ha * ha.transpose() / qa;
    let model_c = model.clone();
    let kernel_c = kernel.clone();
    m += quad::integrate_matrix(
        move |t| {
            let h1 = model_c.h_d1(&kernel_c, t);
            &h1 * h1.transpose() / kernel_c.dq(t)
        },
        a,
        b,
        quad::DEFAULT_TOL,
    )?;
    Ok(m)
}

/// Continuous-time BLUE covariance `D* = M^{-1}` for the multi-parameter
/// model. Reduces to [`optimal_variance_dstar`] when `m = 1`.
pub fn optimal_covariance_matrix(
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<DMatrix<f64>> {
    check_regularity(model, kernel)?;
    let m = optimal_information_matrix(model, kernel)?;
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("information matrix M is singular".into()))
}

/// D-optimality criterion `Psi(D) = det(D)^{1/m}`.
pub fn d_criterion(cov: &DMatrix<f64>) -> f64 {
    cov.determinant().powf(1.0 / cov.nrows() as f64)
}

/// BLUE measure `mu*(dt) = f(t) xi**(dt)` where `xi**` is the limiting
/// design with scale `c* = D*`; satisfies `Integral f dmu* = 1` and
/// `Phi(mu*) = D*`.
pub fn blue_measure(model: &RegressionModel, kernel: &TriangularKernel) -> Result<LimitingDesign> {
    let raw = limiting_design_raw(model, kernel)?;
    let c_star = optimal_variance_dstar(model, kernel)?;
    let (a, b) = raw.domain;
    let p = Arc::clone(&raw.density);
    let m = model.clone();
    Ok(LimitingDesign {
        mass_a: c_star * raw.mass_a * model.scalar(a),
        mass_b: c_star * raw.mass_b * model.scalar(b),
        density: Arc::new(move |t| c_star * p(t) * m.scalar(t)),
        domain: (a, b),
        c: c_star,
    })
}

// ---------------------------------------------------------------------------
// continuous functionals
// ---------------------------------------------------------------------------

/// Breakpoints (including the endpoints) splitting `[a, b]` at the sign
/// changes of `p`, located by bisection after a dense scan.
pub(crate) fn sign_change_breakpoints(p: &ScalarFn, domain: (f64, f64)) -> Vec<f64> {
    let (a, b) = domain;
    let mut breaks = vec![a];
    let n = 2048;
    let mut prev_t = a + (b - a) * 0.5 / n as f64;
    let mut prev = p(prev_t);
    for i in 1..n {
        let t = a + (b - a) * (i as f64 + 0.5) / n as f64;
        let cur = p(t);
        if prev != 0.0 && cur != 0.0 && prev.signum() != cur.signum() {
            let (mut lo, mut hi) = (prev_t, t);
            let (mut flo, _) = (prev, cur);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let fm = p(mid);
                if fm == 0.0 {
                    lo = mid;
                    break;
                }
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            breaks.push(0.5 * (lo + hi));
        }
        prev_t = t;
        prev = cur;
    }
    breaks.push(b);
    breaks
}

/// `Integral_a^t` of the vector integrand, from cached piece sums.
struct VectorMeasure {
    atoms: Vec<(f64, DVector<f64>)>,
    density: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    domain: (f64, f64),
    m: usize,
}

impl VectorMeasure {
    /// `Integral K(s, t) dmu(t)` for fixed `s`: the kernel section splits at
    /// `t = s` into `v(s) u(t)` (t < s) and `u(s) v(t)` (t > s).
    fn kernel_moment(&self, kernel: &TriangularKernel, s: f64) -> Result<DVector<f64>> {
        let (a, b) = self.domain;
        let mut acc = DVector::zeros(self.m);
        for (t, w) in &self.atoms {
            acc += w * kernel.eval_unchecked(s, *t);
        }
        let rho = Arc::clone(&self.density);
        let lower = quad::integrate_matrix(
            |t| DMatrix::from_column_slice(self.m, 1, rho(t).as_slice()) * kernel.u(t),
            a,
            s,
            quad::DEFAULT_TOL,
        )?;
        let rho = Arc::clone(&self.density);
        let upper = quad::integrate_matrix(
            |t| DMatrix::from_column_slice(self.m, 1, rho(t).as_slice()) * kernel.v(t),
            s,
            b,
            quad::DEFAULT_TOL,
        )?;
        acc += DVector::from_column_slice(lower.as_slice()) * kernel.v(s);
        acc += DVector::from_column_slice(upper.as_slice()) * kernel.u(s);
        Ok(acc)
    }

    /// `B = Integral Integral K(s, t) dmu(s) dmu(t)^T`, atoms handled
    /// exactly and the double integral split along the diagonal.
    fn kernel_bilinear(&self, kernel: &TriangularKernel) -> Result<DMatrix<f64>> {
        let (a, b) = self.domain;
        let mut bmat = DMatrix::zeros(self.m, self.m);
        for (ti, wi) in &self.atoms {
            for (tj, wj) in &self.atoms {
                bmat += wi * wj.transpose() * kernel.eval_unchecked(*ti, *tj);
            }
        }
        // atom x density (both orders)
        for (ti, wi) in &self.atoms {
            let g = self.density_kernel_moment(kernel, *ti)?;
            bmat += wi * g.transpose() + &g * wi.transpose();
        }
        // density x density: G + G^T with
        // G = Integral_t v(t) rho(t) [Integral_a^t u rho]^T dt
        let rho = Arc::clone(&self.density);
        let rho_inner = Arc::clone(&self.density);
        let kern = kernel.clone();
        let m = self.m;
        let g = quad::integrate_matrix(
            move |t| {
                let inner = quad::integrate_matrix(
                    |s| DMatrix::from_column_slice(m, 1, rho_inner(s).as_slice()) * kern.u(s),
                    a,
                    t,
                    quad::DEFAULT_TOL,
                )
                .unwrap_or_else(|_| DMatrix::from_element(m, 1, f64::NAN));
                let outer = DMatrix::from_column_slice(m, 1, rho(t).as_slice()) * kern.v(t);
                outer * inner.transpose()
            },
            a,
            b,
            quad::DEFAULT_TOL,
        )?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::QuadratureFailure("inner cumulative integral diverged".into()));
        }
        bmat += &g + g.transpose();
        Ok(bmat)
    }

    /// `Integral K(s, t) rho(t) dt` (density part only).
    fn density_kernel_moment(&self, kernel: &TriangularKernel, s: f64) -> Result<DVector<f64>> {
        let (a, b) = self.domain;
        let rho = Arc::clone(&self.density);
        let m = self.m;
        let lower = quad::integrate_matrix(
            |t| DMatrix::from_column_slice(m, 1, rho(t).as_slice()) * kernel.u(t),
            a,
            s,
            quad::DEFAULT_TOL,
        )?;
        let rho = Arc::clone(&self.density);
        let upper = quad::integrate_matrix(
            |t| DMatrix::from_column_slice(m, 1, rho(t).as_slice()) * kernel.v(t),
            s,
            b,
            quad::DEFAULT_TOL,
        )?;
        Ok(DVector::from_column_slice(lower.as_slice()) * kernel.v(s)
            + DVector::from_column_slice(upper.as_slice()) * kernel.u(s))
    }
}

/// Variance functional `D(xi)` of a signed measure with endpoint atoms for
/// the one-parameter continuous-time model.
pub fn continuous_variance_functional(
    design: &LimitingDesign,
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<f64> {
    if model.dimension() != 1 {
        return Err(Error::Unsupported("continuous variance functional needs m = 1".into()));
    }
    model.check_same_domain(kernel)?;
    let (a, b) = design.domain;
    let p = Arc::clone(&design.density);
    let mf = model.clone();
    let denom = design.mass_a * model.scalar(a).powi(2)
        + design.mass_b * model.scalar(b).powi(2)
        + quad::integrate(|t| p(t) * mf.scalar(t).powi(2), a, b, quad::DEFAULT_TOL)?;
    if denom.abs() < 1e-300 {
        return Err(Error::InvalidDesign("Integral f^2 dxi = 0".into()));
    }
    let p = Arc::clone(&design.density);
    let mf = model.clone();
    let measure = VectorMeasure {
        atoms: vec![
            (a, DVector::from_element(1, design.mass_a * model.scalar(a))),
            (b, DVector::from_element(1, design.mass_b * model.scalar(b))),
        ],
        density: Arc::new(move |t| DVector::from_element(1, p(t) * mf.scalar(t))),
        domain: (a, b),
        m: 1,
    };
    let num = measure.kernel_bilinear(kernel)?[(0, 0)];
    Ok(num / (denom * denom))
}

/// `Phi(mu) = Integral Integral K dmu dmu` of a signed measure (no model
/// weighting); the variance of the linear estimator `Integral y dmu`.
pub fn measure_variance_phi(measure: &LimitingDesign, kernel: &TriangularKernel) -> Result<f64> {
    let (a, b) = measure.domain;
    let p = Arc::clone(&measure.density);
    let vm = VectorMeasure {
        atoms: vec![
            (a, DVector::from_element(1, measure.mass_a)),
            (b, DVector::from_element(1, measure.mass_b)),
        ],
        density: Arc::new(move |t| DVector::from_element(1, p(t))),
        domain: (a, b),
        m: 1,
    };
    Ok(vm.kernel_bilinear(kernel)?[(0, 0)])
}

/// `Integral g dmu` against a signed measure with endpoint atoms.
pub fn integrate_against(
    measure: &LimitingDesign,
    g: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> Result<f64> {
    let (a, b) = measure.domain;
    let p = Arc::clone(&measure.density);
    Ok(measure.mass_a * g(a)
        + measure.mass_b * g(b)
        + quad::integrate(|t| p(t) * g(t), a, b, quad::DEFAULT_TOL)?)
}

/// `Integral K(s, t) dmu(t)` at a fixed `s`; the verification side of the
/// continuous-time BLUE identity `Integral K(s, t) f(t) dxi*(t) = c* f(s)`.
pub fn measure_kernel_moment(
    measure: &LimitingDesign,
    kernel: &TriangularKernel,
    s: f64,
) -> Result<f64> {
    let (a, b) = measure.domain;
    let p = Arc::clone(&measure.density);
    let vm = VectorMeasure {
        atoms: vec![
            (a, DVector::from_element(1, measure.mass_a)),
            (b, DVector::from_element(1, measure.mass_b)),
        ],
        density: Arc::new(move |t| DVector::from_element(1, p(t))),
        domain: (a, b),
        m: 1,
    };
    Ok(vm.kernel_moment(kernel, s)?[0])
}

// ---------------------------------------------------------------------------
// matrix-weighted limiting designs
// ---------------------------------------------------------------------------

/// Limiting matrix-weighted design (at `c = 1`; matrix designs are kept
/// unnormalized since the MWE is invariant under nonsingular rescaling).
pub fn matrix_limiting_design(
    model: &RegressionModel,
    kernel: &TriangularKernel,
    representation: Representation,
) -> Result<MatrixLimitingDesign> {
    model.check_same_domain(kernel)?;
    check_regularity(model, kernel)?;
    let (a, b) = kernel.domain();
    let m = model.dimension();
    match representation {
        Representation::OneColumn => {
            ensure_component_nonzero(model, 0)?;
            // omega_a = [f(a) u'(a)/u(a) - f'(a)] / (f_1(a) v(a)^2 q'(a)), etc.
            let fa = model.eval(a);
            let omega_a = (model.eval(a) * (kernel.du(a) / kernel.u(a)) - model.deriv1(a))
                / (fa[0] * kernel.v(a).powi(2) * kernel.dq(a));
            let fb = model.eval(b);
            let omega_b = model.h_d1(kernel, b) / (fb[0] * kernel.v(b) * kernel.dq(b));
            let model_c = model.clone();
            let kernel_c = kernel.clone();
            let density = move |t: f64| -> DMatrix<f64> {
                let h1 = model_c.h_d1(&kernel_c, t);
                let h2 = model_c.h_d2(&kernel_c, t);
                let dq = kernel_c.dq(t);
                let d2q = kernel_c.d2q(t);
                let omega = (h2 * dq - h1 * d2q)
                    * (-1.0 / (dq * dq * model_c.eval(t)[0] * kernel_c.v(t)));
                crate::estimators::one_column_matrix(&omega)
            };
            Ok(MatrixLimitingDesign {
                mass_a: crate::estimators::one_column_matrix(&omega_a),
                mass_b: crate::estimators::one_column_matrix(&omega_b),
                density: Arc::new(density),
                representation,
                dimension: m,
                domain: (a, b),
            })
        }
        Representation::Diagonal => {
            for k in 0..m {
                ensure_component_nonzero(model, k)?;
            }
            let (mass_a, mass_b, parts) = limit_parts(model, kernel);
            let density = move |t: f64| DMatrix::from_diagonal(&parts(t));
            Ok(MatrixLimitingDesign {
                mass_a: DMatrix::from_diagonal(&mass_a),
                mass_b: DMatrix::from_diagonal(&mass_b),
                density: Arc::new(density),
                representation,
                dimension: m,
                domain: (a, b),
            })
        }
    }
}

fn ensure_component_nonzero(model: &RegressionModel, k: usize) -> Result<()> {
    let (a, b) = model.domain();
    for i in 0..=GRID {
        let t = a + (b - a) * i as f64 / GRID as f64;
        if model.eval(t)[k].abs() < 1e-12 {
            return Err(Error::InvalidModel(format!(
                "f_{}({t}) vanishes; this representation requires it nonzero",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Covariance `D(xi) = M^{-1} B M^{-T}` of the MWE associated with a
/// matrix-weighted limiting design, atoms handled exactly.
pub fn continuous_mwe_covariance(
    design: &MatrixLimitingDesign,
    model: &RegressionModel,
    kernel: &TriangularKernel,
) -> Result<DMatrix<f64>> {
    model.check_same_domain(kernel)?;
    let (a, b) = design.domain;
    let m = design.dimension;
    if m != model.dimension() {
        return Err(Error::InvalidDesign("design/model dimension mismatch".into()));
    }
    // M = O_a f(a) f(a)^T + O_b f(b) f(b)^T + Integral O(t) f(t) f(t)^T dt
    let mut info = &design.mass_a * model.eval(a) * model.eval(a).transpose()
        + &design.mass_b * model.eval(b) * model.eval(b).transpose();
    let dens = Arc::clone(&design.density);
    let model_c = model.clone();
    info += quad::integrate_matrix(
        move |t| {
            let f = model_c.eval(t);
            dens(t) * &f * f.transpose()
        },
        a,
        b,
        quad::DEFAULT_TOL,
    )?;
    let info_inv = info
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("generalized information matrix M is singular".into()))?;

    let dens = Arc::clone(&design.density);
    let model_c = model.clone();
    let vm = VectorMeasure {
        atoms: vec![
            (a, &design.mass_a * model.eval(a)),
            (b, &design.mass_b * model.eval(b)),
        ],
        density: Arc::new(move |t| dens(t) * model_c.eval(t)),
        domain: (a, b),
        m,
    };
    let bmat = vm.kernel_bilinear(kernel)?;
    Ok(&info_inv * bmat * info_inv.transpose())
}

// ---------------------------------------------------------------------------
// design transforms
// ---------------------------------------------------------------------------

/// Pushes a signed design through a time-space transform: atoms move to the
/// image times with masses scaled by `alpha^2`; the density picks up the
/// time-change Jacobian: `p~(s) = alpha^2(bt(s)) p(bt(s)) bt'(s)`.
pub fn design_doob_transform(design: &LimitingDesign, map: &DoobMap) -> Result<LimitingDesign> {
    let (a, b) = design.domain;
    let (sa, sb) = map.source().domain();
    if (a - sa).abs() > 1e-9 * (b - a) || (b - sb).abs() > 1e-9 * (b - a) {
        return Err(Error::IncompatibleKernels(
            "design domain does not match the map's source domain".into(),
        ));
    }
    let (ta, tb) = map.target().domain();
    let mass_a = design.mass_a * map.forward_scale(a)?.powi(2);
    let mass_b = design.mass_b * map.forward_scale(b)?.powi(2);
    let p = Arc::clone(&design.density);
    let map_c = map.clone();
    let density = move |s: f64| -> f64 {
        let t = match map_c.backward_time(s) {
            Ok(t) => t,
            Err(_) => return f64::NAN,
        };
        let alpha = match map_c.forward_scale(t) {
            Ok(x) => x,
            Err(_) => return f64::NAN,
        };
        let jac = match map_c.backward_time_d1(s) {
            Ok(x) => x,
            Err(_) => return f64::NAN,
        };
        alpha * alpha * p(t) * jac
    };
    Ok(LimitingDesign {
        mass_a,
        mass_b,
        density: Arc::new(density),
        domain: (ta, tb),
        c: design.c,
    })
}

/// Matrix version of [`design_doob_transform`].
pub fn matrix_design_doob_transform(
    design: &MatrixLimitingDesign,
    map: &DoobMap,
) -> Result<MatrixLimitingDesign> {
    let (a, b) = design.domain;
    let (sa, sb) = map.source().domain();
    if (a - sa).abs() > 1e-9 * (b - a) || (b - sb).abs() > 1e-9 * (b - a) {
        return Err(Error::IncompatibleKernels(
            "design domain does not match the map's source domain".into(),
        ));
    }
    let (ta, tb) = map.target().domain();
    let mass_a = &design.mass_a * map.forward_scale(a)?.powi(2);
    let mass_b = &design.mass_b * map.forward_scale(b)?.powi(2);
    let dens = Arc::clone(&design.density);
    let map_c = map.clone();
    let m = design.dimension;
    let density = move |s: f64| -> DMatrix<f64> {
        let nan = || DMatrix::from_element(m, m, f64::NAN);
        let t = match map_c.backward_time(s) {
            Ok(t) => t,
            Err(_) => return nan(),
        };
        let alpha = match map_c.forward_scale(t) {
            Ok(x) => x,
            Err(_) => return nan(),
        };
        let jac = match map_c.backward_time_d1(s) {
            Ok(x) => x,
            Err(_) => return nan(),
        };
        dens(t) * (alpha * alpha * jac)
    };
    Ok(MatrixLimitingDesign {
        mass_a,
        mass_b,
        density: Arc::new(density),
        representation: design.representation,
        dimension: m,
        domain: (ta, tb),
    })
}
