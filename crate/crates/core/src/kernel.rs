//! Triangular covariance kernels `K(t, t') = u(min) * v(max)` and the
//! time-space transforms connecting them.
//!
//! A kernel is supplied as a pair of function bundles with analytic first and
//! second derivatives; the quotient `q = u / v` must be strictly increasing,
//! which makes `Q(t) = (q(t) - q(a)) / (q(b) - q(a))` a distribution function
//! and guarantees a positive definite Gram matrix on any grid with distinct
//! `q`-values. Everything here is immutable after construction and safe to
//! share across threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A scalar function shared by kernels, models and designs.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A function together with its first two derivatives.
#[derive(Clone)]
pub struct FnBundle {
    pub f: ScalarFn,
    pub d1: ScalarFn,
    pub d2: ScalarFn,
}

impl FnBundle {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnBundle { f: Arc::new(f), d1: Arc::new(d1), d2: Arc::new(d2) }
    }

    pub fn constant(c: f64) -> Self {
        FnBundle::new(move |_| c, |_| 0.0, |_| 0.0)
    }
}

const VALIDATION_GRID: usize = 1024;

/// Covariance kernel of the form `K(t, t') = u(t) v(t')` for `t <= t'`.
#[derive(Clone)]
pub struct TriangularKernel {
    u: FnBundle,
    v: FnBundle,
    a: f64,
    b: f64,
    q_a: f64,
    q_b: f64,
    name: String,
}

impl fmt::Debug for TriangularKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TriangularKernel({} on [{}, {}])", self.name, self.a, self.b)
    }
}

impl TriangularKernel {
    /// Builds and validates a kernel: `u, v > 0` and `q = u/v` strictly
    /// increasing, both checked on a dense grid plus the endpoints.
    pub fn new(u: FnBundle, v: FnBundle, a: f64, b: f64, name: impl Into<String>) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidKernel(format!("bad interval [{a}, {b}]")));
        }
        let kernel = TriangularKernel {
            q_a: (u.f)(a) / (v.f)(a),
            q_b: (u.f)(b) / (v.f)(b),
            u,
            v,
            a,
            b,
            name: name.into(),
        };
        kernel.validate()?;
        Ok(kernel)
    }

    fn validate(&self) -> Result<()> {
        let mut prev_q = f64::NEG_INFINITY;
        for i in 0..=VALIDATION_GRID {
            let t = self.a + (self.b - self.a) * i as f64 / VALIDATION_GRID as f64;
            let (ut, vt) = ((self.u.f)(t), (self.v.f)(t));
            if !(ut > 0.0) || !ut.is_finite() {
                return Err(Error::InvalidKernel(format!("u({t}) = {ut} is not positive")));
            }
            if !(vt > 0.0) || !vt.is_finite() {
                return Err(Error::InvalidKernel(format!("v({t}) = {vt} is not positive")));
            }
            let q = ut / vt;
            if q <= prev_q {
                return Err(Error::InvalidKernel(format!(
                    "q = u/v is not strictly increasing near t = {t}"
                )));
            }
            prev_q = q;
        }
        Ok(())
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn check_domain(&self, what: &'static str, t: f64) -> Result<()> {
        // Tiny slack absorbs roundoff from quantile inversions.
        let eps = 1e-12 * (self.b - self.a);
        if t < self.a - eps || t > self.b + eps {
            return Err(Error::DomainViolation { what, value: t, a: self.a, b: self.b });
        }
        Ok(())
    }

    /// `K(s, t) = u(min) * v(max)`.
    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        self.check_domain("s", s)?;
        self.check_domain("t", t)?;
        Ok(self.eval_unchecked(s, t))
    }

    #[inline]
    pub fn eval_unchecked(&self, s: f64, t: f64) -> f64 {
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        (self.u.f)(lo) * (self.v.f)(hi)
    }

    #[inline]
    pub fn u(&self, t: f64) -> f64 {
        (self.u.f)(t)
    }

    #[inline]
    pub fn v(&self, t: f64) -> f64 {
        (self.v.f)(t)
    }

    pub fn du(&self, t: f64) -> f64 {
        (self.u.d1)(t)
    }

    pub fn dv(&self, t: f64) -> f64 {
        (self.v.d1)(t)
    }

    pub fn d2u(&self, t: f64) -> f64 {
        (self.u.d2)(t)
    }

    pub fn d2v(&self, t: f64) -> f64 {
        (self.v.d2)(t)
    }

    /// `q = u / v`, the strictly increasing ordinate of the kernel.
    #[inline]
    pub fn q(&self, t: f64) -> f64 {
        (self.u.f)(t) / (self.v.f)(t)
    }

    /// `q'` by the quotient rule.
    pub fn dq(&self, t: f64) -> f64 {
        let (u, v) = ((self.u.f)(t), (self.v.f)(t));
        let (du, dv) = ((self.u.d1)(t), (self.v.d1)(t));
        (du * v - u * dv) / (v * v)
    }

    /// `q''` by the quotient rule.
    pub fn d2q(&self, t: f64) -> f64 {
        let (u, v) = ((self.u.f)(t), (self.v.f)(t));
        let (du, dv) = ((self.u.d1)(t), (self.v.d1)(t));
        let (d2u, d2v) = ((self.u.d2)(t), (self.v.d2)(t));
        (d2u * v - u * d2v) / (v * v) - 2.0 * dv * (du * v - u * dv) / (v * v * v)
    }

    /// The distribution function `Q(t) = (q(t) - q(a)) / (q(b) - q(a))`.
    /// `Q(a) = 0` and `Q(b) = 1` exactly.
    pub fn q_cdf(&self, t: f64) -> Result<f64> {
        self.check_domain("t", t)?;
        if t <= self.a {
            return Ok(0.0);
        }
        if t >= self.b {
            return Ok(1.0);
        }
        Ok(((self.q(t) - self.q_a) / (self.q_b - self.q_a)).clamp(0.0, 1.0))
    }

    /// Solves `Q(t) = z` by bisection to `|dt| <= 1e-12 (b - a)`.
    pub fn q_quantile(&self, z: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::DomainViolation { what: "z", value: z, a: 0.0, b: 1.0 });
        }
        if z == 0.0 {
            return Ok(self.a);
        }
        if z == 1.0 {
            return Ok(self.b);
        }
        let target = self.q_a + z * (self.q_b - self.q_a);
        let (mut lo, mut hi) = (self.a, self.b);
        let tol = 1e-12 * (self.b - self.a);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.q(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    // ---- builtin registry ----------------------------------------------

    /// Brownian motion: `u(t) = t`, `v(t) = 1`, so `K(s, t) = min(s, t)`.
    pub fn brownian(a: f64, b: f64) -> Result<Self> {
        TriangularKernel::new(
            FnBundle::new(|t| t, |_| 1.0, |_| 0.0),
            FnBundle::constant(1.0),
            a,
            b,
            "brownian",
        )
    }

    /// Affine pair: `u(t) = c1 + t`, `v(t) = c2 + sign * t` with `sign = ±1`.
    pub fn affine_pair(c1: f64, c2: f64, sign: f64, a: f64, b: f64) -> Result<Self> {
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::InvalidKernel(format!("affine-pair sign must be ±1, got {sign}")));
        }
        TriangularKernel::new(
            FnBundle::new(move |t| c1 + t, |_| 1.0, |_| 0.0),
            FnBundle::new(move |t| c2 + sign * t, move |_| sign, |_| 0.0),
            a,
            b,
            format!("affine-pair(c1={c1}, c2={c2}, sign={sign:+})"),
        )
    }

    /// Power pair: `u(t) = t^gamma`, `v(t) = t^omega` with `gamma > omega`.
    pub fn power_pair(gamma: f64, omega: f64, a: f64, b: f64) -> Result<Self> {
        TriangularKernel::new(
            FnBundle::new(
                move |t| t.powf(gamma),
                move |t| gamma * t.powf(gamma - 1.0),
                move |t| gamma * (gamma - 1.0) * t.powf(gamma - 2.0),
            ),
            FnBundle::new(
                move |t| t.powf(omega),
                move |t| omega * t.powf(omega - 1.0),
                move |t| omega * (omega - 1.0) * t.powf(omega - 2.0),
            ),
            a,
            b,
            format!("power-pair(gamma={gamma}, omega={omega})"),
        )
    }

    /// Exponential pair: `u(t) = e^{lambda t}`, `v(t) = e^{-gamma t}`.
    /// With `gamma = lambda` this is `K(s, t) = e^{-lambda |s - t|}`.
    pub fn exp_pair(lambda: f64, gamma: f64, a: f64, b: f64) -> Result<Self> {
        TriangularKernel::new(
            FnBundle::new(
                move |t| (lambda * t).exp(),
                move |t| lambda * (lambda * t).exp(),
                move |t| lambda * lambda * (lambda * t).exp(),
            ),
            FnBundle::new(
                move |t| (-gamma * t).exp(),
                move |t| -gamma * (-gamma * t).exp(),
                move |t| gamma * gamma * (-gamma * t).exp(),
            ),
            a,
            b,
            format!("exp-pair(lambda={lambda}, gamma={gamma})"),
        )
    }

    pub fn from_spec(spec: &KernelSpec) -> Result<Self> {
        let (a, b) = (spec.a, spec.b);
        match spec.family.as_str() {
            "brownian" => TriangularKernel::brownian(a, b),
            "affine-pair" => TriangularKernel::affine_pair(
                spec.param("c1")?,
                spec.param("c2")?,
                spec.param_or("sign", 1.0),
                a,
                b,
            ),
            "power-pair" => {
                TriangularKernel::power_pair(spec.param("gamma")?, spec.param("omega")?, a, b)
            }
            "exp-pair" => {
                TriangularKernel::exp_pair(spec.param("lambda")?, spec.param("gamma")?, a, b)
            }
            other => Err(Error::InvalidKernel(format!("unknown kernel family \"{other}\""))),
        }
    }
}

/// A parsed kernel description, the in-memory form of the config-file object
/// `{family: "exp-pair", lambda: 1.0, gamma: 1.0, a: 1.0, b: 2.0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: String,
    pub params: Vec<(String, f64)>,
    pub a: f64,
    pub b: f64,
}

impl KernelSpec {
    pub fn new(family: impl Into<String>, params: &[(&str, f64)], a: f64, b: f64) -> Self {
        KernelSpec {
            family: family.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            a,
            b,
        }
    }

    fn param(&self, name: &str) -> Result<f64> {
        self.params
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                Error::InvalidKernel(format!("family \"{}\" needs parameter \"{name}\"", self.family))
            })
    }

    fn param_or(&self, name: &str, default: f64) -> f64 {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| *v).unwrap_or(default)
    }
}

/// Time-space transform between two triangular kernels.
///
/// `forward_time` maps source time to target time via `beta = q_tgt^{-1} o q_src`;
/// `forward_scale(t) = v_src(t) / v_tgt(beta(t))` is the amplitude factor that
/// turns a source-kernel process into a target-kernel process. Both inverse
/// maps are carried explicitly.
#[derive(Clone)]
pub struct DoobMap {
    source: Arc<TriangularKernel>,
    target: Arc<TriangularKernel>,
}

impl DoobMap {
    /// Requires the `q`-ranges of the two kernels to agree at the endpoints
    /// (relative tolerance 1e-9).
    pub fn between(source: Arc<TriangularKernel>, target: Arc<TriangularKernel>) -> Result<Self> {
        let range = |k: &TriangularKernel| (k.q_a, k.q_b);
        let (sa, sb) = range(&source);
        let (ta, tb) = range(&target);
        let scale = sb.abs().max(sa.abs()).max(1e-300);
        if (sa - ta).abs() > 1e-9 * scale || (sb - tb).abs() > 1e-9 * scale {
            return Err(Error::IncompatibleKernels(format!(
                "q-ranges differ: source [{sa}, {sb}] vs target [{ta}, {tb}]"
            )));
        }
        Ok(DoobMap { source, target })
    }

    pub fn source(&self) -> &Arc<TriangularKernel> {
        &self.source
    }

    pub fn target(&self) -> &Arc<TriangularKernel> {
        &self.target
    }

    /// `beta(t) = q_tgt^{-1}(q_src(t))`, source time to target time.
    pub fn forward_time(&self, t: f64) -> Result<f64> {
        self.target.q_quantile(self.source.q_cdf(t)?)
    }

    /// `beta~(s) = q_src^{-1}(q_tgt(s))`, target time to source time.
    pub fn backward_time(&self, s: f64) -> Result<f64> {
        self.source.q_quantile(self.target.q_cdf(s)?)
    }

    /// `alpha(t) = v_src(t) / v_tgt(beta(t))`.
    pub fn forward_scale(&self, t: f64) -> Result<f64> {
        Ok(self.source.v(t) / self.target.v(self.forward_time(t)?))
    }

    /// `alpha~(s) = v_tgt(s) / v_src(beta~(s))`.
    pub fn backward_scale(&self, s: f64) -> Result<f64> {
        Ok(self.target.v(s) / self.source.v(self.backward_time(s)?))
    }

    /// `beta~'(s) = q_tgt'(s) / q_src'(beta~(s))`.
    pub fn backward_time_d1(&self, s: f64) -> Result<f64> {
        let t = self.backward_time(s)?;
        Ok(self.target.dq(s) / self.source.dq(t))
    }

    /// `beta~''(s)` from differentiating `q_src(beta~(s)) = q_tgt(s)` twice.
    pub fn backward_time_d2(&self, s: f64) -> Result<f64> {
        let t = self.backward_time(s)?;
        let d1 = self.target.dq(s) / self.source.dq(t);
        Ok((self.target.d2q(s) - self.source.d2q(t) * d1 * d1) / self.source.dq(t))
    }

    /// The same map with source and target swapped.
    pub fn reversed(&self) -> DoobMap {
        DoobMap { source: Arc::clone(&self.target), target: Arc::clone(&self.source) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn brownian_eval() {
        let k = TriangularKernel::brownian(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(k.eval(1.0, 1.5).unwrap(), 1.0);
        assert_abs_diff_eq!(k.eval(2.0, 2.0).unwrap(), 2.0);
        assert_abs_diff_eq!(k.eval(1.5, 1.0).unwrap(), 1.0); // symmetric
    }

    #[test]
    fn exponential_eval_closed_form() {
        // u = e^t, v = e^{-t}  =>  K(s, t) = e^{-|s - t|}
        let k = TriangularKernel::exp_pair(1.0, 1.0, 0.5, 3.0).unwrap();
        assert_abs_diff_eq!(k.eval(1.0, 2.0).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.eval(2.5, 0.5).unwrap(), (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn domain_violation_is_an_error() {
        let k = TriangularKernel::brownian(1.0, 2.0).unwrap();
        assert!(k.eval(0.5, 1.5).is_err());
        assert!(k.eval(1.5, 2.5).is_err());
    }

    #[test]
    fn q_cdf_brownian_is_affine() {
        let k = TriangularKernel::brownian(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(k.q_cdf(1.25).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(k.q_quantile(0.75).unwrap(), 1.75, epsilon = 1e-11);
        assert_eq!(k.q_cdf(1.0).unwrap(), 0.0);
        assert_eq!(k.q_cdf(2.0).unwrap(), 1.0);
    }

    #[test]
    fn q_cdf_exp_pair_closed_form() {
        // u = e^t, v = e^{-t} on [1, 2]: Q(t) = (e^{2t} - e^2) / (e^4 - e^2)
        let k = TriangularKernel::exp_pair(1.0, 1.0, 1.0, 2.0).unwrap();
        let expected = (3.0f64.exp() - 2.0f64.exp()) / (4.0f64.exp() - 2.0f64.exp());
        assert_abs_diff_eq!(k.q_cdf(1.5).unwrap(), expected, epsilon = 1e-12);
        // round trip
        for z in [0.1, 0.25, 0.5, 0.9] {
            let t = k.q_quantile(z).unwrap();
            assert_abs_diff_eq!(k.q_cdf(t).unwrap(), z, epsilon = 1e-10);
        }
    }

    #[test]
    fn non_monotone_q_rejected() {
        let r = TriangularKernel::new(
            FnBundle::new(|t: f64| (-t).exp(), |t| -(-t).exp(), |t| (-t).exp()),
            FnBundle::constant(1.0),
            0.0,
            1.0,
            "decreasing q",
        );
        assert!(matches!(r, Err(Error::InvalidKernel(_))));
    }

    #[test]
    fn doob_identity_map() {
        let k = Arc::new(TriangularKernel::exp_pair(1.0, 1.0, 1.0, 2.0).unwrap());
        let map = DoobMap::between(Arc::clone(&k), Arc::clone(&k)).unwrap();
        for t in [1.0, 1.3, 1.77, 2.0] {
            assert_abs_diff_eq!(map.forward_time(t).unwrap(), t, epsilon = 1e-11);
            assert_abs_diff_eq!(map.forward_scale(t).unwrap(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn doob_exp_to_brownian_closed_form() {
        // exp-pair lambda: beta(t) = e^{2 lambda t}, alpha(t) = e^{-lambda t}
        let lambda = 1.0;
        let src = Arc::new(TriangularKernel::exp_pair(lambda, lambda, 1.0, 2.0).unwrap());
        let tgt =
            Arc::new(TriangularKernel::brownian((2.0f64).exp(), (4.0f64).exp()).unwrap());
        let map = DoobMap::between(src, tgt).unwrap();
        for t in [1.0, 1.25, 1.6, 2.0] {
            assert_abs_diff_eq!(
                map.forward_time(t).unwrap(),
                (2.0 * lambda * t).exp(),
                epsilon = 1e-8 * (2.0 * lambda * t).exp()
            );
            assert_abs_diff_eq!(map.forward_scale(t).unwrap(), (-lambda * t).exp(), epsilon = 1e-10);
        }
    }

    #[test]
    fn doob_range_mismatch_rejected() {
        let src = Arc::new(TriangularKernel::brownian(1.0, 2.0).unwrap());
        let tgt = Arc::new(TriangularKernel::brownian(1.0, 3.0).unwrap());
        assert!(matches!(DoobMap::between(src, tgt), Err(Error::IncompatibleKernels(_))));
    }

    #[test]
    fn doob_round_trip_and_scale_product() {
        let src = Arc::new(TriangularKernel::exp_pair(0.7, 1.3, 0.5, 2.5).unwrap());
        let tgt = Arc::new(
            TriangularKernel::brownian(src.q(0.5), src.q(2.5)).unwrap(),
        );
        let map = DoobMap::between(src, tgt).unwrap();
        for i in 0..=20 {
            let t = 0.5 + 2.0 * i as f64 / 20.0;
            let s = map.forward_time(t).unwrap();
            assert_abs_diff_eq!(map.backward_time(s).unwrap(), t, epsilon = 1e-9);
            // Remark: alpha(t) * alpha~(beta(t)) = 1
            let prod = map.forward_scale(t).unwrap() * map.backward_scale(s).unwrap();
            assert_abs_diff_eq!(prod, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn doob_covariance_identity() {
        // v~(s) v~(s') min(q~(s), q~(s')) = a~(s) a~(s') K(b~(s), b~(s'))
        let src = Arc::new(TriangularKernel::power_pair(2.0, 1.0, 1.0, 2.0).unwrap());
        let tgt = Arc::new(TriangularKernel::exp_pair(0.5, 0.5, src.q(1.0).ln(), src.q(2.0).ln()).unwrap());
        // q_tgt = e^t on [ln q(a), ln q(b)] has the right range
        let map = DoobMap::between(Arc::clone(&src), Arc::clone(&tgt)).unwrap();
        let (ta, tb) = tgt.domain();
        for i in 0..6 {
            for j in 0..6 {
                let s = ta + (tb - ta) * (0.07 + 0.17 * i as f64);
                let s2 = ta + (tb - ta) * (0.11 + 0.15 * j as f64);
                let lhs = tgt.eval(s, s2).unwrap();
                let rhs = map.backward_scale(s).unwrap()
                    * map.backward_scale(s2).unwrap()
                    * src.eval(map.backward_time(s).unwrap(), map.backward_time(s2).unwrap()).unwrap();
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10 * lhs.abs().max(1.0));
            }
        }
    }
}
