//! Vector-valued regression function bundles with analytic derivatives.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{DoobMap, TriangularKernel};

/// A vector function shared by models and designs.
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Regression model `y(t) = theta^T f(t) + eps(t)` on `[a, b]`, holding
/// `f`, `f'` and `f''` as callables. Immutable and thread-safe.
#[derive(Clone)]
pub struct RegressionModel {
    m: usize,
    f: VectorFn,
    d1: VectorFn,
    d2: VectorFn,
    a: f64,
    b: f64,
    name: String,
}

impl fmt::Debug for RegressionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RegressionModel({}, m={} on [{}, {}])", self.name, self.m, self.a, self.b)
    }
}

impl RegressionModel {
    /// Builds a model and checks linear independence of the components via
    /// the Gram determinant on a `4 m`-point grid.
    pub fn new(
        m: usize,
        f: VectorFn,
        d1: VectorFn,
        d2: VectorFn,
        a: f64,
        b: f64,
        name: impl Into<String>,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidModel("m = 0".into()));
        }
        if !(a < b) {
            return Err(Error::InvalidModel(format!("bad interval [{a}, {b}]")));
        }
        let model = RegressionModel { m, f, d1, d2, a, b, name: name.into() };
        let n = 4 * m;
        let mut gram = DMatrix::zeros(m, m);
        for i in 0..n {
            let t = a + (b - a) * (i as f64 + 0.5) / n as f64;
            let ft = model.eval(t);
            if ft.len() != m {
                return Err(Error::InvalidModel(format!(
                    "f(t) returned {} components, expected {m}",
                    ft.len()
                )));
            }
            gram += &ft * ft.transpose();
        }
        // scale-invariant determinant test
        let norm = gram.norm();
        if norm == 0.0 || (gram.clone() / norm).determinant().abs() < 1e-12 {
            return Err(Error::InvalidModel(
                "regression functions are linearly dependent on the grid".into(),
            ));
        }
        Ok(model)
    }

    pub fn dimension(&self) -> usize {
        self.m
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        (self.f)(t)
    }

    pub fn deriv1(&self, t: f64) -> DVector<f64> {
        (self.d1)(t)
    }

    pub fn deriv2(&self, t: f64) -> DVector<f64> {
        (self.d2)(t)
    }

    /// First component as a scalar; the natural accessor when `m = 1`.
    pub fn scalar(&self, t: f64) -> f64 {
        (self.f)(t)[0]
    }

    pub fn scalar_d1(&self, t: f64) -> f64 {
        (self.d1)(t)[0]
    }

    pub fn scalar_d2(&self, t: f64) -> f64 {
        (self.d2)(t)[0]
    }

    /// `h(t) = f(t) / v(t)` componentwise.
    pub fn h(&self, kernel: &TriangularKernel, t: f64) -> DVector<f64> {
        self.eval(t) / kernel.v(t)
    }

    /// `h'(t) = f'/v - f v'/v^2`.
    pub fn h_d1(&self, kernel: &TriangularKernel, t: f64) -> DVector<f64> {
        let v = kernel.v(t);
        let dv = kernel.dv(t);
        self.deriv1(t) / v - self.eval(t) * (dv / (v * v))
    }

    /// `h''(t) = f''/v - 2 f' v'/v^2 - f v''/v^2 + 2 f v'^2/v^3`.
    pub fn h_d2(&self, kernel: &TriangularKernel, t: f64) -> DVector<f64> {
        let v = kernel.v(t);
        let dv = kernel.dv(t);
        let d2v = kernel.d2v(t);
        self.deriv2(t) / v - self.deriv1(t) * (2.0 * dv / (v * v))
            + self.eval(t) * ((2.0 * dv * dv - v * d2v) / (v * v * v))
    }

    /// Checks the model and kernel share a domain.
    pub fn check_same_domain(&self, kernel: &TriangularKernel) -> Result<()> {
        let (ka, kb) = kernel.domain();
        let tol = 1e-9 * (self.b - self.a);
        if (ka - self.a).abs() > tol || (kb - self.b).abs() > tol {
            return Err(Error::InvalidModel(format!(
                "model domain [{}, {}] does not match kernel domain [{ka}, {kb}]",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Transforms the model along a Doob map: the result lives on the target
    /// interval and satisfies `f~(s) = f(beta~(s)) / alpha(beta~(s))`, with
    /// derivatives assembled from `h~ = h o beta~` and the chain rule.
    pub fn transform(&self, map: &DoobMap) -> Result<RegressionModel> {
        let (sa, sb) = map.source().domain();
        let tol = 1e-9 * (self.b - self.a);
        if (sa - self.a).abs() > tol || (sb - self.b).abs() > tol {
            return Err(Error::InvalidModel(
                "map source domain does not match model domain".into(),
            ));
        }
        let m = self.m;
        let (ta, tb) = map.target().domain();
        let src = self.clone();
        let map_f = map.clone();
        let f = move |s: f64| -> DVector<f64> {
            let t = map_f.backward_time(s).unwrap_or(f64::NAN);
            let vt = map_f.target().v(s);
            src.h(map_f.source(), t) * vt
        };
        let src1 = self.clone();
        let map1 = map.clone();
        let d1 = move |s: f64| -> DVector<f64> {
            let t = map1.backward_time(s).unwrap_or(f64::NAN);
            let kc = map1.source();
            let kt = map1.target();
            let bt1 = map1.backward_time_d1(s).unwrap_or(f64::NAN);
            // f~ = v~ * (h o beta~)
            let h = src1.h(kc, t);
            let hp = src1.h_d1(kc, t) * bt1;
            h * kt.dv(s) + hp * kt.v(s)
        };
        let src2 = self.clone();
        let map2 = map.clone();
        let d2 = move |s: f64| -> DVector<f64> {
            let t = map2.backward_time(s).unwrap_or(f64::NAN);
            let kc = map2.source();
            let kt = map2.target();
            let bt1 = map2.backward_time_d1(s).unwrap_or(f64::NAN);
            let bt2 = map2.backward_time_d2(s).unwrap_or(f64::NAN);
            let h = src2.h(kc, t);
            let hp = src2.h_d1(kc, t) * bt1;
            let hpp = src2.h_d2(kc, t) * (bt1 * bt1) + src2.h_d1(kc, t) * bt2;
            h * kt.d2v(s) + hp * (2.0 * kt.dv(s)) + hpp * kt.v(s)
        };
        RegressionModel::new(
            m,
            Arc::new(f),
            Arc::new(d1),
            Arc::new(d2),
            ta,
            tb,
            format!("{} (transformed)", self.name),
        )
    }

    // ---- builtin registry ----------------------------------------------

    /// Location model, `f = 1`.
    pub fn location(a: f64, b: f64) -> Result<Self> {
        RegressionModel::new(
            1,
            Arc::new(|_| DVector::from_element(1, 1.0)),
            Arc::new(|_| DVector::zeros(1)),
            Arc::new(|_| DVector::zeros(1)),
            a,
            b,
            "location",
        )
    }

    /// Linear regression through the origin, `f = t`.
    pub fn linear(a: f64, b: f64) -> Result<Self> {
        RegressionModel::new(
            1,
            Arc::new(|t| DVector::from_element(1, t)),
            Arc::new(|_| DVector::from_element(1, 1.0)),
            Arc::new(|_| DVector::zeros(1)),
            a,
            b,
            "linear",
        )
    }

    /// Shifted quadratic, `f = t^2 + nu`.
    pub fn quadratic(nu: f64, a: f64, b: f64) -> Result<Self> {
        RegressionModel::new(
            1,
            Arc::new(move |t| DVector::from_element(1, t * t + nu)),
            Arc::new(|t| DVector::from_element(1, 2.0 * t)),
            Arc::new(|_| DVector::from_element(1, 2.0)),
            a,
            b,
            format!("quadratic(nu={nu})"),
        )
    }

    /// Trigonometric model, `f = 1 + sin(2 pi t) / 2`.
    pub fn trig(a: f64, b: f64) -> Result<Self> {
        use std::f64::consts::PI;
        RegressionModel::new(
            1,
            Arc::new(|t| DVector::from_element(1, 1.0 + 0.5 * (2.0 * PI * t).sin())),
            Arc::new(|t| DVector::from_element(1, PI * (2.0 * PI * t).cos())),
            Arc::new(|t| DVector::from_element(1, -2.0 * PI * PI * (2.0 * PI * t).sin())),
            a,
            b,
            "trig",
        )
    }

    /// Monomial basis `(1, t, ..., t^{m-1})`.
    pub fn monomials(m: usize, a: f64, b: f64) -> Result<Self> {
        let f = move |t: f64| DVector::from_fn(m, |i, _| t.powi(i as i32));
        let d1 = move |t: f64| {
            DVector::from_fn(m, |i, _| if i == 0 { 0.0 } else { i as f64 * t.powi(i as i32 - 1) })
        };
        let d2 = move |t: f64| {
            DVector::from_fn(m, |i, _| {
                if i < 2 {
                    0.0
                } else {
                    (i * (i - 1)) as f64 * t.powi(i as i32 - 2)
                }
            })
        };
        RegressionModel::new(
            m,
            Arc::new(f),
            Arc::new(d1),
            Arc::new(d2),
            a,
            b,
            format!("monomials(m={m})"),
        )
    }

    pub fn from_spec(spec: &ModelSpec, a: f64, b: f64) -> Result<Self> {
        match spec.family.as_str() {
            "location" => RegressionModel::location(a, b),
            "linear" => RegressionModel::linear(a, b),
            "quadratic" => RegressionModel::quadratic(spec.param_or("nu", 0.0), a, b),
            "trig" => RegressionModel::trig(a, b),
            "monomials" => RegressionModel::monomials(spec.param_or("m", 2.0) as usize, a, b),
            other => Err(Error::InvalidModel(format!("unknown model family \"{other}\""))),
        }
    }
}

/// Parsed model description, e.g. `{family: "quadratic", nu: 1.0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: String,
    pub params: Vec<(String, f64)>,
}

impl ModelSpec {
    pub fn new(family: impl Into<String>, params: &[(&str, f64)]) -> Self {
        ModelSpec {
            family: family.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn param_or(&self, name: &str, default: f64) -> f64 {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| *v).unwrap_or(default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn h_examples() {
        // f = t^2, v = 1: h = f
        let k = TriangularKernel::brownian(1.0, 2.0).unwrap();
        let model = RegressionModel::quadratic(0.0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(model.h(&k, 1.5)[0], 2.25, epsilon = 1e-15);

        // f = t, v = e^{-t}: h(1) = e
        let k = TriangularKernel::exp_pair(1.0, 1.0, 0.5, 2.0).unwrap();
        let model = RegressionModel::linear(0.5, 2.0).unwrap();
        assert_abs_diff_eq!(model.h(&k, 1.0)[0], std::f64::consts::E, epsilon = 1e-12);

        // f = 1, v = t: h(2) = 0.5
        let k = TriangularKernel::power_pair(2.0, 1.0, 1.0, 2.0).unwrap();
        let model = RegressionModel::location(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(model.h(&k, 2.0)[0], 0.5, epsilon = 1e-15);
    }

    /// Central finite differences agree with the registered derivatives.
    #[test]
    fn builtin_derivatives_match_finite_differences() {
        let models = [
            RegressionModel::location(1.0, 2.0).unwrap(),
            RegressionModel::linear(1.0, 2.0).unwrap(),
            RegressionModel::quadratic(1.0, 1.0, 2.0).unwrap(),
            RegressionModel::trig(1.0, 2.0).unwrap(),
            RegressionModel::monomials(4, 1.0, 2.0).unwrap(),
        ];
        let h = 1e-5;
        for model in &models {
            for i in 0..7 {
                let t = 1.05 + 0.9 * i as f64 / 7.0;
                let d1_fd = (model.eval(t + h) - model.eval(t - h)) / (2.0 * h);
                let d2_fd = (model.eval(t + h) - model.eval(t) * 2.0 + model.eval(t - h)) / (h * h);
                assert!((model.deriv1(t) - d1_fd).amax() < 1e-6, "{model:?} f' at {t}");
                assert!((model.deriv2(t) - d2_fd).amax() < 1e-4, "{model:?} f'' at {t}");
            }
        }
    }

    #[test]
    fn h_derivatives_match_finite_differences() {
        let k = TriangularKernel::exp_pair(0.8, 1.1, 1.0, 2.0).unwrap();
        let model = RegressionModel::trig(1.0, 2.0).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let t = 1.1 + 0.8 * i as f64 / 5.0;
            let d1_fd = (model.h(&k, t + h) - model.h(&k, t - h)) / (2.0 * h);
            let d2_fd =
                (model.h(&k, t + h) - model.h(&k, t) * 2.0 + model.h(&k, t - h)) / (h * h);
            assert!((model.h_d1(&k, t) - d1_fd).amax() < 1e-6);
            assert!((model.h_d2(&k, t) - d2_fd).amax() < 1e-4);
        }
    }

    #[test]
    fn dependent_components_rejected() {
        let r = RegressionModel::new(
            2,
            Arc::new(|t| DVector::from_vec(vec![t, 2.0 * t])),
            Arc::new(|_| DVector::from_vec(vec![1.0, 2.0])),
            Arc::new(|_| DVector::zeros(2)),
            0.0,
            1.0,
            "dependent",
        );
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn transform_identity_map_is_identity() {
        use std::sync::Arc as StdArc;
        let k = StdArc::new(TriangularKernel::brownian(1.0, 2.0).unwrap());
        let map = DoobMap::between(StdArc::clone(&k), StdArc::clone(&k)).unwrap();
        let model = RegressionModel::quadratic(1.0, 1.0, 2.0).unwrap();
        let tf = model.transform(&map).unwrap();
        for t in [1.0, 1.4, 1.9] {
            assert_abs_diff_eq!(tf.scalar(t), model.scalar(t), epsilon = 1e-9);
        }
    }

    #[test]
    fn transform_exp_pair_linear_closed_form() {
        // f(t) = t on [1,2] under exp-pair(1) -> Brownian time:
        // f~(s) = (ln s / 2) sqrt(s) on [e^2, e^4]
        use std::sync::Arc as StdArc;
        let src = StdArc::new(TriangularKernel::exp_pair(1.0, 1.0, 1.0, 2.0).unwrap());
        let tgt = StdArc::new(TriangularKernel::brownian((2f64).exp(), (4f64).exp()).unwrap());
        let map = DoobMap::between(src, tgt).unwrap();
        let model = RegressionModel::linear(1.0, 2.0).unwrap();
        let tf = model.transform(&map).unwrap();
        for s in [(2f64).exp(), 12.0, 30.0, (4f64).exp()] {
            let expected = 0.5 * s.ln() * s.sqrt();
            assert_abs_diff_eq!(tf.scalar(s), expected, epsilon = 1e-8 * expected.abs());
        }
    }

    #[test]
    fn transform_round_trip_restores_f_and_derivatives() {
        use std::sync::Arc as StdArc;
        let src = StdArc::new(TriangularKernel::power_pair(2.0, 1.0, 1.0, 2.0).unwrap());
        let tgt = StdArc::new(TriangularKernel::brownian(1.0, 2.0).unwrap()); // q ranges [1,2] match
        let map = DoobMap::between(src, tgt).unwrap();
        let model = RegressionModel::trig(1.0, 2.0).unwrap();
        let back = model.transform(&map).unwrap().transform(&map.reversed()).unwrap();
        for i in 0..=8 {
            let t = 1.0 + i as f64 / 8.0;
            assert_abs_diff_eq!(back.scalar(t), model.scalar(t), epsilon = 1e-9);
            assert_abs_diff_eq!(back.scalar_d1(t), model.scalar_d1(t), epsilon = 1e-7);
            assert_abs_diff_eq!(back.scalar_d2(t), model.scalar_d2(t), epsilon = 1e-5);
        }
    }
}
