//! Scalar conditioner fields: black-box ℝ^m → ℝ callables with optional
//! analytic gradients and optional serializable descriptions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Mlp;

/// Serializable description of a builtin scalar field. Arbitrary closures have
/// no spec and cannot be serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    Const { arity: usize, value: f64 },
    /// w·x + b
    Linear { weights: Vec<f64>, intercept: f64 },
    Mlp { net: Mlp },
}

impl FieldSpec {
    pub fn arity(&self) -> usize {
        match self {
            FieldSpec::Const { arity, .. } => *arity,
            FieldSpec::Linear { weights, .. } => weights.len(),
            FieldSpec::Mlp { net } => net.input_arity(),
        }
    }

    pub fn build(&self) -> ScalarField {
        match self.clone() {
            FieldSpec::Const { arity, value } => ScalarField::constant(arity, value),
            FieldSpec::Linear { weights, intercept } => ScalarField::linear(weights, intercept),
            FieldSpec::Mlp { net } => ScalarField::from_mlp(net),
        }
    }
}

/// A scalar field ℝ^m → ℝ. Evaluation must be total on ℝ^m and pure; purity is
/// a documented contract on the supplied closure, not checked.
#[derive(Clone)]
pub struct ScalarField {
    arity: usize,
    eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    gradient: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
    spec: Option<FieldSpec>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("arity", &self.arity)
            .field("spec", &self.spec)
            .field("has_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl ScalarField {
    pub fn from_fn<F>(arity: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarField { arity, eval: Arc::new(f), gradient: None, spec: None }
    }

    pub fn with_gradient<G>(mut self, g: G) -> Self
    where
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn constant(arity: usize, value: f64) -> Self {
        let mut f = ScalarField::from_fn(arity, move |_| value)
            .with_gradient(move |x: &[f64]| vec![0.0; x.len()]);
        f.spec = Some(FieldSpec::Const { arity, value });
        f
    }

    pub fn linear(weights: Vec<f64>, intercept: f64) -> Self {
        let arity = weights.len();
        let w = weights.clone();
        let wg = weights.clone();
        let mut f = ScalarField::from_fn(arity, move |x: &[f64]| {
            w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + intercept
        })
        .with_gradient(move |_: &[f64]| wg.clone());
        f.spec = Some(FieldSpec::Linear { weights, intercept });
        f
    }

    pub fn from_mlp(net: Mlp) -> Self {
        let arity = net.input_arity();
        let eval_net = net.clone();
        let mut f = ScalarField::from_fn(arity, move |x: &[f64]| eval_net.eval(x));
        f.spec = Some(FieldSpec::Mlp { net });
        f
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.arity, "scalar field arity mismatch");
        (self.eval)(x)
    }

    /// Analytic gradient when present, central finite differences otherwise.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => self.fd_gradient(x, 1e-5),
        }
    }

    pub fn fd_gradient(&self, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = self.eval(&xp);
            xp[i] = x[i] - h;
            let fm = self.eval(&xp);
            xp[i] = x[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    /// The serializable description, if this field is a builtin.
    pub fn spec(&self) -> Option<&FieldSpec> {
        self.spec.as_ref()
    }

    pub fn require_spec(&self) -> Result<&FieldSpec> {
        self.spec.as_ref().ok_or_else(|| {
            Error::NotSerializable("scalar field built from an arbitrary closure".into())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_field_matches_fd_gradient() {
        let f = ScalarField::linear(vec![2.0, -3.0, 0.5], 1.0);
        let x = [0.3, -0.7, 2.0];
        assert_eq!(f.eval(&x), 2.0 * 0.3 - 3.0 * (-0.7) + 0.5 * 2.0 + 1.0);
        let g = f.gradient(&x);
        let fd = f.fd_gradient(&x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn spec_round_trip() {
        let f = ScalarField::linear(vec![1.0, 2.0], -0.5);
        let spec = f.require_spec().unwrap().clone();
        let json = serde_json::to_string(&spec).unwrap();
        let back: FieldSpec = serde_json::from_str(&json).unwrap();
        let g = back.build();
        assert_eq!(f.eval(&[0.1, 0.2]), g.eval(&[0.1, 0.2]));
    }

    #[test]
    fn closure_field_is_not_serializable() {
        let f = ScalarField::from_fn(1, |x| x[0].sin());
        assert!(f.require_spec().is_err());
    }
}
