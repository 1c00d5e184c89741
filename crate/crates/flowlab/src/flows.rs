//! Invertible flow layers and their composition.
//!
//! Conventions:
//! - A `Layer` is one invertible transform with exact forward / inverse /
//!   log-determinant.
//! - An [`Inn`] stores layers in application order: `layers[0]` is applied
//!   first on the forward pass. This mirrors the usual composition notation
//!   W₁∘g₁∘⋯∘Wₙ∘gₙ where the rightmost factor acts first; keep this in mind
//!   when translating matrix products into layer lists.
//! - Conditioner handles must be pure. This is a documented contract and is
//!   not checked.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldSpec, ScalarField};
use crate::node::OdeFlowLayer;
use crate::roots;
use crate::{check_point, Point};

/// Tolerance below which an affine layer is considered singular.
pub const DET_THRESHOLD: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Affine coupling
// ---------------------------------------------------------------------------

/// Affine coupling layer: the first `k` coordinates pass through unchanged and
/// condition an elementwise scale-and-shift of the rest,
/// y_{k+i} = x_{k+i}·exp(s_i(x_{≤k})) + t_i(x_{≤k}).
#[derive(Clone, Debug)]
pub struct AcfLayer {
    dim: usize,
    k: usize,
    s: Vec<ScalarField>,
    t: Vec<ScalarField>,
}

impl AcfLayer {
    pub fn new(dim: usize, k: usize, s: Vec<ScalarField>, t: Vec<ScalarField>) -> Result<AcfLayer> {
        if dim < 2 || k == 0 || k >= dim {
            return Err(Error::InvalidInput(format!(
                "acf split index must satisfy 1 <= k <= d-1 (dim {dim}, k {k})"
            )));
        }
        if s.len() != dim - k || t.len() != dim - k {
            return Err(Error::InvalidInput("acf needs d-k scale and shift fields".into()));
        }
        for f in s.iter().chain(&t) {
            if f.arity() != k {
                return Err(Error::InvalidInput("acf conditioner arity must equal k".into()));
            }
        }
        Ok(AcfLayer { dim, k, s, t })
    }

    /// The single-coordinate case k = d−1 with scalar conditioners.
    pub fn single_coordinate(dim: usize, s: ScalarField, t: ScalarField) -> Result<AcfLayer> {
        AcfLayer::new(dim, dim - 1, vec![s], vec![t])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_index(&self) -> usize {
        self.k
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (cond, rest) = x.split_at(self.k);
        let mut y = x.to_vec();
        for (i, xi) in rest.iter().enumerate() {
            y[self.k + i] = xi * self.s[i].eval(cond).exp() + self.t[i].eval(cond);
        }
        y
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let cond = &y[..self.k];
        let mut x = y.to_vec();
        for i in 0..self.dim - self.k {
            x[self.k + i] = (y[self.k + i] - self.t[i].eval(cond)) * (-self.s[i].eval(cond)).exp();
        }
        x
    }

    fn log_det(&self, x: &[f64]) -> f64 {
        let cond = &x[..self.k];
        self.s.iter().map(|f| f.eval(cond)).sum()
    }
}

// ---------------------------------------------------------------------------
// Deep sigmoidal coupling (autoregressive)
// ---------------------------------------------------------------------------

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// Autoregressive sigmoidal layer. Coordinate k is transformed by
/// g_k(x) = σ⁻¹( Σ_j w_{k,j}·σ((x_k − b_{k,j})/τ_{k,j}) ), with conditioners of
/// arity k (the preceding coordinates); weights are positive and sum to one,
/// widths τ lie in (0, tau_max).
#[derive(Clone, Debug)]
pub struct DsfLayer {
    dim: usize,
    n: usize,
    tau_max: f64,
    /// w[k][j], b[k][j], tau[k][j]: conditioners of arity k.
    w: Vec<Vec<ScalarField>>,
    b: Vec<Vec<ScalarField>>,
    tau: Vec<Vec<ScalarField>>,
}

impl DsfLayer {
    pub fn new(
        dim: usize,
        n: usize,
        tau_max: f64,
        w: Vec<Vec<ScalarField>>,
        b: Vec<Vec<ScalarField>>,
        tau: Vec<Vec<ScalarField>>,
    ) -> Result<DsfLayer> {
        if dim == 0 || n == 0 || !(tau_max > 0.0) {
            return Err(Error::InvalidInput("dsf needs dim >= 1, n >= 1, tau_max > 0".into()));
        }
        for (name, grid) in [("w", &w), ("b", &b), ("tau", &tau)] {
            if grid.len() != dim {
                return Err(Error::InvalidInput(format!("dsf {name} needs one row per coordinate")));
            }
            for (k, row) in grid.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::InvalidInput(format!("dsf {name}[{k}] needs n handles")));
                }
                for f in row {
                    if f.arity() != k {
                        return Err(Error::InvalidInput(format!(
                            "dsf {name}[{k}] conditioner arity must be {k}"
                        )));
                    }
                }
            }
        }
        Ok(DsfLayer { dim, n, tau_max, w, b, tau })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn params_at(&self, k: usize, cond: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let w: Vec<f64> = self.w[k].iter().map(|f| f.eval(cond)).collect();
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&v| v <= 0.0) {
            return Err(Error::WeightConstraint(format!("coordinate {k}: nonpositive weight")));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::WeightConstraint(format!(
                "coordinate {k}: weights sum to {sum}, expected 1"
            )));
        }
        let b: Vec<f64> = self.b[k].iter().map(|f| f.eval(cond)).collect();
        let tau: Vec<f64> = self.tau[k].iter().map(|f| f.eval(cond)).collect();
        if tau.iter().any(|&t| !(t > 0.0 && t < self.tau_max)) {
            return Err(Error::WeightConstraint(format!(
                "coordinate {k}: tau outside (0, {})",
                self.tau_max
            )));
        }
        Ok((w, b, tau))
    }

    /// The scalar map x_k ↦ g_k given conditioning values.
    fn transform(&self, k: usize, cond: &[f64], xk: f64) -> Result<f64> {
        let (w, b, tau) = self.params_at(k, cond)?;
        let inner: f64 =
            (0..self.n).map(|j| w[j] * sigmoid((xk - b[j]) / tau[j])).sum();
        if inner <= 0.0 || inner >= 1.0 {
            return Err(Error::Saturation { value: inner });
        }
        Ok((inner / (1.0 - inner)).ln())
    }

    fn derivative(&self, k: usize, cond: &[f64], xk: f64) -> Result<f64> {
        let (w, b, tau) = self.params_at(k, cond)?;
        let inner: f64 = (0..self.n).map(|j| w[j] * sigmoid((xk - b[j]) / tau[j])).sum();
        if inner <= 0.0 || inner >= 1.0 {
            return Err(Error::Saturation { value: inner });
        }
        let dinner: f64 =
            (0..self.n).map(|j| w[j] * sigmoid_prime((xk - b[j]) / tau[j]) / tau[j]).sum();
        Ok(dinner / (inner * (1.0 - inner)))
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        for k in 0..self.dim {
            y[k] = self.transform(k, &x[..k], x[k])?;
        }
        Ok(y)
    }

    fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut x = y.to_vec();
        for k in 0..self.dim {
            let cond: Vec<f64> = x[..k].to_vec();
            let target = y[k];
            // Propagate the first conditioner/saturation error from inside the
            // root-find closure rather than masking it as a bracket failure.
            let mut inner_err: Option<Error> = None;
            let res = roots::invert_monotone(
                |t| match self.transform(k, &cond, t) {
                    Ok(v) => v,
                    Err(e) => {
                        if inner_err.is_none() {
                            inner_err = Some(e);
                        }
                        f64::NAN
                    }
                },
                target,
                0.0,
                1e-12,
            );
            if let Some(e) = inner_err {
                return Err(e);
            }
            x[k] = res?;
        }
        Ok(x)
    }

    fn log_det(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..self.dim {
            let d = self.derivative(k, &x[..k], x[k])?;
            if d <= 0.0 {
                return Err(Error::NotMonotone(d));
            }
            acc += d.ln();
        }
        Ok(acc)
    }
}

// ---------------------------------------------------------------------------
// Sum-of-squares polynomial coupling (last coordinate)
// ---------------------------------------------------------------------------

/// Last-coordinate layer y_d = c(x_{<d}) + ∫₀^{x_d} (Σ_l h_l(x_{<d}) u^l)² du.
/// The integrand is a polynomial square, so the map is nondecreasing and the
/// integral has a closed-form antiderivative (used for evaluation; quadrature
/// is only a cross-check).
#[derive(Clone, Debug)]
pub struct SosLayer {
    dim: usize,
    c: ScalarField,
    h: Vec<ScalarField>,
}

impl SosLayer {
    pub fn new(dim: usize, c: ScalarField, h: Vec<ScalarField>) -> Result<SosLayer> {
        if dim == 0 {
            return Err(Error::InvalidInput("sos needs dim >= 1".into()));
        }
        if h.is_empty() {
            return Err(Error::InvalidInput("sos needs at least one coefficient handle".into()));
        }
        if c.arity() != dim - 1 || h.iter().any(|f| f.arity() != dim - 1) {
            return Err(Error::InvalidInput("sos handles must have arity d-1".into()));
        }
        Ok(SosLayer { dim, c, h })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn coeffs(&self, cond: &[f64]) -> Vec<f64> {
        self.h.iter().map(|f| f.eval(cond)).collect()
    }

    /// ∫₀^z p(u)² du with p given by `coeffs`, via the exact antiderivative.
    fn integral(coeffs: &[f64], z: f64) -> f64 {
        // Square the polynomial by coefficient convolution…
        let r = coeffs.len();
        let mut sq = vec![0.0; 2 * r - 1];
        for (i, a) in coeffs.iter().enumerate() {
            for (j, b) in coeffs.iter().enumerate() {
                sq[i + j] += a * b;
            }
        }
        // …then evaluate Σ sq_m z^{m+1}/(m+1) by Horner on the antiderivative.
        let mut acc = 0.0;
        for m in (0..sq.len()).rev() {
            acc = acc * z + sq[m] / (m as f64 + 1.0);
        }
        acc * z
    }

    fn poly_eval(coeffs: &[f64], z: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, &c| acc * z + c)
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (cond, z) = (&x[..self.dim - 1], x[self.dim - 1]);
        let mut y = x.to_vec();
        y[self.dim - 1] = self.c.eval(cond) + Self::integral(&self.coeffs(cond), z);
        y
    }

    fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let cond = &y[..self.dim - 1];
        let coeffs = self.coeffs(cond);
        let c = self.c.eval(cond);
        let target = y[self.dim - 1] - c;
        let z = roots::invert_monotone(|z| Self::integral(&coeffs, z), target, 0.0, 1e-12)?;
        let mut x = y.to_vec();
        x[self.dim - 1] = z;
        Ok(x)
    }

    fn log_det(&self, x: &[f64]) -> Result<f64> {
        let (cond, z) = (&x[..self.dim - 1], x[self.dim - 1]);
        let p = Self::poly_eval(&self.coeffs(cond), z);
        let d = p * p;
        if d <= 0.0 {
            return Err(Error::NotMonotone(d));
        }
        Ok(d.ln())
    }

    /// Adaptive-Simpson evaluation of the defining integral, for cross-checks
    /// against the closed form (absolute tolerance 1e-10).
    pub fn forward_quadrature(&self, x: &[f64]) -> Vec<f64> {
        let (cond, z) = (&x[..self.dim - 1], x[self.dim - 1]);
        let coeffs = self.coeffs(cond);
        let f = |u: f64| {
            let p = Self::poly_eval(&coeffs, u);
            p * p
        };
        let mut y = x.to_vec();
        y[self.dim - 1] = self.c.eval(cond) + adaptive_simpson(&f, 0.0, z, 1e-10, 40);
        y
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, depth)
}

// ---------------------------------------------------------------------------
// Permutation
// ---------------------------------------------------------------------------

/// Coordinate permutation. `perm[i]` is the input coordinate that lands in
/// output slot i: forward(x)_i = x[perm[i]].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationLayer {
    perm: Vec<usize>,
}

impl PermutationLayer {
    pub fn new(perm: Vec<usize>) -> Result<PermutationLayer> {
        let d = perm.len();
        let mut seen = vec![false; d];
        for &p in &perm {
            if p >= d || seen[p] {
                return Err(Error::InvalidInput("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        Ok(PermutationLayer { perm })
    }

    pub fn transposition(dim: usize, i: usize, j: usize) -> Result<PermutationLayer> {
        if i >= dim || j >= dim {
            return Err(Error::InvalidInput("transposition index out of range".into()));
        }
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.swap(i, j);
        PermutationLayer::new(perm)
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| x[p]).collect()
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; y.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

/// Invertible affine map x ↦ Ax + b with |det A| > 1e-12 checked at
/// construction.
#[derive(Clone, Debug)]
pub struct AffineLayer {
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    b: DVector<f64>,
    log_abs_det: f64,
}

impl AffineLayer {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<AffineLayer> {
        if !a.is_square() || a.nrows() != b.len() || a.nrows() == 0 {
            return Err(Error::InvalidInput("affine layer needs square A matching b".into()));
        }
        let det = a.determinant();
        if det.abs() <= DET_THRESHOLD {
            return Err(Error::Singular { det: det.abs(), threshold: DET_THRESHOLD });
        }
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or(Error::Singular { det: det.abs(), threshold: DET_THRESHOLD })?;
        Ok(AffineLayer { a, a_inv, b, log_abs_det: det.abs().ln() })
    }

    pub fn identity(dim: usize) -> AffineLayer {
        AffineLayer::new(DMatrix::identity(dim, dim), DVector::zeros(dim)).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.b
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let v = &self.a * DVector::from_column_slice(x) + &self.b;
        v.iter().copied().collect()
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let v = &self.a_inv * (DVector::from_column_slice(y) - &self.b);
        v.iter().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// Layer union
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Layer {
    Acf(AcfLayer),
    Dsf(DsfLayer),
    Sos(SosLayer),
    Permutation(PermutationLayer),
    Affine(AffineLayer),
    OdeFlow(OdeFlowLayer),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Acf(l) => l.dim(),
            Layer::Dsf(l) => l.dim(),
            Layer::Sos(l) => l.dim(),
            Layer::Permutation(l) => l.dim(),
            Layer::Affine(l) => l.dim(),
            Layer::OdeFlow(l) => l.dim(),
        }
    }
}

fn check_layer_input(layer: &Layer, x: &[f64]) -> Result<()> {
    check_point(x)?;
    if x.len() != layer.dim() {
        return Err(Error::DimensionMismatch { expected: layer.dim(), got: x.len() });
    }
    Ok(())
}

pub fn layer_forward(layer: &Layer, x: &[f64]) -> Result<Point> {
    check_layer_input(layer, x)?;
    match layer {
        Layer::Acf(l) => Ok(l.forward(x)),
        Layer::Dsf(l) => l.forward(x),
        Layer::Sos(l) => Ok(l.forward(x)),
        Layer::Permutation(l) => Ok(l.forward(x)),
        Layer::Affine(l) => Ok(l.forward(x)),
        Layer::OdeFlow(l) => l.forward(x),
    }
}

pub fn layer_inverse(layer: &Layer, y: &[f64]) -> Result<Point> {
    check_layer_input(layer, y)?;
    match layer {
        Layer::Acf(l) => Ok(l.inverse(y)),
        Layer::Dsf(l) => l.inverse(y),
        Layer::Sos(l) => l.inverse(y),
        Layer::Permutation(l) => Ok(l.inverse(y)),
        Layer::Affine(l) => Ok(l.inverse(y)),
        Layer::OdeFlow(l) => l.inverse(y),
    }
}

/// log |det D(layer)(x)|.
pub fn layer_log_det(layer: &Layer, x: &[f64]) -> Result<f64> {
    check_layer_input(layer, x)?;
    match layer {
        Layer::Acf(l) => Ok(l.log_det(x)),
        Layer::Dsf(l) => l.log_det(x),
        Layer::Sos(l) => l.log_det(x),
        Layer::Permutation(_) => Ok(0.0),
        Layer::Affine(l) => Ok(l.log_abs_det),
        Layer::OdeFlow(l) => l.log_det(x),
    }
}

// ---------------------------------------------------------------------------
// Inn
// ---------------------------------------------------------------------------

/// An invertible network: an ordered list of layers sharing one dimension,
/// applied first-to-last on the forward pass.
#[derive(Clone, Debug)]
pub struct Inn {
    dim: usize,
    layers: Vec<Layer>,
}

impl Inn {
    pub fn new(dim: usize, layers: Vec<Layer>) -> Result<Inn> {
        for (i, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: l.dim() }.at_layer(i));
            }
        }
        Ok(Inn { dim, layers })
    }

    pub fn identity(dim: usize) -> Inn {
        Inn { dim, layers: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<Point> {
        let mut v = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            v = layer_forward(l, &v).map_err(|e| e.at_layer(i))?;
        }
        Ok(v)
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Point> {
        let mut v = y.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            v = layer_inverse(l, &v).map_err(|e| e.at_layer(i))?;
        }
        Ok(v)
    }

    /// Sum of layer log-determinants along the forward orbit of x.
    pub fn log_det(&self, x: &[f64]) -> Result<f64> {
        let mut v = x.to_vec();
        let mut acc = 0.0;
        for (i, l) in self.layers.iter().enumerate() {
            acc += layer_log_det(l, &v).map_err(|e| e.at_layer(i))?;
            v = layer_forward(l, &v).map_err(|e| e.at_layer(i))?;
        }
        Ok(acc)
    }

    pub fn to_json(&self) -> Result<String> {
        let spec = InnSpec::try_from(self)?;
        Ok(serde_json::to_string_pretty(&spec)?)
    }

    pub fn from_json(s: &str) -> Result<Inn> {
        let spec: InnSpec = serde_json::from_str(s)?;
        spec.build()
    }
}

pub fn inn_forward(inn: &Inn, x: &[f64]) -> Result<Point> {
    inn.forward(x)
}

pub fn inn_inverse(inn: &Inn, y: &[f64]) -> Result<Point> {
    inn.inverse(y)
}

pub fn inn_log_det(inn: &Inn, x: &[f64]) -> Result<f64> {
    inn.log_det(x)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Acf { dim: usize, k: usize, s: Vec<FieldSpec>, t: Vec<FieldSpec> },
    Dsf {
        dim: usize,
        n: usize,
        tau_max: f64,
        w: Vec<Vec<FieldSpec>>,
        b: Vec<Vec<FieldSpec>>,
        tau: Vec<Vec<FieldSpec>>,
    },
    Sos { dim: usize, c: FieldSpec, h: Vec<FieldSpec> },
    Permutation { perm: Vec<usize> },
    Affine { a: Vec<Vec<f64>>, b: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InnSpec {
    pub dim: usize,
    pub layers: Vec<LayerSpec>,
}

fn fields_to_specs(fields: &[ScalarField]) -> Result<Vec<FieldSpec>> {
    fields.iter().map(|f| f.require_spec().cloned()).collect()
}

impl TryFrom<&Inn> for InnSpec {
    type Error = Error;

    fn try_from(inn: &Inn) -> Result<InnSpec> {
        let mut layers = Vec::new();
        for (i, l) in inn.layers.iter().enumerate() {
            let spec = match l {
                Layer::Acf(l) => LayerSpec::Acf {
                    dim: l.dim,
                    k: l.k,
                    s: fields_to_specs(&l.s).map_err(|e| e.at_layer(i))?,
                    t: fields_to_specs(&l.t).map_err(|e| e.at_layer(i))?,
                },
                Layer::Dsf(l) => {
                    let grid = |g: &Vec<Vec<ScalarField>>| -> Result<Vec<Vec<FieldSpec>>> {
                        g.iter().map(|row| fields_to_specs(row)).collect()
                    };
                    LayerSpec::Dsf {
                        dim: l.dim,
                        n: l.n,
                        tau_max: l.tau_max,
                        w: grid(&l.w).map_err(|e| e.at_layer(i))?,
                        b: grid(&l.b).map_err(|e| e.at_layer(i))?,
                        tau: grid(&l.tau).map_err(|e| e.at_layer(i))?,
                    }
                }
                Layer::Sos(l) => LayerSpec::Sos {
                    dim: l.dim,
                    c: l.c.require_spec().map_err(|e| e.at_layer(i))?.clone(),
                    h: fields_to_specs(&l.h).map_err(|e| e.at_layer(i))?,
                },
                Layer::Permutation(l) => LayerSpec::Permutation { perm: l.perm.clone() },
                Layer::Affine(l) => LayerSpec::Affine {
                    a: (0..l.a.nrows())
                        .map(|r| l.a.row(r).iter().copied().collect())
                        .collect(),
                    b: l.b.iter().copied().collect(),
                },
                Layer::OdeFlow(_) => {
                    return Err(Error::NotSerializable(
                        "ode flow layers hold black-box vector fields".into(),
                    )
                    .at_layer(i))
                }
            };
            layers.push(spec);
        }
        Ok(InnSpec { dim: inn.dim, layers })
    }
}

impl InnSpec {
    pub fn build(&self) -> Result<Inn> {
        let build_fields = |specs: &[FieldSpec]| -> Vec<ScalarField> {
            specs.iter().map(|s| s.build()).collect()
        };
        let mut layers = Vec::new();
        for spec in &self.layers {
            let layer = match spec {
                LayerSpec::Acf { dim, k, s, t } => {
                    Layer::Acf(AcfLayer::new(*dim, *k, build_fields(s), build_fields(t))?)
                }
                LayerSpec::Dsf { dim, n, tau_max, w, b, tau } => {
                    let grid = |g: &Vec<Vec<FieldSpec>>| -> Vec<Vec<ScalarField>> {
                        g.iter().map(|row| build_fields(row)).collect()
                    };
                    Layer::Dsf(DsfLayer::new(*dim, *n, *tau_max, grid(w), grid(b), grid(tau))?)
                }
                LayerSpec::Sos { dim, c, h } => {
                    Layer::Sos(SosLayer::new(*dim, c.build(), build_fields(h))?)
                }
                LayerSpec::Permutation { perm } => {
                    Layer::Permutation(PermutationLayer::new(perm.clone())?)
                }
                LayerSpec::Affine { a, b } => {
                    let d = b.len();
                    let mat = DMatrix::from_fn(d, d, |r, c| a[r][c]);
                    Layer::Affine(AffineLayer::new(mat, DVector::from_vec(b.clone()))?)
                }
            };
            layers.push(layer);
        }
        Inn::new(self.dim, layers)
    }
}

// ---------------------------------------------------------------------------
// Realization of affine maps by single-coordinate layers and permutations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Elem {
    Swap(usize, usize),
    /// row i scaled by lambda
    Scale(usize, f64),
    /// row dst += c * row src
    AddMul(usize, usize, f64),
}

/// The six-factor sign-flip product: a layer sequence built only from
/// transpositions and unit shears x_d ← x_d ± x_{d−1} whose product matrix
/// flips the sign of coordinate `coord` and fixes the rest. Needs dim ≥ 2.
pub fn sign_flip_layers(dim: usize, coord: usize) -> Result<Vec<Layer>> {
    if dim < 2 || coord >= dim {
        return Err(Error::InvalidInput("sign flip needs dim >= 2 and a valid coordinate".into()));
    }
    let shear = |c: f64| -> Result<Layer> {
        let mut w = vec![0.0; dim - 1];
        w[dim - 2] = c;
        Ok(Layer::Acf(AcfLayer::single_coordinate(
            dim,
            ScalarField::constant(dim - 1, 0.0),
            ScalarField::linear(w, 0.0),
        )?))
    };
    let p = || -> Result<Layer> {
        Ok(Layer::Permutation(PermutationLayer::transposition(dim, dim - 2, dim - 1)?))
    };
    // Applied first-to-last this equals the matrix product
    // L · P · M · P · L · P = diag(−1, 1) on the (d−1, d) plane,
    // with L: x_d += x_{d−1}, M: x_d −= x_{d−1}, P the transposition.
    let mut seq = vec![p()?, shear(1.0)?, p()?, shear(-1.0)?, p()?, shear(1.0)?];
    if coord != dim - 2 {
        let conj = Layer::Permutation(PermutationLayer::transposition(dim, coord, dim - 2)?);
        let mut wrapped = vec![conj.clone()];
        wrapped.append(&mut seq);
        wrapped.push(conj);
        seq = wrapped;
    }
    Ok(seq)
}

fn elem_to_layers(dim: usize, e: Elem) -> Result<Vec<Layer>> {
    let last = dim - 1;
    let conjugated = |i: usize, inner: Vec<Layer>| -> Result<Vec<Layer>> {
        if i == last {
            return Ok(inner);
        }
        let swap = Layer::Permutation(PermutationLayer::transposition(dim, i, last)?);
        let mut out = vec![swap.clone()];
        out.extend(inner);
        out.push(swap);
        Ok(out)
    };
    match e {
        Elem::Swap(i, j) => {
            if i == j {
                Ok(vec![])
            } else {
                Ok(vec![Layer::Permutation(PermutationLayer::transposition(dim, i, j)?)])
            }
        }
        Elem::Scale(i, lambda) => {
            let mut out = Vec::new();
            let mag = lambda.abs();
            if mag <= DET_THRESHOLD {
                return Err(Error::Singular { det: mag, threshold: DET_THRESHOLD });
            }
            if (mag - 1.0).abs() > 0.0 {
                let acf = Layer::Acf(AcfLayer::single_coordinate(
                    dim,
                    ScalarField::constant(dim - 1, mag.ln()),
                    ScalarField::constant(dim - 1, 0.0),
                )?);
                out.extend(conjugated(i, vec![acf])?);
            }
            if lambda < 0.0 {
                out.extend(sign_flip_layers(dim, i)?);
            }
            Ok(out)
        }
        Elem::AddMul(dst, src, c) => {
            if c == 0.0 {
                return Ok(vec![]);
            }
            // After bringing dst to the last slot, the source coordinate is
            // still readable by the conditioner (it moved to dst's old slot if
            // it was the last coordinate).
            let src_after = if dst == last { src } else if src == last { dst } else { src };
            debug_assert!(src_after < dim - 1);
            let mut w = vec![0.0; dim - 1];
            w[src_after] = c;
            let acf = Layer::Acf(AcfLayer::single_coordinate(
                dim,
                ScalarField::constant(dim - 1, 0.0),
                ScalarField::linear(w, 0.0),
            )?);
            conjugated(dst, vec![acf])
        }
    }
}

/// Realize x ↦ Ax + b as an invertible network built only from
/// single-coordinate affine couplings (with constant or linear conditioners)
/// and permutations. Requires dim ≥ 2 and |det A| > 1e-12.
pub fn realize_gl(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Inn> {
    let d = a.nrows();
    if !a.is_square() || b.len() != d {
        return Err(Error::InvalidInput("realize_gl needs square A matching b".into()));
    }
    if d < 2 {
        return Err(Error::InvalidInput(
            "realize_gl needs dim >= 2: 1-D couplings are orientation-preserving and cannot \
             realize sign flips"
                .into(),
        ));
    }
    let det = a.determinant();
    if det.abs() <= DET_THRESHOLD {
        return Err(Error::Singular { det: det.abs(), threshold: DET_THRESHOLD });
    }

    // Gauss-Jordan with partial pivoting: record the row operations R_1…R_k
    // with R_k·…·R_1·A = I, so that A = R_1⁻¹·…·R_k⁻¹ and the map x ↦ Ax
    // applies R_k⁻¹ first.
    let mut m = a.clone();
    let mut ops: Vec<Elem> = Vec::new();
    for col in 0..d {
        let mut pivot_row = col;
        for r in col + 1..d {
            if m[(r, col)].abs() > m[(pivot_row, col)].abs() {
                pivot_row = r;
            }
        }
        if pivot_row != col {
            ops.push(Elem::Swap(col, pivot_row));
            m.swap_rows(col, pivot_row);
        }
        let pivot = m[(col, col)];
        if pivot.abs() <= DET_THRESHOLD {
            return Err(Error::Singular { det: pivot.abs(), threshold: DET_THRESHOLD });
        }
        if pivot != 1.0 {
            ops.push(Elem::Scale(col, 1.0 / pivot));
            for c in 0..d {
                m[(col, c)] /= pivot;
            }
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let factor = m[(r, col)];
            if factor != 0.0 {
                ops.push(Elem::AddMul(r, col, -factor));
                for c in 0..d {
                    let v = m[(col, c)] * factor;
                    m[(r, c)] -= v;
                }
            }
        }
    }

    let mut layers = Vec::new();
    for op in ops.iter().rev() {
        let inv = match *op {
            Elem::Swap(i, j) => Elem::Swap(i, j),
            Elem::Scale(i, l) => Elem::Scale(i, 1.0 / l),
            Elem::AddMul(dst, src, c) => Elem::AddMul(dst, src, -c),
        };
        layers.extend(elem_to_layers(d, inv)?);
    }
    // Translation by b: a constant shift of each coordinate, cycled into the
    // last slot.
    for i in 0..d {
        if b[i] != 0.0 {
            let acf = Layer::Acf(AcfLayer::single_coordinate(
                d,
                ScalarField::constant(d - 1, 0.0),
                ScalarField::constant(d - 1, b[i]),
            )?);
            if i == d - 1 {
                layers.push(acf);
            } else {
                let swap = Layer::Permutation(PermutationLayer::transposition(d, i, d - 1)?);
                layers.push(swap.clone());
                layers.push(acf);
                layers.push(swap);
            }
        }
    }
    Inn::new(d, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn acf_identity() -> AcfLayer {
        AcfLayer::new(
            2,
            1,
            vec![ScalarField::constant(1, 0.0)],
            vec![ScalarField::constant(1, 0.0)],
        )
        .unwrap()
    }

    #[test]
    fn acf_with_zero_fields_is_identity() {
        let l = Layer::Acf(acf_identity());
        assert_eq!(layer_forward(&l, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(layer_log_det(&l, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn acf_linear_shift() {
        // s ≡ 0, t(x) = x: (1, 2) ↦ (1, 2·e⁰ + 1) = (1, 3).
        let l = Layer::Acf(
            AcfLayer::new(
                2,
                1,
                vec![ScalarField::constant(1, 0.0)],
                vec![ScalarField::linear(vec![1.0], 0.0)],
            )
            .unwrap(),
        );
        assert_eq!(layer_forward(&l, &[1.0, 2.0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(layer_inverse(&l, &[1.0, 3.0]).unwrap(), vec![1.0, 2.0]);
    }

    fn dsf_identity_1d() -> DsfLayer {
        DsfLayer::new(
            1,
            1,
            10.0,
            vec![vec![ScalarField::constant(0, 1.0)]],
            vec![vec![ScalarField::constant(0, 0.0)]],
            vec![vec![ScalarField::constant(0, 1.0)]],
        )
        .unwrap()
    }

    #[test]
    fn dsf_identity_settings() {
        // n=1, w=1, b=0, τ=1: σ⁻¹∘σ = id.
        let l = Layer::Dsf(dsf_identity_1d());
        let y = layer_forward(&l, &[0.7]).unwrap();
        assert!((y[0] - 0.7).abs() < 1e-12);
        let x = layer_inverse(&l, &[0.7]).unwrap();
        assert!((x[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn dsf_rejects_bad_weights() {
        let l = DsfLayer::new(
            1,
            1,
            10.0,
            vec![vec![ScalarField::constant(0, 0.5)]],
            vec![vec![ScalarField::constant(0, 0.0)]],
            vec![vec![ScalarField::constant(0, 1.0)]],
        )
        .unwrap();
        assert!(matches!(l.forward(&[0.3]), Err(Error::WeightConstraint(_))));
    }

    #[test]
    fn sos_constant_two() {
        // r = 0, h₀ ≡ 2, c ≡ 0: (a, 1) ↦ (a, ∫₀¹ 2² du) = (a, 4).
        let l = Layer::Sos(
            SosLayer::new(2, ScalarField::constant(1, 0.0), vec![ScalarField::constant(1, 2.0)])
                .unwrap(),
        );
        let y = layer_forward(&l, &[0.3, 1.0]).unwrap();
        assert!((y[1] - 4.0).abs() < 1e-12);
        let x = layer_inverse(&l, &[0.3, 4.0]).unwrap();
        assert!((x[1] - 1.0).abs() < 1e-9);
        // log-det: ∂/∂x_d = 2² = 4.
        let ld = layer_log_det(&l, &[0.3, 0.7]).unwrap();
        assert!((ld - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sos_closed_form_matches_quadrature() {
        let layer = SosLayer::new(
            2,
            ScalarField::linear(vec![0.5], 0.1),
            vec![
                ScalarField::constant(1, 1.0),
                ScalarField::linear(vec![1.0], 0.0),
                ScalarField::constant(1, -0.3),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let exact = layer.forward(&x);
            let quad = layer.forward_quadrature(&x);
            assert!((exact[1] - quad[1]).abs() < 1e-8, "{} vs {}", exact[1], quad[1]);
        }
    }

    #[test]
    fn permutation_layer_swaps() {
        let l = Layer::Permutation(PermutationLayer::new(vec![1, 0]).unwrap());
        assert_eq!(layer_forward(&l, &[1.0, 2.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(layer_log_det(&l, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn affine_log_det_scaling() {
        // A = 2I in d = 3: log|det| = 3 ln 2.
        let l = Layer::Affine(
            AffineLayer::new(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3)).unwrap(),
        );
        let ld = layer_log_det(&l, &[1.0, 1.0, 1.0]).unwrap();
        assert!((ld - 3.0 * 2.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn affine_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            AffineLayer::new(a, DVector::zeros(2)),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn empty_inn_is_identity() {
        let inn = Inn::identity(3);
        assert_eq!(inn.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(inn.log_det(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn layer_then_inverse_layer_is_identity() {
        let shear = AcfLayer::new(
            2,
            1,
            vec![ScalarField::constant(1, 0.4)],
            vec![ScalarField::linear(vec![2.0], 0.1)],
        )
        .unwrap();
        let fwd = Layer::Acf(shear);
        let x = [0.3, -1.2];
        let y = layer_forward(&fwd, &x).unwrap();
        let back = layer_inverse(&fwd, &y).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn inn_storage_order_applies_first_element_first() {
        // Shift-then-scale differs from scale-then-shift; pin the convention.
        let shift = Layer::Acf(
            AcfLayer::new(
                2,
                1,
                vec![ScalarField::constant(1, 0.0)],
                vec![ScalarField::constant(1, 1.0)],
            )
            .unwrap(),
        );
        let scale = Layer::Acf(
            AcfLayer::new(
                2,
                1,
                vec![ScalarField::constant(1, 2.0_f64.ln())],
                vec![ScalarField::constant(1, 0.0)],
            )
            .unwrap(),
        );
        let inn = Inn::new(2, vec![shift, scale]).unwrap();
        // (0, 1): shift → (0, 2), then scale → (0, 4).
        let y = inn.forward(&[0.0, 1.0]).unwrap();
        assert_eq!(y[1], 4.0);
    }

    #[test]
    fn six_factor_sign_flip_matrix() {
        let layers = sign_flip_layers(2, 0).unwrap();
        let inn = Inn::new(2, layers).unwrap();
        // Extract the product matrix by applying to basis vectors.
        let e1 = inn.forward(&[1.0, 0.0]).unwrap();
        let e2 = inn.forward(&[0.0, 1.0]).unwrap();
        assert!((e1[0] + 1.0).abs() <= 1e-12 && e1[1].abs() <= 1e-12, "{e1:?}");
        assert!((e2[0]).abs() <= 1e-12 && (e2[1] - 1.0).abs() <= 1e-12, "{e2:?}");
    }

    #[test]
    fn realize_gl_identity() {
        let inn = realize_gl(&DMatrix::identity(2, 2), &DVector::zeros(2)).unwrap();
        let y = inn.forward(&[0.3, -0.7]).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-12 && (y[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn realize_gl_diag_sign_flip() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let inn = realize_gl(&a, &DVector::zeros(2)).unwrap();
        for l in inn.layers() {
            assert!(!matches!(l, Layer::Affine(_)), "realization must avoid affine layers");
        }
        let e1 = inn.forward(&[1.0, 0.0]).unwrap();
        let e2 = inn.forward(&[0.0, 1.0]).unwrap();
        assert!((e1[0] + 1.0).abs() <= 1e-12 && e1[1].abs() <= 1e-12);
        assert!(e2[0].abs() <= 1e-12 && (e2[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn realize_gl_random_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-2.0_f64..2.0));
            if a.determinant().abs() < 0.05 {
                continue;
            }
            let b = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let inn = realize_gl(&a, &b).unwrap();
            let a_norm = a.norm();
            for _ in 0..20 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let want = &a * DVector::from_column_slice(&x) + &b;
                let got = inn.forward(&x).unwrap();
                let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = 1.0 + a_norm * xnorm;
                for i in 0..3 {
                    assert!(
                        (got[i] - want[i]).abs() <= 1e-9 * scale,
                        "error {} vs scale {}",
                        (got[i] - want[i]).abs(),
                        scale
                    );
                }
            }
        }
    }

    #[test]
    fn inn_json_round_trip() {
        let layers = vec![
            Layer::Permutation(PermutationLayer::new(vec![1, 0]).unwrap()),
            Layer::Acf(
                AcfLayer::new(
                    2,
                    1,
                    vec![ScalarField::constant(1, 0.3)],
                    vec![ScalarField::linear(vec![0.5], -0.2)],
                )
                .unwrap(),
            ),
            Layer::Affine(
                AffineLayer::new(
                    DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]),
                    DVector::from_vec(vec![0.1, -0.4]),
                )
                .unwrap(),
            ),
        ];
        let inn = Inn::new(2, layers).unwrap();
        let json = inn.to_json().unwrap();
        let back = Inn::from_json(&json).unwrap();
        let x = [0.7, -1.1];
        let a = inn.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn closure_conditioners_are_not_serializable() {
        let acf = AcfLayer::new(
            2,
            1,
            vec![ScalarField::from_fn(1, |x| x[0].sin())],
            vec![ScalarField::constant(1, 0.0)],
        )
        .unwrap();
        let inn = Inn::new(2, vec![Layer::Acf(acf)]).unwrap();
        assert!(inn.to_json().is_err());
    }
}
