//! Factorization of near-identity diffeomorphisms into single-coordinate
//! monotone maps, plus the flow-splitting step that makes an arbitrary flow
//! endpoint near the identity.
//!
//! The pipeline: split a time-1 flow into n equal sub-time factors until each
//! factor is close enough to the identity (operator norm of Dφ − I below 1 on
//! the working box), then peel off one coordinate at a time, from the last to
//! the first, inverting each peeled factor by monotone root finding.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::CompactBox;
use crate::node::FlowHandle;
use crate::roots;

/// Maximum number of factors `split_until_near_id` will try.
pub const SPLIT_CAP: usize = 1024;

/// Margin by which the near-identity operator-norm check must clear 1.
pub const NEAR_ID_MARGIN: f64 = 1e-9;

/// Determinant floor for the trailing-minor test.
pub const MINOR_THRESHOLD: f64 = 1e-10;

type EvalFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;
type JacFn = Arc<dyn Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync>;

/// A map R^d → R^d given by an evaluation closure and an optional analytic
/// Jacobian; without one, Jacobians come from central differences.
#[derive(Clone)]
pub struct SmoothMap {
    dim: usize,
    eval: EvalFn,
    jac: Option<JacFn>,
    fd_step: f64,
}

impl SmoothMap {
    pub fn new<F>(dim: usize, f: F) -> SmoothMap
    where
        F: Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        SmoothMap { dim, eval: Arc::new(f), jac: None, fd_step: 1e-6 }
    }

    pub fn with_jacobian<J>(mut self, j: J) -> SmoothMap
    where
        J: Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(j));
        self
    }

    /// The time-`t` map of a flow handle.
    pub fn from_flow(handle: &FlowHandle, t: f64) -> SmoothMap {
        let handle = handle.clone();
        SmoothMap::new(handle.dim(), move |x| Ok(handle.eval(x, t)))
    }

    pub fn identity(dim: usize) -> SmoothMap {
        SmoothMap::new(dim, |x| Ok(x.to_vec()))
            .with_jacobian(move |_| Ok(DMatrix::identity(dim, dim)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let y = (self.eval)(x)?;
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(y)
    }

    /// Jacobian at x, analytic when available, otherwise central differences.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if let Some(j) = &self.jac {
            return j(x);
        }
        let d = self.dim;
        let h = self.fd_step;
        let mut m = DMatrix::zeros(d, d);
        for col in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[col] += h;
            xm[col] -= h;
            let fp = self.eval(&xp)?;
            let fm = self.eval(&xm)?;
            for row in 0..d {
                m[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        Ok(m)
    }
}

fn grid_points(k: &CompactBox, n_per_axis: usize) -> Vec<Vec<f64>> {
    let bounds = k.bounds();
    let d = bounds.len();
    let n = n_per_axis.max(2);
    let total = n.pow(d as u32);
    let mut pts = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = Vec::with_capacity(d);
        for &(lo, hi) in bounds {
            let i = rem % n;
            rem /= n;
            x.push(lo + (hi - lo) * i as f64 / (n - 1) as f64);
        }
        pts.push(x);
    }
    pts
}

/// Result of probing Dφ − I over a grid on the box.
#[derive(Clone, Debug, Serialize)]
pub struct NearIdReport {
    pub max_op_norm: f64,
    pub ok: bool,
}

/// Check that the map is a strict operator-norm contraction of the identity
/// perturbation: max over grid nodes of ‖Dφ(x) − I‖₂ must be below 1 (with a
/// small safety margin).
pub fn near_id_check(map: &SmoothMap, k: &CompactBox, grid_n: usize) -> Result<NearIdReport> {
    let d = map.dim();
    if k.bounds().len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: k.bounds().len() });
    }
    let mut max_op_norm = 0.0_f64;
    for x in grid_points(k, grid_n) {
        let mut j = map.jacobian(&x)?;
        for i in 0..d {
            j[(i, i)] -= 1.0;
        }
        let s = j.svd(false, false).singular_values;
        let op = s.iter().cloned().fold(0.0, f64::max);
        max_op_norm = max_op_norm.max(op);
    }
    Ok(NearIdReport { max_op_norm, ok: max_op_norm < 1.0 - NEAR_ID_MARGIN })
}

/// All trailing principal minors (the k×k lower-right blocks, k = 1..=d) must
/// be nonsingular; this is the structural condition under which one
/// coordinate at a time can be peeled off.
pub fn trailing_minors_nonzero(j: &DMatrix<f64>) -> bool {
    let d = j.nrows();
    if j.ncols() != d || d == 0 {
        return false;
    }
    for k in 1..=d {
        let block = j.view((d - k, d - k), (k, k)).clone_owned();
        if block.determinant().abs() <= MINOR_THRESHOLD {
            return false;
        }
    }
    true
}

/// Split the time-1 endpoint of an autonomous flow into n equal factors, each
/// the time-1/n map. Composing the returned maps (in any order; they are all
/// the same map) reproduces the endpoint.
pub fn flow_endpoint_split(phi: &FlowHandle, n: usize) -> Vec<SmoothMap> {
    let factor = SmoothMap::from_flow(phi, 1.0 / n as f64);
    vec![factor; n]
}

/// Keep doubling the number of factors until one factor passes
/// [`near_id_check`] on the box, up to [`SPLIT_CAP`] factors.
pub fn split_until_near_id(
    phi: &FlowHandle,
    k: &CompactBox,
    grid_n: usize,
) -> Result<(Vec<SmoothMap>, usize)> {
    let mut n = 1;
    let mut last_norm = f64::INFINITY;
    while n <= SPLIT_CAP {
        let factors = flow_endpoint_split(phi, n);
        let report = near_id_check(&factors[0], k, grid_n)?;
        last_norm = report.max_op_norm;
        if report.ok {
            return Ok((factors, n));
        }
        n *= 2;
    }
    Err(Error::SplitCapReached { cap: SPLIT_CAP, max_op_norm: last_norm })
}

/// One factor of a triangular factorization: it rewrites a single coordinate
/// as a strictly increasing function of the input, leaving all others fixed.
#[derive(Clone)]
pub struct SingleCoordinateFactor {
    pub index: usize,
    dim: usize,
    h: Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>,
    bracket: (f64, f64),
    tol: f64,
}

impl SingleCoordinateFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The rewritten coordinate's value at x.
    pub fn coordinate_map(&self, x: &[f64]) -> Result<f64> {
        (self.h)(x)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut y = x.to_vec();
        y[self.index] = (self.h)(x)?;
        Ok(y)
    }

    /// Inverse by monotone root finding in the rewritten coordinate.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        let mut probe = y.to_vec();
        let idx = self.index;
        let mut inner_err: Option<Error> = None;
        let seed = y[idx].clamp(self.bracket.0, self.bracket.1);
        let root = {
            let h = &self.h;
            let mut f = |v: f64| -> f64 {
                probe[idx] = v;
                match h(&probe) {
                    Ok(val) => val,
                    Err(e) => {
                        if inner_err.is_none() {
                            inner_err = Some(e);
                        }
                        f64::NAN
                    }
                }
            };
            roots::invert_monotone(&mut f, y[idx], seed, self.tol)
        };
        if let Some(e) = inner_err {
            return Err(e);
        }
        let mut x = y.to_vec();
        x[idx] = root?;
        Ok(x)
    }
}

/// A triangular factorization f = F_1 ∘ … ∘ F_d, where F_d (the last element
/// of `factors`) is applied first and F_i rewrites coordinate i−1 only.
#[derive(Clone)]
pub struct Factorization {
    pub factors: Vec<SingleCoordinateFactor>,
    /// Max composition error observed on the validation grid.
    pub residual: f64,
}

impl Factorization {
    /// Apply the full composition (last factor first).
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = x.to_vec();
        for f in self.factors.iter().rev() {
            z = f.forward(&z)?;
        }
        Ok(z)
    }

    /// Invert the full composition (first factor first).
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut z = y.to_vec();
        for f in &self.factors {
            z = f.inverse(&z)?;
        }
        Ok(z)
    }
}

/// Peel a near-identity map into single-coordinate monotone factors.
///
/// Working from the last coordinate to the first, the current residual map g
/// (initially f) donates its m-th component as the factor's coordinate map,
/// and g is replaced by g ∘ F_m⁻¹, which then fixes coordinate m. The result
/// is validated on a grid: the composition must reproduce f to within 10×tol
/// and each coordinate map must be strictly increasing along its own axis.
pub fn triangular_factorize(
    f: &SmoothMap,
    k: &CompactBox,
    grid_n: usize,
    tol: f64,
) -> Result<Factorization> {
    let d = f.dim();
    if k.bounds().len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: k.bounds().len() });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }

    // Bracket for the factor inverses: the box inflated by the maximum
    // displacement of f on the grid, plus one.
    let probes = grid_points(k, grid_n);
    let mut max_disp = 0.0_f64;
    for x in &probes {
        let y = f.eval(x)?;
        for (a, b) in x.iter().zip(&y) {
            max_disp = max_disp.max((a - b).abs());
        }
    }
    let lo = k.bounds().iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
    let hi = k.bounds().iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let bracket = (lo - max_disp - 1.0, hi + max_disp + 1.0);

    // Peel coordinates d−1 down to 0. `g` is the residual map.
    let mut g: EvalFn = {
        let f = f.clone();
        Arc::new(move |x: &[f64]| f.eval(x))
    };
    let mut collected: Vec<SingleCoordinateFactor> = Vec::with_capacity(d);
    for m in (0..d).rev() {
        let g_now = g.clone();
        let h: Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync> =
            Arc::new(move |x: &[f64]| Ok(g_now(x)?[m]));
        let factor = SingleCoordinateFactor {
            index: m,
            dim: d,
            h: h.clone(),
            bracket,
            tol,
        };
        // Residual update: g ← g ∘ F_m⁻¹.
        let g_prev = g.clone();
        let factor_for_g = factor.clone();
        g = Arc::new(move |x: &[f64]| {
            let pre = factor_for_g.inverse(x)?;
            g_prev(&pre)
        });
        collected.push(factor);
    }
    collected.reverse(); // factors[0] rewrites coordinate 0 and is applied last

    let fact = Factorization { factors: collected, residual: 0.0 };

    // Validation: composition error on the grid.
    let mut residual = 0.0_f64;
    for x in &probes {
        let want = f.eval(x)?;
        let got = fact.eval(x)?;
        for (a, b) in want.iter().zip(&got) {
            residual = residual.max((a - b).abs());
        }
    }
    if residual > 10.0 * tol {
        return Err(Error::InvalidInput(format!(
            "factorization residual {residual:e} exceeds 10x tolerance {tol:e}"
        )));
    }

    // Monotonicity sweeps: each coordinate map strictly increasing along its
    // own axis through the box center.
    let center: Vec<f64> = k.bounds().iter().map(|&(a, b)| 0.5 * (a + b)).collect();
    for factor in &fact.factors {
        let (lo, hi) = k.bounds()[factor.index];
        let mut prev = f64::NEG_INFINITY;
        for s in 0..100 {
            let mut x = center.clone();
            x[factor.index] = lo + (hi - lo) * s as f64 / 99.0;
            let v = factor.coordinate_map(&x)?;
            if v <= prev {
                return Err(Error::NotMonotone(v - prev));
            }
            prev = v;
        }
    }

    Ok(Factorization { residual, ..fact })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(d: usize) -> CompactBox {
        CompactBox::new(vec![(-1.0, 1.0); d]).unwrap()
    }

    #[test]
    fn identity_is_near_id() {
        let m = SmoothMap::identity(2);
        let r = near_id_check(&m, &unit_box(2), 5).unwrap();
        assert!(r.ok);
        assert!(r.max_op_norm < 1e-12);
    }

    #[test]
    fn doubling_map_is_not_near_id() {
        let m = SmoothMap::new(1, |x| Ok(vec![2.0 * x[0]]));
        let r = near_id_check(&m, &unit_box(1), 5).unwrap();
        assert!(!r.ok);
        assert!((r.max_op_norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn trailing_minors_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(trailing_minors_nonzero(&id));
        // Zero in the bottom-right corner kills the 1×1 trailing minor.
        let mut bad = id.clone();
        bad[(2, 2)] = 0.0;
        assert!(!trailing_minors_nonzero(&bad));
        // Nonsingular matrix whose trailing 2×2 block is singular.
        let m = DMatrix::from_row_slice(3, 3, &[
            1.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, //
            0.0, 1.0, 1.0 + 1e-14,
        ]);
        assert!(!trailing_minors_nonzero(&m));
    }

    #[test]
    fn factorize_identity() {
        let f = SmoothMap::identity(2);
        let fact = triangular_factorize(&f, &unit_box(2), 5, 1e-12).unwrap();
        assert_eq!(fact.factors.len(), 2);
        let y = fact.eval(&[0.3, -0.4]).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-10);
        assert!((y[1] + 0.4).abs() < 1e-10);
    }

    #[test]
    fn factorize_small_shear() {
        // f(x, y) = (x + 0.1·sin(y), y + 0.1·x) is near the identity on the
        // unit box; the factorization must reproduce it and round-trip.
        let f = SmoothMap::new(2, |x| {
            Ok(vec![x[0] + 0.1 * x[1].sin(), x[1] + 0.1 * x[0]])
        });
        assert!(near_id_check(&f, &unit_box(2), 7).unwrap().ok);
        let fact = triangular_factorize(&f, &unit_box(2), 7, 1e-10).unwrap();
        assert!(fact.residual <= 1e-9);
        for &p in &[[0.2, 0.7], [-0.5, -0.1], [0.9, -0.9]] {
            let want = f.eval(&p).unwrap();
            let got = fact.eval(&p).unwrap();
            assert!((want[0] - got[0]).abs() < 1e-8);
            assert!((want[1] - got[1]).abs() < 1e-8);
            let back = fact.inverse(&got).unwrap();
            assert!((back[0] - p[0]).abs() < 1e-7);
            assert!((back[1] - p[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn split_reduces_displacement() {
        use crate::node::bump_flow_1d;
        let phi = bump_flow_1d();
        let k = CompactBox::new(vec![(-1.0, 1.0)]).unwrap();
        let (factors, n) = split_until_near_id(&phi, &k, 9).unwrap();
        assert_eq!(factors.len(), n);
        // Composing the factors reproduces the time-1 endpoint.
        let x = [0.3];
        let mut z = x.to_vec();
        for f in &factors {
            z = f.eval(&z).unwrap();
        }
        let direct = phi.eval(&x, 1.0);
        assert!((z[0] - direct[0]).abs() < 1e-6, "{} vs {}", z[0], direct[0]);
    }
}
