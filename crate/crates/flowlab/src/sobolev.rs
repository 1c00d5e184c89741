//! Discretized Sobolev-type seminorms for comparing maps on a compact box.
//!
//! The seminorm of a difference d = f − g is the sum over derivative orders
//! |α| ≤ r of the spatial L^p norm of ‖∂^α d‖ (Euclidean norm over output
//! components). Finite p uses a midpoint Riemann sum over cell centers; p = ∞
//! takes the max over a node grid that includes the box boundary, so boundary
//! suprema are observed.

use crate::error::{Error, Result};
use crate::metrics::CompactBox;

/// Spatial aggregation exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    P1,
    P2,
    PInf,
}

/// Specification of a seminorm: the box K, the derivative order r ∈ {0, 1},
/// the exponent, the per-axis grid resolution (≥ 8), and the finite-difference
/// step for first derivatives.
#[derive(Clone, Debug)]
pub struct SeminormSpec {
    pub k: CompactBox,
    pub r: u8,
    pub p: Aggregate,
    pub resolution: usize,
    pub fd_step: f64,
}

impl SeminormSpec {
    pub fn new(k: CompactBox, r: u8, p: Aggregate, resolution: usize) -> Result<SeminormSpec> {
        if r > 1 {
            return Err(Error::InvalidInput("derivative order must be 0 or 1".into()));
        }
        if resolution < 8 {
            return Err(Error::InvalidInput("seminorm resolution must be at least 8".into()));
        }
        Ok(SeminormSpec { k, r, p, resolution, fd_step: 1e-5 })
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Seminorm of f − g per `spec`. Both maps must produce outputs of equal
/// length at every node.
pub fn seminorm_diff<F, G>(f: F, g: G, spec: &SeminormSpec) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let bounds = spec.k.bounds();
    let dim = bounds.len();
    let res = spec.resolution;

    let diff = |x: &[f64]| -> Result<Vec<f64>> {
        let a = f(x)?;
        let b = g(x)?;
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
        }
        Ok(a.iter().zip(&b).map(|(u, v)| u - v).collect())
    };

    // Pointwise values of ‖∂^α d‖ for every multi-index with |α| ≤ r: index 0
    // is the value itself, index 1 + axis is the first partial along `axis`.
    let n_terms = 1 + if spec.r >= 1 { dim } else { 0 };
    let point_terms = |x: &[f64]| -> Result<Vec<f64>> {
        let mut terms = Vec::with_capacity(n_terms);
        terms.push(norm2(&diff(x)?));
        if spec.r >= 1 {
            let h = spec.fd_step;
            for axis in 0..dim {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[axis] += h;
                xm[axis] -= h;
                let dp = diff(&xp)?;
                let dm = diff(&xm)?;
                let deriv: Vec<f64> =
                    dp.iter().zip(&dm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                terms.push(norm2(&deriv));
            }
        }
        Ok(terms)
    };

    match spec.p {
        Aggregate::PInf => {
            // Node grid including endpoints: res+1 nodes per axis.
            let mut maxima = vec![0.0_f64; n_terms];
            let n_nodes = (res + 1).pow(dim as u32);
            for flat in 0..n_nodes {
                let mut rem = flat;
                let mut x = Vec::with_capacity(dim);
                for &(lo, hi) in bounds {
                    let k = rem % (res + 1);
                    rem /= res + 1;
                    x.push(lo + (hi - lo) * k as f64 / res as f64);
                }
                for (m, t) in maxima.iter_mut().zip(point_terms(&x)?) {
                    *m = m.max(t);
                }
            }
            Ok(maxima.iter().sum())
        }
        Aggregate::P1 | Aggregate::P2 => {
            let p = if spec.p == Aggregate::P1 { 1.0 } else { 2.0 };
            let cell_vol: f64 =
                bounds.iter().map(|&(lo, hi)| (hi - lo) / res as f64).product();
            let mut sums = vec![0.0_f64; n_terms];
            let n_cells = res.pow(dim as u32);
            for flat in 0..n_cells {
                let mut rem = flat;
                let mut x = Vec::with_capacity(dim);
                for &(lo, hi) in bounds {
                    let k = rem % res;
                    rem /= res;
                    x.push(lo + (hi - lo) * (k as f64 + 0.5) / res as f64);
                }
                for (s, t) in sums.iter_mut().zip(point_terms(&x)?) {
                    *s += t.powf(p) * cell_vol;
                }
            }
            Ok(sums.iter().map(|s| s.powf(1.0 / p)).sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(lo: f64, hi: f64) -> CompactBox {
        CompactBox::new(vec![(lo, hi)]).unwrap()
    }

    fn ok(v: Vec<f64>) -> Result<Vec<f64>> {
        Ok(v)
    }

    #[test]
    fn sup_norm_with_derivative_counts_both_terms() {
        // f = 2x, g = x on [0,1]: sup|x| = 1 at the right endpoint, plus
        // sup|1| = 1 for the derivative term.
        let spec = SeminormSpec::new(boxed(0.0, 1.0), 1, Aggregate::PInf, 16).unwrap();
        let v = seminorm_diff(|x| ok(vec![2.0 * x[0]]), |x| ok(vec![x[0]]), &spec).unwrap();
        assert!((v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn l1_of_constant_difference() {
        // |f − g| ≡ 0.5 on [0,2] → L¹ = 1.
        let spec = SeminormSpec::new(boxed(0.0, 2.0), 0, Aggregate::P1, 32).unwrap();
        let v = seminorm_diff(|_| ok(vec![0.5]), |_| ok(vec![0.0]), &spec).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn l2_of_linear_difference() {
        // d = x on [0,1]: ‖d‖₂ = 1/√3. Midpoint rule is second order.
        let spec = SeminormSpec::new(boxed(0.0, 1.0), 0, Aggregate::P2, 256).unwrap();
        let v = seminorm_diff(|x| ok(vec![x[0]]), |_| ok(vec![0.0]), &spec).unwrap();
        assert!((v - 1.0 / 3.0_f64.sqrt()).abs() < 1e-5, "{v}");
    }

    #[test]
    fn two_dimensional_inputs_and_vector_outputs() {
        let k = CompactBox::new(vec![(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let spec = SeminormSpec::new(k, 0, Aggregate::PInf, 8).unwrap();
        // d = (x, y): sup ‖d‖ = √2 at the corner.
        let v = seminorm_diff(
            |x| ok(vec![x[0], x[1]]),
            |_| ok(vec![0.0, 0.0]),
            &spec,
        )
        .unwrap();
        assert!((v - 2.0_f64.sqrt()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(SeminormSpec::new(boxed(0.0, 1.0), 2, Aggregate::P1, 16).is_err());
        assert!(SeminormSpec::new(boxed(0.0, 1.0), 0, Aggregate::P1, 4).is_err());
    }
}
