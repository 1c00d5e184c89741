//! Autonomous-ODE flow endpoints: RK4 integration of Lipschitz vector fields,
//! an invertible flow layer backed by time reversal, two analytic flow
//! examples (a compactly supported 1-D bump field and an annular rotation
//! flow), and the Grönwall approximation-error certificate.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::CompactBox;
use crate::{check_point, Point};

/// Default fixed-step resolution for RK4 integration (steps per unit time).
pub const DEFAULT_STEPS_PER_UNIT: usize = 256;

/// A vector field ℝ^d → ℝ^d with a caller-declared Lipschitz upper bound.
/// True global constants of black-box fields are uncomputable; the declared
/// value is spot-checked empirically (see [`VectorField::empirical_lip_ok`]).
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    pub lip: f64,
    pub support_radius: Option<f64>,
}

impl std::fmt::Debug for VectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("lip", &self.lip)
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(dim: usize, lip: f64, f: F) -> Result<VectorField>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(Error::InvalidInput("vector field needs dim >= 1".into()));
        }
        if !(lip > 0.0) {
            return Err(Error::InvalidInput("Lipschitz bound must be positive".into()));
        }
        Ok(VectorField { dim, eval: Arc::new(f), lip, support_radius: None })
    }

    pub fn with_support_radius(mut self, r: f64) -> VectorField {
        self.support_radius = Some(r);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (self.eval)(x)
    }

    /// The time-reversed field −f, inheriting the Lipschitz bound.
    pub fn negated(&self) -> VectorField {
        let inner = self.eval.clone();
        VectorField {
            dim: self.dim,
            eval: Arc::new(move |x| inner(x).into_iter().map(|v| -v).collect()),
            lip: self.lip,
            support_radius: self.support_radius,
        }
    }

    /// Empirical Lipschitz spot check: slope over `n_pairs` random pairs in a
    /// box must not exceed lip·(1 + 1e-6).
    pub fn empirical_lip_ok(&self, bounds: &[(f64, f64)], n_pairs: usize, seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect()
        };
        for _ in 0..n_pairs {
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            let dist: f64 =
                a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            if dist < 1e-12 {
                continue;
            }
            let fa = self.eval(&a);
            let fb = self.eval(&b);
            let diff: f64 =
                fa.iter().zip(&fb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            if diff > self.lip * (1.0 + 1e-6) * dist {
                return false;
            }
        }
        true
    }
}

/// Classic fixed-step RK4 trajectory endpoint for ż = f(z), z(0) = x.
pub fn integrate(field: &VectorField, x: &[f64], t_final: f64, steps: usize) -> Result<Point> {
    check_point(x)?;
    if x.len() != field.dim {
        return Err(Error::DimensionMismatch { expected: field.dim, got: x.len() });
    }
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let h = t_final / steps as f64;
    let mut z = x.to_vec();
    let d = z.len();
    for _ in 0..steps {
        let k1 = field.eval(&z);
        let z2: Vec<f64> = (0..d).map(|i| z[i] + 0.5 * h * k1[i]).collect();
        let k2 = field.eval(&z2);
        let z3: Vec<f64> = (0..d).map(|i| z[i] + 0.5 * h * k2[i]).collect();
        let k3 = field.eval(&z3);
        let z4: Vec<f64> = (0..d).map(|i| z[i] + h * k3[i]).collect();
        let k4 = field.eval(&z4);
        for i in 0..d {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
    }
    Ok(z)
}

/// RK4 on the state augmented with ℓ(t) = log det DΦ_t, using Jacobi's formula
/// ℓ̇ = tr Df(z(t)) with the trace estimated by central differences.
pub fn integrate_with_log_det(
    field: &VectorField,
    x: &[f64],
    t_final: f64,
    steps: usize,
) -> Result<(Point, f64)> {
    check_point(x)?;
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let d = x.len();
    let h = t_final / steps as f64;
    let fd = 1e-6;
    let trace = |z: &[f64]| -> f64 {
        let mut zp = z.to_vec();
        let mut acc = 0.0;
        for i in 0..d {
            zp[i] = z[i] + fd;
            let fp = field.eval(&zp)[i];
            zp[i] = z[i] - fd;
            let fm = field.eval(&zp)[i];
            zp[i] = z[i];
            acc += (fp - fm) / (2.0 * fd);
        }
        acc
    };
    let mut z = x.to_vec();
    let mut logdet = 0.0;
    for _ in 0..steps {
        let k1 = field.eval(&z);
        let t1 = trace(&z);
        let z2: Vec<f64> = (0..d).map(|i| z[i] + 0.5 * h * k1[i]).collect();
        let k2 = field.eval(&z2);
        let t2 = trace(&z2);
        let z3: Vec<f64> = (0..d).map(|i| z[i] + 0.5 * h * k2[i]).collect();
        let k3 = field.eval(&z3);
        let t3 = trace(&z3);
        let z4: Vec<f64> = (0..d).map(|i| z[i] + h * k3[i]).collect();
        let k4 = field.eval(&z4);
        let t4 = trace(&z4);
        for i in 0..d {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        logdet += h / 6.0 * (t1 + 2.0 * t2 + 2.0 * t3 + t4);
        if z.iter().any(|v| !v.is_finite()) || !logdet.is_finite() {
            return Err(Error::NonFinite);
        }
    }
    Ok((z, logdet))
}

/// Invertible layer realizing the time-T flow endpoint of an autonomous field.
/// The inverse integrates the negated field (exact time reversal for
/// autonomous dynamics).
#[derive(Clone, Debug)]
pub struct OdeFlowLayer {
    field: VectorField,
    horizon: f64,
    steps_per_unit: usize,
}

impl OdeFlowLayer {
    pub fn new(field: VectorField) -> OdeFlowLayer {
        OdeFlowLayer { field, horizon: 1.0, steps_per_unit: DEFAULT_STEPS_PER_UNIT }
    }

    pub fn with_horizon(mut self, t: f64) -> OdeFlowLayer {
        self.horizon = t;
        self
    }

    pub fn with_steps_per_unit(mut self, steps: usize) -> OdeFlowLayer {
        self.steps_per_unit = steps;
        self
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    fn steps(&self) -> usize {
        ((self.steps_per_unit as f64 * self.horizon.abs()).ceil() as usize).max(1)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Point> {
        integrate(&self.field, x, self.horizon, self.steps())
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Point> {
        integrate(&self.field.negated(), y, self.horizon, self.steps())
    }

    pub fn log_det(&self, x: &[f64]) -> Result<f64> {
        integrate_with_log_det(&self.field, x, self.horizon, self.steps()).map(|(_, l)| l)
    }
}

/// A flow Φ(x, t) defined for t in a neighborhood of [0, 1], with Φ(·, 0) = id
/// and the additive group law Φ(x, s+t) = Φ(Φ(x, s), t).
#[derive(Clone)]
pub struct FlowHandle {
    dim: usize,
    phi: Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>,
    /// Box outside which the flow acts as the identity at all times.
    pub support: Option<Vec<(f64, f64)>>,
}

impl std::fmt::Debug for FlowHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowHandle")
            .field("dim", &self.dim)
            .field("support", &self.support)
            .finish()
    }
}

impl FlowHandle {
    pub fn new<F>(dim: usize, phi: F) -> FlowHandle
    where
        F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    {
        FlowHandle { dim, phi: Arc::new(phi), support: None }
    }

    pub fn with_support(mut self, bounds: Vec<(f64, f64)>) -> FlowHandle {
        self.support = Some(bounds);
        self
    }

    /// ODE-backed flow: Φ(x, t) integrates the field over [0, t] with a step
    /// budget proportional to |t| (at least 16 steps).
    pub fn from_field(field: VectorField, steps_per_unit: usize) -> FlowHandle {
        let dim = field.dim;
        let support = field
            .support_radius
            .map(|r| (0..dim).map(|_| (-r, r)).collect::<Vec<_>>());
        let mut handle = FlowHandle::new(dim, move |x, t| {
            if t == 0.0 {
                return x.to_vec();
            }
            let steps = ((steps_per_unit as f64 * t.abs()).ceil() as usize).max(16);
            integrate(&field, x, t, steps).expect("field blow-up during flow evaluation")
        });
        handle.support = support;
        handle
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        (self.phi)(x, t)
    }
}

/// Smooth bump supported on (−1, 1): exp(−1/(1−s²)), extended by zero.
pub fn bump_unit(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

/// The compactly supported odd 1-D field v(x) = ṽ(|x|)·sign(x) with
/// supp ṽ ⊂ [0, 1] (ṽ is a bump centered at 1/2). Declared Lipschitz bound is
/// measured on a fine grid with 5% headroom.
pub fn bump_field_1d() -> VectorField {
    let v = |x: f64| -> f64 {
        let r = x.abs();
        let val = bump_unit(2.0 * r - 1.0);
        if x >= 0.0 {
            val
        } else {
            -val
        }
    };
    // sup |v'| over a fine grid; v is smooth, so grid + headroom is a sound
    // upper bound at this resolution.
    let mut lip: f64 = 0.0;
    let n = 20_000;
    let h = 1e-6;
    for i in 0..=n {
        let x = -1.1 + 2.2 * i as f64 / n as f64;
        lip = lip.max(((v(x + h) - v(x - h)) / (2.0 * h)).abs());
    }
    VectorField::new(1, lip * 1.05, move |x| vec![v(x[0])])
        .expect("bump field construction cannot fail")
        .with_support_radius(1.0)
}

/// ODE-backed flow endpoint handle for the 1-D bump field.
pub fn bump_flow_1d() -> FlowHandle {
    FlowHandle::from_field(bump_field_1d(), DEFAULT_STEPS_PER_UNIT)
}

fn skew_check(a: &DMatrix<f64>) -> Result<()> {
    let s = a + a.transpose();
    if s.iter().any(|v| v.abs() > 1e-12) {
        return Err(Error::InvalidInput("matrix is not skew-symmetric (within 1e-12)".into()));
    }
    Ok(())
}

/// Rotation flow Φ(x, t) = exp(t·φ(‖x‖)·A)x for skew-symmetric A, with the
/// radial bump φ supported on [r_in, r_out]. Evaluated in closed form
/// (planar rotation for d = 2, Rodrigues for d = 3), no ODE solve. The group
/// law is exact because exp(θA) is orthogonal, hence norm-preserving.
pub fn rotation_flow(a: &DMatrix<f64>, r_in: f64, r_out: f64) -> Result<FlowHandle> {
    skew_check(a)?;
    let d = a.nrows();
    if d != 2 && d != 3 {
        return Err(Error::InvalidInput("rotation flow supports d = 2 or 3".into()));
    }
    if !(0.0 < r_in && r_in < r_out) {
        return Err(Error::InvalidInput("need 0 < r_in < r_out".into()));
    }
    let phi_radial = move |r: f64| -> f64 {
        bump_unit((2.0 * r - r_in - r_out) / (r_out - r_in))
    };
    let handle: FlowHandle = if d == 2 {
        let omega = a[(1, 0)];
        FlowHandle::new(2, move |x, t| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let theta = t * phi_radial(r) * omega;
            let (s, c) = theta.sin_cos();
            vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]
        })
    } else {
        // Axis-angle form: A x = ω × x with ω = (a32, a13, a21).
        let omega = [a[(2, 1)], a[(0, 2)], a[(1, 0)]];
        let omega_norm =
            (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
        if omega_norm == 0.0 {
            return Err(Error::InvalidInput("rotation flow needs a nonzero skew matrix".into()));
        }
        let axis = [omega[0] / omega_norm, omega[1] / omega_norm, omega[2] / omega_norm];
        FlowHandle::new(3, move |x, t| {
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let theta = t * phi_radial(r) * omega_norm;
            let (s, c) = theta.sin_cos();
            let dot = axis[0] * x[0] + axis[1] * x[1] + axis[2] * x[2];
            let cross = [
                axis[1] * x[2] - axis[2] * x[1],
                axis[2] * x[0] - axis[0] * x[2],
                axis[0] * x[1] - axis[1] * x[0],
            ];
            (0..3).map(|i| x[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c)).collect()
        })
    };
    Ok(handle.with_support((0..d).map(|_| (-r_out, r_out)).collect()))
}

/// Report of the flow-endpoint perturbation bound: if ‖F − f‖ ≤ δ on an
/// enlarged set, the time-1 flows differ by at most 2δ·e^{Lip F}.
#[derive(Clone, Debug, Serialize)]
pub struct GronwallReport {
    pub delta: f64,
    pub lip_f: f64,
    pub bound: f64,
    pub measured: f64,
    pub pass: bool,
    pub steps: usize,
    pub n_probe: usize,
}

/// Measure δ = sup‖F − f‖ over a grid on K inflated by 2e^{Lip F}, integrate
/// both flows from seeded starts in K at high resolution, and certify that the
/// endpoint gap is within 2δ·e^{Lip F} plus integration slack.
pub fn gronwall_certificate(
    big_f: &VectorField,
    f: &VectorField,
    k: &CompactBox,
    n_probe: usize,
    seed: u64,
) -> Result<GronwallReport> {
    if big_f.dim != f.dim {
        return Err(Error::DimensionMismatch { expected: big_f.dim, got: f.dim });
    }
    let d = big_f.dim;
    let inflate = 2.0 * big_f.lip.exp();
    let prime: Vec<(f64, f64)> =
        k.bounds().iter().map(|&(lo, hi)| (lo - inflate, hi + inflate)).collect();

    // δ over a grid on the enlarged box.
    let grid_n = match d {
        1 => 4096,
        2 => 64,
        _ => 16,
    };
    let mut delta: f64 = 0.0;
    let mut idx = vec![0usize; d];
    loop {
        let x: Vec<f64> = (0..d)
            .map(|i| {
                let (lo, hi) = prime[i];
                lo + (hi - lo) * idx[i] as f64 / (grid_n - 1) as f64
            })
            .collect();
        let a = big_f.eval(&x);
        let b = f.eval(&x);
        let gap = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        delta = delta.max(gap);
        // advance the mixed-radix counter
        let mut i = 0;
        loop {
            if i == d {
                break;
            }
            idx[i] += 1;
            if idx[i] < grid_n {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
        if i == d {
            break;
        }
    }

    let steps = 2048;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut measured: f64 = 0.0;
    for _ in 0..n_probe {
        let x: Vec<f64> =
            k.bounds().iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
        let a = integrate(big_f, &x, 1.0, steps)?;
        let b = integrate(f, &x, 1.0, steps)?;
        let gap = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        measured = measured.max(gap);
    }

    let bound = 2.0 * delta * big_f.lip.exp();
    Ok(GronwallReport {
        delta,
        lip_f: big_f.lip,
        bound,
        measured,
        pass: measured <= bound + 1e-6,
        steps,
        n_probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_field() -> VectorField {
        VectorField::new(1, 1.0, |x| vec![x[0]]).unwrap()
    }

    #[test]
    fn zero_field_leaves_points_fixed() {
        let f = VectorField::new(2, 1e-9, |_| vec![0.0, 0.0]).unwrap();
        let y = integrate(&f, &[1.0, -2.0], 1.0, 16).unwrap();
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_field_is_exact() {
        let f = VectorField::new(2, 1e-9, |_| vec![0.5, -1.5]).unwrap();
        let y = integrate(&f, &[0.0, 0.0], 2.0, 7).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-14 && (y[1] + 3.0).abs() < 1e-14);
    }

    #[test]
    fn exponential_field_reaches_e() {
        let y = integrate(&exp_field(), &[1.0], 1.0, 256).unwrap();
        assert!((y[0] - std::f64::consts::E).abs() < 1e-10, "{}", y[0]);
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Error ratio between n and 2n steps should be ≈ 16 on a smooth field.
        let exact = std::f64::consts::E;
        let e1 = (integrate(&exp_field(), &[1.0], 1.0, 8).unwrap()[0] - exact).abs();
        let e2 = (integrate(&exp_field(), &[1.0], 1.0, 16).unwrap()[0] - exact).abs();
        let order = (e1 / e2).log2();
        assert!((3.5..=4.5).contains(&order), "order {order}");
    }

    #[test]
    fn ode_layer_round_trip() {
        let layer = OdeFlowLayer::new(bump_field_1d());
        let x = [0.4];
        let y = layer.forward(&x).unwrap();
        let back = layer.inverse(&y).unwrap();
        assert!((back[0] - x[0]).abs() < 1e-6, "round trip error {}", (back[0] - x[0]).abs());
    }

    #[test]
    fn ode_layer_log_det_matches_finite_differences() {
        let layer = OdeFlowLayer::new(bump_field_1d());
        let x = [0.3];
        let ld = layer.log_det(&x).unwrap();
        let h = 1e-6;
        let yp = layer.forward(&[x[0] + h]).unwrap()[0];
        let ym = layer.forward(&[x[0] - h]).unwrap()[0];
        let fd = ((yp - ym) / (2.0 * h)).abs().ln();
        assert!((ld - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "{ld} vs {fd}");
    }

    #[test]
    fn bump_flow_fixes_exterior() {
        let flow = bump_flow_1d();
        for t in [0.25, 0.5, 1.0] {
            let y = flow.eval(&[1.5], t);
            assert_eq!(y[0], 1.5);
            let y = flow.eval(&[-2.0], t);
            assert_eq!(y[0], -2.0);
        }
    }

    #[test]
    fn bump_field_lip_holds_empirically() {
        let f = bump_field_1d();
        assert!(f.empirical_lip_ok(&[(-1.5, 1.5)], 10_000, 5));
    }

    #[test]
    fn rotation_flow_is_quarter_turn_where_phi_is_known() {
        // With φ ≡ 1 nowhere exactly, instead check the closed form directly:
        // angle = t·φ(r)·ω, applied as a planar rotation.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let flow = rotation_flow(&a, 1.0, 2.0).unwrap();
        let x = [1.5, 0.0];
        let phi_val = bump_unit(0.0); // center of the annulus bump at r = 1.5
        let t = std::f64::consts::FRAC_PI_2 / phi_val;
        let y = flow.eval(&x, t);
        assert!((y[0]).abs() < 1e-12 && (y[1] - 1.5).abs() < 1e-12, "{y:?}");
    }

    #[test]
    fn rotation_flow_fixes_inside_and_outside() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let flow = rotation_flow(&a, 1.0, 2.0).unwrap();
        for t in [0.3, 1.0] {
            assert_eq!(flow.eval(&[0.5, 0.2], t), vec![0.5, 0.2]);
            assert_eq!(flow.eval(&[2.5, 0.0], t), vec![2.5, 0.0]);
        }
    }

    #[test]
    fn rotation_flow_group_law_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let flow = rotation_flow(&a, 1.0, 2.0).unwrap();
        let x = [1.3, 0.4];
        let lhs = flow.eval(&x, 0.7);
        let rhs = flow.eval(&flow.eval(&x, 0.3), 0.4);
        for (u, v) in lhs.iter().zip(&rhs) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn rotation_flow_rejects_non_skew() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(rotation_flow(&a, 1.0, 2.0).is_err());
    }

    #[test]
    fn gronwall_trivial_and_constant_shift() {
        let k = CompactBox::new(vec![(-0.5, 0.5)]).unwrap();
        let f0 = VectorField::new(1, 1e-9, |_| vec![0.0]).unwrap();
        let same = gronwall_certificate(&f0, &f0, &k, 10, 3).unwrap();
        assert!(same.pass && same.measured == 0.0);

        // F ≡ 0, f ≡ c: flows are x and x + ct, measured gap exactly |c| = δ.
        let shift = VectorField::new(1, 1e-9, |_| vec![0.25]).unwrap();
        let rep = gronwall_certificate(&f0, &shift, &k, 10, 3).unwrap();
        assert!((rep.delta - 0.25).abs() < 1e-12);
        assert!((rep.measured - 0.25).abs() < 1e-9, "measured {}", rep.measured);
        assert!(rep.pass);
    }
}
