//! A minimal dense MLP with scalar output and hand-rolled backprop. This is
//! the concrete universal conditioner class used by demos; it deliberately has
//! no optimizer beyond full-batch gradient descent with a fixed learning rate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Dense feed-forward net with widths `[m, h1, …, 1]`, hidden activations, and
/// a linear scalar output. Weight matrices are stored row-major (out × in).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// weights[l] has widths[l+1] × widths[l] entries, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-parameter gradients in the same layout as [`Mlp::weights`] / biases.
#[derive(Clone, Debug)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Seeded initialization: uniform ±1/√fan_in for weights, zero biases.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Result<Mlp> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput("need at least input and output widths".into()));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidInput("output width must be 1 (scalar fields)".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { widths: widths.to_vec(), activation, weights, biases })
    }

    pub fn input_arity(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let layers = self.widths.len() - 1;
        let mut activations = vec![x.to_vec()];
        let mut preacts = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let a = &activations[l];
            let mut z = self.biases[l].clone();
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                z[i] += row.iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
            }
            let out = if l + 1 == layers {
                z.clone() // linear output layer
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            preacts.push(z);
            activations.push(out);
        }
        (activations, preacts)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.input_arity(), "mlp input arity mismatch");
        let (activations, _) = self.forward_trace(x);
        activations.last().unwrap()[0]
    }

    /// Output value together with gradients of the output w.r.t. every
    /// parameter (reverse-mode, exact up to ReLU kinks).
    pub fn output_and_grads(&self, x: &[f64]) -> (f64, Grads) {
        let layers = self.widths.len() - 1;
        let (activations, preacts) = self.forward_trace(x);
        let out = activations[layers][0];

        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        // delta over the output layer: scalar output, identity activation.
        let mut delta = vec![1.0];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            for i in 0..n_out {
                gb[l][i] = delta[i];
                for j in 0..n_in {
                    gw[l][i * n_in + j] = delta[i] * activations[l][j];
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; n_in];
            for j in 0..n_in {
                let mut s = 0.0;
                for i in 0..n_out {
                    s += self.weights[l][i * n_in + j] * delta[i];
                }
                prev[j] = s * self.activation.derivative(preacts[l - 1][j]);
            }
            delta = prev;
        }
        (out, Grads { weights: gw, biases: gb })
    }

    /// Upper bound on the Lipschitz constant: product of per-layer spectral
    /// norm upper bounds (power iteration, 50 iterations). Valid because both
    /// activations are 1-Lipschitz.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        let mut product = 1.0;
        for l in 0..self.widths.len() - 1 {
            product *= spectral_norm(&self.weights[l], self.widths[l + 1], self.widths[l]);
        }
        product
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Mlp> {
        let net: Mlp = serde_json::from_str(s)?;
        if net.widths.len() < 2 || *net.widths.last().unwrap() != 1 {
            return Err(Error::InvalidInput("bad widths in serialized net".into()));
        }
        for l in 0..net.widths.len() - 1 {
            if net.weights[l].len() != net.widths[l] * net.widths[l + 1]
                || net.biases[l].len() != net.widths[l + 1]
            {
                return Err(Error::InvalidInput("parameter shape mismatch in serialized net".into()));
            }
        }
        Ok(net)
    }
}

fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    // Power iteration with a deterministic start; a small headroom factor
    // keeps the returned value an upper bound despite finite iteration count.
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    for _ in 0..50 {
        let mut u = vec![0.0; rows];
        for i in 0..rows {
            u[i] = w[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut vn = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                vn[j] += w[i * cols + j] * u[i];
            }
        }
        let norm = vn.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in vn.iter_mut() {
            *x /= norm;
        }
        v = vn;
    }
    let mut u = vec![0.0; rows];
    for i in 0..rows {
        u[i] = w[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
    }
    u.iter().map(|x| x * x).sum::<f64>().sqrt() * (1.0 + 1e-9)
}

/// Training result: the fitted net and the final mean-squared error.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub net: Mlp,
    pub final_mse: f64,
}

/// Fit a scalar field on a box by seeded full-batch gradient descent on MSE
/// over uniform samples. Deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn mlp_fit(
    target: &ScalarField,
    domain: &[(f64, f64)],
    n_samples: usize,
    widths: &[usize],
    activation: Activation,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<FitResult> {
    if domain.len() != target.arity() || widths.first() != Some(&domain.len()) {
        return Err(Error::InvalidInput("domain / arity / widths disagree".into()));
    }
    if domain.iter().any(|&(lo, hi)| !(hi > lo)) {
        return Err(Error::InvalidInput("degenerate domain box".into()));
    }
    if n_samples < 16 {
        return Err(Error::InvalidInput("need at least 16 samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| domain.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect())
        .collect();
    let ys: Vec<f64> = xs.iter().map(|x| target.eval(x)).collect();

    let mut net = Mlp::init(widths, activation, seed.wrapping_add(1))?;
    let inv_n = 1.0 / n_samples as f64;
    let mut mse = f64::INFINITY;
    for epoch in 0..epochs {
        let mut acc_w: Vec<Vec<f64>> = net.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut acc_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let (out, grads) = net.output_and_grads(x);
            let err = out - y;
            loss += err * err;
            let scale = 2.0 * err * inv_n;
            for l in 0..acc_w.len() {
                for (a, g) in acc_w[l].iter_mut().zip(&grads.weights[l]) {
                    *a += scale * g;
                }
                for (a, g) in acc_b[l].iter_mut().zip(&grads.biases[l]) {
                    *a += scale * g;
                }
            }
        }
        mse = loss * inv_n;
        if !mse.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
        }
        for l in 0..acc_w.len() {
            for (w, g) in net.weights[l].iter_mut().zip(&acc_w[l]) {
                *w -= lr * g;
            }
            for (b, g) in net.biases[l].iter_mut().zip(&acc_b[l]) {
                *b -= lr * g;
            }
        }
    }
    Ok(FitResult { net, final_mse: mse })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = Mlp::init(&[3, 4, 1], Activation::Relu, 0).unwrap();
        for w in net.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.eval(&[1.0, -2.0, 3.0]), 0.0);
    }

    #[test]
    fn single_linear_relu_layer() {
        // w = (1, 1), b = 0, positive preactivation passes through relu-free
        // output layer: (2, 3) ↦ 5.
        let net = Mlp {
            widths: vec![2, 1],
            activation: Activation::Relu,
            weights: vec![vec![1.0, 1.0]],
            biases: vec![vec![0.0]],
        };
        assert_eq!(net.eval(&[2.0, 3.0]), 5.0);
    }

    #[test]
    fn tiny_tanh_net_linearizes() {
        // With weights scaled by ε, tanh(z) = z + O(z³); the net should match
        // its own linearization to O(ε³).
        let eps = 1e-4;
        let mut net = Mlp::init(&[2, 2, 1], Activation::Tanh, 11).unwrap();
        for w in net.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v *= eps);
        }
        let x = [0.7, -0.4];
        // Linearization: out ≈ W2 (W1 x + b1) + b2 with all b = 0.
        let w1 = &net.weights[0];
        let w2 = &net.weights[1];
        let h = [w1[0] * x[0] + w1[1] * x[1], w1[2] * x[0] + w1[3] * x[1]];
        let lin = w2[0] * h[0] + w2[1] * h[1];
        assert!((net.eval(&x) - lin).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = Mlp::init(&[2, 5, 3, 1], Activation::Tanh, 42).unwrap();
        let x = [0.3, -0.8];
        let (_, grads) = net.output_and_grads(&x);
        let h = 1e-6;
        for l in 0..net.weights.len() {
            for idx in 0..net.weights[l].len() {
                let mut plus = net.clone();
                plus.weights[l][idx] += h;
                let mut minus = net.clone();
                minus.weights[l][idx] -= h;
                let fd = (plus.eval(&x) - minus.eval(&x)) / (2.0 * h);
                let an = grads.weights[l][idx];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!((an - fd).abs() / denom < 1e-4, "layer {l} idx {idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn fit_zero_target_converges_fast() {
        let target = ScalarField::constant(1, 0.0);
        let fit =
            mlp_fit(&target, &[(-1.0, 1.0)], 32, &[1, 4, 1], Activation::Tanh, 2000, 0.2, 7)
                .unwrap();
        assert!(fit.final_mse <= 1e-4, "mse {}", fit.final_mse);
    }

    #[test]
    fn fit_identity_on_unit_interval() {
        let target = ScalarField::linear(vec![1.0], 0.0);
        let fit =
            mlp_fit(&target, &[(-1.0, 1.0)], 128, &[1, 8, 1], Activation::Tanh, 3000, 0.1, 7)
                .unwrap();
        let mut sup = 0.0_f64;
        for i in 0..=100 {
            let x = -1.0 + 2.0 * i as f64 / 100.0;
            sup = sup.max((fit.net.eval(&[x]) - x).abs());
        }
        assert!(sup <= 0.05, "sup error {sup}");
    }

    #[test]
    fn lipschitz_bound_dominates_empirical_slope() {
        let net = Mlp::init(&[2, 8, 1], Activation::Relu, 3).unwrap();
        let bound = net.lipschitz_upper_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = [rng.gen_range(-2.0_f64..2.0), rng.gen_range(-2.0_f64..2.0)];
            let b = [rng.gen_range(-2.0_f64..2.0), rng.gen_range(-2.0_f64..2.0)];
            let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if dist < 1e-9 {
                continue;
            }
            let slope = (net.eval(&a) - net.eval(&b)).abs() / dist;
            assert!(slope <= bound * (1.0 + 1e-9), "slope {slope} > bound {bound}");
        }
    }

    #[test]
    fn json_round_trip() {
        let net = Mlp::init(&[2, 3, 1], Activation::Relu, 5).unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
    }
}
