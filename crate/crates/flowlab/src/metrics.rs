//! Integral probability metrics on grid and empirical measures, the
//! truncation operator, and automated inequality certificates.
//!
//! Conventions: `tv` returns both the IPM value (sup over ‖f‖_∞ ≤ 1, equal to
//! the L¹ distance of the cell weights) and the set-supremum value (half of
//! it). W₁ and the Dudley (bounded-Lipschitz) metric are solved exactly by
//! min-cost flow on the cell graph.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::transport::GridMeasure;

/// Cell budget for the exact W₁ solver.
pub const W1_CELL_BUDGET: usize = 4096;
/// Cell budget for the exact Dudley solver.
pub const DUDLEY_CELL_BUDGET: usize = 2048;

// ---------------------------------------------------------------------------
// Basic types
// ---------------------------------------------------------------------------

/// An axis-aligned compact box used as the compact set K.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompactBox {
    bounds: Vec<(f64, f64)>,
}

impl CompactBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<CompactBox> {
        if bounds.is_empty() || bounds.iter().any(|&(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidInput("box needs lo <= hi on every axis".into()));
        }
        Ok(CompactBox { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        self.bounds.iter().map(|&(lo, hi)| (hi - lo) * (hi - lo)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len()
            && x.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| lo <= v && v <= hi)
    }
}

/// A finite set of points with optional seed provenance.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub seed: Option<u64>,
}

impl SampleSet {
    pub fn new(dim: usize, points: Vec<Vec<f64>>) -> Result<SampleSet> {
        if points.is_empty() {
            return Err(Error::InvalidInput("sample set must be nonempty".into()));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        Ok(SampleSet { dim, points, seed: None })
    }
}

/// Positive-semidefinite kernels with sup_x k(x,x) = 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Gaussian { gamma: f64 },
    Laplacian { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Kernel::Gaussian { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
            Kernel::Laplacian { gamma } => {
                let d1: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
                (-gamma * d1).exp()
            }
        }
    }

    pub fn sup_diag(&self) -> f64 {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Total variation
// ---------------------------------------------------------------------------

/// Both total-variation conventions for one measure pair: `ipm` is the sup
/// over ‖f‖_∞ ≤ 1 (the L¹ distance of densities); `sup_a` is the set-supremum
/// distance, exactly half of it.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TvResult {
    pub ipm: f64,
    pub sup_a: f64,
}

fn check_same_grid(mu: &GridMeasure, nu: &GridMeasure) -> Result<()> {
    if mu.grid() != nu.grid() {
        return Err(Error::GridMismatch("measures live on different grids".into()));
    }
    Ok(())
}

pub fn tv_ipm(mu: &GridMeasure, nu: &GridMeasure) -> Result<TvResult> {
    check_same_grid(mu, nu)?;
    let l1: f64 = mu.weights().iter().zip(nu.weights()).map(|(a, b)| (a - b).abs()).sum();
    Ok(TvResult { ipm: l1, sup_a: 0.5 * l1 })
}

// ---------------------------------------------------------------------------
// Exact min-cost flow (successive shortest paths with potentials)
// ---------------------------------------------------------------------------

mod mcmf {
    /// Min-cost max-flow with integer capacities and nonnegative float costs,
    /// successive shortest paths with Dijkstra on reduced costs.
    pub struct Graph {
        n: usize,
        head: Vec<Vec<usize>>, // node -> edge indices
        to: Vec<usize>,
        cap: Vec<i64>,
        cost: Vec<f64>,
    }

    impl Graph {
        pub fn new(n: usize) -> Graph {
            Graph { n, head: vec![Vec::new(); n], to: Vec::new(), cap: Vec::new(), cost: Vec::new() }
        }

        pub fn add_edge(&mut self, u: usize, v: usize, cap: i64, cost: f64) {
            debug_assert!(cost >= 0.0);
            let e = self.to.len();
            self.to.push(v);
            self.cap.push(cap);
            self.cost.push(cost);
            self.head[u].push(e);
            self.to.push(u);
            self.cap.push(0);
            self.cost.push(-cost);
            self.head[v].push(e + 1);
        }

        /// Send as much flow as possible from s to t; returns (flow, cost).
        pub fn min_cost_flow(&mut self, s: usize, t: usize) -> (i64, f64) {
            let mut potential = vec![0.0_f64; self.n];
            let mut total_flow = 0i64;
            let mut total_cost = 0.0;
            loop {
                // Dijkstra on reduced costs.
                let mut dist = vec![f64::INFINITY; self.n];
                let mut prev_edge = vec![usize::MAX; self.n];
                dist[s] = 0.0;
                let mut heap = std::collections::BinaryHeap::new();
                heap.push(std::cmp::Reverse((ordered(0.0), s)));
                while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
                    let d = d.0;
                    if d > dist[u] + 1e-15 {
                        continue;
                    }
                    for &e in &self.head[u] {
                        if self.cap[e] <= 0 {
                            continue;
                        }
                        let v = self.to[e];
                        let nd = dist[u] + self.cost[e] + potential[u] - potential[v];
                        if nd + 1e-15 < dist[v] {
                            dist[v] = nd;
                            prev_edge[v] = e;
                            heap.push(std::cmp::Reverse((ordered(nd), v)));
                        }
                    }
                }
                if !dist[t].is_finite() {
                    break;
                }
                for i in 0..self.n {
                    if dist[i].is_finite() {
                        potential[i] += dist[i];
                    }
                }
                // Bottleneck along the path.
                let mut bottleneck = i64::MAX;
                let mut v = t;
                while v != s {
                    let e = prev_edge[v];
                    bottleneck = bottleneck.min(self.cap[e]);
                    v = self.to[e ^ 1];
                }
                let mut v = t;
                while v != s {
                    let e = prev_edge[v];
                    self.cap[e] -= bottleneck;
                    self.cap[e ^ 1] += bottleneck;
                    total_cost += self.cost[e] * bottleneck as f64;
                    v = self.to[e ^ 1];
                }
                total_flow += bottleneck;
            }
            (total_flow, total_cost)
        }
    }

    #[derive(PartialEq, PartialOrd)]
    pub struct Ordered(pub f64);
    impl Eq for Ordered {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for Ordered {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
        }
    }

    fn ordered(v: f64) -> Ordered {
        Ordered(v)
    }
}

/// Mass quantization scale for exact flow solvers (masses in [0,1] become i64).
const MASS_SCALE: f64 = 1e15;

struct ExcessSplit {
    sources: Vec<(usize, i64)>, // (cell index, quantized excess)
    sinks: Vec<(usize, i64)>,
}

fn split_excess(mu: &GridMeasure, nu: &GridMeasure) -> ExcessSplit {
    let mut sources = Vec::new();
    let mut sinks = Vec::new();
    for (i, (a, b)) in mu.weights().iter().zip(nu.weights()).enumerate() {
        let delta = a - b;
        let q = (delta.abs() * MASS_SCALE).round() as i64;
        if q == 0 {
            continue;
        }
        if delta > 0.0 {
            sources.push((i, q));
        } else {
            sinks.push((i, q));
        }
    }
    // Fix rounding drift so supply exactly equals demand.
    let supply: i64 = sources.iter().map(|&(_, q)| q).sum();
    let demand: i64 = sinks.iter().map(|&(_, q)| q).sum();
    let drift = supply - demand;
    if drift != 0 {
        if drift > 0 {
            if let Some(max) = sources.iter_mut().max_by_key(|p| p.1) {
                max.1 -= drift;
            }
        } else if let Some(max) = sinks.iter_mut().max_by_key(|p| p.1) {
            max.1 += drift;
        }
    }
    ExcessSplit { sources, sinks }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn transport_cost(
    mu: &GridMeasure,
    nu: &GridMeasure,
    cap_cost: Option<f64>,
    teleport: bool,
) -> Result<f64> {
    let split = split_excess(mu, nu);
    if split.sources.is_empty() {
        return Ok(0.0);
    }
    let ns = split.sources.len();
    let nt = split.sinks.len();
    // Nodes: 0 = super source, 1 = super sink, [2, 2+ns) sources,
    // [2+ns, 2+ns+nt) sinks, optional teleport node at the end.
    let teleport_node = 2 + ns + nt;
    let n = teleport_node + usize::from(teleport);
    let mut g = mcmf::Graph::new(n);
    for (si, &(cell, q)) in split.sources.iter().enumerate() {
        g.add_edge(0, 2 + si, q, 0.0);
        let cs = mu.grid().cell_center(cell);
        for (ti, &(tcell, _)) in split.sinks.iter().enumerate() {
            let ct = mu.grid().cell_center(tcell);
            let mut rho = euclid(&cs, &ct);
            if let Some(cap) = cap_cost {
                rho = rho.min(cap);
            }
            g.add_edge(2 + si, 2 + ns + ti, i64::MAX / 4, rho);
        }
        if teleport {
            g.add_edge(2 + si, teleport_node, i64::MAX / 4, 1.0);
        }
    }
    for (ti, &(_, q)) in split.sinks.iter().enumerate() {
        g.add_edge(2 + ns + ti, 1, q, 0.0);
        if teleport {
            g.add_edge(teleport_node, 2 + ns + ti, i64::MAX / 4, 1.0);
        }
    }
    let (_, cost) = g.min_cost_flow(0, 1);
    Ok(cost / MASS_SCALE)
}

/// Exact 1-Wasserstein distance between grid measures on a shared grid.
/// 1-D uses the CDF formula; higher dimensions use exact min-cost flow with
/// Euclidean cell-center costs (cell budget 4096).
pub fn w1(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    check_same_grid(mu, nu)?;
    let grid = mu.grid();
    if grid.dim() == 1 {
        // ∫ |CDF_mu − CDF_nu| dx on the grid.
        let width = grid.cell_width(0);
        let mut cum = 0.0;
        let mut acc = 0.0;
        for (a, b) in mu.weights().iter().zip(nu.weights()) {
            cum += a - b;
            acc += cum.abs() * width;
        }
        return Ok(acc);
    }
    if grid.total_cells() > W1_CELL_BUDGET {
        return Err(Error::CellBudget { cells: grid.total_cells(), budget: W1_CELL_BUDGET });
    }
    transport_cost(mu, nu, None, false)
}

/// Exact Dudley (bounded-Lipschitz) metric value via min-cost flow: transport
/// arcs cost min(ρ, 2), and each unit of mass may instead be destroyed at one
/// cell and created at another through teleport arcs of cost 1 each.
pub fn dudley(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    check_same_grid(mu, nu)?;
    if mu.grid().total_cells() > DUDLEY_CELL_BUDGET {
        return Err(Error::CellBudget {
            cells: mu.grid().total_cells(),
            budget: DUDLEY_CELL_BUDGET,
        });
    }
    transport_cost(mu, nu, Some(2.0), true)
}

// ---------------------------------------------------------------------------
// MMD
// ---------------------------------------------------------------------------

fn mmd_signed(points: &[Vec<f64>], weights: &[f64], kernel: &Kernel) -> Result<f64> {
    let mut q = 0.0;
    for (i, (xi, ai)) in points.iter().zip(weights).enumerate() {
        for (xj, aj) in points.iter().zip(weights).skip(i + 1) {
            q += 2.0 * ai * aj * kernel.eval(xi, xj);
        }
        q += ai * ai * kernel.eval(xi, xi);
    }
    if q < -1e-12 {
        return Err(Error::InvalidInput(format!(
            "kernel quadratic form is negative ({q:e}); kernel not PSD?"
        )));
    }
    Ok(q.max(0.0).sqrt())
}

/// MMD between empirical measures of two sample sets.
pub fn mmd(x: &SampleSet, y: &SampleSet, kernel: &Kernel) -> Result<f64> {
    if x.dim != y.dim {
        return Err(Error::DimensionMismatch { expected: x.dim, got: y.dim });
    }
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(x.points.len() + y.points.len());
    let mut weights = Vec::with_capacity(points.capacity());
    let wx = 1.0 / x.points.len() as f64;
    let wy = -1.0 / y.points.len() as f64;
    for p in &x.points {
        points.push(p.clone());
        weights.push(wx);
    }
    for p in &y.points {
        points.push(p.clone());
        weights.push(wy);
    }
    mmd_signed(&points, &weights, kernel)
}

/// MMD between grid measures, treating each cell as a point mass at its center.
pub fn mmd_grid(mu: &GridMeasure, nu: &GridMeasure, kernel: &Kernel) -> Result<f64> {
    check_same_grid(mu, nu)?;
    let grid = mu.grid();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, (a, b)) in mu.weights().iter().zip(nu.weights()).enumerate() {
        let w = a - b;
        if w != 0.0 {
            points.push(grid.cell_center(i));
            weights.push(w);
        }
    }
    if points.is_empty() {
        return Ok(0.0);
    }
    mmd_signed(&points, &weights, kernel)
}

// ---------------------------------------------------------------------------
// Truncation
// ---------------------------------------------------------------------------

/// Result of restricting a measure to a compact box and renormalizing.
#[derive(Clone, Debug)]
pub enum Truncated {
    Measure(GridMeasure),
    /// The measure places (numerically) no mass in K.
    Zero,
}

pub fn truncate(mu: &GridMeasure, k: &CompactBox) -> Result<Truncated> {
    if k.dim() != mu.grid().dim() {
        return Err(Error::DimensionMismatch { expected: mu.grid().dim(), got: k.dim() });
    }
    let grid = mu.grid().clone();
    let mut weights = mu.weights().to_vec();
    let mut mass = 0.0;
    for (i, w) in weights.iter_mut().enumerate() {
        if k.contains(&grid.cell_center(i)) {
            mass += *w;
        } else {
            *w = 0.0;
        }
    }
    if mass <= 1e-15 {
        return Ok(Truncated::Zero);
    }
    Ok(Truncated::Measure(GridMeasure::new(grid, weights)?))
}

/// Mass a measure places in a box (sum of weights of cells whose centers lie
/// inside).
pub fn mass_in(mu: &GridMeasure, k: &CompactBox) -> f64 {
    mu.weights()
        .iter()
        .enumerate()
        .filter(|&(i, _)| k.contains(&mu.grid().cell_center(i)))
        .map(|(_, w)| w)
        .sum()
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
    pub hypothesis_met: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub tv_ipm: f64,
    pub tv_sup_a: f64,
    pub w1: f64,
    pub dudley: f64,
    pub mmd: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CertifyReport {
    pub metrics: MetricsReport,
    pub bounds: Vec<BoundCheck>,
    pub all_pass: bool,
}

/// Solver tolerance for inequality slacks.
pub const SLACK_TOL: f64 = -1e-9;

/// Compute all four metrics plus the truncated-measure W₁ and certify:
/// Dudley ≤ TV, MMD ≤ √(sup k)·TV, W₁ ≤ diam(K)·(set-supremum TV), and the
/// truncation bound W₁(μ|\_K, ν|\_K) ≤ (4·diam K/ν(K))·TV/(ν(K) − TV) whenever
/// its hypothesis TV < ν(K) holds.
pub fn certify_bounds(
    mu: &GridMeasure,
    nu: &GridMeasure,
    k: &CompactBox,
    kernel: &Kernel,
) -> Result<CertifyReport> {
    let tv = tv_ipm(mu, nu)?;
    let w1_val = w1(mu, nu)?;
    let dud = dudley(mu, nu)?;
    let mmd_val = mmd_grid(mu, nu, kernel)?;
    let diam = k.diameter();

    let mut bounds = Vec::new();
    let mut push = |name: &str, lhs: f64, rhs: f64, hypothesis_met: bool| {
        let slack = rhs - lhs;
        bounds.push(BoundCheck {
            name: name.to_string(),
            lhs,
            rhs,
            slack,
            pass: !hypothesis_met || slack >= SLACK_TOL,
            hypothesis_met,
        });
    };

    push("dudley_le_tv", dud, tv.ipm, true);
    push("mmd_le_sqrt_supk_tv", mmd_val, kernel.sup_diag().sqrt() * tv.ipm, true);

    // W₁ against diameter × set-supremum TV; meaningful when both measures are
    // (numerically) supported in K.
    let supported = mass_in(mu, k) >= 1.0 - 1e-9 && mass_in(nu, k) >= 1.0 - 1e-9;
    push("w1_le_diam_tv", w1_val, diam * tv.sup_a, supported);

    // Truncated-measure bound with hypothesis TV < ν(K).
    let nu_k = mass_in(nu, k);
    let hypothesis = tv.ipm < nu_k;
    let (lhs, rhs) = if hypothesis {
        let mu_k = truncate(mu, k)?;
        let nu_kk = truncate(nu, k)?;
        match (mu_k, nu_kk) {
            (Truncated::Measure(mk), Truncated::Measure(nk)) => {
                let lhs = w1(&mk, &nk)?;
                let rhs = (4.0 * diam / nu_k) * tv.ipm / (nu_k - tv.ipm);
                (lhs, rhs)
            }
            _ => (0.0, 0.0),
        }
    } else {
        (0.0, 0.0)
    };
    push("truncated_w1_le_tv_bound", lhs, rhs, hypothesis);

    let all_pass = bounds.iter().all(|b| b.pass);
    Ok(CertifyReport {
        metrics: MetricsReport {
            tv_ipm: tv.ipm,
            tv_sup_a: tv.sup_a,
            w1: w1_val,
            dudley: dud,
            mmd: mmd_val,
        },
        bounds,
        all_pass,
    })
}

// ---------------------------------------------------------------------------
// Brute-force reference solvers
// ---------------------------------------------------------------------------

/// Reference solvers for measures with tiny supports, used to cross-check the
/// min-cost-flow path. They enumerate basic feasible solutions (vertices) of
/// the balanced transport polytope directly.
pub mod oracle {
    use super::*;

    /// Exact transport cost by exhaustive vertex enumeration: every vertex of
    /// the transportation polytope has at most m+n−1 nonzero entries, so we
    /// enumerate support sets of that size, solve the marginal equations, and
    /// keep the cheapest nonnegative solution.
    fn transport_lp(sources: &[(Vec<f64>, f64)], sinks: &[(Vec<f64>, f64)], cap: Option<f64>) -> f64 {
        let m = sources.len();
        let n = sinks.len();
        if m == 0 || n == 0 {
            return 0.0;
        }
        let vars = m * n;
        let basis_size = (m + n - 1).min(vars);
        let cost = |i: usize, j: usize| -> f64 {
            let mut c = euclid(&sources[i].0, &sinks[j].0);
            if let Some(cap) = cap {
                c = c.min(cap);
            }
            c
        };
        let mut best = f64::INFINITY;
        // Enumerate index subsets of size basis_size out of `vars`.
        let mut subset: Vec<usize> = (0..basis_size).collect();
        loop {
            // Solve the equality system restricted to this support.
            // Constraints: row sums (m) + col sums (n); one is redundant, so
            // use all m row constraints and n−1 column constraints.
            let rows = m + n - 1;
            let mut a = nalgebra::DMatrix::zeros(rows, basis_size);
            let mut b = nalgebra::DVector::zeros(rows);
            for (r, src) in sources.iter().enumerate() {
                b[r] = src.1;
            }
            for c in 0..n - 1 {
                b[m + c] = sinks[c].1;
            }
            for (col, &v) in subset.iter().enumerate() {
                let (i, j) = (v / n, v % n);
                a[(i, col)] = 1.0;
                if j < n - 1 {
                    a[(m + j, col)] = 1.0;
                }
            }
            if let Ok(x) = a.clone().svd(true, true).solve(&b, 1e-12) {
                let residual = (&a * &x - &b).norm();
                if residual < 1e-9 && x.iter().all(|&v| v >= -1e-12) {
                    let total: f64 = subset
                        .iter()
                        .enumerate()
                        .map(|(col, &v)| {
                            let (i, j) = (v / n, v % n);
                            x[col].max(0.0) * cost(i, j)
                        })
                        .sum();
                    best = best.min(total);
                }
            }
            // next subset (lexicographic)
            let mut k = basis_size;
            loop {
                if k == 0 {
                    return best;
                }
                k -= 1;
                if subset[k] != vars - basis_size + k {
                    subset[k] += 1;
                    for t in k + 1..basis_size {
                        subset[t] = subset[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn support(mu: &GridMeasure, nu: &GridMeasure) -> (Vec<(Vec<f64>, f64)>, Vec<(Vec<f64>, f64)>) {
        let mut sources = Vec::new();
        let mut sinks = Vec::new();
        for (i, (a, b)) in mu.weights().iter().zip(nu.weights()).enumerate() {
            let delta = a - b;
            if delta.abs() < 1e-15 {
                continue;
            }
            let c = mu.grid().cell_center(i);
            if delta > 0.0 {
                sources.push((c, delta));
            } else {
                sinks.push((c, -delta));
            }
        }
        (sources, sinks)
    }

    /// Brute-force W₁ (Euclidean costs).
    pub fn w1_bruteforce(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
        super::check_same_grid(mu, nu)?;
        let (sources, sinks) = support(mu, nu);
        if sources.is_empty() {
            return Ok(0.0);
        }
        Ok(transport_lp(&sources, &sinks, None))
    }

    /// Brute-force Dudley value. A destroy/create pair costs 2, never below
    /// the capped transport cost min(ρ, 2), so for balanced inputs the optimum
    /// lies inside the balanced transport polytope with capped costs.
    pub fn dudley_bruteforce(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
        super::check_same_grid(mu, nu)?;
        let (sources, sinks) = support(mu, nu);
        if sources.is_empty() {
            return Ok(0.0);
        }
        Ok(transport_lp(&sources, &sinks, Some(2.0)))
    }
}
