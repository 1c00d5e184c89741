//! Grid measures, the Knothe–Rosenblatt rearrangement, mollification, and
//! pushforward helpers.
//!
//! A [`Grid`] is a regular axis-aligned partition of a box; a [`GridMeasure`]
//! is a probability measure with one weight per cell. [`knothe_map`] builds
//! the triangular monotone rearrangement between two grid measures from
//! conditional CDF tables; [`TriangularMap`] evaluates it, inverts it
//! coordinate by coordinate, and exposes the diagonal Jacobian entries so
//! densities of pushforwards can be computed in closed form.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::Inn;

/// Hard cap on the number of cells in a grid (2^24).
pub const MAX_CELLS: usize = 1 << 24;

/// Floor added to empty cells before building conditional CDFs, so every
/// conditional distribution is strictly increasing and invertible.
pub const KNOTHE_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Regular rectangular grid over an axis-aligned box. Cells are indexed flat
/// with axis 0 fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    bounds: Vec<(f64, f64)>,
    res: Vec<usize>,
}

impl Grid {
    pub fn new(bounds: Vec<(f64, f64)>, res: Vec<usize>) -> Result<Grid> {
        if bounds.is_empty() || bounds.len() != res.len() {
            return Err(Error::InvalidInput("grid needs matching bounds and resolutions".into()));
        }
        if bounds.iter().any(|&(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidInput("grid bounds must be finite with lo < hi".into()));
        }
        if res.iter().any(|&r| r == 0) {
            return Err(Error::InvalidInput("grid resolution must be positive".into()));
        }
        let mut cells: usize = 1;
        for &r in &res {
            cells = cells.checked_mul(r).ok_or(Error::CellBudget {
                cells: usize::MAX,
                budget: MAX_CELLS,
            })?;
        }
        if cells > MAX_CELLS {
            return Err(Error::CellBudget { cells, budget: MAX_CELLS });
        }
        Ok(Grid { bounds, res })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn res(&self) -> &[usize] {
        &self.res
    }

    pub fn total_cells(&self) -> usize {
        self.res.iter().product()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / self.res[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.cell_width(a)).product()
    }

    /// Flat index from a multi-index (axis 0 fastest).
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (a, &k) in multi.iter().enumerate() {
            debug_assert!(k < self.res[a]);
            idx += k * stride;
            stride *= self.res[a];
        }
        idx
    }

    /// Multi-index from a flat index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut multi = Vec::with_capacity(self.dim());
        for &r in &self.res {
            multi.push(flat % r);
            flat /= r;
        }
        multi
    }

    /// Center of the cell with the given flat index.
    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let multi = self.multi_index(flat);
        multi
            .iter()
            .enumerate()
            .map(|(a, &k)| self.bounds[a].0 + (k as f64 + 0.5) * self.cell_width(a))
            .collect()
    }

    /// Cell index along one axis for a scalar coordinate, clamped to the grid.
    pub fn locate_axis(&self, axis: usize, v: f64) -> usize {
        let (lo, _) = self.bounds[axis];
        let k = ((v - lo) / self.cell_width(axis)).floor() as isize;
        k.clamp(0, self.res[axis] as isize - 1) as usize
    }

    /// Multi-index of the cell containing `x`, or `None` if outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<Vec<usize>> {
        if x.len() != self.dim() {
            return None;
        }
        if x.iter().zip(&self.bounds).any(|(&v, &(lo, hi))| v < lo || v > hi) {
            return None;
        }
        Some((0..self.dim()).map(|a| self.locate_axis(a, x[a])).collect())
    }
}

// ---------------------------------------------------------------------------
// GridMeasure
// ---------------------------------------------------------------------------

/// A probability measure on a grid: nonnegative weights normalized to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    weights: Vec<f64>,
}

impl GridMeasure {
    pub fn new(grid: Grid, mut weights: Vec<f64>) -> Result<GridMeasure> {
        if weights.len() != grid.total_cells() {
            return Err(Error::DimensionMismatch {
                expected: grid.total_cells(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite);
        }
        if weights.iter().any(|&w| w < -1e-12) {
            return Err(Error::DegenerateMeasure("negative cell weight".into()));
        }
        for w in &mut weights {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateMeasure("total mass is zero".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(GridMeasure { grid, weights })
    }

    /// Build a measure by sampling a density at cell centers and normalizing.
    pub fn from_density<F: Fn(&[f64]) -> f64>(grid: Grid, density: F) -> Result<GridMeasure> {
        let vol = grid.cell_volume();
        let weights: Vec<f64> =
            (0..grid.total_cells()).map(|i| density(&grid.cell_center(i)) * vol).collect();
        GridMeasure::new(grid, weights)
    }

    /// Build an empirical grid measure by binning samples; samples outside the
    /// grid are dropped (and counted as an error only if all fall outside).
    pub fn from_samples(grid: Grid, samples: &[Vec<f64>]) -> Result<GridMeasure> {
        let mut weights = vec![0.0; grid.total_cells()];
        for s in samples {
            if let Some(multi) = grid.locate(s) {
                weights[grid.flat_index(&multi)] += 1.0;
            }
        }
        GridMeasure::new(grid, weights)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Piecewise-constant density at a point (0 outside the grid).
    pub fn density_at(&self, x: &[f64]) -> f64 {
        match self.grid.locate(x) {
            Some(multi) => self.weights[self.grid.flat_index(&multi)] / self.grid.cell_volume(),
            None => 0.0,
        }
    }

    /// Save as a JSON header; weights go inline unless `binary_sidecar` is
    /// set, in which case they are written as little-endian f64 to
    /// `<path>.bin` and the header references that file by name.
    pub fn save(&self, path: &Path, binary_sidecar: bool) -> Result<()> {
        let header = if binary_sidecar {
            let bin_name = format!(
                "{}.bin",
                path.file_name().and_then(|s| s.to_str()).unwrap_or("weights")
            );
            let bin_path = path.with_file_name(&bin_name);
            let mut f = std::fs::File::create(&bin_path)?;
            for w in &self.weights {
                f.write_all(&w.to_le_bytes())?;
            }
            MeasureHeader {
                grid: self.grid.clone(),
                weights: None,
                weights_file: Some(bin_name),
            }
        } else {
            MeasureHeader {
                grid: self.grid.clone(),
                weights: Some(self.weights.clone()),
                weights_file: None,
            }
        };
        let json = serde_json::to_string_pretty(&header)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load a measure saved by [`GridMeasure::save`]; sidecar paths are
    /// resolved relative to the header file.
    pub fn load(path: &Path) -> Result<GridMeasure> {
        let text = std::fs::read_to_string(path)?;
        let header: MeasureHeader = serde_json::from_str(&text)?;
        let weights = match (header.weights, header.weights_file) {
            (Some(w), _) => w,
            (None, Some(name)) => {
                let bin_path = path.with_file_name(&name);
                let mut buf = Vec::new();
                std::fs::File::open(&bin_path)?.read_to_end(&mut buf)?;
                if buf.len() % 8 != 0 {
                    return Err(Error::InvalidInput("weight sidecar length not divisible by 8".into()));
                }
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            (None, None) => {
                return Err(Error::InvalidInput("measure header has no weights".into()));
            }
        };
        GridMeasure::new(header.grid, weights)
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureHeader {
    grid: Grid,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights_file: Option<String>,
}

// ---------------------------------------------------------------------------
// Knothe–Rosenblatt rearrangement
// ---------------------------------------------------------------------------

/// Triangular monotone map between two grid measures: coordinate i of the
/// output depends only on input coordinates 0..=i, and each coordinate map is
/// strictly increasing in its own coordinate.
#[derive(Clone, Debug)]
pub struct TriangularMap {
    source: GridMeasure,
    target: GridMeasure,
    source_tables: Vec<AxisTable>,
    target_tables: Vec<AxisTable>,
}

/// Precomputed conditional CDF tables along one axis: for every combination
/// of cells on the earlier axes (the "prefix"), the masses of the axis cells
/// with all later axes marginalized out. An ε floor makes every conditional
/// strictly increasing.
#[derive(Clone, Debug)]
struct AxisTable {
    /// strides of the prefix axes into `prefix_flat`
    prefix_strides: Vec<usize>,
    /// masses laid out as [prefix_flat * n + j]
    masses: Vec<f64>,
    /// cumulative masses at cell left edges, [prefix_flat * (n+1) + j]
    cumulative: Vec<f64>,
    n: usize,
    lo: f64,
    width: f64,
}

impl AxisTable {
    fn build(m: &GridMeasure, axis: usize) -> AxisTable {
        let grid = m.grid();
        let res = grid.res();
        let n = res[axis];
        let mut prefix_strides = Vec::with_capacity(axis);
        let mut stride = 1;
        for &r in &res[..axis] {
            prefix_strides.push(stride);
            stride *= r;
        }
        let n_prefix = stride;
        let mut masses = vec![KNOTHE_FLOOR; n_prefix * n];
        for flat in 0..grid.total_cells() {
            let multi = grid.multi_index(flat);
            let pf: usize =
                multi[..axis].iter().zip(&prefix_strides).map(|(&k, &s)| k * s).sum();
            masses[pf * n + multi[axis]] += m.weights()[flat];
        }
        let mut cumulative = vec![0.0; n_prefix * (n + 1)];
        for pf in 0..n_prefix {
            let mut acc = 0.0;
            for j in 0..n {
                cumulative[pf * (n + 1) + j] = acc;
                acc += masses[pf * n + j];
            }
            cumulative[pf * (n + 1) + n] = acc;
        }
        AxisTable {
            prefix_strides,
            masses,
            cumulative,
            n,
            lo: grid.bounds()[axis].0,
            width: grid.cell_width(axis),
        }
    }

    fn prefix_flat(&self, prefix_cells: &[usize]) -> usize {
        prefix_cells.iter().zip(&self.prefix_strides).map(|(&k, &s)| k * s).sum()
    }

    fn total(&self, pf: usize) -> f64 {
        self.cumulative[pf * (self.n + 1) + self.n]
    }

    /// Conditional CDF at coordinate v (clamped into the axis range).
    fn cdf(&self, pf: usize, v: f64) -> f64 {
        let t = ((v - self.lo) / self.width).clamp(0.0, self.n as f64);
        let cell = (t.floor() as usize).min(self.n - 1);
        let frac = t - cell as f64;
        let below = self.cumulative[pf * (self.n + 1) + cell];
        ((below + frac * self.masses[pf * self.n + cell]) / self.total(pf)).clamp(0.0, 1.0)
    }

    /// Conditional quantile of u ∈ [0,1] (binary search on the edge CDF).
    fn quantile(&self, pf: usize, u: f64) -> f64 {
        let target = u.clamp(0.0, 1.0) * self.total(pf);
        let edges = &self.cumulative[pf * (self.n + 1)..(pf + 1) * (self.n + 1)];
        // Largest cell j with edges[j] <= target.
        let j = match edges.binary_search_by(|e| e.partial_cmp(&target).unwrap()) {
            Ok(j) => j.min(self.n - 1),
            Err(ins) => ins.saturating_sub(1).min(self.n - 1),
        };
        let mass = self.masses[pf * self.n + j];
        let frac = ((target - edges[j]) / mass).clamp(0.0, 1.0);
        self.lo + (j as f64 + frac) * self.width
    }

    /// Conditional density at coordinate v (piecewise constant).
    fn density(&self, pf: usize, v: f64) -> f64 {
        let t = ((v - self.lo) / self.width).clamp(0.0, self.n as f64);
        let cell = (t.floor() as usize).min(self.n - 1);
        self.masses[pf * self.n + cell] / (self.total(pf) * self.width)
    }
}

/// Build the Knothe–Rosenblatt rearrangement pushing `source` to `target`.
/// Supports dimension ≤ 3 (the conditional tables are rebuilt per evaluation,
/// which stays cheap at these dimensions and grid budgets).
pub fn knothe_map(source: &GridMeasure, target: &GridMeasure) -> Result<TriangularMap> {
    let d = source.grid().dim();
    if target.grid().dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: target.grid().dim() });
    }
    if d > 3 {
        return Err(Error::InvalidInput(format!(
            "knothe_map supports dimension <= 3, got {d}"
        )));
    }
    let source_tables = (0..d).map(|i| AxisTable::build(source, i)).collect();
    let target_tables = (0..d).map(|i| AxisTable::build(target, i)).collect();
    Ok(TriangularMap {
        source: source.clone(),
        target: target.clone(),
        source_tables,
        target_tables,
    })
}

impl TriangularMap {
    pub fn dim(&self) -> usize {
        self.source.grid().dim()
    }

    pub fn source(&self) -> &GridMeasure {
        &self.source
    }

    pub fn target(&self) -> &GridMeasure {
        &self.target
    }

    /// Evaluate the map; coordinate i uses the source conditional CDF given
    /// x_{<i} and the target conditional quantile given the already-computed
    /// y_{<i}.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let mut y = Vec::with_capacity(d);
        let mut x_cells = Vec::with_capacity(d);
        let mut y_cells = Vec::with_capacity(d);
        for i in 0..d {
            let src = &self.source_tables[i];
            let tgt = &self.target_tables[i];
            let u = src.cdf(src.prefix_flat(&x_cells), x[i]);
            let yi = tgt.quantile(tgt.prefix_flat(&y_cells), u);
            x_cells.push(self.source.grid().locate_axis(i, x[i]));
            y_cells.push(self.target.grid().locate_axis(i, yi));
            y.push(yi);
        }
        Ok(y)
    }

    /// Invert the map coordinate by coordinate (exact, since both conditional
    /// CDFs are strictly increasing piecewise-linear).
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if y.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: y.len() });
        }
        let mut x = Vec::with_capacity(d);
        let mut x_cells = Vec::with_capacity(d);
        let mut y_cells = Vec::with_capacity(d);
        for i in 0..d {
            let src = &self.source_tables[i];
            let tgt = &self.target_tables[i];
            let u = tgt.cdf(tgt.prefix_flat(&y_cells), y[i]);
            let xi = src.quantile(src.prefix_flat(&x_cells), u);
            x_cells.push(self.source.grid().locate_axis(i, xi));
            y_cells.push(self.target.grid().locate_axis(i, y[i]));
            x.push(xi);
        }
        Ok(x)
    }

    /// Diagonal Jacobian entries ∂T_i/∂x_i at x: the ratio of the source and
    /// target conditional densities. Off-diagonal entries above the diagonal
    /// are structurally zero.
    pub fn diag_derivative(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let mut diag = Vec::with_capacity(d);
        let mut x_cells = Vec::with_capacity(d);
        let mut y_cells = Vec::with_capacity(d);
        for i in 0..d {
            let src = &self.source_tables[i];
            let tgt = &self.target_tables[i];
            let spf = src.prefix_flat(&x_cells);
            let tpf = tgt.prefix_flat(&y_cells);
            let u = src.cdf(spf, x[i]);
            let yi = tgt.quantile(tpf, u);
            diag.push(src.density(spf, x[i]) / tgt.density(tpf, yi));
            x_cells.push(self.source.grid().locate_axis(i, x[i]));
            y_cells.push(self.target.grid().locate_axis(i, yi));
        }
        Ok(diag)
    }

    /// Log absolute Jacobian determinant (sum of logs of the diagonal).
    pub fn log_det(&self, x: &[f64]) -> Result<f64> {
        Ok(self.diag_derivative(x)?.iter().map(|d| d.ln()).sum())
    }
}

// ---------------------------------------------------------------------------
// Mollification
// ---------------------------------------------------------------------------

/// Number of quadrature nodes per axis for mollification.
pub const MOLLIFY_NODES: usize = 21;

/// Convolve a grid measure with the compactly supported bump kernel
/// φ(z) ∝ exp(−1/(1 − ‖z/ε‖²)) supported on ‖z‖ < ε, re-sampled on the same
/// grid. Quadrature uses a symmetric tensor grid of 21 nodes per axis with
/// weights normalized to sum 1, so mass is preserved exactly and linear
/// functions are reproduced by symmetry.
pub fn mollify(m: &GridMeasure, epsilon: f64) -> Result<GridMeasure> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput("mollification width must be positive".into()));
    }
    let grid = m.grid().clone();
    let d = grid.dim();

    // 1-D node offsets in (−ε, ε): centers of 21 equal subintervals.
    let offsets: Vec<f64> = (0..MOLLIFY_NODES)
        .map(|k| epsilon * (2.0 * (k as f64 + 0.5) / MOLLIFY_NODES as f64 - 1.0))
        .collect();

    // Tensor-product nodes and bump weights.
    let n_nodes = MOLLIFY_NODES.pow(d as u32);
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut node_weights = Vec::with_capacity(n_nodes);
    for flat in 0..n_nodes {
        let mut rem = flat;
        let mut z = Vec::with_capacity(d);
        for _ in 0..d {
            z.push(offsets[rem % MOLLIFY_NODES]);
            rem /= MOLLIFY_NODES;
        }
        let r2: f64 = z.iter().map(|v| (v / epsilon) * (v / epsilon)).sum();
        let w = if r2 < 1.0 { (-1.0 / (1.0 - r2)).exp() } else { 0.0 };
        nodes.push(z);
        node_weights.push(w);
    }
    let wsum: f64 = node_weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::InvalidInput("mollifier quadrature has zero weight".into()));
    }
    for w in &mut node_weights {
        *w /= wsum;
    }

    // Mollified density at each cell center; piecewise-constant lookup of the
    // original density, zero outside the grid.
    let vol = grid.cell_volume();
    let mut weights = vec![0.0; grid.total_cells()];
    let mut shifted = vec![0.0; d];
    for (i, w) in weights.iter_mut().enumerate() {
        let c = grid.cell_center(i);
        let mut q = 0.0;
        for (z, &lam) in nodes.iter().zip(&node_weights) {
            if lam == 0.0 {
                continue;
            }
            for a in 0..d {
                shifted[a] = c[a] - z[a];
            }
            q += lam * m.density_at(&shifted);
        }
        *w = q * vol;
    }
    GridMeasure::new(grid, weights)
}

// ---------------------------------------------------------------------------
// Pushforwards
// ---------------------------------------------------------------------------

/// Map a batch of samples through a normalizing network, preserving order.
pub fn pushforward_samples(inn: &Inn, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|x| inn.forward(x)).collect()
}

/// Density-level pushforward of a grid measure through an invertible map: at
/// each target cell center y, q(y) = p(g⁻¹(y)) / |det Dg(g⁻¹(y))|, then
/// renormalized. Fails if more than 1% of cell inversions error out.
pub fn grid_pushforward(p: &GridMeasure, inn: &Inn, target: &Grid) -> Result<GridMeasure> {
    if target.dim() != p.grid().dim() {
        return Err(Error::DimensionMismatch { expected: p.grid().dim(), got: target.dim() });
    }
    let total = target.total_cells();
    let mut weights = vec![0.0; total];
    let vol = target.cell_volume();
    let mut failed = 0usize;
    for (i, w) in weights.iter_mut().enumerate() {
        let y = target.cell_center(i);
        match inn.inverse(&y) {
            Ok(x) => {
                let log_det = inn.log_det(&x)?;
                *w = p.density_at(&x) * (-log_det).exp() * vol;
            }
            Err(_) => failed += 1,
        }
    }
    if failed * 100 > total {
        return Err(Error::InverseFailures { failed, total });
    }
    GridMeasure::new(target.clone(), weights)
}

/// Same pushforward machinery for a triangular transport map, whose Jacobian
/// determinant is the product of the diagonal derivatives.
pub fn grid_pushforward_triangular(
    p: &GridMeasure,
    map: &TriangularMap,
    target: &Grid,
) -> Result<GridMeasure> {
    if target.dim() != p.grid().dim() {
        return Err(Error::DimensionMismatch { expected: p.grid().dim(), got: target.dim() });
    }
    let total = target.total_cells();
    let mut weights = vec![0.0; total];
    let vol = target.cell_volume();
    let mut failed = 0usize;
    for (i, w) in weights.iter_mut().enumerate() {
        let y = target.cell_center(i);
        match map.inverse(&y) {
            Ok(x) => {
                let log_det = map.log_det(&x)?;
                *w = p.density_at(&x) * (-log_det).exp() * vol;
            }
            Err(_) => failed += 1,
        }
    }
    if failed * 100 > total {
        return Err(Error::InverseFailures { failed, total });
    }
    GridMeasure::new(target.clone(), weights)
}

/// Wrap a sampler so callers can draw pushforward samples lazily.
pub fn pushforward_sampler(
    inn: Arc<Inn>,
    base: Arc<dyn Fn(&mut dyn FnMut() -> f64) -> Vec<f64> + Send + Sync>,
) -> impl Fn(&mut dyn FnMut() -> f64) -> Result<Vec<f64>> {
    move |rng| inn.forward(&base(rng))
}
