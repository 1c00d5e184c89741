//! Experiment harness: each constructive result in the library is exercised
//! as a desk-scale experiment with a falsifiable numeric assertion, emitting a
//! deterministic JSON report (plus optional CSV error curves).
//!
//! Reports contain no timestamps, so a fixed config and seed produce
//! byte-identical output. Every report is validated against the JSON schema
//! shipped in `schemas/report.schema.json` before it is written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::decompose::{near_id_check, split_until_near_id, triangular_factorize, SmoothMap};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::flows::{realize_gl, AcfLayer, AffineLayer, Inn, Layer, PermutationLayer};
use crate::metrics::{certify_bounds, dudley, oracle, tv_ipm, w1, CompactBox, Kernel};
use crate::mlp::{mlp_fit, Activation};
use crate::node::{bump_field_1d, bump_unit, gronwall_certificate, rotation_flow, FlowHandle, VectorField};
use crate::roots;
use crate::sobolev::{seminorm_diff, Aggregate, SeminormSpec};
use crate::transport::{knothe_map, Grid, GridMeasure};

/// JSON schema every report must satisfy; shipped with the repo and embedded
/// here so validation cannot drift from the published file.
pub const REPORT_SCHEMA: &str = include_str!("../../../schemas/report.schema.json");

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Parsed experiment configuration: a flat key-value file plus the seed and
/// output path from the command line.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub out: PathBuf,
    pub params: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new(experiment: &str, seed: u64, out: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            experiment: experiment.to_string(),
            seed,
            out,
            params: BTreeMap::new(),
        }
    }

    /// Parse a flat `key = value` file; `#` starts a comment, blank lines are
    /// ignored.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.params.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidInput(format!("param {key}: not a number: {s}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.params.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidInput(format!("param {key}: not an integer: {s}"))),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.params.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.params.get(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        Error::InvalidInput(format!("param {key}: not a number list: {s}"))
                    })
                })
                .collect(),
        }
    }

    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.params.get(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        Error::InvalidInput(format!("param {key}: not an integer list: {s}"))
                    })
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Report envelope. No timestamps: fixed seed means byte-identical bytes.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    pub params: BTreeMap<String, Value>,
    pub results: Value,
    pub pass: bool,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validate against the shipped schema and write to `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let value = serde_json::to_value(self)?;
        let schema: Value = serde_json::from_str(REPORT_SCHEMA)?;
        validate_against_schema(&value, &schema, "$")?;
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Minimal JSON-schema check covering the subset the report schema uses:
/// `type`, `required`, and per-property subschemas.
pub fn validate_against_schema(value: &Value, schema: &Value, at: &str) -> Result<()> {
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "integer" => value.is_i64() || value.is_u64(),
            "number" => value.is_number(),
            "boolean" => value.is_boolean(),
            _ => true,
        };
        if !ok {
            return Err(Error::InvalidInput(format!("schema violation at {at}: expected {ty}")));
        }
    }
    if let Some(req) = schema.get("required").and_then(Value::as_array) {
        for key in req.iter().filter_map(Value::as_str) {
            if value.get(key).is_none() {
                return Err(Error::InvalidInput(format!(
                    "schema violation at {at}: missing required field {key}"
                )));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        for (key, sub) in props {
            if let Some(v) = value.get(key) {
                validate_against_schema(v, sub, &format!("{at}.{key}"))?;
            }
        }
    }
    Ok(())
}

fn params_value(cfg: &ExperimentConfig) -> BTreeMap<String, Value> {
    cfg.params.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect()
}

fn write_csv(path: &str, header: &str, rows: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for (a, b) in rows {
        text.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Least-squares slope of y against x.
fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

pub const EXPERIMENTS: &[&str] = &[
    "psi_construction",
    "grid_acf",
    "triangular_pipeline",
    "distributional",
    "node",
    "gl",
    "ipm",
];

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.experiment.as_str() {
        "psi_construction" => exp_psi_construction(cfg),
        "grid_acf" => exp_grid_acf(cfg),
        "triangular_pipeline" => exp_triangular_pipeline(cfg),
        "distributional" => exp_distributional(cfg),
        "node" => exp_node(cfg),
        "gl" => exp_gl(cfg),
        "ipm" => exp_ipm(cfg),
        other => Err(Error::InvalidInput(format!(
            "unknown experiment {other}; available: {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

// ---------------------------------------------------------------------------
// Four-layer conditioner-swap construction
// ---------------------------------------------------------------------------

fn bump_deriv(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let d = 1.0 - s * s;
        (-1.0 / d).exp() * (-2.0 * s / (d * d))
    }
}

/// The four-layer network that moves the action of a 1-D diffeomorphism u
/// from the last coordinate into a coupling structure:
/// scale the first coordinate by u'(y), shift it by (u(y) − y)/δ, shear the
/// last coordinate by δ times the first, then undo the shift via u⁻¹. The
/// composite equals (x, y) ↦ (x, u(y)) plus an O(δ) remainder.
pub fn psi_inn(
    u: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    du: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    delta: f64,
) -> Result<Inn> {
    let dim = 2;
    let swap = || Layer::Permutation(PermutationLayer::transposition(dim, 0, 1).unwrap());
    let zero = ScalarField::constant(1, 0.0);

    // Each block transforms coordinate 0 conditioned on coordinate 1, so the
    // single-coordinate coupling is conjugated by the transposition.
    let du0 = du.clone();
    let s0 = ScalarField::from_fn(1, move |c| du0(c[0]).ln());
    let psi0 = AcfLayer::single_coordinate(dim, s0, zero.clone())?;

    let u1 = u.clone();
    let t1 = ScalarField::from_fn(1, move |c| (u1(c[0]) - c[0]) / delta);
    let psi1 = AcfLayer::single_coordinate(dim, ScalarField::constant(1, 0.0), t1)?;

    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, delta, 1.0]);
    let psi2 = AffineLayer::new(a, DVector::zeros(2))?;

    let u3 = u.clone();
    let t3 = ScalarField::from_fn(1, move |c| {
        let y = c[0];
        let u_inv =
            roots::invert_monotone(|v| u3(v), y, y, 1e-12).unwrap_or(f64::NAN);
        -(y - u_inv) / delta
    });
    let psi3 = AcfLayer::single_coordinate(dim, ScalarField::constant(1, 0.0), t3)?;

    Inn::new(
        dim,
        vec![
            swap(),
            Layer::Acf(psi0),
            swap(),
            swap(),
            Layer::Acf(psi1),
            swap(),
            Layer::Affine(psi2),
            swap(),
            Layer::Acf(psi3),
            swap(),
        ],
    )
}

fn exp_psi_construction(cfg: &ExperimentConfig) -> Result<Report> {
    let a = cfg.get_f64("a", 0.3)?;
    let deltas = cfg.get_f64_list("deltas", &[1e-1, 3e-2, 1e-2, 3e-3, 1e-3])?;
    let res = cfg.get_usize("resolution", 32)?;
    let k = CompactBox::new(vec![(-1.0, 1.0), (-1.0, 1.0)])?;

    // u(y) = y + a·bump(y); verify u' > 0 on a fine grid.
    let u = Arc::new(move |y: f64| y + a * bump_unit(y));
    let du = Arc::new(move |y: f64| 1.0 + a * bump_deriv(y));
    let mut min_du = f64::INFINITY;
    for i in 0..=10_000 {
        let y = -1.0 + 2.0 * i as f64 / 10_000.0;
        min_du = min_du.min(du(y));
    }
    if min_du <= 0.0 {
        return Err(Error::NotMonotone(min_du));
    }

    let u_t = u.clone();
    let target = move |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0], u_t(x[1])]) };
    let spec = SeminormSpec::new(k, 0, Aggregate::PInf, res)?;

    let mut curve = Vec::new();
    for &delta in &deltas {
        let inn = psi_inn(u.clone(), du.clone(), delta)?;
        let err = seminorm_diff(|x| inn.forward(x), &target, &spec)?;
        curve.push((delta, err));
    }

    // Monotone decrease over deltas sorted descending.
    let mut sorted = curve.clone();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let monotone = sorted.windows(2).all(|w| w[1].1 < w[0].1);

    let lx: Vec<f64> = sorted.iter().map(|(d, _)| d.ln()).collect();
    let ly: Vec<f64> = sorted.iter().map(|(_, e)| e.ln()).collect();
    let slope = fit_slope(&lx, &ly);
    let slope_ok = (0.8..=1.2).contains(&slope);

    // Degenerate case: u = id collapses the whole construction to the
    // identity network.
    let id_inn = Inn::identity(2);
    let id_target = |x: &[f64]| -> Result<Vec<f64>> { Ok(x.to_vec()) };
    let identity_error = seminorm_diff(|x| id_inn.forward(x), id_target, &spec)?;
    let identity_ok = identity_error <= 1e-12;

    if let Some(csv) = cfg.params.get("csv_out") {
        write_csv(csv, "delta,sup_error", &sorted)?;
    }

    let pass = monotone && slope_ok && identity_ok;
    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results: json!({
            "curve": sorted.iter().map(|(d, e)| json!({"delta": d, "sup_error": e})).collect::<Vec<_>>(),
            "monotone_decrease": monotone,
            "slope": slope,
            "slope_in_window": slope_ok,
            "identity_error": identity_error,
            "identity_ok": identity_ok,
            "min_u_prime": min_du,
        }),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Cell-conditioned coupling approximation of a conditional 1-D family
// ---------------------------------------------------------------------------

/// The n-cell approximant of (x, y) ↦ (x, u(x, y)) on [0,1]²: shift y by the
/// index of the cell containing x, apply a single stitched monotone map built
/// from u frozen at cell corners, and shift back.
fn grid_acf_map(u: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>, n: usize) -> impl Fn(&[f64]) -> Result<Vec<f64>> {
    move |p: &[f64]| -> Result<Vec<f64>> {
        let (x, y) = (p[0], p[1]);
        let k = ((x * n as f64).floor() as usize).min(n - 1);
        // shift into the k-th unit slot
        let z = y + k as f64;
        // stitched monotone map: on [k, k+1), apply u frozen at the cell corner
        let v = if (k as f64..k as f64 + 1.0).contains(&z) || z == k as f64 + 1.0 {
            u(k as f64 / n as f64, z - k as f64) + k as f64
        } else {
            z
        };
        // shift back
        Ok(vec![x, v - k as f64])
    }
}

fn exp_grid_acf(cfg: &ExperimentConfig) -> Result<Report> {
    let n_list = cfg.get_usize_list("n_list", &[4, 8, 16])?;
    let res = cfg.get_usize("resolution", 64)?;
    let tol_final = cfg.get_f64("tol_final", 0.05)?;
    let k = CompactBox::new(vec![(0.0, 1.0), (0.0, 1.0)])?;
    let spec = SeminormSpec::new(k, 0, Aggregate::P1, res)?;

    let families: Vec<(&str, Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>)> = vec![
        ("ypow", Arc::new(|x: f64, y: f64| y.powf(1.0 + x / 2.0))),
        ("condfree", Arc::new(|_x: f64, y: f64| y * y)),
    ];

    let mut results = serde_json::Map::new();
    let mut pass = true;
    for (name, u) in families {
        // Normalization check: u(·, 0) = 0 and u(·, 1) = 1.
        for i in 0..=64 {
            let x = i as f64 / 64.0;
            if u(x, 0.0).abs() > 1e-9 || (u(x, 1.0) - 1.0).abs() > 1e-9 {
                return Err(Error::WeightConstraint(format!(
                    "family {name} violates u(x,0)=0, u(x,1)=1 at x = {x}"
                )));
            }
        }
        let target = {
            let u = u.clone();
            move |p: &[f64]| -> Result<Vec<f64>> { Ok(vec![p[0], u(p[0], p[1])]) }
        };
        let mut curve = Vec::new();
        for &n in &n_list {
            let f_n = grid_acf_map(u.clone(), n);
            let err = seminorm_diff(&f_n, &target, &spec)?;
            curve.push((n as f64, err));
        }
        let monotone = curve.windows(2).all(|w| w[1].1 <= w[0].1);
        let final_err = curve.last().unwrap().1;
        let conditioner_free = name == "condfree";
        let family_ok = if conditioner_free {
            curve.iter().all(|&(_, e)| e <= 1e-10)
        } else {
            let lx: Vec<f64> = curve.iter().map(|(n, _)| n.ln()).collect();
            let ly: Vec<f64> = curve.iter().map(|(_, e)| e.max(1e-300).ln()).collect();
            let slope = fit_slope(&lx, &ly);
            monotone && final_err <= tol_final && slope <= -0.8
        };
        pass &= family_ok;

        if let Some(csv) = cfg.params.get("csv_out") {
            write_csv(&format!("{csv}.{name}.csv"), "n,l1_error", &curve)?;
        }
        results.insert(
            name.to_string(),
            json!({
                "curve": curve.iter().map(|(n, e)| json!({"n": n, "l1_error": e})).collect::<Vec<_>>(),
                "monotone": monotone,
                "final_error": final_err,
                "ok": family_ok,
            }),
        );
    }

    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results: Value::Object(results),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Triangular pipeline
// ---------------------------------------------------------------------------

fn exp_triangular_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    let t = cfg.get_f64("t", 1.0 / 64.0)?;
    let check_grid = cfg.get_usize("check_grid", 41)?;
    let probe_grid = cfg.get_usize("probe_grid", 9)?;
    let tol = cfg.get_f64("tol", 1e-9)?;
    let k = CompactBox::new(vec![(-2.0, 2.0), (-2.0, 2.0)])?;

    let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    let flow = rotation_flow(&a, 0.5, 1.5)?;
    // Rescale time so the unit endpoint of `scaled` is the time-t map.
    let scaled = {
        let flow = flow.clone();
        FlowHandle::new(2, move |x, s| flow.eval(x, s * t))
    };
    let endpoint = SmoothMap::from_flow(&scaled, 1.0);

    let near = near_id_check(&endpoint, &k, probe_grid)?;
    let (piece, n_pieces) = if near.ok {
        (endpoint.clone(), 1)
    } else {
        let (factors, n) = split_until_near_id(&scaled, &k, probe_grid)?;
        (factors[0].clone(), n)
    };

    let fact = triangular_factorize(&piece, &k, probe_grid, tol)?;

    // Recompose all pieces and compare against the direct endpoint on a grid.
    let mut sup_err = 0.0_f64;
    for i in 0..check_grid {
        for j in 0..check_grid {
            let x = [
                -2.0 + 4.0 * i as f64 / (check_grid - 1) as f64,
                -2.0 + 4.0 * j as f64 / (check_grid - 1) as f64,
            ];
            let mut z = x.to_vec();
            for _ in 0..n_pieces {
                z = fact.eval(&z)?;
            }
            let want = scaled.eval(&x, 1.0);
            for (u, v) in z.iter().zip(&want) {
                sup_err = sup_err.max((u - v).abs());
            }
        }
    }
    let reconstruct_ok = sup_err <= 1e-6;

    // Identity input: zero factors beyond identity, zero error.
    let id_fact = triangular_factorize(&SmoothMap::identity(2), &k, probe_grid, tol)?;
    let id_out = id_fact.eval(&[0.3, -1.2])?;
    let identity_error = (id_out[0] - 0.3).abs().max((id_out[1] + 1.2).abs());
    let identity_ok = identity_error <= 1e-9;

    let pass = reconstruct_ok && identity_ok;
    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results: json!({
            "near_id_on_input": near.ok,
            "input_max_op_norm": near.max_op_norm,
            "n_pieces": n_pieces,
            "factorization_residual": fact.residual,
            "reconstruction_sup_error": sup_err,
            "reconstruction_ok": reconstruct_ok,
            "identity_error": identity_error,
            "identity_ok": identity_ok,
        }),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Distributional comparison through triangular transport
// ---------------------------------------------------------------------------

fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-(z * z) / 2.0).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Push `base` through T_target⁻¹ ∘ T_base (both maps go to the uniform cube)
/// on the target grid, via the diagonal-derivative density formula.
pub fn kr_pushforward(
    base: &GridMeasure,
    target: &GridMeasure,
    uniform: &GridMeasure,
) -> Result<GridMeasure> {
    let t_base = knothe_map(base, uniform)?;
    let t_target = knothe_map(target, uniform)?;
    let grid = target.grid().clone();
    let vol = grid.cell_volume();
    let mut weights = vec![0.0; grid.total_cells()];
    for (i, w) in weights.iter_mut().enumerate() {
        let y = grid.cell_center(i);
        // x = W⁻¹(y) with W = T_target⁻¹ ∘ T_base
        let x = t_base.inverse(&t_target.eval(&y)?)?;
        let db = t_base.diag_derivative(&x)?;
        let dt = t_target.diag_derivative(&y)?;
        let jac: f64 = dt.iter().zip(&db).map(|(a, b)| a / b).product();
        *w = base.density_at(&x) * jac * vol;
    }
    GridMeasure::new(grid, weights)
}

fn exp_distributional(cfg: &ExperimentConfig) -> Result<Report> {
    let case = cfg.get_str("case", "gauss_mixture");
    let results;
    let pass;
    match case.as_str() {
        "identity" => {
            let grid = Grid::new(vec![(0.0, 1.0)], vec![128])?;
            let m = GridMeasure::from_density(grid.clone(), |p| 1.0 + 0.3 * p[0])?;
            let uniform = GridMeasure::new(grid, vec![1.0; 128])?;
            let push = kr_pushforward(&m, &m, &uniform)?;
            let tv = tv_ipm(&push, &m)?.sup_a;
            let budget = 2.0 * m.weights().iter().cloned().fold(0.0, f64::max);
            pass = tv <= budget;
            results = json!({"tv": tv, "budget": budget});
        }
        "gauss_mixture" => {
            let cells = cfg.get_usize("cells", 512)?;
            let tol = cfg.get_f64("tol", 0.02)?;
            let grid = Grid::new(vec![(-6.0, 6.0)], vec![cells])?;
            let base = GridMeasure::from_density(grid.clone(), |p| gaussian_pdf(p[0], 0.0, 1.0))?;
            let target = GridMeasure::from_density(grid.clone(), |p| {
                0.5 * gaussian_pdf(p[0], -2.0, 0.6) + 0.5 * gaussian_pdf(p[0], 1.5, 0.9)
            })?;
            let ugrid = Grid::new(vec![(0.0, 1.0)], vec![cells])?;
            let uniform = GridMeasure::new(ugrid, vec![1.0; cells])?;
            let push = kr_pushforward(&base, &target, &uniform)?;
            let tv = tv_ipm(&push, &target)?.sup_a;
            pass = tv <= tol;
            results = json!({"tv": tv, "tol": tol});
        }
        "banana" => {
            let res = cfg.get_usize("res", 64)?;
            let cert_res = cfg.get_usize("cert_res", 16)?;
            let tol = cfg.get_f64("tol", 0.05)?;
            let banana = |p: &[f64]| {
                let (x, y) = (p[0], p[1]);
                (-(x * x) / 2.0 - (y - (x * x - 2.0) / 2.0).powi(2) / 0.32).exp() + 1e-9
            };
            let run_at = |r: usize| -> Result<(GridMeasure, GridMeasure)> {
                let grid = Grid::new(vec![(-3.0, 3.0), (-3.0, 3.0)], vec![r, r])?;
                let base = GridMeasure::from_density(grid.clone(), |_| 1.0)?;
                let target = GridMeasure::from_density(grid, banana)?;
                let ugrid = Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![r, r])?;
                let uniform = GridMeasure::new(ugrid, vec![1.0; r * r])?;
                let push = kr_pushforward(&base, &target, &uniform)?;
                Ok((push, target))
            };
            let (push, target) = run_at(res)?;
            let tv = tv_ipm(&push, &target)?.sup_a;
            // Certify the IPM inequalities at a resolution the exact W₁
            // solver handles quickly; the inequalities are resolution-local.
            let (cpush, ctarget) = run_at(cert_res)?;
            let k = CompactBox::new(vec![(-3.0, 3.0), (-3.0, 3.0)])?;
            let cert = certify_bounds(&cpush, &ctarget, &k, &Kernel::Gaussian { gamma: 1.0 })?;
            pass = tv <= tol && cert.all_pass;
            results = json!({
                "tv": tv,
                "tol": tol,
                "cert_res": cert_res,
                "certificate": serde_json::to_value(&cert)?,
            });
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown case {other}; expected identity | gauss_mixture | banana"
            )))
        }
    }
    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Flow-error certificates on randomized field pairs
// ---------------------------------------------------------------------------

/// A smooth compactly supported 1-D field c·bump((x − shift)/width) with an
/// empirically measured Lipschitz constant.
fn scaled_bump_field(amp: f64, shift: f64, width: f64) -> Result<VectorField> {
    let eval = move |x: f64| amp * bump_unit((x - shift) / width);
    let n = 20_001;
    let mut lip: f64 = 0.0;
    let mut prev = eval(-4.0);
    for i in 1..n {
        let x = -4.0 + 8.0 * i as f64 / (n - 1) as f64;
        let v = eval(x);
        lip = lip.max((v - prev).abs() / (8.0 / (n - 1) as f64));
        prev = v;
    }
    VectorField::new(1, (lip * 1.05).max(1e-9), move |x: &[f64]| vec![eval(x[0])])
}

fn exp_node(cfg: &ExperimentConfig) -> Result<Report> {
    let n_pairs = cfg.get_usize("pairs", 20)?;
    let k = CompactBox::new(vec![(-0.5, 0.5)])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut reports = Vec::new();
    for pair in 0..n_pairs {
        let (label, big_f, f): (&str, VectorField, VectorField) = match pair {
            0 => {
                // f = F: measured error must be 0 ≤ bound.
                ("identical", bump_field_1d(), bump_field_1d())
            }
            1 => {
                // Constant shift: both flows are translations, the endpoint
                // gap equals δ exactly.
                let big = VectorField::new(1, 1e-9, |_x: &[f64]| vec![0.0])?;
                let small = VectorField::new(1, 1e-9, |_x: &[f64]| vec![0.25])?;
                ("constant_shift", big, small)
            }
            2 => {
                // Fit a small net to the bump field and certify the fitted
                // field; the bound holds regardless of fit quality because it
                // uses the measured gap δ.
                let big = bump_field_1d();
                let target = ScalarField::from_fn(1, {
                    let big = bump_field_1d();
                    move |x: &[f64]| big.eval(x)[0]
                });
                let fit = mlp_fit(
                    &target,
                    &[(-1.5, 1.5)],
                    64,
                    &[1, 8, 1],
                    Activation::Tanh,
                    500,
                    0.1,
                    cfg.seed.wrapping_add(2),
                )?;
                let net = fit.net;
                let lip = net.lipschitz_upper_bound().max(1e-9);
                let f = VectorField::new(1, lip, move |x: &[f64]| vec![net.eval(x)])?;
                ("mlp_fit", big, f)
            }
            _ => {
                let amp = rng.gen_range(-0.5..0.5);
                let shift = rng.gen_range(-0.3..0.3);
                let width = rng.gen_range(0.5..1.5);
                let eta = rng.gen_range(0.0..0.3);
                let shift2 = rng.gen_range(-0.3..0.3);
                let big = scaled_bump_field(amp, shift, width)?;
                let f = scaled_bump_field(amp + eta, shift2, width)?;
                ("random_bump", big, f)
            }
        };
        let rep = gronwall_certificate(&big_f, &f, &k, 8, cfg.seed.wrapping_add(pair as u64))?;
        reports.push(json!({
            "pair": pair,
            "kind": label,
            "delta": rep.delta,
            "bound": rep.bound,
            "measured": rep.measured,
            "pass": rep.pass,
        }));
    }

    let n_pass = reports.iter().filter(|r| r["pass"].as_bool() == Some(true)).count();
    let pass = n_pass == n_pairs;
    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results: json!({"pairs": reports, "n_pass": n_pass, "n_total": n_pairs}),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Random affine realizations
// ---------------------------------------------------------------------------

fn exp_gl(cfg: &ExperimentConfig) -> Result<Report> {
    let trials = cfg.get_usize("trials", 100)?;
    let dim = cfg.get_usize("dim", 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0_f64;
    let mut n_pass = 0usize;
    for _ in 0..trials {
        // Rejection-sample a well-conditioned matrix.
        let a = loop {
            let cand = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-2.0_f64..2.0));
            if cand.determinant().abs() >= 0.05 {
                break cand;
            }
        };
        let b = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0_f64..1.0));
        let inn = realize_gl(&a, &b)?;
        let a_norm = a.norm();
        let mut trial_worst = 0.0_f64;
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0_f64..2.0)).collect();
            let want = &a * DVector::from_column_slice(&x) + &b;
            let got = inn.forward(&x)?;
            let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = 1.0 + a_norm * xnorm;
            for (g, w) in got.iter().zip(want.iter()) {
                trial_worst = trial_worst.max((g - w).abs() / scale);
            }
        }
        worst = worst.max(trial_worst);
        if trial_worst <= 1e-9 {
            n_pass += 1;
        }
    }
    let pass = n_pass == trials;
    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results: json!({"n_pass": n_pass, "n_total": trials, "worst_normalized_error": worst}),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Random IPM certificate batches
// ---------------------------------------------------------------------------

fn random_measure(rng: &mut ChaCha8Rng, grid: &Grid) -> Result<GridMeasure> {
    let weights: Vec<f64> =
        (0..grid.total_cells()).map(|_| rng.gen_range(0.01_f64..1.0)).collect();
    GridMeasure::new(grid.clone(), weights)
}

fn exp_ipm(cfg: &ExperimentConfig) -> Result<Report> {
    let trials = cfg.get_usize("trials", 100)?;
    let oracle_trials = cfg.get_usize("oracle_trials", 20)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![6, 6])?;
    let k = CompactBox::new(vec![(0.0, 1.0), (0.0, 1.0)])?;
    let kernel = Kernel::Gaussian { gamma: 1.0 };

    let mut n_pass = 0usize;
    let mut worst_slack = f64::INFINITY;
    for _ in 0..trials {
        let mu = random_measure(&mut rng, &grid)?;
        let nu = random_measure(&mut rng, &grid)?;
        let cert = certify_bounds(&mu, &nu, &k, &kernel)?;
        for b in &cert.bounds {
            if b.hypothesis_met {
                worst_slack = worst_slack.min(b.slack);
            }
        }
        if cert.all_pass {
            n_pass += 1;
        }
    }

    // Cross-check the flow solvers against exhaustive enumeration on tiny
    // supports (2×2 grids: at most 4 cells differ).
    let small = Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![2, 2])?;
    let mut oracle_ok = 0usize;
    let mut oracle_worst = 0.0_f64;
    for _ in 0..oracle_trials {
        let mu = random_measure(&mut rng, &small)?;
        let nu = random_measure(&mut rng, &small)?;
        let dw = (w1(&mu, &nu)? - oracle::w1_bruteforce(&mu, &nu)?).abs();
        let dd = (dudley(&mu, &nu)? - oracle::dudley_bruteforce(&mu, &nu)?).abs();
        oracle_worst = oracle_worst.max(dw).max(dd);
        if dw <= 1e-9 && dd <= 1e-9 {
            oracle_ok += 1;
        }
    }

    let pass = n_pass == trials && oracle_ok == oracle_trials;
    Ok(Report {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        params: params_value(cfg),
        results: json!({
            "n_pass": n_pass,
            "n_total": trials,
            "worst_slack": worst_slack,
            "oracle_ok": oracle_ok,
            "oracle_total": oracle_trials,
            "oracle_worst_gap": oracle_worst,
        }),
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(experiment: &str, seed: u64) -> ExperimentConfig {
        ExperimentConfig::new(experiment, seed, PathBuf::from("/tmp/out.json"))
    }

    #[test]
    fn config_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "a = 0.25 # comment\n\n# full comment\nn_list = 4, 8\n").unwrap();
        let mut c = cfg("psi_construction", 1);
        c.load_params(&p).unwrap();
        assert_eq!(c.get_f64("a", 0.0).unwrap(), 0.25);
        assert_eq!(c.get_usize_list("n_list", &[]).unwrap(), vec![4, 8]);
        assert_eq!(c.get_str("missing", "z"), "z");
    }

    #[test]
    fn schema_validation_catches_missing_field() {
        let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        let bad = json!({"experiment": "x", "seed": 1});
        assert!(validate_against_schema(&bad, &schema, "$").is_err());
        let good = json!({
            "experiment": "x", "seed": 1, "params": {}, "results": {}, "pass": true
        });
        validate_against_schema(&good, &schema, "$").unwrap();
    }

    #[test]
    fn determinism_same_seed_same_bytes() {
        let c = cfg("gl", 11);
        let r1 = run_experiment(&c).unwrap().to_json().unwrap();
        let r2 = run_experiment(&c).unwrap().to_json().unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn gl_experiment_passes() {
        let mut c = cfg("gl", 3);
        c.params.insert("trials".into(), "20".into());
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn node_experiment_passes() {
        let mut c = cfg("node", 5);
        c.params.insert("pairs".into(), "6".into());
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn ipm_experiment_passes() {
        let mut c = cfg("ipm", 7);
        c.params.insert("trials".into(), "10".into());
        c.params.insert("oracle_trials".into(), "5".into());
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn psi_experiment_passes() {
        let c = cfg("psi_construction", 1);
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn grid_acf_experiment_passes() {
        let c = cfg("grid_acf", 1);
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn distributional_gauss_mixture_passes() {
        let c = cfg("distributional", 1);
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn distributional_identity_passes() {
        let mut c = cfg("distributional", 1);
        c.params.insert("case".into(), "identity".into());
        let r = run_experiment(&c).unwrap();
        assert!(r.pass, "{}", r.to_json().unwrap());
    }

    #[test]
    fn unknown_experiment_rejected() {
        assert!(run_experiment(&cfg("nope", 0)).is_err());
    }
}
