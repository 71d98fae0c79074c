//! Reconstruction from simulated or measured data: filtered back projection,
//! pattern-function sampling, quadrature-basis elements, characteristic
//! function inversion, displaced-count methods, moments and endoscopy.

use crate::detection::{
    bernoulli_matrix, chopping_matrix, displaced_count_probabilities, invert_chopping, DisplacedCountDataset,
    HomodyneDataset, ProbeChannel, ProbeSignal,
};
use crate::error::{Error, Result};
use crate::inference::{self, LinearModel, Regularization, Weights};
use crate::patterns::{classical_phase_kernel, phase_moment_kernel, characteristic_kernel, PatternTable};
use crate::special::{
    binomial, composite_gauss, displacement_element, hermite_functions, hermite_polynomials, simpson_weights,
    trapezoid_weights,
};
use crate::states::{
    axis_weights, hermitian_part, DensityMatrix, DistributionKind, Grid1D, PhaseSpaceConvention, PhaseSpaceGrid,
    QuadratureDistribution,
};
use crate::Warned;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde_json::{json, Map, Value};
use std::f64::consts::{PI, SQRT_2};

type C = Complex64;

pub const DEFAULT_Z_CUT: f64 = 6.0;
const PHASE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Estimate {
    Density(DensityMatrix),
    PhaseSpace(PhaseSpaceGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodInfo {
    pub tag: String,
    pub params: Map<String, Value>,
}

impl MethodInfo {
    fn new(tag: &str, params: Value) -> Self {
        let params = match crate::io::normalize_floats(params) {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        MethodInfo { tag: tag.to_string(), params }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub condition_numbers: Vec<f64>,
    pub truncation_tail: Option<f64>,
    pub hermitized: bool,
    pub projected: bool,
    pub min_eigenvalue: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub estimate: Estimate,
    /// Per-element standard errors of a density-matrix estimate.
    pub std_errors: Option<DMatrix<f64>>,
    pub method: MethodInfo,
    pub diagnostics: Diagnostics,
}

impl ReconstructionReport {
    fn density_report(rho: DensityMatrix, errors: Option<DMatrix<f64>>, method: MethodInfo, mut diag: Diagnostics) -> Self {
        diag.min_eigenvalue = Some(rho.min_eigenvalue());
        if diag.min_eigenvalue.unwrap() < -1e-10 {
            diag.warnings.push(format!("estimate is not positive (min eigenvalue {:.3e})", diag.min_eigenvalue.unwrap()));
        }
        ReconstructionReport { estimate: Estimate::Density(rho), std_errors: errors, method, diagnostics: diag }
    }

    pub fn density(&self) -> Option<&DensityMatrix> {
        match &self.estimate {
            Estimate::Density(r) => Some(r),
            _ => None,
        }
    }

    pub fn phase_space(&self) -> Option<&PhaseSpaceGrid> {
        match &self.estimate {
            Estimate::PhaseSpace(g) => Some(g),
            _ => None,
        }
    }

    /// Replace a density estimate by its nearest physical state; flagged.
    pub fn projected(mut self) -> Self {
        if let Estimate::Density(r) = &self.estimate {
            let p = r.project_to_physical();
            self.diagnostics.projected = true;
            self.diagnostics.warnings.push("estimate projected onto physical states".into());
            self.estimate = Estimate::Density(p);
        }
        self
    }
}

/// Homodyne input: raw samples or exactly integrated distributions.
#[derive(Debug, Clone, Copy)]
pub enum QuadratureData<'a> {
    Samples(&'a HomodyneDataset),
    Exact(&'a QuadratureDistribution),
}

struct Slice {
    phi: f64,
    xs: Vec<f64>,
    /// Quadrature weights (exact) or 1/n (samples).
    weights: Vec<f64>,
    count: Option<usize>,
}

impl<'a> QuadratureData<'a> {
    pub fn eta(&self) -> f64 {
        match self {
            QuadratureData::Samples(d) => d.eta,
            QuadratureData::Exact(p) => p.eta,
        }
    }

    pub fn phases(&self) -> Vec<f64> {
        match self {
            QuadratureData::Samples(d) => d.phases(),
            QuadratureData::Exact(p) => p.phases.clone(),
        }
    }

    fn slices(&self) -> Result<Vec<Slice>> {
        match self {
            QuadratureData::Samples(d) => d
                .records
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    if r.samples.is_empty() {
                        return Err(Error::EmptyPhase(k));
                    }
                    let w = 1.0 / r.samples.len() as f64;
                    Ok(Slice { phi: r.phi, xs: r.samples.clone(), weights: vec![w; r.samples.len()], count: Some(r.samples.len()) })
                })
                .collect(),
            QuadratureData::Exact(p) => {
                let xs = p.grid.points();
                let w = p.grid.trapezoid_weights();
                Ok(p.phases
                    .iter()
                    .zip(&p.values)
                    .map(|(&phi, v)| Slice {
                        phi,
                        xs: xs.clone(),
                        weights: w.iter().zip(v).map(|(a, b)| a * b).collect(),
                        count: None,
                    })
                    .collect())
            }
        }
    }
}

/// Per-phase means and second moments of real functions g_j(x).
struct PhaseMoments {
    phi: f64,
    mean: Vec<f64>,
    second: Vec<f64>,
    count: Option<usize>,
}

fn phase_moments(slices: &[Slice], n_funcs: usize, mut eval: impl FnMut(f64, &mut [f64])) -> Vec<PhaseMoments> {
    let mut buf = vec![0.0; n_funcs];
    slices
        .iter()
        .map(|s| {
            let mut mean = vec![0.0; n_funcs];
            let mut second = vec![0.0; n_funcs];
            for (&x, &w) in s.xs.iter().zip(&s.weights) {
                if w == 0.0 {
                    continue;
                }
                eval(x, &mut buf);
                for j in 0..n_funcs {
                    mean[j] += w * buf[j];
                    second[j] += w * buf[j] * buf[j];
                }
            }
            PhaseMoments { phi: s.phi, mean, second, count: s.count }
        })
        .collect()
}

/// Variance of the mean of g_j within one phase (zero for exact input).
fn within_phase_variance(pm: &PhaseMoments, j: usize) -> f64 {
    match pm.count {
        Some(n) if n > 1 => {
            let v = (pm.second[j] - pm.mean[j] * pm.mean[j]) * n as f64 / (n - 1) as f64;
            v.max(0.0) / n as f64
        }
        _ => 0.0,
    }
}

/// Phases folded into [0, pi), sorted.
fn folded_phases(phases: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = phases
        .iter()
        .map(|p| {
            let f = p.rem_euclid(PI);
            if PI - f < PHASE_TOL {
                0.0
            } else {
                f
            }
        })
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Number of distinct phases modulo pi.
pub fn distinct_phase_count(phases: &[f64]) -> usize {
    let f = folded_phases(phases);
    let mut n = 0;
    let mut last = f64::NEG_INFINITY;
    for p in f {
        if p - last > PHASE_TOL {
            n += 1;
            last = p;
        }
    }
    n
}

/// True when the phases are N distinct values equally spaced by pi/N modulo pi.
pub fn phases_equidistant(phases: &[f64]) -> bool {
    let f = folded_phases(phases);
    let n = f.len();
    if n == 0 || distinct_phase_count(phases) != n {
        return false;
    }
    let step = PI / n as f64;
    (0..n).all(|k| (f[k] - f[0] - k as f64 * step).abs() < PHASE_TOL)
}

fn require_equidistant(phases: &[f64]) -> Result<()> {
    if !phases_equidistant(phases) {
        return Err(Error::InsufficientPhaseCoverage(format!(
            "{} phases are not equidistant over a pi interval",
            phases.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- histograms

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalQuadratureHistogram {
    pub phases: Vec<f64>,
    /// Bin edges shared by all phases.
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
    /// Normalized densities per phase.
    pub densities: Vec<Vec<f64>>,
    pub eta: f64,
}

impl EmpiricalQuadratureHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Densities on the bin centers as an empirical distribution.
    pub fn to_distribution(&self) -> QuadratureDistribution {
        let n = self.edges.len() - 1;
        let h = self.edges[1] - self.edges[0];
        let grid = Grid1D { x_min: self.edges[0] + 0.5 * h, x_max: self.edges[n] - 0.5 * h, n_points: n };
        QuadratureDistribution {
            phases: self.phases.clone(),
            grid,
            values: self.densities.clone(),
            eta: self.eta,
            kind: DistributionKind::Empirical,
        }
    }
}

pub fn bin_dataset(ds: &HomodyneDataset, bins: usize) -> Result<EmpiricalQuadratureHistogram> {
    if bins < 8 {
        return Err(Error::InvalidParameter(format!("need at least 8 bins, got {bins}")));
    }
    for (k, r) in ds.records.iter().enumerate() {
        if r.samples.is_empty() {
            return Err(Error::EmptyPhase(k));
        }
    }
    let lo = ds.records.iter().flat_map(|r| r.samples.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = ds.records.iter().flat_map(|r| r.samples.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let h = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * h).collect();
    let mut counts = Vec::with_capacity(ds.records.len());
    let mut densities = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        let mut c = vec![0u64; bins];
        for &x in &r.samples {
            let i = (((x - lo) / h).floor() as usize).min(bins - 1);
            c[i] += 1;
        }
        let n = r.samples.len() as f64;
        densities.push(c.iter().map(|&v| v as f64 / (n * h)).collect());
        counts.push(c);
    }
    Ok(EmpiricalQuadratureHistogram { phases: ds.phases(), edges, counts, densities, eta: ds.eta })
}

// ---------------------------------------------------------------- FBP

#[derive(Debug, Clone, PartialEq)]
pub struct FbpOptions {
    pub z_c: f64,
    /// Defaults to 1 - 1/eta.
    pub s_target: Option<f64>,
    pub allow_unstable: bool,
}

impl Default for FbpOptions {
    fn default() -> Self {
        FbpOptions { z_c: DEFAULT_Z_CUT, s_target: None, allow_unstable: false }
    }
}

/// K(u) = 2 int_0^{z_c} z e^{c z^2} cos(z u) dz on a uniform u table.
struct FilterTable {
    du: f64,
    values: Vec<f64>,
}

impl FilterTable {
    fn new(z_c: f64, c: f64, u_max: f64) -> Self {
        let du = 1e-3;
        let n = (u_max / du).ceil() as usize + 2;
        let values = if c == 0.0 {
            (0..n)
                .map(|i| {
                    let u = i as f64 * du;
                    if u * z_c < 1e-4 {
                        z_c * z_c * (1.0 - (u * z_c).powi(2) / 4.0)
                    } else {
                        2.0 * (((z_c * u).cos() - 1.0) / (u * u) + z_c * (z_c * u).sin() / u)
                    }
                })
                .collect()
        } else {
            let panels = (z_c * u_max / 2.0).ceil() as usize + 8;
            let (zs, ws) = composite_gauss(0.0, z_c, panels, 12);
            let pre: Vec<f64> = zs.iter().zip(&ws).map(|(&z, &w)| 2.0 * w * z * (c * z * z).exp()).collect();
            (0..n).map(|i| {
                let u = i as f64 * du;
                zs.iter().zip(&pre).map(|(&z, &p)| p * (z * u).cos()).sum()
            }).collect()
        };
        FilterTable { du, values }
    }

    fn eval(&self, u: f64) -> f64 {
        let t = u.abs() / self.du;
        let i = t.floor() as usize;
        if i + 1 >= self.values.len() {
            return 0.0;
        }
        let f = t - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Inverse Radon transform with the |z| filter cut at z_c. The output grid
/// supplies coordinates and convention; values are overwritten.
pub fn fbp_phase_space(p: &QuadratureDistribution, out: &PhaseSpaceGrid, opts: &FbpOptions) -> Result<ReconstructionReport> {
    let eta = p.eta;
    crate::detection::check_eta(eta)?;
    if !(opts.z_c > 0.0) {
        return Err(Error::InvalidParameter("z_c must be positive".into()));
    }
    require_equidistant(&p.phases)?;
    let limit = 1.0 - 1.0 / eta;
    let s = opts.s_target.unwrap_or(limit);
    let mut diag = Diagnostics::default();
    if s > limit + 1e-12 {
        if !opts.allow_unstable {
            return Err(Error::UnstableRequest { s, limit });
        }
        diag.warnings.push(format!("unstable inversion: s = {s} exceeds 1 - 1/eta = {limit}"));
    }
    let c = 0.25 * (s - 1.0 + 1.0 / eta);
    let xs = p.grid.points();
    let wx = p.grid.trapezoid_weights();
    let mut grid = out.clone();
    grid.s = s;
    let coords: Vec<Vec<(f64, f64)>> = (0..grid.xs.len())
        .map(|i| {
            (0..grid.ys.len())
                .map(|j| {
                    let a = grid.alpha_at(i, j);
                    (SQRT_2 * a.re, SQRT_2 * a.im)
                })
                .collect()
        })
        .collect();
    let r_max = coords.iter().flatten().fold(0.0f64, |a, &(q, pp)| a.max(q.hypot(pp)));
    let x_ext = p.grid.x_min.abs().max(p.grid.x_max.abs());
    let filter = FilterTable::new(opts.z_c, c, x_ext + r_max + 1.0);
    let n_ph = p.phases.len() as f64;
    // P_QP = (1/4 pi^2)(pi/N) sum_k sum_i w_i p_ki K(x_i - q cos phi - p sin phi)
    let pre = 1.0 / (4.0 * PI * PI) * PI / n_ph;
    let weighted: Vec<Vec<f64>> = p.values.iter().map(|row| row.iter().zip(&wx).map(|(a, b)| a * b).collect()).collect();
    let to_conv = 2.0 * grid.convention_factor();
    for i in 0..grid.xs.len() {
        for j in 0..grid.ys.len() {
            let (q, pp) = coords[i][j];
            let mut acc = 0.0;
            for (k, &phi) in p.phases.iter().enumerate() {
                let u0 = q * phi.cos() + pp * phi.sin();
                let row = &weighted[k];
                for (xi, wv) in xs.iter().zip(row) {
                    if *wv != 0.0 {
                        acc += wv * filter.eval(xi - u0);
                    }
                }
            }
            grid.values[i][j] = to_conv * pre * acc;
        }
    }
    let method = MethodInfo::new(
        "fbp",
        json!({"z_c": opts.z_c, "eta": eta, "s": s, "phases": p.phases.len(), "allow_unstable": opts.allow_unstable}),
    );
    Ok(ReconstructionReport { estimate: Estimate::PhaseSpace(grid), std_errors: None, method, diagnostics: diag })
}

/// Discrete Radon projection of a phase-space grid back to quadrature
/// distributions (bilinear interpolation, zero outside the grid).
pub fn radon_project(grid: &PhaseSpaceGrid, phases: &[f64], x_grid: &Grid1D) -> QuadratureDistribution {
    let to_qp = 1.0 / (2.0 * grid.convention_factor());
    let scale = match grid.convention {
        PhaseSpaceConvention::Alpha => 1.0 / SQRT_2,
        PhaseSpaceConvention::QP => 1.0,
    };
    let dx = (grid.xs[1] - grid.xs[0]).abs() / scale;
    let reach = grid.xs.iter().chain(&grid.ys).fold(0.0f64, |a, v| a.max(v.abs())) / scale * SQRT_2;
    let n_y = (2.0 * reach / (0.5 * dx)).ceil() as usize + 1;
    let ys: Vec<f64> = (0..n_y).map(|i| -reach + 2.0 * reach * i as f64 / (n_y - 1) as f64).collect();
    let wy = trapezoid_weights(n_y, ys[1] - ys[0]);
    let values = phases
        .iter()
        .map(|&phi| {
            let (c, s) = (phi.cos(), phi.sin());
            x_grid
                .points()
                .iter()
                .map(|&x| {
                    ys.iter()
                        .zip(&wy)
                        .map(|(&y, &w)| {
                            let q = x * c - y * s;
                            let p = x * s + y * c;
                            w * bilinear(grid, q * scale, p * scale)
                        })
                        .sum::<f64>()
                        * to_qp
                })
                .collect()
        })
        .collect();
    QuadratureDistribution { phases: phases.to_vec(), grid: *x_grid, values, eta: 1.0, kind: DistributionKind::Exact }
}

fn bilinear(g: &PhaseSpaceGrid, x: f64, y: f64) -> f64 {
    let locate = |axis: &[f64], v: f64| -> Option<(usize, f64)> {
        let n = axis.len();
        if v < axis[0] || v > axis[n - 1] {
            return None;
        }
        let i = axis.partition_point(|&a| a <= v).clamp(1, n - 1) - 1;
        Some((i, (v - axis[i]) / (axis[i + 1] - axis[i])))
    };
    match (locate(&g.xs, x), locate(&g.ys, y)) {
        (Some((i, fx)), Some((j, fy))) => {
            let v = &g.values;
            v[i][j] * (1.0 - fx) * (1.0 - fy) + v[i + 1][j] * fx * (1.0 - fy) + v[i][j + 1] * (1.0 - fx) * fy
                + v[i + 1][j + 1] * fx * fy
        }
        _ => 0.0,
    }
}

// ---------------------------------------------------------------- quadrature basis

/// <x - x', phi| rho |x + x', phi> from distributions over equidistant phases,
/// with trigonometric interpolation in phase and a z integral up to z_max.
pub fn density_quadrature_basis(p: &QuadratureDistribution, x: f64, x_prime: f64, phi: f64, z_max: f64) -> Result<C> {
    Ok(quadrature_basis_grid(p, &[x], &[x_prime], phi, z_max)?[0][0])
}

/// The same elements on a grid, out[j][i] for (xs[i], x_primes[j]).
pub fn quadrature_basis_grid(p: &QuadratureDistribution, xs: &[f64], x_primes: &[f64], phi: f64, z_max: f64) -> Result<Vec<Vec<C>>> {
    if p.phases.len() < 2 {
        return Err(Error::InsufficientPhaseCoverage("at least two phases are required".into()));
    }
    require_equidistant(&p.phases)?;
    if !(z_max > 0.0) {
        return Err(Error::InvalidParameter("z_max must be positive".into()));
    }
    let n = p.phases.len();
    // sort phases modulo pi; records at phi >= pi enter through p(x, phi + pi) = p(-x, phi)
    let mut order: Vec<(f64, usize, bool)> = p
        .phases
        .iter()
        .enumerate()
        .map(|(k, &ph)| {
            let f = ph.rem_euclid(PI);
            let flipped = ph.rem_euclid(2.0 * PI) >= PI - PHASE_TOL && f > PHASE_TOL;
            (if PI - f < PHASE_TOL { 0.0 } else { f }, k, flipped)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let phi0 = order[0].0;
    let grid_x = p.grid.points();
    let wx = p.grid.trapezoid_weights();
    let weighted: Vec<Vec<(f64, f64)>> = p
        .values
        .iter()
        .map(|row| grid_x.iter().zip(&wx).zip(row).filter(|(_, &v)| v != 0.0).map(|((&x, &w), &v)| (x, w * v)).collect())
        .collect();
    let psi_at = |z: f64| -> Vec<C> {
        // 2n samples of Psi(z, phi0 + j pi / n) over [0, 2 pi)
        let mut out = vec![C::new(0.0, 0.0); 2 * n];
        for (j, &(_, k, flipped)) in order.iter().enumerate() {
            let zz = if flipped { -z } else { z };
            let v: C = weighted[k].iter().map(|&(xi, wv)| C::from_polar(wv, zz * xi)).sum();
            out[j] = v;
            out[j + n] = v.conj();
        }
        out
    };
    let x_ext = p.grid.x_min.abs().max(p.grid.x_max.abs());
    let x_abs = xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let panels = ((2.0 * z_max * (x_ext + x_abs + 1.0)) / 3.0).ceil() as usize + 8;
    let (zs, ws) = composite_gauss(-z_max, z_max, panels, 12);
    let m = 2 * n;
    let dft = dft_table(m);
    x_primes
        .iter()
        .map(|&xp| {
            let inner: Vec<C> = zs
                .iter()
                .zip(&ws)
                .map(|(&z, &w)| {
                    let zt = z.hypot(2.0 * xp);
                    let theta = (-2.0 * xp).atan2(z);
                    w * trig_interpolate(&psi_at(zt), phi + theta - phi0, &dft)
                })
                .collect();
            Ok(xs
                .iter()
                .map(|&x| zs.iter().zip(&inner).map(|(&z, v)| C::from_polar(1.0, -z * x) * v).sum::<C>() / (2.0 * PI))
                .collect())
        })
        .collect()
}

/// e^{-i h 2 pi j / m} for harmonics h = -m/2..=m/2 (rows) and samples j.
fn dft_table(m: usize) -> Vec<Vec<C>> {
    let half = (m / 2) as i64;
    (-half..=half).map(|h| (0..m).map(|j| C::from_polar(1.0, -(h as f64) * 2.0 * PI * j as f64 / m as f64)).collect()).collect()
}

/// Trigonometric interpolation of m (even) equispaced samples on [0, 2 pi).
fn trig_interpolate(g: &[C], theta: f64, dft: &[Vec<C>]) -> C {
    let m = g.len();
    let half = (m / 2) as i64;
    let mut out = C::new(0.0, 0.0);
    for (row, harmonic) in dft.iter().zip(-half..=half) {
        let c: C = g.iter().zip(row).map(|(v, e)| v * e).sum::<C>() / m as f64;
        let weight = if harmonic.abs() == half { 0.5 } else { 1.0 };
        out += c * C::from_polar(weight, harmonic as f64 * theta);
    }
    out
}

// ---------------------------------------------------------------- pattern sampling

/// Pattern-function values f_mn(x) for all m <= n from a table.
fn table_row(table: &PatternTable, x: f64, out: &mut [f64]) {
    let g = &table.grid;
    let d = table.n_max + 1;
    if x < g.x_min || x > g.x_max {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let t = (x - g.x_min) / g.spacing();
    let i = (t.floor() as usize).min(g.n_points - 2);
    let f = t - i as f64;
    let mut idx = 0;
    for m in 0..d {
        for n in m..d {
            let v = table.get(m, n);
            out[idx] = v[i] * (1.0 - f) + v[i + 1] * f;
            idx += 1;
        }
    }
}

fn check_table(data: &QuadratureData, n_max: usize, table: &PatternTable) -> Result<()> {
    let eta = data.eta();
    if eta <= 0.5 || eta > 1.0 {
        return Err(Error::EtaOutOfRange(eta));
    }
    if (table.eta - eta).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "pattern table built for eta = {} but data have eta = {eta}",
            table.eta
        )));
    }
    if table.n_max < n_max {
        return Err(Error::InvalidParameter(format!("table n_max {} below requested {n_max}", table.n_max)));
    }
    Ok(())
}

/// rho_mn = (pi/N) sum_k mean_k[f_mn(x)] e^{i(m-n) phi_k} with per-element
/// standard errors from the within-phase variances.
pub fn sample_density_fock(data: QuadratureData, n_max: usize, table: &PatternTable) -> Result<ReconstructionReport> {
    check_table(&data, n_max, table)?;
    let slices = data.slices()?;
    if slices.is_empty() {
        return Err(Error::InsufficientPhaseCoverage("no phases".into()));
    }
    let d = n_max + 1;
    let td = table.n_max + 1;
    let n_pairs = td * (td + 1) / 2;
    let moments = phase_moments(&slices, n_pairs, |x, out| table_row(table, x, out));
    let pair_index = |m: usize, n: usize| {
        let (a, b) = if m <= n { (m, n) } else { (n, m) };
        a * td - a * (a.saturating_sub(1)) / 2 - if a > 0 { a } else { 0 } + b
    };
    let n_ph = slices.len() as f64;
    let mut rho = DMatrix::<C>::zeros(d, d);
    let mut err = DMatrix::<f64>::zeros(d, d);
    for m in 0..d {
        for n in 0..d {
            let j = pair_index(m, n);
            let mut acc = C::new(0.0, 0.0);
            let mut var = 0.0;
            for pm in &moments {
                acc += C::from_polar(pm.mean[j], (m as f64 - n as f64) * pm.phi);
                var += within_phase_variance(pm, j);
            }
            rho[(m, n)] = acc * (PI / n_ph);
            err[(m, n)] = (PI / n_ph) * var.sqrt();
        }
    }
    let mut diag = Diagnostics { hermitized: true, ..Default::default() };
    let phases = data.phases();
    let distinct = distinct_phase_count(&phases);
    if distinct < d {
        // elements with |m - n| >= N alias onto lower orders and are not estimated
        for m in 0..d {
            for n in 0..d {
                if m.abs_diff(n) >= distinct {
                    rho[(m, n)] = C::new(0.0, 0.0);
                    err[(m, n)] = 0.0;
                }
            }
        }
        diag.warnings.push(format!(
            "PhaseDeficit: {distinct} phases resolve only elements with |m - n| < {distinct} (others set to 0); {d} are needed for n_max = {n_max}"
        ));
    }
    if !phases_equidistant(&phases) {
        diag.warnings.push("phases are not equidistant; the uniform phase sum is only approximate".into());
    }
    let herm = hermitian_part(&rho);
    let method = MethodInfo::new(
        "pattern",
        json!({"n_max": n_max, "eta": data.eta(), "phases": slices.len(), "table_method": table.method}),
    );
    let out = DensityMatrix::from_matrix_unchecked(herm, "pattern-function estimate");
    Ok(ReconstructionReport::density_report(out, Some(err), method, diag))
}

/// p_n = pi <f_nn(x)> over all samples irrespective of phase.
pub fn photon_statistics_phase_averaged(data: QuadratureData, n_max: usize, table: &PatternTable) -> Result<(Vec<f64>, Vec<f64>)> {
    check_table(&data, n_max, table)?;
    let slices = data.slices()?;
    let d = n_max + 1;
    let eval = |x: f64, out: &mut [f64]| {
        for (n, o) in out.iter_mut().enumerate() {
            *o = table.interpolate(n, n, x);
        }
    };
    match data {
        QuadratureData::Samples(_) => {
            // pool every sample into one ensemble
            let xs: Vec<f64> = slices.iter().flat_map(|s| s.xs.iter().copied()).collect();
            let w = 1.0 / xs.len() as f64;
            let pooled = Slice { phi: 0.0, weights: vec![w; xs.len()], count: Some(xs.len()), xs };
            let pm = &phase_moments(&[pooled], d, eval)[0];
            let p = pm.mean.iter().map(|v| PI * v).collect();
            let e = (0..d).map(|j| PI * within_phase_variance(pm, j).sqrt()).collect();
            Ok((p, e))
        }
        QuadratureData::Exact(_) => {
            let moments = phase_moments(&slices, d, eval);
            let n_ph = moments.len() as f64;
            let p = (0..d).map(|j| PI / n_ph * moments.iter().map(|m| m.mean[j]).sum::<f64>()).collect();
            Ok((p, vec![0.0; d]))
        }
    }
}

// ---------------------------------------------------------------- characteristic function

#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicSamples {
    pub phases: Vec<f64>,
    /// Uniform z grid starting at 0.
    pub zs: Vec<f64>,
    /// values[k][i] = Psi(zs[i], phases[k]).
    pub values: Vec<Vec<C>>,
}

impl CharacteristicSamples {
    pub fn from_state(rho: &DensityMatrix, phases: &[f64], zs: &[f64]) -> Self {
        let values = phases
            .iter()
            .map(|&phi| zs.iter().map(|&z| crate::states::characteristic_function(rho, z, phi)).collect())
            .collect();
        CharacteristicSamples { phases: phases.to_vec(), zs: zs.to_vec(), values }
    }

    /// Assemble from probe signal pairs (Re and Im channel) taken at several phases.
    pub fn from_probe_pairs(pairs: &[(f64, ProbeSignal, ProbeSignal)]) -> Result<Self> {
        let mut phases = Vec::new();
        let mut values = Vec::new();
        let mut zs: Option<Vec<f64>> = None;
        for (phi, re, im) in pairs {
            if re.channel != ProbeChannel::CharacteristicRe || im.channel != ProbeChannel::CharacteristicIm {
                return Err(Error::InvalidParameter("probe pair must be (characteristic_re, characteristic_im)".into()));
            }
            let pts = crate::detection::characteristic_from_probe(re, im)?;
            let z: Vec<f64> = pts.iter().map(|p| p.0).collect();
            if let Some(prev) = &zs {
                if prev.len() != z.len() || prev.iter().zip(&z).any(|(a, b)| (a - b).abs() > 1e-12) {
                    return Err(Error::InvalidParameter("probe pairs use different z grids".into()));
                }
            }
            zs = Some(z);
            phases.push(*phi);
            values.push(pts.iter().map(|p| p.1).collect());
        }
        Ok(CharacteristicSamples { phases, zs: zs.unwrap_or_default(), values })
    }
}

/// rho_{n+k,n} = int_0^pi dphi e^{ik phi} int_0^inf dz K_n^(k)(z) {Re, Im} Psi(z, phi),
/// Re for even k and Im for odd k.
pub fn density_from_characteristic(samples: &CharacteristicSamples, n_max: usize) -> Result<ReconstructionReport> {
    let nz = samples.zs.len();
    if nz < 3 || samples.zs[0].abs() > 1e-12 {
        return Err(Error::InvalidParameter("z grid must start at 0 with at least 3 points".into()));
    }
    let h = samples.zs[1] - samples.zs[0];
    if samples.zs.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
        return Err(Error::InvalidParameter("z grid must be uniform".into()));
    }
    if samples.values.len() != samples.phases.len() {
        return Err(Error::DimensionMismatch(samples.phases.len(), samples.values.len()));
    }
    let d = n_max + 1;
    let distinct = distinct_phase_count(&samples.phases);
    if distinct < d {
        return Err(Error::PhaseDeficit { got: distinct, required: d });
    }
    require_equidistant(&samples.phases)?;
    let tail = samples.values.iter().map(|v| v[nz - 1].norm()).fold(0.0f64, f64::max);
    if tail >= 1e-6 {
        return Err(Error::ZRangeTooShort(samples.zs[nz - 1]));
    }
    let w = simpson_weights(nz, h);
    let n_ph = samples.phases.len() as f64;
    let mut rho = DMatrix::<C>::zeros(d, d);
    for k in 0..d {
        for n in 0..d - k {
            let kern: Vec<f64> = samples.zs.iter().zip(&w).map(|(&z, &wz)| wz * characteristic_kernel(n, k, z)).collect();
            let mut acc = C::new(0.0, 0.0);
            for (phi, vals) in samples.phases.iter().zip(&samples.values) {
                let integral: f64 = kern.iter().zip(vals).map(|(kw, v)| kw * if k % 2 == 0 { v.re } else { v.im }).sum();
                acc += C::from_polar(integral, k as f64 * phi);
            }
            let v = acc * (PI / n_ph);
            rho[(n + k, n)] = v;
            rho[(n, n + k)] = v.conj();
        }
    }
    let diag = Diagnostics { truncation_tail: Some(tail), hermitized: true, ..Default::default() };
    let method = MethodInfo::new(
        "characteristic",
        json!({"n_max": n_max, "phases": samples.phases.len(), "z_max": samples.zs[nz - 1], "z_step": h}),
    );
    let out = DensityMatrix::from_matrix_unchecked(rho, "characteristic-function estimate");
    Ok(ReconstructionReport::density_report(out, None, method, diag))
}

// ---------------------------------------------------------------- displaced counting

/// Relative frequencies of displaced photon counts (or exact probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacedFrequencies {
    pub alphas: Vec<C>,
    pub freqs: Vec<Vec<f64>>,
    pub eta: f64,
    pub chopping: Option<usize>,
    /// None for exact probabilities.
    pub shots: Option<u64>,
}

impl DisplacedFrequencies {
    pub fn from_dataset(ds: &DisplacedCountDataset) -> Self {
        let freqs = ds
            .records
            .iter()
            .map(|r| {
                let total: u64 = r.counts.iter().sum();
                r.counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
            })
            .collect();
        DisplacedFrequencies {
            alphas: ds.records.iter().map(|r| r.alpha).collect(),
            freqs,
            eta: ds.eta,
            chopping: ds.chopping_channels,
            shots: Some(ds.shots),
        }
    }

    pub fn exact(rho: &DensityMatrix, alphas: &[C], eta: f64, chopping: Option<usize>) -> Result<Self> {
        let freqs = alphas.iter().map(|&a| displaced_count_probabilities(rho, a, eta, chopping)).collect::<Result<_>>()?;
        Ok(DisplacedFrequencies { alphas: alphas.to_vec(), freqs, eta, chopping, shots: None })
    }
}

/// Equidistant points on the circle |alpha| = r.
pub fn circle_points(radius: f64, n: usize) -> Vec<C> {
    (0..n).map(|j| C::from_polar(radius, 2.0 * PI * j as f64 / n as f64)).collect()
}

/// Detection response T (outcome l | photon number m) including losses and chopping.
fn response_matrix(eta: f64, chopping: Option<usize>, m_cut: usize) -> Result<DMatrix<f64>> {
    let b = bernoulli_matrix(eta, m_cut + 1, m_cut + 1);
    match chopping {
        None => Ok(b),
        Some(n) => {
            let t = chopping_matrix(n, m_cut)?;
            let full = t * b;
            Ok(full.rows(0, (n + 1).min(m_cut + 1)).into_owned())
        }
    }
}

/// Per Fourier order s over the circle phases, fit rho_{n+s,n} to the
/// displaced count statistics.
pub fn circle_inversion_displaced(data: &DisplacedFrequencies, n_max: usize, reg: &Regularization) -> Result<ReconstructionReport> {
    let m_pts = data.alphas.len();
    if m_pts == 0 {
        return Err(Error::InvalidParameter("no displacement points".into()));
    }
    let radius = data.alphas[0].norm();
    if data.alphas.iter().any(|a| (a.norm() - radius).abs() > 1e-9 * radius.max(1.0)) {
        return Err(Error::InvalidParameter("displacements are not on one circle".into()));
    }
    if m_pts < 2 * n_max + 1 {
        return Err(Error::PhaseDeficit { got: m_pts, required: 2 * n_max + 1 });
    }
    let thetas: Vec<f64> = data.alphas.iter().map(|a| a.arg()).collect();
    let mut sorted: Vec<f64> = thetas.iter().map(|t| t.rem_euclid(2.0 * PI)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let step = 2.0 * PI / m_pts as f64;
    if (0..m_pts).any(|j| (sorted[j] - sorted[0] - j as f64 * step).abs() > PHASE_TOL) {
        return Err(Error::InsufficientPhaseCoverage("circle phases are not equidistant".into()));
    }
    let m_cut = n_max + (radius * radius + 10.0 * radius + 12.0).ceil() as usize;
    let t = response_matrix(data.eta, data.chopping, m_cut)?;
    let rows = t.nrows().max(data.freqs.iter().map(|f| f.len()).max().unwrap_or(0));
    // data rows beyond the model response are kept (their model rows are zero)
    let mut t_full = DMatrix::<f64>::zeros(rows, m_cut + 1);
    t_full.rows_mut(0, t.nrows()).copy_from(&t);
    let dmat: Vec<Vec<f64>> = (0..=n_max).map(|n| (0..=m_cut).map(|m| displacement_element(n, m, C::new(radius, 0.0)).re).collect()).collect();
    let freq = |j: usize, l: usize| data.freqs[j].get(l).copied().unwrap_or(0.0);
    // variance of each frequency: multinomial with a +1 pseudo-count floor
    let var_row: Option<Vec<f64>> = data.shots.map(|shots| {
        let n = shots as f64;
        (0..rows)
            .map(|l| {
                let v: f64 = (0..m_pts)
                    .map(|j| {
                        let pt = (freq(j, l) * n + 1.0) / (n + rows as f64);
                        pt * (1.0 - pt) / n
                    })
                    .sum();
                v / (m_pts * m_pts) as f64
            })
            .collect()
    });
    let mut rho = DMatrix::<C>::zeros(n_max + 1, n_max + 1);
    let mut err = DMatrix::<f64>::zeros(n_max + 1, n_max + 1);
    let mut diag = Diagnostics { hermitized: true, ..Default::default() };
    for s in 0..=n_max {
        let cols = n_max + 1 - s;
        let mut g = DMatrix::<f64>::zeros(m_cut + 1, cols);
        for m in 0..=m_cut {
            for n in 0..cols {
                g[(m, n)] = dmat[n + s][m] * dmat[n][m];
            }
        }
        let a = &t_full * g;
        let y = DVector::<C>::from_fn(rows, |l, _| {
            (0..m_pts).map(|j| C::from_polar(freq(j, l), s as f64 * thetas[j])).sum::<C>() / m_pts as f64
        });
        let mut model = LinearModel::real(a);
        if let Some(v) = &var_row {
            model = model.with_weights(Weights::Diagonal(DVector::from_iterator(rows, v.iter().map(|x| 1.0 / x))));
        }
        let cond = inference::condition_number(&model)?;
        diag.condition_numbers.push(cond);
        let (est, fit) = match inference::solve(&model, &y, reg) {
            Err(Error::NearSingular(c)) => return Err(Error::IllConditioned { s, cond: c }),
            other => other?,
        };
        let errs = fit.map(|f| f.std_errors());
        for n in 0..cols {
            rho[(n + s, n)] = est[n];
            rho[(n, n + s)] = est[n].conj();
            if let Some(e) = &errs {
                if data.shots.is_some() {
                    err[(n + s, n)] = e[n];
                    err[(n, n + s)] = e[n];
                }
            }
        }
        if s == 0 {
            for n in 0..cols {
                rho[(n, n)] = C::new(est[n].re, 0.0);
            }
        }
    }
    let method = MethodInfo::new(
        "circle",
        json!({"n_max": n_max, "radius": radius, "phases": m_pts, "eta": data.eta,
               "chopping": data.chopping, "regularization": reg.tag(), "model_cutoff": m_cut}),
    );
    let out = DensityMatrix::from_matrix_unchecked(rho, "circle inversion estimate");
    let errors = if data.shots.is_some() && matches!(reg, Regularization::None) { Some(err) } else { None };
    Ok(ReconstructionReport::density_report(out, errors, method, diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseEstimate {
    pub alphas: Vec<C>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub s: f64,
    /// Series weight applied to the count frequencies.
    pub weight: f64,
}

impl PointwiseEstimate {
    /// Arrange on a rectangular (Re alpha, Im alpha) lattice if the points form one.
    pub fn to_grid(&self) -> Option<PhaseSpaceGrid> {
        let mut xs: Vec<f64> = self.alphas.iter().map(|a| a.re).collect();
        let mut ys: Vec<f64> = self.alphas.iter().map(|a| a.im).collect();
        let dedup = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        };
        dedup(&mut xs);
        dedup(&mut ys);
        if xs.len() * ys.len() != self.alphas.len() || xs.len() < 2 || ys.len() < 2 {
            return None;
        }
        let mut g = PhaseSpaceGrid::new(xs.clone(), ys.clone(), self.s, PhaseSpaceConvention::Alpha);
        for (a, v) in self.alphas.iter().zip(&self.values) {
            let i = xs.iter().position(|x| (x - a.re).abs() < 1e-12)?;
            let j = ys.iter().position(|y| (y - a.im).abs() < 1e-12)?;
            g.values[i][j] = *v;
        }
        Some(g)
    }
}

/// P(alpha; s) = 2/(pi(1-s)) sum_m w^m q_m(alpha) with the loss-adjusted
/// weight w = [eta(s-1) + 2] / [eta(s-1)].
pub fn pointwise_phase_space(data: &DisplacedFrequencies, s: f64) -> Result<Warned<PointwiseEstimate>> {
    if !(s < 1.0) {
        return Err(Error::InvalidParameter(format!("s = {s} must be < 1")));
    }
    crate::detection::check_eta(data.eta)?;
    let eta = data.eta;
    let w = (eta * (s - 1.0) + 2.0) / (eta * (s - 1.0));
    let pre = 2.0 / (PI * (1.0 - s));
    let mut warnings = Vec::new();
    if w.abs() >= 1.0 {
        warnings.push(format!("SeriesRisk: |weight| = {:.4} >= 1; the series relies on the finite count support", w.abs()));
    }
    let mut values = Vec::with_capacity(data.alphas.len());
    let mut errors = Vec::with_capacity(data.alphas.len());
    for f in &data.freqs {
        let q = match data.chopping {
            None => f.clone(),
            Some(n) => {
                warnings.push("chopped counts inverted assuming photon numbers <= N".into());
                invert_chopping(f, n)?
            }
        };
        let mut first = 0.0;
        let mut second = 0.0;
        let mut wm = 1.0;
        for &p in &q {
            first += wm * p;
            second += wm * wm * p;
            wm *= w;
        }
        values.push(pre * first);
        let e = match data.shots {
            Some(n) => pre * ((second - first * first).max(0.0) / n as f64).sqrt(),
            None => 0.0,
        };
        errors.push(e);
    }
    warnings.dedup();
    Ok(Warned { value: PointwiseEstimate { alphas: data.alphas.clone(), values, errors, s, weight: w }, warnings })
}

// ---------------------------------------------------------------- moments

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledValue {
    pub value: C,
    pub std_error: f64,
}

/// <a^dag^n a^m> from Hermite averages at n + m + 1 equidistant phases,
/// rescaled for detector losses.
pub fn moments_sampling(data: QuadratureData, n: usize, m: usize) -> Result<SampledValue> {
    let k_tot = n + m;
    let phases = data.phases();
    let distinct = distinct_phase_count(&phases);
    if distinct < k_tot + 1 {
        return Err(Error::PhaseDeficit { got: distinct, required: k_tot + 1 });
    }
    require_equidistant(&phases)?;
    let eta = data.eta();
    crate::detection::check_eta(eta)?;
    let se = eta.sqrt();
    let slices = data.slices()?;
    let moments = phase_moments(&slices, 1, |x, out| out[0] = hermite_polynomials(k_tot, se * x)[k_tot]);
    let n_ph = moments.len() as f64;
    let factor = 1.0 / (binomial(k_tot, n) * 2f64.powf(0.5 * k_tot as f64) * eta.powf(0.5 * k_tot as f64) * n_ph);
    let mut acc = C::new(0.0, 0.0);
    let mut var = 0.0;
    for pm in &moments {
        acc += C::from_polar(pm.mean[0], -(n as f64 - m as f64) * pm.phi);
        var += within_phase_variance(pm, 0);
    }
    Ok(SampledValue { value: acc * factor, std_error: factor * var.sqrt() })
}

/// Phase-moment kernel K_k tabulated on a grid; the classical form is used
/// outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseKernelTable {
    pub k: usize,
    pub n_sum: usize,
    pub grid: Grid1D,
    pub values: Vec<f64>,
    pub tail: f64,
}

impl PhaseKernelTable {
    pub fn new(k: usize, grid: &Grid1D, n_sum: usize, tolerance: f64) -> Result<Self> {
        if k == 0 {
            return Ok(PhaseKernelTable { k, n_sum, grid: *grid, values: vec![0.5 / PI; grid.n_points], tail: 0.0 });
        }
        let (kernel, values) = phase_moment_kernel(k, grid, n_sum, tolerance)?;
        Ok(PhaseKernelTable { k, n_sum, grid: *grid, values, tail: kernel.tail })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        if self.k == 0 {
            return 0.5 / PI;
        }
        if x < g.x_min || x > g.x_max {
            return 0.5 * classical_phase_kernel(self.k, x);
        }
        let t = (x - g.x_min) / g.spacing();
        let i = (t.floor() as usize).min(g.n_points - 2);
        let f = t - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Photon number whose turning point reaches the largest populated |x|.
fn support_estimate(slices: &[Slice]) -> usize {
    let mut x_max: f64 = 0.0;
    for s in slices {
        let w_max = s.weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
        for (x, w) in s.xs.iter().zip(&s.weights) {
            if w.abs() > 1e-12 * w_max {
                x_max = x_max.max(x.abs());
            }
        }
    }
    ((x_max * x_max - 1.0) / 2.0).max(0.0).ceil() as usize
}

/// Psi_k = (2 pi / N) sum_j e^{ik phi_j} mean_j K_k(x).
pub fn phase_moments_sampling(data: QuadratureData, kernel: &PhaseKernelTable) -> Result<Warned<SampledValue>> {
    let mut warnings = Vec::new();
    if kernel.k == 0 {
        return Ok(Warned::clean(SampledValue { value: C::new(1.0, 0.0), std_error: 0.0 }));
    }
    let slices = data.slices()?;
    require_equidistant(&data.phases())?;
    let support = support_estimate(&slices);
    if kernel.n_sum < support {
        return Err(Error::KernelTruncationTooLow { n_sum: kernel.n_sum, support });
    }
    if data.eta() < 1.0 {
        warnings.push(format!("phase-moment kernel is not loss compensated (eta = {})", data.eta()));
    }
    let moments = phase_moments(&slices, 1, |x, out| out[0] = kernel.eval(x));
    let n_ph = moments.len() as f64;
    let mut acc = C::new(0.0, 0.0);
    let mut var = 0.0;
    for pm in &moments {
        acc += C::from_polar(pm.mean[0], kernel.k as f64 * pm.phi);
        var += within_phase_variance(pm, 0);
    }
    let f = 2.0 * PI / n_ph;
    Ok(Warned { value: SampledValue { value: acc * f, std_error: f * var.sqrt() }, warnings })
}

// ---------------------------------------------------------------- endoscopy

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndoscopyMode {
    Projection,
    LinearSystem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndoscopyResult {
    /// rho_nn for an inversion signal, a_n for a difference signal.
    pub coefficients: Vec<f64>,
    pub mode: EndoscopyMode,
    pub window: f64,
    pub smallest_gap: f64,
}

/// Collapse time of the one-photon resonant probe with coupling Omega_L.
pub fn jc_collapse_time(omega_l: f64) -> f64 {
    2.0 * SQRT_2 / omega_l
}

/// Invert S(t) = sum_n c_n cos(Omega_n t) (inversion) or
/// S(t) = 2 sum_n a_n sin(Omega_n t) (difference signal) over [0, window].
pub fn endoscopy_invert(signal: &ProbeSignal, freqs: &[f64], window: f64) -> Result<Warned<EndoscopyResult>> {
    let cosine = match signal.channel {
        ProbeChannel::Inversion => true,
        ProbeChannel::PmDifference { .. } => false,
        _ => return Err(Error::InvalidParameter("endoscopy needs an inversion or difference signal".into())),
    };
    if freqs.is_empty() {
        return Err(Error::InvalidParameter("no frequencies".into()));
    }
    let scale = freqs.iter().fold(0.0f64, |a, f| a.max(f.abs())).max(1e-300);
    let mut degenerate = Vec::new();
    for i in 0..freqs.len() {
        if !cosine && freqs[i].abs() < 1e-9 * scale {
            degenerate.push(i);
        }
        for j in i + 1..freqs.len() {
            if (freqs[i].abs() - freqs[j].abs()).abs() < 1e-9 * scale {
                degenerate.push(i);
                degenerate.push(j);
            }
        }
    }
    if !degenerate.is_empty() {
        degenerate.sort();
        degenerate.dedup();
        return Err(Error::DegenerateFrequencies(degenerate));
    }
    let mut abs: Vec<f64> = freqs.iter().map(|f| f.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let gap = abs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let idx: Vec<usize> = (0..signal.times.len()).filter(|&i| signal.times[i] <= window + 1e-12).collect();
    if idx.len() < freqs.len() + 2 {
        return Err(Error::InvalidParameter("too few time samples inside the window".into()));
    }
    let ts: Vec<f64> = idx.iter().map(|&i| signal.times[i]).collect();
    let ss: Vec<f64> = idx.iter().map(|&i| signal.values[i]).collect();
    let basis = |n: usize, t: f64| if cosine { (freqs[n] * t).cos() } else { 2.0 * (freqs[n] * t).sin() };
    let mut warnings = Vec::new();
    let long_enough = gap.is_infinite() || window >= 3.0 * 2.0 * PI / gap;
    let coefficients = if long_enough {
        let h = ts[1] - ts[0];
        let uniform = ts.windows(2).all(|w| ((w[1] - w[0]) - h).abs() < 1e-9 * h.max(1e-300));
        let wq = if uniform { simpson_weights(ts.len(), h) } else { axis_weights(&ts) };
        let window_fn: Vec<f64> = ts.iter().zip(&wq).map(|(&t, &q)| q * (0.5 * PI * t / window).cos().powi(2)).collect();
        (0..freqs.len())
            .map(|n| {
                let num: f64 = ts.iter().zip(&ss).zip(&window_fn).map(|((&t, &s), &w)| w * s * basis(n, t)).sum();
                let den: f64 = ts.iter().zip(&window_fn).map(|(&t, &w)| w * basis(n, t).powi(2)).sum();
                num / den
            })
            .collect()
    } else {
        warnings.push(format!(
            "WindowTooShort: window {window:.4} covers less than 3 periods of the smallest gap {gap:.4}; solving the time-sampled system"
        ));
        let a = DMatrix::<f64>::from_fn(ts.len(), freqs.len(), |i, n| basis(n, ts[i]));
        let y = DVector::<C>::from_iterator(ts.len(), ss.iter().map(|&v| C::new(v, 0.0)));
        let model = LinearModel::real(a);
        match inference::least_squares(&model, &y) {
            Ok(fit) => fit.estimate.iter().map(|v| v.re).collect(),
            Err(Error::NearSingular(c)) => {
                warnings.push(format!("time-sampled system near singular (condition {c:.3e}); truncated SVD used"));
                let sigma_max = model.a.singular_values().max();
                inference::svd_pseudoinverse(&model, &y, 1e-7 * sigma_max)?.iter().map(|v| v.re).collect()
            }
            Err(e) => return Err(e),
        }
    };
    let mode = if long_enough { EndoscopyMode::Projection } else { EndoscopyMode::LinearSystem };
    Ok(Warned { value: EndoscopyResult { coefficients, mode, window, smallest_gap: gap }, warnings })
}

/// rho_{n,n+k} from difference-signal coefficients a_n = Im(e^{i psi} rho_{n,n+k})
/// measured at two preparation phases.
pub fn assemble_off_diagonal(a1: &[f64], psi1: f64, a2: &[f64], psi2: f64) -> Result<Vec<C>> {
    if a1.len() != a2.len() {
        return Err(Error::DimensionMismatch(a1.len(), a2.len()));
    }
    // Im(e^{i psi}(u + i v)) = u sin psi + v cos psi
    let det = psi1.sin() * psi2.cos() - psi1.cos() * psi2.sin();
    if det.abs() < 1e-9 {
        return Err(Error::InvalidParameter("preparation phases differ by a multiple of pi".into()));
    }
    Ok(a1
        .iter()
        .zip(a2)
        .map(|(&b1, &b2)| {
            let u = (b1 * psi2.cos() - b2 * psi1.cos()) / det;
            let v = (psi1.sin() * b2 - psi2.sin() * b1) / det;
            C::new(u, v)
        })
        .collect())
}

// ---------------------------------------------------------------- discretization error

/// Systematic error of the N-phase pattern-function sum for a known state:
/// Delta rho_mn = sum over k - l = m - n + 2jN (j != 0) of G^{mn}_{kl} rho_kl,
/// G^{mn}_{kl} = pi int f_mn g_kl dx.
pub fn discretization_error_bound(rho_true: &DensityMatrix, n_phases: usize, n_max: usize) -> Result<DMatrix<C>> {
    if n_phases == 0 {
        return Err(Error::InvalidParameter("need at least one phase".into()));
    }
    let dim = rho_true.dim();
    let half = (2.0 * dim.max(n_max + 1) as f64 + 1.0).sqrt() + 7.0;
    let n_pts = (2.0 * half / 0.005).ceil() as usize + 1;
    let grid = Grid1D::new(-half, half, n_pts)?;
    let table = crate::patterns::pattern_function_table(n_max, &grid)?;
    let xs = grid.points();
    let w = grid.trapezoid_weights();
    let psi: Vec<Vec<f64>> = xs.iter().map(|&x| hermite_functions(dim - 1, x)).collect();
    let period = 2 * n_phases as i64;
    let d = n_max + 1;
    let mut out = DMatrix::<C>::zeros(d, d);
    for m in 0..d {
        for n in 0..d {
            let f = table.get(m, n);
            let target = m as i64 - n as i64;
            let mut acc = C::new(0.0, 0.0);
            for k in 0..dim {
                for l in 0..dim {
                    let diff = k as i64 - l as i64 - target;
                    if diff == 0 || diff % period != 0 {
                        continue;
                    }
                    let r = rho_true.get(k, l);
                    if r.norm() == 0.0 {
                        continue;
                    }
                    let g: f64 = (0..xs.len()).map(|i| w[i] * f[i] * psi[i][k] * psi[i][l]).sum();
                    acc += r * (PI * g);
                }
            }
            out[(m, n)] = acc;
        }
    }
    Ok(out)
}
