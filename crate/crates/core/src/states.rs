//! Truncated Fock-space states and their exact representations.
//!
//! Conventions: hbar = 1, x(phi) = (a e^{-i phi} + a^dag e^{i phi}) / sqrt 2,
//! so [x(phi), x(phi + pi/2)] = i and the vacuum has quadrature variance 1/2.

use crate::error::{Error, Result};
use crate::special::{self, displacement_matrix, hermite_functions, ln_factorial};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const TAIL_LIMIT: f64 = 1e-8;

type C = Complex64;

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    elements: DMatrix<C>,
    pub label: String,
    /// Probability discarded by truncation before renormalization.
    pub tail_weight: f64,
}

impl DensityMatrix {
    /// Checked constructor: Hermitian, unit trace, positive within tolerance.
    pub fn from_matrix(elements: DMatrix<C>, label: impl Into<String>) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(elements, label);
        rho.validate()?;
        Ok(rho)
    }

    /// Used by linear estimators whose output may be indefinite.
    pub fn from_matrix_unchecked(elements: DMatrix<C>, label: impl Into<String>) -> Self {
        assert!(elements.is_square(), "density matrix must be square");
        DensityMatrix { elements, label: label.into(), tail_weight: 0.0 }
    }

    pub fn pure(amplitudes: &[C], label: impl Into<String>) -> Self {
        let v = DVector::from_column_slice(amplitudes);
        let m = &v * v.adjoint();
        Self::from_matrix_unchecked(m, label)
    }

    pub fn from_diagonal(p: &[f64], label: impl Into<String>) -> Self {
        let n = p.len();
        let m = DMatrix::from_fn(n, n, |i, j| if i == j { c(p[i], 0.0) } else { c(0.0, 0.0) });
        Self::from_matrix_unchecked(m, label)
    }

    pub fn dim(&self) -> usize {
        self.elements.nrows()
    }

    pub fn n_max(&self) -> usize {
        self.dim() - 1
    }

    pub fn get(&self, m: usize, n: usize) -> C {
        if m < self.dim() && n < self.dim() {
            self.elements[(m, n)]
        } else {
            c(0.0, 0.0)
        }
    }

    pub fn matrix(&self) -> &DMatrix<C> {
        &self.elements
    }

    pub fn into_matrix(self) -> DMatrix<C> {
        self.elements
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.elements[(i, i)].re).collect()
    }

    pub fn trace(&self) -> C {
        self.elements.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut e: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                e = e.max((self.elements[(i, j)] - self.elements[(j, i)].conj()).norm());
            }
        }
        e
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = hermitian_part(&self.elements);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > 1e-12 {
            return Err(Error::InvalidSpec(format!("not Hermitian (error {herm:e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > 1e-12 || tr.im.abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("trace {tr} differs from 1")));
        }
        let lmin = self.min_eigenvalue();
        if lmin < -1e-10 {
            return Err(Error::InvalidSpec(format!("negative eigenvalue {lmin:e}")));
        }
        Ok(())
    }

    pub fn hermitized(&self) -> Self {
        let mut out = self.clone();
        out.elements = hermitian_part(&self.elements);
        out
    }

    /// Pad with zeros or cut to the given dimension (no renormalization).
    pub fn resized(&self, dim: usize) -> Self {
        let m = DMatrix::from_fn(dim, dim, |i, j| self.get(i, j));
        let mut out = Self::from_matrix_unchecked(m, self.label.clone());
        out.tail_weight = self.tail_weight;
        out
    }

    pub fn expectation(&self, op: &DMatrix<C>) -> C {
        (&self.elements * op).trace()
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.diagonal().iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn purity(&self) -> f64 {
        (&self.elements * &self.elements).trace().re
    }

    /// von Neumann entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.eigenvalues().iter().filter(|&&l| l > 1e-300).map(|&l| -l * l.ln()).sum()
    }

    /// Closest density matrix in Frobenius norm: eigenvalues projected on the simplex.
    pub fn project_to_physical(&self) -> Self {
        let h = hermitian_part(&self.elements);
        let eig = h.symmetric_eigen();
        let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let proj = simplex_projection(&lam);
        let d = DMatrix::from_fn(lam.len(), lam.len(), |i, j| if i == j { c(proj[i], 0.0) } else { c(0.0, 0.0) });
        let m = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
        let mut out = Self::from_matrix_unchecked(hermitian_part(&m), format!("{} (projected)", self.label));
        out.tail_weight = self.tail_weight;
        out
    }
}

pub(crate) fn hermitian_part(m: &DMatrix<C>) -> DMatrix<C> {
    (m + m.adjoint()) * c(0.5, 0.0)
}

fn simplex_projection(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum StateKind {
    Fock { n: usize },
    Coherent { re: f64, im: f64 },
    /// S(xi)|0> with xi = r e^{i theta}.
    SqueezedVacuum {
        r: f64,
        #[serde(default)]
        theta: f64,
    },
    Thermal { nbar: f64 },
    /// Normalized |alpha> + parity |-alpha>, parity = +1 or -1.
    Cat { re: f64, im: f64, parity: i32 },
    /// Fock amplitudes as [re, im] pairs.
    Superposition { coefficients: Vec<[f64; 2]> },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub state: StateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSpec {
    #[serde(flatten)]
    pub kind: StateKind,
    pub n_max: usize,
}

// Flattened buffering loses arbitrary-precision numbers, so go through a Value
// and put "kind" ahead of "params" at every level.
impl<'de> Deserialize<'de> for StateSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut v = serde_json::Value::deserialize(d)?;
        let obj = v.as_object_mut().ok_or_else(|| D::Error::custom("state spec must be an object"))?;
        let n_max = obj
            .remove("n_max")
            .and_then(|n| n.as_u64())
            .ok_or_else(|| D::Error::custom("missing or invalid n_max"))? as usize;
        let kind = serde_json::from_value(canonical_order(v)).map_err(D::Error::custom)?;
        Ok(StateSpec { kind, n_max })
    }
}

fn canonical_order(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(mut m) => {
            let mut out = serde_json::Map::new();
            for key in ["kind", "params"] {
                if let Some(x) = m.remove(key) {
                    out.insert(key.to_string(), canonical_order(x));
                }
            }
            for (k, x) in m {
                out.insert(k, canonical_order(x));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical_order).collect()),
        x => x,
    }
}

impl StateSpec {
    pub fn new(kind: StateKind, n_max: usize) -> Self {
        StateSpec { kind, n_max }
    }

    pub fn build(&self) -> Result<DensityMatrix> {
        build_state(&self.kind, self.n_max)
    }
}

pub fn build_state(kind: &StateKind, n_max: usize) -> Result<DensityMatrix> {
    build_state_with_tolerance(kind, n_max, TAIL_LIMIT)
}

/// As `build_state` with an explicit truncation tolerance.
pub fn build_state_with_tolerance(kind: &StateKind, n_max: usize, tol: f64) -> Result<DensityMatrix> {
    let (m, tail, label) = build_raw(kind, n_max)?;
    if tail > tol {
        return Err(Error::TailTooHeavy(tail));
    }
    let tr = m.trace().re;
    let mut rho = DensityMatrix::from_matrix_unchecked(hermitian_part(&(m / c(tr, 0.0))), label);
    rho.tail_weight = tail;
    rho.validate()?;
    Ok(rho)
}

/// Unnormalized truncated matrix, discarded weight, label.
fn build_raw(kind: &StateKind, n_max: usize) -> Result<(DMatrix<C>, f64, String)> {
    let dim = n_max + 1;
    match kind {
        StateKind::Fock { n } => {
            if *n > n_max {
                return Ok((DMatrix::zeros(dim, dim), 1.0, format!("fock({n})")));
            }
            let mut m = DMatrix::zeros(dim, dim);
            m[(*n, *n)] = c(1.0, 0.0);
            Ok((m, 0.0, format!("fock({n})")))
        }
        StateKind::Coherent { re, im } => {
            let alpha = c(*re, *im);
            let (amps, tail) = truncated_amplitudes(n_max, |n| coherent_amplitude(alpha, n))?;
            Ok((outer(&amps), tail, format!("coherent({re},{im})")))
        }
        StateKind::SqueezedVacuum { r, theta } => {
            if !r.is_finite() || *r < 0.0 {
                return Err(Error::InvalidSpec("squeeze magnitude must be finite and >= 0".into()));
            }
            let (amps, tail) = truncated_amplitudes(n_max, |n| squeezed_vacuum_amplitude(*r, *theta, n))?;
            Ok((outer(&amps), tail, format!("squeezed_vacuum({r},{theta})")))
        }
        StateKind::Thermal { nbar } => {
            if !nbar.is_finite() || *nbar < 0.0 {
                return Err(Error::InvalidSpec("thermal mean must be finite and >= 0".into()));
            }
            let q = nbar / (1.0 + nbar);
            let mut m = DMatrix::zeros(dim, dim);
            for n in 0..dim {
                m[(n, n)] = c(q.powi(n as i32) / (1.0 + nbar), 0.0);
            }
            Ok((m, q.powi(dim as i32), format!("thermal({nbar})")))
        }
        StateKind::Cat { re, im, parity } => {
            if parity.abs() != 1 {
                return Err(Error::InvalidSpec("cat parity must be +1 or -1".into()));
            }
            let alpha = c(*re, *im);
            if alpha.norm() == 0.0 && *parity == -1 {
                return Err(Error::InvalidSpec("odd cat with zero amplitude".into()));
            }
            let s = *parity as f64;
            let amp = |n: usize| coherent_amplitude(alpha, n) * (1.0 + s * if n % 2 == 0 { 1.0 } else { -1.0 });
            let (amps, tail) = truncated_amplitudes(n_max, amp)?;
            Ok((outer(&amps), tail, format!("cat({re},{im},{parity})")))
        }
        StateKind::Superposition { coefficients } => {
            let norm: f64 = coefficients.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("superposition norm {norm} differs from 1")));
            }
            let amps: Vec<C> = (0..dim).map(|n| coefficients.get(n).map(|p| c(p[0], p[1])).unwrap_or(c(0.0, 0.0))).collect();
            let tail: f64 = coefficients.iter().skip(dim).map(|p| p[0] * p[0] + p[1] * p[1]).sum();
            Ok((outer(&amps), tail, "superposition".to_string()))
        }
        StateKind::Mixture { components } => {
            if components.is_empty() {
                return Err(Error::InvalidSpec("empty mixture".into()));
            }
            let wsum: f64 = components.iter().map(|cmp| cmp.weight).sum();
            if components.iter().any(|cmp| cmp.weight < 0.0) || (wsum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec("mixture weights must be nonnegative and sum to 1".into()));
            }
            let mut m = DMatrix::zeros(dim, dim);
            let mut tail = 0.0;
            for cmp in components {
                let (mi, ti, _) = build_raw(&cmp.state, n_max)?;
                // each component normalized on its own before averaging
                let tr = mi.trace().re;
                if tr > 0.0 {
                    m += mi * c(cmp.weight * (1.0 - ti) / tr, 0.0);
                }
                tail += cmp.weight * ti;
            }
            Ok((m, tail, "mixture".to_string()))
        }
    }
}

fn outer(a: &[C]) -> DMatrix<C> {
    let v = DVector::from_column_slice(a);
    &v * v.adjoint()
}

/// Head amplitudes up to n_max and the (relative) weight beyond it.
fn truncated_amplitudes(n_max: usize, amp: impl Fn(usize) -> C) -> Result<(Vec<C>, f64)> {
    let head: Vec<C> = (0..=n_max).map(&amp).collect();
    let head_w: f64 = head.iter().map(|a| a.norm_sqr()).sum();
    let mut tail = 0.0;
    let mut n = n_max + 1;
    let mut last = f64::INFINITY;
    loop {
        let w = amp(n).norm_sqr();
        tail += w;
        // stop once terms are negligible and decreasing
        if n > n_max + 4 && w < 1e-22 * (head_w + tail) && w <= last {
            break;
        }
        if n > n_max + 20000 {
            break;
        }
        last = w;
        n += 1;
    }
    let total = head_w + tail;
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::InvalidSpec("state has zero norm".into()));
    }
    Ok((head, tail / total))
}

pub fn coherent_amplitude(alpha: C, n: usize) -> C {
    let r = alpha.norm();
    if r == 0.0 {
        return if n == 0 { c(1.0, 0.0) } else { c(0.0, 0.0) };
    }
    let lm = -0.5 * r * r + n as f64 * r.ln() - 0.5 * ln_factorial(n);
    C::from_polar(lm.exp(), n as f64 * alpha.arg())
}

pub fn squeezed_vacuum_amplitude(r: f64, theta: f64, n: usize) -> C {
    if n % 2 == 1 {
        return c(0.0, 0.0);
    }
    if r == 0.0 {
        return if n == 0 { c(1.0, 0.0) } else { c(0.0, 0.0) };
    }
    let m = n / 2;
    let t = r.tanh();
    let lm = -0.5 * r.cosh().ln() + m as f64 * t.ln() + 0.5 * ln_factorial(n) - m as f64 * 2f64.ln() - ln_factorial(m);
    // (-e^{i theta} tanh r)^m
    C::from_polar(lm.exp(), m as f64 * (theta + PI))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl Default for Grid1D {
    fn default() -> Self {
        Grid1D { x_min: -8.0, x_max: 8.0, n_points: 1024 }
    }
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 2 || !(x_max > x_min) {
            return Err(Error::InvalidParameter("grid needs n_points >= 2 and x_max > x_min".into()));
        }
        Ok(Grid1D { x_min, x_max, n_points })
    }

    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.point(i)).collect()
    }

    pub fn trapezoid_weights(&self) -> Vec<f64> {
        special::trapezoid_weights(self.n_points, self.spacing())
    }

    pub fn half_width(&self) -> f64 {
        self.x_min.abs().min(self.x_max.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Exact,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureDistribution {
    pub phases: Vec<f64>,
    pub grid: Grid1D,
    /// values[k][i] = p(x_i, phi_k)
    pub values: Vec<Vec<f64>>,
    pub eta: f64,
    pub kind: DistributionKind,
}

impl QuadratureDistribution {
    pub fn norms(&self) -> Vec<f64> {
        let w = self.grid.trapezoid_weights();
        self.values.iter().map(|v| v.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
    }

    /// Linear combination of two distributions on the same grid and phases.
    pub fn mix(&self, other: &Self, lambda: f64) -> Self {
        let mut out = self.clone();
        for (row, orow) in out.values.iter_mut().zip(&other.values) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a = lambda * *a + (1.0 - lambda) * b;
            }
        }
        out
    }
}

/// Equidistant phases pi k / n on [0, pi).
pub fn equidistant_phases(n: usize) -> Vec<f64> {
    (0..n).map(|k| PI * k as f64 / n as f64).collect()
}

/// Vector <x, phi | n> = psi_n(x) e^{-i n phi}.
fn quadrature_bra(psi: &[f64], phi: f64) -> Vec<C> {
    psi.iter().enumerate().map(|(n, &p)| C::from_polar(p, -(n as f64) * phi)).collect()
}

pub fn quadrature_density(rho: &DensityMatrix, x: f64, phi: f64) -> f64 {
    let psi = hermite_functions(rho.n_max(), x);
    quadratic_form(rho.matrix(), &quadrature_bra(&psi, phi))
}

/// sum_mn b_m rho_mn conj(b_n), real part.
fn quadratic_form(rho: &DMatrix<C>, b: &[C]) -> f64 {
    let d = b.len();
    let mut acc = 0.0;
    for m in 0..d {
        let mut row = c(0.0, 0.0);
        for n in 0..d {
            row += rho[(m, n)] * b[n].conj();
        }
        acc += (b[m] * row).re;
    }
    acc
}

pub fn quadrature_distribution(rho: &DensityMatrix, phases: &[f64], grid: &Grid1D) -> QuadratureDistribution {
    let xs = grid.points();
    let mut values = vec![vec![0.0; xs.len()]; phases.len()];
    for (i, &x) in xs.iter().enumerate() {
        let psi = hermite_functions(rho.n_max(), x);
        for (k, &phi) in phases.iter().enumerate() {
            values[k][i] = quadratic_form(rho.matrix(), &quadrature_bra(&psi, phi));
        }
    }
    QuadratureDistribution { phases: phases.to_vec(), grid: *grid, values, eta: 1.0, kind: DistributionKind::Exact }
}

/// Psi(z, phi) = Tr[rho exp(i z x(phi))] = Tr[rho D(i z e^{i phi} / sqrt 2)].
pub fn characteristic_function(rho: &DensityMatrix, z: f64, phi: f64) -> C {
    let beta = C::from_polar(z / std::f64::consts::SQRT_2, phi + PI / 2.0);
    let d = rho.dim();
    let dm = displacement_matrix(beta, d, d);
    (rho.matrix() * dm).trace()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSpaceConvention {
    /// P(alpha; s) over (Re alpha, Im alpha).
    Alpha,
    /// P(q, p; s) = P(alpha = (q + i p)/sqrt 2; s) / 2 over (q, p).
    QP,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceGrid {
    /// First axis: Re alpha or q.
    pub xs: Vec<f64>,
    /// Second axis: Im alpha or p.
    pub ys: Vec<f64>,
    /// values[i][j] at (xs[i], ys[j]).
    pub values: Vec<Vec<f64>>,
    pub s: f64,
    pub convention: PhaseSpaceConvention,
}

impl PhaseSpaceGrid {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, s: f64, convention: PhaseSpaceConvention) -> Self {
        let values = vec![vec![0.0; ys.len()]; xs.len()];
        PhaseSpaceGrid { xs, ys, values, s, convention }
    }

    pub fn square(half_width: f64, n: usize, s: f64, convention: PhaseSpaceConvention) -> Self {
        let axis: Vec<f64> = (0..n).map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64).collect();
        Self::new(axis.clone(), axis, s, convention)
    }

    /// The complex amplitude at node (i, j).
    pub fn alpha_at(&self, i: usize, j: usize) -> C {
        match self.convention {
            PhaseSpaceConvention::Alpha => c(self.xs[i], self.ys[j]),
            PhaseSpaceConvention::QP => c(self.xs[i], self.ys[j]) / std::f64::consts::SQRT_2,
        }
    }

    /// Jacobian factor between value in this convention and P(alpha).
    pub fn convention_factor(&self) -> f64 {
        match self.convention {
            PhaseSpaceConvention::Alpha => 1.0,
            PhaseSpaceConvention::QP => 0.5,
        }
    }

    pub fn integral(&self) -> f64 {
        let wx = axis_weights(&self.xs);
        let wy = axis_weights(&self.ys);
        let mut acc = 0.0;
        for i in 0..self.xs.len() {
            for j in 0..self.ys.len() {
                acc += wx[i] * wy[j] * self.values[i][j];
            }
        }
        acc
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut e: f64 = 0.0;
        for (a, b) in self.values.iter().flatten().zip(other.values.iter().flatten()) {
            e = e.max((a - b).abs());
        }
        e
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Location of the maximum value as (x, y).
    pub fn argmax(&self) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..self.xs.len() {
            for j in 0..self.ys.len() {
                if self.values[i][j] > best.0 {
                    best = (self.values[i][j], i, j);
                }
            }
        }
        (self.xs[best.1], self.ys[best.2])
    }
}

pub(crate) fn axis_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = axis[i + 1] - axis[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// <m | n, alpha> = <m| D(alpha) |n>.
pub fn displaced_fock_overlap(m: usize, n: usize, alpha: C) -> C {
    special::displacement_element(m, n, alpha)
}

/// Photon-number distribution of D^dag(alpha) rho D(alpha): p_m(alpha) = <m,alpha|rho|m,alpha>.
pub fn displaced_number_statistics(rho: &DensityMatrix, alpha: C) -> Result<Vec<f64>> {
    let d = rho.dim();
    let r = alpha.norm();
    let mut extra = (r * r + 10.0 * r + 12.0).ceil() as usize;
    loop {
        let m_len = d + extra;
        let dm = displacement_matrix(alpha, d, m_len);
        let x = rho.matrix() * &dm;
        let p: Vec<f64> = (0..m_len)
            .map(|m| {
                let mut acc = c(0.0, 0.0);
                for k in 0..d {
                    acc += dm[(k, m)].conj() * x[(k, m)];
                }
                acc.re
            })
            .collect();
        let total: f64 = p.iter().sum();
        let tr = rho.trace().re;
        if (tr - total).abs() <= 1e-10 * tr.abs().max(1.0) {
            return Ok(p);
        }
        if m_len > 3000 {
            return Err(Error::TailTooHeavy(tr - total));
        }
        extra *= 2;
    }
}

/// Displaced-state density matrix D^dag(alpha) rho D(alpha) truncated to `dim`.
pub fn displaced_state(rho: &DensityMatrix, alpha: C, dim: usize) -> Result<DensityMatrix> {
    let d = rho.dim();
    let dm = displacement_matrix(alpha, d, dim);
    let m = dm.adjoint() * rho.matrix() * &dm;
    let kept = m.trace().re;
    let tail = rho.trace().re - kept;
    if tail > TAIL_LIMIT {
        return Err(Error::TailTooHeavy(tail));
    }
    let mut out = DensityMatrix::from_matrix_unchecked(hermitian_part(&m), format!("{} displaced", rho.label));
    out.tail_weight = tail;
    Ok(out)
}

/// Series weight (s+1)/(s-1) and prefactor 2/(pi(1-s)).
fn ordering_weights(s: f64) -> (f64, f64) {
    ((s + 1.0) / (s - 1.0), 2.0 / (PI * (1.0 - s)))
}

/// P(alpha; s) from the displaced number statistics.
pub fn phase_space_value(rho: &DensityMatrix, alpha: C, s: f64) -> Result<f64> {
    if s >= 1.0 {
        return Err(Error::SeriesDiverges(s));
    }
    let p = displaced_number_statistics(rho, alpha)?;
    let (w, pre) = ordering_weights(s);
    series_sum(&p, w, pre, s)
}

fn series_sum(p: &[f64], w: f64, pre: f64, s: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut wm = 1.0;
    let mut last = 0.0;
    for &pm in p {
        last = wm * pm;
        acc += last;
        wm *= w;
    }
    if w.abs() > 1.0 && last.abs() > 1e-10 {
        return Err(Error::SeriesDiverges(s));
    }
    Ok(pre * acc)
}

/// Evaluate P(.; s) on every node of `grid` (its own convention), writing a new grid.
pub fn phase_space_function(rho: &DensityMatrix, s: f64, grid: &PhaseSpaceGrid) -> Result<PhaseSpaceGrid> {
    let mut out = grid.clone();
    out.s = s;
    let f = grid.convention_factor();
    for i in 0..grid.xs.len() {
        for j in 0..grid.ys.len() {
            out.values[i][j] = f * phase_space_value(rho, grid.alpha_at(i, j), s)?;
        }
    }
    Ok(out)
}

/// Gaussian smoothing from ordering s_in to s_target < s_in.
pub fn convert_ordering(grid: &PhaseSpaceGrid, s_target: f64) -> Result<PhaseSpaceGrid> {
    let delta = grid.s - s_target;
    if delta < -1e-15 {
        return Err(Error::DeconvolutionRefused { input: grid.s, target: s_target });
    }
    let mut out = grid.clone();
    out.s = s_target;
    if delta.abs() <= 1e-15 {
        return Ok(out);
    }
    // variance per axis coordinate
    let var = match grid.convention {
        PhaseSpaceConvention::Alpha => delta / 4.0,
        PhaseSpaceConvention::QP => delta / 2.0,
    };
    let kx = gaussian_matrix(&grid.xs, var);
    let ky = gaussian_matrix(&grid.ys, var);
    let nx = grid.xs.len();
    let ny = grid.ys.len();
    // first along y, then along x
    let mut tmp = vec![vec![0.0; ny]; nx];
    for i in 0..nx {
        for j in 0..ny {
            let mut acc = 0.0;
            for jj in 0..ny {
                acc += ky[j][jj] * grid.values[i][jj];
            }
            tmp[i][j] = acc;
        }
    }
    for i in 0..nx {
        for j in 0..ny {
            let mut acc = 0.0;
            for ii in 0..nx {
                acc += kx[i][ii] * tmp[ii][j];
            }
            out.values[i][j] = acc;
        }
    }
    Ok(out)
}

/// k[i][i'] = w_{i'} N(x_i - x_{i'}; var).
fn gaussian_matrix(axis: &[f64], var: f64) -> Vec<Vec<f64>> {
    let w = axis_weights(axis);
    let norm = 1.0 / (2.0 * PI * var).sqrt();
    axis.iter()
        .map(|&xi| axis.iter().zip(&w).map(|(&xj, &wj)| wj * norm * (-(xi - xj) * (xi - xj) / (2.0 * var)).exp()).collect())
        .collect()
}

/// Psi_k = sum_n rho_{n+k, n}.
pub fn exponential_phase_moments(rho: &DensityMatrix, k: usize) -> C {
    let d = rho.dim();
    (0..d.saturating_sub(k)).map(|n| rho.get(n + k, n)).sum()
}

/// Positive P function of (alpha, alpha') built from diagonal coherent-state elements.
pub fn positive_p(rho: &DensityMatrix, alpha: C, alpha_prime: C) -> f64 {
    let beta = (alpha + alpha_prime.conj()) * 0.5;
    let d = rho.dim();
    let amps: Vec<C> = (0..d).map(|n| coherent_amplitude(beta, n)).collect();
    // <beta|rho|beta> = sum conj(c_m) rho_mn c_n
    let mut q = c(0.0, 0.0);
    for m in 0..d {
        for n in 0..d {
            q += amps[m].conj() * rho.get(m, n) * amps[n];
        }
    }
    let gap = (alpha - alpha_prime.conj()).norm_sqr();
    (-gap / 4.0).exp() * q.re / (4.0 * PI * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateComparison {
    pub fidelity: f64,
    pub trace_distance: f64,
}

/// Uhlmann fidelity Tr|sqrt(a) sqrt(b)| (not squared) and half the trace norm of a - b.
pub fn compare_states(a: &DensityMatrix, b: &DensityMatrix) -> Result<StateComparison> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let sa = psd_sqrt(&hermitian_part(a.matrix()));
    let m = &sa * hermitian_part(b.matrix()) * &sa;
    let ev = hermitian_part(&m).symmetric_eigenvalues();
    let top = ev.iter().fold(0.0f64, |x, &y| x.max(y));
    let fid: f64 = ev.iter().filter(|&&l| l > 1e-14 * top.max(1e-300)).map(|l| l.sqrt()).sum();
    let diff = hermitian_part(&(a.matrix() - b.matrix()));
    let td: f64 = 0.5 * diff.symmetric_eigenvalues().iter().map(|l| l.abs()).sum::<f64>();
    Ok(StateComparison { fidelity: fid.clamp(0.0, 1.0), trace_distance: td.clamp(0.0, 1.0) })
}

fn psd_sqrt(m: &DMatrix<C>) -> DMatrix<C> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |x, &y| x.max(y));
    let n = eig.eigenvalues.len();
    let d = DMatrix::from_fn(n, n, |i, j| {
        let l = eig.eigenvalues[i];
        if i == j && l > 1e-14 * top.max(1e-300) {
            c(l.sqrt(), 0.0)
        } else {
            c(0.0, 0.0)
        }
    });
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

/// Annihilation operator on a truncated space of dimension `dim`.
pub fn annihilation(dim: usize) -> DMatrix<C> {
    DMatrix::from_fn(dim, dim, |i, j| if j == i + 1 { c((j as f64).sqrt(), 0.0) } else { c(0.0, 0.0) })
}

pub fn number_operator(dim: usize) -> DMatrix<C> {
    DMatrix::from_fn(dim, dim, |i, j| if i == j { c(i as f64, 0.0) } else { c(0.0, 0.0) })
}
