//! Measurement channels: losses, balanced homodyne (strong and finite local
//! oscillator), beam splitters, displaced photon counting with chopping, and
//! atomic probe signals.

use crate::error::{Error, Result};
use crate::special::{binomial, binomial_pmf, displacement_matrix, laguerre, ln_factorial};
use crate::states::{
    characteristic_function, coherent_amplitude, displaced_number_statistics, displaced_state, hermitian_part,
    quadrature_density, DensityMatrix, DistributionKind, Grid1D, QuadratureDistribution,
};
use crate::Warned;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

type C = Complex64;

pub const SCALING_NOTE: &str = "dm_over_eta_sqrt2_alphaL";
pub const CDF_TABLE_POINTS: usize = 4096;

pub fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("efficiency {eta} outside (0, 1]")))
    }
}

/// B[m][n] = C(n, m) eta^m (1 - eta)^(n - m).
pub fn bernoulli_matrix(eta: f64, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |m, n| if m <= n { binomial_pmf(n, m, eta) } else { 0.0 })
}

pub fn bernoulli_transform(p: &[f64], eta: f64) -> Vec<f64> {
    let b = bernoulli_matrix(eta, p.len(), p.len());
    (b * DVector::from_column_slice(p)).iter().copied().collect()
}

/// Triangular inverse: the forward sum with eta replaced by 1/eta.
pub fn inverse_bernoulli(p_eta: &[f64], eta: f64, n_max: usize) -> Warned<Vec<f64>> {
    let len = p_eta.len();
    let inv = 1.0 / eta;
    let mut out = vec![0.0; n_max + 1];
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (m, pm) in p_eta.iter().enumerate().skip(n) {
            acc += binomial(m, n) * inv.powi(n as i32) * (1.0 - inv).powi((m - n) as i32) * pm;
        }
        *o = acc;
    }
    let mut warnings = Vec::new();
    if eta <= 0.5 {
        let cond = bernoulli_condition(eta, len.max(n_max + 1));
        if cond > 1e8 {
            warnings.push(format!("inverse loss at eta = {eta} amplifies errors (condition {cond:.3e})"));
        }
    }
    Warned { value: out, warnings }
}

pub fn bernoulli_condition(eta: f64, dim: usize) -> f64 {
    let sv = bernoulli_matrix(eta, dim, dim).singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

fn loss_coefficients(rho: &DensityMatrix, eta: f64) -> DMatrix<C> {
    let d = rho.dim();
    let one_minus = 1.0 - eta;
    DMatrix::from_fn(d, d, |m, n| {
        let mut acc = C::new(0.0, 0.0);
        let top = d - m.max(n);
        for k in 0..top {
            let w = (0.5 * (binomial(m + k, m).ln() + binomial(n + k, n).ln())).exp()
                * eta.powf(0.5 * (m + n) as f64)
                * one_minus.powi(k as i32);
            acc += rho.get(m + k, n + k) * w;
        }
        acc
    })
}

/// State after a beam splitter of transmittance eta with vacuum in the other port.
pub fn loss_map(rho: &DensityMatrix, eta: f64) -> Result<DensityMatrix> {
    check_eta(eta)?;
    let m = loss_coefficients(rho, eta);
    let mut out = DensityMatrix::from_matrix_unchecked(hermitian_part(&m), format!("{} (eta={eta})", rho.label));
    out.tail_weight = rho.tail_weight;
    Ok(out)
}

pub fn inverse_loss_map(rho_eta: &DensityMatrix, eta: f64) -> Result<Warned<DensityMatrix>> {
    if eta <= 0.0 || eta > 1.0 {
        return Err(Error::InvalidParameter(format!("efficiency {eta} outside (0, 1]")));
    }
    let m = loss_coefficients(rho_eta, 1.0 / eta);
    let mut warnings = Vec::new();
    let d = rho_eta.dim();
    let top = rho_eta.get(d - 1, d - 1).re.abs();
    if eta <= 0.5 && top > 1e-12 {
        let cond = bernoulli_condition(eta, d);
        if cond > 1e8 {
            warnings.push(format!("inverse loss at eta = {eta} on non-truncating input (condition {cond:.3e})"));
        }
    }
    let out = DensityMatrix::from_matrix_unchecked(hermitian_part(&m), format!("{} (loss inverted)", rho_eta.label));
    Ok(Warned { value: out, warnings })
}

/// Variance of the Gaussian smearing kernel.
pub fn smearing_variance(eta: f64) -> f64 {
    (1.0 - eta) / (2.0 * eta)
}

/// Convolve every phase slice with a Gaussian of variance (1 - eta)/(2 eta).
pub fn smear_quadrature(dist: &QuadratureDistribution, eta: f64) -> Result<QuadratureDistribution> {
    check_eta(eta)?;
    let mut out = dist.clone();
    out.eta = dist.eta * eta;
    let var = smearing_variance(eta);
    if var == 0.0 {
        return Ok(out);
    }
    let h = dist.grid.spacing();
    let n = dist.grid.n_points;
    let pad = ((12.0 * var.sqrt()) / h).ceil() as usize;
    let len = (n + 2 * pad).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let multiplier: Vec<f64> = (0..len)
        .map(|j| {
            let f = if j <= len / 2 { j as f64 } else { j as f64 - len as f64 };
            let omega = 2.0 * PI * f / (len as f64 * h);
            (-0.5 * var * omega * omega).exp() / len as f64
        })
        .collect();
    for row in out.values.iter_mut() {
        let mut buf: Vec<C> = vec![C::new(0.0, 0.0); len];
        for (i, v) in row.iter().enumerate() {
            buf[i] = C::new(*v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, m) in buf.iter_mut().zip(&multiplier) {
            *b *= m;
        }
        inv.process(&mut buf);
        for (i, v) in row.iter_mut().enumerate() {
            *v = buf[i].re;
        }
    }
    Ok(out)
}

/// Exact smeared density p(x, phi; eta) = sqrt(eta) p_{loss(rho, eta)}(sqrt(eta) x).
pub fn smeared_density(lossy: &DensityMatrix, eta: f64, x: f64, phi: f64) -> f64 {
    eta.sqrt() * quadrature_density(lossy, eta.sqrt() * x, phi)
}

pub fn smeared_quadrature_distribution(
    rho: &DensityMatrix,
    phases: &[f64],
    grid: &Grid1D,
    eta: f64,
) -> Result<QuadratureDistribution> {
    let lossy = loss_map(rho, eta)?;
    let xs = grid.points();
    let values = phases.iter().map(|&phi| xs.iter().map(|&x| smeared_density(&lossy, eta, x, phi)).collect()).collect();
    Ok(QuadratureDistribution { phases: phases.to_vec(), grid: *grid, values, eta, kind: DistributionKind::Exact })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomodyneRecord {
    pub phi: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomodyneDataset {
    pub records: Vec<HomodyneRecord>,
    pub eta: f64,
    /// None stands for the strong local-oscillator limit.
    pub lo_photon_number: Option<f64>,
    pub rng_seed: u64,
    pub scaling: String,
}

impl HomodyneDataset {
    pub fn phases(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.phi).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.records.iter().map(|r| r.samples.len()).sum()
    }
}

pub(crate) fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Inverse-CDF sampler over a tabulated density (piecewise-linear CDF).
struct CdfTable {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl CdfTable {
    fn new(xs: Vec<f64>, pdf: &[f64]) -> Self {
        let mut cdf = vec![0.0; xs.len()];
        for i in 1..xs.len() {
            let area = 0.5 * (pdf[i].max(0.0) + pdf[i - 1].max(0.0)) * (xs[i] - xs[i - 1]);
            cdf[i] = cdf[i - 1] + area;
        }
        let total = cdf[xs.len() - 1];
        for v in cdf.iter_mut() {
            *v /= total;
        }
        CdfTable { xs, cdf }
    }

    fn sample(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.xs.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.xs[i - 1] + t * (self.xs[i] - self.xs[i - 1])
    }
}

fn sampling_half_width(rho: &DensityMatrix, eta: f64) -> f64 {
    (2.0 * rho.dim() as f64 + 1.0).sqrt() + 7.0 * (0.5 + smearing_variance(eta)).sqrt()
}

/// Strong-oscillator homodyne samples at each phase, from the exact smeared density.
pub fn sample_homodyne(
    rho: &DensityMatrix,
    phases: &[f64],
    samples_per_phase: usize,
    eta: f64,
    rng_seed: u64,
) -> Result<HomodyneDataset> {
    check_eta(eta)?;
    if samples_per_phase == 0 {
        return Err(Error::InvalidParameter("samples_per_phase must be >= 1".into()));
    }
    let lossy = loss_map(rho, eta)?;
    let half = sampling_half_width(rho, eta);
    let xs: Vec<f64> =
        (0..CDF_TABLE_POINTS).map(|i| -half + 2.0 * half * i as f64 / (CDF_TABLE_POINTS - 1) as f64).collect();
    let records = phases
        .iter()
        .enumerate()
        .map(|(k, &phi)| {
            let pdf: Vec<f64> = xs.iter().map(|&x| smeared_density(&lossy, eta, x, phi)).collect();
            let table = CdfTable::new(xs.clone(), &pdf);
            let mut rng = record_rng(rng_seed, k);
            let samples = (0..samples_per_phase).map(|_| table.sample(rng.gen::<f64>())).collect();
            HomodyneRecord { phi: phi.rem_euclid(2.0 * PI), samples }
        })
        .collect();
    Ok(HomodyneDataset { records, eta, lo_photon_number: None, rng_seed, scaling: SCALING_NOTE.to_string() })
}

/// SU(2) beam splitter from Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSplitter {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl BeamSplitter {
    /// |U11|^2 = transmittance; phases = (alpha, gamma, delta).
    pub fn from_transmittance(transmittance: f64, phases: [f64; 3]) -> Result<Self> {
        if !(0.0..=1.0).contains(&transmittance) {
            return Err(Error::InvalidParameter(format!("transmittance {transmittance} outside [0, 1]")));
        }
        Ok(BeamSplitter { alpha: phases[0], beta: 2.0 * transmittance.sqrt().acos(), gamma: phases[1], delta: phases[2] })
    }

    /// The balanced splitter used for homodyning, U = [[1, 1], [-1, 1]]/sqrt 2.
    pub fn balanced() -> Self {
        BeamSplitter { alpha: 0.0, beta: -PI / 2.0, gamma: 0.0, delta: 0.0 }
    }

    pub fn matrix(&self) -> [[C; 2]; 2] {
        let d = C::from_polar(1.0, -self.delta);
        let (cb, sb) = ((self.beta / 2.0).cos(), (self.beta / 2.0).sin());
        [
            [
                d * C::from_polar(cb, -(self.alpha + self.gamma) / 2.0),
                -d * C::from_polar(sb, -(self.alpha - self.gamma) / 2.0),
            ],
            [
                d * C::from_polar(sb, (self.alpha - self.gamma) / 2.0),
                d * C::from_polar(cb, (self.alpha + self.gamma) / 2.0),
            ],
        ]
    }

    /// blocks[N][(j, n1)] = <j, N - j| V |n1, N - n1>.
    pub fn fock_blocks(&self, n_total_max: usize) -> Vec<DMatrix<C>> {
        let u = self.matrix();
        let mut blocks: Vec<DMatrix<C>> = vec![DMatrix::from_element(1, 1, C::new(1.0, 0.0))];
        for n in 1..=n_total_max {
            let prev = &blocks[n - 1];
            let mut cur = DMatrix::from_element(n + 1, n + 1, C::new(0.0, 0.0));
            for n1 in 0..=n {
                // raise from |n1 - 1, n2> with a1^dag, or from |0, n2 - 1> with a2^dag
                let (src, c1, c2, norm) = if n1 > 0 {
                    (n1 - 1, u[0][0], u[1][0], (n1 as f64).sqrt())
                } else {
                    (0, u[0][1], u[1][1], (n as f64).sqrt())
                };
                for j in 0..n {
                    let a = prev[(j, src)];
                    if a == C::new(0.0, 0.0) {
                        continue;
                    }
                    // a1^dag |j, n-1-j> and a2^dag |j, n-1-j>
                    cur[(j + 1, n1)] += c1 * a * ((j + 1) as f64).sqrt() / norm;
                    cur[(j, n1)] += c2 * a * ((n - j) as f64).sqrt() / norm;
                }
            }
            blocks.push(cur);
        }
        blocks
    }
}

/// Two-mode state on |n1, n2>, n1, n2 <= n_cut, index n1 (n_cut + 1) + n2.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeState {
    pub n_cut: usize,
    pub rho: DMatrix<C>,
}

impl TwoModeState {
    pub fn index(&self, n1: usize, n2: usize) -> usize {
        n1 * (self.n_cut + 1) + n2
    }

    pub fn product(a: &DensityMatrix, b: &DensityMatrix, n_cut: usize) -> Self {
        let d = n_cut + 1;
        let rho = DMatrix::from_fn(d * d, d * d, |i, j| a.get(i / d, j / d) * b.get(i % d, j % d));
        TwoModeState { n_cut, rho }
    }

    pub fn pure(amplitudes: &DMatrix<C>) -> Self {
        let n_cut = amplitudes.nrows() - 1;
        let v = DVector::from_iterator(amplitudes.len(), amplitudes.transpose().iter().copied());
        TwoModeState { n_cut, rho: &v * v.adjoint() }
    }

    pub fn probability(&self, n1: usize, n2: usize) -> f64 {
        let i = self.index(n1, n2);
        self.rho[(i, i)].re
    }

    pub fn total_number_distribution(&self) -> Vec<f64> {
        let mut p = vec![0.0; 2 * self.n_cut + 1];
        for n1 in 0..=self.n_cut {
            for n2 in 0..=self.n_cut {
                p[n1 + n2] += self.probability(n1, n2);
            }
        }
        p
    }
}

pub fn beam_splitter_transform(state: &TwoModeState, bs: &BeamSplitter) -> Result<TwoModeState> {
    let nc = state.n_cut;
    let d = nc + 1;
    for n1 in 0..=nc {
        for n2 in 0..=nc {
            if n1 + n2 > nc && state.probability(n1, n2).abs() > 1e-14 {
                return Err(Error::TruncationOverflow);
            }
        }
    }
    let blocks = bs.fock_blocks(nc);
    let mut v = DMatrix::from_element(d * d, d * d, C::new(0.0, 0.0));
    for (n, block) in blocks.iter().enumerate() {
        for n1 in 0..=n {
            for j in 0..=n {
                v[(j * d + (n - j), n1 * d + (n - n1))] = block[(j, n1)];
            }
        }
    }
    Ok(TwoModeState { n_cut: nc, rho: &v * &state.rho * v.adjoint() })
}

/// Distribution of the photon-number difference m1 - m2.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceDistribution {
    /// Difference value of probs[0].
    pub dm_min: i64,
    pub probs: Vec<f64>,
    /// eta sqrt(2) |alpha_L|, dividing a difference count by it gives x.
    pub scale: f64,
    /// Phase of the local oscillator, which selects the quadrature.
    pub phase: f64,
}

impl DifferenceDistribution {
    pub fn prob(&self, dm: i64) -> f64 {
        let i = dm - self.dm_min;
        if i < 0 || i as usize >= self.probs.len() {
            0.0
        } else {
            self.probs[i as usize]
        }
    }

    pub fn support(&self, threshold: f64) -> Vec<i64> {
        (0..self.probs.len()).filter(|&i| self.probs[i] > threshold).map(|i| self.dm_min + i as i64).collect()
    }

    /// Kolmogorov distance to a continuous density. Each difference count is
    /// spread uniformly over its bin of width 1/scale; with no oscillator,
    /// nonzero counts sit at +-infinity.
    pub fn kolmogorov_distance(&self, density: impl Fn(f64) -> f64, grid: &Grid1D) -> f64 {
        let xs = grid.points();
        // continuous CDF at grid points
        let mut cdf = vec![0.0; xs.len()];
        for i in 1..xs.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (density(xs[i]) + density(xs[i - 1])) * (xs[i] - xs[i - 1]);
        }
        let discrete_cdf = |x: f64| -> f64 {
            let mut acc = 0.0;
            for (i, p) in self.probs.iter().enumerate() {
                let dm = self.dm_min + i as i64;
                if self.scale == 0.0 {
                    let at = match dm.cmp(&0) {
                        std::cmp::Ordering::Less => f64::NEG_INFINITY,
                        std::cmp::Ordering::Equal => 0.0,
                        std::cmp::Ordering::Greater => f64::INFINITY,
                    };
                    if at <= x {
                        acc += p;
                    }
                } else {
                    let lo = (dm as f64 - 0.5) / self.scale;
                    let hi = (dm as f64 + 0.5) / self.scale;
                    acc += p * ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
                }
            }
            acc
        };
        let mut worst: f64 = 0.0;
        for (x, c) in xs.iter().zip(&cdf) {
            worst = worst.max((discrete_cdf(*x) - c).abs());
            if self.scale == 0.0 && *x >= 0.0 {
                // left limit at the point mass
                worst = worst.max((discrete_cdf(-1e-300) - c).abs());
            }
        }
        if self.scale == 0.0 {
            // jump at x = 0
            let c0 = interpolate(&xs, &cdf, 0.0);
            worst = worst.max((discrete_cdf(-f64::MIN_POSITIVE) - c0).abs()).max((discrete_cdf(0.0) - c0).abs());
        }
        worst
    }

    /// Largest gap between scale * P(dm) at x = dm/scale and the density there.
    pub fn sup_density_distance(&self, density: impl Fn(f64) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            let x = (self.dm_min + i as i64) as f64 / self.scale;
            worst = worst.max((p * self.scale - density(x)).abs());
        }
        worst
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
    let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}

/// LO photon cutoff: mean + 10 sqrt(mean), at least a few quanta.
pub fn lo_cutoff(mean: f64) -> usize {
    (mean + 10.0 * mean.sqrt()).ceil() as usize + 2
}

/// Difference-count statistics with a coherent oscillator of finite amplitude
/// on a balanced splitter, followed by detectors of efficiency eta.
pub fn finite_lo_difference_statistics(rho: &DensityMatrix, lo_alpha: C, eta: f64) -> Result<DifferenceDistribution> {
    check_eta(eta)?;
    let mean = lo_alpha.norm_sqr();
    let lo_dim = lo_cutoff(mean) + 1;
    let lo: Vec<C> = (0..lo_dim).map(|n| coherent_amplitude(lo_alpha, n)).collect();
    let lo_tail = 1.0 - lo.iter().map(|a| a.norm_sqr()).sum::<f64>();
    if lo_tail > 1e-8 {
        return Err(Error::TailTooHeavy(lo_tail));
    }
    let sig_dim = rho.dim();
    let n_total = sig_dim + lo_dim - 2;
    let blocks = BeamSplitter::balanced().fock_blocks(n_total);
    let eig = hermitian_part(rho.matrix()).symmetric_eigen();
    let out_dim = n_total + 1;
    let mut joint = DMatrix::<f64>::zeros(out_dim, out_dim);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= 1e-15 {
            continue;
        }
        let psi = eig.eigenvectors.column(idx);
        for (n, block) in blocks.iter().enumerate() {
            // inputs |n1, n - n1> with signal n1 in mode 1 and oscillator in mode 2
            let mut input = vec![C::new(0.0, 0.0); n + 1];
            let mut any = false;
            for (n1, slot) in input.iter_mut().enumerate() {
                let n2 = n - n1;
                if n1 < sig_dim && n2 < lo_dim {
                    *slot = psi[n1] * lo[n2];
                    any = true;
                }
            }
            if !any {
                continue;
            }
            for j in 0..=n {
                let mut amp = C::new(0.0, 0.0);
                for (n1, a) in input.iter().enumerate() {
                    amp += block[(j, n1)] * a;
                }
                joint[(j, n - j)] += lambda * amp.norm_sqr();
            }
        }
    }
    // independent losses in each detector
    let b = bernoulli_matrix(eta, out_dim, out_dim);
    let joint = &b * joint * b.transpose();
    let dm_min = -(n_total as i64);
    let mut probs = vec![0.0; 2 * n_total + 1];
    for m1 in 0..out_dim {
        for m2 in 0..out_dim {
            probs[(m1 as i64 - m2 as i64 - dm_min) as usize] += joint[(m1, m2)];
        }
    }
    Ok(DifferenceDistribution { dm_min, probs, scale: eta * SQRT_2 * lo_alpha.norm(), phase: lo_alpha.arg() })
}

/// P[m][n]: probability of m clicks from n photons spread over N equal channels.
pub fn chopping_matrix(n_channels: usize, n_max: usize) -> Result<DMatrix<f64>> {
    if n_channels == 0 {
        return Err(Error::InvalidParameter("chopping needs N >= 1".into()));
    }
    let nf = n_channels as f64;
    let mut t = DMatrix::<f64>::zeros(n_max + 1, n_max + 1);
    t[(0, 0)] = 1.0;
    for n in 0..n_max {
        for m in 0..=n.min(n_channels) {
            let p = t[(m, n)];
            if p == 0.0 {
                continue;
            }
            // the next photon lands in an already-firing channel or a fresh one
            t[(m, n + 1)] += p * m as f64 / nf;
            if m < n_channels {
                t[(m + 1, n + 1)] += p * (nf - m as f64) / nf;
            }
        }
    }
    Ok(t)
}

/// Undo chopping for photon distributions supported on n <= N.
pub fn invert_chopping(clicks: &[f64], n_channels: usize) -> Result<Vec<f64>> {
    let dim = clicks.len().min(n_channels + 1);
    let t = chopping_matrix(n_channels, dim - 1)?;
    let mut p = vec![0.0; dim];
    for n in (0..dim).rev() {
        let mut acc = clicks[n];
        for k in n + 1..dim {
            acc -= t[(n, k)] * p[k];
        }
        p[n] = acc / t[(n, n)];
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacedCountRecord {
    pub alpha: C,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacedCountDataset {
    pub records: Vec<DisplacedCountRecord>,
    pub eta: f64,
    pub chopping_channels: Option<usize>,
    pub shots: u64,
    pub rng_seed: u64,
}

/// Count distribution behind one record: displaced statistics, losses, then chopping.
pub fn displaced_count_probabilities(
    rho: &DensityMatrix,
    alpha: C,
    eta: f64,
    chopping: Option<usize>,
) -> Result<Vec<f64>> {
    let p = bernoulli_transform(&displaced_number_statistics(rho, alpha)?, eta);
    match chopping {
        None => Ok(p),
        Some(n) => {
            let t = chopping_matrix(n, p.len() - 1)?;
            let clicks = t * DVector::from_column_slice(&p);
            Ok(clicks.iter().take(n + 1).copied().collect())
        }
    }
}

/// Multinomial draw by sequential binomial conditioning.
pub fn multinomial(rng: &mut ChaCha8Rng, shots: u64, probs: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; probs.len()];
    let mut left = shots;
    let mut mass: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    for (i, p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        let p = p.max(0.0);
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if i + 1 == probs.len() || q >= 1.0 {
            left
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        counts[i] = k;
        left -= k;
        mass -= p;
    }
    counts
}

pub fn simulate_displaced_counts(
    rho: &DensityMatrix,
    alphas: &[C],
    eta: f64,
    shots: u64,
    chopping: Option<usize>,
    rng_seed: u64,
) -> Result<DisplacedCountDataset> {
    check_eta(eta)?;
    if shots == 0 {
        return Err(Error::InvalidParameter("shots must be >= 1".into()));
    }
    if let Some(n) = chopping {
        if !n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("chopping channel count {n} is not a power of two")));
        }
    }
    let mut records = Vec::with_capacity(alphas.len());
    for (k, &alpha) in alphas.iter().enumerate() {
        let p = displaced_count_probabilities(rho, alpha, eta, chopping)?;
        let mut rng = record_rng(rng_seed, k);
        records.push(DisplacedCountRecord { alpha, counts: multinomial(&mut rng, shots, &p) });
    }
    Ok(DisplacedCountDataset { records, eta, chopping_channels: chopping, shots, rng_seed })
}

/// Coupling frequencies of the n <-> n + k sideband for n = 0..=n_max.
/// For eta_ld = 0 this is the ideal multiphoton cavity coupling
/// Omega_L sqrt((n+1)...(n+k)); otherwise the trapped-ion matrix element
/// Omega_L e^{-eta^2/2} eta^k sqrt(n!/(n+k)!) L_n^(k)(eta^2), returned as a
/// signed real number (the overall i^k phase is dropped).
pub fn rabi_frequencies(k: usize, eta_ld: f64, n_max: usize, omega_l: f64) -> Vec<f64> {
    (0..=n_max)
        .map(|n| {
            if eta_ld == 0.0 {
                omega_l * (0.5 * (ln_factorial(n + k) - ln_factorial(n))).exp()
            } else {
                let e2 = eta_ld * eta_ld;
                let mag = (-0.5 * e2 + k as f64 * eta_ld.ln() + 0.5 * (ln_factorial(n) - ln_factorial(n + k))).exp();
                omega_l * mag * laguerre(n, k as f64, e2)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Preparation {
    Incoherent,
    Coherent { psi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub omega_l: f64,
    pub k: usize,
    pub eta_ld: f64,
    pub times: Vec<f64>,
    pub displacement: Option<C>,
    pub preparation: Preparation,
    /// Laser phase for the quadrature probe.
    #[serde(default)]
    pub phase: f64,
}

impl ProbeConfig {
    pub fn new(omega_l: f64, k: usize, eta_ld: f64, times: Vec<f64>) -> Self {
        ProbeConfig { omega_l, k, eta_ld, times, displacement: None, preparation: Preparation::Incoherent, phase: 0.0 }
    }

    pub fn uniform_times(t_max: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times[0] < 0.0 || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("probe times must be nonnegative and strictly increasing".into()));
        }
        if self.eta_ld < 0.0 || !self.omega_l.is_finite() {
            return Err(Error::InvalidParameter("probe coupling parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProbeChannel {
    Inversion,
    PmDifference { psi: f64 },
    CharacteristicRe,
    CharacteristicIm,
}

impl ProbeChannel {
    pub fn tag(&self) -> String {
        match self {
            ProbeChannel::Inversion => "inversion".into(),
            ProbeChannel::PmDifference { psi } => format!("pm_difference({psi})"),
            ProbeChannel::CharacteristicRe => "characteristic_re".into(),
            ProbeChannel::CharacteristicIm => "characteristic_im".into(),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "inversion" => Ok(ProbeChannel::Inversion),
            "characteristic_re" => Ok(ProbeChannel::CharacteristicRe),
            "characteristic_im" => Ok(ProbeChannel::CharacteristicIm),
            t if t.starts_with("pm_difference(") && t.ends_with(')') => {
                let psi = t["pm_difference(".len()..t.len() - 1]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad channel tag {t}")))?;
                Ok(ProbeChannel::PmDifference { psi })
            }
            t => Err(Error::Format(format!("unknown channel tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSignal {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub channel: ProbeChannel,
    /// Coupling parameters the signal was generated with.
    pub omega_l: f64,
    pub k: usize,
    pub eta_ld: f64,
}

fn prepared_state(rho: &DensityMatrix, cfg: &ProbeConfig) -> Result<DensityMatrix> {
    match cfg.displacement {
        None => Ok(rho.clone()),
        Some(alpha) => {
            let r = alpha.norm();
            let dim = rho.dim() + (r * r + 10.0 * r + 12.0).ceil() as usize;
            displaced_state(rho, alpha, dim)
        }
    }
}

pub fn simulate_jc_inversion(rho: &DensityMatrix, cfg: &ProbeConfig) -> Result<ProbeSignal> {
    cfg.validate()?;
    let p = match cfg.displacement {
        None => rho.diagonal(),
        Some(alpha) => displaced_number_statistics(rho, alpha)?,
    };
    let omega = rabi_frequencies(cfg.k, cfg.eta_ld, p.len() - 1, cfg.omega_l);
    let values = cfg.times.iter().map(|&t| p.iter().zip(&omega).map(|(pn, w)| pn * (w * t).cos()).sum()).collect();
    Ok(ProbeSignal {
        times: cfg.times.clone(),
        values,
        channel: ProbeChannel::Inversion,
        omega_l: cfg.omega_l,
        k: cfg.k,
        eta_ld: cfg.eta_ld,
    })
}

/// a_n = Im(e^{i psi} rho_{n, n+k}).
pub fn pm_coefficients(rho: &DensityMatrix, k: usize, psi: f64) -> Vec<f64> {
    let d = rho.dim();
    (0..d.saturating_sub(k)).map(|n| (C::from_polar(1.0, psi) * rho.get(n, n + k)).im).collect()
}

pub fn simulate_pm_difference(rho: &DensityMatrix, cfg: &ProbeConfig) -> Result<ProbeSignal> {
    cfg.validate()?;
    let psi = match cfg.preparation {
        Preparation::Coherent { psi } => psi,
        Preparation::Incoherent => {
            return Err(Error::InvalidParameter("difference signal needs a coherent preparation phase".into()))
        }
    };
    let state = prepared_state(rho, cfg)?;
    let a = pm_coefficients(&state, cfg.k, psi);
    let omega = rabi_frequencies(cfg.k, cfg.eta_ld, a.len().max(1) - 1, cfg.omega_l);
    let values =
        cfg.times.iter().map(|&t| 2.0 * a.iter().zip(&omega).map(|(an, w)| an * (w * t).sin()).sum::<f64>()).collect();
    Ok(ProbeSignal {
        times: cfg.times.clone(),
        values,
        channel: ProbeChannel::PmDifference { psi },
        omega_l: cfg.omega_l,
        k: cfg.k,
        eta_ld: cfg.eta_ld,
    })
}

/// Both probe channels: -Re Psi(sqrt2 Omega_L t, phi) and -Im Psi(sqrt2 Omega_L t, phi).
pub fn simulate_quadrature_probe(rho: &DensityMatrix, cfg: &ProbeConfig) -> Result<(ProbeSignal, ProbeSignal)> {
    cfg.validate()?;
    let psi: Vec<C> =
        cfg.times.iter().map(|&t| characteristic_function(rho, SQRT_2 * cfg.omega_l * t, cfg.phase)).collect();
    let make = |channel, values| ProbeSignal {
        times: cfg.times.clone(),
        values,
        channel,
        omega_l: cfg.omega_l,
        k: cfg.k,
        eta_ld: cfg.eta_ld,
    };
    Ok((
        make(ProbeChannel::CharacteristicRe, psi.iter().map(|p| -p.re).collect()),
        make(ProbeChannel::CharacteristicIm, psi.iter().map(|p| -p.im).collect()),
    ))
}

/// Rebuild Psi(z, phi) samples at z = sqrt2 Omega_L t from the two probe channels.
pub fn characteristic_from_probe(inc: &ProbeSignal, coh: &ProbeSignal) -> Result<Vec<(f64, C)>> {
    if inc.times != coh.times {
        return Err(Error::DimensionMismatch(inc.times.len(), coh.times.len()));
    }
    Ok(inc
        .times
        .iter()
        .zip(inc.values.iter().zip(&coh.values))
        .map(|(&t, (&re, &im))| (SQRT_2 * inc.omega_l * t, C::new(-re, -im)))
        .collect())
}

/// Displacement operator convenience used by tests and the probe module.
pub fn displacement(alpha: C, dim: usize) -> DMatrix<C> {
    displacement_matrix(alpha, dim, dim)
}
