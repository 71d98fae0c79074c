//! Pattern functions f_mn(x) = d/dx[psi_m(x) phi_n(x)] and the sampling
//! kernels built from them.
//!
//! The irregular solution phi_n is integrated in the scaled form
//! h(x) = phi_n(x) e^{-x^2/2}, which obeys h'' + 2x h' + (2n+2) h = 0 and
//! stays polynomially bounded. Products with the scaled regular solution
//! psi_n(x) e^{x^2/2} then never touch an exponential.

use crate::error::{Error, Result};
use crate::special::{composite_gauss, hermite_functions, laguerre_all, ln_factorial, scaled_hermite_functions};
use crate::states::Grid1D;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

type C = Complex64;

/// Largest RK4 step used for the irregular solution.
const ODE_STEP: f64 = 0.0025;
pub const Z_TAIL_EPS: f64 = 1e-8;
pub const DEFAULT_N_SUM: usize = 64;
pub const DEFAULT_KERNEL_TOLERANCE: f64 = 1e-2;

pub fn turning_point(n: usize) -> f64 {
    (2.0 * n as f64 + 1.0).sqrt()
}

fn check_grid(n: usize, grid: &Grid1D) -> Result<()> {
    let needed = turning_point(n) + 3.0;
    let have = grid.half_width();
    if have < needed {
        return Err(Error::GridTooNarrow { n, needed, have });
    }
    Ok(())
}

/// Scaled irregular solution and its derivative at the given points.
/// Initial data fix the Wronskian psi phi' - psi' phi = 2/pi and the parity
/// opposite to psi_n.
pub fn scaled_irregular(n: usize, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let psi0 = hermite_functions(n + 1, 0.0);
    let (mut y, mut dy) = if n % 2 == 0 {
        (0.0, 2.0 / PI / psi0[n])
    } else {
        // psi_n'(0) = sqrt(2n) psi_{n-1}(0)
        let dpsi = (2.0 * n as f64).sqrt() * psi0[n - 1];
        (-2.0 / PI / dpsi, 0.0)
    };
    let nn = 2.0 * n as f64 + 2.0;
    let rhs = |x: f64, y: f64, dy: f64| (dy, -2.0 * x * dy - nn * y);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].abs().partial_cmp(&xs[b].abs()).unwrap());
    let mut vals = vec![0.0; xs.len()];
    let mut ders = vec![0.0; xs.len()];
    let mut x = 0.0;
    for &i in &order {
        let target = xs[i].abs();
        let span = target - x;
        if span > 0.0 {
            let steps = (span / ODE_STEP).ceil() as usize;
            let h = span / steps as f64;
            for _ in 0..steps {
                let (k1y, k1d) = rhs(x, y, dy);
                let (k2y, k2d) = rhs(x + 0.5 * h, y + 0.5 * h * k1y, dy + 0.5 * h * k1d);
                let (k3y, k3d) = rhs(x + 0.5 * h, y + 0.5 * h * k2y, dy + 0.5 * h * k2d);
                let (k4y, k4d) = rhs(x + h, y + h * k3y, dy + h * k3d);
                y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
                dy += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
                x += h;
            }
            x = target;
        }
        // reflect: even n gives an odd phi, odd n an even phi
        let (v, d) = if xs[i] < 0.0 {
            if n % 2 == 0 {
                (-y, dy)
            } else {
                (y, -dy)
            }
        } else {
            (y, dy)
        };
        vals[i] = v;
        ders[i] = d;
    }
    (vals, ders)
}

/// Regular and irregular solutions psi_n, phi_n on the grid (unscaled).
pub fn regular_irregular_pair(n: usize, grid: &Grid1D) -> Result<(Vec<f64>, Vec<f64>)> {
    check_grid(n, grid)?;
    let xs = grid.points();
    let (h, _) = scaled_irregular(n, &xs);
    let psi: Vec<f64> = xs.iter().map(|&x| hermite_functions(n, x)[n]).collect();
    let phi: Vec<f64> = xs.iter().zip(&h).map(|(&x, &v)| v * (0.5 * x * x).exp()).collect();
    Ok((psi, phi))
}

/// Wronskian psi_n phi_n' - psi_n' phi_n evaluated through the scaled forms.
pub fn wronskian(n: usize, xs: &[f64]) -> Vec<f64> {
    let (h, dh) = scaled_irregular(n, xs);
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scaled_hermite_functions(n, x);
            // scaled regular r = psi e^{x^2/2}: r' = sqrt(2n) r_{n-1}
            let dr = if n > 0 { (2.0 * n as f64).sqrt() * s[n - 1] } else { 0.0 };
            // psi phi' - psi' phi = r (h' + x h) - (r' - x r) h = r h' - r' h + 2 x r h
            s[n] * dh[i] - dr * h[i] + 2.0 * x * s[n] * h[i]
        })
        .collect()
}

/// f_mn at arbitrary points (no grid-width requirement).
pub fn pattern_values(m: usize, n: usize, xs: &[f64]) -> Vec<f64> {
    let (a, b) = if m <= n { (m, n) } else { (n, m) };
    let (h, dh) = scaled_irregular(b, xs);
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scaled_hermite_functions(a, x);
            let dr = if a > 0 { (2.0 * a as f64).sqrt() * s[a - 1] } else { 0.0 };
            dr * h[i] + s[a] * dh[i]
        })
        .collect()
}

/// g_mn(x) = psi_m(x) psi_n(x).
pub fn g_values(m: usize, n: usize, xs: &[f64]) -> Vec<f64> {
    let top = m.max(n);
    xs.iter()
        .map(|&x| {
            let h = hermite_functions(top, x);
            h[m] * h[n]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTable {
    pub grid: Grid1D,
    pub n_max: usize,
    /// 1 for the plain pattern functions.
    pub eta: f64,
    pub method: String,
    pub tolerance: f64,
    /// values[m * (n_max + 1) + n][i]
    pub values: Vec<Vec<f64>>,
}

impl PatternTable {
    pub fn get(&self, m: usize, n: usize) -> &[f64] {
        &self.values[m * (self.n_max + 1) + n]
    }

    /// Linear interpolation of f_mn at x; zero outside the grid.
    pub fn interpolate(&self, m: usize, n: usize, x: f64) -> f64 {
        let g = &self.grid;
        if x < g.x_min || x > g.x_max {
            return 0.0;
        }
        let t = (x - g.x_min) / g.spacing();
        let i = (t.floor() as usize).min(g.n_points - 2);
        let f = t - i as f64;
        let v = self.get(m, n);
        v[i] * (1.0 - f) + v[i + 1] * f
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut e: f64 = 0.0;
        for m in 0..=self.n_max {
            for n in 0..m {
                for (a, b) in self.get(m, n).iter().zip(self.get(n, m)) {
                    e = e.max((a - b).abs());
                }
            }
        }
        e
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

fn build_symmetric(n_max: usize, grid: &Grid1D, eta: f64, method: &str, tol: f64, pair: impl Fn(usize, usize) -> Vec<f64>) -> PatternTable {
    let d = n_max + 1;
    let mut values = vec![Vec::new(); d * d];
    for m in 0..d {
        for n in m..d {
            let v = pair(m, n);
            values[n * d + m] = v.clone();
            values[m * d + n] = v;
        }
    }
    PatternTable { grid: *grid, n_max, eta, method: method.to_string(), tolerance: tol, values }
}

pub fn pattern_function_table(n_max: usize, grid: &Grid1D) -> Result<PatternTable> {
    check_grid(n_max, grid)?;
    let xs = grid.points();
    let irregular: Vec<(Vec<f64>, Vec<f64>)> = (0..=n_max).map(|b| scaled_irregular(b, &xs)).collect();
    let scaled: Vec<Vec<f64>> = xs.iter().map(|&x| scaled_hermite_functions(n_max, x)).collect();
    Ok(build_symmetric(n_max, grid, 1.0, "ode-rk4-analytic-derivative", ODE_STEP.powi(4), |a, b| {
        let (h, dh) = &irregular[b];
        (0..xs.len())
            .map(|i| {
                let s = &scaled[i];
                let dr = if a > 0 { (2.0 * a as f64).sqrt() * s[a - 1] } else { 0.0 };
                dr * h[i] + s[a] * dh[i]
            })
            .collect()
    }))
}

/// R(z) with <m| D(i z / sqrt2) |n> = i^{|m-n|} R(z), for all pairs at one z.
/// rows[lo][k] for lo + k <= n_max.
fn displaced_radial(n_max: usize, z: f64) -> Vec<Vec<f64>> {
    let y = 0.5 * z * z;
    let lz = (z / std::f64::consts::SQRT_2).ln();
    let mut out = vec![Vec::new(); n_max + 1];
    for k in 0..=n_max {
        let lag = laguerre_all(n_max - k, k as f64, y);
        for lo in 0..=n_max - k {
            let mag = if z == 0.0 {
                if k == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-0.5 * y + 0.5 * (ln_factorial(lo) - ln_factorial(lo + k)) + k as f64 * lz).exp()
            };
            out[lo].push(mag * lag[lo]);
        }
    }
    out
}

/// Smallest z beyond which the compensated integrand envelope stays below eps.
pub fn compensated_z_cutoff(n_max: usize, eta: f64, eps: f64) -> f64 {
    let c = 0.25 * (1.0 / eta - 1.0);
    let envelope = |z: f64| -> f64 {
        let rad = displaced_radial(n_max, z);
        let top = rad.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        z * (c * z * z).exp() * top
    };
    // beyond the last Laguerre zero every radial factor decays monotonically
    let start = (2.0 * (4.0 * n_max as f64 + 2.0)).sqrt() + 1.0;
    let mut z = start;
    while envelope(z) > eps && z < 400.0 {
        z += 0.05;
    }
    z
}

/// Loss-compensating kernels from the z integral with Gaussian factor
/// exp[(1/eta - 1) z^2 / 4]. At eta = 1 the plain table is returned.
pub fn eta_compensated_table(n_max: usize, grid: &Grid1D, eta: f64) -> Result<PatternTable> {
    if eta <= 0.5 || eta > 1.0 {
        return Err(Error::EtaOutOfRange(eta));
    }
    if eta == 1.0 {
        return pattern_function_table(n_max, grid);
    }
    compensated_kernel_by_z(n_max, grid, eta)
}

/// The z-integral route for any eta in (1/2, 1], including eta = 1.
pub fn compensated_kernel_by_z(n_max: usize, grid: &Grid1D, eta: f64) -> Result<PatternTable> {
    if eta <= 0.5 || eta > 1.0 {
        return Err(Error::EtaOutOfRange(eta));
    }
    check_grid(n_max, grid)?;
    let z_max = compensated_z_cutoff(n_max, eta, Z_TAIL_EPS);
    let xs = grid.points();
    let x_ext = xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    // panels short against the fastest oscillation cos(z x_ext)
    let panels = ((z_max * (x_ext + 1.0)) / 3.0).ceil() as usize + 8;
    let (zs, ws) = composite_gauss(0.0, z_max, panels, 12);
    let c = 0.25 * (1.0 / eta - 1.0);
    // weight_j(lo, k) = w_j z_j e^{c z_j^2} R(z_j) / pi
    let radial: Vec<Vec<Vec<f64>>> = zs.iter().map(|&z| displaced_radial(n_max, z)).collect();
    let pre: Vec<f64> = zs.iter().zip(&ws).map(|(&z, &w)| w * z * (c * z * z).exp() / PI).collect();
    let cos: Vec<Vec<f64>> = zs.iter().map(|&z| xs.iter().map(|&x| (z * x).cos()).collect()).collect();
    let sin: Vec<Vec<f64>> = zs.iter().map(|&z| xs.iter().map(|&x| (z * x).sin()).collect()).collect();
    let method = format!("z-integral gauss-legendre z_max={z_max:.4}");
    Ok(build_symmetric(n_max, grid, eta, &method, Z_TAIL_EPS, |a, b| {
        let k = b - a;
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        let trig = if k % 2 == 0 { &cos } else { &sin };
        let mut out = vec![0.0; xs.len()];
        for j in 0..zs.len() {
            let coef = sign * pre[j] * radial[j][a][k];
            if coef == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(&trig[j]) {
                *o += coef * t;
            }
        }
        out
    }))
}

/// Fourier transform of f_mn: |z| <m| D(i z / sqrt2) |n>.
pub fn fourier_kernel(m: usize, n: usize, zs: &[f64]) -> Vec<C> {
    let (a, b) = if m <= n { (m, n) } else { (n, m) };
    let k = b - a;
    let ik = C::new(0.0, 1.0).powi(k as i32);
    zs.iter()
        .map(|&z| {
            let r = displaced_radial(b, z.abs());
            // odd k: R is odd in z
            let parity = if z < 0.0 && k % 2 == 1 { -1.0 } else { 1.0 };
            ik * (z.abs() * parity * r[a][k])
        })
        .collect()
}

/// Laguerre form S_n^(k)(z) of the kernel for rho_{n, n+k}; equals
/// `characteristic_kernel` up to a factor sqrt2 for odd k.
pub fn characteristic_kernel_laguerre(n: usize, k: usize, z: f64) -> f64 {
    let lag = laguerre_all(n, k as f64, 0.5 * z * z)[n];
    let fac = if k % 2 == 0 { (-2f64).powi(k as i32 / 2) } else { (-2f64).powi((k as i32 - 1) / 2) };
    std::f64::consts::SQRT_2 / PI
        * (2.0 * (ln_factorial(n) - ln_factorial(n + k)).exp()).sqrt()
        * (z / 2.0).powi(k as i32 + 1)
        * lag
        * (-0.25 * z * z).exp()
        * fac
}

/// Kernel for rho_{n+k, n} = int_0^pi dphi e^{ik phi} int_0^inf dz K(z) {Re|Im} Psi.
pub fn characteristic_kernel(n: usize, k: usize, z: f64) -> f64 {
    let r = displaced_radial(n + k, z)[n][k];
    let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
    sign * z * r / PI
}

/// Classical limit of the [0, pi) phase kernel (twice the [0, 2 pi) one).
pub fn classical_phase_kernel(k: usize, x: f64) -> f64 {
    let kf = k as f64;
    if x == 0.0 {
        return 0.0;
    }
    if k % 2 == 1 {
        let s = if ((k - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
        0.5 * s * kf * x.signum()
    } else {
        let s = if ((k + 2) / 2) % 2 == 0 { 1.0 } else { -1.0 };
        s * kf * x.abs().ln() / PI
    }
}

/// 1 - pi int K_cl g_{n+k,n}: how far the classical kernel misses each element.
fn classical_defects(k: usize, n_sum: usize) -> Vec<f64> {
    (0..=n_sum)
        .map(|n| {
            let top = n + k;
            let l = turning_point(top) + 12.0;
            let integral = if k % 2 == 1 {
                let (xs, ws) = composite_gauss(0.0, l, 64, 16);
                2.0 * xs.iter().zip(&ws).map(|(&x, &w)| {
                    let h = hermite_functions(top, x);
                    w * classical_phase_kernel(k, x) * h[n] * h[top]
                }).sum::<f64>()
            } else {
                // x = u^2 tames the logarithm
                let (us, ws) = composite_gauss(0.0, l.sqrt(), 64, 16);
                2.0 * us.iter().zip(&ws).map(|(&u, &w)| {
                    let x = u * u;
                    let h = hermite_functions(top, x);
                    w * 2.0 * u * classical_phase_kernel(k, x) * h[n] * h[top]
                }).sum::<f64>()
            };
            1.0 - PI * integral
        })
        .collect()
}

/// Kernel K_k for exponential phase moments in the [0, 2 pi) normalization:
/// Psi_k = int_0^{2pi} dphi e^{ik phi} int dx K_k(x) p(x, phi).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMomentKernel {
    pub k: usize,
    pub n_sum: usize,
    /// Coefficients of f_{n+k,n} added to the classical kernel.
    pub defects: Vec<f64>,
    /// Size of the last included term, the convergence monitor.
    pub tail: f64,
}

impl PhaseMomentKernel {
    /// Values on arbitrary points.
    pub fn evaluate(&self, xs: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = xs.iter().map(|&x| classical_phase_kernel(self.k, x)).collect();
        for (n, r) in self.defects.iter().enumerate() {
            let f = pattern_values(n + self.k, n, xs);
            for (o, v) in out.iter_mut().zip(&f) {
                *o += r * v;
            }
        }
        out.iter().map(|v| 0.5 * v).collect()
    }
}

/// Build K_k with n_sum correction terms; NotConverged if the last term on
/// the grid exceeds `tolerance`.
pub fn phase_moment_kernel(k: usize, grid: &Grid1D, n_sum: usize, tolerance: f64) -> Result<(PhaseMomentKernel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidParameter("phase moment index must be >= 1".into()));
    }
    let defects = classical_defects(k, n_sum);
    let xs = grid.points();
    let last = pattern_values(n_sum + k, n_sum, &xs);
    let tail = 0.5 * last.iter().fold(0.0f64, |a, v| a.max(v.abs())) * defects[n_sum].abs();
    let kernel = PhaseMomentKernel { k, n_sum, defects, tail };
    if tail > tolerance {
        return Err(Error::NotConverged(tail));
    }
    let mut values = kernel.evaluate(&xs);
    if k % 2 == 0 {
        // replace the pointwise logarithm by its average over each grid cell
        let h = grid.spacing();
        let anti = |x: f64| if x == 0.0 { 0.0 } else { x * x.abs().ln() - x };
        for (v, &x) in values.iter_mut().zip(&xs) {
            let avg = (anti(x + 0.5 * h) - anti(x - 0.5 * h)) / h;
            let point = if x == 0.0 { 0.0 } else { x.abs().ln() };
            // coefficient of ln|x| in the classical kernel
            let coef = classical_phase_kernel(k, std::f64::consts::E);
            *v += 0.5 * coef * (avg - point);
        }
    }
    Ok((kernel, values))
}
