//! Special functions: oscillator eigenfunctions, Hermite and Laguerre values,
//! factorial logs and displacement matrix elements. Everything runs through
//! three-term recurrences so nothing overflows for indices in the hundreds.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::PI;
use std::sync::OnceLock;

const LN_FACT_TABLE: usize = 4096;

fn ln_fact_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![0.0; LN_FACT_TABLE];
        for n in 1..LN_FACT_TABLE {
            t[n] = t[n - 1] + (n as f64).ln();
        }
        t
    })
}

/// ln(n!)
pub fn ln_factorial(n: usize) -> f64 {
    if n < LN_FACT_TABLE {
        ln_fact_table()[n]
    } else {
        // Stirling series, far beyond any index used here
        let x = n as f64 + 1.0;
        (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x.powi(3))
    }
}

pub fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    if n < 60 {
        let k = k.min(n - k);
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        return c.round();
    }
    ln_binomial(n, k).exp()
}

/// C(n,k) q^k (1-q)^(n-k), handling the q = 0 and q = 1 edges exactly.
pub fn binomial_pmf(n: usize, k: usize, q: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if q == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    if q == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (ln_binomial(n, k) + k as f64 * q.ln() + (n - k) as f64 * (1.0 - q).ln()).exp()
}

/// Normalized oscillator eigenfunctions psi_0..=psi_n at x.
pub fn hermite_functions(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    out[0] = PI.powf(-0.25) * (-0.5 * x * x).exp();
    fill_recurrence(&mut out, x);
    out
}

/// Same as `hermite_functions` but multiplied by exp(x^2/2): pure polynomials
/// that never underflow.
pub fn scaled_hermite_functions(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    out[0] = PI.powf(-0.25);
    fill_recurrence(&mut out, x);
    out
}

fn fill_recurrence(out: &mut [f64], x: f64) {
    if out.len() > 1 {
        out[1] = std::f64::consts::SQRT_2 * x * out[0];
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = (2.0 / (nf + 1.0)).sqrt() * x * out[n] - (nf / (nf + 1.0)).sqrt() * out[n - 1];
    }
}

/// Derivatives from the ladder identity psi_n' = sqrt(2n) psi_{n-1} - x psi_n.
/// Works for the scaled variant too after the caller adds x psi_n back.
pub fn hermite_function_derivatives(values: &[f64], x: f64) -> Vec<f64> {
    (0..values.len())
        .map(|n| {
            let lower = if n > 0 { (2.0 * n as f64).sqrt() * values[n - 1] } else { 0.0 };
            lower - x * values[n]
        })
        .collect()
}

pub fn oscillator_eigenfunction(n: usize, x: f64) -> f64 {
    hermite_functions(n, x)[n]
}

/// Physicists' Hermite polynomials H_0..=H_n at x.
pub fn hermite_polynomials(n_max: usize, x: f64) -> Vec<f64> {
    let mut h = vec![0.0; n_max + 1];
    h[0] = 1.0;
    if n_max >= 1 {
        h[1] = 2.0 * x;
    }
    for n in 1..n_max {
        h[n + 1] = 2.0 * x * h[n] - 2.0 * n as f64 * h[n - 1];
    }
    h
}

/// Associated Laguerre L_0^(a)..=L_n^(a) at x.
pub fn laguerre_all(n_max: usize, a: f64, x: f64) -> Vec<f64> {
    let mut l = vec![0.0; n_max + 1];
    l[0] = 1.0;
    if n_max >= 1 {
        l[1] = 1.0 + a - x;
    }
    for k in 1..n_max {
        let kf = k as f64;
        l[k + 1] = ((2.0 * kf + 1.0 + a - x) * l[k] - (kf + a) * l[k - 1]) / (kf + 1.0);
    }
    l
}

pub fn laguerre(n: usize, a: f64, x: f64) -> f64 {
    laguerre_all(n, a, x)[n]
}

/// <m| D(alpha) |n> with D(alpha) = exp(alpha a^dag - alpha^* a).
pub fn displacement_element(m: usize, n: usize, alpha: Complex64) -> Complex64 {
    let r = alpha.norm();
    if r == 0.0 {
        return if m == n { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
    }
    let (lo, hi) = if m >= n { (n, m) } else { (m, n) };
    let k = hi - lo;
    let lag = laguerre(lo, k as f64, r * r);
    let log_mag = -0.5 * r * r + 0.5 * (ln_factorial(lo) - ln_factorial(hi)) + k as f64 * r.ln();
    let theta = alpha.arg();
    // m >= n: alpha^k ; m < n: (-alpha^*)^k
    let phase = if m >= n {
        Complex64::from_polar(1.0, k as f64 * theta)
    } else {
        Complex64::from_polar(1.0, k as f64 * (PI - theta))
    };
    phase * (lag * log_mag.exp())
}

/// Matrix of <m|D(alpha)|n> for m < rows, n < cols.
pub fn displacement_matrix(alpha: Complex64, rows: usize, cols: usize) -> DMatrix<Complex64> {
    let r = alpha.norm();
    if r == 0.0 {
        return DMatrix::from_fn(rows, cols, |m, n| {
            if m == n {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
    }
    let y = r * r;
    let theta = alpha.arg();
    let lr = r.ln();
    let kmax = rows.max(cols);
    let mut d = DMatrix::from_element(rows, cols, Complex64::new(0.0, 0.0));
    for k in 0..kmax {
        // entries with |m - n| = k; lower index runs over l
        let lmax_rows = rows.saturating_sub(k); // m = l + k < rows
        let lmax_cols = cols.saturating_sub(k); // n = l + k < cols
        let lmax = lmax_rows.max(lmax_cols);
        if lmax == 0 {
            continue;
        }
        let lag = laguerre_all(lmax - 1, k as f64, y);
        for l in 0..lmax {
            let mag = (-0.5 * y + 0.5 * (ln_factorial(l) - ln_factorial(l + k)) + k as f64 * lr).exp() * lag[l];
            // m = l + k, n = l
            if l + k < rows && l < cols {
                d[(l + k, l)] = Complex64::from_polar(1.0, k as f64 * theta) * mag;
            }
            if k > 0 && l < rows && l + k < cols {
                d[(l, l + k)] = Complex64::from_polar(1.0, k as f64 * (PI - theta)) * mag;
            }
        }
    }
    d
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre rule on [a, b]: `panels` panels of `order` nodes.
pub fn composite_gauss(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut xs = Vec::with_capacity(panels * order);
    let mut ws = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for (xi, wi) in gx.iter().zip(&gw) {
            xs.push(c + 0.5 * h * xi);
            ws.push(0.5 * h * wi);
        }
    }
    (xs, ws)
}

/// Trapezoid weights for a uniform grid.
pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    if n > 0 {
        w[0] = 0.5 * h;
        w[n - 1] = 0.5 * h;
    }
    w
}

/// Composite Simpson weights for a uniform grid; an even number of
/// intervals is required for pure Simpson, otherwise the last three
/// intervals use the 3/8 rule.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    if n < 4 {
        return trapezoid_weights(n, h);
    }
    let mut w = vec![0.0; n];
    let intervals = n - 1;
    let simpson_end = if intervals % 2 == 0 { n - 1 } else { n - 4 };
    for i in (0..simpson_end).step_by(2) {
        w[i] += h / 3.0;
        w[i + 1] += 4.0 * h / 3.0;
        w[i + 2] += h / 3.0;
    }
    if simpson_end != n - 1 {
        let s = simpson_end;
        w[s] += 3.0 * h / 8.0;
        w[s + 1] += 9.0 * h / 8.0;
        w[s + 2] += 9.0 * h / 8.0;
        w[s + 3] += 3.0 * h / 8.0;
    }
    w
}
