use approx::assert_abs_diff_eq;
use num_complex::Complex64 as C;
use qstate_core::detection::{loss_map, smeared_density};
use qstate_core::patterns::*;
use qstate_core::special::{composite_gauss, hermite_polynomials, ln_factorial};
use qstate_core::states::*;
use qstate_core::Error;
use std::f64::consts::PI;

fn grid10() -> Grid1D {
    Grid1D::new(-10.0, 10.0, 2001).unwrap()
}

/// Dawson integral e^{-x^2} int_0^x e^{t^2} dt by brute-force quadrature.
fn dawson(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let (ts, ws) = composite_gauss(0.0, x.abs(), 40, 20);
    x.signum() * ts.iter().zip(&ws).map(|(t, w)| w * (t * t - x * x).exp()).sum::<f64>()
}

#[test]
fn wronskian_is_constant() {
    let xs = grid10().points();
    for n in 0..=12 {
        let w = wronskian(n, &xs);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(sd < 1e-8, "n={n} sd={sd}");
        assert_abs_diff_eq!(mean, 2.0 / PI, epsilon = 1e-8);
    }
}

#[test]
fn irregular_ground_solution_matches_dawson_form() {
    // phi_0 = 2 pi^{-3/4} e^{x^2/2} D(x)
    let grid = Grid1D::new(-9.0, 9.0, 181).unwrap();
    let (psi, phi) = regular_irregular_pair(0, &grid).unwrap();
    for (i, x) in grid.points().iter().enumerate() {
        let want = 2.0 * PI.powf(-0.75) * (0.5 * x * x).exp() * dawson(*x);
        assert!((phi[i] - want).abs() <= 1e-9 * want.abs().max(1.0), "x={x}: {} vs {want}", phi[i]);
        assert_abs_diff_eq!(psi[i], PI.powf(-0.25) * (-0.5 * x * x).exp(), epsilon = 1e-15);
    }
    // growth like the complementary Gaussian e^{x^2/2}/x
    let ratio = |x: f64| phi[grid.points().iter().position(|&p| (p - x).abs() < 1e-9).unwrap()] * x / (0.5 * x * x).exp();
    assert_abs_diff_eq!(ratio(9.0), PI.powf(-0.75), epsilon = 0.01 * PI.powf(-0.75));
}

#[test]
fn regular_solution_matches_hermite_closed_form() {
    let grid = grid10();
    for n in [0, 3, 7, 12] {
        let (psi, _) = regular_irregular_pair(n, &grid).unwrap();
        for (i, &x) in grid.points().iter().enumerate().step_by(37) {
            let h = hermite_polynomials(n, x)[n];
            let norm = (-(0.5 * (n as f64 * 2f64.ln() + ln_factorial(n)) + 0.25 * PI.ln())).exp();
            assert_abs_diff_eq!(psi[i], h * (-0.5 * x * x).exp() * norm, epsilon = 1e-9);
            assert_abs_diff_eq!(psi[i], qstate_core::special::oscillator_eigenfunction(n, x), epsilon = 1e-9);
        }
    }
}

#[test]
fn narrow_grid_is_rejected() {
    let grid = Grid1D::new(-5.0, 5.0, 101).unwrap();
    assert!(matches!(regular_irregular_pair(6, &grid), Err(Error::GridTooNarrow { .. })));
    assert!(matches!(pattern_function_table(6, &grid), Err(Error::GridTooNarrow { .. })));
}

#[test]
fn orthonormality_with_g_functions() {
    let grid = grid10();
    let table = pattern_function_table(8, &grid).unwrap();
    assert!(table.max_asymmetry() < 1e-10);
    let w = grid.trapezoid_weights();
    let xs = grid.points();
    for m in 0..=8usize {
        for n in 0..=8usize {
            for mp in 0..=8usize {
                let np = mp as i64 - (m as i64 - n as i64);
                if np < 0 || np > 8 {
                    continue;
                }
                let g = g_values(mp, np as usize, &xs);
                let s: f64 = PI * table.get(m, n).iter().zip(&g).zip(&w).map(|((f, g), w)| f * g * w).sum::<f64>();
                let want = if m == mp { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-6, "({m},{n}) vs ({mp},{np}): {s}");
            }
        }
    }
}

#[test]
fn diagonal_pattern_function_shape() {
    let grid = grid10();
    let table = pattern_function_table(4, &grid).unwrap();
    let xs = grid.points();
    let f44 = table.get(4, 4);
    let bound = 2.0 / PI + 0.05;
    for (x, v) in xs.iter().zip(f44) {
        if x.abs() < turning_point(4) {
            assert!(v.abs() <= bound, "x={x} f={v}");
        }
    }
    let at = |x: f64| xs.iter().position(|&p| (p - x).abs() < 1e-9).unwrap();
    for n in 0..=4 {
        let f = table.get(n, n);
        let r = (f[at(8.0)] * 64.0).abs() / (f[at(6.0)] * 36.0).abs();
        assert!(r > 0.5 && r < 2.0, "n={n} ratio {r}");
    }
}

#[test]
fn compensated_kernels() {
    let grid = grid10();
    let plain = pattern_function_table(5, &grid).unwrap();
    let eta1 = eta_compensated_table(5, &grid, 1.0).unwrap();
    assert_eq!(plain.values, eta1.values);
    // the z-integral route at eta = 1 reproduces the ODE route
    let by_z = compensated_kernel_by_z(5, &grid, 1.0).unwrap();
    for m in 0..=5 {
        for n in 0..=5 {
            for (a, b) in plain.get(m, n).iter().zip(by_z.get(m, n)) {
                assert!((a - b).abs() < 1e-6, "({m},{n}) {a} vs {b}");
            }
        }
    }
    assert!(matches!(eta_compensated_table(5, &grid, 0.5), Err(Error::EtaOutOfRange(_))));
    let mut last = plain.sup_norm();
    for eta in [0.9, 0.8, 0.7, 0.6] {
        let s = eta_compensated_table(5, &grid, eta).unwrap().sup_norm();
        assert!(s > last, "eta={eta}: {s} <= {last}");
        last = s;
    }
}

/// rho_mn = sum_k (pi/N) e^{i(m-n) phi_k} int K_mn(x) p(x, phi_k) dx
fn sample_matrix(table: &PatternTable, dist: &QuadratureDistribution, n_max: usize) -> Vec<Vec<C>> {
    let w = dist.grid.trapezoid_weights();
    let nph = dist.phases.len() as f64;
    (0..=n_max)
        .map(|m| {
            (0..=n_max)
                .map(|n| {
                    dist.phases
                        .iter()
                        .zip(&dist.values)
                        .map(|(&phi, row)| {
                            let s: f64 = table.get(m, n).iter().zip(row).zip(&w).map(|((f, p), w)| f * p * w).sum();
                            C::from_polar(PI / nph * s, (m as f64 - n as f64) * phi)
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[test]
fn compensated_sampling_recovers_fock_state() {
    let rho = build_state(&StateKind::Fock { n: 1 }, 1).unwrap();
    let eta = 0.8;
    let grid = Grid1D::new(-12.0, 12.0, 2401).unwrap();
    let table = eta_compensated_table(3, &grid, eta).unwrap();
    let phases = equidistant_phases(8);
    let lossy = loss_map(&rho, eta).unwrap();
    let xs = grid.points();
    let values = phases.iter().map(|&phi| xs.iter().map(|&x| smeared_density(&lossy, eta, x, phi)).collect()).collect();
    let dist = QuadratureDistribution { phases: phases.clone(), grid, values, eta, kind: DistributionKind::Exact };
    let est = sample_matrix(&table, &dist, 3);
    for m in 0..=3 {
        for n in 0..=3 {
            let want = if m == 1 && n == 1 { 1.0 } else { 0.0 };
            assert!((est[m][n] - C::new(want, 0.0)).norm() < 1e-5, "({m},{n}) {}", est[m][n]);
        }
    }
}

#[test]
fn completeness_and_mutual_inverse() {
    let rho = build_state(&StateKind::Cat { re: 0.9, im: 0.3, parity: 1 }, 10).unwrap_or_else(|_| {
        build_state_with_tolerance(&StateKind::Cat { re: 0.9, im: 0.3, parity: 1 }, 10, 1e-6).unwrap()
    });
    let grid = grid10();
    let xs = grid.points();
    let phases = equidistant_phases(24);
    // sum_mn g_mn e^{-i(m-n)phi} rho_mn reproduces p(x, phi)
    let exact = quadrature_distribution(&rho, &phases, &grid);
    for (k, &phi) in phases.iter().enumerate().step_by(5) {
        for i in (0..xs.len()).step_by(97) {
            let mut s = C::new(0.0, 0.0);
            for m in 0..=10 {
                for n in 0..=10 {
                    s += rho.get(m, n) * C::from_polar(g_values(m, n, &xs[i..=i])[0], -((m as f64 - n as f64) * phi));
                }
            }
            assert_abs_diff_eq!(s.re, exact.values[k][i], epsilon = 1e-12);
        }
    }
    let table = pattern_function_table(10, &grid).unwrap();
    let est = sample_matrix(&table, &exact, 10);
    for m in 0..=10 {
        for n in 0..=10 {
            assert!((est[m][n] - rho.get(m, n)).norm() < 1e-6, "({m},{n})");
        }
    }
}

#[test]
fn table_is_deterministic() {
    let grid = Grid1D::new(-9.0, 9.0, 501).unwrap();
    let a = pattern_function_table(6, &grid).unwrap();
    let b = pattern_function_table(6, &grid).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fourier_kernel_properties() {
    let zs: Vec<f64> = (1..40).map(|i| 0.17 * i as f64).collect();
    let neg: Vec<f64> = zs.iter().map(|z| -z).collect();
    for (m, n) in [(0, 0), (1, 0), (2, 5), (4, 1), (3, 3)] {
        let a = fourier_kernel(m, n, &zs);
        let b = fourier_kernel(m, n, &neg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y.conj()).norm() < 1e-14);
        }
    }
    // diagonal shape equals the Laguerre kernel S_n^(0) up to the factor pi
    for n in 0..5 {
        let f = fourier_kernel(n, n, &zs);
        for (z, v) in zs.iter().zip(&f) {
            assert_abs_diff_eq!(v.re / PI, characteristic_kernel_laguerre(n, 0, *z), epsilon = 1e-14);
        }
    }
    // odd k: the Laguerre form carries an extra 1/sqrt2
    for (n, k) in [(0, 1), (2, 1), (1, 3), (0, 2), (3, 4)] {
        for z in [0.3, 1.1, 2.7] {
            let factor = if k % 2 == 1 { std::f64::consts::SQRT_2 } else { 1.0 };
            assert_abs_diff_eq!(characteristic_kernel_laguerre(n, k, z) * factor, characteristic_kernel(n, k, z), epsilon = 1e-14);
        }
    }
}

#[test]
fn fourier_kernel_matches_numerical_transform() {
    // f_00 decays like -(1/pi)(x^-2 + 1.5 x^-4); subtract rational terms with known transforms
    let grid = Grid1D::new(-30.0, 30.0, 12001).unwrap();
    let xs = grid.points();
    let w = grid.trapezoid_weights();
    let f = pattern_values(0, 0, &xs);
    for z in [0.4, 1.0, 2.0, 3.5] {
        let mut s = C::new(0.0, 0.0);
        for i in 0..xs.len() {
            let x = xs[i];
            let h = -1.0 / (PI * (1.0 + x * x)) - 2.5 / (PI * (1.0 + x * x).powi(2));
            s += C::from_polar(w[i] * (f[i] - h), z * x);
        }
        let h_ft = -(-z).exp() - 1.25 * (1.0 + z) * (-z).exp();
        let total = s + h_ft;
        let want = fourier_kernel(0, 0, &[z])[0];
        assert!((total - want).norm() < 1e-6, "z={z}: {total} vs {want}");
    }
    // off-diagonal: integrate by parts, f~ = -i z int e^{izx} psi_a phi_b dx, tails O(L^-2)
    for (m, n) in [(1, 0), (0, 2), (1, 3)] {
        let (a, b) = (m.min(n), m.max(n));
        let (h, _) = scaled_irregular(b, &xs);
        let prod: Vec<f64> = xs
            .iter()
            .zip(&h)
            .map(|(&x, &hv)| qstate_core::special::scaled_hermite_functions(a, x)[a] * hv)
            .collect();
        for z in [0.8, 1.6] {
            let s: C = (0..xs.len()).map(|i| C::from_polar(w[i] * prod[i], z * xs[i])).sum();
            let num = C::new(0.0, -z) * s;
            let want = fourier_kernel(m, n, &[z])[0];
            assert!((num - want).norm() < 3e-3, "({m},{n}) z={z}: {num} vs {want}");
        }
    }
}

#[test]
fn phase_moment_kernel_limits() {
    let grid = Grid1D::new(-6.0, 6.0, 601).unwrap();
    let (kernel, values) = phase_moment_kernel(1, &grid, DEFAULT_N_SUM, DEFAULT_KERNEL_TOLERANCE).unwrap();
    let xs = grid.points();
    for (x, v) in xs.iter().zip(&values) {
        if (x.abs() - 4.0).abs() < 1e-9 {
            assert!((v - 0.25 * x.signum()).abs() < 0.02, "x={x} K={v}");
        }
    }
    assert!(kernel.tail < DEFAULT_KERNEL_TOLERANCE);
    for k in 1..=4 {
        let (_, v) = phase_moment_kernel(k, &grid, 24, 1.0).unwrap();
        let n = v.len();
        for i in 0..n {
            let mirror = v[n - 1 - i];
            if k % 2 == 1 {
                assert_abs_diff_eq!(v[i], -mirror, epsilon = 1e-9);
            } else if xs[i] != 0.0 {
                assert_abs_diff_eq!(v[i], mirror, epsilon = 1e-9);
            }
        }
    }
    assert!(matches!(phase_moment_kernel(1, &grid, 4, 1e-4), Err(Error::NotConverged(_))));
}

#[test]
fn phase_moment_sampling_of_coherent_state() {
    let rho = build_state(&StateKind::Coherent { re: 2.0, im: 0.0 }, 40).unwrap();
    let grid = Grid1D::new(-10.0, 10.0, 2001).unwrap();
    let phases = equidistant_phases(48);
    let dist = quadrature_distribution(&rho, &phases, &grid);
    let w = grid.trapezoid_weights();
    for k in 1..=3 {
        let (_, kv) = phase_moment_kernel(k, &grid, DEFAULT_N_SUM, DEFAULT_KERNEL_TOLERANCE).unwrap();
        // int_0^{2pi} = 2 int_0^pi
        let est: C = phases
            .iter()
            .zip(&dist.values)
            .map(|(&phi, row)| {
                let s: f64 = kv.iter().zip(row).zip(&w).map(|((a, b), c)| a * b * c).sum();
                C::from_polar(2.0 * PI / phases.len() as f64 * s, k as f64 * phi)
            })
            .sum();
        let want = exponential_phase_moments(&rho, k);
        assert!((est - want).norm() < 1e-3, "k={k}: {est} vs {want}");
    }
}
