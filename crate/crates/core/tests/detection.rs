use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use proptest::prelude::*;
use qstate_core::detection::*;
use qstate_core::special::binomial;
use qstate_core::states::*;
use qstate_core::Error;
use std::f64::consts::{PI, SQRT_2};

fn thermal_diag(nbar: f64, n_max: usize) -> Vec<f64> {
    (0..=n_max).map(|n| nbar.powi(n as i32) / (1.0 + nbar).powi(n as i32 + 1)).collect()
}

#[test]
fn bernoulli_basics() {
    let p = vec![0.1, 0.2, 0.3, 0.4];
    assert_eq!(bernoulli_transform(&p, 1.0), p);
    let single = bernoulli_transform(&[0.0, 1.0], 0.75);
    assert_abs_diff_eq!(single[0], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(single[1], 0.75, epsilon = 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bernoulli_composes_and_mixes(raw in prop::collection::vec(0.0f64..1.0, 2..15), raw2 in prop::collection::vec(0.0f64..1.0, 15),
                                    e1 in 0.05f64..1.0, e2 in 0.05f64..1.0, lam in 0.0f64..1.0) {
        let s: f64 = raw.iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / s).collect();
        let q: Vec<f64> = { let t: f64 = raw2[..p.len()].iter().sum::<f64>() + 1e-9; raw2[..p.len()].iter().map(|v| (v + 1e-9 / p.len() as f64) / t).collect() };
        let two = bernoulli_transform(&bernoulli_transform(&p, e1), e2);
        let one = bernoulli_transform(&p, e1 * e2);
        for (a, b) in two.iter().zip(&one) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((one.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(one.iter().all(|&v| v >= 0.0));
        let mixed: Vec<f64> = p.iter().zip(&q).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let lhs = bernoulli_transform(&mixed, e1);
        let bp = bernoulli_transform(&p, e1);
        let bq = bernoulli_transform(&q, e1);
        for i in 0..p.len() {
            prop_assert!((lhs[i] - (lam * bp[i] + (1.0 - lam) * bq[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn inverse_bernoulli_matches_matrix_inverse() {
    let p = thermal_diag(1.0, 20);
    let eta = 0.8;
    let forward = bernoulli_transform(&p, eta);
    let inv = inverse_bernoulli(&forward, eta, 20);
    assert!(inv.warnings.is_empty());
    // direct LU solve as an independent route
    let b = bernoulli_matrix(eta, 21, 21);
    let direct = b.lu().solve(&DVector::from_column_slice(&forward)).unwrap();
    for n in 0..=20 {
        assert!((inv.value[n] - p[n]).abs() < 1e-10);
        assert!((inv.value[n] - direct[n]).abs() < 1e-10);
    }
    assert_eq!(inverse_bernoulli(&p, 1.0, 20).value, p);
}

#[test]
fn inverse_bernoulli_is_unstable_at_low_efficiency() {
    let p = thermal_diag(1.0, 20);
    let eta = 0.4;
    let forward = bernoulli_transform(&p, eta);
    let perturbed: Vec<f64> = forward.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 1e-6 } else { -1e-6 }).collect();
    let a = inverse_bernoulli(&forward, eta, 20);
    let b = inverse_bernoulli(&perturbed, eta, 20);
    let amp = a.value.iter().zip(&b.value).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / 1e-6;
    assert!(amp > 1e3, "amplification {amp}");
    assert!(!b.warnings.is_empty());
}

/// Loss as a real beam splitter with vacuum in the second port, then a partial trace.
fn loss_by_beam_splitter(rho: &DensityMatrix, eta: f64) -> DMatrix<C> {
    let n_cut = rho.n_max();
    let vac = DensityMatrix::from_diagonal(&[1.0], "vac").resized(n_cut + 1);
    let two = TwoModeState::product(rho, &vac, n_cut);
    let bs = BeamSplitter::from_transmittance(eta, [0.0, 0.0, 0.0]).unwrap();
    let out = beam_splitter_transform(&two, &bs).unwrap();
    let d = n_cut + 1;
    DMatrix::from_fn(d, d, |m, n| (0..d).map(|k| out.rho[(m * d + k, n * d + k)]).sum())
}

#[test]
fn loss_map_agrees_with_beam_splitter_model() {
    let rho = build_state(&StateKind::Superposition { coefficients: vec![[0.6, 0.0], [0.0, 0.48], [0.64, 0.0]] }, 8).unwrap();
    let eta = 0.65;
    let lossy = loss_map(&rho, eta).unwrap();
    let oracle = loss_by_beam_splitter(&rho, eta);
    for m in 0..9 {
        for n in 0..9 {
            assert!((lossy.get(m, n) - oracle[(m, n)]).norm() < 1e-12, "({m},{n})");
        }
    }
    assert!(lossy.validate().is_ok());
    assert_eq!(loss_map(&rho, 1.0).unwrap().matrix(), rho.matrix());
}

#[test]
fn loss_map_on_diagonal_states() {
    let p = thermal_diag(0.7, 15);
    let s: f64 = p.iter().sum();
    let p: Vec<f64> = p.iter().map(|v| v / s).collect();
    let rho = DensityMatrix::from_diagonal(&p, "diag");
    let lossy = loss_map(&rho, 0.55).unwrap();
    let b = bernoulli_transform(&p, 0.55);
    for n in 0..16 {
        assert_abs_diff_eq!(lossy.get(n, n).re, b[n], epsilon = 1e-12);
    }
}

#[test]
fn loss_map_matches_smeared_quadratures() {
    let rho = build_state(&StateKind::Cat { re: 1.3, im: 0.4, parity: -1 }, 30).unwrap();
    let eta = 0.7;
    let grid = Grid1D::new(-10.0, 10.0, 1024).unwrap();
    let phases = equidistant_phases(5);
    let exact = smeared_quadrature_distribution(&rho, &phases, &grid, eta).unwrap();
    let smeared = smear_quadrature(&quadrature_distribution(&rho, &phases, &grid), eta).unwrap();
    for k in 0..phases.len() {
        for i in 0..grid.n_points {
            assert!((exact.values[k][i] - smeared.values[k][i]).abs() < 1e-8);
        }
    }
    assert_eq!(smeared.eta, eta);
}

#[test]
fn smearing_variances() {
    let vac = build_state(&StateKind::Fock { n: 0 }, 3).unwrap();
    let grid = Grid1D::new(-12.0, 12.0, 2001).unwrap();
    let base = quadrature_distribution(&vac, &[0.0], &grid);
    let var = |d: &QuadratureDistribution| {
        grid.points().iter().zip(&d.values[0]).zip(grid.trapezoid_weights()).map(|((x, p), w)| x * x * p * w).sum::<f64>()
    };
    assert_abs_diff_eq!(var(&smear_quadrature(&base, 0.8).unwrap()), 0.625, epsilon = 1e-10);
    // at eta = 1/2 the kernel is the vacuum distribution itself
    assert_abs_diff_eq!(smearing_variance(0.5), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(var(&smear_quadrature(&base, 0.5).unwrap()), 1.0, epsilon = 1e-10);
    assert_eq!(smear_quadrature(&base, 1.0).unwrap().values, base.values);
}

#[test]
fn loss_semigroup_and_inverse() {
    let rho = build_state(&StateKind::Cat { re: 1.5, im: 0.0, parity: 1 }, 25).unwrap();
    let a = loss_map(&loss_map(&rho, 0.8).unwrap(), 0.6).unwrap();
    let b = loss_map(&rho, 0.48).unwrap();
    assert!(max_norm(&(a.matrix() - b.matrix())) < 1e-10);

    let lossy = loss_map(&rho, 0.7).unwrap();
    let back = inverse_loss_map(&lossy, 0.7).unwrap();
    let cmp = compare_states(&rho, &back.value).unwrap();
    assert!(cmp.fidelity > 1.0 - 1e-8, "{}", cmp.fidelity);

    let small = build_state(&StateKind::Superposition { coefficients: vec![[0.5, 0.0], [0.5, 0.0], [0.5, 0.0], [0.0, 0.5]] }, 4).unwrap();
    let lossy = loss_map(&small, 0.4).unwrap();
    let back = inverse_loss_map(&lossy, 0.4).unwrap();
    assert!(max_norm(&(back.value.matrix() - small.matrix())) < 1e-8);
}

#[test]
fn homodyne_sampling_statistics() {
    let vac = build_state(&StateKind::Fock { n: 0 }, 4).unwrap();
    let ds = sample_homodyne(&vac, &[0.0], 100_000, 1.0, 7).unwrap();
    let xs = &ds.records[0].samples;
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    assert!((var - 0.5).abs() < 0.01, "{var}");
    assert_eq!(ds.scaling, "dm_over_eta_sqrt2_alphaL");

    let again = sample_homodyne(&vac, &[0.0], 100_000, 1.0, 7).unwrap();
    assert_eq!(ds, again);

    let r: f64 = 0.5;
    let sq = build_state(&StateKind::SqueezedVacuum { r, theta: 0.0 }, 40).unwrap();
    let phases: Vec<f64> = (0..8).map(|k| PI * k as f64 / 4.0).collect();
    let ds = sample_homodyne(&sq, &phases, 40_000, 1.0, 3).unwrap();
    for rec in &ds.records {
        let n = rec.samples.len() as f64;
        let v = rec.samples.iter().map(|x| x * x).sum::<f64>() / n;
        let want = 0.5 * ((-2.0 * r).exp() * rec.phi.cos().powi(2) + (2.0 * r).exp() * rec.phi.sin().powi(2));
        assert!((v - want).abs() < 5.0 * want * (2.0 / n).sqrt(), "phi {} var {v} want {want}", rec.phi);
    }
}

#[test]
fn beam_splitter_examples() {
    let one = DensityMatrix::from_diagonal(&[0.0, 1.0], "1").resized(3);
    let vac = DensityMatrix::from_diagonal(&[1.0], "0").resized(3);
    let state = TwoModeState::product(&one, &vac, 2);
    let id = beam_splitter_transform(&state, &BeamSplitter::from_transmittance(1.0, [0.0; 3]).unwrap()).unwrap();
    assert!(max_norm(&(&id.rho - &state.rho)) < 1e-14);
    let half = BeamSplitter::from_transmittance(0.5, [0.3, -0.2, 0.9]).unwrap();
    let out = beam_splitter_transform(&state, &half).unwrap();
    assert_abs_diff_eq!(out.probability(1, 0), 0.5, epsilon = 1e-14);
    assert_abs_diff_eq!(out.probability(0, 1), 0.5, epsilon = 1e-14);

    // Hong-Ou-Mandel
    let one1 = DensityMatrix::from_diagonal(&[0.0, 1.0], "1").resized(3);
    let both = TwoModeState::product(&one1, &one1, 2);
    let out = beam_splitter_transform(&both, &half).unwrap();
    assert_abs_diff_eq!(out.probability(1, 1), 0.0, epsilon = 1e-14);
    assert_abs_diff_eq!(out.probability(2, 0) + out.probability(0, 2), 1.0, epsilon = 1e-14);

    let top = DensityMatrix::from_diagonal(&[0.0, 0.0, 1.0], "2");
    let over = TwoModeState::product(&top, &one1, 2);
    assert!(matches!(beam_splitter_transform(&over, &half), Err(Error::TruncationOverflow)));
}

#[test]
fn beam_splitter_blocks_match_brute_force_exponential() {
    // V = exp(theta (a1^dag a2 - a2^dag a1)) for a real splitter with U = [[c, -s], [s, c]]
    let theta: f64 = 0.37;
    let d = 6;
    let a = annihilation(d);
    let id = DMatrix::<C>::identity(d, d);
    let a1 = a.kronecker(&id);
    let a2 = id.kronecker(&a);
    let gen = (a1.adjoint() * &a2 - a2.adjoint() * &a1) * C::new(-theta, 0.0);
    let v = gen.exp();
    let bs = BeamSplitter { alpha: 0.0, beta: 2.0 * theta, gamma: 0.0, delta: 0.0 };
    let u = bs.matrix();
    assert_abs_diff_eq!(u[1][0].re, theta.sin(), epsilon = 1e-15);
    let blocks = bs.fock_blocks(d - 1);
    for (n, block) in blocks.iter().enumerate() {
        for n1 in 0..=n {
            for j in 0..=n {
                let got = block[(j, n1)];
                let want = v[(j * d + (n - j), n1 * d + (n - n1))];
                assert!((got - want).norm() < 1e-12, "N={n} j={j} n1={n1}: {got} vs {want}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn beam_splitter_conserves_photon_number(t in 0.0f64..1.0, a in 0.0f64..6.0, g in 0.0f64..6.0, dl in 0.0f64..6.0,
                                             re in -0.6f64..0.6, nbar in 0.0f64..0.3) {
        let n_cut = 10;
        let s1 = build_state_with_tolerance(&StateKind::Coherent { re, im: 0.1 }, 5, 1e-3).unwrap().resized(n_cut + 1);
        let s2 = build_state_with_tolerance(&StateKind::Thermal { nbar }, 5, 1e-2).unwrap().resized(n_cut + 1);
        let state = TwoModeState::product(&s1, &s2, n_cut);
        let out = beam_splitter_transform(&state, &BeamSplitter::from_transmittance(t, [a, g, dl]).unwrap()).unwrap();
        let before = state.total_number_distribution();
        let after = out.total_number_distribution();
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn finite_lo_small_cases() {
    let one = build_state(&StateKind::Fock { n: 1 }, 1).unwrap();
    let d = finite_lo_difference_statistics(&one, C::new(0.0, 0.0), 0.75).unwrap();
    assert_eq!(d.support(1e-14), vec![-1, 0, 1]);
    assert_abs_diff_eq!(d.prob(0), 0.25, epsilon = 1e-14);
    assert_abs_diff_eq!(d.prob(1), 0.375, epsilon = 1e-14);

    let vac = build_state(&StateKind::Fock { n: 0 }, 2).unwrap();
    let d = finite_lo_difference_statistics(&vac, C::new(1.2, 0.7), 1.0).unwrap();
    for dm in 0..20 {
        assert_abs_diff_eq!(d.prob(dm), d.prob(-dm), epsilon = 1e-12);
    }
    assert_abs_diff_eq!(d.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
}

#[test]
fn finite_lo_selects_oscillator_phase() {
    // coherent signal: mean of dm / (eta sqrt2 |alpha_L|) tends to <x(phi)> at phi = arg alpha_L
    let a0 = C::new(0.9, 0.4);
    let rho = build_state(&StateKind::Coherent { re: a0.re, im: a0.im }, 20).unwrap();
    for phi in [0.0, 0.8, 2.0] {
        let lo = C::from_polar(30f64.sqrt(), phi);
        let d = finite_lo_difference_statistics(&rho, lo, 1.0).unwrap();
        let mean: f64 = d.probs.iter().enumerate().map(|(i, p)| (d.dm_min + i as i64) as f64 * p).sum::<f64>() / d.scale;
        let want = SQRT_2 * (a0 * C::from_polar(1.0, -phi)).re;
        assert_abs_diff_eq!(mean, want, epsilon = 1e-8);
    }
}

#[test]
fn finite_lo_approaches_smeared_distribution() {
    let rho = build_state(&StateKind::Fock { n: 1 }, 1).unwrap();
    let eta = 0.75;
    let lossy = loss_map(&rho, eta).unwrap();
    let density = |x: f64| smeared_density(&lossy, eta, x, 0.0);
    let grid = Grid1D::new(-8.0, 8.0, 4001).unwrap();
    let mut last_sup = f64::INFINITY;
    let mut last_ks = f64::INFINITY;
    for n in [0.5, 5.0, 10.0] {
        let d = finite_lo_difference_statistics(&rho, C::new(f64::sqrt(n), 0.0), eta).unwrap();
        let sup = d.sup_density_distance(density);
        let ks = d.kolmogorov_distance(density, &grid);
        assert!(sup < last_sup && ks < last_ks, "|alpha_L|^2 = {n}: sup {sup} ks {ks}");
        last_sup = sup;
        last_ks = ks;
    }
    assert!(last_ks < 0.05, "{last_ks}");
}

/// Enumerate all N^n channel assignments of n photons.
fn chopping_by_enumeration(n: usize, nch: usize) -> Vec<f64> {
    let mut p = vec![0.0; n + 1];
    let total = nch.pow(n as u32);
    for code in 0..total {
        let mut hit = vec![false; nch];
        let mut c = code;
        for _ in 0..n {
            hit[c % nch] = true;
            c /= nch;
        }
        p[hit.iter().filter(|&&h| h).count()] += 1.0 / total as f64;
    }
    p
}

#[test]
fn chopping_matches_enumeration() {
    for nch in 1..=6 {
        let t = chopping_matrix(nch, 6).unwrap();
        assert_eq!(t[(0, 0)], 1.0);
        for n in 0..=6 {
            let e = chopping_by_enumeration(n, nch);
            for m in 0..=6 {
                let want = if m <= n { e[m] } else { 0.0 };
                assert_abs_diff_eq!(t[(m, n)], want, epsilon = 1e-12);
            }
            assert_abs_diff_eq!((0..=6).map(|m| t[(m, n)]).sum::<f64>(), 1.0, epsilon = 1e-12);
            if n <= nch {
                let distinct: f64 = (0..n).map(|i| (nch - i) as f64 / nch as f64).product();
                assert_abs_diff_eq!(t[(n, n)], distinct, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn chopping_inversion() {
    let p = vec![0.3, 0.25, 0.2, 0.15, 0.1, 0.0, 0.0, 0.0];
    let t = chopping_matrix(8, 7).unwrap();
    let clicks: Vec<f64> = (t * DVector::from_column_slice(&p)).iter().copied().collect();
    let back = invert_chopping(&clicks, 8).unwrap();
    for n in 0..p.len() {
        assert_abs_diff_eq!(back[n], p[n], epsilon = 1e-10);
    }
}

#[test]
fn displaced_counts() {
    let vac = build_state(&StateKind::Fock { n: 0 }, 3).unwrap();
    let ds = simulate_displaced_counts(&vac, &[C::new(0.0, 0.0)], 1.0, 1000, None, 1).unwrap();
    assert_eq!(ds.records[0].counts[0], 1000);
    assert_eq!(ds.records[0].counts.iter().sum::<u64>(), 1000);

    let one = build_state(&StateKind::Fock { n: 1 }, 1).unwrap();
    let alphas: Vec<C> = (0..8).map(|j| C::from_polar(0.79, 2.0 * PI * j as f64 / 8.0)).collect();
    let shots = 100_000;
    let ds = simulate_displaced_counts(&one, &alphas, 0.9, shots, None, 12).unwrap();
    assert_eq!(ds.records.len(), 8);
    for rec in &ds.records {
        assert_eq!(rec.counts.iter().sum::<u64>(), shots);
        let p = displaced_count_probabilities(&one, rec.alpha, 0.9, None).unwrap();
        // 4 sigma where the normal approximation holds; sparse cells are pooled
        // and held to the same two-sided probability (6.3e-5) with Poisson tails
        let (mut pooled_c, mut pooled_mu) = (0u64, 0.0);
        for (m, &c) in rec.counts.iter().enumerate() {
            let mu = shots as f64 * p[m];
            if mu >= 50.0 {
                let sd = (mu * (1.0 - p[m])).sqrt();
                assert!((c as f64 - mu).abs() <= 4.0 * sd, "m={m}");
            } else {
                pooled_c += c;
                pooled_mu += mu;
            }
        }
        assert!(poisson_tail(pooled_c, pooled_mu) > 6.3e-5, "pooled {pooled_c} vs {pooled_mu}");
    }
    let again = simulate_displaced_counts(&one, &alphas, 0.9, shots, None, 12).unwrap();
    assert_eq!(ds, again);

    let chopped = simulate_displaced_counts(&one, &alphas, 0.9, 5000, Some(4), 2).unwrap();
    assert!(chopped.records.iter().all(|r| r.counts.len() == 5));
    assert!(simulate_displaced_counts(&one, &alphas, 0.9, 10, Some(3), 2).is_err());
}

#[test]
fn rabi_frequency_limits() {
    let w = rabi_frequencies(1, 0.0, 10, 2.0);
    for (n, wn) in w.iter().enumerate() {
        assert_abs_diff_eq!(*wn, 2.0 * ((n + 1) as f64).sqrt(), epsilon = 1e-12);
    }
    let eta: f64 = 0.05;
    let w0 = rabi_frequencies(0, eta, 10, 1.0);
    for (n, wn) in w0.iter().enumerate() {
        assert_abs_diff_eq!(*wn, 1.0 - eta * eta * (n as f64 + 0.5), epsilon = eta.powi(4) * ((n + 1) * (n + 1)) as f64);
    }
}

#[test]
fn rabi_frequencies_match_operator_matrix() {
    // <n| exp(i eta (a + a^dag)) |n+k> from a large truncated matrix exponential
    let dim = 70;
    let a = annihilation(dim);
    for eta in [0.1, 0.3, 0.8] {
        let gen = (&a + a.adjoint()) * C::new(0.0, eta);
        let u = gen.exp();
        for k in 0..4 {
            let w = rabi_frequencies(k, eta, 15, 1.0);
            for n in 0..=15 {
                let elem = u[(n, n + k)];
                // strip the i^k phase
                let stripped = elem * C::new(0.0, -1.0).powi(k as i32);
                assert!(stripped.im.abs() < 1e-10);
                assert_abs_diff_eq!(w[n], stripped.re, epsilon = 1e-10);
                // finite normally ordered sum
                let sum: f64 = (0..=n)
                    .map(|l| {
                        (-eta * eta).powi(l as i32) / (factorial(l) * factorial(l + k)) * factorial(n) / factorial(n - l)
                    })
                    .sum::<f64>();
                let closed = (-eta * eta / 2.0).exp()
                    * eta.powi(k as i32)
                    * (factorial(n + k) / factorial(n)).sqrt()
                    * sum;
                assert!((w[n] - closed).abs() < 1e-10, "k={k} n={n}");
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

#[test]
fn jc_inversion_signals() {
    let times = ProbeConfig::uniform_times(20.0, 401);
    let f2 = build_state(&StateKind::Fock { n: 2 }, 4).unwrap();
    let cfg = ProbeConfig::new(2.0, 1, 0.0, times.clone());
    let sig = simulate_jc_inversion(&f2, &cfg).unwrap();
    assert_abs_diff_eq!(sig.values[0], 1.0, epsilon = 1e-15);
    for (t, v) in times.iter().zip(&sig.values) {
        assert_abs_diff_eq!(*v, (2.0 * 3f64.sqrt() * t).cos(), epsilon = 1e-12);
    }
    let mut dcfg = cfg.clone();
    dcfg.displacement = Some(C::new(0.5, 0.3));
    let sig = simulate_jc_inversion(&f2, &dcfg).unwrap();
    assert_abs_diff_eq!(sig.values[0], 1.0, epsilon = 1e-10);
    assert!(sig.values.iter().all(|v| v.abs() <= 1.0 + 1e-9));
}

#[test]
fn jc_spectrum_recovers_populations() {
    let rho = build_state(&StateKind::Coherent { re: SQRT_2, im: 0.0 }, 25).unwrap();
    let t_max = 3000.0;
    let n_t = 120_001;
    let cfg = ProbeConfig::new(2.0, 1, 0.0, ProbeConfig::uniform_times(t_max, n_t));
    let sig = simulate_jc_inversion(&rho, &cfg).unwrap();
    let omega = rabi_frequencies(1, 0.0, 25, 2.0);
    let dt = t_max / (n_t - 1) as f64;
    for n in 0..8 {
        let (mut num, mut den) = (0.0, 0.0);
        for (t, v) in sig.times.iter().zip(&sig.values) {
            let w = (PI * t / (2.0 * t_max)).cos().powi(2);
            let c = (omega[n] * t).cos();
            num += w * c * v * dt;
            den += w * c * c * dt;
        }
        assert_abs_diff_eq!(num / den, rho.get(n, n).re, epsilon = 1e-3);
    }
}

#[test]
fn pm_difference_signals() {
    let times = ProbeConfig::uniform_times(10.0, 201);
    let mut cfg = ProbeConfig::new(1.0, 1, 0.0, times.clone());
    let real = build_state(&StateKind::Coherent { re: 0.8, im: 0.0 }, 20).unwrap();
    cfg.preparation = Preparation::Coherent { psi: 0.0 };
    let flat = simulate_pm_difference(&real, &cfg).unwrap();
    assert!(flat.values.iter().all(|v| v.abs() < 1e-14));

    let h = 0.5f64.sqrt();
    let sup = build_state(&StateKind::Superposition { coefficients: vec![[h, 0.0], [h, 0.0]] }, 1).unwrap();
    cfg.preparation = Preparation::Coherent { psi: PI / 2.0 };
    let sig = simulate_pm_difference(&sup, &cfg).unwrap();
    for (t, v) in times.iter().zip(&sig.values) {
        assert_abs_diff_eq!(*v, t.sin(), epsilon = 1e-12);
    }

    let rho = build_state(&StateKind::Coherent { re: 0.5, im: 0.7 }, 20).unwrap();
    cfg.k = 2;
    cfg.preparation = Preparation::Coherent { psi: 0.4 };
    let sig = simulate_pm_difference(&rho, &cfg).unwrap();
    let bound: f64 = 2.0 * (0..19).map(|n| rho.get(n, n + 2).norm()).sum::<f64>();
    assert!(sig.values.iter().all(|v| v.abs() <= bound + 1e-12));

    cfg.preparation = Preparation::Incoherent;
    assert!(simulate_pm_difference(&rho, &cfg).is_err());
}

#[test]
fn quadrature_probe_signals() {
    let vac = build_state(&StateKind::Fock { n: 0 }, 3).unwrap();
    let cfg = ProbeConfig::new(0.7, 0, 0.0, ProbeConfig::uniform_times(5.0, 51));
    let (inc, coh) = simulate_quadrature_probe(&vac, &cfg).unwrap();
    assert_abs_diff_eq!(inc.values[0], -1.0, epsilon = 1e-15);
    for (t, v) in inc.times.iter().zip(&inc.values) {
        let z = SQRT_2 * 0.7 * t;
        assert_abs_diff_eq!(*v, -(-z * z / 4.0).exp(), epsilon = 1e-13);
    }
    assert!(coh.values.iter().all(|v| v.abs() < 1e-14));
    let rebuilt = characteristic_from_probe(&inc, &coh).unwrap();
    assert_abs_diff_eq!(rebuilt[10].1.re, (-rebuilt[10].0.powi(2) / 4.0).exp(), epsilon = 1e-13);
}

#[test]
fn probe_channel_tags_round_trip() {
    for ch in [ProbeChannel::Inversion, ProbeChannel::PmDifference { psi: 1.5 }, ProbeChannel::CharacteristicRe, ProbeChannel::CharacteristicIm] {
        assert_eq!(ProbeChannel::from_tag(&ch.tag()).unwrap(), ch);
    }
    assert!(binomial(5, 2) == 10.0);
}

fn max_norm(m: &DMatrix<C>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Probability of a Poisson(mu) count at least as far out as k on its side.
fn poisson_tail(k: u64, mu: f64) -> f64 {
    let pmf = |j: u64| (-mu + j as f64 * mu.ln() - qstate_core::special::ln_factorial(j as usize)).exp();
    if k as f64 >= mu {
        1.0 - (0..k).map(pmf).sum::<f64>()
    } else {
        (0..=k).map(pmf).sum()
    }
}

#[test]
fn multinomial_is_unbiased_over_replications() {
    use rand::SeedableRng;
    let one = build_state(&StateKind::Fock { n: 1 }, 1).unwrap();
    let p = displaced_count_probabilities(&one, C::new(0.79, 0.0), 0.9, None).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let reps = 4000;
    let shots = 20_000u64;
    let mut sums = vec![0.0; p.len()];
    for _ in 0..reps {
        for (s, c) in sums.iter_mut().zip(multinomial(&mut rng, shots, &p)) {
            *s += c as f64;
        }
    }
    for m in 0..8 {
        let mu = shots as f64 * p[m];
        let sd_mean = (mu * (1.0 - p[m]) / reps as f64).sqrt();
        assert!((sums[m] / reps as f64 - mu).abs() < 4.0 * sd_mean, "m={m}");
    }
}
