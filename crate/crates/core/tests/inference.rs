use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use proptest::prelude::*;
use qstate_core::inference::*;
use qstate_core::states::{number_operator, DensityMatrix};
use qstate_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_complex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<C> {
    DMatrix::from_fn(rows, cols, |_, _| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<C> {
    DVector::from_fn(n, |_, _| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn max_diff(a: &DVector<C>, b: &DVector<C>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.norm()))
}

/// Gaussian blur operator with a mild condition number.
fn smoothing_operator(n: usize, width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        let d = (i as f64 - j as f64) / n as f64;
        (-(d * d) / (2.0 * width * width)).exp() / n as f64
    })
}

#[test]
fn exact_data_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_complex(&mut rng, 12, 5);
    let f = random_vec(&mut rng, 5);
    let y = &a * &f;
    let fit = least_squares(&LinearModel::new(a.clone()), &y).unwrap();
    assert!(max_diff(&fit.estimate, &f) < 1e-10);
    assert!(fit.residual_norm < 1e-12);
    let w = DVector::from_fn(12, |i, _| 1.0 + i as f64);
    let fit = least_squares(&LinearModel::new(a).with_weights(Weights::Diagonal(w)), &y).unwrap();
    assert!(max_diff(&fit.estimate, &f) < 1e-10);
}

#[test]
fn square_system_matches_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_complex(&mut rng, 6, 6);
    let y = random_vec(&mut rng, 6);
    let direct = a.clone().lu().solve(&y).unwrap();
    let fit = least_squares(&LinearModel::new(a), &y).unwrap();
    assert!(max_diff(&fit.estimate, &direct) < 1e-10);
}

#[test]
fn singular_normal_matrix_is_refused() {
    let mut a = DMatrix::<f64>::zeros(5, 3);
    for i in 0..5 {
        a[(i, 0)] = 1.0 + i as f64;
        a[(i, 1)] = 2.0 * (1.0 + i as f64);
        a[(i, 2)] = (i * i) as f64;
    }
    let y = DVector::from_element(5, C::new(1.0, 0.0));
    assert!(matches!(least_squares(&LinearModel::real(a), &y), Err(Error::NearSingular(_))));
}

#[test]
fn covariance_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(20, 3, |i, j| ((i + 1) as f64 * 0.3 * (j + 1) as f64).cos());
    let sigma: Vec<f64> = (0..20).map(|i| 0.05 + 0.01 * i as f64).collect();
    let w = DVector::from_iterator(20, sigma.iter().map(|s| 1.0 / (s * s)));
    let model = LinearModel::real(a.clone()).with_weights(Weights::Diagonal(w));
    let f = DVector::from_column_slice(&[0.5, -1.0, 2.0]);
    let y0 = a * &f;
    let reps = 500;
    let mut est = Vec::new();
    let mut reported = None;
    for _ in 0..reps {
        let y = DVector::from_fn(20, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            C::new(y0[i] + sigma[i] * e, 0.0)
        });
        let fit = least_squares(&model, &y).unwrap();
        est.push(fit.estimate.map(|v| v.re));
        reported = Some(fit.covariance);
    }
    let cov = reported.unwrap();
    for j in 0..3 {
        let mean = est.iter().map(|e| e[j]).sum::<f64>() / reps as f64;
        let var = est.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let rel = (var / cov[(j, j)].re - 1.0).abs();
        assert!(rel < 0.2, "component {j}: empirical {var} vs reported {}", cov[(j, j)].re);
    }
}

#[test]
fn tikhonov_limits_and_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_complex(&mut rng, 10, 4);
    let y = random_vec(&mut rng, 10);
    let model = LinearModel::new(a.clone());
    let ls = least_squares(&model, &y).unwrap();
    assert!(max_diff(&tikhonov(&model, &y, 0.0).unwrap(), &ls.estimate) < 1e-10);
    for lambda in [0.1, 1.0, 5.0] {
        let normal = a.adjoint() * &a + DMatrix::<C>::identity(4, 4) * C::new(lambda * lambda, 0.0);
        let direct = normal.lu().solve(&(a.adjoint() * &y)).unwrap();
        assert!(max_diff(&tikhonov(&model, &y, lambda).unwrap(), &direct) < 1e-10);
    }
    assert!(tikhonov(&model, &y, 1e9).unwrap().norm() < 1e-12);
    assert!(matches!(tikhonov(&model, &y, -1.0), Err(Error::InvalidParameter(_))));
}

#[test]
fn svd_cut_minimum_norm_on_rank_deficient_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = random_complex(&mut rng, 8, 2);
    let cmat = random_complex(&mut rng, 2, 4);
    let a = &b * &cmat;
    let y = random_vec(&mut rng, 8);
    // f = C^dag (C C^dag)^{-1} (B^dag B)^{-1} B^dag y
    let inner = (b.adjoint() * &b).lu().solve(&(b.adjoint() * &y)).unwrap();
    let oracle = cmat.adjoint() * (&cmat * cmat.adjoint()).lu().solve(&inner).unwrap();
    let est = svd_pseudoinverse(&LinearModel::new(a), &y, 1e-8).unwrap();
    assert!(max_diff(&est, &oracle) < 1e-9);
}

#[test]
fn svd_cut_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_complex(&mut rng, 9, 5);
    let y = random_vec(&mut rng, 9);
    let model = LinearModel::new(a.clone());
    let ls = least_squares(&model, &y).unwrap();
    let smallest = a.singular_values().min();
    let est = svd_pseudoinverse(&model, &y, 0.5 * smallest).unwrap();
    assert!(max_diff(&est, &ls.estimate) < 1e-9);
    let largest = a.singular_values().max();
    assert!(matches!(svd_pseudoinverse(&model, &y, 2.0 * largest), Err(Error::AllModesCut(_))));
    let mut last = f64::INFINITY;
    for i in 0..30 {
        let s0 = smallest * 0.5 + (largest - smallest) * i as f64 / 30.0;
        let n = svd_pseudoinverse(&model, &y, s0).unwrap().norm();
        assert!(n <= last + 1e-12);
        last = n;
    }
}

#[test]
fn three_solvers_agree_when_well_conditioned() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_complex(&mut rng, 15, 6);
    let y = random_vec(&mut rng, 15);
    let model = LinearModel::new(a.clone());
    let ls = least_squares(&model, &y).unwrap().estimate;
    let tk = tikhonov(&model, &y, 0.0).unwrap();
    let sv = svd_pseudoinverse(&model, &y, 1e-3 * a.singular_values().min()).unwrap();
    assert!(max_diff(&ls, &tk) < 1e-9);
    assert!(max_diff(&ls, &sv) < 1e-9);
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[test]
fn l_curve_noiseless_picks_smallest_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_complex(&mut rng, 12, 5);
    let f = random_vec(&mut rng, 5);
    let y = &a * f;
    let res = l_curve_select(&LinearModel::new(a), &y, &log_grid(1e-6, 10.0, 30)).unwrap();
    assert_eq!(res.value.best_index, 0);
}

struct IllPosed {
    model: LinearModel,
    truth: DVector<C>,
    y: DVector<C>,
}

/// Gaussian blur, truth with SVD coefficients ~ sigma^{1/2} (random signs
/// and sizes), 1% white noise.
fn ill_posed_fixture(seed: u64) -> IllPosed {
    let n = 40;
    let a = smoothing_operator(n, 0.06);
    let svd = a.clone().svd(true, true);
    let v_t = svd.v_t.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut truth = DVector::<C>::zeros(n);
    for i in 0..n {
        let c = svd.singular_values[i].sqrt() * rng.gen_range(-1.0..1.0);
        truth += v_t.row(i).transpose().map(|v| C::new(v * c, 0.0));
    }
    let clean = a.map(|v| C::new(v, 0.0)) * &truth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = 1e-2 * clean.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let y = clean.map(|v: C| {
        let e: f64 = StandardNormal.sample(&mut rng);
        v + C::new(noise * e, 0.0)
    });
    IllPosed { model: LinearModel::real(a), truth, y }
}

#[test]
fn l_curve_corner_is_near_optimal_on_ill_posed_fixture() {
    let fx = ill_posed_fixture(100);
    let grid = log_grid(1e-7, 1.0, 50);
    let curve = l_curve_select(&fx.model, &fx.y, &grid).unwrap().value;
    let errors: Vec<f64> =
        grid.iter().map(|&l| (tikhonov(&fx.model, &fx.y, l).unwrap() - &fx.truth).norm() / fx.truth.norm()).collect();
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let chosen = errors[curve.best_index];
    assert!(chosen <= 1.5 * best, "chosen {chosen} vs best {best} at lambda {}", curve.lambda_star);
    for w in curve.residual_norms.windows(2) {
        assert!(w[1] >= w[0] - 1e-12);
    }
    for w in curve.solution_norms.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

#[test]
fn tikhonov_error_is_u_shaped() {
    let fx = ill_posed_fixture(10);
    let grid = log_grid(1e-8, 10.0, 40);
    let errors: Vec<f64> = grid.iter().map(|&l| (tikhonov(&fx.model, &fx.y, l).unwrap() - &fx.truth).norm()).collect();
    let (imin, _) = errors.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &e)| if e < b.1 { (i, e) } else { b });
    assert!(imin > 0 && imin < grid.len() - 1, "minimum at grid edge {imin}");
}

#[test]
fn l_curve_rejects_short_grid() {
    let fx = ill_posed_fixture(11);
    assert!(l_curve_select(&fx.model, &fx.y, &log_grid(1e-3, 1.0, 5)).is_err());
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

#[test]
fn max_entropy_mean_number_gives_thermal() {
    let dim = 32;
    let res = max_entropy_estimate(&[number_operator(dim)], &[1.0], dim).unwrap().value;
    assert!(!res.fallback);
    let p = res.rho.diagonal();
    for (n, v) in p.iter().enumerate().take(12) {
        assert!((v - 0.5f64.powi(n as i32 + 1)).abs() < 1e-6, "n={n}: {v}");
    }
    res.rho.validate().unwrap();
}

#[test]
fn max_entropy_is_a_constrained_maximum_on_small_space() {
    let dim = 7;
    let res = max_entropy_estimate(&[number_operator(dim)], &[1.3], dim).unwrap().value;
    let p = res.rho.diagonal();
    let s0 = entropy(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..2000 {
        // direction keeping sum p and sum n p fixed
        let mut d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ones = vec![1.0; dim];
        let ns: Vec<f64> = (0..dim).map(|n| n as f64).collect();
        // project out the constraint normals
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let u1: Vec<f64> = ones.iter().map(|v| v / (dim as f64).sqrt()).collect();
        let mut u2: Vec<f64> = ns.iter().zip(&u1).map(|(n, u)| n - dot(&ns, &u1) * u).collect();
        let norm2 = dot(&u2, &u2).sqrt();
        u2.iter_mut().for_each(|v| *v /= norm2);
        let c1 = dot(&d, &u1);
        let c2 = dot(&d, &u2);
        for i in 0..dim {
            d[i] -= c1 * u1[i] + c2 * u2[i];
        }
        let eps = rng.gen_range(1e-4..0.05);
        let q: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
        if q.iter().any(|v| *v < 0.0) {
            continue;
        }
        assert!(entropy(&q) <= s0 + 1e-12);
    }
}

#[test]
fn max_entropy_without_constraints_is_maximally_mixed() {
    let res = max_entropy_estimate(&[], &[], 6).unwrap().value;
    for m in 0..6 {
        for n in 0..6 {
            let want = if m == n { 1.0 / 6.0 } else { 0.0 };
            assert!((res.rho.get(m, n) - C::new(want, 0.0)).norm() < 1e-14);
        }
    }
}

fn quadrature_operators(dim: usize) -> Vec<DMatrix<C>> {
    let a = qstate_core::states::annihilation(dim);
    let x = (&a + a.adjoint()) * C::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let p = (&a - a.adjoint()) * C::new(0.0, std::f64::consts::FRAC_1_SQRT_2);
    vec![x.clone(), p.clone(), &x * &x, &p * &p, number_operator(dim)]
}

#[test]
fn max_entropy_reproduces_constraints_of_known_state() {
    let dim = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let amps: Vec<C> = (0..dim).map(|n| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.6f64.powi(n as i32)).collect();
    let norm = amps.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let pure = DensityMatrix::pure(&amps.iter().map(|v| v / norm).collect::<Vec<_>>(), "random");
    let mixed = DensityMatrix::from_matrix(
        pure.matrix() * C::new(0.7, 0.0) + DMatrix::from_diagonal_element(dim, dim, C::new(0.3 / dim as f64, 0.0)),
        "mixed",
    )
    .unwrap();
    let obs = quadrature_operators(dim);
    let means: Vec<f64> = obs.iter().map(|a| mixed.expectation(a).re).collect();
    let res = max_entropy_estimate(&obs, &means, dim).unwrap().value;
    assert!(!res.fallback);
    assert!(res.residual < 1e-6);
    for (a, m) in obs.iter().zip(&means) {
        assert!((res.rho.expectation(a).re - m).abs() < 1e-6);
    }
    assert!(res.rho.entropy() >= mixed.entropy() - 1e-9);
}

#[test]
fn infeasible_constraints_fall_back_to_misfit() {
    let dim = 5;
    let res = max_entropy_estimate(&[number_operator(dim)], &[-0.5], dim).unwrap();
    assert!(res.value.fallback);
    assert!(!res.warnings.is_empty());
    res.value.rho.validate().unwrap();
    // best attainable mean is the vacuum
    assert!(res.value.rho.mean_photon_number() < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn max_entropy_output_is_a_density_matrix(nbar in 0.05f64..3.0, x in -1.0f64..1.0) {
        let dim = 16;
        let obs = quadrature_operators(dim);
        let res = max_entropy_estimate(&[obs[0].clone(), obs[4].clone()], &[x * nbar.sqrt(), nbar], dim).unwrap();
        prop_assert!(res.value.rho.validate().is_ok());
    }

    #[test]
    fn tikhonov_norm_non_increasing(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_complex(&mut rng, 8, 4);
        let y = random_vec(&mut rng, 8);
        let model = LinearModel::new(a);
        let mut last = f64::INFINITY;
        for l in log_grid(1e-4, 1e2, 25) {
            let n = tikhonov(&model, &y, l).unwrap().norm();
            prop_assert!(n <= last + 1e-12);
            last = n;
        }
    }
}
