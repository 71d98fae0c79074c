//! Linear inversion (weighted least squares, Tikhonov, truncated SVD with
//! L-curve selection) and maximum-entropy state estimation.
//!
//! Complex models are solved directly in complex arithmetic through the SVD
//! of the whitened design matrix W^{1/2} A.

use crate::error::{Error, Result};
use crate::states::DensityMatrix;
use crate::Warned;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

type C = Complex64;

pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Uniform,
    Diagonal(DVector<f64>),
    /// Hermitian positive definite inverse noise covariance.
    Full(DMatrix<C>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<C>,
    pub weights: Weights,
}

impl LinearModel {
    pub fn new(a: DMatrix<C>) -> Self {
        LinearModel { a, weights: Weights::Uniform }
    }

    pub fn real(a: DMatrix<f64>) -> Self {
        Self::new(a.map(|v| C::new(v, 0.0)))
    }

    pub fn with_weights(mut self, weights: Weights) -> Self {
        self.weights = weights;
        self
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    fn check(&self, y: &DVector<C>) -> Result<()> {
        if y.len() != self.rows() {
            return Err(Error::DimensionMismatch(self.rows(), y.len()));
        }
        if self.rows() < self.cols() {
            return Err(Error::InvalidParameter(format!(
                "model has {} rows for {} unknowns",
                self.rows(),
                self.cols()
            )));
        }
        match &self.weights {
            Weights::Uniform => {}
            Weights::Diagonal(w) => {
                if w.len() != self.rows() {
                    return Err(Error::DimensionMismatch(self.rows(), w.len()));
                }
                if w.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidParameter("weights must be nonnegative".into()));
                }
            }
            Weights::Full(w) => {
                if w.nrows() != self.rows() || w.ncols() != self.rows() {
                    return Err(Error::DimensionMismatch(self.rows(), w.nrows()));
                }
            }
        }
        Ok(())
    }

    /// (W^{1/2} A, W^{1/2} y) with W^{1/2} = L^dag for W = L L^dag.
    fn whitened(&self, y: &DVector<C>) -> Result<(DMatrix<C>, DVector<C>)> {
        self.check(y)?;
        match &self.weights {
            Weights::Uniform => Ok((self.a.clone(), y.clone())),
            Weights::Diagonal(w) => {
                let mut a = self.a.clone();
                let mut b = y.clone();
                for i in 0..a.nrows() {
                    let s = w[i].sqrt();
                    a.row_mut(i).scale_mut(s);
                    b[i] *= s;
                }
                Ok((a, b))
            }
            Weights::Full(w) => {
                let chol = w
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::InvalidParameter("weight matrix is not positive definite".into()))?;
                let lt = chol.l().adjoint();
                Ok((&lt * &self.a, &lt * y))
            }
        }
    }
}

/// Singular triplets of the whitened model, singular values descending.
struct Decomposition {
    u: DMatrix<C>,
    sigma: Vec<f64>,
    v_t: DMatrix<C>,
    b: DVector<C>,
}

impl Decomposition {
    fn new(model: &LinearModel, y: &DVector<C>) -> Result<Self> {
        let (a, b) = model.whitened(y)?;
        let svd = a.svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
        let u_full = svd.u.expect("u requested");
        let vt_full = svd.v_t.expect("v_t requested");
        let u = DMatrix::from_columns(&order.iter().map(|&i| u_full.column(i).into_owned()).collect::<Vec<_>>());
        let v_t = DMatrix::from_rows(&order.iter().map(|&i| vt_full.row(i).into_owned()).collect::<Vec<_>>());
        let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
        Ok(Decomposition { u, sigma, v_t, b })
    }

    /// Normal-matrix condition number (sigma_max / sigma_min)^2.
    fn condition(&self) -> f64 {
        let hi = self.sigma.first().copied().unwrap_or(0.0);
        let lo = self.sigma.last().copied().unwrap_or(0.0);
        if lo == 0.0 {
            f64::INFINITY
        } else {
            (hi / lo).powi(2)
        }
    }

    /// sum_i phi_i (u_i^dag b / sigma_i) v_i.
    fn filtered(&self, filter: impl Fn(f64) -> f64) -> DVector<C> {
        let n = self.v_t.ncols();
        let mut x = DVector::<C>::zeros(n);
        for (i, &s) in self.sigma.iter().enumerate() {
            let f = filter(s);
            if f == 0.0 || s == 0.0 {
                continue;
            }
            let coef = self.u.column(i).dotc(&self.b) * (f / s);
            for j in 0..n {
                x[j] += coef * self.v_t[(i, j)].conj();
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub estimate: DVector<C>,
    /// (A^dag W A)^{-1}
    pub covariance: DMatrix<C>,
    pub condition: f64,
    /// Unweighted residual norm |y - A f|.
    pub residual_norm: f64,
}

impl LeastSquaresFit {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.covariance.nrows()).map(|i| self.covariance[(i, i)].re.max(0.0).sqrt()).collect()
    }
}

fn residual(model: &LinearModel, f: &DVector<C>, y: &DVector<C>) -> f64 {
    (y - &model.a * f).norm()
}

pub fn least_squares(model: &LinearModel, y: &DVector<C>) -> Result<LeastSquaresFit> {
    least_squares_with_limit(model, y, CONDITION_LIMIT)
}

pub fn least_squares_with_limit(model: &LinearModel, y: &DVector<C>, limit: f64) -> Result<LeastSquaresFit> {
    let d = Decomposition::new(model, y)?;
    let condition = d.condition();
    if !(condition < limit) {
        return Err(Error::NearSingular(condition));
    }
    let estimate = d.filtered(|_| 1.0);
    let n = model.cols();
    let mut covariance = DMatrix::<C>::zeros(n, n);
    for (i, &s) in d.sigma.iter().enumerate() {
        let v = d.v_t.row(i).adjoint();
        covariance += &v * v.adjoint() * C::new(1.0 / (s * s), 0.0);
    }
    let residual_norm = residual(model, &estimate, y);
    Ok(LeastSquaresFit { estimate, covariance, condition, residual_norm })
}

/// Condition number of the normal matrix A^dag W A.
pub fn condition_number(model: &LinearModel) -> Result<f64> {
    let y = DVector::<C>::zeros(model.rows());
    Ok(Decomposition::new(model, &y)?.condition())
}

/// Minimizer of |W^{1/2}(y - A f)|^2 + lambda^2 |f|^2; uniform weights give
/// (lambda^2 I + A^dag A)^{-1} A^dag y.
pub fn tikhonov(model: &LinearModel, y: &DVector<C>, lambda: f64) -> Result<DVector<C>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} must be >= 0")));
    }
    let d = Decomposition::new(model, y)?;
    let l2 = lambda * lambda;
    Ok(d.filtered(|s| s * s / (s * s + l2)))
}

/// Truncated SVD: singular values of W^{1/2} A below sigma0 are dropped.
pub fn svd_pseudoinverse(model: &LinearModel, y: &DVector<C>, sigma0: f64) -> Result<DVector<C>> {
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma0 = {sigma0} must be > 0")));
    }
    let d = Decomposition::new(model, y)?;
    if d.sigma.iter().all(|&s| s < sigma0) {
        return Err(Error::AllModesCut(sigma0));
    }
    Ok(d.filtered(|s| if s >= sigma0 { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Regularization {
    None,
    Tikhonov(f64),
    SvdCut(f64),
}

impl Regularization {
    pub fn tag(&self) -> String {
        match self {
            Regularization::None => "least_squares".into(),
            Regularization::Tikhonov(l) => format!("tikhonov(lambda={l})"),
            Regularization::SvdCut(s) => format!("svd(sigma0={s})"),
        }
    }
}

/// Dispatch to the chosen solver. Covariance is only available without
/// regularization.
pub fn solve(model: &LinearModel, y: &DVector<C>, reg: &Regularization) -> Result<(DVector<C>, Option<LeastSquaresFit>)> {
    match reg {
        Regularization::None => {
            let fit = least_squares(model, y)?;
            Ok((fit.estimate.clone(), Some(fit)))
        }
        Regularization::Tikhonov(l) => Ok((tikhonov(model, y, *l)?, None)),
        Regularization::SvdCut(s) => Ok((svd_pseudoinverse(model, y, *s)?, None)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LCurve {
    pub lambdas: Vec<f64>,
    pub solution_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
    /// Signed curvature in (log residual, log norm); positive at an L corner.
    pub curvature: Vec<f64>,
    pub best_index: usize,
    pub lambda_star: f64,
}

/// Pick lambda at the sharpest convex corner of the log-log L-curve. With no
/// convex corner (consistent data) the smallest lambda is returned.
pub fn l_curve_select(model: &LinearModel, y: &DVector<C>, lambdas: &[f64]) -> Result<Warned<LCurve>> {
    if lambdas.len() < 8 {
        return Err(Error::InvalidParameter("L-curve needs at least 8 lambda values".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) || lambdas[0] <= 0.0 {
        return Err(Error::InvalidParameter("lambda grid must be positive and increasing".into()));
    }
    let d = Decomposition::new(model, y)?;
    let mut solution_norms = Vec::with_capacity(lambdas.len());
    let mut residual_norms = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let f = d.filtered(|s| s * s / (s * s + l * l));
        solution_norms.push(f.norm());
        residual_norms.push(residual(model, &f, y));
    }
    // residual part outside the range of A
    let coefs: Vec<f64> = (0..d.sigma.len()).map(|i| d.u.column(i).dotc(&d.b).norm_sqr()).collect();
    let outside = (d.b.norm_squared() - coefs.iter().sum::<f64>()).max(0.0);
    let n = lambdas.len();
    let curvature: Vec<f64> = lambdas.iter().map(|&l| log_curvature(&d.sigma, &coefs, outside, l)).collect();
    let mut warnings = Vec::new();
    let peak = (0..n).filter(|&i| curvature[i] > 0.0).max_by(|&a, &b| curvature[a].partial_cmp(&curvature[b]).unwrap());
    let best_index = match peak {
        Some(i) => {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| curvature[j].abs()).collect();
            let mean = others.iter().sum::<f64>() / others.len().max(1) as f64;
            if curvature[i] < 2.0 * mean {
                warnings.push(format!("FlatCurve: curvature peak {:.3e} is less than twice the mean {:.3e}", curvature[i], mean));
            }
            i
        }
        None => {
            warnings.push("FlatCurve: no convex corner; smallest lambda selected".into());
            0
        }
    };
    Ok(Warned {
        value: LCurve {
            lambdas: lambdas.to_vec(),
            solution_norms,
            residual_norms,
            curvature,
            best_index,
            lambda_star: lambdas[best_index],
        },
        warnings,
    })
}

/// Closed-form curvature of (log |r|, log |f|) at lambda from the filter
/// factors; coefs are |u_i^dag b|^2 of the whitened data.
fn log_curvature(sigma: &[f64], coefs: &[f64], outside: f64, lambda: f64) -> f64 {
    let l2 = lambda * lambda;
    let (mut eta, mut rho, mut deta) = (0.0, outside, 0.0);
    for (&s, &b2) in sigma.iter().zip(coefs) {
        if s == 0.0 {
            rho += b2;
            continue;
        }
        let f = s * s / (s * s + l2);
        eta += f * f * b2 / (s * s);
        rho += (1.0 - f) * (1.0 - f) * b2;
        deta -= 4.0 / lambda * (1.0 - f) * f * f * b2 / (s * s);
    }
    if eta <= 0.0 || rho <= 0.0 || deta == 0.0 {
        return 0.0;
    }
    let num = l2 * deta * rho + 2.0 * lambda * eta * rho + l2 * l2 * eta * deta;
    -2.0 * eta * rho / deta * num / (l2 * eta * eta + rho * rho).powf(1.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxEntropyResult {
    pub rho: DensityMatrix,
    pub multipliers: Vec<f64>,
    /// max_i |Tr(rho A_i) - a_i|
    pub residual: f64,
    pub iterations: usize,
    /// True when the least-squares misfit fallback produced the result.
    pub fallback: bool,
}

const MAXENT_TOL: f64 = 1e-10;
const MAXENT_ITER: usize = 200;
const MAX_HALVINGS: usize = 30;

/// Gibbs-like state exp(-sum l_i A_i)/Z with its eigen-decomposition.
struct Gibbs {
    probs: Vec<f64>,
    energies: Vec<f64>,
    vectors: DMatrix<C>,
    ln_z: f64,
}

impl Gibbs {
    fn new(obs: &[DMatrix<C>], lambda: &[f64], dim: usize) -> Self {
        let mut h = DMatrix::<C>::zeros(dim, dim);
        for (a, &l) in obs.iter().zip(lambda) {
            h += a * C::new(l, 0.0);
        }
        let h = (&h + h.adjoint()) * C::new(0.5, 0.0);
        let eig = SymmetricEigen::new(h);
        let energies: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let e0 = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = energies.iter().map(|e| (-(e - e0)).exp()).collect();
        let z: f64 = weights.iter().sum();
        Gibbs {
            probs: weights.iter().map(|w| w / z).collect(),
            energies,
            vectors: eig.eigenvectors,
            ln_z: z.ln() - e0,
        }
    }

    fn matrix(&self) -> DMatrix<C> {
        let d = self.probs.len();
        let mut diag = DMatrix::<C>::zeros(d, d);
        for i in 0..d {
            diag[(i, i)] = C::new(self.probs[i], 0.0);
        }
        &self.vectors * diag * self.vectors.adjoint()
    }

    fn expectations(&self, obs_eig: &[DMatrix<C>]) -> Vec<f64> {
        obs_eig.iter().map(|a| (0..self.probs.len()).map(|k| self.probs[k] * a[(k, k)].re).sum()).collect()
    }

    /// Kubo-Mori covariance of the observables (Hessian of ln Z).
    fn kubo_mori(&self, obs_eig: &[DMatrix<C>], means: &[f64]) -> DMatrix<f64> {
        let d = self.probs.len();
        let m = obs_eig.len();
        let mut w = DMatrix::<f64>::zeros(d, d);
        for k in 0..d {
            for l in 0..d {
                let (pk, pl) = (self.probs[k], self.probs[l]);
                let de = self.energies[l] - self.energies[k];
                w[(k, l)] = if de.abs() < 1e-12 || pk == pl {
                    pk
                } else {
                    (pk - pl) / de
                };
            }
        }
        let mut h = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut acc = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        let ai = obs_eig[i][(k, l)] - if k == l { C::new(means[i], 0.0) } else { C::new(0.0, 0.0) };
                        let aj = obs_eig[j][(l, k)] - if k == l { C::new(means[j], 0.0) } else { C::new(0.0, 0.0) };
                        acc += w[(k, l)] * (ai * aj).re;
                    }
                }
                h[(i, j)] = acc;
                h[(j, i)] = acc;
            }
        }
        h
    }
}

fn in_eigenbasis(obs: &[DMatrix<C>], g: &Gibbs) -> Vec<DMatrix<C>> {
    obs.iter().map(|a| g.vectors.adjoint() * a * &g.vectors).collect()
}

/// Entropy maximization under Tr(rho A_i) = a_i by damped Newton on the
/// convex dual ln Z(l) + sum l_i a_i. When the dual does not converge the
/// squared misfit is minimized instead (Levenberg-Marquardt).
pub fn max_entropy_estimate(observables: &[DMatrix<C>], means: &[f64], dim: usize) -> Result<Warned<MaxEntropyResult>> {
    if observables.len() != means.len() {
        return Err(Error::DimensionMismatch(observables.len(), means.len()));
    }
    if observables.len() > 16 || dim == 0 || dim > 32 {
        return Err(Error::InvalidParameter("max entropy supports at most 16 observables and dim <= 32".into()));
    }
    for a in observables {
        if a.nrows() != dim || a.ncols() != dim {
            return Err(Error::DimensionMismatch(dim, a.nrows()));
        }
        if (a - a.adjoint()).iter().any(|v| v.norm() > 1e-12 * (1.0 + a.norm())) {
            return Err(Error::InvalidParameter("observables must be Hermitian".into()));
        }
    }
    let m = observables.len();
    let mut lambda = vec![0.0; m];
    let dual = |l: &[f64]| -> f64 {
        let g = Gibbs::new(observables, l, dim);
        g.ln_z + l.iter().zip(means).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut converged = m == 0;
    let mut grad_norm = 0.0;
    while !converged && iterations < MAXENT_ITER {
        iterations += 1;
        let g = Gibbs::new(observables, &lambda, dim);
        let obs_eig = in_eigenbasis(observables, &g);
        let ex = g.expectations(&obs_eig);
        let grad: Vec<f64> = means.iter().zip(&ex).map(|(a, e)| a - e).collect();
        grad_norm = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if grad_norm < MAXENT_TOL {
            converged = true;
            break;
        }
        let mut h = g.kubo_mori(&obs_eig, &ex);
        let scale = h.diagonal().iter().fold(0.0f64, |a, v| a.max(*v)).max(1e-300);
        for i in 0..m {
            h[(i, i)] += 1e-12 * scale;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&grad)),
            None => DVector::from_column_slice(&grad) * (1.0 / scale),
        };
        let f0 = dual(&lambda);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = lambda.iter().zip(step.iter()).map(|(l, s)| l - t * s).collect();
            let f1 = dual(&trial);
            if f1.is_finite() && f1 <= f0 + 1e-14 * f0.abs().max(1.0) {
                lambda = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || lambda.iter().any(|l| l.abs() > 1e8) {
            break;
        }
    }
    let fallback = !converged;
    if fallback {
        warnings.push(format!(
            "dual Newton did not converge after {iterations} iterations (gradient {grad_norm:.3e}); minimizing misfit instead"
        ));
        let (l, its) = misfit_fit(observables, means, dim, &lambda)?;
        lambda = l;
        iterations += its;
    }
    let g = Gibbs::new(observables, &lambda, dim);
    let ex = g.expectations(&in_eigenbasis(observables, &g));
    let residual = means.iter().zip(&ex).fold(0.0f64, |a, (m, e)| a.max((m - e).abs()));
    if fallback {
        warnings.push(format!("constraints reproduced to {residual:.3e}"));
    }
    let rho = DensityMatrix::from_matrix_unchecked(crate::states::hermitian_part(&g.matrix()), "max entropy");
    Ok(Warned { value: MaxEntropyResult { rho, multipliers: lambda, residual, iterations, fallback }, warnings })
}

/// Levenberg-Marquardt on C(l) = sum_i (Tr rho_l A_i - a_i)^2.
fn misfit_fit(observables: &[DMatrix<C>], means: &[f64], dim: usize, start: &[f64]) -> Result<(Vec<f64>, usize)> {
    let m = observables.len();
    let eval = |l: &[f64]| -> (Vec<f64>, DMatrix<f64>) {
        let g = Gibbs::new(observables, l, dim);
        let obs_eig = in_eigenbasis(observables, &g);
        let ex = g.expectations(&obs_eig);
        // d<A_i>/d l_j = -KM_ij
        let jac = -g.kubo_mori(&obs_eig, &ex);
        (ex.iter().zip(means).map(|(e, a)| e - a).collect(), jac)
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut lambda = start.iter().map(|l| if l.is_finite() { l.clamp(-50.0, 50.0) } else { 0.0 }).collect::<Vec<_>>();
    let (mut r, mut jac) = eval(&lambda);
    let mut c0 = cost(&r);
    let mut mu = 1e-3;
    let mut its = 0;
    for _ in 0..500 {
        its += 1;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        if g.amax() < 1e-14 {
            break;
        }
        let mut improved = false;
        for _ in 0..MAX_HALVINGS {
            let mut a = jtj.clone();
            for i in 0..m {
                a[(i, i)] += mu * (1.0 + jtj[(i, i)]);
            }
            let Some(ch) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = ch.solve(&g);
            let trial: Vec<f64> = lambda.iter().zip(step.iter()).map(|(l, s)| l - s).collect();
            let (rt, jt2) = eval(&trial);
            let c1 = cost(&rt);
            if c1.is_finite() && c1 < c0 {
                lambda = trial;
                r = rt;
                jac = jt2;
                c0 = c1;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !c0.is_finite() {
        return Err(Error::SolverDiverged { iterations: its, grad_norm: c0 });
    }
    Ok((lambda, its))
}
