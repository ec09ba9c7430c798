//! Conditional-expectation (BLUP) score prediction and the Gaussian
//! predictive distributions it induces for scores and trajectories.
//!
//! For a subject with centred observations `x = X_i - mu(T_i)`,
//!
//! ```text
//! Sigma_i   = sigma^2 I + Gamma(T_i, T_i)
//! xi_tilde  = Lambda_K Phi_K^T Sigma_i^{-1} x
//! Sigma_iK  = Lambda_K - Lambda_K Phi_K^T Sigma_i^{-1} Phi_K Lambda_K
//! ```
//!
//! The same formulas serve in-sample subjects and new subjects; keeping the
//! model fit and the predicted subjects apart is up to the caller.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_model::{Grid, SubjectRecord};
use crate::error::{FpcaError, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::{lit, to_f64, Real};
use crate::spectral::{evaluate_eigenfunction, FittedFpcaModel};

/// Population quantities a predictor conditions on. Implemented by fitted
/// models and by known generative truths in simulation.
pub trait LatentModel<T: Real> {
    fn grid(&self) -> &Grid<T>;
    /// Eigenvalues of all components entering `Sigma_i`, nonincreasing.
    fn eigenvalues(&self) -> &[T];
    fn eigenfunction_at(&self, k: usize, t: T) -> Result<T>;
    fn eigenfunction_on_grid(&self, k: usize) -> Vec<T>;
    fn mean_at(&self, t: T) -> Result<T>;
    fn mean_on_grid(&self) -> Vec<T>;
    fn noise_variance(&self) -> T;
    fn covariance_at(&self, s: T, t: T) -> Result<T>;
    fn covariance_on_grid(&self) -> Matrix<T>;
}

impl<T: Real> LatentModel<T> for FittedFpcaModel<T> {
    fn grid(&self) -> &Grid<T> {
        &self.mean.grid
    }

    fn eigenvalues(&self) -> &[T] {
        &self.eigen.eigenvalues
    }

    fn eigenfunction_at(&self, k: usize, t: T) -> Result<T> {
        evaluate_eigenfunction(&self.eigen, k, t)
    }

    fn eigenfunction_on_grid(&self, k: usize) -> Vec<T> {
        self.eigen.eigenfunction(k)
    }

    fn mean_at(&self, t: T) -> Result<T> {
        self.mean.at(t)
    }

    fn mean_on_grid(&self) -> Vec<T> {
        self.mean.values.clone()
    }

    fn noise_variance(&self) -> T {
        self.cov.sigma2
    }

    fn covariance_at(&self, s: T, t: T) -> Result<T> {
        self.cov.at(s, t)
    }

    fn covariance_on_grid(&self) -> Matrix<T> {
        self.cov.values.clone()
    }
}

/// Gaussian law `N_K(mean, covariance)` of the first `K` scores given the
/// subject's observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePredictive<T> {
    pub subject_id: String,
    pub mean: Vec<T>,
    pub covariance: Matrix<T>,
}

impl<T: Real> ScorePredictive<T> {
    pub fn k(&self) -> usize {
        self.mean.len()
    }
}

/// Gaussian measure on the grid: mean curve and covariance kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalGaussian<T> {
    pub grid: Grid<T>,
    pub mean_curve: Vec<T>,
    pub cov_kernel: Matrix<T>,
}

impl<T: Real> FunctionalGaussian<T> {
    pub fn new(grid: Grid<T>, mean_curve: Vec<T>, mut cov_kernel: Matrix<T>) -> Result<Self> {
        let g = grid.len();
        if mean_curve.len() != g || cov_kernel.rows() != g || cov_kernel.cols() != g {
            return Err(FpcaError::GridMismatch);
        }
        let scale = cov_kernel.max_abs().max(T::one());
        let asym = cov_kernel.asymmetry();
        if asym > lit::<T>(1e-8) * scale {
            return Err(FpcaError::NotSymmetric(to_f64(asym)));
        }
        cov_kernel.symmetrize();
        let fg = Self {
            grid,
            mean_curve,
            cov_kernel,
        };
        if fg.trace() < -lit::<T>(1e-8) * scale {
            return Err(FpcaError::NotPsd(to_f64(fg.trace())));
        }
        Ok(fg)
    }

    /// Quadrature trace `sum_g w_g C(t_g, t_g)`.
    pub fn trace(&self) -> T {
        self.grid.integrate(&self.cov_kernel.diag())
    }
}

struct Conditioning<T> {
    id: String,
    chol: Cholesky<T>,
    resid: Vec<T>,
}

fn condition<T: Real, M: LatentModel<T> + ?Sized>(model: &M, subject: &SubjectRecord<T>, sigma_i: Matrix<T>) -> Result<Conditioning<T>> {
    let resid = subject
        .times()
        .iter()
        .zip(subject.values())
        .map(|(&t, &x)| Ok(x - model.mean_at(t)?))
        .collect::<Result<Vec<T>>>()?;
    let chol = match sigma_i.cholesky() {
        Some(c) => c,
        None => {
            let jitter = lit::<T>(1e-10) * model.noise_variance();
            let mut retry = sigma_i;
            for i in 0..retry.rows() {
                retry[(i, i)] = retry[(i, i)] + jitter;
            }
            retry
                .cholesky()
                .filter(|_| jitter > T::zero())
                .ok_or_else(|| FpcaError::SingularCovariance(subject.id.clone()))?
        }
    };
    Ok(Conditioning {
        id: subject.id.clone(),
        chol,
        resid,
    })
}

fn basis_at_times<T: Real, M: LatentModel<T> + ?Sized>(model: &M, times: &[T], k: usize) -> Result<Matrix<T>> {
    let mut phi = Matrix::zeros(times.len(), k);
    for (j, &t) in times.iter().enumerate() {
        for c in 0..k {
            phi[(j, c)] = model.eigenfunction_at(c, t)?;
        }
    }
    Ok(phi)
}

fn check_k<T: Real, M: LatentModel<T> + ?Sized>(model: &M, k: usize) -> Result<()> {
    let available = model.eigenvalues().len();
    if k == 0 || k > available {
        return Err(FpcaError::TooManyComponents { requested: k, available });
    }
    Ok(())
}

/// Best linear unbiased predictor of the first `k` scores together with its
/// conditional covariance. `Sigma_i` is assembled from every component of
/// the model; linear systems are solved by Cholesky factorisation.
pub fn blup_scores<T: Real, M: LatentModel<T> + ?Sized>(model: &M, subject: &SubjectRecord<T>, k: usize) -> Result<ScorePredictive<T>> {
    check_k(model, k)?;
    let lambda = model.eigenvalues();
    let r = lambda.len();
    let n = subject.len();
    let phi_all = basis_at_times(model, subject.times(), r)?;
    let sigma2 = model.noise_variance();
    let mut sigma_i = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let mut s = T::zero();
            for c in 0..r {
                s = s + lambda[c] * phi_all[(a, c)] * phi_all[(b, c)];
            }
            if a == b {
                s = s + sigma2;
            }
            sigma_i[(a, b)] = s;
            sigma_i[(b, a)] = s;
        }
    }
    let cond = condition(model, subject, sigma_i)?;
    let phi_k = Matrix::from_fn(n, k, |a, c| phi_all[(a, c)]);
    // Z = Sigma_i^{-1} Phi_K
    let z = cond.chol.solve_mat(&phi_k);
    let mean: Vec<T> = (0..k)
        .map(|c| lambda[c] * (0..n).map(|a| z[(a, c)] * cond.resid[a]).sum::<T>())
        .collect();
    let gram = phi_k.transpose().matmul(&z);
    let mut cov = Matrix::from_fn(k, k, |a, b| {
        let prior = if a == b { lambda[a] } else { T::zero() };
        prior - lambda[a] * gram[(a, b)] * lambda[b]
    });
    cov.symmetrize();
    let cov = clip_psd(cov, lambda[0])?;
    Ok(ScorePredictive {
        subject_id: cond.id,
        mean,
        covariance: cov,
    })
}

/// Zeroes small negative eigenvalues; errors when one falls below
/// `-1e-8 * lambda_1`.
fn clip_psd<T: Real>(cov: Matrix<T>, lambda1: T) -> Result<Matrix<T>> {
    let eig = cov.symmetric_eigen()?;
    let min = eig.values.last().copied().unwrap_or(T::zero());
    if min >= T::zero() {
        return Ok(cov);
    }
    if min < -lit::<T>(1e-8) * lambda1.abs() {
        return Err(FpcaError::NotPsd(to_f64(min)));
    }
    Ok(eig.map_spectrum(|x| x.max(T::zero())))
}

/// Distributional view of [`blup_scores`]: `xi_iK | X_i, T_i ~ N_K(xi_tilde, Sigma_iK)`.
pub fn score_predictive_distribution<T: Real, M: LatentModel<T> + ?Sized>(
    model: &M,
    subject: &SubjectRecord<T>,
    k: usize,
) -> Result<ScorePredictive<T>> {
    blup_scores(model, subject, k)
}

/// Builds the function-space Gaussian induced by a score predictive law
/// through the first `K` eigenfunctions (centred scale).
pub fn functional_from_scores<T: Real, M: LatentModel<T> + ?Sized>(model: &M, scores: &ScorePredictive<T>) -> Result<FunctionalGaussian<T>> {
    let k = scores.k();
    check_k(model, k)?;
    let grid = model.grid().clone();
    let g = grid.len();
    let phi = Matrix::from_fn(g, k, |_, _| T::zero());
    let mut phi = phi;
    for c in 0..k {
        for (i, v) in model.eigenfunction_on_grid(c).into_iter().enumerate() {
            phi[(i, c)] = v;
        }
    }
    let mean_curve = phi.matvec(&scores.mean);
    let kernel = phi.matmul(&scores.covariance).matmul(&phi.transpose());
    FunctionalGaussian::new(grid, mean_curve, kernel)
}

/// K-truncated predictive distribution of the centred trajectory.
pub fn functional_predictive_distribution<T: Real, M: LatentModel<T> + ?Sized>(
    model: &M,
    subject: &SubjectRecord<T>,
    k: usize,
) -> Result<FunctionalGaussian<T>> {
    let scores = blup_scores(model, subject, k)?;
    functional_from_scores(model, &scores)
}

/// Untruncated predictive distribution computed from the covariance
/// surface itself:
/// `m(t) = Gamma(t, T_i) Sigma_i^{-1} x`,
/// `C(s, t) = Gamma(s, t) - Gamma(s, T_i) Sigma_i^{-1} Gamma(T_i, t)`.
pub fn infinite_predictive_distribution<T: Real, M: LatentModel<T> + ?Sized>(
    model: &M,
    subject: &SubjectRecord<T>,
) -> Result<FunctionalGaussian<T>> {
    let times = subject.times();
    let n = times.len();
    let mut sigma_i = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let mut s = model.covariance_at(times[a], times[b])?;
            if a == b {
                s = s + model.noise_variance();
            }
            sigma_i[(a, b)] = s;
            sigma_i[(b, a)] = s;
        }
    }
    let cond = condition(model, subject, sigma_i)?;
    let grid = model.grid().clone();
    let g = grid.len();
    // Cross-covariance between grid and observation times: g x n.
    let mut cross = Matrix::zeros(g, n);
    for (i, &s) in grid.points().iter().enumerate() {
        for (a, &t) in times.iter().enumerate() {
            cross[(i, a)] = model.covariance_at(s, t)?;
        }
    }
    let alpha = cond.chol.solve_vec(&cond.resid);
    let mean_curve = cross.matvec(&alpha);
    let solved = cond.chol.solve_mat(&cross.transpose());
    let correction = cross.matmul(&solved);
    let kernel = model.covariance_on_grid().sub(&correction);
    let mut kernel = kernel;
    kernel.symmetrize();
    FunctionalGaussian::new(grid, mean_curve, kernel)
}

/// `mu(t) + sum_k xi_tilde_k phi_k(t)` on the grid.
pub fn reconstruct_trajectory<T: Real, M: LatentModel<T> + ?Sized>(model: &M, subject: &SubjectRecord<T>, k: usize) -> Result<Vec<T>> {
    let scores = blup_scores(model, subject, k)?;
    let mut curve = model.mean_on_grid();
    for c in 0..k {
        for (v, p) in curve.iter_mut().zip(model.eigenfunction_on_grid(c)) {
            *v = *v + scores.mean[c] * p;
        }
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

/// Standard normal quantile.
pub fn normal_quantile<T: Real>(p: T) -> T {
    let n = Normal::standard();
    lit(n.inverse_cdf(to_f64(p)))
}

/// Standard normal CDF.
pub fn normal_cdf<T: Real>(x: T) -> T {
    let n = Normal::standard();
    lit(n.cdf(to_f64(x)))
}

/// Pointwise band `mean ± z_{(1+level)/2} sqrt(C(t, t))`.
pub fn pointwise_band<T: Real>(fg: &FunctionalGaussian<T>, level: T) -> Result<Band<T>> {
    if !(level > T::zero() && level < T::one()) {
        return Err(FpcaError::InvalidArgument(format!("band level {level} outside (0, 1)")));
    }
    let z = normal_quantile((T::one() + level) * lit(0.5));
    let mut lower = Vec::with_capacity(fg.grid.len());
    let mut upper = Vec::with_capacity(fg.grid.len());
    for (i, &m) in fg.mean_curve.iter().enumerate() {
        let v = fg.cov_kernel[(i, i)];
        if v < -lit::<T>(1e-8) {
            return Err(FpcaError::NotPsd(to_f64(v)));
        }
        let half = z * v.max(T::zero()).sqrt();
        lower.push(m - half);
        upper.push(m + half);
    }
    Ok(Band { lower, upper })
}

/// Chi-square(2) quantile at `level`.
pub fn chi2_2_quantile<T: Real>(level: T) -> T {
    -lit::<T>(2.0) * (T::one() - level).ln()
}

/// Points on the `level` contour `{x : (x - m)^T S^{-1} (x - m) = q}` of a
/// bivariate score predictive law.
pub fn contour_ellipse<T: Real>(sp: &ScorePredictive<T>, level: T, n_points: usize) -> Result<Vec<[T; 2]>> {
    if sp.k() != 2 {
        return Err(FpcaError::InvalidArgument(format!("contours need K = 2, got {}", sp.k())));
    }
    if !(level >= T::zero() && level < T::one()) {
        return Err(FpcaError::InvalidArgument(format!("contour level {level} outside [0, 1)")));
    }
    let eig = sp.covariance.symmetric_eigen()?;
    let (l1, l2) = (eig.values[0], eig.values[1]);
    if !(l1 > T::zero()) || !(l2 > lit::<T>(1e-14) * l1) {
        return Err(FpcaError::DegenerateEllipse);
    }
    let r = chi2_2_quantile(level).sqrt();
    let two_pi = lit::<T>(2.0 * std::f64::consts::PI);
    Ok((0..n_points)
        .map(|j| {
            let theta = two_pi * crate::scalar::from_usize::<T>(j) / crate::scalar::from_usize(n_points.max(1));
            let (a, b) = (r * l1.sqrt() * theta.cos(), r * l2.sqrt() * theta.sin());
            [
                sp.mean[0] + eig.vectors[(0, 0)] * a + eig.vectors[(0, 1)] * b,
                sp.mean[1] + eig.vectors[(1, 0)] * a + eig.vectors[(1, 1)] * b,
            ]
        })
        .collect())
}

/// Area `pi q sqrt(det S)` enclosed by the `level` contour.
pub fn contour_area<T: Real>(sp: &ScorePredictive<T>, level: T) -> T {
    let c = &sp.covariance;
    let det = (c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)]).max(T::zero());
    lit::<T>(std::f64::consts::PI) * chi2_2_quantile(level) * det.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Domain;
    use crate::smoothing::{CovarianceSurface, MeanFunction};
    use crate::spectral::EigenSystem;

    /// mu = 0, K = 1, lambda = 2, phi = 1 on [0, 1], sigma^2 = 1.
    pub(crate) fn toy_model() -> FittedFpcaModel<f64> {
        let grid = Grid::uniform(Domain::new(0.0, 1.0).unwrap(), 11).unwrap();
        let g = grid.len();
        let eigen = EigenSystem::from_parts(grid.clone(), vec![2.0], Matrix::from_fn(g, 1, |_, _| 1.0)).unwrap();
        FittedFpcaModel::new(
            MeanFunction {
                grid: grid.clone(),
                values: vec![0.0; g],
            },
            CovarianceSurface {
                grid,
                values: Matrix::from_fn(g, g, |_, _| 2.0),
                sigma2: 1.0,
            },
            eigen,
            1,
        )
        .unwrap()
    }

    fn one_obs(x: f64) -> SubjectRecord<f64> {
        SubjectRecord::new("toy", vec![0.5], vec![x]).unwrap()
    }

    #[test]
    fn scalar_toy_blup() {
        let sp = blup_scores(&toy_model(), &one_obs(3.0), 1).unwrap();
        assert!((sp.mean[0] - 2.0).abs() < 1e-12);
        assert!((sp.covariance[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        let centred = blup_scores(&toy_model(), &one_obs(0.0), 1).unwrap();
        assert_eq!(centred.mean, vec![0.0]);
        assert!(matches!(blup_scores(&toy_model(), &one_obs(3.0), 2), Err(FpcaError::TooManyComponents { .. })));
    }

    #[test]
    fn toy_functional_and_infinite_views() {
        let m = toy_model();
        let fg = functional_predictive_distribution(&m, &one_obs(3.0), 1).unwrap();
        assert!(fg.mean_curve.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(fg.cov_kernel.as_slice().iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-12));
        assert!((fg.trace() - 2.0 / 3.0).abs() < 1e-12);

        let inf = infinite_predictive_distribution(&m, &one_obs(3.0)).unwrap();
        assert!(inf.mean_curve.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(inf.cov_kernel.sub(&fg.cov_kernel).frobenius_norm() < 1e-10);

        let traj = reconstruct_trajectory(&m, &one_obs(3.0), 1).unwrap();
        assert!(traj.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let flat = reconstruct_trajectory(&m, &one_obs(0.0), 1).unwrap();
        assert_eq!(flat, m.mean.values);
    }

    #[test]
    fn zero_observation_deviation_reduces_trace() {
        let m = toy_model();
        let inf = infinite_predictive_distribution(&m, &one_obs(0.0)).unwrap();
        assert!(inf.mean_curve.iter().all(|v| v.abs() < 1e-15));
        let prior_trace = m.grid().integrate(&m.cov.values.diag());
        assert!(inf.trace() < prior_trace);
    }

    #[test]
    fn degenerate_component_has_zero_score_and_variance() {
        let grid = Grid::uniform(Domain::new(0.0, 1.0).unwrap(), 5).unwrap();
        let eigen = EigenSystem::from_parts(grid.clone(), vec![0.0], Matrix::from_fn(5, 1, |_, _| 1.0)).unwrap();
        let model = FittedFpcaModel {
            mean: MeanFunction {
                grid: grid.clone(),
                values: vec![0.0; 5],
            },
            cov: CovarianceSurface {
                grid,
                values: Matrix::zeros(5, 5),
                sigma2: 1.0,
            },
            eigen,
            k: 1,
        };
        let sp = blup_scores(&model, &one_obs(3.0), 1).unwrap();
        assert_eq!(sp.mean, vec![0.0]);
        assert_eq!(sp.covariance[(0, 0)], 0.0);
    }

    #[test]
    fn singular_sigma_without_noise() {
        let mut m = toy_model();
        m.cov.sigma2 = 0.0;
        let dup = SubjectRecord::new("d", vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        assert!(matches!(blup_scores(&m, &dup, 1), Err(FpcaError::SingularCovariance(_))));
    }

    #[test]
    fn band_halfwidths() {
        let m = toy_model();
        let fg = functional_predictive_distribution(&m, &one_obs(3.0), 1).unwrap();
        let b = pointwise_band(&fg, 0.95).unwrap();
        assert!((b.upper[0] - 2.0 - 1.959964 * (2.0f64 / 3.0).sqrt()).abs() < 1e-5);
        assert!((b.upper[0] - b.lower[0] - 2.0 * 1.6003).abs() < 1e-3);
        let b = pointwise_band(&fg, 0.5).unwrap();
        assert!((b.upper[3] - 2.0 - 0.674490 * (2.0f64 / 3.0).sqrt()).abs() < 1e-5);
        let zero = FunctionalGaussian::new(fg.grid.clone(), fg.mean_curve.clone(), Matrix::zeros(11, 11)).unwrap();
        let b = pointwise_band(&zero, 0.9).unwrap();
        assert_eq!(b.lower, zero.mean_curve);
        assert_eq!(b.upper, zero.mean_curve);
        assert!(pointwise_band(&zero, 1.0).is_err());
    }

    fn sp2(mean: [f64; 2], cov: [f64; 4]) -> ScorePredictive<f64> {
        ScorePredictive {
            subject_id: "e".into(),
            mean: mean.to_vec(),
            covariance: Matrix::from_row_major(2, 2, cov.to_vec()).unwrap(),
        }
    }

    #[test]
    fn ellipse_geometry() {
        let r = 5.991465f64.sqrt();
        let pts = contour_ellipse(&sp2([0.0, 0.0], [1.0, 0.0, 0.0, 1.0]), 0.95, 64).unwrap();
        assert!(pts.iter().all(|p| ((p[0].hypot(p[1])) - r).abs() < 1e-5));
        let pts = contour_ellipse(&sp2([1.0, -1.0], [4.0, 0.0, 0.0, 1.0]), 0.95, 64).unwrap();
        let max_x = pts.iter().map(|p| (p[0] - 1.0).abs()).fold(0.0, f64::max);
        let max_y = pts.iter().map(|p| (p[1] + 1.0).abs()).fold(0.0, f64::max);
        assert!((max_x - 2.0 * r).abs() < 1e-5);
        assert!((max_y - r).abs() < 1e-5);
        let pts = contour_ellipse(&sp2([0.3, 0.7], [1.0, 0.2, 0.2, 1.0]), 1e-14, 16).unwrap();
        assert!(pts.iter().all(|p| (p[0] - 0.3).abs() < 1e-6 && (p[1] - 0.7).abs() < 1e-6));
        assert!(matches!(
            contour_ellipse(&sp2([0.0, 0.0], [1.0, 1.0, 1.0, 1.0]), 0.95, 8),
            Err(FpcaError::DegenerateEllipse)
        ));
    }
}
