//! Scalar-on-function linear regression with a sparsely observed predictor.
//!
//! The slope is expanded in the estimated eigenbasis,
//! `beta_M(t) = sum_{m <= M} (sigma_m / lambda_m) phi_m(t)` with
//! `sigma_m = int C(t) phi_m(t) dt`, and each subject's response gets the
//! Gaussian predictive law `N(beta_0 + beta_K^T xi_tilde, beta_K^T Sigma_iK beta_K)`.

use serde::{Deserialize, Serialize};

use crate::data_model::{Grid, Responses, SparseFunctionalDataset, SubjectRecord};
use crate::error::{FpcaError, Result};
use crate::linalg::Matrix;
use crate::predictive::{blup_scores, LatentModel};
use crate::scalar::{from_usize, lit, Real};
use crate::smoothing::{estimate_cross_covariance, CrossCovariance, KernelSpec, MeanFunction};
use crate::wasserstein::{uniformity_statistic, Gaussian1D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlmModel<T> {
    pub beta0: T,
    /// `sigma_m = int C phi_m`, m = 1..M.
    pub sigma_k: Vec<T>,
    /// `beta_m = sigma_m / lambda_m`.
    pub beta_k: Vec<T>,
    /// Eigenvalues the coefficients were divided by.
    pub eigenvalues: Vec<T>,
    pub m: usize,
    pub grid: Grid<T>,
    pub beta_curve: Vec<T>,
    pub cross_covariance: CrossCovariance<T>,
}

/// Slope coefficients from a given cross-covariance and eigenbasis.
pub fn fit_flm_from_cross<T: Real, M: LatentModel<T> + ?Sized>(
    model: &M,
    cross: &CrossCovariance<T>,
    beta0: T,
    m: usize,
) -> Result<FlmModel<T>> {
    let lambda = model.eigenvalues();
    if m == 0 || m > lambda.len() {
        return Err(FpcaError::TooManyComponents {
            requested: m,
            available: lambda.len(),
        });
    }
    if &cross.grid != model.grid() {
        return Err(FpcaError::GridMismatch);
    }
    let grid = cross.grid.clone();
    let floor = lit::<T>(1e-12) * lambda[0];
    let mut sigma_k = Vec::with_capacity(m);
    let mut beta_k = Vec::with_capacity(m);
    let mut beta_curve = vec![T::zero(); grid.len()];
    for (c, &l) in lambda.iter().enumerate().take(m) {
        if !(l > floor) {
            return Err(FpcaError::VanishingEigenvalue(c + 1));
        }
        let phi = model.eigenfunction_on_grid(c);
        let s = grid.inner(&cross.values, &phi);
        let b = s / l;
        for (v, p) in beta_curve.iter_mut().zip(&phi) {
            *v = *v + b * *p;
        }
        sigma_k.push(s);
        beta_k.push(b);
    }
    Ok(FlmModel {
        beta0,
        sigma_k,
        beta_k,
        eigenvalues: lambda[..m].to_vec(),
        m,
        grid,
        beta_curve,
        cross_covariance: cross.clone(),
    })
}

/// Smooths the cross-covariance with bandwidth `h` and fits the slope with
/// `m` components; the intercept is the mean response.
pub fn fit_flm<T: Real, M: LatentModel<T> + ?Sized>(
    model: &M,
    mean: &MeanFunction<T>,
    dataset: &SparseFunctionalDataset<T>,
    responses: &Responses<T>,
    m: usize,
    h: T,
    kernel: KernelSpec,
) -> Result<FlmModel<T>> {
    let ys: Vec<T> = dataset
        .subjects()
        .iter()
        .filter_map(|s| responses.get(&s.id).copied())
        .collect();
    if ys.is_empty() {
        return Err(FpcaError::InvalidData("no subject has a response".into()));
    }
    let beta0 = ys.iter().copied().sum::<T>() / from_usize(ys.len());
    let cross = estimate_cross_covariance(dataset, responses, mean, h, kernel)?;
    fit_flm_from_cross(model, &cross, beta0, m)
}

/// `N(beta_0 + beta_K^T xi_tilde, beta_K^T Sigma_iK beta_K)`.
pub fn response_predictive_distribution<T: Real, M: LatentModel<T> + ?Sized>(
    flm: &FlmModel<T>,
    model: &M,
    subject: &SubjectRecord<T>,
    k: usize,
) -> Result<Gaussian1D<T>> {
    if k == 0 || k > flm.m {
        return Err(FpcaError::TooManyComponents { requested: k, available: flm.m });
    }
    let sp = blup_scores(model, subject, k)?;
    Ok(project(flm, &sp.mean, &sp.covariance))
}

fn project<T: Real>(flm: &FlmModel<T>, mean: &[T], cov: &Matrix<T>) -> Gaussian1D<T> {
    let b = &flm.beta_k[..mean.len()];
    let m = flm.beta0 + b.iter().zip(mean).map(|(&x, &y)| x * y).sum::<T>();
    Gaussian1D {
        mean: m,
        variance: cov.quadratic_form(b).max(T::zero()),
    }
}

/// Average squared Wasserstein distance between each predictive law and
/// the atom at the observed response, split into its two sums.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy<T> {
    pub total: T,
    /// `n^{-1} sum (Y_i - eta_i)^2`.
    pub residual_term: T,
    /// `n^{-1} sum beta^T Sigma_iK beta`.
    pub variance_term: T,
    pub n: usize,
}

pub fn wasserstein_discrepancy<T: Real, M: LatentModel<T> + ?Sized>(
    flm: &FlmModel<T>,
    model: &M,
    dataset: &SparseFunctionalDataset<T>,
    responses: &Responses<T>,
    k: usize,
) -> Result<Discrepancy<T>> {
    let mut resid = T::zero();
    let mut var = T::zero();
    let mut min_eig: Option<T> = None;
    for s in dataset.subjects() {
        let y = *responses
            .get(&s.id)
            .ok_or_else(|| FpcaError::InvalidData(format!("subject `{}` has no response", s.id)))?;
        if k == 0 || k > flm.m {
            return Err(FpcaError::TooManyComponents { requested: k, available: flm.m });
        }
        let sp = blup_scores(model, s, k)?;
        if log::log_enabled!(log::Level::Debug) {
            let e = sp.covariance.symmetric_eigen()?.values.last().copied().unwrap_or(T::zero());
            min_eig = Some(min_eig.map_or(e, |m| m.min(e)));
        }
        let p = project(flm, &sp.mean, &sp.covariance);
        resid = resid + (y - p.mean) * (y - p.mean);
        var = var + p.variance;
    }
    if let Some(e) = min_eig {
        log::debug!("smallest eigenvalue of the score conditional covariances: {e}");
    }
    let n = dataset.len();
    let nn: T = from_usize(n);
    let (residual_term, variance_term) = (resid / nn, var / nn);
    Ok(Discrepancy {
        total: residual_term + variance_term,
        residual_term,
        variance_term,
        n,
    })
}

/// Population discrepancy evaluated with known truth over design draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationDiscrepancy<T> {
    pub value: T,
    /// Monte Carlo standard error over the design draws.
    pub standard_error: T,
    pub draws: usize,
}

/// `D_K = 2 beta_K^T E(Sigma_K) beta_K + sigma_Y^2 + sum_{k>K} lambda_k beta_k^2
///        - 2 beta_K^T E[Lambda_K Phi_K^T Sigma^{-1} sum_{k>K} phi_k(T) lambda_k beta_k]`
///
/// `truth` must expose every component of the process and `beta` one
/// coefficient per component. Each entry of `designs` is one draw of
/// observation times.
pub fn population_discrepancy<T: Real, M: LatentModel<T> + ?Sized>(
    truth: &M,
    beta: &[T],
    sigma_y2: T,
    k: usize,
    designs: &[Vec<T>],
) -> Result<PopulationDiscrepancy<T>> {
    if designs.len() < 100 {
        return Err(FpcaError::InvalidArgument(format!(
            "population discrepancy needs at least 100 design draws, got {}",
            designs.len()
        )));
    }
    let lambda = truth.eigenvalues();
    let r = lambda.len();
    if beta.len() != r {
        return Err(FpcaError::InvalidArgument("one slope coefficient per component is required".into()));
    }
    if k == 0 || k > r {
        return Err(FpcaError::TooManyComponents { requested: k, available: r });
    }
    let explained_tail: T = (k..r).map(|c| lambda[c] * beta[c] * beta[c]).sum();
    let two = lit::<T>(2.0);
    let mut draws = Vec::with_capacity(designs.len());
    for times in designs {
        let values = vec![T::zero(); times.len()];
        let subject = SubjectRecord::new("design", times.clone(), values)?;
        let sp = blup_scores(truth, &subject, k)?;
        let var = sp.covariance.quadratic_form(&beta[..k]);
        let tail = if k < r {
            tail_cross_term(truth, subject.times(), beta, k)?
        } else {
            T::zero()
        };
        draws.push(two * var - two * tail);
    }
    let n: T = from_usize(draws.len());
    let mean = draws.iter().copied().sum::<T>() / n;
    let sd2 = draws.iter().map(|&d| (d - mean) * (d - mean)).sum::<T>() / (n - T::one());
    Ok(PopulationDiscrepancy {
        value: mean + sigma_y2 + explained_tail,
        standard_error: (sd2 / n).sqrt(),
        draws: designs.len(),
    })
}

fn tail_cross_term<T: Real, M: LatentModel<T> + ?Sized>(truth: &M, times: &[T], beta: &[T], k: usize) -> Result<T> {
    let lambda = truth.eigenvalues();
    let r = lambda.len();
    let n = times.len();
    let mut phi = Matrix::zeros(n, r);
    for (a, &t) in times.iter().enumerate() {
        for c in 0..r {
            phi[(a, c)] = truth.eigenfunction_at(c, t)?;
        }
    }
    let mut sigma = Matrix::from_fn(n, n, |a, b| (0..r).map(|c| lambda[c] * phi[(a, c)] * phi[(b, c)]).sum());
    for a in 0..n {
        sigma[(a, a)] = sigma[(a, a)] + truth.noise_variance();
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| FpcaError::SingularCovariance("design".into()))?;
    let tail: Vec<T> = (0..n)
        .map(|a| (k..r).map(|c| phi[(a, c)] * lambda[c] * beta[c]).sum())
        .collect();
    let solved = chol.solve_vec(&tail);
    Ok((0..k)
        .map(|c| beta[c] * lambda[c] * (0..n).map(|a| phi[(a, c)] * solved[a]).sum::<T>())
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaYEstimate<T> {
    pub value: T,
    /// Set when the estimate is negative; the value is reported unclipped.
    pub negative: bool,
}

/// `n^{-1} sum (Y_i - Ybar)^2 - sum_{j <= M} lambda_j beta_j^2`.
pub fn sigma_y_estimate<T: Real>(flm: &FlmModel<T>, responses: &Responses<T>) -> Result<SigmaYEstimate<T>> {
    if responses.len() < 2 {
        return Err(FpcaError::InvalidArgument("sigma_Y estimate needs at least 2 responses".into()));
    }
    let n: T = from_usize(responses.len());
    let mean = responses.values().copied().sum::<T>() / n;
    let var = responses.values().map(|&y| (y - mean) * (y - mean)).sum::<T>() / n;
    let explained: T = flm
        .eigenvalues
        .iter()
        .zip(&flm.beta_k)
        .map(|(&l, &b)| l * b * b)
        .sum();
    let value = var - explained;
    let negative = value < T::zero();
    if negative {
        log::warn!("sigma_Y^2 estimate is negative ({value})");
    }
    Ok(SigmaYEstimate { value, negative })
}

/// Where each subject's predictive CDF is evaluated.
#[derive(Clone, Copy, Debug)]
pub enum UniformityTargets<'a, T> {
    /// Known linear predictors `beta_0 + int beta (X_i - mu)` (simulation).
    TrueLinearPredictor(&'a Responses<T>),
    /// Observed responses, the only option on real data.
    ObservedResponse(&'a Responses<T>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport<T> {
    pub statistic: T,
    pub probabilities: Vec<T>,
    /// Subjects whose predictive law was a point mass away from the target.
    pub saturated: usize,
}

/// Evaluates each subject's predictive CDF at its target and measures the
/// distance of the resulting probabilities from Uniform(0, 1).
pub fn uniformity_diagnostic<T: Real, M: LatentModel<T> + ?Sized>(
    flm: &FlmModel<T>,
    model: &M,
    dataset: &SparseFunctionalDataset<T>,
    targets: UniformityTargets<'_, T>,
    k: usize,
) -> Result<UniformityReport<T>> {
    let map = match targets {
        UniformityTargets::TrueLinearPredictor(m) | UniformityTargets::ObservedResponse(m) => m,
    };
    let mut probabilities = Vec::with_capacity(dataset.len());
    let mut saturated = 0usize;
    for s in dataset.subjects() {
        let target = *map
            .get(&s.id)
            .ok_or_else(|| FpcaError::InvalidData(format!("no target for subject `{}`", s.id)))?;
        let p = response_predictive_distribution(flm, model, s, k)?;
        if p.variance <= T::zero() && target != p.mean {
            saturated += 1;
        }
        probabilities.push(p.cdf(target));
    }
    if saturated > 0 {
        log::warn!("{saturated} point-mass predictive law(s) saturated to probability 0 or 1");
    }
    Ok(UniformityReport {
        statistic: uniformity_statistic(&probabilities)?,
        probabilities,
        saturated,
    })
}

/// Response predictive laws for every subject, in dataset order.
pub fn predictive_laws<T: Real, M: LatentModel<T> + ?Sized>(
    flm: &FlmModel<T>,
    model: &M,
    dataset: &SparseFunctionalDataset<T>,
    k: usize,
) -> Result<Vec<(String, Gaussian1D<T>)>> {
    dataset
        .subjects()
        .iter()
        .map(|s| Ok((s.id.clone(), response_predictive_distribution(flm, model, s, k)?)))
        .collect()
}
