//! Eigenanalysis of the discretised covariance operator and the fitted FPCA
//! model that bundles mean, covariance and eigenpairs.

use serde::{Deserialize, Serialize};

use crate::data_model::{Grid, SparseFunctionalDataset};
use crate::error::{FpcaError, Result};
use crate::linalg::Matrix;
use crate::scalar::{lit, Real};
use crate::smoothing::{estimate_covariance, estimate_mean, Bandwidths, CovarianceSurface, KernelSpec, MeanFunction};

const EIGEN_FLOOR: f64 = 1e-10;
const SIGN_THRESHOLD: f64 = 1e-8;

/// Retained eigenpairs of a covariance operator on a quadrature grid.
///
/// Column `k` of `eigenfunctions` holds the values of the `k`-th
/// eigenfunction (0-based) at the grid points; the columns are orthonormal
/// under the grid's quadrature weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem<T> {
    pub grid: Grid<T>,
    pub eigenvalues: Vec<T>,
    pub eigenfunctions: Matrix<T>,
    pub eigengaps: Vec<T>,
    pub fve: Vec<T>,
}

impl<T: Real> EigenSystem<T> {
    /// Builds an eigensystem from eigenvalues and grid values of the
    /// eigenfunctions, filling in eigengaps and cumulative FVE.
    pub fn from_parts(grid: Grid<T>, eigenvalues: Vec<T>, eigenfunctions: Matrix<T>) -> Result<Self> {
        if eigenfunctions.rows() != grid.len() || eigenfunctions.cols() != eigenvalues.len() {
            return Err(FpcaError::InvalidArgument("eigenfunction matrix does not match grid/eigenvalues".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues.iter().any(|&l| l < T::zero()) {
            return Err(FpcaError::InvalidArgument("eigenvalues must be nonnegative and nonincreasing".into()));
        }
        let eigengaps = eigengaps(&eigenvalues);
        let total: T = eigenvalues.iter().copied().sum();
        let mut acc = T::zero();
        let fve = eigenvalues
            .iter()
            .map(|&l| {
                acc = acc + l;
                if total > T::zero() {
                    acc / total
                } else {
                    T::zero()
                }
            })
            .collect();
        Ok(Self {
            grid,
            eigenvalues,
            eigenfunctions,
            eigengaps,
            fve,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenfunction(&self, k: usize) -> Vec<T> {
        self.eigenfunctions.column(k)
    }

    /// `sum_k lambda_k phi_k(s) phi_k(t)` over the first `k` components on the grid.
    pub fn reconstruct(&self, k: usize) -> Matrix<T> {
        let g = self.grid.len();
        let k = k.min(self.len());
        let mut out = Matrix::zeros(g, g);
        for i in 0..g {
            for j in i..g {
                let mut s = T::zero();
                for c in 0..k {
                    s = s + self.eigenvalues[c] * self.eigenfunctions[(i, c)] * self.eigenfunctions[(j, c)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// `delta_k = min(lambda_{k-1} - lambda_k, lambda_k - lambda_{k+1})`, using
/// only the neighbours that exist (a single eigenvalue gets gap `lambda_1`).
fn eigengaps<T: Real>(lambda: &[T]) -> Vec<T> {
    let n = lambda.len();
    (0..n)
        .map(|k| {
            let prev = (k > 0).then(|| lambda[k - 1] - lambda[k]);
            let next = (k + 1 < n).then(|| lambda[k] - lambda[k + 1]);
            match (prev, next) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => lambda[k],
            }
        })
        .collect()
}

/// Solves `W^{1/2} G W^{1/2} u = lambda u` and maps back `phi = W^{-1/2} u`.
///
/// Eigenvalues below `1e-10 * lambda_1` are discarded; each eigenfunction is
/// signed so that its first grid value exceeding `1e-8` in magnitude is
/// positive.
pub fn eigendecompose<T: Real>(cov: &CovarianceSurface<T>, max_components: usize) -> Result<EigenSystem<T>> {
    let grid = &cov.grid;
    let g = grid.len();
    if cov.values.rows() != g || cov.values.cols() != g {
        return Err(FpcaError::GridMismatch);
    }
    let scale = cov.values.max_abs();
    let asym = cov.values.asymmetry();
    if asym > lit::<T>(1e-8) * scale.max(T::one()) {
        return Err(FpcaError::NotSymmetric(crate::scalar::to_f64(asym)));
    }
    let sqrt_w: Vec<T> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let mut a = Matrix::from_fn(g, g, |i, j| sqrt_w[i] * cov.values[(i, j)] * sqrt_w[j]);
    a.symmetrize();
    let eig = a.symmetric_eigen()?;
    let lead = eig.values.first().copied().unwrap_or(T::zero());
    if !(lead > T::zero()) {
        return Err(FpcaError::NoPositiveEigenvalues);
    }
    let floor = lit::<T>(EIGEN_FLOOR) * lead;
    let keep = eig
        .values
        .iter()
        .take_while(|&&l| l > floor)
        .count()
        .min(max_components.max(1));
    let mut phi = Matrix::zeros(g, keep);
    for k in 0..keep {
        let mut col: Vec<T> = (0..g).map(|i| eig.vectors[(i, k)] / sqrt_w[i]).collect();
        let thr = lit::<T>(SIGN_THRESHOLD);
        if let Some(first) = col.iter().find(|v| v.abs() > thr) {
            if *first < T::zero() {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
        for (i, v) in col.into_iter().enumerate() {
            phi[(i, k)] = v;
        }
    }
    EigenSystem::from_parts(grid.clone(), eig.values[..keep].to_vec(), phi)
}

/// Smallest `K` whose cumulative fraction of variance explained reaches `threshold`.
pub fn select_k_fve<T: Real>(eigen: &EigenSystem<T>, threshold: T) -> Result<usize> {
    if !(threshold > T::zero() && threshold <= T::one()) {
        return Err(FpcaError::InvalidArgument(format!("FVE threshold {threshold} outside (0, 1]")));
    }
    if !eigen.eigenvalues.iter().any(|&l| l > T::zero()) {
        return Err(FpcaError::NoPositiveEigenvalues);
    }
    // Tolerance keeps a threshold of exactly 1 reachable despite rounding.
    let tol = lit::<T>(1e-12);
    Ok(eigen
        .fve
        .iter()
        .position(|&f| f + tol >= threshold)
        .map_or(eigen.len(), |k| k + 1))
}

/// Linear interpolation of eigenfunction `k` (0-based) at `t`.
pub fn evaluate_eigenfunction<T: Real>(eigen: &EigenSystem<T>, k: usize, t: T) -> Result<T> {
    if k >= eigen.len() {
        return Err(FpcaError::TooManyComponents {
            requested: k + 1,
            available: eigen.len(),
        });
    }
    let (i, frac) = eigen
        .grid
        .locate(t)
        .ok_or_else(|| FpcaError::InvalidArgument(format!("t = {t} outside the domain")))?;
    let a = eigen.eigenfunctions[(i, k)];
    if frac == T::zero() {
        return Ok(a);
    }
    let b = eigen.eigenfunctions[(i + 1, k)];
    if frac == T::one() {
        return Ok(b);
    }
    Ok(a + (b - a) * frac)
}

/// Estimated population quantities of a sparse FPCA fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedFpcaModel<T> {
    pub mean: MeanFunction<T>,
    pub cov: CovarianceSurface<T>,
    pub eigen: EigenSystem<T>,
    /// Selected truncation.
    pub k: usize,
}

impl<T: Real> FittedFpcaModel<T> {
    pub fn new(mean: MeanFunction<T>, cov: CovarianceSurface<T>, eigen: EigenSystem<T>, k: usize) -> Result<Self> {
        if mean.grid != cov.grid || cov.grid != eigen.grid {
            return Err(FpcaError::GridMismatch);
        }
        if k == 0 || k > eigen.len() {
            return Err(FpcaError::TooManyComponents {
                requested: k,
                available: eigen.len(),
            });
        }
        Ok(Self { mean, cov, eigen, k })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.mean.grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Truncation<T> {
    Fixed(usize),
    Fve(T),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpcaOptions<T> {
    pub grid_points: usize,
    pub kernel: KernelSpec,
    /// `None` selects the rate-based defaults for the dataset size.
    pub bandwidths: Option<Bandwidths<T>>,
    pub truncation: Truncation<T>,
    pub max_components: usize,
}

impl<T: Real> Default for FpcaOptions<T> {
    fn default() -> Self {
        Self {
            grid_points: 51,
            kernel: KernelSpec::default(),
            bandwidths: None,
            truncation: Truncation::Fve(lit(0.95)),
            max_components: 20,
        }
    }
}

/// Mean, covariance, measurement-error variance and eigenpairs in one pass.
pub fn fit_fpca<T: Real>(dataset: &SparseFunctionalDataset<T>, options: &FpcaOptions<T>) -> Result<FittedFpcaModel<T>> {
    let domain = dataset.domain();
    let grid = Grid::uniform(domain, options.grid_points)?;
    let bw = options
        .bandwidths
        .unwrap_or_else(|| Bandwidths::rate_defaults(domain, dataset.len()));
    let mean = estimate_mean(dataset, &grid, bw.mean, options.kernel)?;
    let cov = estimate_covariance(dataset, &mean, bw.covariance, options.kernel)?;
    let eigen = eigendecompose(&cov, options.max_components)?;
    let k = match options.truncation {
        Truncation::Fixed(k) => k,
        Truncation::Fve(th) => select_k_fve(&eigen, th)?,
    };
    FittedFpcaModel::new(mean, cov, eigen, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Domain;

    fn unit_grid(n: usize) -> Grid<f64> {
        Grid::uniform(Domain::new(0.0, 1.0).unwrap(), n).unwrap()
    }

    #[test]
    fn rank_one_flat_kernel() {
        let g = unit_grid(41);
        let cov = CovarianceSurface {
            grid: g.clone(),
            values: Matrix::from_fn(41, 41, |_, _| 1.0),
            sigma2: 0.0,
        };
        let e = eigendecompose(&cov, 10).unwrap();
        assert_eq!(e.len(), 1);
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(e.eigenfunction(0).iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert_eq!(e.fve, vec![1.0]);
    }

    #[test]
    fn fve_selection_on_decaying_spectrum() {
        let lambda: Vec<f64> = (1..=4).map(|k| 4.0 / ((1 + k) as f64).powi(2)).collect();
        let g = unit_grid(5);
        let e = EigenSystem::from_parts(g, lambda, Matrix::zeros(5, 4)).unwrap();
        assert_eq!(select_k_fve(&e, 0.90).unwrap(), 3);
        assert_eq!(select_k_fve(&e, 0.95).unwrap(), 4);
        assert_eq!(select_k_fve(&e, 1.0).unwrap(), 4);
        assert!(select_k_fve(&e, 0.0).is_err());
        assert!(select_k_fve(&e, 1.2).is_err());

        let single = EigenSystem::from_parts(unit_grid(5), vec![2.0], Matrix::zeros(5, 1)).unwrap();
        assert_eq!(select_k_fve(&single, 0.3).unwrap(), 1);
        assert_eq!(select_k_fve(&single, 1.0).unwrap(), 1);
    }

    #[test]
    fn eigengaps_use_available_neighbours() {
        assert_eq!(eigengaps(&[4.0, 3.0, 1.0]), vec![1.0, 1.0, 2.0]);
        assert_eq!(eigengaps(&[2.0]), vec![2.0]);
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_linear_between() {
        let g = unit_grid(3);
        let phi = Matrix::from_row_major(3, 1, vec![1.0, 3.0, 2.0]).unwrap();
        let e = EigenSystem::from_parts(g, vec![1.0], phi).unwrap();
        assert_eq!(evaluate_eigenfunction(&e, 0, 0.5).unwrap(), 3.0);
        assert_eq!(evaluate_eigenfunction(&e, 0, 0.25).unwrap(), 2.0);
        assert!(evaluate_eigenfunction(&e, 0, 1.5).is_err());
        assert!(evaluate_eigenfunction(&e, 1, 0.5).is_err());
    }

    #[test]
    fn rejects_asymmetric_and_negative_surfaces() {
        let g = unit_grid(3);
        let mut values = Matrix::identity(3);
        values[(0, 1)] = 0.5;
        let cov = CovarianceSurface {
            grid: g.clone(),
            values,
            sigma2: 0.0,
        };
        assert!(matches!(eigendecompose(&cov, 3), Err(FpcaError::NotSymmetric(_))));
        let cov = CovarianceSurface {
            grid: g,
            values: Matrix::identity(3).scale(-1.0),
            sigma2: 0.0,
        };
        assert!(matches!(eigendecompose(&cov, 3), Err(FpcaError::NoPositiveEigenvalues)));
    }
}
