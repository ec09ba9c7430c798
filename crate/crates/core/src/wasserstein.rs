//! Squared 2-Wasserstein distances between the laws used here: univariate
//! measures through their quantile functions, Gaussians on the line and on
//! the function grid, Gaussians against point masses, and the uniformity
//! statistic of a sample of probability-integral-transform values.
//!
//! Every function returns the *squared* distance.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};
use crate::linalg::Matrix;
use crate::predictive::{normal_cdf, normal_quantile, FunctionalGaussian};
use crate::scalar::{from_usize, lit, to_f64, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Real> Gaussian1D<T> {
    pub fn new(mean: T, variance: T) -> Result<Self> {
        if !(variance >= T::zero()) {
            return Err(FpcaError::InvalidArgument(format!("negative variance {variance}")));
        }
        Ok(Self { mean, variance })
    }

    pub fn sd(&self) -> T {
        self.variance.sqrt()
    }

    pub fn quantile(&self, p: T) -> T {
        self.mean + self.sd() * normal_quantile(p)
    }

    /// CDF; a zero-variance law is a point mass (CDF 1/2 at the atom).
    pub fn cdf(&self, x: T) -> T {
        if self.variance > T::zero() {
            normal_cdf((x - self.mean) / self.sd())
        } else if x > self.mean {
            T::one()
        } else if x < self.mean {
            T::zero()
        } else {
            lit(0.5)
        }
    }
}

/// Quantile function `p -> Q(p)` on `(0, 1)`.
#[derive(Clone)]
pub enum QuantileFunction<T> {
    Normal { mean: T, sd: T },
    Uniform { lower: T, upper: T },
    Atom(T),
    /// Empirical quantile of a sample; stored sorted.
    Empirical(Vec<T>),
    Custom(Arc<dyn Fn(T) -> T + Send + Sync>),
}

impl<T: Real> fmt::Debug for QuantileFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Normal { mean, sd } => write!(f, "Normal({mean}, {sd})"),
            Self::Uniform { lower, upper } => write!(f, "Uniform({lower}, {upper})"),
            Self::Atom(x) => write!(f, "Atom({x})"),
            Self::Empirical(z) => write!(f, "Empirical(n = {})", z.len()),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl<T: Real> QuantileFunction<T> {
    pub fn empirical(mut sample: Vec<T>) -> Result<Self> {
        if sample.is_empty() || sample.iter().any(|x| !x.is_finite()) {
            return Err(FpcaError::InvalidArgument("empirical quantile needs a finite, non-empty sample".into()));
        }
        sample.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        Ok(Self::Empirical(sample))
    }

    pub fn gaussian(g: Gaussian1D<T>) -> Self {
        Self::Normal {
            mean: g.mean,
            sd: g.sd(),
        }
    }

    pub fn eval(&self, p: T) -> T {
        match self {
            Self::Normal { mean, sd } => {
                if *sd == T::zero() {
                    *mean
                } else {
                    *mean + *sd * normal_quantile(p)
                }
            }
            Self::Uniform { lower, upper } => *lower + (*upper - *lower) * p,
            Self::Atom(x) => *x,
            Self::Empirical(z) => {
                // Generalised inverse: z_(ceil(n p)), 1-based.
                let n = z.len();
                let i = (p * from_usize(n)).ceil().to_usize().unwrap_or(1).clamp(1, n);
                z[i - 1]
            }
            Self::Custom(f) => f(p),
        }
    }

    /// Interior points of `(0, 1)` where the quantile function jumps.
    fn breakpoints(&self) -> Vec<T> {
        match self {
            Self::Empirical(z) => {
                let n = z.len();
                (1..n).map(|i| from_usize::<T>(i) / from_usize(n)).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `int_0^1 (Q1(p) - Q2(p))^2 dp` by Gauss-Legendre quadrature, applied
/// separately on each piece between jumps of the quantile functions.
/// A single smooth piece gets `n_quad` nodes; each piece of a split
/// interval gets 16.
pub fn w2_univariate<T: Real>(q1: &QuantileFunction<T>, q2: &QuantileFunction<T>, n_quad: usize) -> Result<T> {
    if n_quad < 16 {
        return Err(FpcaError::InvalidArgument(format!("n_quad = {n_quad} < 16")));
    }
    let mut cuts: Vec<T> = q1.breakpoints();
    cuts.extend(q2.breakpoints());
    cuts.push(T::zero());
    cuts.push(T::one());
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    cuts.dedup();
    let per_piece = if cuts.len() == 2 { n_quad } else { 16 };
    let (nodes, weights) = gauss_legendre(per_piece);
    let nodes: Vec<T> = nodes.into_iter().map(lit).collect();
    let weights: Vec<T> = weights.into_iter().map(lit).collect();
    let half = lit::<T>(0.5);
    let mut total = T::zero();
    let mut prev: Option<(T, T)> = None;
    let tol = lit::<T>(1e-10);
    for piece in cuts.windows(2) {
        let (a, b) = (piece[0], piece[1]);
        let (mid, rad) = ((a + b) * half, (b - a) * half);
        for (&x, &w) in nodes.iter().zip(&weights) {
            let p = mid + rad * x;
            let (v1, v2) = (q1.eval(p), q2.eval(p));
            if let Some((u1, u2)) = prev {
                let scale = T::one() + u1.abs().max(u2.abs());
                if v1 < u1 - tol * scale || v2 < u2 - tol * scale {
                    return Err(FpcaError::NonMonotoneQuantile(to_f64(p)));
                }
            }
            prev = Some((v1, v2));
            let d = v1 - v2;
            total = total + w * rad * d * d;
        }
    }
    Ok(total.max(T::zero()))
}

/// Closed form `(m1 - m2)^2 + (s1 - s2)^2`.
pub fn w2_gaussian_1d<T: Real>(g1: &Gaussian1D<T>, g2: &Gaussian1D<T>) -> T {
    let dm = g1.mean - g2.mean;
    let ds = g1.sd() - g2.sd();
    dm * dm + ds * ds
}

fn weighted_operator<T: Real>(fg: &FunctionalGaussian<T>) -> Matrix<T> {
    let sw: Vec<T> = fg.grid.weights().iter().map(|w| w.sqrt()).collect();
    let mut a = Matrix::from_fn(sw.len(), sw.len(), |i, j| sw[i] * fg.cov_kernel[(i, j)] * sw[j]);
    a.symmetrize();
    a
}

fn check_psd<T: Real>(values: &[T]) -> Result<()> {
    let max = values.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    if let Some(&min) = values.last() {
        if min < -lit::<T>(1e-6) * max {
            return Err(FpcaError::NotPsd(to_f64(min)));
        }
    }
    Ok(())
}

/// Gelbrich formula on the grid:
/// `||m1 - m2||^2 + tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2})`,
/// with operators represented in quadrature-weighted coordinates.
pub fn w2_gaussian_hilbert<T: Real>(g1: &FunctionalGaussian<T>, g2: &FunctionalGaussian<T>) -> Result<T> {
    if g1.grid != g2.grid {
        return Err(FpcaError::GridMismatch);
    }
    // Canonical argument order makes the result exactly symmetric.
    let (g1, g2) = if precedes(g2, g1) { (g2, g1) } else { (g1, g2) };
    let diff: Vec<T> = g1.mean_curve.iter().zip(&g2.mean_curve).map(|(&a, &b)| a - b).collect();
    let mean_term = g1.grid.inner(&diff, &diff);
    let a1 = weighted_operator(g1);
    let a2 = weighted_operator(g2);
    let e1 = a1.symmetric_eigen()?;
    check_psd(&e1.values)?;
    let e2 = a2.symmetric_eigen()?;
    check_psd(&e2.values)?;
    let top = e1.values.first().copied().unwrap_or(T::zero()).max(e2.values.first().copied().unwrap_or(T::zero()));
    let floor = T::epsilon() * from_usize::<T>(a1.rows()) * top;
    let root1 = e1.map_spectrum(|x| if x > floor { x.sqrt() } else { T::zero() });
    let mut cross = root1.matmul(&a2).matmul(&root1);
    cross.symmetrize();
    let ec = cross.symmetric_eigen()?;
    let floor2 = floor * top;
    let cross_trace: T = ec.values.iter().map(|&x| if x > floor2 { x.sqrt() } else { T::zero() }).sum();
    let clipped_trace = |e: &[T]| e.iter().map(|&x| x.max(T::zero())).sum::<T>();
    let t1 = clipped_trace(&e1.values);
    let t2 = clipped_trace(&e2.values);
    Ok((mean_term + t1 + t2 - lit::<T>(2.0) * cross_trace).max(T::zero()))
}

fn precedes<T: Real>(a: &FunctionalGaussian<T>, b: &FunctionalGaussian<T>) -> bool {
    let ka = a.mean_curve.iter().chain(a.cov_kernel.as_slice());
    let kb = b.mean_curve.iter().chain(b.cov_kernel.as_slice());
    ka.zip(kb).map(|(x, y)| to_f64(*x).total_cmp(&to_f64(*y))).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less)
}

/// Distance to a point mass: `||m - a||^2 + tr(C)`.
pub fn w2_gaussian_to_atom<T: Real>(g: &FunctionalGaussian<T>, atom: &[T]) -> Result<T> {
    if atom.len() != g.grid.len() {
        return Err(FpcaError::GridMismatch);
    }
    let diff: Vec<T> = g.mean_curve.iter().zip(atom).map(|(&m, &a)| m - a).collect();
    Ok(g.grid.inner(&diff, &diff) + g.trace())
}

/// Exact squared distance between the empirical law of `values` and
/// Uniform(0, 1):
/// `sum_i z_i^2/n - z_i (i^2 - (i-1)^2)/n^2 + (i^3 - (i-1)^3)/(3 n^3)`
/// over the order statistics `z_i`.
pub fn uniformity_statistic<T: Real>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(FpcaError::InvalidArgument("uniformity statistic needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(FpcaError::InvalidArgument(format!("value {v} outside [0, 1]")));
    }
    let mut z = values.to_vec();
    z.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n: T = from_usize(z.len());
    let (n2, n3) = (n * n, n * n * n);
    let three = lit::<T>(3.0);
    let mut total = T::zero();
    for (k, &zi) in z.iter().enumerate() {
        let i: T = from_usize(k + 1);
        let im = i - T::one();
        total = total + zi * zi / n - zi * (i * i - im * im) / n2 + (i * i * i - im * im * im) / (three * n3);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Domain, Grid};

    #[test]
    fn univariate_examples() {
        let n01 = QuantileFunction::Normal { mean: 0.0, sd: 1.0 };
        assert_eq!(w2_univariate::<f64>(&n01, &n01, 64).unwrap(), 0.0);
        let n34 = QuantileFunction::Normal { mean: 3.0, sd: 2.0 };
        assert!((w2_univariate::<f64>(&n01, &n34, 256).unwrap() - 10.0).abs() < 1e-3);
        let atom = QuantileFunction::Atom(0.5);
        let unif = QuantileFunction::Uniform { lower: 0.0, upper: 1.0 };
        assert!((w2_univariate::<f64>(&atom, &unif, 16).unwrap() - 1.0 / 12.0).abs() < 1e-12);
        assert!(w2_univariate::<f64>(&atom, &unif, 8).is_err());
        let bad = QuantileFunction::Custom(Arc::new(|p: f64| -p));
        assert!(matches!(w2_univariate::<f64>(&bad, &unif, 32), Err(FpcaError::NonMonotoneQuantile(_))));
    }

    #[test]
    fn gaussian_1d_closed_form() {
        let a = Gaussian1D::new(0.0, 1.0).unwrap();
        let b = Gaussian1D::new(3.0, 4.0).unwrap();
        assert_eq!(w2_gaussian_1d(&a, &a), 0.0);
        assert_eq!(w2_gaussian_1d(&a, &b), 10.0);
        let atoms = (Gaussian1D::new(1.0, 0.0).unwrap(), Gaussian1D::new(0.0, 0.0).unwrap());
        assert_eq!(w2_gaussian_1d(&atoms.0, &atoms.1), 1.0);
        assert!(Gaussian1D::new(0.0, -1.0).is_err());
    }

    #[test]
    fn uniformity_examples() {
        assert!((uniformity_statistic::<f64>(&[0.5]).unwrap() - 1.0 / 12.0).abs() < 1e-12);
        let n = 100;
        let mid: Vec<f64> = (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect();
        assert!(uniformity_statistic::<f64>(&mid).unwrap() < 1e-4);
        let zeros = vec![0.0; 37];
        assert!((uniformity_statistic::<f64>(&zeros).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(uniformity_statistic::<f64>(&[1.2]).is_err());
        assert!(uniformity_statistic::<f64>(&[]).is_err());
    }

    #[test]
    fn atom_distance_and_shift() {
        let grid = Grid::uniform(Domain::new(0.0, 1.0).unwrap(), 11).unwrap();
        let g = FunctionalGaussian::new(grid.clone(), vec![2.0; 11], Matrix::from_fn(11, 11, |_, _| 2.0 / 3.0)).unwrap();
        assert!((w2_gaussian_to_atom::<f64>(&g, &[0.0; 11]).unwrap() - (4.0 + 2.0 / 3.0)).abs() < 1e-12);
        let point = FunctionalGaussian::new(grid.clone(), vec![1.0; 11], Matrix::zeros(11, 11)).unwrap();
        assert_eq!(w2_gaussian_to_atom::<f64>(&point, &[1.0; 11]).unwrap(), 0.0);
        let shifted = FunctionalGaussian::new(grid, vec![2.5; 11], g.cov_kernel.clone()).unwrap();
        assert!((w2_gaussian_hilbert::<f64>(&g, &shifted).unwrap() - 0.25).abs() < 1e-8);
        assert!(w2_gaussian_hilbert::<f64>(&g, &g).unwrap() < 1e-8);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((integral - 2.0 / 9.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }
}
