//! Local-linear kernel smoothers for the mean function, the covariance
//! surface, the measurement-error variance and the predictor/response
//! cross-covariance.
//!
//! Observations are pooled with equal subject weights. Because the local
//! linear normal equations only involve kernel-weighted sums, observations
//! sharing the same time (or the same time pair for the covariance surface)
//! are aggregated into bins first; the resulting estimator is identical to
//! the unbinned one.
//!
//! When a smoothing window holds fewer than three distinct points, or the
//! local design is singular, the bandwidth at that evaluation point is
//! doubled, up to three times, before the fit is declared failed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data_model::{Domain, Grid, Responses, SparseFunctionalDataset};
use crate::error::{FpcaError, Result};
use crate::linalg::{solve3, Matrix};
use crate::scalar::{from_usize, lit, to_f64, Real};

const MAX_WIDENINGS: usize = 3;
const MIN_EFFECTIVE_POINTS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
    GaussianTruncated,
    Uniform,
}

/// Symmetric probability density supported on `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
}

// Standard normal density at 3u, truncated to [-1, 1] and renormalised.
const GAUSS_SCALE: f64 = 3.0;

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        Self { family }
    }

    pub fn epanechnikov() -> Self {
        Self::new(KernelFamily::Epanechnikov)
    }

    #[inline]
    pub fn weight<T: Real>(&self, u: T) -> T {
        let a = u.abs();
        if a > T::one() {
            return T::zero();
        }
        match self.family {
            KernelFamily::Epanechnikov => lit::<T>(0.75) * (T::one() - u * u),
            KernelFamily::Uniform => lit(0.5),
            KernelFamily::GaussianTruncated => {
                let norm = (2.0 * std::f64::consts::PI).sqrt() / GAUSS_SCALE
                    * statrs::function::erf::erf(GAUSS_SCALE / std::f64::consts::SQRT_2);
                let z = u * lit(GAUSS_SCALE);
                (-(z * z) * lit(0.5)).exp() / lit(norm)
            }
        }
    }
}

/// Bandwidths for the mean, covariance and cross-covariance smoothers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths<T> {
    pub mean: T,
    pub covariance: T,
    pub cross: T,
}

impl<T: Real> Bandwidths<T> {
    /// Rate-based defaults for `n` subjects: `(b-a) n^{-1/5}`, `(b-a) n^{-1/6}`
    /// and `(b-a) n^{-1/3}` scaled by the given multipliers, capped at
    /// `0.45 (b-a)`.
    pub fn from_rates(domain: Domain<T>, n: usize, multipliers: [T; 3]) -> Self {
        Self::from_counts(domain, n, n, multipliers)
    }

    /// Like [`Bandwidths::from_rates`], but the covariance rate runs in the
    /// number of within-subject pairs `P = sum n_i (n_i - 1) / 2`. With two
    /// observations per subject `P = n` and both rules agree.
    pub fn from_design(dataset: &SparseFunctionalDataset<T>, multipliers: [T; 3]) -> Self {
        let pairs = dataset.subjects().iter().map(|s| s.len() * s.len().saturating_sub(1) / 2).sum();
        Self::from_counts(dataset.domain(), dataset.len(), pairs, multipliers)
    }

    fn from_counts(domain: Domain<T>, n: usize, pairs: usize, multipliers: [T; 3]) -> Self {
        let w = domain.width();
        let cap = lit::<T>(0.45) * w;
        let rate = |m: T, count: usize, e: f64| {
            let h = m * w * from_usize::<T>(count.max(1)).powf(lit(e));
            if h > cap {
                log::warn!("rate bandwidth {h} capped at {cap}");
                cap
            } else {
                h
            }
        };
        Self {
            mean: rate(multipliers[0], n, -1.0 / 5.0),
            covariance: rate(multipliers[1], pairs, -1.0 / 6.0),
            cross: rate(multipliers[2], n, -1.0 / 3.0),
        }
    }

    pub fn rate_defaults(domain: Domain<T>, n: usize) -> Self {
        Self::from_rates(domain, n, [T::one(); 3])
    }

    pub fn validate(&self, domain: Domain<T>) -> Result<()> {
        let half = domain.width() * lit(0.5);
        for (name, h) in [("mean", self.mean), ("covariance", self.covariance), ("cross", self.cross)] {
            if !(h > T::zero()) || !(h < half) {
                return Err(FpcaError::InvalidArgument(format!(
                    "{name} bandwidth {h} must lie in (0, {half})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFunction<T> {
    pub grid: Grid<T>,
    pub values: Vec<T>,
}

impl<T: Real> MeanFunction<T> {
    pub fn at(&self, t: T) -> Result<T> {
        self.grid
            .interpolate(&self.values, t)
            .ok_or_else(|| FpcaError::InvalidArgument(format!("t = {t} outside the grid")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSurface<T> {
    pub grid: Grid<T>,
    pub values: Matrix<T>,
    pub sigma2: T,
}

impl<T: Real> CovarianceSurface<T> {
    /// Bilinear interpolation of the surface.
    pub fn at(&self, s: T, t: T) -> Result<T> {
        let out = || FpcaError::InvalidArgument(format!("({s}, {t}) outside the grid"));
        let (i, fs) = self.grid.locate(s).ok_or_else(out)?;
        let (j, ft) = self.grid.locate(t).ok_or_else(out)?;
        let one = T::one();
        let v = |a: usize, b: usize| self.values[(a, b)];
        let (i1, j1) = ((i + 1).min(self.grid.len() - 1), (j + 1).min(self.grid.len() - 1));
        Ok((one - fs) * (one - ft) * v(i, j) + fs * (one - ft) * v(i1, j) + (one - fs) * ft * v(i, j1) + fs * ft * v(i1, j1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCovariance<T> {
    pub grid: Grid<T>,
    pub values: Vec<T>,
}

// ---------------------------------------------------------------------------
// Binned one-dimensional local linear fits.

#[derive(Clone, Debug)]
struct Bins1<T> {
    times: Vec<T>,
    weight: Vec<T>,
    sum: Vec<T>,
}

impl<T: Real> Bins1<T> {
    fn from_points(mut pts: Vec<(T, T)>) -> Self {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
        let mut out = Self {
            times: Vec::new(),
            weight: Vec::new(),
            sum: Vec::new(),
        };
        for (t, y) in pts {
            if out.times.last() == Some(&t) {
                let k = out.times.len() - 1;
                out.weight[k] = out.weight[k] + T::one();
                out.sum[k] = out.sum[k] + y;
            } else {
                out.times.push(t);
                out.weight.push(T::one());
                out.sum.push(y);
            }
        }
        out
    }

    fn index_of(&self, t: T) -> Option<usize> {
        let k = self.times.partition_point(|&u| u < t);
        (k < self.times.len() && self.times[k] == t).then_some(k)
    }

    fn window(&self, t: T, h: T) -> std::ops::Range<usize> {
        let lo = self.times.partition_point(|&u| u < t - h);
        let hi = self.times.partition_point(|&u| u <= t + h);
        lo..hi
    }
}

/// Contribution of left-out observations to a bin: `(bin, weight, sum)`.
type Exclusion1<T> = (usize, T, T);

fn fit_1d<T: Real>(bins: &Bins1<T>, t: T, h: T, kernel: KernelSpec, exclude: &[Exclusion1<T>]) -> Option<T> {
    let (mut s0, mut s1, mut s2, mut r0, mut r1) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    let mut eff = 0usize;
    for b in bins.window(t, h) {
        let mut w = bins.weight[b];
        let mut y = bins.sum[b];
        for &(eb, ew, ey) in exclude {
            if eb == b {
                w = w - ew;
                y = y - ey;
            }
        }
        if !(w > lit(1e-9)) {
            continue;
        }
        let d = bins.times[b] - t;
        let k = kernel.weight(d / h);
        if !(k > T::zero()) {
            continue;
        }
        eff += 1;
        let kw = k * w;
        s0 = s0 + kw;
        s1 = s1 + kw * d;
        s2 = s2 + kw * d * d;
        r0 = r0 + k * y;
        r1 = r1 + k * y * d;
    }
    if eff < MIN_EFFECTIVE_POINTS {
        return None;
    }
    let det = s0 * s2 - s1 * s1;
    if !(det > lit::<T>(1e-12) * s0 * s2) {
        return None;
    }
    Some((s2 * r0 - s1 * r1) / det)
}

fn fit_1d_widening<T: Real>(
    bins: &Bins1<T>,
    t: T,
    h: T,
    kernel: KernelSpec,
    exclude: &[Exclusion1<T>],
) -> Option<(T, usize)> {
    let mut bw = h;
    for widenings in 0..=MAX_WIDENINGS {
        if let Some(v) = fit_1d(bins, t, bw, kernel, exclude) {
            return Some((v, widenings));
        }
        bw = bw + bw;
    }
    None
}

fn smooth_1d_on_grid<T: Real>(bins: &Bins1<T>, grid: &Grid<T>, h: T, kernel: KernelSpec, what: &str) -> Result<Vec<T>> {
    grid.points()
        .iter()
        .map(|&t| match fit_1d_widening(bins, t, h, kernel, &[]) {
            Some((v, 0)) => Ok(v),
            Some((v, k)) => {
                log::warn!("{what} smoother: window at t = {t} widened {k} time(s)");
                Ok(v)
            }
            None => Err(FpcaError::Estimation {
                at: format!("{t}"),
                message: format!("{what} smoother has too few points even after widening the window"),
            }),
        })
        .collect()
}

fn check_bandwidth<T: Real>(h: T, what: &str) -> Result<()> {
    if !(h > T::zero()) || !h.is_finite() {
        return Err(FpcaError::InvalidArgument(format!("{what} bandwidth must be positive, got {h}")));
    }
    Ok(())
}

/// Local linear estimate of the mean function on `grid`, pooling all
/// observations with equal subject weights.
pub fn estimate_mean<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    grid: &Grid<T>,
    h: T,
    kernel: KernelSpec,
) -> Result<MeanFunction<T>> {
    check_bandwidth(h, "mean")?;
    let bins = mean_bins(dataset);
    if bins.times.len() < 2 {
        return Err(FpcaError::InvalidData("mean estimation needs at least 2 distinct observation times".into()));
    }
    let values = smooth_1d_on_grid(&bins, grid, h, kernel, "mean")?;
    Ok(MeanFunction { grid: grid.clone(), values })
}

fn mean_bins<T: Real>(dataset: &SparseFunctionalDataset<T>) -> Bins1<T> {
    let pts = dataset
        .subjects()
        .iter()
        .flat_map(|s| s.times().iter().copied().zip(s.values().iter().copied()))
        .collect();
    Bins1::from_points(pts)
}

fn residuals<T: Real>(dataset: &SparseFunctionalDataset<T>, mean: &MeanFunction<T>) -> Result<Vec<Vec<T>>> {
    dataset
        .subjects()
        .iter()
        .map(|s| {
            s.times()
                .iter()
                .zip(s.values())
                .map(|(&t, &x)| Ok(x - mean.at(t)?))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Binned two-dimensional local linear fits for the covariance surface.

#[derive(Clone, Copy, Debug)]
struct PairEntry<T> {
    col: usize,
    weight: T,
    sum: T,
}

/// Raw covariances aggregated by (time, time) pair; rows in CSR layout.
#[derive(Clone, Debug)]
struct PairBins<T> {
    times: Vec<T>,
    offsets: Vec<usize>,
    entries: Vec<PairEntry<T>>,
}

impl<T: Real> PairBins<T> {
    fn new(times: Vec<T>, mut raw: HashMap<(usize, usize), (T, T)>) -> Self {
        let m = times.len();
        let mut keys: Vec<(usize, usize)> = raw.keys().copied().collect();
        keys.sort_unstable();
        let mut offsets = vec![0usize; m + 1];
        let mut entries = Vec::with_capacity(keys.len());
        for &(a, b) in &keys {
            offsets[a + 1] += 1;
            let (weight, sum) = raw.remove(&(a, b)).expect("key present");
            entries.push(PairEntry { col: b, weight, sum });
        }
        for a in 0..m {
            offsets[a + 1] += offsets[a];
        }
        Self { times, offsets, entries }
    }

    fn row(&self, a: usize) -> &[PairEntry<T>] {
        &self.entries[self.offsets[a]..self.offsets[a + 1]]
    }

    fn window(&self, t: T, h: T) -> std::ops::Range<usize> {
        let lo = self.times.partition_point(|&u| u < t - h);
        let hi = self.times.partition_point(|&u| u <= t + h);
        lo..hi
    }

    fn index_of(&self, t: T) -> Option<usize> {
        let k = self.times.partition_point(|&u| u < t);
        (k < self.times.len() && self.times[k] == t).then_some(k)
    }
}

#[derive(Clone, Copy, Default)]
struct Sums2<T> {
    s00: T,
    s10: T,
    s01: T,
    s20: T,
    s11: T,
    s02: T,
    r0: T,
    r1: T,
    r2: T,
    eff: usize,
}

impl<T: Real> Sums2<T> {
    fn zero() -> Self {
        let z = T::zero();
        Self {
            s00: z,
            s10: z,
            s01: z,
            s20: z,
            s11: z,
            s02: z,
            r0: z,
            r1: z,
            r2: z,
            eff: 0,
        }
    }

    fn add(&mut self, k: T, d: T, e: T, w: T, y: T) {
        let kw = k * w;
        self.s00 = self.s00 + kw;
        self.s10 = self.s10 + kw * d;
        self.s01 = self.s01 + kw * e;
        self.s20 = self.s20 + kw * d * d;
        self.s11 = self.s11 + kw * d * e;
        self.s02 = self.s02 + kw * e * e;
        self.r0 = self.r0 + k * y;
        self.r1 = self.r1 + k * y * d;
        self.r2 = self.r2 + k * y * e;
        self.eff += 1;
    }

    fn solve(&self) -> Option<T> {
        if self.eff < MIN_EFFECTIVE_POINTS {
            return None;
        }
        let a = [
            [self.s00, self.s10, self.s01],
            [self.s10, self.s20, self.s11],
            [self.s01, self.s11, self.s02],
        ];
        // Scale rows/columns so the pivot test is bandwidth independent.
        let d1 = self.s20.sqrt();
        let d2 = self.s02.sqrt();
        if !(d1 > T::zero() && d2 > T::zero() && self.s00 > T::zero()) {
            return None;
        }
        let d0 = self.s00.sqrt();
        let dd = [d0, d1, d2];
        let mut scaled = a;
        for i in 0..3 {
            for j in 0..3 {
                scaled[i][j] = a[i][j] / (dd[i] * dd[j]);
            }
        }
        let rhs = [self.r0 / d0, self.r1 / d1, self.r2 / d2];
        let x = solve3(scaled, rhs, lit(1e-9))?;
        Some(x[0] / d0)
    }
}

/// `(row bin, col bin, weight, sum)` contributions left out of a 2-D fit.
type Exclusion2<T> = (usize, usize, T, T);

fn fit_2d_direct<T: Real>(
    bins: &PairBins<T>,
    s: T,
    t: T,
    h: T,
    kernel: KernelSpec,
    exclude: &[Exclusion2<T>],
) -> Option<T> {
    let mut sums = Sums2::zero();
    let cols = bins.window(t, h);
    for a in bins.window(s, h) {
        let d = bins.times[a] - s;
        let ka = kernel.weight(d / h);
        if !(ka > T::zero()) {
            continue;
        }
        for entry in bins.row(a) {
            if !cols.contains(&entry.col) {
                continue;
            }
            let e = bins.times[entry.col] - t;
            let kb = kernel.weight(e / h);
            if !(kb > T::zero()) {
                continue;
            }
            let mut w = entry.weight;
            let mut y = entry.sum;
            for &(ea, eb, ew, ey) in exclude {
                if ea == a && eb == entry.col {
                    w = w - ew;
                    y = y - ey;
                }
            }
            if !(w > lit(1e-9)) {
                continue;
            }
            sums.add(ka * kb, d, e, w, y);
        }
    }
    sums.solve()
}

fn fit_2d_widening<T: Real>(
    bins: &PairBins<T>,
    s: T,
    t: T,
    h: T,
    kernel: KernelSpec,
    exclude: &[Exclusion2<T>],
) -> Option<(T, usize)> {
    let mut bw = h;
    for widenings in 0..=MAX_WIDENINGS {
        if let Some(v) = fit_2d_direct(bins, s, t, bw, kernel, exclude) {
            return Some((v, widenings));
        }
        bw = bw + bw;
    }
    None
}

/// Evaluates the 2-D smoother on grid x grid, aggregating over rows first so
/// each grid row costs one pass over the pair bins.
fn smooth_2d_on_grid<T: Real>(bins: &PairBins<T>, grid: &Grid<T>, h: T, kernel: KernelSpec) -> Result<Matrix<T>> {
    let g = grid.len();
    let m = bins.times.len();
    let mut out = Matrix::zeros(g, g);
    let z = T::zero();
    let mut p0 = vec![z; m];
    let mut p1 = vec![z; m];
    let mut p2 = vec![z; m];
    let mut q0 = vec![z; m];
    let mut q1 = vec![z; m];
    let mut cnt = vec![0usize; m];
    for (gi, &s) in grid.points().iter().enumerate() {
        p0.iter_mut().chain(p1.iter_mut()).chain(p2.iter_mut()).chain(q0.iter_mut()).chain(q1.iter_mut()).for_each(|x| *x = z);
        cnt.iter_mut().for_each(|c| *c = 0);
        for a in bins.window(s, h) {
            let d = bins.times[a] - s;
            let ka = kernel.weight(d / h);
            if !(ka > z) {
                continue;
            }
            for entry in bins.row(a) {
                let b = entry.col;
                let kw = ka * entry.weight;
                p0[b] = p0[b] + kw;
                p1[b] = p1[b] + kw * d;
                p2[b] = p2[b] + kw * d * d;
                q0[b] = q0[b] + ka * entry.sum;
                q1[b] = q1[b] + ka * entry.sum * d;
                cnt[b] += 1;
            }
        }
        for (gj, &t) in grid.points().iter().enumerate() {
            let mut sums = Sums2::zero();
            for b in bins.window(t, h) {
                if cnt[b] == 0 {
                    continue;
                }
                let e = bins.times[b] - t;
                let kb = kernel.weight(e / h);
                if !(kb > z) {
                    continue;
                }
                sums.s00 = sums.s00 + kb * p0[b];
                sums.s10 = sums.s10 + kb * p1[b];
                sums.s01 = sums.s01 + kb * e * p0[b];
                sums.s20 = sums.s20 + kb * p2[b];
                sums.s11 = sums.s11 + kb * e * p1[b];
                sums.s02 = sums.s02 + kb * e * e * p0[b];
                sums.r0 = sums.r0 + kb * q0[b];
                sums.r1 = sums.r1 + kb * q1[b];
                sums.r2 = sums.r2 + kb * e * q0[b];
                sums.eff += cnt[b];
            }
            out[(gi, gj)] = match sums.solve() {
                Some(v) => v,
                None => match fit_2d_widening(bins, s, t, h + h, kernel, &[]) {
                    Some((v, k)) => {
                        log::warn!("covariance smoother: window at ({s}, {t}) widened {} time(s)", k + 1);
                        v
                    }
                    None => {
                        return Err(FpcaError::Estimation {
                            at: format!("({s}, {t})"),
                            message: "covariance smoother has too few raw covariances even after widening".into(),
                        })
                    }
                },
            };
        }
    }
    Ok(out)
}

struct CovarianceBins<T> {
    pairs: PairBins<T>,
    diagonal: Bins1<T>,
}

fn covariance_bins<T: Real>(dataset: &SparseFunctionalDataset<T>, resid: &[Vec<T>]) -> CovarianceBins<T> {
    let mut all_times: Vec<T> = dataset
        .subjects()
        .iter()
        .filter(|s| s.len() >= 2)
        .flat_map(|s| s.times().iter().copied())
        .collect();
    all_times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    all_times.dedup();
    let index = |t: T| all_times.partition_point(|&u| u < t);
    let mut raw: HashMap<(usize, usize), (T, T)> = HashMap::new();
    let mut diag = Vec::new();
    for (s, r) in dataset.subjects().iter().zip(resid) {
        for (j, &tj) in s.times().iter().enumerate() {
            diag.push((tj, r[j] * r[j]));
        }
        if s.len() < 2 {
            continue;
        }
        let idx: Vec<usize> = s.times().iter().map(|&t| index(t)).collect();
        for j in 0..s.len() {
            for l in 0..s.len() {
                if j == l {
                    continue;
                }
                let e = raw.entry((idx[j], idx[l])).or_insert((T::zero(), T::zero()));
                e.0 = e.0 + T::one();
                e.1 = e.1 + r[j] * r[l];
            }
        }
    }
    CovarianceBins {
        pairs: PairBins::new(all_times, raw),
        diagonal: Bins1::from_points(diag),
    }
}

/// Local linear covariance surface from off-diagonal raw covariances, plus
/// the measurement-error variance from the smoothed diagonal.
///
/// `sigma2` is the average of `V(t) - G(t, t)` over grid points in the
/// middle half of the domain, where `V` smooths the squared residuals;
/// negative values are clipped to zero.
pub fn estimate_covariance<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    mean: &MeanFunction<T>,
    h: T,
    kernel: KernelSpec,
) -> Result<CovarianceSurface<T>> {
    check_bandwidth(h, "covariance")?;
    if !dataset.subjects().iter().any(|s| s.len() >= 2) {
        return Err(FpcaError::InvalidData("covariance estimation needs a subject with at least 2 observations".into()));
    }
    let grid = &mean.grid;
    let resid = residuals(dataset, mean)?;
    let bins = covariance_bins(dataset, &resid);
    let mut values = smooth_2d_on_grid(&bins.pairs, grid, h, kernel)?;
    values.symmetrize();

    let variance = smooth_1d_on_grid(&bins.diagonal, grid, h, kernel, "variance")?;
    let (lo, hi) = {
        let d = grid.domain();
        let q = d.width() * lit(0.25);
        (d.lower + q, d.upper - q)
    };
    let mut acc = T::zero();
    let mut count = 0usize;
    for (g, &t) in grid.points().iter().enumerate() {
        if t >= lo && t <= hi {
            acc = acc + variance[g] - values[(g, g)];
            count += 1;
        }
    }
    let mut sigma2 = if count > 0 { acc / from_usize(count) } else { T::zero() };
    if !(sigma2 >= T::zero()) {
        log::warn!("measurement error variance estimate {sigma2} clipped to 0");
        sigma2 = T::zero();
    }
    Ok(CovarianceSurface {
        grid: grid.clone(),
        values,
        sigma2,
    })
}

/// Subject index with its `(time, raw product)` pairs.
type SubjectPoints<T> = (usize, Vec<(T, T)>);

fn cross_points<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    responses: &Responses<T>,
    mean: &MeanFunction<T>,
) -> Result<Vec<SubjectPoints<T>>> {
    let mut out = Vec::new();
    let mut missing = 0usize;
    for (i, s) in dataset.subjects().iter().enumerate() {
        let Some(&y) = responses.get(&s.id) else {
            missing += 1;
            continue;
        };
        let pts = s
            .times()
            .iter()
            .zip(s.values())
            .map(|(&t, &x)| Ok((t, (x - mean.at(t)?) * y)))
            .collect::<Result<Vec<_>>>()?;
        out.push((i, pts));
    }
    if out.is_empty() {
        return Err(FpcaError::InvalidData("no subject has a response".into()));
    }
    if missing > 0 {
        log::warn!("cross-covariance: {missing} subject(s) without response excluded");
    }
    Ok(out)
}

/// Local linear estimate of `C(t) = Cov(X(t), Y)` from the raw products
/// `(X_ij - mu(T_ij)) Y_i`. Subjects without a response are skipped.
pub fn estimate_cross_covariance<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    responses: &Responses<T>,
    mean: &MeanFunction<T>,
    h: T,
    kernel: KernelSpec,
) -> Result<CrossCovariance<T>> {
    check_bandwidth(h, "cross-covariance")?;
    let pts = cross_points(dataset, responses, mean)?;
    let bins = Bins1::from_points(pts.into_iter().flat_map(|(_, p)| p).collect());
    if bins.times.len() < 2 {
        return Err(FpcaError::InvalidData("cross-covariance needs at least 2 distinct observation times".into()));
    }
    let values = smooth_1d_on_grid(&bins, &mean.grid, h, kernel, "cross-covariance")?;
    Ok(CrossCovariance {
        grid: mean.grid.clone(),
        values,
    })
}

// ---------------------------------------------------------------------------
// Bandwidth selection.

/// Which smoother a cross-validation run targets. The covariance and
/// cross-covariance smoothers need a fitted mean for their residuals.
#[derive(Clone, Copy, Debug)]
pub enum CvTarget<'a, T> {
    Mean,
    Covariance(&'a MeanFunction<T>),
    Cross(&'a MeanFunction<T>, &'a Responses<T>),
}

/// Subject-wise leave-one-out squared prediction error for each candidate.
/// `None` marks a candidate for which some held-out prediction could not be
/// formed even after widening.
pub fn cv_scores<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    candidates: &[T],
    target: CvTarget<'_, T>,
    kernel: KernelSpec,
) -> Result<Vec<Option<T>>> {
    for &h in candidates {
        check_bandwidth(h, "candidate")?;
    }
    match target {
        CvTarget::Mean => {
            let bins = mean_bins(dataset);
            let per_subject: Vec<Vec<(T, T)>> = dataset
                .subjects()
                .iter()
                .map(|s| s.times().iter().copied().zip(s.values().iter().copied()).collect())
                .collect();
            Ok(candidates.iter().map(|&h| loo_1d(&bins, &per_subject, h, kernel)).collect())
        }
        CvTarget::Cross(mean, responses) => {
            let pts = cross_points(dataset, responses, mean)?;
            let per_subject: Vec<Vec<(T, T)>> = pts.into_iter().map(|(_, p)| p).collect();
            let bins = Bins1::from_points(per_subject.iter().flatten().copied().collect());
            Ok(candidates.iter().map(|&h| loo_1d(&bins, &per_subject, h, kernel)).collect())
        }
        CvTarget::Covariance(mean) => {
            let resid = residuals(dataset, mean)?;
            let bins = covariance_bins(dataset, &resid);
            Ok(candidates
                .iter()
                .map(|&h| loo_2d(&bins.pairs, dataset, &resid, h, kernel))
                .collect())
        }
    }
}

fn loo_1d<T: Real>(bins: &Bins1<T>, per_subject: &[Vec<(T, T)>], h: T, kernel: KernelSpec) -> Option<T> {
    let mut sse = T::zero();
    let mut n = 0usize;
    for pts in per_subject {
        let mut excl: Vec<Exclusion1<T>> = Vec::with_capacity(pts.len());
        for &(t, y) in pts {
            let b = bins.index_of(t)?;
            match excl.iter_mut().find(|e| e.0 == b) {
                Some(e) => {
                    e.1 = e.1 + T::one();
                    e.2 = e.2 + y;
                }
                None => excl.push((b, T::one(), y)),
            }
        }
        for &(t, y) in pts {
            let (pred, _) = fit_1d_widening(bins, t, h, kernel, &excl)?;
            let r = y - pred;
            sse = sse + r * r;
            n += 1;
        }
    }
    (n > 0).then(|| sse / from_usize(n))
}

fn loo_2d<T: Real>(
    bins: &PairBins<T>,
    dataset: &SparseFunctionalDataset<T>,
    resid: &[Vec<T>],
    h: T,
    kernel: KernelSpec,
) -> Option<T> {
    let mut sse = T::zero();
    let mut n = 0usize;
    for (s, r) in dataset.subjects().iter().zip(resid) {
        if s.len() < 2 {
            continue;
        }
        let idx: Vec<usize> = s.times().iter().map(|&t| bins.index_of(t)).collect::<Option<_>>()?;
        let mut excl: Vec<Exclusion2<T>> = Vec::new();
        for j in 0..s.len() {
            for l in 0..s.len() {
                if j == l {
                    continue;
                }
                let y = r[j] * r[l];
                match excl.iter_mut().find(|e| e.0 == idx[j] && e.1 == idx[l]) {
                    Some(e) => {
                        e.2 = e.2 + T::one();
                        e.3 = e.3 + y;
                    }
                    None => excl.push((idx[j], idx[l], T::one(), y)),
                }
            }
        }
        let times = s.times();
        for j in 0..s.len() {
            for l in 0..s.len() {
                if j == l {
                    continue;
                }
                let (pred, _) = fit_2d_widening(bins, times[j], times[l], h, kernel, &excl)?;
                let e = r[j] * r[l] - pred;
                sse = sse + e * e;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sse / from_usize(n))
}

/// Picks the candidate bandwidth with the smallest leave-one-subject-out
/// error; ties go to the smaller bandwidth.
pub fn select_bandwidth_cv<T: Real>(
    dataset: &SparseFunctionalDataset<T>,
    candidates: &[T],
    target: CvTarget<'_, T>,
    kernel: KernelSpec,
) -> Result<T> {
    match candidates {
        [] => return Err(FpcaError::InvalidArgument("no candidate bandwidths".into())),
        [only] => {
            check_bandwidth(*only, "candidate")?;
            return Ok(*only);
        }
        _ => {}
    }
    if dataset.len() < 10 {
        return Err(FpcaError::InvalidArgument("cross-validation needs at least 10 subjects".into()));
    }
    let scores = cv_scores(dataset, candidates, target, kernel)?;
    let mut best: Option<(T, T)> = None;
    for (&h, score) in candidates.iter().zip(scores) {
        let Some(score) = score.filter(|s| s.is_finite()) else {
            continue;
        };
        best = match best {
            Some((bh, bs)) if bs < score || (bs == score && bh <= h) => Some((bh, bs)),
            _ => Some((h, score)),
        };
    }
    best.map(|(h, _)| h).ok_or_else(|| FpcaError::Estimation {
        at: "all candidates".into(),
        message: format!(
            "every candidate bandwidth is degenerate (tried {})",
            candidates.iter().map(|h| to_f64(*h).to_string()).collect::<Vec<_>>().join(", ")
        ),
    })
}
