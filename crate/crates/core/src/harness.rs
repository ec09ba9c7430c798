//! Gaussian-process simulation and Monte Carlo experiment drivers.
//!
//! Everything here works in `f64`. Each replicate draws from its own
//! ChaCha stream keyed by the run seed and the cell, with the replicate
//! index as stream id, so results do not depend on the worker count.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Domain, Grid, Responses, SparseFunctionalDataset, SubjectRecord};
use crate::error::{FpcaError, Result};
use crate::flm::{fit_flm, population_discrepancy, uniformity_diagnostic, wasserstein_discrepancy, FlmModel, PopulationDiscrepancy, UniformityTargets};
use crate::linalg::Matrix;
use crate::predictive::{blup_scores, contour_area, contour_ellipse, functional_from_scores, LatentModel};
use crate::smoothing::{Bandwidths, CrossCovariance, KernelFamily, KernelSpec};
use crate::spectral::{fit_fpca, FittedFpcaModel, FpcaOptions, Truncation};
use crate::wasserstein::w2_gaussian_to_atom;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "FPCA_PREDICT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    /// `phi_1 = -cos(pi x / L) sqrt(2/L)`, `phi_k = sin((2k-3) pi x / L) sqrt(2/L)`.
    Trig,
    /// Karhunen-Loeve basis of Brownian motion on the domain.
    Brownian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanPreset {
    /// `t / 2`
    HalfT,
    /// `t + sin t`
    TPlusSin,
    Zero,
}

impl MeanPreset {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            MeanPreset::HalfT => 0.5 * t,
            MeanPreset::TPlusSin => t + t.sin(),
            MeanPreset::Zero => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Design {
    /// `m0` distinct times drawn without replacement from the design grid.
    Fixed { m0: usize },
    /// `n_i` uniform on `min..=max`, times drawn as for `Fixed`.
    Random { min: usize, max: usize },
    /// `m0` independent uniform times on the whole domain.
    Continuous { m0: usize },
}

impl Design {
    fn max_count(self) -> usize {
        match self {
            Design::Fixed { m0 } | Design::Continuous { m0 } => m0,
            Design::Random { max, .. } => max,
        }
    }

    fn min_count(self) -> usize {
        match self {
            Design::Fixed { m0 } | Design::Continuous { m0 } => m0,
            Design::Random { min, .. } => min,
        }
    }
}

/// Sample size the covariance bandwidth rate is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// `n^{-1/6}` in the number of subjects.
    Subjects,
    /// `P^{-1/6}` in the number of within-subject pairs.
    Pairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub basis: Basis,
    pub k_true: usize,
    /// `None` uses the basis default (`4 / (1 + k)^2` or the Brownian spectrum).
    pub eigenvalues: Option<Vec<f64>>,
    pub mean: MeanPreset,
    pub sigma: f64,
    pub sigma_y: f64,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub n: usize,
    pub design: Design,
    /// Points in the equispaced design grid the `Fixed`/`Random` designs sample from.
    pub design_grid: usize,
    pub domain: [f64; 2],
    /// Points in the estimation grid.
    pub grid_points: usize,
    pub seed: u64,
    pub replicates: usize,
    /// Multipliers on the rate bandwidths for mean, covariance and cross-covariance.
    pub bandwidth_multipliers: [f64; 3],
    pub bandwidth_rule: BandwidthRule,
    pub kernel: KernelFamily,
    /// `K = M` used in the experiments; `None` selects by FVE.
    pub components: Option<usize>,
    pub fve: f64,
    /// Eigenpairs kept from the fitted covariance; all of them enter `Sigma_i`.
    pub max_components: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::tables()
    }
}

impl SimConfig {
    /// The four-component trigonometric setting used for the tables.
    pub fn tables() -> Self {
        Self {
            basis: Basis::Trig,
            k_true: 4,
            eigenvalues: None,
            mean: MeanPreset::HalfT,
            sigma: 0.5,
            sigma_y: 0.5,
            beta0: 0.5,
            beta: vec![1.0, -1.0, 0.5, -0.5],
            n: 500,
            design: Design::Fixed { m0: 2 },
            design_grid: 100,
            domain: [0.0, 10.0],
            grid_points: 51,
            seed: 7,
            replicates: 200,
            bandwidth_multipliers: DEFAULT_MULTIPLIERS,
            bandwidth_rule: BandwidthRule::Pairs,
            kernel: KernelFamily::Epanechnikov,
            components: Some(4),
            fve: 0.95,
            max_components: 20,
        }
    }

    /// Two components, `mu(t) = t + sin t` and continuous uniform times.
    pub fn figure1() -> Self {
        Self {
            k_true: 2,
            eigenvalues: Some(vec![1.0, 4.0 / 9.0]),
            mean: MeanPreset::TPlusSin,
            beta: vec![1.0, -1.0],
            design: Design::Continuous { m0: 2 },
            components: Some(2),
            ..Self::tables()
        }
    }

    /// Finite-rank setting for the rate studies: dense 1000-point design grid.
    pub fn rates() -> Self {
        Self {
            design_grid: 1000,
            design: Design::Fixed { m0: 10 },
            ..Self::tables()
        }
    }

    pub fn brownian(k_true: usize) -> Self {
        Self {
            basis: Basis::Brownian,
            k_true,
            eigenvalues: None,
            mean: MeanPreset::Zero,
            beta: vec![0.0; k_true],
            domain: [0.0, 1.0],
            components: Some(k_true),
            ..Self::tables()
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn domain(&self) -> Result<Domain<f64>> {
        Domain::new(self.domain[0], self.domain[1])
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        match &self.eigenvalues {
            Some(v) => v.clone(),
            None => (1..=self.k_true)
                .map(|k| match self.basis {
                    Basis::Trig => 4.0 / ((1 + k) as f64).powi(2),
                    Basis::Brownian => {
                        let l = self.domain[1] - self.domain[0];
                        l * l / ((k as f64 - 0.5).powi(2) * PI * PI)
                    }
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FpcaError::InvalidArgument(m));
        self.domain()?;
        if self.k_true == 0 {
            return bad("k_true must be at least 1".into());
        }
        let lambda = self.eigenvalues();
        if lambda.len() != self.k_true {
            return bad(format!("{} eigenvalues for k_true = {}", lambda.len(), self.k_true));
        }
        if lambda.iter().any(|&l| !(l > 0.0)) || lambda.windows(2).any(|w| w[1] > w[0]) {
            return bad("eigenvalues must be positive and nonincreasing".into());
        }
        if self.beta.len() != self.k_true {
            return bad(format!("{} slope coefficients for k_true = {}", self.beta.len(), self.k_true));
        }
        if !(self.sigma >= 0.0) || !(self.sigma_y >= 0.0) {
            return bad("noise standard deviations must be nonnegative".into());
        }
        if self.n == 0 || self.replicates == 0 {
            return bad("n and replicates must be at least 1".into());
        }
        if self.design.min_count() == 0 || self.design.min_count() > self.design.max_count() {
            return bad(format!("invalid design {:?}", self.design));
        }
        if !matches!(self.design, Design::Continuous { .. }) && self.design.max_count() > self.design_grid {
            return bad(format!(
                "design asks for {} times but the design grid has {} points",
                self.design.max_count(),
                self.design_grid
            ));
        }
        if self.grid_points < 2 || self.design_grid < 2 {
            return bad("grids need at least 2 points".into());
        }
        if self.bandwidth_multipliers.iter().any(|&m| !(m > 0.0)) {
            return bad("bandwidth multipliers must be positive".into());
        }
        if let Some(k) = self.components {
            if k == 0 {
                return bad("components must be at least 1".into());
            }
        }
        if self.components.is_some_and(|k| k > self.max_components) {
            return bad("components cannot exceed max_components".into());
        }
        if !(self.fve > 0.0 && self.fve <= 1.0) {
            return bad("fve must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// Rate bandwidths for a simulated sample, following `bandwidth_rule`.
    pub fn bandwidths(&self, dataset: &SparseFunctionalDataset<f64>) -> Result<Bandwidths<f64>> {
        let bw = match self.bandwidth_rule {
            BandwidthRule::Subjects => Bandwidths::from_rates(dataset.domain(), dataset.len(), self.bandwidth_multipliers),
            BandwidthRule::Pairs => Bandwidths::from_design(dataset, self.bandwidth_multipliers),
        };
        bw.validate(dataset.domain())?;
        Ok(bw)
    }

    pub fn fpca_options(&self, dataset: &SparseFunctionalDataset<f64>) -> Result<FpcaOptions<f64>> {
        Ok(FpcaOptions {
            grid_points: self.grid_points,
            kernel: KernelSpec::new(self.kernel),
            bandwidths: Some(self.bandwidths(dataset)?),
            truncation: match self.components {
                Some(k) => Truncation::Fixed(k),
                None => Truncation::Fve(self.fve),
            },
            max_components: self.max_components,
        })
    }

    fn design_points(&self) -> Vec<f64> {
        let [a, b] = self.domain;
        let g = self.design_grid;
        (0..g).map(|i| a + (b - a) * i as f64 / (g - 1) as f64).collect()
    }
}

/// Rate-bandwidth multipliers used unless a config overrides them.
pub const DEFAULT_MULTIPLIERS: [f64; 3] = [0.5, 0.6, 1.0];

/// Known generative truth exposed through [`LatentModel`].
#[derive(Clone, Debug)]
pub struct TruePopulation {
    grid: Grid<f64>,
    basis: Basis,
    domain: [f64; 2],
    lambda: Vec<f64>,
    mean: MeanPreset,
    sigma2: f64,
    phi_grid: Vec<Vec<f64>>,
    mean_grid: Vec<f64>,
}

impl TruePopulation {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let grid = Grid::uniform(config.domain()?, config.grid_points)?;
        let lambda = config.eigenvalues();
        let phi_grid = (0..lambda.len())
            .map(|k| grid.points().iter().map(|&t| basis_value(config.basis, config.domain, k, t)).collect())
            .collect();
        let mean_grid = grid.points().iter().map(|&t| config.mean.eval(t)).collect();
        Ok(Self {
            grid,
            basis: config.basis,
            domain: config.domain,
            lambda,
            mean: config.mean,
            sigma2: config.sigma * config.sigma,
            phi_grid,
            mean_grid,
        })
    }

    pub fn phi(&self, k: usize, t: f64) -> f64 {
        basis_value(self.basis, self.domain, k, t)
    }

    /// Latent centred path `sum_k xi_k phi_k` on the grid.
    pub fn centred_path(&self, scores: &[f64]) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| scores.iter().zip(&self.phi_grid).map(|(x, p)| x * p[i]).sum())
            .collect()
    }
}

/// Eigenfunction `k` (0-based) of the basis at `t`.
pub fn basis_value(basis: Basis, domain: [f64; 2], k: usize, t: f64) -> f64 {
    let l = domain[1] - domain[0];
    let x = (t - domain[0]) / l;
    let c = (2.0 / l).sqrt();
    match basis {
        Basis::Trig if k == 0 => -c * (PI * x).cos(),
        Basis::Trig => c * ((2 * k - 1) as f64 * PI * x).sin(),
        Basis::Brownian => c * ((k as f64 + 0.5) * PI * x).sin(),
    }
}

impl LatentModel<f64> for TruePopulation {
    fn grid(&self) -> &Grid<f64> {
        &self.grid
    }

    fn eigenvalues(&self) -> &[f64] {
        &self.lambda
    }

    fn eigenfunction_at(&self, k: usize, t: f64) -> Result<f64> {
        Ok(self.phi(k, t))
    }

    fn eigenfunction_on_grid(&self, k: usize) -> Vec<f64> {
        self.phi_grid[k].clone()
    }

    fn mean_at(&self, t: f64) -> Result<f64> {
        Ok(self.mean.eval(t))
    }

    fn mean_on_grid(&self) -> Vec<f64> {
        self.mean_grid.clone()
    }

    fn noise_variance(&self) -> f64 {
        self.sigma2
    }

    fn covariance_at(&self, s: f64, t: f64) -> Result<f64> {
        Ok((0..self.lambda.len()).map(|k| self.lambda[k] * self.phi(k, s) * self.phi(k, t)).sum())
    }

    fn covariance_on_grid(&self) -> Matrix<f64> {
        let g = self.grid.len();
        Matrix::from_fn(g, g, |i, j| {
            (0..self.lambda.len())
                .map(|k| self.lambda[k] * self.phi_grid[k][i] * self.phi_grid[k][j])
                .sum()
        })
    }
}

/// Slope model built from the true coefficients.
pub fn true_flm(config: &SimConfig, truth: &TruePopulation) -> FlmModel<f64> {
    let grid = truth.grid().clone();
    let lambda = config.eigenvalues();
    let beta = config.beta.clone();
    let m = beta.len();
    let beta_curve = (0..grid.len())
        .map(|i| (0..m).map(|k| beta[k] * truth.phi_grid[k][i]).sum())
        .collect();
    let cross = (0..grid.len())
        .map(|i| (0..m).map(|k| lambda[k] * beta[k] * truth.phi_grid[k][i]).sum())
        .collect();
    FlmModel {
        beta0: config.beta0,
        sigma_k: lambda.iter().zip(&beta).map(|(l, b)| l * b).collect(),
        beta_k: beta,
        eigenvalues: lambda,
        m,
        grid: grid.clone(),
        beta_curve,
        cross_covariance: CrossCovariance { grid, values: cross },
    }
}

/// Simulated sample together with the latent truth behind it.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub dataset: SparseFunctionalDataset<f64>,
    /// `xi_ik`, one row per subject.
    pub scores: Vec<Vec<f64>>,
    /// `eta_i = beta_0 + sum_k beta_k xi_ik`.
    pub eta: Responses<f64>,
    pub responses: Responses<f64>,
}

impl SimulatedData {
    /// Centred latent paths on the truth's grid, one per subject.
    pub fn paths(&self, truth: &TruePopulation) -> Vec<Vec<f64>> {
        self.scores.iter().map(|s| truth.centred_path(s)).collect()
    }
}

fn subject_id(i: usize) -> String {
    format!("s{i:05}")
}

fn draw_scores<R: Rng>(lambda: &[f64], rng: &mut R) -> Vec<f64> {
    lambda
        .iter()
        .map(|&l| l.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn draw_times<R: Rng>(config: &SimConfig, design_points: &[f64], rng: &mut R) -> Vec<f64> {
    let count = match config.design {
        Design::Fixed { m0 } | Design::Continuous { m0 } => m0,
        Design::Random { min, max } => rng.random_range(min..=max),
    };
    let mut times: Vec<f64> = match config.design {
        Design::Continuous { .. } => (0..count)
            .map(|_| rng.random_range(config.domain[0]..=config.domain[1]))
            .collect(),
        _ => sample_indices(rng, design_points.len(), count)
            .into_iter()
            .map(|i| design_points[i])
            .collect(),
    };
    times.sort_by(f64::total_cmp);
    times
}

fn observe<R: Rng>(config: &SimConfig, times: &[f64], scores: &[f64], rng: &mut R) -> Vec<f64> {
    let k = scores.len();
    times
        .iter()
        .map(|&t| {
            let latent: f64 = (0..k).map(|c| scores[c] * basis_value(config.basis, config.domain, c, t)).sum();
            config.mean.eval(t) + latent + config.sigma * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Draws one dataset of `config.n` subjects.
pub fn simulate_dataset<R: Rng>(config: &SimConfig, rng: &mut R) -> Result<SimulatedData> {
    config.validate()?;
    let lambda = config.eigenvalues();
    let design = config.design_points();
    let mut subjects = Vec::with_capacity(config.n);
    let mut all_scores = Vec::with_capacity(config.n);
    let mut eta = Responses::new();
    let mut responses = Responses::new();
    for i in 0..config.n {
        let scores = draw_scores(&lambda, rng);
        let times = draw_times(config, &design, rng);
        let values = observe(config, &times, &scores, rng);
        let id = subject_id(i);
        let e = config.beta0 + scores.iter().zip(&config.beta).map(|(x, b)| x * b).sum::<f64>();
        let y = e + config.sigma_y * rng.sample::<f64, _>(StandardNormal);
        eta.insert(id.clone(), e);
        responses.insert(id.clone(), y);
        subjects.push(SubjectRecord::new(id, times, values)?);
        all_scores.push(scores);
    }
    let dataset = SparseFunctionalDataset::new(subjects, config.domain()?, responses.clone())?;
    Ok(SimulatedData {
        dataset,
        scores: all_scores,
        eta,
        responses,
    })
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for replicate `rep` of experiment cell `cell`.
pub fn replicate_rng(seed: u64, cell: u64, rep: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(mix(seed, cell));
    rng.set_stream(rep);
    rng
}

/// Resolves the worker count: explicit request, then the environment
/// variable, then rayon's default.
pub fn resolve_threads(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|&t| t > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(threads))
        .build()
        .map_err(|e| FpcaError::Experiment(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: String,
    pub mean: f64,
    pub se: f64,
    pub n_rep: usize,
    pub fail_count: usize,
}

impl ResultRow {
    fn from_values(cell: String, values: &[f64], fail_count: usize) -> Self {
        let n = values.len();
        let mean = if n > 0 { values.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            cell,
            mean,
            se,
            n_rep: n,
            fail_count,
        }
    }

    /// A cell is invalid when more than 5% of its replicates failed.
    pub fn is_valid(&self) -> bool {
        let total = self.n_rep + self.fail_count;
        total > 0 && self.fail_count * 20 <= total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn row(&self, cell: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// CSV with header `cell,mean,se,n_rep,fail_count`; `scale` multiplies
    /// mean and standard error (1000 for the uniformity table).
    pub fn to_csv(&self, scale: f64) -> String {
        let mut out = String::from("cell,mean,se,n_rep,fail_count\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.cell, r.mean * scale, r.se * scale, r.n_rep, r.fail_count);
        }
        out
    }
}

/// One cell of the noise-by-design-by-size tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub sigma: f64,
    pub sigma_y: f64,
    pub m0: usize,
    pub n: usize,
}

impl TableCell {
    pub fn design_name(&self) -> &'static str {
        match self.m0 {
            2 => "very_sparse",
            8 => "medium",
            20 => "dense",
            _ => "custom",
        }
    }

    pub fn label(&self) -> String {
        format!("sigma={};sigma_y={};design={};n={}", self.sigma, self.sigma_y, self.design_name(), self.n)
    }

    pub fn apply(&self, base: &SimConfig) -> SimConfig {
        SimConfig {
            sigma: self.sigma,
            sigma_y: self.sigma_y,
            design: Design::Fixed { m0: self.m0 },
            n: self.n,
            ..base.clone()
        }
    }
}

/// The 18 table cells: `(sigma, sigma_Y)` in {(0.5, 0.5), (0.5, 1), (1, 0.5)},
/// `m0` in {2, 8, 20}, `n` in {500, 2000}.
pub fn table_cells() -> Vec<TableCell> {
    let mut cells = Vec::new();
    for (sigma, sigma_y) in [(0.5, 0.5), (0.5, 1.0), (1.0, 0.5)] {
        for m0 in [2, 8, 20] {
            for n in [500, 2000] {
                cells.push(TableCell { sigma, sigma_y, m0, n });
            }
        }
    }
    cells
}

/// Whether a replicate estimates everything or conditions on the truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Estimated,
    Oracle,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides `config.replicates`.
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
    pub mode: Mode,
    /// Restricts the run to these cells; `None` runs all 18.
    pub cells: Option<Vec<TableCell>>,
}

/// Per-replicate table statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub discrepancy: f64,
    pub uniformity: f64,
}

/// Full pipeline on one simulated sample: FPCA, slope with `M = K`,
/// discrepancy and the uniformity statistic at the true linear predictors.
pub fn run_replicate<R: Rng>(config: &SimConfig, mode: Mode, rng: &mut R) -> Result<ReplicateOutcome> {
    let sim = simulate_dataset(config, rng)?;
    match mode {
        Mode::Estimated => {
            let model = fit_fpca(&sim.dataset, &config.fpca_options(&sim.dataset)?)?;
            let k = model.k;
            let h = config.bandwidths(&sim.dataset)?.cross;
            let flm = fit_flm(&model, &model.mean, &sim.dataset, &sim.responses, k, h, KernelSpec::new(config.kernel))?;
            evaluate(&flm, &model, &sim, k)
        }
        Mode::Oracle => {
            let truth = TruePopulation::new(config)?;
            let flm = true_flm(config, &truth);
            let k = config.components.unwrap_or(config.k_true).min(config.k_true);
            evaluate(&flm, &truth, &sim, k)
        }
    }
}

fn evaluate<M: LatentModel<f64>>(flm: &FlmModel<f64>, model: &M, sim: &SimulatedData, k: usize) -> Result<ReplicateOutcome> {
    let d = wasserstein_discrepancy(flm, model, &sim.dataset, &sim.responses, k)?;
    let u = uniformity_diagnostic(flm, model, &sim.dataset, UniformityTargets::TrueLinearPredictor(&sim.eta), k)?;
    Ok(ReplicateOutcome {
        discrepancy: d.total,
        uniformity: u.statistic,
    })
}

/// Replicate outcomes for every requested cell, shared by both tables.
#[derive(Clone, Debug)]
pub struct TableRun {
    pub cells: Vec<TableCell>,
    pub outcomes: Vec<Vec<std::result::Result<ReplicateOutcome, String>>>,
}

impl TableRun {
    fn summarise(&self, pick: impl Fn(&ReplicateOutcome) -> f64) -> ExperimentResult {
        let rows = self
            .cells
            .iter()
            .zip(&self.outcomes)
            .map(|(cell, outs)| {
                let values: Vec<f64> = outs.iter().filter_map(|o| o.as_ref().ok()).map(&pick).collect();
                let fails = outs.len() - values.len();
                let row = ResultRow::from_values(cell.label(), &values, fails);
                if !row.is_valid() {
                    log::warn!("cell {} invalid: {fails} of {} replicates failed", row.cell, outs.len());
                }
                row
            })
            .collect();
        ExperimentResult { rows }
    }

    /// Replicate means of the Wasserstein discrepancy.
    pub fn table1(&self) -> ExperimentResult {
        self.summarise(|o| o.discrepancy)
    }

    /// Replicate means of the uniformity statistic (unscaled).
    pub fn table2(&self) -> ExperimentResult {
        self.summarise(|o| o.uniformity)
    }
}

/// Runs every replicate of every cell once; both tables are read off the
/// same outcomes.
pub fn run_tables(base: &SimConfig, options: &RunOptions) -> Result<TableRun> {
    base.validate()?;
    let cells = options.cells.clone().unwrap_or_else(table_cells);
    let reps = options.replicates.unwrap_or(base.replicates);
    if reps == 0 {
        return Err(FpcaError::InvalidArgument("replicates must be at least 1".into()));
    }
    if reps < 50 {
        log::warn!("{reps} replicates give unreliable standard errors");
    }
    let all = table_cells();
    let configs: Vec<(u64, SimConfig)> = cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| {
            let index = all.iter().position(|c| c == cell).unwrap_or(all.len() + ci);
            (index as u64, cell.apply(base))
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let seed = base.seed;
    let mode = options.mode;
    let flat: Vec<std::result::Result<ReplicateOutcome, String>> = with_pool(options.threads, || {
        jobs.par_iter()
            .map(|&(c, r)| {
                let (index, cfg) = &configs[c];
                let mut rng = replicate_rng(seed, *index, r as u64);
                run_replicate(cfg, mode, &mut rng).map_err(|e| e.to_string())
            })
            .collect()
    })?;
    let outcomes = flat.chunks(reps).map(|c| c.to_vec()).collect();
    Ok(TableRun { cells, outcomes })
}

pub fn run_table1(base: &SimConfig, options: &RunOptions) -> Result<ExperimentResult> {
    Ok(run_tables(base, options)?.table1())
}

pub fn run_table2(base: &SimConfig, options: &RunOptions) -> Result<ExperimentResult> {
    Ok(run_tables(base, options)?.table2())
}

/// Monte Carlo population discrepancy `D_K` for the config's truth, over
/// `n_mc` design draws.
pub fn population_discrepancy_oracle(config: &SimConfig, k: usize, n_mc: usize) -> Result<PopulationDiscrepancy<f64>> {
    let truth = TruePopulation::new(config)?;
    let design = config.design_points();
    let mut rng = replicate_rng(config.seed, u64::MAX, 0);
    let designs: Vec<Vec<f64>> = (0..n_mc).map(|_| draw_times(config, &design, &mut rng)).collect();
    population_discrepancy(&truth, &config.beta, config.sigma_y * config.sigma_y, k, &designs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageDraw {
    pub n_i: usize,
    pub draw: usize,
    pub center: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub area: f64,
    pub contour: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageFigure {
    pub true_scores: [f64; 2],
    pub level: f64,
    pub draws: Vec<ShrinkageDraw>,
}

impl ShrinkageFigure {
    pub fn mean_area(&self, n_i: usize) -> f64 {
        let areas: Vec<f64> = self.draws.iter().filter(|d| d.n_i == n_i).map(|d| d.area).collect();
        areas.iter().sum::<f64>() / areas.len().max(1) as f64
    }

    /// `(n_i, draw, x, y)` rows for plotting, with the true scores as draw `-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_i,draw,x,y\n");
        let _ = writeln!(out, "0,-1,{},{}", self.true_scores[0], self.true_scores[1]);
        for d in &self.draws {
            for p in &d.contour {
                let _ = writeln!(out, "{},{},{},{}", d.n_i, d.draw, p[0], p[1]);
            }
        }
        out
    }
}

/// Predictive 95% contours of the first two scores for one fixed latent
/// subject, over `draws` independent designs per density in `densities`.
///
/// In [`Mode::Estimated`] the model is fitted once on an independent
/// sample of `config.n` subjects.
pub fn run_shrinkage_figure(config: &SimConfig, densities: &[usize], draws: usize, mode: Mode) -> Result<ShrinkageFigure> {
    if config.k_true != 2 {
        return Err(FpcaError::InvalidArgument("the shrinkage figure needs k_true = 2".into()));
    }
    let truth = TruePopulation::new(config)?;
    let mut rng = replicate_rng(config.seed, 0x5eed, 0);
    let scores = draw_scores(&config.eigenvalues(), &mut rng);
    let fitted: Option<FittedFpcaModel<f64>> = match mode {
        Mode::Oracle => None,
        Mode::Estimated => {
            let sample = simulate_dataset(config, &mut rng)?;
            let opts = FpcaOptions {
                truncation: Truncation::Fixed(2),
                ..config.fpca_options(&sample.dataset)?
            };
            Some(fit_fpca(&sample.dataset, &opts)?)
        }
    };
    let level = 0.95;
    let design = config.design_points();
    let mut out = Vec::new();
    for (di, &m) in densities.iter().enumerate() {
        let cfg = SimConfig {
            design: match config.design {
                Design::Continuous { .. } => Design::Continuous { m0: m },
                _ => Design::Fixed { m0: m },
            },
            ..config.clone()
        };
        cfg.validate()?;
        for d in 0..draws {
            let mut rng = replicate_rng(config.seed, 1 + di as u64, d as u64);
            let times = draw_times(&cfg, &design, &mut rng);
            let values = observe(&cfg, &times, &scores, &mut rng);
            let subject = SubjectRecord::new("figure", times, values)?;
            let sp = match &fitted {
                Some(model) => blup_scores(model, &subject, 2)?,
                None => blup_scores(&truth, &subject, 2)?,
            };
            out.push(ShrinkageDraw {
                n_i: m,
                draw: d,
                center: [sp.mean[0], sp.mean[1]],
                covariance: [
                    [sp.covariance[(0, 0)], sp.covariance[(0, 1)]],
                    [sp.covariance[(1, 0)], sp.covariance[(1, 1)]],
                ],
                area: contour_area(&sp, level),
                contour: contour_ellipse(&sp, level, 100)?,
            });
        }
    }
    Ok(ShrinkageFigure {
        true_scores: [scores[0], scores[1]],
        level,
        draws: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateQuantity {
    /// `|xi_tilde_1 - xi_1|`
    ScoreError,
    /// Operator norm of `Sigma_iK`.
    SigmaNorm,
    /// Squared Wasserstein distance from the trajectory predictive law to the latent path.
    W2ToAtom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub quantity: RateQuantity,
    pub m: Vec<usize>,
    pub medians: Vec<f64>,
    pub slope: f64,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-`m` medians of `quantity` under the true model (no estimation) and
/// the slope of `log median` against `log m`, with `K = k_true`.
pub fn run_rate_study(
    config: &SimConfig,
    quantity: RateQuantity,
    ms: &[usize],
    replicates: usize,
    threads: Option<usize>,
) -> Result<RateStudy> {
    if ms.len() < 4 {
        return Err(FpcaError::InvalidArgument("a rate study needs at least 4 values of m".into()));
    }
    let (lo, hi) = (*ms.iter().min().unwrap(), *ms.iter().max().unwrap());
    if lo == 0 || hi < 10 * lo {
        return Err(FpcaError::InvalidArgument("m values must span at least one decade".into()));
    }
    if replicates == 0 {
        return Err(FpcaError::InvalidArgument("replicates must be at least 1".into()));
    }
    let truth = TruePopulation::new(config)?;
    let lambda = config.eigenvalues();
    let k = config.k_true;
    let design = config.design_points();
    let per_m: Vec<Result<f64>> = with_pool(threads, || {
        ms.par_iter()
            .enumerate()
            .map(|(mi, &m)| {
                let cfg = SimConfig {
                    design: Design::Fixed { m0: m },
                    ..config.clone()
                };
                cfg.validate()?;
                let values = (0..replicates)
                    .map(|r| {
                        let mut rng = replicate_rng(config.seed, 100 + mi as u64, r as u64);
                        let scores = draw_scores(&lambda, &mut rng);
                        let times = draw_times(&cfg, &design, &mut rng);
                        let values = observe(&cfg, &times, &scores, &mut rng);
                        let subject = SubjectRecord::new("rate", times, values)?;
                        let sp = blup_scores(&truth, &subject, k)?;
                        Ok(match quantity {
                            RateQuantity::ScoreError => (sp.mean[0] - scores[0]).abs(),
                            RateQuantity::SigmaNorm => sp.covariance.symmetric_eigen()?.values[0].max(0.0),
                            RateQuantity::W2ToAtom => {
                                let g = functional_from_scores(&truth, &sp)?;
                                w2_gaussian_to_atom(&g, &truth.centred_path(&scores))?
                            }
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(median(values))
            })
            .collect()
    })?;
    let medians = per_m.into_iter().collect::<Result<Vec<f64>>>()?;
    let lx: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = medians.iter().map(|v| v.ln()).collect();
    Ok(RateStudy {
        quantity,
        m: ms.to_vec(),
        slope: ols_slope(&lx, &ly),
        medians,
    })
}

/// One-sample Kolmogorov-Smirnov test against Uniform(0, 1), with the
/// asymptotic Kolmogorov p-value and Stephens' small-sample correction.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let mut z = values.to_vec();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lam = (sn + 0.12 + 0.11 / sn) * d;
    (d, kolmogorov_survival(lam))
}

fn kolmogorov_survival(lam: f64) -> f64 {
    if lam < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lam * lam).exp();
        p += if j % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitStudy {
    pub p_values: Vec<f64>,
    pub level: f64,
    pub accept_rate: f64,
}

/// Probability-integral-transform check with true quantities: per
/// replicate, KS test of the predictive CDFs at the true linear predictors.
pub fn run_pit_study(config: &SimConfig, replicates: usize, level: f64, threads: Option<usize>) -> Result<PitStudy> {
    let truth = TruePopulation::new(config)?;
    let flm = true_flm(config, &truth);
    let k = config.k_true;
    let p_values: Vec<Result<f64>> = with_pool(threads, || {
        (0..replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_rng(config.seed, 0x917, r as u64);
                let sim = simulate_dataset(config, &mut rng)?;
                let u = uniformity_diagnostic(&flm, &truth, &sim.dataset, UniformityTargets::TrueLinearPredictor(&sim.eta), k)?;
                Ok(ks_uniform(&u.probabilities).1)
            })
            .collect()
    })?;
    let p_values = p_values.into_iter().collect::<Result<Vec<f64>>>()?;
    let accepted = p_values.iter().filter(|&&p| p > level).count();
    Ok(PitStudy {
        accept_rate: accepted as f64 / replicates.max(1) as f64,
        p_values,
        level,
    })
}
