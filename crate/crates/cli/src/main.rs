use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fpca_predict::data_model::{load_csv, CsvSchema};
use fpca_predict::flm::{fit_flm, predictive_laws, sigma_y_estimate, uniformity_diagnostic, wasserstein_discrepancy, UniformityTargets};
use fpca_predict::harness::{
    self, population_discrepancy_oracle, DEFAULT_MULTIPLIERS, run_rate_study, run_shrinkage_figure, run_tables, simulate_dataset, Mode, RateQuantity,
    RunOptions, SimConfig,
};
use fpca_predict::predictive::{blup_scores, functional_from_scores, pointwise_band, LatentModel};
use fpca_predict::smoothing::{select_bandwidth_cv, Bandwidths, CvTarget, KernelFamily, KernelSpec};
use fpca_predict::spectral::{fit_fpca, FpcaOptions, Truncation};
use fpca_predict::{Dataset64, FpcaModel64};

const MODEL_FORMAT: &str = "fpca-predict-model";
const MODEL_VERSION: u32 = 1;
const FULL_SCALE_REPLICATES: usize = 2000;

#[derive(Parser)]
#[command(name = "fpca-predict", version, about = "Predictive distributions for sparse functional data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a simulation config and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit mean, covariance and eigenpairs; writes a model artifact.
    Fit(FitArgs),
    /// Per-subject score predictions and trajectory bands from a model.
    Predict(PredictArgs),
    /// Fit the functional linear model and report its diagnostics.
    Flm(FlmArgs),
    /// Replicate means of the Wasserstein discrepancy over the table cells.
    Table1(TableArgs),
    /// Replicate means of the uniformity statistic over the table cells.
    Table2(TableArgs),
    /// Predictive contours of two scores as the design densifies.
    Shrinkage(ShrinkageArgs),
    /// Convergence-rate study in the number of observations per subject.
    Rates(RatesArgs),
    /// Monte Carlo population discrepancy under the simulation truth.
    Population(PopulationArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON fit options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON with `level` and `components`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlmArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON with `components`, `bandwidth` and `schema`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Condition on the true model instead of estimating it.
    #[arg(long)]
    oracle: bool,
    /// Run as many replicates as the original study.
    #[arg(long, conflicts_with = "replicates")]
    full_scale: bool,
    /// Multiply means and standard errors by 1000.
    #[arg(long)]
    scale_1000: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShrinkageArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 10, 50])]
    densities: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    draws: usize,
    /// Contour points as CSV, or the full figure when the name ends in `.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum QuantityArg {
    ScoreError,
    SigmaNorm,
    W2ToAtom,
}

#[derive(Args)]
struct RatesArgs {
    #[arg(long, value_enum)]
    quantity: QuantityArg,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 400)]
    replicates: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 40, 80, 160])]
    m: Vec<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Accepted for symmetry; rate studies always use the true model.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PopulationArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    components: usize,
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Options for `fit`, read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitConfig {
    schema: CsvSchema,
    grid_points: Option<usize>,
    kernel: KernelFamily,
    /// Explicit bandwidths; otherwise design-aware defaults, or CV when `cv` is set.
    bandwidths: Option<Bandwidths<f64>>,
    multipliers: Option<[f64; 3]>,
    /// Select each bandwidth by leave-one-subject-out CV over these
    /// multiples of its rate default.
    cv: Option<Vec<f64>>,
    components: Option<usize>,
    fve: Option<f64>,
    max_components: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PredictConfig {
    schema: CsvSchema,
    level: f64,
    components: Option<usize>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            schema: CsvSchema::default(),
            level: 0.95,
            components: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlmConfig {
    schema: CsvSchema,
    components: Option<usize>,
    bandwidth: Option<f64>,
    /// Candidate cross-covariance bandwidths for CV.
    cv: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelArtifact {
    format: String,
    version: u32,
    bandwidths: Bandwidths<f64>,
    kernel: KernelSpec,
    model: FpcaModel64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Flm(a) => flm(a),
        Command::Table1(a) => table(a, false),
        Command::Table2(a) => table(a, true),
        Command::Shrinkage(a) => shrinkage(a),
        Command::Rates(a) => rates(a),
        Command::Population(a) => population(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sim_config(path: Option<&Path>, seed: Option<u64>, fallback: SimConfig) -> Result<SimConfig> {
    let mut cfg = match path {
        Some(p) => SimConfig::from_json_file(p).with_context(|| format!("loading config {}", p.display()))?,
        None => fallback,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match std::io::stdout().write_all(text.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        },
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(out, &text)
}

fn load_data(path: &Path, schema: &CsvSchema) -> Result<Dataset64> {
    load_csv(path, schema).with_context(|| format!("loading {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = sim_config(a.config.as_deref(), a.seed, SimConfig::tables())?;
    let sim = simulate_dataset(&cfg, &mut harness::replicate_rng(cfg.seed, 0, 0))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    sim.dataset.write_csv_to(&mut w)?;
    let bytes = w.into_inner().context("flushing CSV")?;
    emit(a.out.as_deref(), std::str::from_utf8(&bytes)?)
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg: FitConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    let ds = load_data(&a.data, &cfg.schema)?;
    let kernel = KernelSpec::new(cfg.kernel);
    let defaults = FpcaOptions::<f64>::default();
    let grid_points = cfg.grid_points.unwrap_or(defaults.grid_points);
    let bandwidths = match (&cfg.bandwidths, &cfg.cv) {
        (Some(b), _) => *b,
        (None, Some(mults)) => cv_bandwidths(&ds, grid_points, mults, kernel)?,
        (None, None) => Bandwidths::from_design(&ds, cfg.multipliers.unwrap_or(DEFAULT_MULTIPLIERS)),
    };
    bandwidths.validate(ds.domain())?;
    let opts = FpcaOptions {
        grid_points,
        kernel,
        bandwidths: Some(bandwidths),
        truncation: match (cfg.components, cfg.fve) {
            (Some(k), _) => Truncation::Fixed(k),
            (None, Some(f)) => Truncation::Fve(f),
            (None, None) => defaults.truncation,
        },
        max_components: cfg.max_components.unwrap_or(defaults.max_components),
    };
    let model = fit_fpca(&ds, &opts)?;
    log::info!("fitted {} components, sigma^2 = {}", model.k, model.cov.sigma2);
    let artifact = ModelArtifact {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        bandwidths,
        kernel,
        model,
    };
    emit_json(a.out.as_deref(), &artifact)
}

fn cv_bandwidths(ds: &Dataset64, grid_points: usize, mults: &[f64], kernel: KernelSpec) -> Result<Bandwidths<f64>> {
    let base = Bandwidths::from_design(ds, [1.0; 3]);
    let half = 0.5 * ds.domain().width();
    let scaled = |h: f64| -> Vec<f64> { mults.iter().map(|m| m * h).filter(|&x| x > 0.0 && x < half).collect() };
    let mean_h = select_bandwidth_cv(ds, &scaled(base.mean), CvTarget::Mean, kernel)?;
    let grid = fpca_predict::Grid::uniform(ds.domain(), grid_points)?;
    let mean = fpca_predict::smoothing::estimate_mean(ds, &grid, mean_h, kernel)?;
    let cov_h = select_bandwidth_cv(ds, &scaled(base.covariance), CvTarget::Covariance(&mean), kernel)?;
    let cross = if ds.responses().is_empty() {
        base.cross
    } else {
        select_bandwidth_cv(ds, &scaled(base.cross), CvTarget::Cross(&mean, ds.responses()), kernel)?
    };
    Ok(Bandwidths {
        mean: mean_h,
        covariance: cov_h,
        cross,
    })
}

fn load_model(path: &Path) -> Result<ModelArtifact> {
    let art: ModelArtifact = read_json(path)?;
    if art.format != MODEL_FORMAT {
        bail!("{} is not a model artifact (format `{}`)", path.display(), art.format);
    }
    if art.version != MODEL_VERSION {
        bail!("unsupported model version {} (expected {MODEL_VERSION})", art.version);
    }
    Ok(art)
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg: PredictConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PredictConfig::default(),
    };
    let art = load_model(&a.model)?;
    let model = &art.model;
    let ds = load_data(&a.data, &cfg.schema)?;
    let k = cfg.components.unwrap_or(model.k);
    let mean = model.mean_on_grid();
    let grid = model.grid().points().to_vec();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((1..=k).map(|c| format!("score_{c}")));
    header.extend((1..=k).map(|c| format!("var_{c}{c}")));
    header.extend(grid.iter().map(|t| format!("band_lo_t{}", time_label(*t))));
    header.extend(grid.iter().map(|t| format!("band_hi_t{}", time_label(*t))));
    w.write_record(&header)?;
    for s in ds.subjects() {
        let sp = blup_scores(model, s, k).with_context(|| format!("subject {}", s.id))?;
        let band = pointwise_band(&functional_from_scores(model, &sp)?, cfg.level)?;
        let mut row = vec![s.id.clone()];
        row.extend(sp.mean.iter().map(|v| format!("{v:?}")));
        row.extend((0..k).map(|c| format!("{:?}", sp.covariance[(c, c)])));
        row.extend(band.lower.iter().zip(&mean).map(|(b, m)| format!("{:?}", b + m)));
        row.extend(band.upper.iter().zip(&mean).map(|(b, m)| format!("{:?}", b + m)));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().context("flushing CSV")?;
    emit(a.out.as_deref(), std::str::from_utf8(&bytes)?)
}

fn time_label(t: f64) -> String {
    format!("{}", (t * 1e9).round() / 1e9)
}

#[derive(Serialize)]
struct SubjectLaw {
    id: String,
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct FlmReport {
    components: usize,
    bandwidth: f64,
    beta0: f64,
    sigma_k: Vec<f64>,
    beta_k: Vec<f64>,
    grid: Vec<f64>,
    beta_curve: Vec<f64>,
    sigma_y2: f64,
    sigma_y2_negative: bool,
    discrepancy: f64,
    residual_term: f64,
    variance_term: f64,
    /// Computed at the observed responses.
    uniformity_observed: f64,
    predictions: Vec<SubjectLaw>,
}

fn flm(a: FlmArgs) -> Result<()> {
    let cfg: FlmConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FlmConfig::default(),
    };
    let art = load_model(&a.model)?;
    let model = &art.model;
    let ds = load_data(&a.data, &cfg.schema)?;
    if ds.responses().is_empty() {
        bail!("{} has no response column", a.data.display());
    }
    let k = cfg.components.unwrap_or(model.k);
    let h = match (cfg.bandwidth, &cfg.cv) {
        (Some(h), _) => h,
        (None, Some(c)) => select_bandwidth_cv(&ds, c, CvTarget::Cross(&model.mean, ds.responses()), art.kernel)?,
        (None, None) => art.bandwidths.cross,
    };
    let fitted = fit_flm(model, &model.mean, &ds, ds.responses(), k, h, art.kernel)?;
    let d = wasserstein_discrepancy(&fitted, model, &ds, ds.responses(), k)?;
    let sy = sigma_y_estimate(&fitted, ds.responses())?;
    let u = uniformity_diagnostic(&fitted, model, &ds, UniformityTargets::ObservedResponse(ds.responses()), k)?;
    let predictions = predictive_laws(&fitted, model, &ds, k)?
        .into_iter()
        .map(|(id, g)| SubjectLaw {
            id,
            mean: g.mean,
            variance: g.variance,
        })
        .collect();
    let report = FlmReport {
        components: k,
        bandwidth: h,
        beta0: fitted.beta0,
        sigma_k: fitted.sigma_k.clone(),
        beta_k: fitted.beta_k.clone(),
        grid: fitted.grid.points().to_vec(),
        beta_curve: fitted.beta_curve.clone(),
        sigma_y2: sy.value,
        sigma_y2_negative: sy.negative,
        discrepancy: d.total,
        residual_term: d.residual_term,
        variance_term: d.variance_term,
        uniformity_observed: u.statistic,
        predictions,
    };
    emit_json(a.out.as_deref(), &report)
}

fn table(a: TableArgs, uniformity: bool) -> Result<()> {
    let cfg = sim_config(a.config.as_deref(), a.seed, SimConfig::tables())?;
    let replicates = if a.full_scale { Some(FULL_SCALE_REPLICATES) } else { a.replicates };
    let opts = RunOptions {
        replicates,
        threads: a.threads,
        mode: if a.oracle { Mode::Oracle } else { Mode::Estimated },
        cells: None,
    };
    let run = run_tables(&cfg, &opts)?;
    let result = if uniformity { run.table2() } else { run.table1() };
    for r in result.rows.iter().filter(|r| !r.is_valid()) {
        log::warn!("cell {} is invalid ({} failed replicates)", r.cell, r.fail_count);
    }
    let scale = if a.scale_1000 { 1000.0 } else { 1.0 };
    emit(a.out.as_deref(), &result.to_csv(scale))
}

fn shrinkage(a: ShrinkageArgs) -> Result<()> {
    let cfg = sim_config(a.config.as_deref(), a.seed, SimConfig::figure1())?;
    let mode = if a.oracle { Mode::Oracle } else { Mode::Estimated };
    let fig = run_shrinkage_figure(&cfg, &a.densities, a.draws, mode)?;
    let json = a.out.as_deref().is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    if json {
        emit_json(a.out.as_deref(), &fig)
    } else {
        emit(a.out.as_deref(), &fig.to_csv())
    }
}

fn rates(a: RatesArgs) -> Result<()> {
    let cfg = sim_config(a.config.as_deref(), a.seed, SimConfig::rates())?;
    if !a.oracle {
        log::info!("rate studies always condition on the true model");
    }
    let quantity = match a.quantity {
        QuantityArg::ScoreError => RateQuantity::ScoreError,
        QuantityArg::SigmaNorm => RateQuantity::SigmaNorm,
        QuantityArg::W2ToAtom => RateQuantity::W2ToAtom,
    };
    let study = run_rate_study(&cfg, quantity, &a.m, a.replicates, a.threads)?;
    emit_json(a.out.as_deref(), &study)
}

fn population(a: PopulationArgs) -> Result<()> {
    let cfg = sim_config(a.config.as_deref(), a.seed, SimConfig::tables())?;
    let d = population_discrepancy_oracle(&cfg, a.components, a.draws)?;
    emit_json(a.out.as_deref(), &d)
}
