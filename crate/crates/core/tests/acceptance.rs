//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use fpca_predict::flm::{fit_flm, sigma_y_estimate};
use fpca_predict::harness::{
    run_pit_study, run_rate_study, run_tables, simulate_dataset, replicate_rng, Design, ExperimentResult, RateQuantity,
    RunOptions, SimConfig, TableCell, TableRun,
};
use fpca_predict::linalg::Matrix;
use fpca_predict::predictive::{blup_scores, LatentModel};
use fpca_predict::spectral::{eigendecompose, fit_fpca};
use fpca_predict::wasserstein::{uniformity_statistic, w2_gaussian_1d, w2_gaussian_hilbert, w2_univariate, QuantileFunction};
use fpca_predict::{CovarianceSurface, Domain, FunctionalGaussian, Gaussian1D, Grid, KernelSpec, SubjectRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn label(sigma: f64, sigma_y: f64, m0: usize, n: usize) -> String {
    TableCell { sigma, sigma_y, m0, n }.label()
}

fn mean_of(t: &ExperimentResult, cell: &str) -> f64 {
    t.row(cell).unwrap_or_else(|| panic!("missing cell {cell}")).mean
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn criterion_1(run: &TableRun) -> Outcome {
    let t = run.table1();
    let refs = [(0.5, 0.5, 2, 500, 3.008), (0.5, 0.5, 20, 2000, 0.853), (1.0, 0.5, 8, 2000, 2.418)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, sy, m0, n, target) in refs {
        let v = mean_of(&t, &label(s, sy, m0, n));
        pass &= within(v, target, 0.15);
        parts.push(format!("{v:.3} vs {target}"));
    }
    pass &= t.rows.iter().all(|r| r.is_valid());
    outcome(pass, parts.join(", "))
}

fn criterion_2(run: &TableRun) -> Outcome {
    let t = run.table1();
    let noise = [(0.5, 0.5), (0.5, 1.0), (1.0, 0.5)];
    let mut broken = Vec::new();
    for &(s, sy) in &noise {
        for n in [500, 2000] {
            let d: Vec<f64> = [2, 8, 20].iter().map(|&m0| mean_of(&t, &label(s, sy, m0, n))).collect();
            if !(d[0] > d[1] && d[1] > d[2]) {
                broken.push(format!("design s={s} sy={sy} n={n}"));
            }
        }
    }
    for m0 in [2, 8, 20] {
        for n in [500, 2000] {
            let base = mean_of(&t, &label(0.5, 0.5, m0, n));
            if mean_of(&t, &label(0.5, 1.0, m0, n)) <= base {
                broken.push(format!("sigma_y m0={m0} n={n}"));
            }
            if mean_of(&t, &label(1.0, 0.5, m0, n)) <= base {
                broken.push(format!("sigma m0={m0} n={n}"));
            }
        }
    }
    let detail = if broken.is_empty() { "all 18 orderings hold".to_string() } else { format!("violated: {}", broken.join("; ")) };
    outcome(broken.is_empty(), detail)
}

fn criterion_3(run: &TableRun) -> Outcome {
    let t = run.table2();
    let v = mean_of(&t, &label(0.5, 0.5, 2, 500));
    let mut pass = within(v, 1.74e-3, 0.30);
    let mut not_lower = Vec::new();
    for (s, sy) in [(0.5, 0.5), (0.5, 1.0), (1.0, 0.5)] {
        for m0 in [2, 8, 20] {
            if mean_of(&t, &label(s, sy, m0, 2000)) >= mean_of(&t, &label(s, sy, m0, 500)) {
                not_lower.push(label(s, sy, m0, 2000));
            }
        }
    }
    pass &= not_lower.is_empty();
    outcome(pass, format!("U_W {:.3}e-3 vs 1.74e-3, {} n=2000 cells not below n=500", v * 1e3, not_lower.len()))
}

fn criterion_4() -> Outcome {
    let cfg = SimConfig::rates();
    let ms = [10, 20, 40, 80, 160];
    let checks = [
        (RateQuantity::ScoreError, -0.65, -0.35),
        (RateQuantity::SigmaNorm, -1.25, -0.75),
        (RateQuantity::W2ToAtom, -1.25, -0.75),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (q, lo, hi) in checks {
        let start = Instant::now();
        let study = run_rate_study(&cfg, q, &ms, 400, None).expect("rate study");
        let secs = start.elapsed().as_secs_f64();
        pass &= (lo..=hi).contains(&study.slope) && secs < 120.0;
        parts.push(format!("{q:?} {:.3} in [{lo}, {hi}] ({secs:.1}s)", study.slope));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g1 = Gaussian1D::<f64>::new(rng.random_range(-3.0..3.0), rng.random_range(0.05..4.0)).unwrap();
        let g2 = Gaussian1D::new(rng.random_range(-3.0..3.0), rng.random_range(0.05..4.0)).unwrap();
        let closed = w2_gaussian_1d(&g1, &g2);
        let quad = w2_univariate(&QuantileFunction::gaussian(g1), &QuantileFunction::gaussian(g2), 256).unwrap();
        worst = worst.max((closed - quad).abs());
    }

    let grid = Grid::uniform(Domain::new(0.0, 1.0).unwrap(), 201).unwrap();
    let phi = |k: usize, t: f64| 2f64.sqrt() * ((k + 1) as f64 * PI * t).sin();
    let kernel = |l: [f64; 2]| {
        let p = grid.points();
        Matrix::from_fn(p.len(), p.len(), |i, j| l[0] * phi(0, p[i]) * phi(0, p[j]) + l[1] * phi(1, p[i]) * phi(1, p[j]))
    };
    let zero = vec![0.0; grid.len()];
    let a = FunctionalGaussian::new(grid.clone(), zero.clone(), kernel([1.0, 0.25])).unwrap();
    let b = FunctionalGaussian::new(grid.clone(), zero, kernel([4.0, 1.0])).unwrap();
    let gel = w2_gaussian_hilbert(&a, &b).unwrap();

    let u: f64 = uniformity_statistic(&[0.5]).unwrap();
    let pass = worst < 1e-3 && (gel - 1.25).abs() < 1e-6 && (u - 1.0 / 12.0).abs() < 1e-12;
    outcome(
        pass,
        format!("max 1-D gap {worst:.2e}, Gelbrich {gel:.9}, U_W(0.5) - 1/12 = {:.1e}", u - 1.0 / 12.0),
    )
}

fn criterion_6() -> Outcome {
    let toy = common::toy_model();
    let sp = blup_scores(&toy, &SubjectRecord::new("toy", vec![0.5], vec![3.0]).unwrap(), 1).unwrap();
    let mut pass = (sp.mean[0] - 2.0).abs() < 1e-12 && (sp.covariance[(0, 0)] - 2.0 / 3.0).abs() < 1e-12;
    let mut worst_z = 0.0f64;
    for (i, toy) in common::gaussian_toys().iter().enumerate() {
        let (xi, x) = toy.sample(100_000, 60 + i as u64);
        let (_, x0) = toy.draw(&mut ChaCha20Rng::seed_from_u64(600 + i as u64));
        let h: Vec<f64> = (0..x0.len()).map(|j| 0.5 * common::column_sd(&x, j)).collect();
        let k = toy.truth.eigenvalues().len();
        let blup = blup_scores(&toy.truth, &SubjectRecord::new("x0", toy.times.clone(), x0.clone()).unwrap(), k).unwrap();
        for c in 0..k {
            let y: Vec<f64> = xi.iter().map(|s| s[c]).collect();
            let (est, se) = common::local_linear(&x, &y, &x0, &h);
            let z = (blup.mean[c] - est).abs() / se;
            worst_z = worst_z.max(z);
            pass &= z <= 3.0;
        }
    }
    outcome(pass, format!("toy xi = {:.12}, Sigma = {:.12}, worst |z| {worst_z:.2}", sp.mean[0], sp.covariance[(0, 0)]))
}

fn criterion_7() -> Outcome {
    let cfg = SimConfig::figure1();
    let truth = fpca_predict::harness::TruePopulation::new(&SimConfig {
        grid_points: 101,
        ..cfg.clone()
    })
    .unwrap();
    let grid = truth.grid().clone();
    let cov = CovarianceSurface {
        grid: grid.clone(),
        values: truth.covariance_on_grid(),
        sigma2: 0.0,
    };
    let eig = eigendecompose(&cov, 2).unwrap();
    let lam_err = (eig.eigenvalues[0] - 1.0).abs().max((eig.eigenvalues[1] - 4.0 / 9.0).abs());
    let mut ortho = 0.0f64;
    for a in 0..2 {
        for b in 0..2 {
            let ip = grid.inner(&eig.eigenfunction(a), &eig.eigenfunction(b));
            ortho = ortho.max((ip - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }

    let bgrid = Grid::uniform(Domain::new(0.0, 1.0).unwrap(), 201).unwrap();
    let p: Vec<f64> = bgrid.points().to_vec();
    let bm = CovarianceSurface {
        grid: bgrid,
        values: Matrix::from_fn(p.len(), p.len(), |i, j| p[i].min(p[j])),
        sigma2: 0.0,
    };
    let l1 = eigendecompose(&bm, 1).unwrap().eigenvalues[0];
    let target = 4.0 / (PI * PI);
    let pass = lam_err < 1e-3 && ortho < 1e-8 && (l1 - target).abs() < 1e-2;
    outcome(
        pass,
        format!("eigenvalue error {lam_err:.2e}, orthonormality {ortho:.1e}, Brownian {l1:.4} vs {target:.4}"),
    )
}

fn criterion_8() -> Outcome {
    let cfg = SimConfig {
        n: 2000,
        design: Design::Fixed { m0: 20 },
        ..SimConfig::tables()
    };
    let sim = simulate_dataset(&cfg, &mut replicate_rng(cfg.seed, 0, 0)).unwrap();
    let model = fit_fpca(&sim.dataset, &cfg.fpca_options(&sim.dataset).unwrap()).unwrap();
    let h = cfg.bandwidths(&sim.dataset).unwrap().cross;
    let flm = fit_flm(&model, &model.mean, &sim.dataset, &sim.responses, model.k, h, KernelSpec::new(cfg.kernel)).unwrap();
    let est = sigma_y_estimate(&flm, &sim.responses).unwrap();
    outcome(within(est.value, 0.25, 0.10), format!("sigma_Y^2 estimate {:.4} vs 0.25", est.value))
}

fn criterion_9() -> Outcome {
    let study = run_pit_study(&SimConfig::tables(), 100, 0.01, None).unwrap();
    outcome(study.accept_rate >= 0.95, format!("accept rate {:.2} at level 0.01", study.accept_rate))
}

fn criterion_10() -> Outcome {
    let cfg = SimConfig::tables();
    let csv = |threads: usize| {
        let opts = RunOptions {
            replicates: Some(10),
            threads: Some(threads),
            ..RunOptions::default()
        };
        let run = run_tables(&cfg, &opts).unwrap();
        (run.table1().to_csv(1.0), run.table2().to_csv(1000.0))
    };
    let a = csv(1);
    let b = csv(1);
    let c = csv(4);
    outcome(a == b && a == c, "table output at 1, 1 and 4 threads, 10 replicates")
}

fn main() {
    let start = Instant::now();
    let tables = run_tables(
        &SimConfig::tables(),
        &RunOptions {
            replicates: Some(200),
            ..RunOptions::default()
        },
    )
    .expect("table run");
    eprintln!("tables: {:.0}s", start.elapsed().as_secs_f64());

    let results = [
        ("table 1 reference cells", criterion_1(&tables)),
        ("table 1 orderings", criterion_2(&tables)),
        ("table 2 reference cell and n ordering", criterion_3(&tables)),
        ("oracle rate slopes", criterion_4()),
        ("Wasserstein correctness", criterion_5()),
        ("BLUP oracle", criterion_6()),
        ("spectral fidelity", criterion_7()),
        ("sigma_Y^2 recovery", criterion_8()),
        ("probability integral transform", criterion_9()),
        ("determinism", criterion_10()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
