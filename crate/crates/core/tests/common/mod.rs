#![allow(dead_code)]

use fpca_predict::harness::{SimConfig, TruePopulation};
use fpca_predict::linalg::{Cholesky, Matrix};
use fpca_predict::predictive::LatentModel;
use fpca_predict::spectral::{EigenSystem, FittedFpcaModel};
use fpca_predict::{CovarianceSurface, Domain, Grid, MeanFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Rank-one model on [0, 1] with `lambda = 2`, `phi = 1`, `sigma^2 = 1`, zero mean.
pub fn toy_model() -> FittedFpcaModel<f64> {
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

/// Gaussian toy: a known truth plus fixed observation times.
pub struct GaussianToy {
    pub config: SimConfig,
    pub truth: TruePopulation,
    pub times: Vec<f64>,
}

pub fn gaussian_toys() -> Vec<GaussianToy> {
    let specs = [
        (SimConfig::tables(), vec![1.3, 4.7, 8.2]),
        (SimConfig::figure1(), vec![2.0, 6.5]),
        (
            SimConfig {
                sigma: 0.3,
                ..SimConfig::brownian(3)
            },
            vec![0.2, 0.55, 0.9],
        ),
    ];
    specs
        .into_iter()
        .map(|(config, times)| GaussianToy {
            truth: TruePopulation::new(&config).unwrap(),
            config,
            times,
        })
        .collect()
}

impl GaussianToy {
    /// One joint draw of the scores and the noisy observations at `times`.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let lambda = self.truth.eigenvalues();
        let xi: Vec<f64> = lambda.iter().map(|l| l.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let x = self
            .times
            .iter()
            .map(|&t| {
                let latent: f64 = xi.iter().enumerate().map(|(k, s)| s * self.truth.phi(k, t)).sum();
                self.truth.mean_at(t).unwrap() + latent + self.config.sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        (xi, x)
    }

    pub fn sample(&self, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).unzip()
    }
}

/// Local linear Gaussian-kernel regression of `y` on `x` at `x0`, with a
/// heteroscedasticity-robust standard error for the intercept.
pub fn local_linear(x: &[Vec<f64>], y: &[f64], x0: &[f64], h: &[f64]) -> (f64, f64) {
    let d = x0.len() + 1;
    let design = |xi: &[f64]| -> Vec<f64> {
        std::iter::once(1.0).chain(xi.iter().zip(x0).zip(h).map(|((a, b), s)| (a - b) / s)).collect()
    };
    let weight = |z: &[f64]| (-0.5 * z[1..].iter().map(|v| v * v).sum::<f64>()).exp();
    let mut a = Matrix::zeros(d, d);
    let mut b = vec![0.0; d];
    for (xi, &yi) in x.iter().zip(y) {
        let z = design(xi);
        let w = weight(&z);
        for r in 0..d {
            b[r] += w * z[r] * yi;
            for c in 0..d {
                a[(r, c)] += w * z[r] * z[c];
            }
        }
    }
    let chol = Cholesky::new(&a).expect("local design is positive definite");
    let coef = chol.solve_vec(&b);
    let mut meat = Matrix::zeros(d, d);
    for (xi, &yi) in x.iter().zip(y) {
        let z = design(xi);
        let w = weight(&z);
        let r = yi - z.iter().zip(&coef).map(|(p, q)| p * q).sum::<f64>();
        let s = w * w * r * r;
        for i in 0..d {
            for j in 0..d {
                meat[(i, j)] += s * z[i] * z[j];
            }
        }
    }
    let mut e0 = vec![0.0; d];
    e0[0] = 1.0;
    let v = chol.solve_vec(&e0);
    (coef[0], meat.quadratic_form(&v).sqrt())
}

pub fn column_sd(x: &[Vec<f64>], j: usize) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
    (x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
