use std::f64::consts::PI;

use fpca_predict::linalg::Matrix;
use fpca_predict::spectral::eigendecompose;
use fpca_predict::{CovarianceSurface, Domain, Grid};
use proptest::prelude::*;

fn surface(points: usize, factors: &[Vec<f64>]) -> CovarianceSurface<f64> {
    let grid = Grid::uniform(Domain::new(0.0, 2.0).unwrap(), points).unwrap();
    let values = Matrix::from_fn(points, points, |i, j| factors.iter().map(|f| f[i] * f[j]).sum());
    CovarianceSurface { grid, values, sigma2: 0.1 }
}

fn factors_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (8usize..30).prop_flat_map(|g| (Just(g), prop::collection::vec(prop::collection::vec(-2.0f64..2.0, g), 1..6)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigenfunctions_are_orthonormal_and_reconstruct((g, f) in factors_strategy()) {
        let cov = surface(g, &f);
        let eig = eigendecompose(&cov, g).unwrap();
        for a in 0..eig.len() {
            for b in 0..eig.len() {
                let ip = cov.grid.inner(&eig.eigenfunction(a), &eig.eigenfunction(b));
                prop_assert!((ip - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8, "<{a},{b}> = {ip}");
            }
        }
        let rec = eig.reconstruct(eig.len());
        let rel = rec.sub(&cov.values).frobenius_norm() / cov.values.frobenius_norm();
        prop_assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn fve_is_monotone_and_reaches_one((g, f) in factors_strategy()) {
        let eig = eigendecompose(&surface(g, &f), g).unwrap();
        prop_assert!(eig.fve.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!((eig.fve.last().unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical((g, f) in factors_strategy()) {
        let cov = surface(g, &f);
        let a = eigendecompose(&cov, g).unwrap();
        let b = eigendecompose(&cov, g).unwrap();
        let bits = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.eigenfunctions), bits(&b.eigenfunctions));
    }
}

#[test]
fn rank_two_trigonometric_kernel() {
    let grid = Grid::uniform(Domain::new(0.0, 10.0).unwrap(), 101).unwrap();
    let c = (2.0f64 / 10.0).sqrt();
    let phi1 = |t: f64| -c * (PI * t / 10.0).cos();
    let phi2 = |t: f64| c * (PI * t / 10.0).sin();
    let p: Vec<f64> = grid.points().to_vec();
    let values = Matrix::from_fn(p.len(), p.len(), |i, j| phi1(p[i]) * phi1(p[j]) + 4.0 / 9.0 * phi2(p[i]) * phi2(p[j]));
    let eig = eigendecompose(&CovarianceSurface { grid, values, sigma2: 0.0 }, 5).unwrap();
    assert!((eig.eigenvalues[0] - 1.0).abs() < 1e-3);
    assert!((eig.eigenvalues[1] - 4.0 / 9.0).abs() < 1e-3);
    assert!(eig.eigenvalues[2..].iter().all(|l| l.abs() < 1e-10));
}

#[test]
fn brownian_motion_leading_eigenvalues() {
    let grid = Grid::uniform(Domain::new(0.0, 1.0).unwrap(), 201).unwrap();
    let p: Vec<f64> = grid.points().to_vec();
    let values = Matrix::from_fn(p.len(), p.len(), |i, j| p[i].min(p[j]));
    let eig = eigendecompose(&CovarianceSurface { grid, values, sigma2: 0.0 }, 3).unwrap();
    for (m, l) in eig.eigenvalues.iter().enumerate() {
        let target = 4.0 / (PI * PI * (2 * m + 1).pow(2) as f64);
        assert!((l - target).abs() < 1e-2, "lambda_{} = {l}, expected {target}", m + 1);
    }
}
