use fpca_predict::linalg::Matrix;
use fpca_predict::wasserstein::{uniformity_statistic, w2_gaussian_1d, w2_gaussian_hilbert, w2_univariate, QuantileFunction};
use fpca_predict::{Domain, FunctionalGaussian, Gaussian1D, Grid};
use proptest::prelude::*;

fn gaussian_1d() -> impl Strategy<Value = Gaussian1D<f64>> {
    (-5.0f64..5.0, 0.0f64..9.0).prop_map(|(m, v)| Gaussian1D::new(m, v).unwrap())
}

const POINTS: usize = 12;

fn grid() -> Grid<f64> {
    Grid::uniform(Domain::new(0.0, 1.0).unwrap(), POINTS).unwrap()
}

/// Gaussian on the grid with a kernel of rank at most 3.
fn functional_gaussian() -> impl Strategy<Value = FunctionalGaussian<f64>> {
    (
        prop::collection::vec(-2.0f64..2.0, POINTS),
        prop::collection::vec(prop::collection::vec(-1.5f64..1.5, POINTS), 1..4),
    )
        .prop_map(|(mean, factors)| {
            let kernel = Matrix::from_fn(POINTS, POINTS, |i, j| factors.iter().map(|f| f[i] * f[j]).sum());
            FunctionalGaussian::new(grid(), mean, kernel).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_1d_metric_axioms(a in gaussian_1d(), b in gaussian_1d(), c in gaussian_1d()) {
        let d = |x: &Gaussian1D<f64>, y: &Gaussian1D<f64>| w2_gaussian_1d(x, y).sqrt();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b).to_bits(), d(&b, &a).to_bits());
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-8);
    }

    #[test]
    fn gelbrich_metric_axioms(a in functional_gaussian(), b in functional_gaussian(), c in functional_gaussian()) {
        let d = |x: &FunctionalGaussian<f64>, y: &FunctionalGaussian<f64>| w2_gaussian_hilbert(x, y).unwrap().sqrt();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!(w2_gaussian_hilbert(&a, &a).unwrap() < 1e-8);
        prop_assert_eq!(d(&a, &b).to_bits(), d(&b, &a).to_bits());
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-8);
    }

    #[test]
    fn quadrature_route_matches_closed_form(a in gaussian_1d(), b in gaussian_1d()) {
        prop_assume!(a.variance > 1e-3 && b.variance > 1e-3);
        let quad = w2_univariate(&QuantileFunction::gaussian(a), &QuantileFunction::gaussian(b), 256).unwrap();
        prop_assert!((quad - w2_gaussian_1d(&a, &b)).abs() < 1e-3);
    }

    #[test]
    fn rank_one_kernels_reduce_to_scores(
        shape in prop::collection::vec(-1.0f64..1.0, POINTS), ma in -3.0f64..3.0, mb in -3.0f64..3.0,
        la in 0.0f64..4.0, lb in 0.0f64..4.0,
    ) {
        let g = grid();
        let norm = g.inner(&shape, &shape).sqrt();
        prop_assume!(norm > 0.1);
        let phi: Vec<f64> = shape.iter().map(|v| v / norm).collect();
        let make = |m: f64, l: f64| {
            FunctionalGaussian::new(
                g.clone(),
                phi.iter().map(|p| m * p).collect(),
                Matrix::from_fn(POINTS, POINTS, |i, j| l * phi[i] * phi[j]),
            )
            .unwrap()
        };
        let hilbert = w2_gaussian_hilbert(&make(ma, la), &make(mb, lb)).unwrap();
        let scalar = w2_gaussian_1d(&Gaussian1D::new(ma, la).unwrap(), &Gaussian1D::new(mb, lb).unwrap());
        prop_assert!((hilbert - scalar).abs() < 1e-8, "{hilbert} vs {scalar}");
    }

    #[test]
    fn uniformity_is_exact_empirical_distance(z in prop::collection::vec(0.0f64..=1.0, 1..60)) {
        let u = uniformity_statistic(&z).unwrap();
        let q = QuantileFunction::empirical(z).unwrap();
        let w = w2_univariate(&q, &QuantileFunction::Uniform { lower: 0.0, upper: 1.0 }, 64).unwrap();
        prop_assert!((u - w).abs() < 1e-10, "{u} vs {w}");
    }
}
