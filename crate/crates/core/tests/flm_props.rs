use std::sync::OnceLock;

use fpca_predict::flm::{fit_flm, response_predictive_distribution, sigma_y_estimate, wasserstein_discrepancy};
use fpca_predict::harness::{replicate_rng, simulate_dataset, Design, SimConfig, SimulatedData};
use fpca_predict::spectral::fit_fpca;
use fpca_predict::{Dataset64, FlmModel64, FpcaModel64, KernelSpec, Responses};
use proptest::prelude::*;

struct Fixture {
    sim: SimulatedData,
    model: FpcaModel64,
    flm: FlmModel64,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SimConfig {
            n: 120,
            design: Design::Fixed { m0: 6 },
            ..SimConfig::tables()
        };
        let sim = simulate_dataset(&cfg, &mut replicate_rng(3, 0, 0)).unwrap();
        let model = fit_fpca(&sim.dataset, &cfg.fpca_options(&sim.dataset).unwrap()).unwrap();
        let h = cfg.bandwidths(&sim.dataset).unwrap().cross;
        let flm = fit_flm(&model, &model.mean, &sim.dataset, &sim.responses, model.k, h, KernelSpec::default()).unwrap();
        Fixture { sim, model, flm }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn discrepancy_splits_into_its_two_sums(k in 1usize..=4) {
        let f = fixture();
        let k = k.min(f.model.k);
        let d = wasserstein_discrepancy(&f.flm, &f.model, &f.sim.dataset, &f.sim.responses, k).unwrap();
        let (mut resid, mut var) = (0.0, 0.0);
        for s in f.sim.dataset.subjects() {
            let law = response_predictive_distribution(&f.flm, &f.model, s, k).unwrap();
            resid += (f.sim.responses[&s.id] - law.mean).powi(2);
            var += law.variance;
        }
        let n = f.sim.dataset.len() as f64;
        prop_assert!((d.residual_term - resid / n).abs() < 1e-12 * (1.0 + d.total));
        prop_assert!((d.variance_term - var / n).abs() < 1e-12 * (1.0 + d.total));
        prop_assert!((d.total - d.residual_term - d.variance_term).abs() < 1e-12 * (1.0 + d.total));
    }

    #[test]
    fn discrepancy_ignores_subject_order(order in Just((0..120usize).collect::<Vec<_>>()).prop_shuffle()) {
        let f = fixture();
        let ds = &f.sim.dataset;
        let shuffled = Dataset64::new(
            order.iter().map(|&i| ds.subjects()[i].clone()).collect(),
            ds.domain(),
            ds.responses().clone(),
        ).unwrap();
        let a = wasserstein_discrepancy(&f.flm, &f.model, ds, &f.sim.responses, f.model.k).unwrap();
        let b = wasserstein_discrepancy(&f.flm, &f.model, &shuffled, &f.sim.responses, f.model.k).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12 * a.total);
    }

    #[test]
    fn sigma_y_identity(ys in prop::collection::vec(-10.0f64..10.0, 120)) {
        let f = fixture();
        let responses: Responses<f64> = f.sim.dataset.subjects().iter().zip(&ys).map(|(s, &y)| (s.id.clone(), y)).collect();
        let est = sigma_y_estimate(&f.flm, &responses).unwrap();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let explained: f64 = f.flm.eigenvalues.iter().zip(&f.flm.beta_k).take(f.flm.m).map(|(l, b)| l * b * b).sum();
        prop_assert!((est.value + explained - var).abs() < 1e-12 * (1.0 + var));
        prop_assert_eq!(est.negative, est.value < 0.0);
    }
}
