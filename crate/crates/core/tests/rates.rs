mod common;

use chaosflow::coupled::{CoupledEngine, CoupledSpec};
use chaosflow::harness::{zeta_diagnostic, Verdict};
use chaosflow::measures::{wasserstein_1d_quantile, EmpiricalMeasure};
use chaosflow::models::{make_kuramoto, make_mf_ou};

#[test]
fn zeta_second_moment_decays_like_one_over_n() {
    // A large auxiliary ensemble keeps its own error below the fluctuation
    // at every N of the ladder.
    let spec = CoupledSpec {
        reference_size: 4096,
        aux_size: 65536,
        ..common::spec(make_mf_ou(-1.0, 0.5, 0.3, 1).unwrap(), 20, 2024)
    };
    let report = zeta_diagnostic(&spec, &[16, 32, 64, 128, 256], 64, 2.0).unwrap();
    let fit = report.fit.expect("zeta fit");
    assert!(fit.slope <= -0.9, "slope {fit:?}");
    assert_eq!(report.reference_slopes, vec![-2.0, -1.0]);
    assert_eq!(report.verdict, Verdict::Informational);
}

#[test]
fn zeta_vanishes_without_interaction() {
    let spec = common::spec(make_kuramoto(0.0, 0.5).unwrap(), 20, 1);
    let report = zeta_diagnostic(&spec, &[16, 32, 64], 4, 2.0).unwrap();
    assert!(report.points.iter().all(|p| p.moment == 0.0));
    assert!(report.fit.is_none());
    assert_eq!(report.verdict, Verdict::Informational);
}

/// The tracked Wasserstein gap compares the particle cloud with an
/// `N`-point subsample of the reference ensemble, which adds a second
/// sampling error of the same order. Against the full ensemble the gap is
/// roughly halved.
#[test]
fn subsampling_bias_is_bounded() {
    let spec = CoupledSpec {
        reference_size: 8192,
        ..common::spec(make_mf_ou(-1.0, 0.5, 0.3, 1).unwrap(), 20, 7)
    };
    for n in [16, 64] {
        let jobs: Vec<(usize, usize)> = (0..48).map(|r| (n, r)).collect();
        let mut engine = CoupledEngine::new(spec.clone(), &jobs).unwrap();
        engine.run().unwrap();
        let law = engine.law().unwrap().clone();
        let summaries = engine.summaries();
        let (mut sub, mut full) = (0.0, 0.0);
        for (j, s) in summaries.iter().enumerate() {
            let cloud = EmpiricalMeasure::from_scalars(engine.particle_positions(j)).unwrap();
            sub += s.wasserstein.last().unwrap();
            full += wasserstein_1d_quantile(&cloud, &law, 2.0).unwrap().powi(2);
        }
        let ratio = sub / full;
        assert!((1.2..=3.0).contains(&ratio), "N = {n}: subsample/full = {ratio}");
    }
}
