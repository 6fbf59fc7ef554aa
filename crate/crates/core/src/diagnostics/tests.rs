use super::*;
use crate::distributions::DiagGaussian;
use crate::simulators::LinearGaussian;

const NOISE: f64 = 0.1;

fn conjugate_set(reference: &GaussianReference, n: usize, m: usize, dim: usize, seed: u64) -> CalibrationSet {
    let sim = LinearGaussian::new(dim, NOISE).unwrap();
    CalibrationSet::generate(&Prior::standard_normal(dim), &sim, reference, n, m, seed).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn rank_boundaries() {
    let samples = Tensor::matrix(20, 1, (1..=20).map(|v| v as f64).collect());
    let cal = CalibrationSet::new(
        Tensor::matrix(2, 1, vec![0.0, 100.0]),
        Tensor::zeros(&[2, 1]),
        vec![samples.clone(), samples],
        0,
    )
    .unwrap();
    let h = sbc_ranks(&cal, &mut rng(0)).unwrap();
    assert_eq!(h.ranks[0], vec![0, 20]);
    assert_eq!(h.counts()[0].iter().sum::<usize>(), 2);
}

#[test]
fn ranks_invariant_under_monotone_transform() {
    let cal = conjugate_set(&GaussianReference::exact(1.0, NOISE), 50, 30, 2, 4);
    let warp = |t: &Tensor<f64>| t.map(|v| v.exp() * 3.0 + v.powi(3));
    let warped = CalibrationSet::new(
        warp(&cal.theta),
        cal.x.clone(),
        cal.samples.iter().map(warp).collect(),
        cal.seed,
    )
    .unwrap();
    assert_eq!(
        sbc_ranks(&cal, &mut rng(1)).unwrap(),
        sbc_ranks(&warped, &mut rng(1)).unwrap()
    );
}

#[test]
fn exact_posterior_passes_sbc_and_narrowed_fails() {
    let exact = GaussianReference::exact(1.0, NOISE);
    let passes = (0..10)
        .filter(|&seed| {
            let h = sbc_ranks(&conjugate_set(&exact, 200, 100, 2, seed), &mut rng(seed)).unwrap();
            uniformity_test(&h).unwrap().ks_p.iter().all(|&p| p > 0.01)
        })
        .count();
    assert!(passes >= 9, "{passes}/10");

    let narrow = GaussianReference { std_scale: 0.5, ..exact };
    let h = sbc_ranks(&conjugate_set(&narrow, 200, 100, 2, 3), &mut rng(3)).unwrap();
    let u = uniformity_test(&h).unwrap();
    assert!(u.ks_p.iter().all(|&p| p < 0.01), "{:?}", u.ks_p);
    // U shape: the outer fifths of the rank range hold far more than 40%
    for c in h.counts() {
        let edges: usize = c[..20].iter().chain(&c[81..]).sum();
        assert!(edges as f64 > 0.6 * 200.0, "{edges}");
    }
}

#[test]
fn uniformity_extremes() {
    let m = 99;
    let uniform = RankHistogram {
        projection: Projection::MarginalCoordinate,
        m,
        ranks: vec![(0..200).map(|i| i % 100).collect()],
    };
    let u = uniformity_test(&uniform).unwrap();
    assert!(u.ks_p[0] > 0.99 && u.chi2_p[0] > 0.99, "{u:?}");
    let zeros = RankHistogram {
        projection: Projection::MarginalCoordinate,
        m,
        ranks: vec![vec![0; 200]],
    };
    let u = uniformity_test(&zeros).unwrap();
    assert!(u.ks_p[0] < 1e-10 && u.chi2_p[0] < 1e-10, "{u:?}");
}

#[test]
fn coverage_of_exact_and_overconfident_posteriors() {
    let exact = GaussianReference::exact(1.0, NOISE);
    let levels = level_grid(10);
    let cal = conjugate_set(&exact, 300, 100, 2, 8);
    let c = expected_coverage(&cal, &exact, &levels, &mut rng(0)).unwrap();
    assert!(c.max_deviation_between(0.1, 0.9) <= 0.07, "{:?}", c.coverage);
    assert_eq!(c.coverage[0], 0.0);
    assert_eq!(c.coverage[10], 1.0);

    let narrow = GaussianReference { std_scale: 0.5, ..exact };
    let cal = conjugate_set(&narrow, 300, 100, 2, 8);
    let c = expected_coverage(&cal, &narrow, &levels, &mut rng(0)).unwrap();
    assert!((1..10).all(|i| c.coverage[i] < c.levels[i]), "{:?}", c.coverage);
}

#[test]
fn coverage_rejects_density_free_posterior() {
    struct SamplesOnly;
    impl AmortizedPosterior for SamplesOnly {
        fn sample_at(&self, _: &[f64], n: usize, _: u64) -> Result<Tensor<f64>, DiagnosticsError> {
            Ok(Tensor::zeros(&[n, 1]))
        }
        fn log_prob_at(&self, _: &Tensor<f64>, _: &[f64]) -> Result<Option<Vec<f64>>, DiagnosticsError> {
            Ok(None)
        }
    }
    let cal = CalibrationSet::for_pairs(Tensor::zeros(&[3, 1]), Tensor::zeros(&[3, 1]), &SamplesOnly, 5, 0).unwrap();
    let err = expected_coverage(&cal, &SamplesOnly, &[0.5], &mut rng(0)).unwrap_err();
    assert!(err.to_string().contains("TARP"));
}

#[test]
fn tarp_exact_shifted_and_degenerate() {
    let prior = Prior::standard_normal(2);
    let exact = GaussianReference::exact(1.0, NOISE);
    let levels = level_grid(20);
    let cal = conjugate_set(&exact, 300, 100, 2, 5);
    let c = tarp(&cal, &prior, &levels, &mut rng(5)).unwrap();
    assert!(c.max_deviation_between(0.1, 0.9) <= 0.07, "{:?}", c.coverage);

    let shifted = GaussianReference {
        shift: 1.0,
        ..exact.clone()
    };
    let cal = conjugate_set(&shifted, 300, 100, 2, 5);
    assert!(tarp(&cal, &prior, &levels, &mut rng(5)).unwrap().leaves_band());

    let cal = conjugate_set(&exact, 50, 1, 2, 6);
    let c = tarp(&cal, &prior, &levels, &mut rng(6)).unwrap();
    assert!(c.credibility.iter().all(|&v| v == 0.25 || v == 0.75));
}

#[test]
fn tarp_rotation_invariance() {
    let exact = GaussianReference::exact(1.0, NOISE);
    let cal = conjugate_set(&exact, 40, 50, 2, 2);
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let rot = |t: &Tensor<f64>| {
        Tensor::matrix(
            t.rows(),
            2,
            t.iter_rows()
                .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]])
                .collect(),
        )
    };
    let rotated = CalibrationSet::new(rot(&cal.theta), cal.x.clone(), cal.samples.iter().map(rot).collect(), 0).unwrap();
    // an isotropic prior is itself rotation invariant, so rotating the
    // reference draws is equivalent to drawing from it
    let prior = Prior::standard_normal(2);
    let refs: Vec<Vec<f64>> = {
        let mut r = rng(9);
        (0..40).map(|_| prior.sample(&mut r)).collect()
    };
    let cred = |set: &CalibrationSet, rotate: bool| -> Vec<usize> {
        (0..set.len())
            .map(|i| {
                let r = &refs[i];
                let r = if rotate {
                    vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]
                } else {
                    r.clone()
                };
                let d = |a: &[f64]| (a[0] - r[0]).powi(2) + (a[1] - r[1]).powi(2);
                let dt = d(set.theta.row(i));
                set.samples[i].iter_rows().filter(|p| d(p) < dt - 1e-12).count()
            })
            .collect()
    };
    assert_eq!(cred(&cal, false), cred(&rotated, true));
}

#[test]
fn constant_classifier_gives_zero_statistic() {
    let clf = Classifier::<f64>::new(
        &ClassifierConfig::default(),
        crate::estimators::Standardizer::identity(2),
        crate::estimators::Standardizer::identity(1),
        0,
    );
    let theta = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 3.0, 0.0, 0.0]);
    assert_eq!(lc2st_statistic(&clf, &theta, &[0.5]).unwrap(), 0.0);
}

#[test]
fn misspecification_flags_outliers() {
    let g = DiagGaussian::from_std(vec![2.0], vec![0.5]).unwrap();
    let mut r = rng(1);
    let x = g.sample_n(&mut r, 600);
    let cfg = MisspecConfig {
        train: TrainConfig {
            max_epochs: 40,
            batch_size: 100,
            learning_rate: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(misspec_check(&x, &[9.0], &cfg).unwrap().flagged);
    let inside = misspec_check(&x, &[2.1], &cfg).unwrap();
    assert!(!inside.flagged && inside.rank <= inside.n);
    assert!(misspec_check(&x.select_rows(&[0, 1, 2]), &[0.0], &cfg).is_err());
}

#[test]
fn noise_free_point_mass_predictive_is_exact() {
    let sim = LinearGaussian::new(2, 0.0).unwrap();
    let theta = Tensor::matrix(5, 2, [0.3, -0.4].repeat(5));
    let pc = predictive_check(&theta, &sim, &[0.3, -0.4], 1).unwrap();
    assert!(pc.distances.iter().all(|&d| d == 0.0));
}

#[test]
fn posterior_predictive_beats_prior_predictive() {
    let exact = GaussianReference::exact(1.0, NOISE);
    let sim = LinearGaussian::new(2, NOISE).unwrap();
    let x_o = [0.4, -0.8];
    let post = exact.sample_at(&x_o, 500, 1).unwrap();
    let prior = prior_draws(&Prior::standard_normal(2), 500, 2);
    let a = predictive_check(&post, &sim, &x_o, 3).unwrap().median_distance();
    let b = predictive_check(&prior, &sim, &x_o, 3).unwrap().median_distance();
    assert!(a < b, "{a} {b}");
}

#[test]
fn binomial_band_contains_mean() {
    let (lo, hi) = binomial_band(300, 0.5).unwrap();
    assert!(lo < 0.5 && hi > 0.5 && hi - lo < 0.13);
    assert_eq!(binomial_band(300, 1.0).unwrap(), (1.0, 1.0));
}
