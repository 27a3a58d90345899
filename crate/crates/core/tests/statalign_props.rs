use proptest::prelude::*;
use saat::statalign::*;

fn map(n: usize, m: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-2.0f64..2.0, n * m).prop_map(move |v| FeatureMap::new(n, m, v).unwrap())
}

fn vectors(count: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), count)
}

fn kernels() -> Vec<KernelSpec> {
    vec![
        KernelSpec::linear(),
        KernelSpec::polynomial(0.0, 2),
        KernelSpec::polynomial(0.7, 3),
        KernelSpec::gaussian(Bandwidth::Fixed(2.0)),
        KernelSpec::gaussian(Bandwidth::Auto),
    ]
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b / vs.len() as f64;
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn biased_mmd_is_nonnegative_and_symmetric(s in vectors(5, 3), t in vectors(7, 3)) {
        let (s, t) = (SampleSet::from_vectors(&s).unwrap(), SampleSet::from_vectors(&t).unwrap());
        for k in kernels() {
            let st = mmd2_biased(&s, &t, &k).unwrap();
            let ts = mmd2_biased(&t, &s, &k).unwrap();
            prop_assert!(st >= -1e-12, "{k}: {st}");
            prop_assert!((st - ts).abs() <= 1e-9 * (1.0 + st.abs()), "{k}: {st} vs {ts}");
            prop_assert_eq!(mmd2_biased(&s, &s, &k).unwrap(), 0.0);
        }
    }

    #[test]
    fn linear_mmd_is_squared_mean_gap(s in vectors(6, 4), t in vectors(3, 4)) {
        let gap: f64 = mean(&s).iter().zip(mean(&t)).map(|(a, b)| (a - b).powi(2)).sum();
        let v = mmd2_biased(&SampleSet::from_vectors(&s).unwrap(), &SampleSet::from_vectors(&t).unwrap(), &KernelSpec::linear()).unwrap();
        prop_assert!((v - gap).abs() <= 1e-9, "{v} vs {gap}");
    }

    #[test]
    fn alignment_losses_ignore_position_order(s in map(3, 6), t in map(3, 6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let p = s.permute_columns(&perm).unwrap();
        for k in kernels() {
            let strategy = SplitStrategy::PointWise;
            prop_assert_eq!(paa_loss(&s, &t, &k, strategy).unwrap(), paa_loss(&p, &t, &k, strategy).unwrap());
        }
        prop_assert!((gaa_loss(&s, &t).unwrap() - gaa_loss(&p, &t).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn euclid_vanishes_only_on_equal_maps(s in map(2, 5), t in map(2, 5)) {
        prop_assert_eq!(euclid_loss(&s, &s).unwrap(), 0.0);
        let direct: f64 = s.values().iter().zip(t.values()).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!((euclid_loss(&s, &t).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences(s in map(3, 4), t in map(3, 4)) {
        let losses = [
            FeatureLoss::Paa { kernel: KernelSpec::polynomial(0.5, 2), strategy: SplitStrategy::PointWise },
            FeatureLoss::Paa { kernel: KernelSpec::gaussian(Bandwidth::Fixed(1.5)), strategy: SplitStrategy::ChannelWise },
            FeatureLoss::Gaa,
            FeatureLoss::Euclid,
        ];
        for loss in losses {
            let (_, g) = loss.eval_grad(&s, &t).unwrap();
            let h = 1e-6;
            for i in 0..s.values().len() {
                let mut up = s.values().to_vec();
                up[i] += h;
                let mut dn = s.values().to_vec();
                dn[i] -= h;
                let f = |v: Vec<f64>| loss.eval(&FeatureMap::new(3, 4, v).unwrap(), &t).unwrap();
                let fd = (f(up) - f(dn)) / (2.0 * h);
                prop_assert!((g[i] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{loss:?} [{i}] {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn bandwidth_scales_quadratically(s in vectors(4, 2), t in vectors(4, 2), f in 0.5f64..3.0) {
        let (s, t) = (SampleSet::from_vectors(&s).unwrap(), SampleSet::from_vectors(&t).unwrap());
        let a = gaussian_bandwidth(&s, &t).unwrap();
        let b = gaussian_bandwidth(&s.scaled(f), &t.scaled(f)).unwrap();
        prop_assume!(!a.degenerate);
        prop_assert!((b.sigma2 - f * f * a.sigma2).abs() <= 1e-9 * b.sigma2);
    }

    #[test]
    fn gaa_moments_are_population_statistics(s in map(2, 7)) {
        let m = gaa_moments(&s);
        for c in 0..2 {
            let row = s.row(c);
            let mu = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 7.0;
            prop_assert!((m.means[c] - mu).abs() <= 1e-12);
            prop_assert!((m.variances[c] - var).abs() <= 1e-12);
        }
    }
}
