use adequacy_lab::adequacy::{self, DscConfig, UpperBound};
use adequacy_lab::analysis;
use adequacy_lab::fuzzing::{Criterion, CoverageConfig, CoverageState, NeuronProfile};
use adequacy_lab::mutation::mutation_score_from_predictions;
use adequacy_lab::numkit::{argmin_dist, euclidean, DenseVector};
use adequacy_lab::traces::{self, group_by_class, GroupBy, LatentTrace, SplitTag, TraceFormat, TraceSet};
use adequacy_lab::validity::fit_gamma;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// Random trace set whose values are exactly representable as f32, so binary
/// round-trips can be compared bit for bit.
fn random_set(seed: u64, split: SplitTag, classes: usize, dim: usize, n: usize) -> TraceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traces = (0..n)
        .map(|i| {
            let gt = if i < classes { i } else { rng.random_range(0..classes) };
            let predicted = if rng.random_bool(0.8) { gt } else { rng.random_range(0..classes) };
            let latent = (0..dim).map(|_| rng.random_range(-5.0f32..5.0) as f64).collect();
            LatentTrace { input_id: i as u32, ground_truth: gt, predicted, latent: DenseVector::new(latent).unwrap() }
        })
        .collect();
    TraceSet::new(split, classes, traces).unwrap()
}

fn set_params() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 2usize..6, 1usize..6, 8usize..40)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euclidean_is_a_metric(
        a in prop::collection::vec(-1e3f64..1e3, 5),
        b in prop::collection::vec(-1e3f64..1e3, 5),
        c in prop::collection::vec(-1e3f64..1e3, 5),
    ) {
        let ab = euclidean(&a, &b).unwrap();
        let ba = euclidean(&b, &a).unwrap();
        let bc = euclidean(&b, &c).unwrap();
        let ac = euclidean(&a, &c).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(euclidean(&a, &a).unwrap(), 0.0);
        prop_assert!(ac <= ab + bc + 1e-9 * (ab + bc));
    }

    #[test]
    fn argmin_is_permutation_invariant(
        seed in any::<u64>(),
        n in 1usize..40,
        dup in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cands: Vec<(usize, Vec<f64>)> =
            (0..n).map(|i| (i, (0..3).map(|_| rng.random_range(-2i32..3) as f64).collect())).collect();
        if dup && n > 1 {
            // force a tie between two indices
            let v = cands[0].1.clone();
            cands[n - 1].1 = v;
        }
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2i32..3) as f64).collect();
        let forward = argmin_dist(&q, cands.iter().map(|(i, v)| (*i, v.as_slice()))).unwrap();
        let mut shuffled = cands.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let permuted = argmin_dist(&q, shuffled.iter().map(|(i, v)| (*i, v.as_slice()))).unwrap();
        prop_assert_eq!(forward, permuted);
    }

    #[test]
    fn binary_traces_roundtrip_bit_exact((seed, classes, dim, n) in set_params(), tag in 0u8..4) {
        let set = random_set(seed, SplitTag::from_byte(tag).unwrap(), classes, dim, n);
        let mut bytes = Vec::new();
        traces::write_traces(&set, &mut bytes, TraceFormat::Binary).unwrap();
        let back = traces::read_traces(bytes.as_slice(), TraceFormat::Binary).unwrap();
        prop_assert_eq!(&back, &set);
        let mut again = Vec::new();
        traces::write_traces(&back, &mut again, TraceFormat::Binary).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn csv_traces_roundtrip((seed, classes, dim, n) in set_params()) {
        let set = random_set(seed, SplitTag::Test, classes, dim, n);
        let mut text = Vec::new();
        let fmt = TraceFormat::Csv { split_tag: SplitTag::Test, class_count: classes };
        traces::write_traces(&set, &mut text, fmt).unwrap();
        let back = traces::read_traces(text.as_slice(), fmt).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for (a, b) in back.traces().iter().zip(set.traces()) {
            prop_assert_eq!(a.ground_truth, b.ground_truth);
            prop_assert_eq!(a.predicted, b.predicted);
            for (x, y) in a.latent.as_slice().iter().zip(b.latent.as_slice()) {
                prop_assert!(close(*x, *y, 1e-9));
            }
        }
    }

    #[test]
    fn grouping_is_a_partition((seed, classes, dim, n) in set_params(), by_pred in any::<bool>()) {
        let set = random_set(seed, SplitTag::Test, classes, dim, n);
        let by = if by_pred { GroupBy::Predicted } else { GroupBy::GroundTruth };
        let mut seen: Vec<usize> = group_by_class(&set, by).into_iter().flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn lscd_translation_equivariant((seed, classes, dim, n) in set_params(), shift in -50.0f64..50.0) {
        let train = random_set(seed, SplitTag::Train, classes, dim, n);
        let eval = random_set(seed ^ 1, SplitTag::Test, classes, dim, n);
        let base = adequacy::lscd(&train, &eval).unwrap();
        let offset: Vec<f64> = (0..dim).map(|j| shift * (j as f64 + 1.0)).collect();
        let mv = |v: &[f64]| v.iter().zip(&offset).map(|(x, o)| x + o).collect();
        let moved = adequacy::lscd(&train.map_latents(mv).unwrap(), &eval.map_latents(mv).unwrap()).unwrap();
        for (c, v) in &base.per_class {
            prop_assert!(close(moved.per_class[c], *v, 1e-9));
        }
    }

    #[test]
    fn lscd_scale_equivariant((seed, classes, dim, n) in set_params(), s in 0.01f64..100.0, pow in -8i32..8) {
        let train = random_set(seed, SplitTag::Train, classes, dim, n);
        let eval = random_set(seed ^ 1, SplitTag::Test, classes, dim, n);
        let base = adequacy::lscd(&train, &eval).unwrap();
        let scaled = |f: f64| {
            let mv = |v: &[f64]| v.iter().map(|x| x * f).collect();
            adequacy::lscd(&train.map_latents(mv).unwrap(), &eval.map_latents(mv).unwrap()).unwrap()
        };
        let general = scaled(s);
        for (c, v) in &base.per_class {
            prop_assert!(close(general.per_class[c], s * v, 1e-12));
        }
        // powers of two scale without rounding
        let exact = scaled(2f64.powi(pow));
        for (c, v) in &base.per_class {
            prop_assert_eq!(exact.per_class[c], 2f64.powi(pow) * v);
        }
    }

    #[test]
    fn dsa_scale_invariant((seed, classes, dim, n) in set_params(), s in 0.01f64..100.0, pow in -8i32..8) {
        let train = random_set(seed, SplitTag::Train, classes, dim, 3 * n);
        let eval = random_set(seed ^ 7, SplitTag::Test, classes, dim, n);
        let cfg = DscConfig { bucket_count: 10, upper_bound: UpperBound::Auto };
        let base = adequacy::dsa_values(&eval, &train);
        let base_dsc = adequacy::dsc_coverage(&eval, &train, &cfg).ok();
        let scaled = |f: f64| {
            let mv = |v: &[f64]| v.iter().map(|x| x * f).collect();
            (train.map_latents(mv).unwrap(), eval.map_latents(mv).unwrap())
        };
        let (tr, ev) = scaled(2f64.powi(pow));
        let exact = adequacy::dsa_values(&ev, &tr);
        for (a, b) in base.iter().zip(&exact) {
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.value, b.value);
                    prop_assert_eq!(a.nearest_same, b.nearest_same);
                    prop_assert_eq!(a.nearest_other, b.nearest_other);
                }
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false, "computability changed under scaling"),
            }
        }
        prop_assert_eq!(base_dsc.map(|r| r.coverage()), adequacy::dsc_coverage(&ev, &tr, &cfg).ok().map(|r| r.coverage()));
        let (tr, ev) = scaled(s);
        for (a, b) in base.iter().zip(&adequacy::dsa_values(&ev, &tr)) {
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!(close(a.value, b.value, 1e-9));
            }
        }
    }

    #[test]
    fn parallel_dsa_matches_serial((seed, classes, dim, n) in set_params(), workers in 1usize..9) {
        let train = random_set(seed, SplitTag::Train, classes, dim, 3 * n);
        let eval = random_set(seed ^ 3, SplitTag::Test, classes, dim, n);
        prop_assert_eq!(adequacy::dsa_values(&eval, &train), adequacy::dsa_values_parallel(&eval, &train, workers));
    }

    #[test]
    fn mutation_score_axioms(
        seed in any::<u64>(),
        n in 1usize..200,
        classes in 2usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let acc = |p: &[usize]| p.iter().zip(&truth).filter(|(x, y)| x == y).count() as f64 / n as f64;
        prop_assert_eq!(mutation_score_from_predictions(&a, &a).unwrap(), 0.0);
        let ab = mutation_score_from_predictions(&a, &b).unwrap();
        prop_assert_eq!(ab, mutation_score_from_predictions(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(ab + 1e-12 >= (acc(&a) - acc(&b)).abs());
    }

    #[test]
    fn pearson_affine_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 5..40),
        seed in any::<u64>(),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
        flip in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.random_range(-40.0..40.0)).collect();
        let base = analysis::pearson(&xs, &ys);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let sign = if flip { -1.0 } else { 1.0 };
        let tx: Vec<f64> = xs.iter().map(|x| sign * a * x + b).collect();
        let moved = analysis::pearson(&tx, &ys).unwrap();
        prop_assert!((moved.r - sign * base.r).abs() < 1e-12);
        let line = analysis::pearson(&xs, &tx).unwrap();
        prop_assert_eq!(line.r, sign);
    }

    #[test]
    fn coverage_is_monotone_and_idempotent(seed in any::<u64>(), crit in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer_sizes = vec![4, 3];
        let n = 7;
        let min: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
        let max: Vec<f64> = min.iter().map(|m| m + rng.random_range(0.1..2.0)).collect();
        let profile = NeuronProfile { layer_sizes, min, max, mean: vec![0.0; n], std: vec![0.5; n] };
        let mut cfg = CoverageConfig::desk(Criterion::ALL[crit]);
        cfg.kmnc_sections = 10;
        let mut state = CoverageState::new(cfg, profile).unwrap();
        let mut last = state.coverage();
        for _ in 0..30 {
            let acts = vec![
                (0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>(),
                (0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>(),
            ];
            state.absorb(&acts).unwrap();
            let now = state.coverage();
            prop_assert!(now >= last);
            prop_assert!(!state.absorb(&acts).unwrap());
            prop_assert_eq!(state.coverage(), now);
            last = now;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gamma_fit_scale_equivariant(seed in any::<u64>(), shape in 0.5f64..6.0, s in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Gamma::new(shape, 1.0).unwrap();
        let xs: Vec<f64> = (0..400).map(|_| g.sample(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * s).collect();
        let a = fit_gamma(&xs, 0.01).unwrap();
        let b = fit_gamma(&ys, 0.01).unwrap();
        prop_assert!((a.shape - b.shape).abs() < 1e-6 * a.shape.max(1.0));
        prop_assert!(close(b.scale, s * a.scale, 1e-6));
        prop_assert!(close(b.threshold, s * a.threshold, 1e-6));
    }

    #[test]
    fn gamma_threshold_monotone_in_epsilon(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Gamma::new(2.0, 1.5).unwrap();
        let xs: Vec<f64> = (0..200).map(|_| g.sample(&mut rng)).collect();
        let mut prev = 0.0;
        for eps in [0.5, 0.1, 0.01, 1e-3, 1e-4] {
            let t = fit_gamma(&xs, eps).unwrap().threshold;
            prop_assert!(t > prev);
            prev = t;
        }
    }
}
