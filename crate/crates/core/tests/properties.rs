use std::sync::atomic::{AtomicUsize, Ordering};

use patient_repr::classifier::{MlpConfig, MlpModel, PrimaryMetric, TaskSpec};
use patient_repr::corpus::{
    build_vocabulary, featurize_tfidf, generate_synthetic_corpus, FeatureMatrix, NormalizationMode,
    Normalizer, SparseRow, SyntheticCorpusSpec,
};
use patient_repr::doc2vec::{dbow_step_loss, train_dbow, Doc2vecConfig, NoiseDistribution};
use patient_repr::interpret::{chi2_feature_scores, feature_significance, SensitivityOptions};
use patient_repr::nn::{
    gradient_check, rmsprop_step, sigmoid, softmax, Activation, DenseLayer, Loss, RmsPropConfig,
    RmsPropState,
};
use patient_repr::sdae::{encode, feature_reconstruction_error, train_sdae, SdaeConfig, SdaeModel};
use patient_repr::stats::{approx_randomization_test, PairedOutcomes};
use patient_repr::Rng;
use proptest::prelude::*;

fn sparse_rows(rng: &mut Rng, n: usize, dim: usize) -> Vec<SparseRow> {
    (0..n)
        .map(|_| {
            let dense: Vec<f64> = (0..dim)
                .map(|_| if rng.bernoulli(0.4) { rng.uniform_range(0.05, 1.0) } else { 0.0 })
                .collect();
            SparseRow::from_dense(&dense)
        })
        .collect()
}

fn matrix(rows: Vec<SparseRow>, dim: usize) -> FeatureMatrix {
    let ids = (0..rows.len()).map(|i| format!("p{i}")).collect();
    FeatureMatrix::new(dim, "h", ids, rows).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-300.0f64..300.0, 1..20)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    // beyond |x| ≈ 36 the result rounds to 0 or 1 in f64
    #[test]
    fn sigmoid_in_open_unit_interval(x in -36.0f64..36.0) {
        let s = sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn rmsprop_zero_rate_is_identity(
        w in prop::collection::vec(-5.0f64..5.0, 1..10),
        g in prop::collection::vec(-5.0f64..5.0, 10),
        steps in 1usize..4,
    ) {
        let cfg = RmsPropConfig { learning_rate: 0.0, ..Default::default() };
        let mut state = RmsPropState::new(cfg, &[w.len()]).unwrap();
        let mut params = w.clone();
        for _ in 0..steps {
            rmsprop_step(&mut [params.as_mut_slice()], &[&g[..w.len()]], &mut state).unwrap();
        }
        prop_assert_eq!(params, w);
    }

    #[test]
    fn backprop_matches_finite_differences(seed in 0u64..10_000, depth in 1usize..4, ce in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let dims: Vec<usize> = (0..=depth).map(|_| 2 + rng.below(8)).collect();
        let layers: Vec<DenseLayer> = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k + 1 == depth && ce { Activation::Softmax } else { Activation::Sigmoid };
                let mut l = DenseLayer::glorot_uniform(w[0], w[1], act, &mut rng);
                l.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
                l
            })
            .collect();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let out = dims[depth];
        let (loss, target) = if ce {
            let mut t = vec![0.0; out];
            t[rng.below(out)] = 1.0;
            (Loss::CrossEntropy, t)
        } else {
            (Loss::Mse, (0..out).map(|_| rng.uniform()).collect())
        };
        let err = gradient_check(&layers, &x, &target, loss, 10, &mut rng).unwrap();
        // loose bound: tiny partials sit on the finite-difference error floor
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn noise_distribution_is_proper(freqs in prop::collection::vec(1u64..10_000, 1..50)) {
        let d = NoiseDistribution::from_frequencies(&freqs).unwrap();
        let p = d.probabilities();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dbow_loss_is_non_negative(
        doc in prop::collection::vec(-3.0f64..3.0, 4),
        target in prop::collection::vec(-3.0f64..3.0, 4),
        negs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 0..6),
    ) {
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        prop_assert!(dbow_step_loss(&doc, &target, &refs).loss >= 0.0);
    }

    #[test]
    fn chi2_relabeling_permutes_classes(seed in 0u64..1000, shift in 1usize..3) {
        let mut rng = Rng::new(seed);
        let f = matrix(sparse_rows(&mut rng, 30, 6), 6);
        let labels: Vec<usize> = (0..30).map(|_| rng.below(3)).collect();
        let relabeled: Vec<usize> = labels.iter().map(|l| (l + shift) % 3).collect();
        let (Ok(a), Ok(b)) = (chi2_feature_scores(&f, &labels, 3), chi2_feature_scores(&f, &relabeled, 3)) else {
            return Ok(());
        };
        for c in 0..3 {
            prop_assert_eq!(&a.scores[c], &b.scores[(c + shift) % 3]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encode_is_pure_and_recon_error_order_free(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let f = matrix(sparse_rows(&mut rng, 25, 10), 10);
        let cfg = SdaeConfig { hidden_sizes: vec![5, 3], epochs: 2, batch_size: 4, seed, ..Default::default() };
        let model = train_sdae(&f, &cfg).unwrap();
        prop_assert_eq!(encode(&model, &f).unwrap(), encode(&model, &f).unwrap());

        let mut order: Vec<usize> = (0..f.len()).collect();
        rng.shuffle(&mut order);
        let a = feature_reconstruction_error(&model, &f).unwrap().errors;
        let b = feature_reconstruction_error(&model, &f.select(&order)).unwrap().errors;
        prop_assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn phi_order_and_duplication_invariant(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let f = matrix(sparse_rows(&mut rng, 12, 8), 8);
        let sdae = SdaeModel::initialize(8, &SdaeConfig { hidden_sizes: vec![4], seed, ..Default::default() }).unwrap();
        let task = TaskSpec::new("t", 3, PrimaryMetric::WeightedF1).unwrap();
        let clf = MlpModel::initialize(4, &task, &MlpConfig { hidden_sizes: vec![5], seed, ..Default::default() }).unwrap();
        let tokens: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
        let opts = SensitivityOptions::default();
        let base = feature_significance(&sdae, &clf, &f, &tokens, opts).unwrap();
        prop_assert!(base.phi.iter().all(|v| v.is_finite()));

        let mut order: Vec<usize> = (0..f.len()).collect();
        rng.shuffle(&mut order);
        let shuffled = feature_significance(&sdae, &clf, &f.select(&order), &tokens, opts).unwrap();
        prop_assert!(close(&base.phi, &shuffled.phi, 1e-12));

        let doubled: Vec<usize> = (0..f.len()).chain(0..f.len()).collect();
        let twice = feature_significance(&sdae, &clf, &f.select(&doubled), &tokens, opts).unwrap();
        prop_assert!(close(&base.phi, &twice.phi, 1e-12));
    }

    #[test]
    fn dbow_update_count_and_final_rate(lens in prop::collection::vec(1usize..12, 1..8), window in 1usize..5) {
        let docs: Vec<Vec<String>> = lens
            .iter()
            .enumerate()
            .map(|(d, &n)| (0..n).map(|j| format!("w{}", (d + j) % 4)).collect())
            .collect();
        let ids = (0..docs.len()).map(|i| format!("d{i}")).collect();
        let cfg = Doc2vecConfig { dim: 4, epochs: 2, window, min_frequency: 1, ..Default::default() };
        let Ok(model) = train_dbow(ids, &docs, &cfg) else {
            // fewer than two distinct words cannot supply negatives
            return Ok(());
        };
        let expected: u64 = lens.iter().map(|&n| (n.saturating_sub(window) + 1).max(1) as u64).sum();
        prop_assert_eq!(model.updates_per_epoch, expected);
        prop_assert!((model.last_learning_rate - cfg.final_learning_rate).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Raising only the observed statistic, with the shuffles untouched,
    /// cannot raise p.
    #[test]
    fn p_value_monotone_in_observed_statistic(seed in 0u64..1000, bump in 0.0f64..0.5) {
        let mut rng = Rng::new(seed);
        let truth: Vec<usize> = (0..30).map(|_| rng.below(2)).collect();
        let a: Vec<usize> = truth.iter().map(|&t| if rng.bernoulli(0.7) { t } else { 1 - t }).collect();
        let b: Vec<usize> = truth.iter().map(|&t| if rng.bernoulli(0.6) { t } else { 1 - t }).collect();
        let accuracy = |p: &[usize], y: &[usize]| p.iter().zip(y).filter(|(x, z)| x == z).count() as f64 / y.len() as f64;
        // push A's observed score away from B's so |t| grows by exactly `bump`
        let sign = if accuracy(&a, &truth) >= accuracy(&b, &truth) { 1.0 } else { -1.0 };
        let o = PairedOutcomes::new(a, b, truth).unwrap();
        let p_with = |extra: f64| {
            let calls = AtomicUsize::new(0);
            let metric = |p: &[usize], y: &[usize]| {
                let acc = accuracy(p, y);
                // the first call scores system A on the observed data
                Ok(if calls.fetch_add(1, Ordering::SeqCst) == 0 { acc + sign * extra } else { acc })
            };
            approx_randomization_test(&o, "accuracy", metric, 199, seed, 1).unwrap().p
        };
        prop_assert!(p_with(bump) <= p_with(0.0));
    }
}

#[test]
fn sdae_training_makes_progress_on_marker_corpus() {
    let spec = SyntheticCorpusSpec { n_patients: 200, notes_per_patient: 1, tokens_per_note: 40, seed: 4, ..Default::default() };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let norm = Normalizer::default();
    let vocab = build_vocabulary(&corpus, NormalizationMode::Sdae, 5, &norm).unwrap();
    let f = featurize_tfidf(&corpus, &vocab, &norm).unwrap();
    let cfg = SdaeConfig {
        hidden_sizes: vec![32],
        epochs: 20,
        batch_size: 16,
        optimizer: RmsPropConfig { learning_rate: 3e-3, ..Default::default() },
        seed: 1,
        ..Default::default()
    };
    let trace = &train_sdae(&f, &cfg).unwrap().loss_trace[0];
    let tail = &trace[trace.len() - trace.len().div_ceil(10)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(tail_mean <= trace[0], "{tail_mean} > {}", trace[0]);
}
