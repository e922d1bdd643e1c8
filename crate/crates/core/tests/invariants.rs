use proptest::prelude::*;
use trustfed_core::corpus::{dialogue_split, markov_corpus, CorpusConfig};
use trustfed_core::harness::{partition_data, run_experiment, sample_clients};
use trustfed_core::model::local_train;
use trustfed_core::strategy::{adaptive_alpha, aggregate_mean, blend_update};
use trustfed_core::{
    AlphaSchedule, EmbeddingTable, FederationConfig, ParameterVector, ParameterVectorF32, StrategyConfig,
    TokenSequence, ToyDialogueModel, TrainConfig, TrustEvaluator,
};

fn vecs(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-50.0f64..50.0, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_lies_in_coordinate_hull(rows in (1usize..8, 1usize..10).prop_flat_map(|(n, d)| vecs(n, d))) {
        let ps: Vec<ParameterVector> = rows.iter().map(|r| ParameterVector::new(r.clone()).unwrap()).collect();
        let refs: Vec<&ParameterVector> = ps.iter().collect();
        let m = aggregate_mean(&refs).unwrap();
        for j in 0..m.dim() {
            let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m[j] >= lo - 1e-12 && m[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn blend_endpoints(rows in vecs(2, 6)) {
        let l = ParameterVector::new(rows[0].clone()).unwrap();
        let g = ParameterVector::new(rows[1].clone()).unwrap();
        prop_assert_eq!(blend_update(&l, &g, 0.0).unwrap(), l.clone());
        prop_assert_eq!(blend_update(&l, &g, 1.0).unwrap(), g.clone());
        prop_assert!(blend_update(&l, &g, 1.5).is_err());
    }

    #[test]
    fn adaptive_alpha_is_bounded(sg in 0.0f64..=1.0, sl in 0.0f64..=1.0, round in 0usize..500) {
        let s = AlphaSchedule::default();
        let a = adaptive_alpha(sg, sl, &s, round);
        prop_assert!(a >= s.alpha_min && a <= s.alpha_max);
        if sg <= sl {
            prop_assert_eq!(a, s.alpha_min);
        }
    }

    #[test]
    fn sampling_is_a_sorted_subset(n in 1usize..30, seed in any::<u64>(), round in 0usize..50) {
        let k = 1 + (seed as usize % n);
        let s = sample_clients(n, k, seed, round).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&c| c < n));
    }

    #[test]
    fn partitions_cover_the_corpus(n in 1usize..10, skew in 0.0f64..3.0, seed in any::<u64>()) {
        let corpus = markov_corpus(&CorpusConfig { n_sequences: 80, ..CorpusConfig::default() }).unwrap();
        let parts = partition_data(&corpus, n, skew, seed).unwrap();
        prop_assert_eq!(parts.len(), n);
        prop_assert!(parts.iter().all(|p| !p.data.is_empty()));
        let mut all: Vec<TokenSequence> = parts.into_iter().flat_map(|p| p.data).collect();
        let mut want = corpus.clone();
        all.sort();
        want.sort();
        prop_assert_eq!(all, want);
    }
}

#[test]
fn local_training_lowers_loss_in_both_precisions() {
    let corpus = markov_corpus(&CorpusConfig::default()).unwrap();
    let cfg = TrainConfig { learning_rate: 1.0, local_steps: 20, batch_size: 32, seed: 4 };
    let w = local_train(&ParameterVector::zeros(256), 16, &corpus, &cfg, None).unwrap();
    let before = ToyDialogueModel::zeros(16).forward_loss(&corpus).unwrap();
    let after = ToyDialogueModel::new(16, w.clone()).unwrap().forward_loss(&corpus).unwrap();
    assert!(after < before);

    let cfg32 = trustfed_core::model::TrainConfig::<f32> { learning_rate: 1.0f32, local_steps: 20, batch_size: 32, seed: 4 };
    let w32 = local_train(&ParameterVectorF32::zeros(256), 16, &corpus, &cfg32, None).unwrap();
    let drift = w.as_slice().iter().zip(w32.as_slice()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-4, "f32 and f64 training diverge by {drift}");
}

#[test]
fn every_strategy_runs_and_learns() {
    let corpus = markov_corpus(&CorpusConfig::default()).unwrap();
    let (train, eval) = dialogue_split(corpus, 40).unwrap();
    let ev = TrustEvaluator::DeterministicF1 { table: EmbeddingTable::random(16, 8, 2).unwrap() };
    for strategy in [
        StrategyConfig::FedAvg,
        StrategyConfig::FedProx { mu: 0.05 },
        StrategyConfig::FedDtre(AlphaSchedule::default()),
        StrategyConfig::FixedAlpha { alpha: 0.5 },
        StrategyConfig::LocalOnly,
    ] {
        let cfg = FederationConfig {
            rounds: 10,
            strategy: strategy.clone(),
            train: TrainConfig { learning_rate: 2.0, ..TrainConfig::default() },
            trust_eval_samples: 20,
            ..FederationConfig::default()
        };
        let r = run_experiment(&cfg, 16, &train, &eval, &ev).unwrap();
        assert_eq!(r.rounds.len(), 10);
        assert!(r.final_loss < r.initial_loss, "{}: {} -> {}", strategy.label(), r.initial_loss, r.final_loss);
        let m = r.metrics.values();
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
