use fedreweight::trainer::*;
use proptest::prelude::*;

fn corpus() -> (SyntheticSource, Vec<String>, Vec<String>) {
    let src = SyntheticSource::new(6, 2, 4);
    let train = src.generate(120, 1);
    let test = src.generate(40, 2);
    (src, train, test)
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        local_epochs: 3,
        rounds: 2,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_lowers_perplexity() {
    let (src, train, test) = corpus();
    let init = TinyLmParams::zeros(src.vocab.clone());
    let before = perplexity(&init, &test).unwrap();
    let shards: Vec<TrainShard> = train
        .chunks(30)
        .enumerate()
        .map(|(k, c)| TrainShard::raw(k, c.to_vec()))
        .collect();
    let (model, trace) = run_federated(&init, &shards, &small_cfg(0), &test).unwrap();
    assert_eq!(trace.len(), 2);
    assert_eq!(trace[1].round, 2);
    assert!(trace[1].test_perplexity < before);
    assert!((trace[1].test_perplexity - perplexity(&model, &test).unwrap()).abs() < 1e-12);
    for r in 0..model.rows() {
        let row: f64 = model.probabilities()[r * model.v()..(r + 1) * model.v()].iter().sum();
        assert!((row - 1.0).abs() < 1e-9);
    }
}

#[test]
fn fixed_seed_is_deterministic() {
    let (src, train, test) = corpus();
    let init = TinyLmParams::zeros(src.vocab.clone());
    let shards = vec![
        TrainShard::raw(0, train[..60].to_vec()),
        TrainShard::raw(1, train[60..].to_vec()),
    ];
    let a = run_federated(&init, &shards, &small_cfg(5), &test).unwrap();
    let b = run_federated(&init, &shards, &small_cfg(5), &test).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_client_one_round_is_centralized_training() {
    let (src, train, test) = corpus();
    let init = TinyLmParams::zeros(src.vocab.clone());
    let shard = TrainShard::raw(0, train);
    let cfg = TrainConfig {
        rounds: 1,
        ..small_cfg(2)
    };
    let (fed, _) = run_federated(&init, std::slice::from_ref(&shard), &cfg, &test).unwrap();
    let local = train_shard(&init, &shard, &cfg, 0).unwrap();
    assert_eq!(fed.logits, local.params_after.logits);
}

#[test]
fn equal_weights_equal_unit_weights() {
    let (src, train, test) = corpus();
    let init = TinyLmParams::zeros(src.vocab.clone());
    let unit = TrainShard::raw(0, train.clone());
    let half = TrainShard::new(0, train.clone(), vec![0.37; train.len()], train.len()).unwrap();
    let (a, _) = run_federated(&init, &[unit], &small_cfg(3), &test).unwrap();
    let (b, _) = run_federated(&init, &[half], &small_cfg(3), &test).unwrap();
    let dev = a
        .logits
        .iter()
        .zip(&b.logits)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-9, "{dev}");
}

#[test]
fn model_json_has_vocab_and_logits() {
    let p = TinyLmParams::zeros(Vocab::new("ab".chars()));
    let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    assert_eq!(v["logits"].as_array().unwrap().len(), 6);
    let back: TinyLmParams = serde_json::from_str(&p.to_json()).unwrap();
    assert_eq!(back, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fedavg_is_order_independent(n in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let vocab = Vocab::new("abc".chars());
        let ups: Vec<ClientUpdate> = (0..n).map(|k| ClientUpdate {
            client_id: k,
            params_after: TinyLmParams { vocab: vocab.clone(), logits: (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect() },
            n_samples: rng.gen_range(1..100),
        }).collect();
        let a = fedavg(&ups).unwrap();
        let mut rev = ups.clone();
        rev.reverse();
        let b = fedavg(&rev).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_perplexity_is_vocab_size(texts in prop::collection::vec("[a-e]{1,20}", 1..10)) {
        let p = TinyLmParams::zeros(Vocab::new("abcde".chars()));
        prop_assert!((perplexity(&p, &texts).unwrap() - 5.0).abs() < 1e-9);
    }
}
