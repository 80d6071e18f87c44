mod common;

use std::collections::HashSet;

use common::ClusterSpec;
use reidr_core::miner::{mine_triplets, MiningConfig};
use reidr_core::rng;
use reidr_core::simlab::{
    pairs_from_pool, run_collapse_experiment, simulate, train_step, PairSample, PairStream, SimConfig, StepConfig,
    ToyPolicy,
};

#[test]
fn analytic_gradient_matches_finite_differences() {
    let worst = common::gradient_check(20, 3);
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn gradient_in_f32_tracks_f64() {
    let p64 = ToyPolicy { weights: vec![0.7], bias: -0.2 };
    let p32 = ToyPolicy { weights: vec![0.7f32], bias: -0.2 };
    for a in [0u8, 1] {
        let (w64, b64) = p64.log_prob_grad(a, &[0.4]);
        let (w32, b32) = p32.log_prob_grad(a, &[0.4]);
        assert!((f64::from(w32[0]) - w64[0]).abs() < 1e-6);
        assert!((f64::from(b32) - b64).abs() < 1e-6);
    }
}

#[test]
fn separable_positive_pair_gains_probability() {
    let p = ToyPolicy::zeros(1);
    let pair = PairSample { features: vec![0.9], label: 1 };
    let cfg = StepConfig { lr: 0.1, ..StepConfig::default() };
    let mut r = rng::stream(4, "pos");
    let out = train_step(&p, &p, std::slice::from_ref(&pair), &cfg, &mut r).unwrap();
    // with a mixed group the correct answer has positive advantage
    assert!(out.policy.prob_one(&pair.features) > p.prob_one(&pair.features));
}

#[test]
fn simulation_is_deterministic() {
    let cfg = SimConfig { steps: 40, seed: 9, ..SimConfig::default() };
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn collapse_is_monotone_in_positive_rate() {
    for seed in 0..3 {
        let p: Vec<f64> = [0.0017, 0.05, 0.5]
            .iter()
            .map(|&rate| run_collapse_experiment(rate, 0.4, 300, seed).unwrap().p_output_1)
            .collect();
        assert!(p[0] <= p[1] && p[1] <= p[2], "seed {seed}: {p:?}");
    }
}

#[test]
fn all_positive_stream_drifts_to_always_one() {
    let r = run_collapse_experiment(1.0, 0.4, 300, 0).unwrap();
    assert!(r.p_output_1 > 0.99, "{}", r.p_output_1);
    assert!(!r.collapsed);
}

#[test]
fn reward_trajectory_is_recorded() {
    let r = run_collapse_experiment(0.5, 0.4, 50, 1).unwrap();
    assert_eq!(r.trajectory.len(), 50);
    assert!(r.trajectory.iter().all(|t| (0.0..=1.0).contains(&t.p_output_1) && (0.0..=1.0).contains(&t.reward_mean)));
    assert_eq!(r.trajectory.last().unwrap().balanced_acc, r.balanced_accuracy);
}

#[test]
fn stream_respects_positive_rate() {
    let s = PairStream { positive_rate: 0.3, ..PairStream::default() };
    let mut r = rng::stream(2, "rate");
    let n = 20_000;
    let pos = (0..n).filter(|_| s.sample::<f64, _>(&mut r).label == 1).count();
    assert!((pos as f64 / n as f64 - 0.3).abs() < 0.02);
}

#[test]
fn pool_pairs_are_balanced_and_labeled_by_identity() {
    for seed in 0..10 {
        let corpus = common::cluster_corpus(&ClusterSpec { identities: 15, images_per_identity: 3, noise: 0.8, ..Default::default() }, seed);
        let pool = mine_triplets(&corpus, &MiningConfig { seed, ..Default::default() }).unwrap();
        let pairs = pairs_from_pool(&pool, &corpus).unwrap();
        assert_eq!(pairs.len(), 2 * pool.len());
        assert_eq!(pairs.iter().filter(|p| p.sample.label == 1).count(), pool.len());
        for p in &pairs {
            let same = corpus.get(&p.query_id).unwrap().identity == corpus.get(&p.gallery_id).unwrap().identity;
            assert_eq!(u8::from(same), p.sample.label);
        }
        let ids: HashSet<_> = pairs.iter().map(|p| (&p.query_id, &p.gallery_id)).collect();
        assert_eq!(ids.len(), pairs.len());
    }
    let empty = mine_triplets(
        &common::cluster_corpus(&ClusterSpec { identities: 1, images_per_identity: 3, ..Default::default() }, 0),
        &MiningConfig::default(),
    )
    .unwrap();
    assert!(pairs_from_pool(&empty, &common::cluster_corpus(&ClusterSpec::default(), 0)).unwrap().is_empty());
}
