mod common;

use common::ClusterSpec;
use proptest::prelude::*;
use reidr_core::metrics::{average_precision, evaluate, evaluate_lists, rank_gallery, RankedList};

#[test]
fn matches_reference_evaluator_on_synthetic_sets() {
    for seed in 0..4 {
        let spec = ClusterSpec { identities: 50, images_per_identity: 5, noise: 0.9, ..Default::default() };
        let (queries, gallery) = common::query_gallery(&spec, seed);
        assert_eq!(queries.len(), 50);
        let report = evaluate(&queries, &gallery, 20).unwrap();
        let (map, cmc) = common::reference_evaluate(&queries, &gallery, 20);
        assert!((report.map - map).abs() < 1e-12, "seed {seed}: {} vs {map}", report.map);
        for (a, b) in report.cmc.iter().zip(&cmc) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(report.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(report.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn self_matches_excluded_when_queries_are_the_gallery() {
    let corpus = common::cluster_corpus(&ClusterSpec::default(), 9);
    for q in corpus.records() {
        let list = rank_gallery(q, &corpus, true).unwrap();
        assert!(list.ids().all(|id| id != q.image_id));
        assert!(list.entries.iter().all(|e| {
            let r = corpus.get(&e.image_id).unwrap();
            !(r.identity == q.identity && r.camera == q.camera)
        }));
    }
    let (map, cmc) = common::reference_evaluate(&corpus, &corpus, 5);
    let report = evaluate(&corpus, &corpus, 5).unwrap();
    assert!((report.map - map).abs() < 1e-12);
    assert_eq!(report.cmc, cmc);
}

fn resorted(list: &RankedList, f: impl Fn(f64) -> f64) -> RankedList {
    let mut l = list.clone();
    for e in &mut l.entries {
        e.score = f(e.score);
    }
    l.entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));
    l
}

#[test]
fn monotone_score_transform_preserves_everything() {
    let spec = ClusterSpec { identities: 30, images_per_identity: 4, noise: 1.0, ..Default::default() };
    let (queries, gallery) = common::query_gallery(&spec, 2);
    let lists: Vec<RankedList> = queries.records().iter().map(|q| rank_gallery(q, &gallery, true).unwrap()).collect();
    let moved: Vec<RankedList> = lists.iter().map(|l| resorted(l, |s| (3.0 * s).exp() + s)).collect();
    for (a, b) in lists.iter().zip(&moved) {
        assert_eq!(a.ids().collect::<Vec<_>>(), b.ids().collect::<Vec<_>>());
    }
    let ra = evaluate_lists(&lists, 10);
    let rb = evaluate_lists(&moved, 10);
    assert_eq!(ra.map, rb.map);
    assert_eq!(ra.cmc, rb.cmc);
}

proptest! {
    #[test]
    fn relevant_first_gives_perfect_ap(relevant in 1usize..20, irrelevant in 0usize..20) {
        let pattern: Vec<bool> = std::iter::repeat_n(true, relevant).chain(std::iter::repeat_n(false, irrelevant)).collect();
        let list = RankedList {
            query_id: "q".into(),
            entries: pattern.iter().enumerate().map(|(i, &r)| reidr_core::metrics::RankedEntry {
                image_id: format!("{i:03}"), score: -(i as f64), relevant: r,
            }).collect(),
        };
        prop_assert_eq!(average_precision(&list).unwrap(), 1.0);
    }
}
