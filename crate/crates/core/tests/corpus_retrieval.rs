mod common;

use proptest::prelude::*;
use reidr_core::corpus::{
    cosine_sim, load_corpus, save_corpus, Corpus, CorpusFormat, EmbeddingRecord, ExclusionFilter,
};

fn arb_corpus(max: usize) -> impl Strategy<Value = Corpus> {
    (1usize..6, 1..max).prop_flat_map(|(dim, n)| {
        prop::collection::vec(
            (0u32..6, 0u16..3, 0usize..2, prop::collection::vec(-1.0f32..1.0, dim)),
            n,
        )
        .prop_map(|rows| {
            let recs = rows
                .into_iter()
                .enumerate()
                .filter(|(_, r)| r.3.iter().any(|x| x.abs() > 1e-3))
                .map(|(i, (identity, camera, src, mut vector))| {
                    // coarse grid values provoke exact score ties
                    for x in &mut vector {
                        *x = (*x * 4.0).round() / 4.0;
                    }
                    if vector.iter().all(|&x| x == 0.0) {
                        vector[0] = 1.0;
                    }
                    EmbeddingRecord {
                        image_id: format!("r{:03}", (i * 37) % 1000),
                        identity,
                        camera,
                        source: ["a", "b"][src].into(),
                        vector,
                    }
                })
                .collect();
            Corpus::new(recs).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_matches_brute_force(corpus in arb_corpus(60), k in 1usize..80, junk in any::<bool>(), same_src in any::<bool>()) {
        let filter = ExclusionFilter { junk_same_identity_camera: junk, same_source_only: same_src };
        for q in corpus.records() {
            let got = corpus.topk_neighbors(&q.image_id, k, filter).unwrap();
            let want: Vec<(String, f64)> = common::brute_force_ranking(q, corpus.records(), |r| filter.admits(q, r))
                .into_iter()
                .take(k)
                .map(|(s, r)| (r.image_id.clone(), s))
                .collect();
            let got: Vec<(String, f64)> = got.into_iter().map(|n| (n.image_id, n.score)).collect();
            prop_assert_eq!(&got, &want);
            prop_assert!(got.windows(2).all(|w| w[0].1 >= w[1].1));
            prop_assert!(got.iter().all(|(id, _)| id != &q.image_id));
        }
    }

    #[test]
    fn stored_vectors_are_unit(corpus in arb_corpus(30)) {
        for r in corpus.records() {
            let v: Vec<f64> = r.vector.iter().map(|&x| f64::from(x)).collect();
            prop_assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_round_trip(corpus in arb_corpus(30)) {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("c.remb");
        let jsonl = dir.path().join("c.jsonl");
        save_corpus(&corpus, &bin, CorpusFormat::Binary).unwrap();
        save_corpus(&corpus, &jsonl, CorpusFormat::Jsonl).unwrap();
        let a = load_corpus(&bin).unwrap();
        let b = load_corpus(&jsonl).unwrap();
        prop_assert_eq!(&a, &corpus);
        prop_assert_eq!(&b, &corpus);
    }
}

#[test]
fn large_corpus_agrees_with_full_sort() {
    let corpus = common::cluster_corpus(
        &common::ClusterSpec { identities: 250, images_per_identity: 4, ..Default::default() },
        5,
    );
    assert_eq!(corpus.len(), 1000);
    for q in corpus.records().iter().step_by(97) {
        let got: Vec<String> = corpus
            .topk_neighbors(&q.image_id, 25, ExclusionFilter::SELF_ONLY)
            .unwrap()
            .into_iter()
            .map(|n| n.image_id)
            .collect();
        let want: Vec<String> = common::brute_force_ranking(q, corpus.records(), |_| true)
            .into_iter()
            .take(25)
            .map(|(_, r)| r.image_id.clone())
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn non_unit_input_is_normalized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("raw.jsonl");
    std::fs::write(
        &p,
        "{\"id\":\"a\",\"identity\":1,\"camera\":0,\"source\":\"s\",\"vector\":[3.0,4.0]}\n\n",
    )
    .unwrap();
    let c = load_corpus(&p).unwrap();
    assert_eq!(c.records()[0].vector, vec![0.6f32, 0.8]);
}
