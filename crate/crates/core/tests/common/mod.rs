//! Fixtures and independent reference implementations shared by the
//! integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

use rand_distr::{Distribution, StandardNormal};
use reidr_core::corpus::{Corpus, EmbeddingRecord};
use reidr_core::grpo::GrpoConfig;
use reidr_core::miner::{partition_topk, CandidatePool, MiningConfig, Triplet};
use reidr_core::rerank::RerankOutcome;
use reidr_core::simlab::{batch_gradient, batch_objective, sample_rollouts, PairSample, RewardMode, SampledGroup, ToyPolicy};
use reidr_core::rng::{self, SplitMix64};

/// Gaussian identity clusters: each identity has a random center, each image
/// is center + `noise` * N(0, I), on one of `cameras` cameras.
pub struct ClusterSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub cameras: u16,
    pub dim: usize,
    pub noise: f64,
    pub sources: Vec<String>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self { identities: 20, images_per_identity: 4, cameras: 3, dim: 16, noise: 0.6, sources: vec!["s".into()] }
    }
}

pub fn cluster_records(spec: &ClusterSpec, seed: u64, prefix: &str) -> Vec<EmbeddingRecord> {
    let mut r = rng::stream(seed, &format!("fixture/{prefix}"));
    let mut out = Vec::new();
    for id in 0..spec.identities {
        let center: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let source = spec.sources[id % spec.sources.len()].clone();
        for j in 0..spec.images_per_identity {
            let v: Vec<f32> = center
                .iter()
                .map(|c| {
                    let n: f64 = StandardNormal.sample(&mut r);
                    (c + spec.noise * n) as f32
                })
                .collect();
            out.push(EmbeddingRecord {
                image_id: format!("{prefix}{id:04}_{j:02}"),
                identity: id as u32,
                camera: (rng::draw_index(&mut r, spec.cameras as usize)) as u16,
                source: source.clone(),
                vector: v,
            });
        }
    }
    out
}

pub fn cluster_corpus(spec: &ClusterSpec, seed: u64) -> Corpus {
    Corpus::new(cluster_records(spec, seed, "img")).unwrap()
}

/// Query/gallery split: the first image of each identity is a query.
pub fn query_gallery(spec: &ClusterSpec, seed: u64) -> (Corpus, Corpus) {
    let all = cluster_records(spec, seed, "img");
    let (q, g): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.image_id.ends_with("_00"));
    (Corpus::new(q).unwrap(), Corpus::new(g).unwrap())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    s.clamp(-1.0, 1.0)
}

/// Full sort of every admitted record, descending score then ascending id.
pub fn brute_force_ranking<'a>(
    query: &EmbeddingRecord,
    gallery: &'a [EmbeddingRecord],
    admit: impl Fn(&EmbeddingRecord) -> bool,
) -> Vec<(f64, &'a EmbeddingRecord)> {
    let mut all: Vec<(f64, &EmbeddingRecord)> = gallery
        .iter()
        .filter(|r| r.image_id != query.image_id && admit(r))
        .map(|r| (dot(&query.vector, &r.vector), r))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.image_id.cmp(&b.1.image_id)));
    all
}

/// Reference miner: brute-force windows, then the documented draw discipline.
pub fn reference_mine(corpus: &Corpus, cfg: &MiningConfig) -> Vec<Triplet> {
    let recs = corpus.records();
    let mut eligible: Vec<Triplet> = Vec::new();
    for q in recs {
        let window: Vec<&EmbeddingRecord> = brute_force_ranking(q, recs, |r| {
            (!cfg.same_source_only || r.source == q.source)
                && !(cfg.junk_filter && r.identity == q.identity && r.camera == q.camera)
        })
        .into_iter()
        .take(cfg.k)
        .map(|(_, r)| r)
        .collect();
        let pos: Vec<&str> = window.iter().filter(|r| r.identity == q.identity).map(|r| r.image_id.as_str()).collect();
        let neg: Vec<&str> = window.iter().filter(|r| r.identity != q.identity).map(|r| r.image_id.as_str()).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut s = rng::stream(cfg.seed, &format!("nts/{}", q.image_id));
        let p = pos[rng::draw_index(&mut s, pos.len())];
        let n = neg[rng::draw_index(&mut s, neg.len())];
        eligible.push(Triplet {
            query_id: q.image_id.clone(),
            positive_id: p.into(),
            negative_id: n.into(),
            source: q.source.clone(),
        });
    }
    if let Some(quota) = cfg.per_source_quota {
        let mut keyed: Vec<(u64, Triplet)> = eligible
            .into_iter()
            .map(|t| (rng::derive_seed(cfg.seed, &format!("nts-order/{}", t.query_id)), t))
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.query_id.cmp(&b.1.query_id)));
        let mut used: BTreeMap<String, usize> = BTreeMap::new();
        eligible = Vec::new();
        for (_, t) in keyed {
            let c = used.entry(t.source.clone()).or_insert(0);
            if *c < quota {
                *c += 1;
                eligible.push(t);
            }
        }
    }
    eligible.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    eligible
}

pub fn triplets_jsonl(ts: &[Triplet]) -> String {
    ts.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect()
}

/// Naive evaluator: (mAP, CMC) with junk filtering, AP from explicit precision@k.
pub fn reference_evaluate(queries: &Corpus, gallery: &Corpus, k_max: usize) -> (f64, Vec<f64>) {
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    for q in queries.records() {
        let ranked = brute_force_ranking(q, gallery.records(), |r| !(r.identity == q.identity && r.camera == q.camera));
        let rel: Vec<bool> = ranked.iter().map(|(_, r)| r.identity == q.identity).collect();
        let total = rel.iter().filter(|&&x| x).count();
        if total == 0 {
            continue;
        }
        let mut ap = 0.0;
        for k in 1..=rel.len() {
            if rel[k - 1] {
                let hits = rel[..k].iter().filter(|&&x| x).count();
                ap += hits as f64 / k as f64;
            }
        }
        aps.push(ap / total as f64);
        first_hits.push(rel.iter().position(|&x| x).unwrap() + 1);
    }
    let n = aps.len() as f64;
    let cmc = (1..=k_max).map(|k| first_hits.iter().filter(|&&h| h <= k).count() as f64 / n).collect();
    (aps.iter().sum::<f64>() / n, cmc)
}

/// Minimal HTTP/1.1 server answering `requests` POSTs with `handler(path, body)`.
/// Returns the bound base URL and a handle yielding the received (path, body) pairs.
pub fn serve<F>(requests: usize, handler: F) -> (String, JoinHandle<Vec<(String, String)>>)
where
    F: Fn(&str, &str) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_owned();
            let mut len = 0usize;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                let lower = h.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            let (status, reply) = handler(&path, &body);
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
            seen.push((path, body));
        }
        seen
    });
    (url, handle)
}

/// Random clustered corpus of at most 200 records over three sources.
pub fn fuzz_corpus(seed: u64) -> Corpus {
    let mut r = rng::stream(seed, "fuzz-size");
    let spec = ClusterSpec {
        identities: 5 + rng::draw_index(&mut r, 40),
        images_per_identity: 2 + rng::draw_index(&mut r, 4),
        cameras: 2,
        dim: 4 + rng::draw_index(&mut r, 12),
        noise: 0.3 + rng::draw_unit(&mut r),
        sources: vec!["a".into(), "b".into(), "c".into()],
    };
    cluster_corpus(&spec, seed)
}

/// Random mining configuration keyed by `seed`.
pub fn fuzz_config(seed: u64) -> MiningConfig {
    let mut r = rng::stream(seed, "fuzz-config");
    MiningConfig {
        k: 2 + rng::draw_index(&mut r, 6),
        per_source_quota: if rng::draw_unit(&mut r) < 0.5 { Some(1 + rng::draw_index(&mut r, 8)) } else { None },
        seed: seed * 7919,
        junk_filter: rng::draw_unit(&mut r) < 0.3,
        same_source_only: rng::draw_unit(&mut r) < 0.8,
    }
}

/// Every structural property a mined pool must satisfy.
pub fn check_triplet_invariants(corpus: &Corpus, cfg: &MiningConfig, pool: &CandidatePool) -> Result<(), String> {
    let mut mixed = 0;
    for q in corpus.records() {
        let p = partition_topk(corpus, &q.image_id, cfg.k, cfg.filter()).map_err(|e| e.to_string())?;
        if !p.positives.is_empty() && !p.negatives.is_empty() {
            mixed += 1;
        }
    }
    if pool.len() > mixed {
        return Err(format!("{} triplets from {mixed} eligible queries", pool.len()));
    }
    let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &pool.triplets {
        let q = corpus.get(&t.query_id).map_err(|e| e.to_string())?;
        let pos = corpus.get(&t.positive_id).map_err(|e| e.to_string())?;
        let neg = corpus.get(&t.negative_id).map_err(|e| e.to_string())?;
        if pos.identity != q.identity || neg.identity == q.identity || t.positive_id == t.query_id {
            return Err(format!("identity invariant broken: {t:?}"));
        }
        let window: HashSet<String> = corpus
            .topk_neighbors(&t.query_id, cfg.k, cfg.filter())
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|n| n.image_id)
            .collect();
        if !window.contains(&t.positive_id) || !window.contains(&t.negative_id) {
            return Err(format!("triplet outside its window: {t:?}"));
        }
        if t.source != q.source {
            return Err(format!("source mismatch: {t:?}"));
        }
        *per_source.entry(&t.source).or_default() += 1;
    }
    if let Some(quota) = cfg.per_source_quota {
        if per_source.values().any(|&n| n > quota) {
            return Err(format!("quota {quota} exceeded: {per_source:?}"));
        }
    }
    let unique: HashSet<_> = pool.triplets.iter().collect();
    if unique.len() != pool.len() || !pool.triplets.windows(2).all(|w| w[0].query_id < w[1].query_id) {
        return Err("duplicate or unsorted triplets".into());
    }
    for (src, s) in &pool.stats.sources {
        let expected = (1000.0 * s.sampled_count as f64 / s.image_count as f64).round() / 10.0;
        let images = corpus.records().iter().filter(|r| &r.source == src).count();
        if s.nts_percent != expected || s.image_count as usize != images {
            return Err(format!("bad stats for {src}: {s:?}"));
        }
    }
    Ok(())
}

/// Reranking permutes the list, keeps the tail, and stably moves judged
/// matches ahead of judged non-matches.
pub fn check_rerank_invariants(o: &RerankOutcome) -> Result<(), String> {
    let mut a: Vec<&str> = o.base.ids().collect();
    let mut b: Vec<&str> = o.reranked.ids().collect();
    let k = o.judgments.len();
    if o.base.entries[k..] != o.reranked.entries[k..] {
        return Err(format!("{}: tail changed", o.base.query_id));
    }
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(format!("{}: not a permutation", o.base.query_id));
    }
    let expected: Vec<&str> = [1u8, 0]
        .iter()
        .flat_map(|&d| o.judgments.iter().filter(move |j| j.decision == d).map(|j| j.id.as_str()))
        .collect();
    let got: Vec<&str> = o.reranked.ids().take(k).collect();
    if got != expected {
        return Err(format!("{}: unstable promotion {got:?} vs {expected:?}", o.base.query_id));
    }
    Ok(())
}

pub fn random_policy(r: &mut SplitMix64, width: usize, scale: f64) -> ToyPolicy<f64> {
    ToyPolicy {
        weights: (0..width).map(|_| scale * (2.0 * rng::draw_unit(r) - 1.0)).collect(),
        bias: scale * (2.0 * rng::draw_unit(r) - 1.0),
    }
}

/// Groups sampled from `old`, scored under `reference`, with mixed labels.
pub fn random_groups(r: &mut SplitMix64, old: &ToyPolicy<f64>, reference: &ToyPolicy<f64>, width: usize) -> Vec<SampledGroup<f64>> {
    (0..6)
        .map(|i| {
            let pair = PairSample {
                features: (0..width).map(|_| 2.0 * rng::draw_unit(r) - 1.0).collect(),
                label: (i % 2) as u8,
            };
            sample_rollouts(old, old, reference, &pair, 8, 1e-8, RewardMode::AccuracyFormat {}, r).unwrap()
        })
        .collect()
}

pub fn flat(p: &ToyPolicy<f64>) -> Vec<f64> {
    p.weights.iter().copied().chain([p.bias]).collect()
}

pub fn unflat(x: &[f64]) -> ToyPolicy<f64> {
    ToyPolicy { weights: x[..x.len() - 1].to_vec(), bias: x[x.len() - 1] }
}

/// Largest relative error between the analytic gradient and central
/// differences over `points` random parameter points.
pub fn gradient_check(points: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "fd");
    let cfg = GrpoConfig::<f64>::default();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < points {
        let width = 1 + rng::draw_index(&mut r, 3);
        let old = random_policy(&mut r, width, 1.5);
        let reference = random_policy(&mut r, width, 1.5);
        let groups = random_groups(&mut r, &old, &reference, width);
        if groups.iter().all(|g| g.group.traces.iter().all(|t| t.advantage == 0.0)) {
            continue;
        }
        // current policy near the sampling policy so some ratios sit inside the band and some outside
        let theta: Vec<f64> = flat(&old).iter().map(|x| x + 0.3 * (2.0 * rng::draw_unit(&mut r) - 1.0)).collect();
        let (gw, gb) = batch_gradient(&unflat(&theta), &groups, &cfg).unwrap();
        let analytic: Vec<f64> = gw.into_iter().chain([gb]).collect();
        let h = 1e-6;
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += h;
                dn[i] -= h;
                (batch_objective(&unflat(&up), &groups, &cfg).unwrap() - batch_objective(&unflat(&dn), &groups, &cfg).unwrap())
                    / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = fd.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
        checked += 1;
    }
    worst
}

