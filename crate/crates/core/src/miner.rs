//! Non-trivial triplet mining over top-K retrieval windows.
//!
//! For each query the top-K window (self excluded, same source only by
//! default) is split into same-identity positives and different-identity
//! negatives. Queries whose window holds at least one of each are eligible
//! and contribute exactly one triplet.
//!
//! Random stream discipline, all keyed by the query's image id:
//! - `nts/<query_id>`: first draw picks the positive (window order), second
//!   draw picks the negative (window order), via [`rng::draw_index`].
//! - `nts-order/<query_id>`: the derived seed is the query's shuffle key;
//!   with a per-source quota, eligible queries are admitted first-come in
//!   ascending (key, query id) order.
//!
//! The emitted pool is sorted by query id.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, ExclusionFilter};
use crate::rng;

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("mining window K must be at least 2, got {0}")]
    WindowTooSmall(usize),
    #[error("per-source quota must be at least 1")]
    ZeroQuota,
    #[error("source {0:?} has zero images")]
    ZeroImages(String),
    #[error("sampled count {sampled} exceeds image count {images} for source {dataset:?}")]
    SampledExceedsImages { dataset: String, images: u64, sampled: u64 },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Top-K window size.
    pub k: usize,
    pub per_source_quota: Option<usize>,
    pub seed: u64,
    /// Also drop same-identity same-camera records from the window.
    pub junk_filter: bool,
    /// Restrict each window to the query's own source dataset.
    pub same_source_only: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { k: 5, per_source_quota: None, seed: 0, junk_filter: false, same_source_only: true }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MinerError> {
        if self.k < 2 {
            return Err(MinerError::WindowTooSmall(self.k));
        }
        if self.per_source_quota == Some(0) {
            return Err(MinerError::ZeroQuota);
        }
        Ok(())
    }

    pub fn filter(&self) -> ExclusionFilter {
        ExclusionFilter {
            junk_same_identity_camera: self.junk_filter,
            same_source_only: self.same_source_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "query")]
    pub query_id: String,
    #[serde(rename = "positive")]
    pub positive_id: String,
    #[serde(rename = "negative")]
    pub negative_id: String,
    pub source: String,
}

/// Window split into positives and negatives, both in retrieval order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// Splits the query's top-`k` window by identity.
pub fn partition_topk(
    corpus: &Corpus,
    query_id: &str,
    k: usize,
    filter: ExclusionFilter,
) -> Result<Partition, CorpusError> {
    let query = corpus.get(query_id)?;
    let mut part = Partition::default();
    for n in corpus.topk_neighbors(query_id, k, filter)? {
        if corpus.get(&n.image_id)?.identity == query.identity {
            part.positives.push(n.image_id);
        } else {
            part.negatives.push(n.image_id);
        }
    }
    Ok(part)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    #[serde(rename = "images")]
    pub image_count: u64,
    #[serde(rename = "samples")]
    pub sampled_count: u64,
    /// Percentage rounded to one decimal.
    pub nts_percent: f64,
}

impl SourceStats {
    fn new(image_count: u64, sampled_count: u64) -> Self {
        let pct = 100.0 * sampled_count as f64 / image_count as f64;
        Self { image_count, sampled_count, nts_percent: (pct * 10.0).round() / 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub sources: BTreeMap<String, SourceStats>,
    pub total: SourceStats,
}

/// Per-source sampling percentages and the overall rate.
pub fn pool_stats(counts: &BTreeMap<String, (u64, u64)>) -> Result<PoolStats, MinerError> {
    let mut sources = BTreeMap::new();
    let (mut images, mut sampled) = (0u64, 0u64);
    for (name, &(img, smp)) in counts {
        if img == 0 {
            return Err(MinerError::ZeroImages(name.clone()));
        }
        if smp > img {
            return Err(MinerError::SampledExceedsImages { dataset: name.clone(), images: img, sampled: smp });
        }
        images += img;
        sampled += smp;
        sources.insert(name.clone(), SourceStats::new(img, smp));
    }
    if images == 0 {
        return Err(MinerError::ZeroImages("total".into()));
    }
    Ok(PoolStats { sources, total: SourceStats::new(images, sampled) })
}

/// Number of ordered query-gallery pairs over `image_count` images.
pub fn pair_space_size(image_count: u64) -> u128 {
    u128::from(image_count) * u128::from(image_count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub triplets: Vec<Triplet>,
    pub stats: PoolStats,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.triplets {
            out.push_str(&serde_json::to_string(t).expect("triplet serializes"));
            out.push('\n');
        }
        out
    }
}

struct Eligible {
    position: usize,
    triplet: Triplet,
}

/// Mines one triplet per query whose window mixes positives and negatives.
///
/// Returns an empty pool (with a warning) when no query qualifies.
pub fn mine_triplets(corpus: &Corpus, config: &MiningConfig) -> Result<CandidatePool, MinerError> {
    config.validate()?;
    let filter = config.filter();
    let mined = corpus
        .records()
        .par_iter()
        .enumerate()
        .map(|(position, q)| {
            let part = partition_topk(corpus, &q.image_id, config.k, filter)?;
            if part.positives.is_empty() || part.negatives.is_empty() {
                return Ok(None);
            }
            let mut stream = rng::stream(config.seed, &format!("nts/{}", q.image_id));
            let positive_id = part.positives[rng::draw_index(&mut stream, part.positives.len())].clone();
            let negative_id = part.negatives[rng::draw_index(&mut stream, part.negatives.len())].clone();
            Ok(Some(Eligible {
                position,
                triplet: Triplet { query_id: q.image_id.clone(), positive_id, negative_id, source: q.source.clone() },
            }))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    let mut eligible: Vec<Eligible> = mined.into_iter().flatten().collect();

    if let Some(quota) = config.per_source_quota {
        let key = |e: &Eligible| rng::derive_seed(config.seed, &format!("nts-order/{}", e.triplet.query_id));
        eligible.sort_by_cached_key(|e| (key(e), e.triplet.query_id.clone()));
        let mut taken: BTreeMap<String, usize> = BTreeMap::new();
        eligible.retain(|e| {
            let n = taken.entry(e.triplet.source.clone()).or_default();
            *n += 1;
            *n <= quota
        });
    }
    eligible.sort_by(|a, b| a.triplet.query_id.cmp(&b.triplet.query_id).then(a.position.cmp(&b.position)));

    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in corpus.records() {
        counts.entry(r.source.clone()).or_default().0 += 1;
    }
    for e in &eligible {
        counts.entry(e.triplet.source.clone()).or_default().1 += 1;
    }
    let triplets: Vec<Triplet> = eligible.into_iter().map(|e| e.triplet).collect();
    debug_assert_eq!(triplets.iter().collect::<HashSet<_>>().len(), triplets.len());
    if triplets.is_empty() {
        log::warn!("candidate pool is empty: no query window mixes positives and negatives");
    }
    let stats = if corpus.is_empty() {
        PoolStats { sources: BTreeMap::new(), total: SourceStats { image_count: 0, sampled_count: 0, nts_percent: 0.0 } }
    } else {
        pool_stats(&counts)?
    };
    Ok(CandidatePool { triplets, stats })
}
