//! ReID evaluation: ranked lists, average precision, mAP and CMC.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, EmbeddingRecord, ExclusionFilter};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ranked list has no relevant entry")]
    NoRelevant,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub score: f64,
    pub relevant: bool,
}

/// Gallery ordering for one query. After re-ranking the order is authoritative
/// and scores are informational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// 1-based position of the first relevant entry.
    pub fn first_hit(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.relevant).map(|i| i + 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }
}

/// Ranks the whole gallery against `query`, flagging same-identity entries.
///
/// With `junk_filter`, gallery items sharing both identity and camera with
/// the query are removed.
pub fn rank_gallery(
    query: &EmbeddingRecord,
    gallery: &Corpus,
    junk_filter: bool,
) -> Result<RankedList, MetricsError> {
    let filter = if junk_filter { ExclusionFilter::JUNK } else { ExclusionFilter::SELF_ONLY };
    let entries = gallery
        .rank_all(query, filter)?
        .into_iter()
        .map(|n| {
            let relevant = gallery.get(&n.image_id).map(|r| r.identity == query.identity)?;
            Ok(RankedEntry { image_id: n.image_id, score: n.score, relevant })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(RankedList { query_id: query.image_id.clone(), entries })
}

/// Non-interpolated AP: mean over relevant positions `i` of precision@i.
pub fn average_precision(list: &RankedList) -> Result<f64, MetricsError> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in list.entries.iter().enumerate() {
        if e.relevant {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(MetricsError::NoRelevant);
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` is Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub per_query_ap: BTreeMap<String, f64>,
    pub per_query_first_hit: BTreeMap<String, usize>,
    /// Queries without any relevant gallery entry, excluded from the averages.
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).copied().unwrap_or(f64::NAN)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    /// `(query_id, AP, first-hit rank)` rows in query-id order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, f64, usize)> {
        self.per_query_ap
            .iter()
            .map(|(q, &ap)| (q.as_str(), ap, self.per_query_first_hit[q]))
    }
}

/// Aggregates already-ranked lists into mAP and CMC@1..=k_max.
pub fn evaluate_lists(lists: &[RankedList], k_max: usize) -> EvalReport {
    let mut per_query_ap = BTreeMap::new();
    let mut per_query_first_hit = BTreeMap::new();
    let mut skipped = 0;
    for list in lists {
        match (average_precision(list), list.first_hit()) {
            (Ok(ap), Some(hit)) => {
                per_query_ap.insert(list.query_id.clone(), ap);
                per_query_first_hit.insert(list.query_id.clone(), hit);
            }
            _ => skipped += 1,
        }
    }
    let n = per_query_ap.len();
    let (map, cmc) = if n == 0 {
        (0.0, vec![0.0; k_max])
    } else {
        let mut hist = vec![0usize; k_max + 1];
        for &hit in per_query_first_hit.values() {
            if hit <= k_max {
                hist[hit] += 1;
            }
        }
        let mut acc = 0usize;
        let cmc = hist[1..]
            .iter()
            .map(|&h| {
                acc += h;
                acc as f64 / n as f64
            })
            .collect();
        // summed in key order so the reduction is independent of scheduling
        (per_query_ap.values().sum::<f64>() / n as f64, cmc)
    };
    EvalReport { map, cmc, per_query_ap, per_query_first_hit, skipped_queries: skipped }
}

/// Standard protocol evaluation (junk filter on) of every query against the gallery.
pub fn evaluate(queries: &Corpus, gallery: &Corpus, k_max: usize) -> Result<EvalReport, MetricsError> {
    let lists = queries
        .records()
        .par_iter()
        .map(|q| rank_gallery(q, gallery, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_lists(&lists, k_max))
}
