//! Embedding corpus: records, normalization, similarity and exact top-K retrieval.

mod io;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use io::{load_corpus, save_corpus, CorpusFormat};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;
/// Stored vectors deviating from unit norm by more than this are re-normalized.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Re-normalization beyond this drift is logged as a warning.
pub const DRIFT_WARNING: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown image id {0:?}")]
    UnknownId(String),
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("empty vector")]
    EmptyVector,
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One image: identity label, camera, source dataset and unit-norm feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    #[serde(rename = "id")]
    pub image_id: String,
    pub identity: u32,
    pub camera: u16,
    pub source: String,
    pub vector: Vec<f32>,
}

/// Scales `v` to unit L2 norm.
pub fn normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, CorpusError> {
    if v.is_empty() {
        return Err(CorpusError::EmptyVector);
    }
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm.is_nan() || norm < T::lit(ZERO_NORM) {
        return Err(CorpusError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// Cosine similarity of two unit vectors: their dot product, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T, CorpusError> {
    if a.len() != b.len() {
        return Err(CorpusError::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok(dot.max(-T::one()).min(T::one()))
}

/// Similarity between two stored `f32` vectors, accumulated in `f64`.
pub(crate) fn stored_sim(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    // `+ 0.0` folds -0.0 into +0.0 so exact ties break by id
    dot.clamp(-1.0, 1.0) + 0.0
}

fn l2_norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Which gallery records a retrieval may return besides the query itself,
/// which is always excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionFilter {
    /// Drop records sharing both identity and camera with the query.
    pub junk_same_identity_camera: bool,
    /// Keep only records from the query's source dataset.
    pub same_source_only: bool,
}

impl ExclusionFilter {
    /// Self-exclusion only.
    pub const SELF_ONLY: Self = Self { junk_same_identity_camera: false, same_source_only: false };
    /// Standard ReID evaluation filter.
    pub const JUNK: Self = Self { junk_same_identity_camera: true, same_source_only: false };

    pub fn admits(&self, query: &EmbeddingRecord, candidate: &EmbeddingRecord) -> bool {
        if candidate.image_id == query.image_id {
            return false;
        }
        if self.junk_same_identity_camera
            && candidate.identity == query.identity
            && candidate.camera == query.camera
        {
            return false;
        }
        !(self.same_source_only && candidate.source != query.source)
    }
}

/// A retrieved gallery record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub score: f64,
}

/// Descending score, then ascending image id.
pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Immutable collection of embedding records sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<EmbeddingRecord>,
    dim: usize,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, normalizing vectors that are not unit length.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self, CorpusError> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        let mut index = HashMap::with_capacity(records.len());
        let mut out = Vec::with_capacity(records.len());
        let (mut drifted, mut worst) = (0usize, 0.0f64);
        for (pos, mut rec) in records.into_iter().enumerate() {
            if rec.vector.is_empty() {
                return Err(CorpusError::EmptyVector);
            }
            if rec.vector.len() != dim {
                return Err(CorpusError::DimensionMismatch { expected: dim, actual: rec.vector.len() });
            }
            if index.insert(rec.image_id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId(rec.image_id));
            }
            let drift = (l2_norm_f32(&rec.vector) - 1.0).abs();
            if drift > UNIT_TOLERANCE {
                if drift > DRIFT_WARNING {
                    drifted += 1;
                    worst = worst.max(drift);
                }
                let wide: Vec<f64> = rec.vector.iter().map(|&x| f64::from(x)).collect();
                rec.vector = normalize(&wide)?.into_iter().map(|x| x as f32).collect();
            }
            out.push(rec);
        }
        if drifted > 0 {
            log::warn!("re-normalized {drifted} vectors that were not unit length (largest norm drift {worst:.3e})");
        }
        Ok(Self { records: out, dim, index })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn get(&self, image_id: &str) -> Result<&EmbeddingRecord, CorpusError> {
        self.position(image_id)
            .map(|i| &self.records[i])
            .ok_or_else(|| CorpusError::UnknownId(image_id.to_owned()))
    }

    /// Top-`k` neighbors of a stored record.
    pub fn topk_neighbors(
        &self,
        query_id: &str,
        k: usize,
        filter: ExclusionFilter,
    ) -> Result<Vec<Neighbor>, CorpusError> {
        let query = self.get(query_id)?;
        self.topk_for(query, k, filter)
    }

    /// Top-`k` neighbors of an arbitrary query record (which need not be stored).
    ///
    /// Results are ordered by descending score with ties broken by ascending
    /// image id, and never include a record with the query's image id.
    pub fn topk_for(
        &self,
        query: &EmbeddingRecord,
        k: usize,
        filter: ExclusionFilter,
    ) -> Result<Vec<Neighbor>, CorpusError> {
        let mut scored = self.scored(query, filter)?;
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            rank_order(
                (a.0, &self.records[a.1].image_id),
                (b.0, &self.records[b.1].image_id),
            )
        };
        if k < scored.len() {
            if k > 0 {
                scored.select_nth_unstable_by(k - 1, cmp);
            }
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Neighbor { image_id: self.records[i].image_id.clone(), score })
            .collect())
    }

    /// Every admitted gallery record in retrieval order.
    pub fn rank_all(
        &self,
        query: &EmbeddingRecord,
        filter: ExclusionFilter,
    ) -> Result<Vec<Neighbor>, CorpusError> {
        self.topk_for(query, usize::MAX, filter)
    }

    fn scored(
        &self,
        query: &EmbeddingRecord,
        filter: ExclusionFilter,
    ) -> Result<Vec<(f64, usize)>, CorpusError> {
        if query.vector.len() != self.dim && !self.records.is_empty() {
            return Err(CorpusError::DimensionMismatch { expected: self.dim, actual: query.vector.len() });
        }
        Ok(self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| filter.admits(query, r))
            .map(|(i, r)| (stored_sim(&query.vector, &r.vector), i))
            .collect())
    }
}
