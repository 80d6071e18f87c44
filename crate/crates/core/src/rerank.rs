//! Shortlist-and-judge re-ranking.
//!
//! The base ranking's top-`k` candidates are each judged against the query
//! as an independent match/no-match pair. Candidates judged as matches move
//! ahead of the rest of the shortlist; both groups keep their base order, and
//! the gallery beyond the shortlist follows unchanged.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, EmbeddingRecord, ExclusionFilter, Neighbor};
use crate::metrics::{evaluate_lists, rank_gallery, EvalReport, MetricsError, RankedList};
use crate::remote::{HttpConfig, JsonClient};
use crate::reward::{parse_trace, Stage, TraceJudgment};
use crate::rng;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("shortlist size must be at least 1")]
    EmptyShortlist,
    #[error("flip probability {0} outside [0, 1]")]
    InvalidFlipProbability(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("judge failure: {0}")]
pub struct JudgeFailure(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub decision: u8,
    pub trace: Option<TraceJudgment>,
}

impl Judgment {
    pub fn bare(decision: u8) -> Self {
        Self { decision, trace: None }
    }
}

/// Pairwise same-identity decision provider.
pub trait Judge: Send + Sync {
    fn judge(&self, query: &EmbeddingRecord, candidate: &EmbeddingRecord) -> Result<Judgment, JudgeFailure>;
}

/// Ground-truth identities.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleJudge;

impl Judge for OracleJudge {
    fn judge(&self, q: &EmbeddingRecord, c: &EmbeddingRecord) -> Result<Judgment, JudgeFailure> {
        Ok(Judgment::bare(u8::from(q.identity == c.identity)))
    }
}

/// Oracle whose answer flips with probability `flip_prob`.
///
/// Each pair draws once from stream `judge/<query_id>/<candidate_id>`, so the
/// pairs flipped at a lower probability are a subset of those flipped at a
/// higher one under the same seed.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracleJudge {
    pub flip_prob: f64,
    pub seed: u64,
}

impl Judge for NoisyOracleJudge {
    fn judge(&self, q: &EmbeddingRecord, c: &EmbeddingRecord) -> Result<Judgment, JudgeFailure> {
        let truth = q.identity == c.identity;
        let mut stream = rng::stream(self.seed, &format!("judge/{}/{}", q.image_id, c.image_id));
        let flip = rng::draw_unit(&mut stream) < self.flip_prob;
        Ok(Judgment::bare(u8::from(truth != flip)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantJudge(pub u8);

impl Judge for ConstantJudge {
    fn judge(&self, _: &EmbeddingRecord, _: &EmbeddingRecord) -> Result<Judgment, JudgeFailure> {
        Ok(Judgment::bare(self.0))
    }
}

#[derive(Debug, Serialize)]
struct JudgeImage<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_uri: Option<String>,
}

#[derive(Debug, Serialize)]
struct JudgeRequest<'a> {
    query: JudgeImage<'a>,
    candidate: JudgeImage<'a>,
    stage: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgeResponse {
    decision: u8,
    #[serde(default)]
    trace: Option<String>,
}

/// HTTP judge: `POST {base}/judge` with `{query, candidate, stage: 2}`,
/// answered by `{decision: 0|1, trace?}`.
#[derive(Debug)]
pub struct RemoteJudge {
    url: String,
    client: JsonClient,
    /// Image URI pattern with `{id}` replaced by the image id.
    uri_template: Option<String>,
}

impl RemoteJudge {
    pub fn new(base_url: &str, http: &HttpConfig, uri_template: Option<String>) -> Self {
        Self {
            url: format!("{}/judge", base_url.trim_end_matches('/')),
            client: JsonClient::new(http),
            uri_template,
        }
    }

    fn image<'a>(&self, r: &'a EmbeddingRecord) -> JudgeImage<'a> {
        JudgeImage { id: &r.image_id, image_uri: self.uri_template.as_ref().map(|t| t.replace("{id}", &r.image_id)) }
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, q: &EmbeddingRecord, c: &EmbeddingRecord) -> Result<Judgment, JudgeFailure> {
        let req = JudgeRequest { query: self.image(q), candidate: self.image(c), stage: 2 };
        let resp: JudgeResponse = self.client.post(&self.url, &req).map_err(JudgeFailure)?;
        if resp.decision > 1 {
            return Err(JudgeFailure(format!("decision {} not in {{0, 1}}", resp.decision)));
        }
        Ok(Judgment { decision: resp.decision, trace: resp.trace.map(|t| parse_trace(&t, Stage::Pairwise)) })
    }
}

/// Declarative judge selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeSpec {
    Oracle {},
    NoisyOracle { flip_prob: f64 },
    Constant { decision: u8 },
    Remote {
        url: String,
        #[serde(default)]
        http: HttpConfig,
        #[serde(default)]
        uri_template: Option<String>,
    },
}

impl Default for JudgeSpec {
    fn default() -> Self {
        JudgeSpec::Oracle {}
    }
}

impl JudgeSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Judge>, RerankError> {
        Ok(match self {
            JudgeSpec::Oracle {} => Box::new(OracleJudge),
            JudgeSpec::NoisyOracle { flip_prob } => {
                if !(0.0..=1.0).contains(flip_prob) {
                    return Err(RerankError::InvalidFlipProbability(*flip_prob));
                }
                Box::new(NoisyOracleJudge { flip_prob: *flip_prob, seed })
            }
            JudgeSpec::Constant { decision } => Box::new(ConstantJudge(u8::from(*decision != 0))),
            JudgeSpec::Remote { url, http, uri_template } => Box::new(RemoteJudge::new(url, http, uri_template.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub shortlist_k: usize,
    pub judge: JudgeSpec,
    pub seed: u64,
    /// Longest CMC rank reported.
    pub k_max: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { shortlist_k: 5, judge: JudgeSpec::Oracle {}, seed: 0, k_max: 10 }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        if self.shortlist_k == 0 {
            return Err(RerankError::EmptyShortlist);
        }
        if let JudgeSpec::NoisyOracle { flip_prob } = self.judge {
            if !(0.0..=1.0).contains(&flip_prob) {
                return Err(RerankError::InvalidFlipProbability(flip_prob));
            }
        }
        Ok(())
    }
}

/// Top-`k` gallery candidates under the evaluation junk filter.
pub fn shortlist(query: &EmbeddingRecord, gallery: &Corpus, k: usize) -> Result<Vec<Neighbor>, RerankError> {
    if k == 0 {
        return Err(RerankError::EmptyShortlist);
    }
    Ok(gallery.topk_for(query, k, ExclusionFilter::JUNK)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairJudgment {
    pub id: String,
    pub decision: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceJudgment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub base: RankedList,
    pub reranked: RankedList,
    pub judgments: Vec<PairJudgment>,
    pub failures: usize,
}

/// Per-query output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub query: String,
    /// Shortlist in base order.
    pub base_order: Vec<String>,
    pub judgments: Vec<PairJudgment>,
    /// Shortlist after promotion; the rest of the gallery keeps base order.
    pub final_order: Vec<String>,
}

impl RerankOutcome {
    pub fn record(&self) -> RerankRecord {
        let k = self.judgments.len();
        RerankRecord {
            query: self.base.query_id.clone(),
            base_order: self.base.ids().take(k).map(str::to_owned).collect(),
            judgments: self.judgments.clone(),
            final_order: self.reranked.ids().take(k).map(str::to_owned).collect(),
        }
    }
}

/// Stable partition of the first `decisions.len()` entries: judged matches,
/// then judged non-matches, then the untouched tail.
pub fn promote_matches(base: &RankedList, decisions: &[u8]) -> RankedList {
    let k = decisions.len().min(base.entries.len());
    let head = &base.entries[..k];
    let mut entries = Vec::with_capacity(base.entries.len());
    entries.extend(head.iter().zip(decisions).filter(|(_, &d)| d == 1).map(|(e, _)| e.clone()));
    entries.extend(head.iter().zip(decisions).filter(|(_, &d)| d != 1).map(|(e, _)| e.clone()));
    entries.extend(base.entries[k..].iter().cloned());
    RankedList { query_id: base.query_id.clone(), entries }
}

/// Re-ranks one query. Judge failures count as non-matches and are logged.
pub fn rerank_query(
    query: &EmbeddingRecord,
    gallery: &Corpus,
    judge: &dyn Judge,
    shortlist_k: usize,
) -> Result<RerankOutcome, RerankError> {
    if shortlist_k == 0 {
        return Err(RerankError::EmptyShortlist);
    }
    let base = rank_gallery(query, gallery, true)?;
    let mut failures = 0;
    let judgments: Vec<PairJudgment> = base
        .entries
        .iter()
        .take(shortlist_k)
        .map(|e| {
            let candidate = gallery.get(&e.image_id)?;
            let j = judge.judge(query, candidate).unwrap_or_else(|err| {
                log::warn!("query {:?} candidate {:?}: {err}; treating as non-match", query.image_id, e.image_id);
                failures += 1;
                Judgment::bare(0)
            });
            Ok(PairJudgment { id: e.image_id.clone(), decision: j.decision, trace: j.trace })
        })
        .collect::<Result<_, CorpusError>>()?;
    let decisions: Vec<u8> = judgments.iter().map(|j| j.decision).collect();
    let reranked = promote_matches(&base, &decisions);
    Ok(RerankOutcome { base, reranked, judgments, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub base: EvalReport,
    pub reranked: EvalReport,
    pub delta: MetricDelta,
    pub judge_failures: usize,
}

/// Evaluates base retrieval and its re-ranking under the same junk filter.
/// Outcomes are returned in query order.
pub fn evaluate_pipeline(
    queries: &Corpus,
    gallery: &Corpus,
    config: &RerankConfig,
) -> Result<(PipelineReport, Vec<RerankOutcome>), RerankError> {
    config.validate()?;
    let judge = config.judge.build(config.seed)?;
    let failures = AtomicUsize::new(0);
    let outcomes = queries
        .records()
        .par_iter()
        .map(|q| {
            let o = rerank_query(q, gallery, judge.as_ref(), config.shortlist_k)?;
            failures.fetch_add(o.failures, Ordering::Relaxed);
            Ok(o)
        })
        .collect::<Result<Vec<_>, RerankError>>()?;
    let base_lists: Vec<RankedList> = outcomes.iter().map(|o| o.base.clone()).collect();
    let reranked_lists: Vec<RankedList> = outcomes.iter().map(|o| o.reranked.clone()).collect();
    let base = evaluate_lists(&base_lists, config.k_max);
    let reranked = evaluate_lists(&reranked_lists, config.k_max);
    let delta = MetricDelta {
        map: reranked.map - base.map,
        cmc: reranked.cmc.iter().zip(&base.cmc).map(|(a, b)| a - b).collect(),
    };
    Ok((PipelineReport { base, reranked, delta, judge_failures: failures.into_inner() }, outcomes))
}
