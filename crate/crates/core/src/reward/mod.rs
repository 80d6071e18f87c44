//! Trace parsing and the two-stage gated reward.
//!
//! Stage 1 is a multiple-choice discrimination task over a query, one
//! positive and one negative: the reward for the captions is the average of
//! three contrasts, each anchored on one caption. Stage 2 is pairwise
//! verification of a query against one candidate, rewarded for grounding
//! each caption in its own image. In both stages the caption reward and the
//! accuracy reward are granted only when the decision is correct.

mod provider;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::cosine_sim;
use crate::scalar::Scalar;

pub use provider::{EmbeddingProvider, MockProvider, ProviderFailure, RemoteProvider, SerializedProvider};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("similarity {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("stage {stage} needs an image for role {role}")]
    MissingImage { stage: u8, role: Role },
    #[error("stage {stage} does not use role {role}")]
    UnexpectedRole { stage: u8, role: Role },
    #[error("trace was parsed for stage {trace}, scored as stage {requested}")]
    StageMismatch { trace: u8, requested: u8 },
    #[error("dimension mismatch between caption and image embeddings")]
    DimensionMismatch,
    #[error(transparent)]
    Provider(#[from] ProviderFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Positive,
    Negative,
    Candidate,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Positive => "positive",
            Role::Negative => "negative",
            Role::Candidate => "candidate",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(Role::Query),
            "positive" => Some(Role::Positive),
            "negative" => Some(Role::Negative),
            "candidate" => Some(Role::Candidate),
            _ => None,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Multiple choice over {query, positive, negative}; decision is a 1-based gallery index.
    Discriminative,
    /// Pairwise verification over {query, candidate}; decision is 0 or 1.
    Pairwise,
}

impl Stage {
    pub fn roles(self) -> &'static [Role] {
        match self {
            Stage::Discriminative => &[Role::Query, Role::Positive, Role::Negative],
            Stage::Pairwise => &[Role::Query, Role::Candidate],
        }
    }

    pub fn number(self) -> u8 {
        self.into()
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Stage::Discriminative),
            2 => Ok(Stage::Pairwise),
            other => Err(format!("unknown stage {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Discriminative => 1,
            Stage::Pairwise => 2,
        }
    }
}

/// A policy response split into per-role captions and a final decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceJudgment {
    pub stage: Stage,
    pub captions: BTreeMap<Role, String>,
    /// Present only when `format_ok`.
    pub decision: Option<u32>,
    pub format_ok: bool,
    pub raw: String,
}

fn observation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?s)<observation\s+role\s*=\s*"([^"]*)"\s*>(.*?)</observation>"#).expect("valid regex")
    })
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<answer>(.*?)</answer>").expect("valid regex"))
}

/// Parses the tagged trace layout
///
/// ```text
/// <observation role="query">...</observation>   (one per stage role)
/// <answer>D</answer>
/// ```
///
/// Never fails: structural problems (missing, duplicate or foreign roles, a
/// missing or repeated answer, an answer before an observation, an
/// unparseable decision) yield `format_ok = false`.
pub fn parse_trace(raw: &str, stage: Stage) -> TraceJudgment {
    let mut captions = BTreeMap::new();
    let mut ok = true;
    let mut last_observation_end = 0;
    for cap in observation_re().captures_iter(raw) {
        last_observation_end = cap.get(0).map_or(0, |m| m.end());
        match Role::parse(cap[1].trim()) {
            Some(role) if stage.roles().contains(&role) => {
                if captions.insert(role, cap[2].trim().to_owned()).is_some() {
                    ok = false;
                }
            }
            _ => ok = false,
        }
    }
    ok &= stage.roles().iter().all(|r| captions.contains_key(r));

    let answers: Vec<_> = answer_re().captures_iter(raw).collect();
    let decision = match answers.as_slice() {
        [only] if only.get(0).map_or(0, |m| m.start()) >= last_observation_end => {
            let text = only[1].trim();
            match stage {
                Stage::Pairwise => match text {
                    "0" => Some(0),
                    "1" => Some(1),
                    _ => None,
                },
                Stage::Discriminative => text
                    .parse::<u32>()
                    .ok()
                    .filter(|&d| d >= 1 && text.bytes().all(|b| b.is_ascii_digit())),
            }
        }
        _ => None,
    };
    ok &= decision.is_some();
    TraceJudgment { stage, captions, decision: decision.filter(|_| ok), format_ok: ok, raw: raw.to_owned() }
}

/// `1` when the decision equals the ground truth, else `0`.
pub fn accuracy_reward<T: Scalar>(decision: u32, ground_truth: u32) -> T {
    if decision == ground_truth {
        T::one()
    } else {
        T::zero()
    }
}

/// The three anchored contrasts of the discriminative stage and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParts<T> {
    pub query: T,
    pub positive: T,
    pub negative: T,
    pub total: T,
}

fn check_sim<T: Scalar>(s: T) -> Result<T, RewardError> {
    if s >= -T::one() && s <= T::one() {
        Ok(s)
    } else {
        Err(RewardError::OutOfRange(s.as_f64()))
    }
}

/// Discriminative-stage caption reward from `sims[text][image]`, both
/// indexed query = 0, positive = 1, negative = 2.
///
/// Each caption is rewarded for matching the images of its own identity and
/// penalized (with double weight) against the other identity.
pub fn contrastive_reward_stage1<T: Scalar>(sims: &[[T; 3]; 3]) -> Result<ContrastiveParts<T>, RewardError> {
    for row in sims {
        for &s in row {
            check_sim(s)?;
        }
    }
    let two = T::lit(2.0);
    let [tq, tp, tn] = sims;
    let query = tq[0] + tq[1] - two * tq[2];
    let positive = tp[1] + tp[0] - two * tp[2];
    let negative = two * tn[2] - tn[1] - tn[0];
    Ok(ContrastiveParts { query, positive, negative, total: (query + positive + negative) / T::lit(3.0) })
}

/// Pairwise-stage grounding reward: mean of each caption's similarity to its own image.
pub fn grounding_reward_stage2<T: Scalar>(s_query: T, s_candidate: T) -> Result<T, RewardError> {
    Ok((check_sim(s_query)? + check_sim(s_candidate)?) / T::lit(2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T> {
    pub r_format: T,
    pub r_acc: T,
    pub r_contrastive: T,
    pub total: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    pub fn zero() -> Self {
        Self { r_format: T::zero(), r_acc: T::zero(), r_contrastive: T::zero(), total: T::zero() }
    }
}

/// Gated total, identical for both stages: `r_c + r_acc + r_format` when
/// the decision is correct, otherwise `r_format` alone.
pub fn gated_total<T: Scalar>(r_format: T, r_acc: T, r_contrastive: T) -> RewardBreakdown<T> {
    let total = if r_acc == T::one() { r_contrastive + r_acc + r_format } else { r_format };
    RewardBreakdown { r_format, r_acc, r_contrastive, total }
}

/// Full reward of one trace.
///
/// `images` must hold exactly the stage's roles. Captions are embedded with
/// `provider`; image vectors are taken as given. For the discriminative
/// stage the ground truth is the 1-based gallery index of the positive.
pub fn score_trace<P: EmbeddingProvider + ?Sized>(
    trace: &TraceJudgment,
    images: &BTreeMap<Role, Vec<f64>>,
    ground_truth: u32,
    provider: &P,
    stage: Stage,
) -> Result<RewardBreakdown<f64>, RewardError> {
    if trace.stage != stage {
        return Err(RewardError::StageMismatch { trace: trace.stage.number(), requested: stage.number() });
    }
    for &role in stage.roles() {
        if !images.contains_key(&role) {
            return Err(RewardError::MissingImage { stage: stage.number(), role });
        }
    }
    if let Some(&role) = images.keys().find(|r| !stage.roles().contains(r)) {
        return Err(RewardError::UnexpectedRole { stage: stage.number(), role });
    }
    let decision = match (trace.format_ok, trace.decision) {
        (true, Some(d)) => d,
        _ => return Ok(RewardBreakdown::zero()),
    };

    let roles = stage.roles();
    let texts: Vec<String> = roles.iter().map(|r| trace.captions[r].clone()).collect();
    let text_vecs = provider.embed_texts(&texts)?;
    if text_vecs.len() != roles.len() {
        return Err(ProviderFailure(format!("{} vectors for {} captions", text_vecs.len(), roles.len())).into());
    }
    let sim = |t: usize, image: Role| -> Result<f64, RewardError> {
        cosine_sim(&text_vecs[t], &images[&image]).map_err(|_| RewardError::DimensionMismatch)
    };
    let r_c = match stage {
        Stage::Discriminative => {
            let mut m = [[0.0; 3]; 3];
            for (t, row) in m.iter_mut().enumerate() {
                for (i, cell) in row.iter_mut().enumerate() {
                    *cell = sim(t, roles[i])?;
                }
            }
            contrastive_reward_stage1(&m)?.total
        }
        Stage::Pairwise => grounding_reward_stage2(sim(0, Role::Query)?, sim(1, Role::Candidate)?)?,
    };
    Ok(gated_total(1.0, accuracy_reward(decision, ground_truth), r_c))
}
