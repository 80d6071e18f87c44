//! Toy-policy GRPO lab for the reward-collapse mechanism.
//!
//! The policy sees one feature vector per query-gallery pair and emits a
//! single decision token, `P(1) = sigmoid(w . phi + b)`. Training samples
//! `G` decisions per pair from the sampling snapshot, rewards them for
//! matching the pair label, standardizes within the group, and ascends the
//! clipped, KL-penalized surrogate with its closed-form gradient. The
//! reference snapshot is the initial policy.
//!
//! Under a heavily negative pair stream the accuracy reward is maximized in
//! practice by answering 0 everywhere; a balanced stream keeps both answers
//! informative.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{stored_sim, Corpus, CorpusError};
use crate::grpo::{grpo_objective, token_objective_grad, GrpoConfig, GrpoError, RolloutGroup, Trace};
use crate::miner::CandidatePool;
use crate::reward::accuracy_reward;
use crate::rng::{self, SplitMix64};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature length {actual} does not match policy width {expected}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> ToyPolicy<T> {
    /// Indifferent policy, `P(1) = 0.5` everywhere.
    pub fn zeros(width: usize) -> Self {
        Self { weights: vec![T::zero(); width], bias: T::zero() }
    }

    pub fn logit(&self, features: &[T]) -> T {
        self.weights.iter().zip(features).map(|(&w, &x)| w * x).sum::<T>() + self.bias
    }

    pub fn prob_one(&self, features: &[T]) -> T {
        sigmoid(self.logit(features))
    }

    pub fn log_prob(&self, action: u8, features: &[T]) -> T {
        let z = self.logit(features);
        if action == 1 {
            -softplus(-z)
        } else {
            -softplus(z)
        }
    }

    /// Gradient of `log_prob` with respect to `(weights, bias)`.
    pub fn log_prob_grad(&self, action: u8, features: &[T]) -> (Vec<T>, T) {
        let p = self.prob_one(features);
        let coef = if action == 1 { T::one() - p } else { -p };
        (features.iter().map(|&x| coef * x).collect(), coef)
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    fn check(&self, features: &[T]) -> Result<(), SimError> {
        if features.len() == self.weights.len() {
            Ok(())
        } else {
            Err(SimError::FeatureMismatch { expected: self.weights.len(), actual: features.len() })
        }
    }

    fn step(&self, grad: &(Vec<T>, T), lr: T) -> Self {
        Self {
            weights: self.weights.iter().zip(&grad.0).map(|(&w, &g)| w + lr * g).collect(),
            bias: self.bias + lr * grad.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample<T> {
    pub features: Vec<T>,
    pub label: u8,
}

/// How a sampled decision is rewarded. All variants are positive-affine in
/// the accuracy indicator, so within a group they yield the same advantages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum RewardMode {
    Accuracy {},
    /// Accuracy plus a format reward that is always earned.
    AccuracyFormat {},
    /// Gated total with a fixed caption reward granted on correct decisions.
    Gated { contrastive: f64 },
}

impl RewardMode {
    pub fn reward<T: Scalar>(self, action: u8, label: u8) -> T {
        let acc: T = accuracy_reward(u32::from(action), u32::from(label));
        match self {
            RewardMode::Accuracy {} => acc,
            RewardMode::AccuracyFormat {} => acc + T::one(),
            RewardMode::Gated { contrastive } => crate::reward::gated_total(T::one(), acc, T::lit(contrastive)).total,
        }
    }
}

/// A rollout group for one pair, with the sampled decisions it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup<T> {
    pub features: Vec<T>,
    pub actions: Vec<u8>,
    pub group: RolloutGroup<T>,
}

/// Samples `group_size` decisions from `old`, scores them, and records
/// log-probabilities under `current`, `old` and `reference`.
#[allow(clippy::too_many_arguments)]
pub fn sample_rollouts<T: Scalar, R: RngCore>(
    current: &ToyPolicy<T>,
    old: &ToyPolicy<T>,
    reference: &ToyPolicy<T>,
    pair: &PairSample<T>,
    group_size: usize,
    std_floor: T,
    mode: RewardMode,
    rng: &mut R,
) -> Result<SampledGroup<T>, SimError> {
    if group_size < 2 {
        return Err(GrpoError::GroupTooSmall(group_size).into());
    }
    current.check(&pair.features)?;
    let p_old = old.prob_one(&pair.features).as_f64();
    let actions: Vec<u8> = (0..group_size).map(|_| u8::from(rng::draw_unit(rng) < p_old)).collect();
    let traces = actions
        .iter()
        .map(|&a| Trace {
            logp_new: vec![current.log_prob(a, &pair.features)],
            logp_old: vec![old.log_prob(a, &pair.features)],
            logp_ref: vec![reference.log_prob(a, &pair.features)],
            reward: mode.reward(a, pair.label),
            advantage: T::zero(),
        })
        .collect();
    let mut group = RolloutGroup::new(traces);
    group.fill_advantages(std_floor)?;
    Ok(SampledGroup { features: pair.features.clone(), actions, group })
}

fn with_policy<T: Scalar>(s: &SampledGroup<T>, policy: &ToyPolicy<T>) -> RolloutGroup<T> {
    let mut g = s.group.clone();
    for (t, &a) in g.traces.iter_mut().zip(&s.actions) {
        t.logp_new = vec![policy.log_prob(a, &s.features)];
    }
    g
}

/// Sum over groups of the group objective, with `policy` as the current policy.
pub fn batch_objective<T: Scalar>(
    policy: &ToyPolicy<T>,
    groups: &[SampledGroup<T>],
    config: &GrpoConfig<T>,
) -> Result<T, SimError> {
    let mut total = T::zero();
    for s in groups {
        total = total + grpo_objective(&with_policy(s, policy), config)?;
    }
    Ok(total)
}

/// Closed-form gradient of [`batch_objective`] with respect to `(weights, bias)`.
pub fn batch_gradient<T: Scalar>(
    policy: &ToyPolicy<T>,
    groups: &[SampledGroup<T>],
    config: &GrpoConfig<T>,
) -> Result<(Vec<T>, T), SimError> {
    let mut gw = vec![T::zero(); policy.weights.len()];
    let mut gb = T::zero();
    for s in groups {
        let g = T::lit(s.actions.len() as f64);
        for (t, &a) in s.group.traces.iter().zip(&s.actions) {
            let logp = policy.log_prob(a, &s.features);
            let d = token_objective_grad(logp, t.logp_old[0], t.logp_ref[0], t.advantage, config)? / g;
            let (dw, db) = policy.log_prob_grad(a, &s.features);
            for (acc, x) in gw.iter_mut().zip(dw) {
                *acc = *acc + d * x;
            }
            gb = gb + d * db;
        }
    }
    if !gb.is_finite() || gw.iter().any(|x| !x.is_finite()) {
        return Err(SimError::NonFiniteGradient);
    }
    Ok((gw, gb))
}

/// Snapshot handling for [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct StepConfig<T> {
    pub grpo: GrpoConfig<T>,
    pub lr: T,
    /// Gradient steps taken per sampled batch against the same sampling snapshot.
    pub inner_epochs: usize,
    pub reward_mode: RewardMode,
}

impl<T: Scalar> Default for StepConfig<T> {
    fn default() -> Self {
        Self { grpo: GrpoConfig::default(), lr: T::lit(5e-5), inner_epochs: 1, reward_mode: RewardMode::AccuracyFormat {} }
    }
}

/// Outcome of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub policy: ToyPolicy<T>,
    /// Mean accuracy indicator over all sampled decisions.
    pub mean_accuracy: f64,
}

/// One GRPO update: the sampling snapshot is the incoming policy, the
/// reference snapshot is `reference`; parameters ascend the closed-form
/// gradient of the batch objective.
pub fn train_step<T: Scalar, R: RngCore>(
    policy: &ToyPolicy<T>,
    reference: &ToyPolicy<T>,
    batch: &[PairSample<T>],
    config: &StepConfig<T>,
    rng: &mut R,
) -> Result<StepOutcome<T>, SimError> {
    if batch.is_empty() {
        return Err(SimError::EmptyBatch);
    }
    let old = policy.clone();
    let groups = batch
        .iter()
        .map(|pair| {
            sample_rollouts(policy, &old, reference, pair, config.grpo.group_size, config.grpo.std_floor, config.reward_mode, rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let correct: usize = groups
        .iter()
        .zip(batch)
        .map(|(s, p)| s.actions.iter().filter(|&&a| a == p.label).count())
        .sum();
    let mut current = old;
    for _ in 0..config.inner_epochs.max(1) {
        let grad = batch_gradient(&current, &groups, &config.grpo)?;
        current = current.step(&grad, config.lr);
        if !current.is_finite() {
            return Err(SimError::NonFiniteGradient);
        }
    }
    Ok(StepOutcome {
        policy: current,
        mean_accuracy: correct as f64 / (batch.len() * config.grpo.group_size) as f64,
    })
}

/// Synthetic pair stream: label 1 with probability `positive_rate`; the single
/// feature is a similarity drawn around `mu_pos` (positives) or
/// `mu_pos - separability` (negatives) with Gaussian noise, clamped to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairStream {
    pub positive_rate: f64,
    pub separability: f64,
    pub mu_pos: f64,
    pub noise_sigma: f64,
}

impl Default for PairStream {
    fn default() -> Self {
        Self { positive_rate: 0.5, separability: 0.4, mu_pos: 0.8, noise_sigma: 0.1 }
    }
}

impl PairStream {
    pub fn sample_with_label<T: Scalar, R: RngCore>(&self, label: u8, rng: &mut R) -> PairSample<T> {
        let mu = if label == 1 { self.mu_pos } else { self.mu_pos - self.separability };
        let noise: f64 = StandardNormal.sample(rng);
        PairSample { features: vec![T::lit((mu + self.noise_sigma * noise).clamp(-1.0, 1.0))], label }
    }

    pub fn sample<T: Scalar, R: RngCore>(&self, rng: &mut R) -> PairSample<T> {
        let label = u8::from(rng::draw_unit(rng) < self.positive_rate);
        self.sample_with_label(label, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub stream: PairStream,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub step: StepConfig<f64>,
    /// Held-out pairs per class used for the reported probabilities.
    pub eval_pairs_per_class: usize,
    pub collapse_threshold: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            stream: PairStream::default(),
            steps: 300,
            batch_size: 64,
            seed: 0,
            step: StepConfig { lr: 0.05, ..StepConfig::default() },
            eval_pairs_per_class: 500,
            collapse_threshold: 0.01,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let r = self.stream.positive_rate;
        if !(0.0..=1.0).contains(&r) {
            return bad(format!("positive_rate {r} outside [0, 1]"));
        }
        if self.batch_size == 0 || self.eval_pairs_per_class == 0 {
            return bad("batch_size and eval_pairs_per_class must be positive".into());
        }
        if !(self.step.lr.is_finite() && self.step.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.step.lr));
        }
        if self.stream.noise_sigma.is_nan() || self.stream.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        self.step.grpo.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Mean accuracy reward of the decisions sampled at this step.
    pub reward_mean: f64,
    pub p_output_1: f64,
    pub balanced_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub steps: usize,
    pub positive_rate: f64,
    /// Marginal probability of answering 1 under the pair distribution.
    pub p_output_1: f64,
    /// Expected accuracy on positive pairs, `E[P(1) | label 1]`.
    pub positive_accuracy: f64,
    /// Expected accuracy on negative pairs, `E[P(0) | label 0]`.
    pub negative_accuracy: f64,
    pub balanced_accuracy: f64,
    /// Expected accuracy reward under the pair distribution.
    pub expected_accuracy_reward: f64,
    pub collapsed: bool,
    pub policy: ToyPolicy<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
}

struct Probe {
    positives: Vec<PairSample<f64>>,
    negatives: Vec<PairSample<f64>>,
}

impl Probe {
    fn class_rates(&self, policy: &ToyPolicy<f64>) -> (f64, f64) {
        let mean = |v: &[PairSample<f64>]| v.iter().map(|p| policy.prob_one(&p.features)).sum::<f64>() / v.len() as f64;
        (mean(&self.positives), 1.0 - mean(&self.negatives))
    }
}

/// Trains a fresh indifferent policy on the configured pair stream.
///
/// Streams: `sim/train` drives pair draws and rollouts, `sim/probe` the
/// held-out pairs.
pub fn simulate(config: &SimConfig) -> Result<SimReport, SimError> {
    config.validate()?;
    let mut probe_rng = rng::stream(config.seed, "sim/probe");
    let probe = Probe {
        positives: (0..config.eval_pairs_per_class).map(|_| config.stream.sample_with_label(1, &mut probe_rng)).collect(),
        negatives: (0..config.eval_pairs_per_class).map(|_| config.stream.sample_with_label(0, &mut probe_rng)).collect(),
    };
    let rate = config.stream.positive_rate;
    let mut rng: SplitMix64 = rng::stream(config.seed, "sim/train");
    let reference = ToyPolicy::zeros(1);
    let mut policy = reference.clone();
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<PairSample<f64>> = (0..config.batch_size).map(|_| config.stream.sample(&mut rng)).collect();
        let out = train_step(&policy, &reference, &batch, &config.step, &mut rng)?;
        policy = out.policy;
        let (pos_acc, neg_acc) = probe.class_rates(&policy);
        trajectory.push(TrajectoryPoint {
            step: step + 1,
            reward_mean: out.mean_accuracy,
            p_output_1: rate * pos_acc + (1.0 - rate) * (1.0 - neg_acc),
            balanced_acc: (pos_acc + neg_acc) / 2.0,
        });
    }
    let (pos_acc, neg_acc) = probe.class_rates(&policy);
    let p1 = rate * pos_acc + (1.0 - rate) * (1.0 - neg_acc);
    Ok(SimReport {
        steps: config.steps,
        positive_rate: rate,
        p_output_1: p1,
        positive_accuracy: pos_acc,
        negative_accuracy: neg_acc,
        balanced_accuracy: (pos_acc + neg_acc) / 2.0,
        expected_accuracy_reward: rate * pos_acc + (1.0 - rate) * neg_acc,
        collapsed: p1 < config.collapse_threshold,
        policy,
        trajectory,
    })
}

/// [`simulate`] with default settings for the given stream.
pub fn run_collapse_experiment(
    positive_rate: f64,
    feature_separability: f64,
    steps: usize,
    seed: u64,
) -> Result<SimReport, SimError> {
    simulate(&SimConfig {
        stream: PairStream { positive_rate, separability: feature_separability, ..PairStream::default() },
        steps,
        seed,
        ..SimConfig::default()
    })
}

/// A pool-derived pair with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPair {
    pub query_id: String,
    pub gallery_id: String,
    pub sample: PairSample<f64>,
}

/// Expands each triplet into `(query, positive, 1)` and `(query, negative, 0)`,
/// with the pair's embedding similarity as the feature.
pub fn pairs_from_pool(pool: &CandidatePool, corpus: &Corpus) -> Result<Vec<PoolPair>, CorpusError> {
    let mut out = Vec::with_capacity(2 * pool.len());
    for t in &pool.triplets {
        let q = corpus.get(&t.query_id)?;
        for (id, label) in [(&t.positive_id, 1u8), (&t.negative_id, 0u8)] {
            let g = corpus.get(id)?;
            out.push(PoolPair {
                query_id: t.query_id.clone(),
                gallery_id: id.clone(),
                sample: PairSample { features: vec![stored_sim(&q.vector, &g.vector)], label },
            });
        }
    }
    Ok(out)
}
