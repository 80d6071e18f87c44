//! Reasoning-driven person re-identification: retrieval substrate, ReID
//! metrics, non-trivial triplet mining, the two-stage gated reward, GRPO
//! objective math, shortlist-and-judge re-ranking, and a toy-policy lab for
//! the reward-collapse mechanism.
//!
//! The numeric modules ([`grpo`], [`reward`], [`simlab`]) are generic over
//! [`Scalar`] (`f32` or `f64`); the `*F64` aliases below fix the common case.

pub mod corpus;
pub mod grpo;
pub mod metrics;
pub mod miner;
pub mod remote;
pub mod rerank;
pub mod reward;
pub mod rng;
pub mod scalar;
pub mod simlab;

pub use scalar::Scalar;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type GrpoConfigF64 = grpo::GrpoConfig<f64>;
pub type GrpoConfigF32 = grpo::GrpoConfig<f32>;
pub type RolloutGroupF64 = grpo::RolloutGroup<f64>;
pub type RolloutGroupF32 = grpo::RolloutGroup<f32>;
pub type TraceF64 = grpo::Trace<f64>;
pub type RewardBreakdownF64 = reward::RewardBreakdown<f64>;
pub type RewardBreakdownF32 = reward::RewardBreakdown<f32>;
pub type ContrastivePartsF64 = reward::ContrastiveParts<f64>;
pub type ToyPolicyF64 = simlab::ToyPolicy<f64>;
pub type ToyPolicyF32 = simlab::ToyPolicy<f32>;
pub type PairSampleF64 = simlab::PairSample<f64>;
