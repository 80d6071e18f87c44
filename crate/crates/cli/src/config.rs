//! Per-command TOML configuration. Every table rejects unknown keys; the
//! common flags (`--seed`, `--out`, `--workers`) override the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use reidr_core::remote::HttpConfig;
use reidr_core::rerank::JudgeSpec;
use reidr_core::simlab::{PairStream, SimConfig, StepConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Common;

/// Parses `path` (or the defaults when absent).
pub fn read<C: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Settings shared by every command after flags are applied.
#[derive(Debug, Clone, Copy)]
pub struct Run {
    pub seed: u64,
    pub workers: Option<usize>,
}

/// Keys every config file may carry.
pub trait CommonKeys {
    fn seed_mut(&mut self) -> &mut u64;
    fn out_mut(&mut self) -> &mut Option<PathBuf>;
    fn workers_mut(&mut self) -> &mut Option<usize>;

    /// Applies flag overrides and returns the output directory.
    fn apply(&mut self, flags: &Common) -> anyhow::Result<(Run, PathBuf)> {
        if let Some(seed) = flags.seed {
            *self.seed_mut() = seed;
        }
        if let Some(out) = &flags.out {
            *self.out_mut() = Some(out.clone());
        }
        if let Some(w) = flags.workers {
            *self.workers_mut() = Some(w);
        }
        if *self.workers_mut() == Some(0) {
            bail!("workers must be at least 1");
        }
        let Some(out) = self.out_mut().clone() else { bail!("no output directory: pass --out or set `out`") };
        Ok((Run { seed: *self.seed_mut(), workers: *self.workers_mut() }, out))
    }
}

macro_rules! common_keys {
    ($($t:ty),*) => {$(
        impl CommonKeys for $t {
            fn seed_mut(&mut self) -> &mut u64 { &mut self.seed }
            fn out_mut(&mut self) -> &mut Option<PathBuf> { &mut self.out }
            fn workers_mut(&mut self) -> &mut Option<usize> { &mut self.workers }
        }
    )*};
}

common_keys!(MineConfig, EvalConfig, RerankFile, SimulateConfig, RewardCheckConfig);

/// SHA-256 of the resolved configuration, ignoring keys that cannot change
/// the outputs (`out`, `workers`).
pub fn config_hash<C: Serialize>(config: &C) -> anyhow::Result<String> {
    let mut value = serde_json::to_value(config)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("out");
        map.remove("workers");
    }
    Ok(hex(&Sha256::digest(serde_json::to_vec(&value)?)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn require(path: &Option<PathBuf>, key: &str) -> anyhow::Result<PathBuf> {
    path.clone().with_context(|| format!("missing input `{key}` (config key or --{})", key.replace('_', "-")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningSection {
    pub k: usize,
    pub per_source_quota: Option<usize>,
    pub junk_filter: bool,
    pub same_source_only: bool,
}

impl Default for MiningSection {
    fn default() -> Self {
        let d = reidr_core::miner::MiningConfig::default();
        Self { k: d.k, per_source_quota: d.per_source_quota, junk_filter: d.junk_filter, same_source_only: d.same_source_only }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub mining: MiningSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub queries: Option<PathBuf>,
    /// Defaults to the query corpus.
    pub gallery: Option<PathBuf>,
    pub k_max: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, out: None, workers: None, queries: None, gallery: None, k_max: 10 }
    }
}

/// Judge selection; a remote judge takes its endpoint from `REIDR_JUDGE_URL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeSection {
    Oracle {},
    NoisyOracle {
        flip_prob: f64,
    },
    Constant {
        decision: u8,
    },
    Remote {
        #[serde(default)]
        http: HttpConfig,
        #[serde(default)]
        uri_template: Option<String>,
    },
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection::Oracle {}
    }
}

pub const JUDGE_URL_VAR: &str = "REIDR_JUDGE_URL";
pub const EMBED_URL_VAR: &str = "REIDR_EMBED_URL";

impl JudgeSection {
    pub fn to_spec(&self) -> anyhow::Result<JudgeSpec> {
        Ok(match self {
            JudgeSection::Oracle {} => JudgeSpec::Oracle {},
            JudgeSection::NoisyOracle { flip_prob } => JudgeSpec::NoisyOracle { flip_prob: *flip_prob },
            JudgeSection::Constant { decision } => JudgeSpec::Constant { decision: *decision },
            JudgeSection::Remote { http, uri_template } => JudgeSpec::Remote {
                url: std::env::var(JUDGE_URL_VAR).with_context(|| format!("remote judge needs {JUDGE_URL_VAR}"))?,
                http: http.clone(),
                uri_template: uri_template.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankSection {
    pub shortlist_k: usize,
    pub k_max: usize,
    pub judge: JudgeSection,
}

impl Default for RerankSection {
    fn default() -> Self {
        Self { shortlist_k: 5, k_max: 10, judge: JudgeSection::Oracle {} }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankFile {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub queries: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub rerank: RerankSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub stream: PairStream,
    pub steps: usize,
    pub batch_size: usize,
    pub step: StepConfig<f64>,
    pub eval_pairs_per_class: usize,
    pub collapse_threshold: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            stream: d.stream,
            steps: d.steps,
            batch_size: d.batch_size,
            step: d.step,
            eval_pairs_per_class: d.eval_pairs_per_class,
            collapse_threshold: d.collapse_threshold,
        }
    }
}

impl SimulationSection {
    pub fn with_seed(&self, seed: u64) -> SimConfig {
        SimConfig {
            stream: self.stream,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
            step: self.step,
            eval_pairs_per_class: self.eval_pairs_per_class,
            collapse_threshold: self.collapse_threshold,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub simulation: SimulationSection,
}

/// Caption embedder. The mock derives vectors from the text and the run
/// seed; the remote one reads its endpoint from `REIDR_EMBED_URL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSection {
    Mock {},
    Remote {
        #[serde(default)]
        http: HttpConfig,
    },
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection::Mock {}
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardCheckConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub traces: Option<PathBuf>,
    /// Image embeddings as a corpus file (JSONL or binary).
    pub images: Option<PathBuf>,
    pub provider: ProviderSection,
}
