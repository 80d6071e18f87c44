use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use reidr_core::corpus::{load_corpus, Corpus};
use reidr_core::metrics::evaluate;
use reidr_core::miner::{mine_triplets, MiningConfig};
use reidr_core::remote::HttpConfig;
use reidr_core::rerank::{evaluate_pipeline, RerankConfig};
use reidr_core::reward::{parse_trace, score_trace, EmbeddingProvider, MockProvider, RemoteProvider, Role, Stage};
use reidr_core::simlab::simulate;
use serde::{Deserialize, Serialize};

use crate::config::{
    self, require, CommonKeys, EvalConfig, MineConfig, ProviderSection, RerankFile, RewardCheckConfig, Run,
    SimulateConfig, EMBED_URL_VAR,
};
use crate::failure::{Classify, Failure};
use crate::output::{Manifest, Staging};
use crate::Common;

/// Loads the config file, applies the flags and sizes the worker pool.
fn setup<C>(flags: &Common) -> Result<(C, Run, PathBuf), Failure>
where
    C: CommonKeys + serde::de::DeserializeOwned + Default,
{
    let mut cfg: C = config::read(flags.config.as_deref()).invalid()?;
    let (run, out) = cfg.apply(flags).invalid()?;
    if let Some(n) = run.workers {
        // the global pool can only be built once per process
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("worker pool already initialised: {e}");
        }
    }
    Ok((cfg, run, out))
}

fn corpus_at(path: &Path) -> Result<Corpus, Failure> {
    load_corpus(path).with_context(|| format!("loading {}", path.display())).invalid()
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        info!("wrote {}", p.display());
    }
}

pub fn mine(flags: &Common, corpus: Option<PathBuf>) -> Result<(), Failure> {
    let (mut cfg, run, out) = setup::<MineConfig>(flags)?;
    if corpus.is_some() {
        cfg.corpus = corpus;
    }
    let corpus_path = require(&cfg.corpus, "corpus").invalid()?;
    let mining = MiningConfig {
        k: cfg.mining.k,
        per_source_quota: cfg.mining.per_source_quota,
        seed: run.seed,
        junk_filter: cfg.mining.junk_filter,
        same_source_only: cfg.mining.same_source_only,
    };
    mining.validate().invalid()?;
    let corpus = corpus_at(&corpus_path)?;
    let manifest = Manifest::new("mine", &cfg, run.seed).and_then(|m| m.input("corpus", &corpus_path)).invalid()?;
    let mut stage = Staging::prepare(&out, &["pool.jsonl", "stats.json"], flags.force).invalid()?;

    let pool = mine_triplets(&corpus, &mining).runtime()?;
    info!("mined {} triplets from {} images", pool.len(), corpus.len());
    stage.write("pool.jsonl", pool.to_jsonl().as_bytes()).runtime()?;
    stage.write_json("stats.json", &pool.stats).runtime()?;
    report_written(&stage.commit(manifest).runtime()?);
    Ok(())
}

pub fn eval(flags: &Common, queries: Option<PathBuf>, gallery: Option<PathBuf>) -> Result<(), Failure> {
    let (mut cfg, run, out) = setup::<EvalConfig>(flags)?;
    if queries.is_some() {
        cfg.queries = queries;
    }
    if gallery.is_some() {
        cfg.gallery = gallery;
    }
    let q_path = require(&cfg.queries, "queries").invalid()?;
    let g_path = cfg.gallery.clone().unwrap_or_else(|| q_path.clone());
    if cfg.k_max == 0 {
        return Err(Failure::Invalid(anyhow::anyhow!("k_max must be at least 1")));
    }
    let queries = corpus_at(&q_path)?;
    let gallery = corpus_at(&g_path)?;
    let manifest = Manifest::new("eval", &cfg, run.seed)
        .and_then(|m| m.input("queries", &q_path))
        .and_then(|m| m.input("gallery", &g_path))
        .invalid()?;
    let mut stage = Staging::prepare(&out, &["report.json", "per_query.csv"], flags.force).invalid()?;

    let report = evaluate(&queries, &gallery, cfg.k_max).runtime()?;
    info!("mAP {:.4}, Rank-1 {:.4}, {} queries skipped", report.map, report.rank1(), report.skipped_queries);
    stage.write_json("report.json", &report).runtime()?;
    let mut w = csv::Writer::from_path(stage.path("per_query.csv")).runtime()?;
    w.write_record(["query_id", "ap", "first_hit"]).runtime()?;
    for (id, ap) in &report.per_query_ap {
        let hit = report.per_query_first_hit[id];
        w.write_record([id.clone(), ap.to_string(), hit.to_string()]).runtime()?;
    }
    w.flush().runtime()?;
    stage.mark_written("per_query.csv");
    report_written(&stage.commit(manifest).runtime()?);
    Ok(())
}

#[derive(Serialize)]
struct Delta<'a> {
    #[serde(flatten)]
    delta: &'a reidr_core::rerank::MetricDelta,
    judge_failures: usize,
}

pub fn rerank(flags: &Common, queries: Option<PathBuf>, gallery: Option<PathBuf>) -> Result<(), Failure> {
    let (mut cfg, run, out) = setup::<RerankFile>(flags)?;
    if queries.is_some() {
        cfg.queries = queries;
    }
    if gallery.is_some() {
        cfg.gallery = gallery;
    }
    let q_path = require(&cfg.queries, "queries").invalid()?;
    let g_path = cfg.gallery.clone().unwrap_or_else(|| q_path.clone());
    let rerank_cfg = RerankConfig {
        shortlist_k: cfg.rerank.shortlist_k,
        judge: cfg.rerank.judge.to_spec().invalid()?,
        seed: run.seed,
        k_max: cfg.rerank.k_max,
    };
    rerank_cfg.validate().invalid()?;
    let queries = corpus_at(&q_path)?;
    let gallery = corpus_at(&g_path)?;
    let manifest = Manifest::new("rerank", &cfg, run.seed)
        .and_then(|m| m.input("queries", &q_path))
        .and_then(|m| m.input("gallery", &g_path))
        .invalid()?;
    let names = ["base.json", "reranked.json", "delta.json", "per_query.jsonl"];
    let mut stage = Staging::prepare(&out, &names, flags.force).invalid()?;

    let (report, outcomes) = evaluate_pipeline(&queries, &gallery, &rerank_cfg).runtime()?;
    info!(
        "Rank-1 {:.4} -> {:.4}, mAP {:.4} -> {:.4}, {} judge failures",
        report.base.rank1(),
        report.reranked.rank1(),
        report.base.map,
        report.reranked.map,
        report.judge_failures
    );
    stage.write_json("base.json", &report.base).runtime()?;
    stage.write_json("reranked.json", &report.reranked).runtime()?;
    stage.write_json("delta.json", &Delta { delta: &report.delta, judge_failures: report.judge_failures }).runtime()?;
    let mut lines = String::new();
    for o in &outcomes {
        lines.push_str(&serde_json::to_string(&o.record()).runtime()?);
        lines.push('\n');
    }
    stage.write("per_query.jsonl", lines.as_bytes()).runtime()?;
    report_written(&stage.commit(manifest).runtime()?);
    Ok(())
}

pub fn simulate_cmd(flags: &Common) -> Result<(), Failure> {
    let (cfg, run, out) = setup::<SimulateConfig>(flags)?;
    let sim = cfg.simulation.with_seed(run.seed);
    sim.validate().invalid()?;
    let manifest = Manifest::new("simulate", &cfg, run.seed).invalid()?;
    let mut stage = Staging::prepare(&out, &["report.json", "trajectory.csv"], flags.force).invalid()?;

    let report = simulate(&sim).runtime()?;
    info!(
        "P(output=1) {:.4}, balanced accuracy {:.4}, collapsed: {}",
        report.p_output_1, report.balanced_accuracy, report.collapsed
    );
    stage.write_json("report.json", &report).runtime()?;
    let mut w = csv::Writer::from_path(stage.path("trajectory.csv")).runtime()?;
    for point in &report.trajectory {
        w.serialize(point).runtime()?;
    }
    w.flush().runtime()?;
    stage.mark_written("trajectory.csv");
    report_written(&stage.commit(manifest).runtime()?);
    Ok(())
}

/// One line of the trace file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    id: String,
    stage: Stage,
    response: String,
    ground_truth: u32,
    /// Role name to image id in the images corpus.
    images: BTreeMap<Role, String>,
}

#[derive(Serialize)]
struct RewardLine<'a> {
    id: &'a str,
    stage: Stage,
    format_ok: bool,
    decision: Option<u32>,
    #[serde(flatten)]
    reward: reidr_core::RewardBreakdownF64,
}

fn read_traces(path: &Path) -> anyhow::Result<Vec<TraceLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

pub fn reward_check(flags: &Common, traces: Option<PathBuf>, images: Option<PathBuf>) -> Result<(), Failure> {
    let (mut cfg, run, out) = setup::<RewardCheckConfig>(flags)?;
    if traces.is_some() {
        cfg.traces = traces;
    }
    if images.is_some() {
        cfg.images = images;
    }
    let t_path = require(&cfg.traces, "traces").invalid()?;
    let i_path = require(&cfg.images, "images").invalid()?;
    let lines = read_traces(&t_path).invalid()?;
    let corpus = corpus_at(&i_path)?;
    let mut resolved = Vec::with_capacity(lines.len());
    for line in &lines {
        let mut vectors = BTreeMap::new();
        for (role, id) in &line.images {
            let rec = corpus.get(id).with_context(|| format!("trace {}: image {id}", line.id)).invalid()?;
            vectors.insert(*role, rec.vector.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>());
        }
        resolved.push(vectors);
    }
    let provider: Box<dyn EmbeddingProvider> = match &cfg.provider {
        ProviderSection::Mock {} => Box::new(MockProvider::new(corpus.dim(), run.seed)),
        ProviderSection::Remote { http } => Box::new(remote_provider(http, corpus.dim()).invalid()?),
    };
    let manifest = Manifest::new("reward-check", &cfg, run.seed)
        .and_then(|m| m.input("traces", &t_path))
        .and_then(|m| m.input("images", &i_path))
        .invalid()?;
    let mut stage = Staging::prepare(&out, &["rewards.jsonl"], flags.force).invalid()?;

    let mut text = String::new();
    for (line, vectors) in lines.iter().zip(&resolved) {
        let judgment = parse_trace(&line.response, line.stage);
        let reward = match score_trace(&judgment, vectors, line.ground_truth, provider.as_ref(), line.stage) {
            Ok(r) => r,
            Err(e @ reidr_core::reward::RewardError::Provider(_)) => {
                return Err(Failure::Runtime(anyhow::Error::new(e).context(format!("trace {}", line.id))))
            }
            Err(e) => return Err(Failure::Invalid(anyhow::Error::new(e).context(format!("trace {}", line.id)))),
        };
        let out_line = RewardLine {
            id: &line.id,
            stage: line.stage,
            format_ok: judgment.format_ok,
            decision: judgment.decision,
            reward,
        };
        text.push_str(&serde_json::to_string(&out_line).runtime()?);
        text.push('\n');
    }
    info!("scored {} traces", lines.len());
    stage.write("rewards.jsonl", text.as_bytes()).runtime()?;
    report_written(&stage.commit(manifest).runtime()?);
    Ok(())
}

fn remote_provider(http: &HttpConfig, dim: usize) -> anyhow::Result<RemoteProvider> {
    let url = std::env::var(EMBED_URL_VAR).with_context(|| format!("remote provider needs {EMBED_URL_VAR}"))?;
    if url.is_empty() {
        bail!("{EMBED_URL_VAR} is empty");
    }
    Ok(RemoteProvider::new(url, http, Some(dim)))
}
