//! Orchestration: wire corpus loading, retrieval, fusion, the two
//! learned re-ranking stages, MaxP aggregation, and evaluation behind a
//! single TOML config, with per-stage run files persisted along the way.
//!
//! Every stage output is a pure function of (config, seed, inputs), so
//! re-running a pipeline reproduces its run files byte for byte
//! regardless of thread count.

pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, Query, Qrels};
use crate::dense::{build_vector_store, retrieve_dense, Embedder, VectorStore};
use crate::error::{Error, Result};
use crate::eval::{self, lists_to_run, MetricReport, RunEntry, ScoreChannel};
use crate::fusion::{self, CandidateList, NormMethod};
use crate::hlatr::{self, HlatrConfig, HlatrModel, RankedCandidate, RankedList};
use crate::rerank::{
    sample_negatives, train_interaction_scorer, FeatureContext, InteractionScorer, PreparedQuery,
    RerankTrainConfig,
};
use crate::sparse::{
    build_impact_index, build_inverted_index, default_term_weights, load_expansions,
    load_term_weights, retrieve_bm25, retrieve_impact, unit_query_weights, ImpactIndex,
    InvertedIndex,
};

pub use synth::SynthConfig;

/// The shipped default configuration; every tunable with its default.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub passages: String,
    pub queries: String,
    pub qrels: String,
    pub documents: bool,
    pub window: usize,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            passages: "data/passages.jsonl".into(),
            queries: "data/queries.tsv".into(),
            qrels: "data/qrels.txt".into(),
            documents: false,
            window: 180,
            stride: 90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub sparse: bool,
    pub impact: bool,
    pub dense: bool,
    pub fuse: bool,
    pub rerank: bool,
    pub hlatr: bool,
    pub maxp: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            sparse: true,
            impact: false,
            dense: true,
            fuse: true,
            rerank: true,
            hlatr: true,
            maxp: false,
            eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseStage {
    pub k1: f64,
    pub b: f64,
    pub k: usize,
    pub expansions: String,
}

impl Default for SparseStage {
    fn default() -> Self {
        SparseStage {
            k1: crate::sparse::DEFAULT_K1,
            b: crate::sparse::DEFAULT_B,
            k: 1000,
            expansions: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpactStage {
    pub weights: String,
    pub k: usize,
}

impl Default for ImpactStage {
    fn default() -> Self {
        ImpactStage {
            weights: String::new(),
            k: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseStage {
    pub dim: usize,
    pub seed: u64,
    pub k: usize,
}

impl Default for DenseStage {
    fn default() -> Self {
        DenseStage {
            dim: crate::dense::DEFAULT_DIM,
            seed: crate::dense::DEFAULT_SEED,
            k: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionStage {
    pub normalization: String,
    pub depth: usize,
    pub weights: BTreeMap<String, f64>,
}

impl Default for FusionStage {
    fn default() -> Self {
        let mut weights = BTreeMap::new();
        weights.insert("bm25".to_string(), 0.4);
        weights.insert("dense".to_string(), 0.6);
        weights.insert("impact".to_string(), 0.0);
        FusionStage {
            normalization: "minmax".into(),
            depth: 1000,
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankStage {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub rdrop_alpha: f64,
    pub n_neg: usize,
    pub rel_threshold: u32,
    pub depth: usize,
    pub seed: u64,
    pub model: String,
}

impl Default for RerankStage {
    fn default() -> Self {
        RerankStage {
            hidden: 16,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 20,
            rdrop_alpha: 1.0,
            n_neg: 7,
            rel_threshold: 2,
            depth: 100,
            seed: 42,
            model: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HlatrStage {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_list_len: usize,
    pub ff: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub rdrop_alpha: f64,
    pub seed: u64,
    pub model: String,
}

impl Default for HlatrStage {
    fn default() -> Self {
        HlatrStage {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_list_len: 100,
            ff: 128,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 10,
            rdrop_alpha: 0.0,
            seed: 42,
            model: String::new(),
        }
    }
}

impl HlatrStage {
    pub fn to_model_config(&self) -> HlatrConfig {
        HlatrConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_list_len: self.max_list_len,
            ff: self.ff,
            dropout: self.dropout,
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            rdrop_alpha: self.rdrop_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub rel_threshold: u32,
    pub ndcg_k: usize,
    pub mrr_k: usize,
    pub recall_ks: Vec<usize>,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            rel_threshold: eval::DEFAULT_REL_THRESHOLD,
            ndcg_k: 10,
            mrr_k: 10,
            recall_ks: vec![100, 1000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub stages: StageToggles,
    pub sparse: SparseStage,
    pub impact: ImpactStage,
    pub dense: DenseStage,
    pub fusion: FusionStage,
    pub rerank: RerankStage,
    pub hlatr: HlatrStage,
    pub eval: EvalStage,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&content).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// One seed to steer every seeded stage (the `--seed` global flag).
    pub fn apply_seed(&mut self, seed: u64) {
        self.dense.seed = seed;
        self.rerank.seed = seed;
        self.hlatr.seed = seed;
        self.synth.seed = seed;
    }

    pub fn norm_method(&self) -> Result<NormMethod> {
        self.fusion
            .normalization
            .parse()
            .map_err(|_| Error::invalid(format!(
                "unknown normalization `{}` (expected minmax, zscore, or none)",
                self.fusion.normalization
            )))
    }
}

/// Everything the stages read: loaded data plus in-memory index artifacts.
pub struct Artifacts {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub qrels: Option<Qrels>,
    pub inverted: Option<InvertedIndex>,
    pub impact: Option<ImpactIndex>,
    pub store: Option<VectorStore>,
    pub embedder: Embedder,
}

/// Load data and build whichever indexes the enabled stages need. The
/// ranking stage's features read all three indexes, so enabling it pulls
/// them in even when a retrieval stage is toggled off.
pub fn build_artifacts(cfg: &PipelineConfig) -> Result<Artifacts> {
    let corpus = if cfg.data.documents {
        let docs = corpus::load_documents(&cfg.data.passages, None)?;
        Corpus::from_documents(&docs, cfg.data.window, cfg.data.stride)?
    } else {
        corpus::load_passage_corpus(&cfg.data.passages, None)?
    };
    let queries = corpus::load_queries(&cfg.data.queries)?;
    if queries.is_empty() {
        return Err(Error::invalid(format!(
            "no queries in `{}`",
            cfg.data.queries
        )));
    }
    let qrels = if cfg.data.qrels.is_empty() {
        None
    } else {
        Some(corpus::load_qrels(&cfg.data.qrels)?)
    };

    let need_features = cfg.stages.rerank;
    let inverted = if cfg.stages.sparse || need_features {
        let expansions = if cfg.sparse.expansions.is_empty() {
            None
        } else {
            Some(load_expansions(&cfg.sparse.expansions)?)
        };
        Some(build_inverted_index(&corpus, expansions.as_ref())?)
    } else {
        None
    };
    let impact = if cfg.stages.impact || need_features {
        let weights = if cfg.impact.weights.is_empty() {
            default_term_weights(&corpus)
        } else {
            load_term_weights(&cfg.impact.weights)?
        };
        Some(build_impact_index(&weights)?)
    } else {
        None
    };
    let embedder = Embedder::new(cfg.dense.dim, cfg.dense.seed);
    let store = if cfg.stages.dense || need_features {
        Some(build_vector_store(&corpus, &embedder)?)
    } else {
        None
    };
    Ok(Artifacts {
        corpus,
        queries,
        qrels,
        inverted,
        impact,
        store,
        embedder,
    })
}

fn missing(stage: &str, what: &str) -> Error {
    Error::MissingArtifact {
        stage: stage.to_string(),
        what: what.to_string(),
    }
}

/// Candidate lists from every enabled retrieval stage, tagged, one list
/// per query in query-file order.
pub fn retrieval_lists(
    cfg: &PipelineConfig,
    art: &Artifacts,
) -> Result<Vec<(String, Vec<CandidateList>)>> {
    let mut out = Vec::new();
    if cfg.stages.sparse {
        let index = art
            .inverted
            .as_ref()
            .ok_or_else(|| missing("sparse", "inverted index"))?;
        let lists: Vec<CandidateList> = art
            .queries
            .par_iter()
            .map(|q| retrieve_bm25(index, q, cfg.sparse.k, cfg.sparse.k1, cfg.sparse.b))
            .collect();
        out.push(("bm25".to_string(), lists));
    }
    if cfg.stages.impact {
        let index = art
            .impact
            .as_ref()
            .ok_or_else(|| missing("impact", "impact index"))?;
        let lists: Vec<CandidateList> = art
            .queries
            .par_iter()
            .map(|q| {
                let weights = unit_query_weights(&q.text);
                retrieve_impact(index, &q.query_id, &weights, cfg.impact.k)
            })
            .collect::<Result<_>>()?;
        out.push(("impact".to_string(), lists));
    }
    if cfg.stages.dense {
        let store = art
            .store
            .as_ref()
            .ok_or_else(|| missing("dense", "vector store"))?;
        let lists: Vec<CandidateList> = art
            .queries
            .par_iter()
            .map(|q| {
                let v = art.embedder.embed(&q.text).map_err(|e| {
                    Error::invalid(format!("query `{}`: {e}", q.query_id))
                })?;
                retrieve_dense(store, &q.query_id, &v, cfg.dense.k)
            })
            .collect::<Result<_>>()?;
        out.push(("dense".to_string(), lists));
    }
    Ok(out)
}

/// Normalize and weight the enabled retrieval lists per query.
pub fn fuse_lists(
    cfg: &PipelineConfig,
    sources: &[(String, Vec<CandidateList>)],
) -> Result<Vec<CandidateList>> {
    if sources.is_empty() {
        return Err(missing("fuse", "at least one enabled retrieval stage"));
    }
    let method = cfg.norm_method()?;
    let weights: Vec<f64> = sources
        .iter()
        .map(|(tag, _)| cfg.fusion.weights.get(tag).copied().unwrap_or(0.0))
        .collect();
    let n_queries = sources[0].1.len();
    (0..n_queries)
        .into_par_iter()
        .map(|qi| {
            let normed: Vec<CandidateList> = sources
                .iter()
                .map(|(_, lists)| fusion::normalize_scores(&lists[qi], method))
                .collect::<Result<_>>()?;
            fusion::weighted_fuse(&normed, &weights, cfg.fusion.depth)
        })
        .collect()
}

/// Fuse already-written run files: per query, normalize each source's
/// list and weight-sum them. A query absent from a source simply
/// contributes nothing from it.
pub fn fuse_run_entries(
    sources: &[Vec<RunEntry>],
    weights: &[f64],
    method: NormMethod,
    k: usize,
) -> Result<Vec<CandidateList>> {
    if sources.len() != weights.len() || sources.is_empty() {
        return Err(Error::invalid("need one weight per run"));
    }
    let per_source: Vec<BTreeMap<String, CandidateList>> = sources
        .iter()
        .map(|entries| {
            eval::run_to_lists(entries)
                .into_iter()
                .map(|l| (l.query_id.clone(), l))
                .collect()
        })
        .collect();
    let mut query_ids: Vec<&String> = per_source.iter().flat_map(|m| m.keys()).collect();
    query_ids.sort_unstable();
    query_ids.dedup();
    query_ids
        .into_iter()
        .map(|qid| {
            let mut lists = Vec::new();
            let mut w = Vec::new();
            for (source, &weight) in per_source.iter().zip(weights) {
                if let Some(list) = source.get(qid) {
                    lists.push(fusion::normalize_scores(list, method)?);
                    w.push(weight);
                }
            }
            fusion::weighted_fuse(&lists, &w, k)
        })
        .collect()
}

fn truncated(list: &CandidateList, k: usize) -> CandidateList {
    CandidateList {
        query_id: list.query_id.clone(),
        candidates: list.candidates.iter().take(k).cloned().collect(),
    }
}

/// Score a candidate list with the interaction scorer and reorder by
/// ranking score (ties by id). Stage-1 rank and score ride along on each
/// candidate for the list-aware stage.
pub fn rescore_list(
    scorer: &InteractionScorer,
    ctx: &FeatureContext,
    prepared: &PreparedQuery,
    list: &CandidateList,
) -> Result<CandidateList> {
    let ones = vec![1.0; scorer.hidden];
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(list.len());
    let mut by_id: BTreeMap<&str, &crate::fusion::Candidate> = BTreeMap::new();
    for c in &list.candidates {
        let f = ctx.features(prepared, &c.passage_id, c.retrieval_rank)?;
        scored.push((c.passage_id.clone(), scorer.score_with_mask(&f, &ones)));
        by_id.insert(&c.passage_id, c);
    }
    fusion::sort_scored(&mut scored);
    let candidates = scored
        .into_iter()
        .map(|(id, s)| {
            let orig = by_id[id.as_str()];
            crate::fusion::Candidate {
                passage_id: id,
                retrieval_score: orig.retrieval_score,
                retrieval_rank: orig.retrieval_rank,
                source_tag: orig.source_tag.clone(),
                ranking_score: Some(s),
                hlatr_score: None,
            }
        })
        .collect();
    Ok(CandidateList {
        query_id: list.query_id.clone(),
        candidates,
    })
}

/// Per-query ranked lists for the list-aware stage, in current list
/// order. Falls back to the retrieval score where no ranking score is
/// present (ranking stage disabled).
pub fn ranked_lists_from(lists: &[CandidateList]) -> Vec<RankedList> {
    lists
        .iter()
        .map(|l| RankedList {
            query_id: l.query_id.clone(),
            candidates: l
                .candidates
                .iter()
                .map(|c| RankedCandidate {
                    passage_id: c.passage_id.clone(),
                    retrieval_rank: c.retrieval_rank,
                    ranking_score: c.ranking_score.unwrap_or(c.retrieval_score),
                })
                .collect(),
            positive: None,
        })
        .collect()
}

/// Mark each list's positive: the first candidate (in list order) judged
/// at or above the threshold. Lists without one keep `positive = None`.
pub fn mark_positives(lists: &mut [RankedList], qrels: &Qrels, rel_threshold: u32) {
    for list in lists.iter_mut() {
        list.positive = list
            .candidates
            .iter()
            .find(|c| {
                qrels
                    .grade(&list.query_id, &c.passage_id)
                    .is_some_and(|g| g >= rel_threshold)
            })
            .map(|c| c.passage_id.clone());
    }
}

/// Collapse a passage run to a document run: document score = max over
/// its passages, ranked score desc with ties by doc id.
pub fn maxp_aggregate(entries: &[RunEntry]) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    for (query_id, rows) in eval::group_by_query(entries) {
        let tag = rows.first().map(|r| r.tag.clone()).unwrap_or_default();
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for row in rows {
            let doc = corpus::parent_doc_id(&row.doc_id)?;
            best.entry(doc.to_string())
                .and_modify(|s| *s = s.max(row.score))
                .or_insert(row.score);
        }
        let mut scored: Vec<(String, f64)> = best.into_iter().collect();
        fusion::sort_scored(&mut scored);
        for (i, (doc_id, score)) in scored.into_iter().enumerate() {
            out.push(RunEntry {
                query_id: query_id.to_string(),
                doc_id,
                rank: (i + 1) as u32,
                score,
                tag: tag.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct PipelineReport {
    /// (stage tag, run file) in execution order.
    pub runs: Vec<(String, PathBuf)>,
    pub final_run: PathBuf,
    /// Per evaluated run: metric name → report.
    pub metrics: Vec<(String, BTreeMap<String, MetricReport>)>,
}

fn metrics_for(entries: &[RunEntry], qrels: &Qrels, cfg: &EvalStage) -> BTreeMap<String, MetricReport> {
    let mut out = BTreeMap::new();
    out.insert(
        format!("ndcg@{}", cfg.ndcg_k),
        eval::ndcg_at_k(entries, qrels, cfg.ndcg_k),
    );
    out.insert(
        "map".to_string(),
        eval::average_precision(entries, qrels, cfg.rel_threshold),
    );
    out.insert(
        format!("mrr@{}", cfg.mrr_k),
        eval::mrr_at_k(entries, qrels, cfg.mrr_k, cfg.rel_threshold),
    );
    for &k in &cfg.recall_ks {
        out.insert(
            format!("recall@{k}"),
            eval::recall_at_k(entries, qrels, k, cfg.rel_threshold),
        );
    }
    out
}

/// Run every enabled stage in order, persisting each stage's run file
/// and trained artifacts under `out_dir`. Returns where everything went
/// plus metrics when qrels are available.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<PipelineReport> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let art = build_artifacts(cfg)?;
    let mut runs: Vec<(String, PathBuf)> = Vec::new();
    let mut produced: Vec<(String, Vec<RunEntry>)> = Vec::new();

    let persist = |tag: &str,
                       entries: Vec<RunEntry>,
                       runs: &mut Vec<(String, PathBuf)>,
                       produced: &mut Vec<(String, Vec<RunEntry>)>|
     -> Result<()> {
        let path = out_dir.join(format!("run.{tag}.trec"));
        eval::write_run(&entries, &path)?;
        runs.push((tag.to_string(), path));
        produced.push((tag.to_string(), entries));
        Ok(())
    };

    // Stage 1: retrieval.
    let sources = retrieval_lists(cfg, &art)?;
    for (tag, lists) in &sources {
        if let Some(index) = art.inverted.as_ref().filter(|_| tag == "bm25") {
            index.save(out_dir.join("sparse.index.json"))?;
        }
        if let Some(index) = art.impact.as_ref().filter(|_| tag == "impact") {
            index.save(out_dir.join("impact.index.json"))?;
        }
        if let Some(store) = art.store.as_ref().filter(|_| tag == "dense") {
            store.save(out_dir.join("dense.vectors.tsv"))?;
        }
        let entries = lists_to_run(lists, ScoreChannel::Retrieval, tag)?;
        persist(tag, entries, &mut runs, &mut produced)?;
    }

    let fused: Option<Vec<CandidateList>> = if cfg.stages.fuse {
        let lists = fuse_lists(cfg, &sources)?;
        let entries = lists_to_run(&lists, ScoreChannel::Retrieval, "fused")?;
        persist("fused", entries, &mut runs, &mut produced)?;
        Some(lists)
    } else {
        None
    };

    // Candidate lists the learned stages consume: fused if present, else
    // the last enabled retrieval source.
    let base: Option<&Vec<CandidateList>> =
        fused.as_ref().or_else(|| sources.last().map(|(_, l)| l));

    // Stage 2: interaction scorer.
    let reranked: Option<Vec<CandidateList>> = if cfg.stages.rerank {
        let base = base.ok_or_else(|| missing("rerank", "candidate lists from a retrieval stage"))?;
        let inverted = art.inverted.as_ref().ok_or_else(|| missing("rerank", "inverted index"))?;
        let impact = art.impact.as_ref().ok_or_else(|| missing("rerank", "impact index"))?;
        let store = art.store.as_ref().ok_or_else(|| missing("rerank", "vector store"))?;
        let ctx = FeatureContext {
            inverted,
            impact,
            store,
            embedder: art.embedder.clone(),
            k1: cfg.sparse.k1,
            b: cfg.sparse.b,
        };
        let candidates: Vec<CandidateList> = base
            .iter()
            .map(|l| truncated(l, cfg.rerank.depth))
            .collect();
        let prepared: BTreeMap<String, PreparedQuery> = art
            .queries
            .iter()
            .map(|q| Ok((q.query_id.clone(), ctx.prepare(q)?)))
            .collect::<Result<_>>()?;
        let scorer = if cfg.rerank.model.is_empty() {
            let qrels = art
                .qrels
                .as_ref()
                .ok_or_else(|| missing("rerank", "qrels for scorer training"))?;
            let (examples, skipped) = sample_negatives(
                &candidates,
                qrels,
                cfg.rerank.n_neg,
                cfg.rerank.seed,
                cfg.rerank.rel_threshold,
                |qid, pid, rank| {
                    let p = prepared
                        .get(qid)
                        .ok_or_else(|| Error::invalid(format!("unknown query `{qid}`")))?;
                    ctx.features(p, pid, rank)
                },
            )?;
            if examples.is_empty() {
                return Err(missing("rerank", "training lists with a judged positive"));
            }
            if skipped > 0 {
                log::info!("rerank training: {skipped} queries without a usable positive");
            }
            let train_cfg = RerankTrainConfig {
                hidden: cfg.rerank.hidden,
                dropout: cfg.rerank.dropout,
                lr: cfg.rerank.lr,
                epochs: cfg.rerank.epochs,
                rdrop_alpha: cfg.rerank.rdrop_alpha,
                seed: cfg.rerank.seed,
            };
            let scorer = train_interaction_scorer(&examples, &train_cfg)?;
            scorer.save(out_dir.join("scorer.json"))?;
            scorer
        } else {
            InteractionScorer::load(&cfg.rerank.model)?
        };
        let lists: Vec<CandidateList> = candidates
            .par_iter()
            .map(|l| {
                let p = prepared
                    .get(&l.query_id)
                    .ok_or_else(|| Error::invalid(format!("unknown query `{}`", l.query_id)))?;
                rescore_list(&scorer, &ctx, p, l)
            })
            .collect::<Result<_>>()?;
        let entries = lists_to_run(&lists, ScoreChannel::Ranking, "rerank")?;
        persist("rerank", entries, &mut runs, &mut produced)?;
        Some(lists)
    } else {
        None
    };

    // Stage 3: list-aware transformer.
    if cfg.stages.hlatr {
        let stage_input = reranked.as_ref().or(base).ok_or_else(|| {
            missing("hlatr", "candidate lists from an earlier stage")
        })?;
        let mut lists = ranked_lists_from(stage_input);
        let model = if cfg.hlatr.model.is_empty() {
            let qrels = art
                .qrels
                .as_ref()
                .ok_or_else(|| missing("hlatr", "qrels for training"))?;
            mark_positives(&mut lists, qrels, cfg.rerank.rel_threshold);
            let trainable: Vec<RankedList> = lists
                .iter()
                .filter(|l| l.positive.is_some() && l.candidates.len() >= 2)
                .cloned()
                .collect();
            if trainable.is_empty() {
                return Err(missing("hlatr", "training lists with a judged positive"));
            }
            hlatr::save_ranked_lists(&trainable, out_dir.join("hlatr.train.jsonl"))?;
            let model = hlatr::train_hlatr(&trainable, &cfg.hlatr.to_model_config())?;
            model.save(out_dir.join("hlatr.json"))?;
            model
        } else {
            HlatrModel::load(&cfg.hlatr.model)?
        };
        for l in &mut lists {
            l.positive = None;
        }
        let out_lists = hlatr::rerank(&model, &lists)?;
        let entries = lists_to_run(&out_lists, ScoreChannel::Hlatr, "hlatr")?;
        persist("hlatr", entries, &mut runs, &mut produced)?;
    }

    // MaxP aggregation applies on top of whatever came last.
    if cfg.stages.maxp {
        let (_, last) = produced
            .last()
            .ok_or_else(|| missing("maxp", "a run to aggregate"))?;
        let mut entries = maxp_aggregate(last)?;
        for e in &mut entries {
            e.tag = "maxp".to_string();
        }
        persist("maxp", entries, &mut runs, &mut produced)?;
    }

    let (_, last_path) = runs
        .last()
        .cloned()
        .ok_or_else(|| Error::invalid("no stage enabled"))?;
    let final_run = out_dir.join("run.final.trec");
    fs::copy(&last_path, &final_run).map_err(|e| Error::io(&final_run, e))?;

    // Evaluation. With document splitting active, passage-level runs use
    // window ids the qrels cannot name, so only the aggregated run is
    // scored.
    let mut metrics = Vec::new();
    if cfg.stages.eval {
        match &art.qrels {
            Some(qrels) => {
                let mut table = String::new();
                for (tag, entries) in &produced {
                    if cfg.data.documents && cfg.stages.maxp && tag != "maxp" {
                        continue;
                    }
                    let report = metrics_for(entries, qrels, &cfg.eval);
                    for (metric, r) in &report {
                        table.push_str(&format!("{tag}\t{metric}\t{:.6}\n", r.mean));
                    }
                    metrics.push((tag.clone(), report));
                }
                let path = out_dir.join("metrics.tsv");
                fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
            }
            None => log::warn!("eval stage enabled but no qrels provided; skipping metrics"),
        }
    }

    Ok(PipelineReport {
        runs,
        final_run,
        metrics,
    })
}

/// Probe ranking quality as a function of candidate-set size: train the
/// learned stages once at the configured depth, then rescore the top
/// `size` fused candidates for each size and report NDCG.
pub fn sweep_candidate_size(
    cfg: &PipelineConfig,
    sizes: &[usize],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<(usize, f64)>> {
    if sizes.is_empty() {
        return Err(Error::invalid("no sizes to sweep"));
    }
    if sizes.iter().any(|&s| s < 1) || sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("sizes must be ascending and >= 1"));
    }
    let out_dir = out_dir.as_ref();
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.stages.maxp = false;
    sweep_cfg.stages.eval = false;
    sweep_cfg.rerank.depth = cfg.rerank.depth.max(*sizes.last().unwrap());
    let report = run_pipeline(&sweep_cfg, out_dir)?;
    let qrels = if cfg.data.qrels.is_empty() {
        return Err(missing("sweep", "qrels"));
    } else {
        corpus::load_qrels(&cfg.data.qrels)?
    };

    // Re-create the stage inputs once, then restrict per size.
    let art = build_artifacts(&sweep_cfg)?;
    let sources = retrieval_lists(&sweep_cfg, &art)?;
    let base = if sweep_cfg.stages.fuse {
        fuse_lists(&sweep_cfg, &sources)?
    } else {
        sources
            .last()
            .map(|(_, l)| l.clone())
            .ok_or_else(|| missing("sweep", "a retrieval stage"))?
    };
    let scorer = if sweep_cfg.stages.rerank {
        Some(InteractionScorer::load(out_dir.join("scorer.json"))?)
    } else {
        None
    };
    let hlatr_model = if sweep_cfg.stages.hlatr {
        Some(HlatrModel::load(out_dir.join("hlatr.json"))?)
    } else {
        None
    };
    let inverted = art.inverted.as_ref();
    let impact = art.impact.as_ref();
    let store = art.store.as_ref();
    let _ = &report;

    let mut rows = Vec::new();
    for &size in sizes {
        let candidates: Vec<CandidateList> =
            base.iter().map(|l| truncated(l, size)).collect();
        let staged = if let Some(scorer) = &scorer {
            let ctx = FeatureContext {
                inverted: inverted.ok_or_else(|| missing("sweep", "inverted index"))?,
                impact: impact.ok_or_else(|| missing("sweep", "impact index"))?,
                store: store.ok_or_else(|| missing("sweep", "vector store"))?,
                embedder: art.embedder.clone(),
                k1: sweep_cfg.sparse.k1,
                b: sweep_cfg.sparse.b,
            };
            let mut staged = Vec::with_capacity(candidates.len());
            for (q, l) in art.queries.iter().zip(&candidates) {
                let p = ctx.prepare(q)?;
                staged.push(rescore_list(scorer, &ctx, &p, l)?);
            }
            staged
        } else {
            candidates
        };
        let (entries, channel) = if let Some(model) = &hlatr_model {
            let lists = ranked_lists_from(&staged);
            let out = hlatr::rerank(model, &lists)?;
            (out, ScoreChannel::Hlatr)
        } else if scorer.is_some() {
            (staged, ScoreChannel::Ranking)
        } else {
            (staged, ScoreChannel::Retrieval)
        };
        let run = lists_to_run(&entries, channel, "sweep")?;
        let ndcg = eval::ndcg_at_k(&run, &qrels, cfg.eval.ndcg_k);
        rows.push((size, ndcg.mean));
    }
    Ok(rows)
}
