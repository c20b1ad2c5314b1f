//! Batch CLI over the cascade library: indexing, retrieval, fusion,
//! the two learned re-ranking stages, aggregation, evaluation, and the
//! end-to-end pipeline, all driven by one TOML config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use cascade::corpus::{self, Qrels};
use cascade::dense::{load_vectors, Embedder, VectorStore};
use cascade::eval::{self, ScoreChannel};
use cascade::fusion::NormMethod;
use cascade::hlatr::{self, HlatrModel};
use cascade::pipeline::{
    self, fuse_run_entries, maxp_aggregate, run_pipeline, sweep_candidate_size, PipelineConfig,
};
use cascade::rerank::{
    sample_negatives, train_interaction_scorer, FeatureContext, InteractionScorer,
    RerankTrainConfig,
};
use cascade::sparse::{unit_query_weights, ImpactIndex, InvertedIndex};

#[derive(Parser)]
#[command(
    name = "cascade",
    version,
    about = "Hybrid retrieval and multi-stage ranking pipeline"
)]
struct Cli {
    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every stage seed with one value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for produced artifacts and run files.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RetrieveMode {
    Bm25,
    Impact,
    Dense,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25 inverted index.
    IndexSparse {
        #[arg(long)]
        passages: Option<PathBuf>,
        /// Expansion texts appended before indexing (TSV: id <TAB> text).
        #[arg(long)]
        expansions: Option<PathBuf>,
    },
    /// Build the impact (precomputed term weight) index.
    IndexImpact {
        #[arg(long)]
        passages: Option<PathBuf>,
        /// Learned term weights (JSONL); omitted = analytic fallback.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Embed passages into the dense vector store.
    IndexDense {
        #[arg(long)]
        passages: Option<PathBuf>,
    },
    /// Run one retriever over the queries and write its run file.
    Retrieve {
        #[arg(long, value_enum)]
        mode: RetrieveMode,
        /// Index artifact (defaults to this mode's file in --output-dir).
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Normalize and weight-combine run files into one fused run.
    Fuse {
        /// Run file; repeat once per source.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Comma-separated weights, one per run (default: all 1).
        #[arg(long)]
        weights: Option<String>,
        /// minmax | zscore | none (default from config).
        #[arg(long)]
        normalization: Option<String>,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Dump ranking-stage feature vectors for a candidate run.
    Features {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        sparse_index: Option<PathBuf>,
        #[arg(long)]
        impact_index: Option<PathBuf>,
        #[arg(long)]
        dense_index: Option<PathBuf>,
    },
    /// Train the interaction scorer on retrieval-sampled negatives.
    TrainScorer {
        /// Candidate run (typically the fused run).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        sparse_index: Option<PathBuf>,
        #[arg(long)]
        impact_index: Option<PathBuf>,
        #[arg(long)]
        dense_index: Option<PathBuf>,
    },
    /// Re-score a candidate run with a trained scorer.
    Rescore {
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        sparse_index: Option<PathBuf>,
        #[arg(long)]
        impact_index: Option<PathBuf>,
        #[arg(long)]
        dense_index: Option<PathBuf>,
    },
    /// Train the list-aware re-ranker from a ranked-list file.
    TrainHlatr {
        /// Training lists (JSONL with marked positives).
        #[arg(long)]
        lists: PathBuf,
    },
    /// Apply a trained list-aware re-ranker to ranked lists.
    HlatrRerank {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        lists: PathBuf,
    },
    /// Collapse a passage run into a document run (max passage score).
    AggregateMaxp {
        #[arg(long)]
        run: PathBuf,
    },
    /// Score a run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: Option<PathBuf>,
    },
    /// Run every enabled stage end to end.
    Pipeline,
    /// Generate the synthetic corpus, queries, and qrels.
    Synth {
        #[arg(long)]
        n_docs: Option<usize>,
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        lexical_fraction: Option<f64>,
        #[arg(long)]
        rel_per_query: Option<usize>,
    },
    /// Report ranking quality across candidate-set sizes.
    Sweep {
        /// Comma-separated ascending sizes, e.g. 10,50,100.
        #[arg(long)]
        sizes: String,
    },
}

fn main() -> std::process::ExitCode {
    // Die quietly when stdout is a pipe closed early, e.g. `cascade eval | head`.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return std::process::ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("error: bad arguments");
            eprintln!("{line}");
            return std::process::ExitCode::from(2);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return std::process::ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            std::process::ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config `{}`", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

/// A flag value, else the config path, else an error naming the setting.
fn path_or(flag: &Option<PathBuf>, from_config: &str, what: &str) -> anyhow::Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None if !from_config.is_empty() => Ok(PathBuf::from(from_config)),
        None => bail!("no {what} provided (flag or config)"),
    }
}

fn default_artifact(flag: &Option<PathBuf>, out_dir: &Path, name: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| out_dir.join(name))
}

struct IndexSet {
    inverted: InvertedIndex,
    impact: ImpactIndex,
    store: VectorStore,
}

fn load_indexes(
    out_dir: &Path,
    sparse: &Option<PathBuf>,
    impact: &Option<PathBuf>,
    dense: &Option<PathBuf>,
) -> anyhow::Result<IndexSet> {
    Ok(IndexSet {
        inverted: InvertedIndex::load(default_artifact(sparse, out_dir, "sparse.index.json"))?,
        impact: ImpactIndex::load(default_artifact(impact, out_dir, "impact.index.json"))?,
        store: load_vectors(default_artifact(dense, out_dir, "dense.vectors.tsv"), None)?,
    })
}

fn feature_context<'a>(ix: &'a IndexSet, cfg: &PipelineConfig) -> anyhow::Result<FeatureContext<'a>> {
    if ix.store.dim() != cfg.dense.dim {
        bail!(
            "vector store dim {} does not match config dim {}",
            ix.store.dim(),
            cfg.dense.dim
        );
    }
    Ok(FeatureContext {
        inverted: &ix.inverted,
        impact: &ix.impact,
        store: &ix.store,
        embedder: Embedder::new(cfg.dense.dim, cfg.dense.seed),
        k1: cfg.sparse.k1,
        b: cfg.sparse.b,
    })
}

fn load_qrels_arg(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> anyhow::Result<Qrels> {
    let path = path_or(flag, &cfg.data.qrels, "qrels")?;
    Ok(corpus::load_qrels(&path)?)
}

fn write_run_to(
    entries: &[eval::RunEntry],
    out_dir: &Path,
    name: &str,
) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating `{}`", out_dir.display()))?;
    let path = out_dir.join(name);
    eval::write_run(entries, &path)?;
    Ok(path)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out_dir = cli.output_dir.clone();
    match cli.command {
        Command::IndexSparse { passages, expansions } => {
            let path = path_or(&passages, &cfg.data.passages, "passages")?;
            let corpus = corpus::load_passage_corpus(&path, None)?;
            let expansions = match expansions {
                Some(p) => Some(cascade::sparse::load_expansions(p)?),
                None if !cfg.sparse.expansions.is_empty() => {
                    Some(cascade::sparse::load_expansions(&cfg.sparse.expansions)?)
                }
                None => None,
            };
            let index = cascade::sparse::build_inverted_index(&corpus, expansions.as_ref())?;
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("sparse.index.json");
            index.save(&out)?;
            println!("{} passages indexed -> {}", index.doc_count(), out.display());
        }
        Command::IndexImpact { passages, weights } => {
            let path = path_or(&passages, &cfg.data.passages, "passages")?;
            let corpus = corpus::load_passage_corpus(&path, None)?;
            let weights = match weights {
                Some(p) => cascade::sparse::load_term_weights(p)?,
                None if !cfg.impact.weights.is_empty() => {
                    cascade::sparse::load_term_weights(&cfg.impact.weights)?
                }
                None => cascade::sparse::default_term_weights(&corpus),
            };
            let index = cascade::sparse::build_impact_index(&weights)?;
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("impact.index.json");
            index.save(&out)?;
            println!("{} passages indexed -> {}", index.doc_count(), out.display());
        }
        Command::IndexDense { passages } => {
            let path = path_or(&passages, &cfg.data.passages, "passages")?;
            let corpus = corpus::load_passage_corpus(&path, None)?;
            let embedder = Embedder::new(cfg.dense.dim, cfg.dense.seed);
            let store = cascade::dense::build_vector_store(&corpus, &embedder)?;
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("dense.vectors.tsv");
            store.save(&out)?;
            println!("{} vectors (dim {}) -> {}", store.len(), store.dim(), out.display());
        }
        Command::Retrieve { mode, index, queries, k } => {
            let queries = corpus::load_queries(path_or(&queries, &cfg.data.queries, "queries")?)?;
            let (lists, tag) = match mode {
                RetrieveMode::Bm25 => {
                    let idx = InvertedIndex::load(default_artifact(&index, &out_dir, "sparse.index.json"))?;
                    let k = k.unwrap_or(cfg.sparse.k);
                    let lists: Vec<_> = queries
                        .iter()
                        .map(|q| cascade::sparse::retrieve_bm25(&idx, q, k, cfg.sparse.k1, cfg.sparse.b))
                        .collect();
                    (lists, "bm25")
                }
                RetrieveMode::Impact => {
                    let idx = ImpactIndex::load(default_artifact(&index, &out_dir, "impact.index.json"))?;
                    let k = k.unwrap_or(cfg.impact.k);
                    let lists = queries
                        .iter()
                        .map(|q| {
                            let w = unit_query_weights(&q.text);
                            cascade::sparse::retrieve_impact(&idx, &q.query_id, &w, k)
                        })
                        .collect::<cascade::Result<Vec<_>>>()?;
                    (lists, "impact")
                }
                RetrieveMode::Dense => {
                    let store = load_vectors(default_artifact(&index, &out_dir, "dense.vectors.tsv"), None)?;
                    if store.dim() != cfg.dense.dim {
                        bail!("vector store dim {} does not match config dim {}", store.dim(), cfg.dense.dim);
                    }
                    let embedder = Embedder::new(cfg.dense.dim, cfg.dense.seed);
                    let k = k.unwrap_or(cfg.dense.k);
                    let lists = queries
                        .iter()
                        .map(|q| {
                            let v = embedder.embed(&q.text)?;
                            cascade::dense::retrieve_dense(&store, &q.query_id, &v, k)
                        })
                        .collect::<cascade::Result<Vec<_>>>()?;
                    (lists, "dense")
                }
            };
            let entries = eval::lists_to_run(&lists, ScoreChannel::Retrieval, tag)?;
            let out = write_run_to(&entries, &out_dir, &format!("run.{tag}.trec"))?;
            println!("{} queries -> {}", lists.len(), out.display());
        }
        Command::Fuse { runs, weights, normalization, k } => {
            let sources = runs
                .iter()
                .map(|p| Ok(eval::read_run(p)?))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let weights: Vec<f64> = match weights {
                Some(s) => s
                    .split(',')
                    .map(|w| w.trim().parse::<f64>().with_context(|| format!("bad weight `{w}`")))
                    .collect::<anyhow::Result<_>>()?,
                None => vec![1.0; sources.len()],
            };
            let method: NormMethod = normalization
                .as_deref()
                .unwrap_or(&cfg.fusion.normalization)
                .parse()
                .map_err(|e: cascade::Error| anyhow::anyhow!(e))?;
            let lists = fuse_run_entries(&sources, &weights, method, k.unwrap_or(cfg.fusion.depth))?;
            let entries = eval::lists_to_run(&lists, ScoreChannel::Retrieval, "fused")?;
            let out = write_run_to(&entries, &out_dir, "run.fused.trec")?;
            println!("{} queries fused from {} runs -> {}", lists.len(), sources.len(), out.display());
        }
        Command::Features { run, queries, sparse_index, impact_index, dense_index } => {
            let ix = load_indexes(&out_dir, &sparse_index, &impact_index, &dense_index)?;
            let ctx = feature_context(&ix, &cfg)?;
            let queries = corpus::load_queries(path_or(&queries, &cfg.data.queries, "queries")?)?;
            let entries = eval::read_run(&run)?;
            let lists = eval::run_to_lists(&entries);
            let mut jsonl = String::new();
            for list in &lists {
                let query = queries
                    .iter()
                    .find(|q| q.query_id == list.query_id)
                    .with_context(|| format!("query `{}` not in query file", list.query_id))?;
                let prepared = ctx.prepare(query)?;
                for c in &list.candidates {
                    let f = ctx.features(&prepared, &c.passage_id, c.retrieval_rank)?;
                    let line = serde_json::json!({
                        "query_id": list.query_id,
                        "passage_id": c.passage_id,
                        "rank": c.retrieval_rank,
                        "features": f.to_vec(),
                    });
                    jsonl.push_str(&line.to_string());
                    jsonl.push('\n');
                }
            }
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("features.jsonl");
            std::fs::write(&out, jsonl)?;
            println!("features for {} lists -> {}", lists.len(), out.display());
        }
        Command::TrainScorer { run, qrels, queries, sparse_index, impact_index, dense_index } => {
            let ix = load_indexes(&out_dir, &sparse_index, &impact_index, &dense_index)?;
            let ctx = feature_context(&ix, &cfg)?;
            let queries = corpus::load_queries(path_or(&queries, &cfg.data.queries, "queries")?)?;
            let qrels = load_qrels_arg(&qrels, &cfg)?;
            let entries = eval::read_run(&run)?;
            let lists = eval::run_to_lists(&entries);
            let prepared = queries
                .iter()
                .map(|q| Ok((q.query_id.clone(), ctx.prepare(q)?)))
                .collect::<cascade::Result<std::collections::BTreeMap<_, _>>>()?;
            let (examples, skipped) = sample_negatives(
                &lists,
                &qrels,
                cfg.rerank.n_neg,
                cfg.rerank.seed,
                cfg.rerank.rel_threshold,
                |qid, pid, rank| {
                    let p = prepared
                        .get(qid)
                        .ok_or_else(|| cascade::Error::InvalidArgument(format!("query `{qid}` not in query file")))?;
                    ctx.features(p, pid, rank)
                },
            )?;
            if examples.is_empty() {
                bail!("no training lists with a judged positive");
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
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("scorer.json");
            scorer.save(&out)?;
            println!(
                "trained on {} lists ({} skipped) -> {}",
                examples.len(),
                skipped,
                out.display()
            );
        }
        Command::Rescore { scorer, run, queries, sparse_index, impact_index, dense_index } => {
            let ix = load_indexes(&out_dir, &sparse_index, &impact_index, &dense_index)?;
            let ctx = feature_context(&ix, &cfg)?;
            let scorer = InteractionScorer::load(default_artifact(&scorer, &out_dir, "scorer.json"))?;
            let queries = corpus::load_queries(path_or(&queries, &cfg.data.queries, "queries")?)?;
            let entries = eval::read_run(&run)?;
            let lists = eval::run_to_lists(&entries);
            let mut rescored = Vec::with_capacity(lists.len());
            for list in &lists {
                let query = queries
                    .iter()
                    .find(|q| q.query_id == list.query_id)
                    .with_context(|| format!("query `{}` not in query file", list.query_id))?;
                let prepared = ctx.prepare(query)?;
                rescored.push(pipeline::rescore_list(&scorer, &ctx, &prepared, list)?);
            }
            let entries = eval::lists_to_run(&rescored, ScoreChannel::Ranking, "rerank")?;
            let out = write_run_to(&entries, &out_dir, "run.rerank.trec")?;
            println!("{} lists rescored -> {}", rescored.len(), out.display());
        }
        Command::TrainHlatr { lists } => {
            let lists = hlatr::load_ranked_lists(&lists)?;
            let model = hlatr::train_hlatr(&lists, &cfg.hlatr.to_model_config())?;
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("hlatr.json");
            model.save(&out)?;
            println!("trained on {} lists -> {}", lists.len(), out.display());
        }
        Command::HlatrRerank { model, lists } => {
            let model = HlatrModel::load(default_artifact(&model, &out_dir, "hlatr.json"))?;
            let mut lists = hlatr::load_ranked_lists(&lists)?;
            for l in &mut lists {
                l.positive = None;
            }
            let out_lists = hlatr::rerank(&model, &lists)?;
            let entries = eval::lists_to_run(&out_lists, ScoreChannel::Hlatr, "hlatr")?;
            let out = write_run_to(&entries, &out_dir, "run.hlatr.trec")?;
            println!("{} lists reranked -> {}", out_lists.len(), out.display());
        }
        Command::AggregateMaxp { run } => {
            let entries = eval::read_run(&run)?;
            let mut aggregated = maxp_aggregate(&entries)?;
            for e in &mut aggregated {
                e.tag = "maxp".to_string();
            }
            let out = write_run_to(&aggregated, &out_dir, "run.maxp.trec")?;
            println!("{} passage entries -> {} document entries -> {}", entries.len(), aggregated.len(), out.display());
        }
        Command::Eval { run, qrels } => {
            let entries = eval::read_run(&run)?;
            let qrels = load_qrels_arg(&qrels, &cfg)?;
            println!("metric\tmean\tevaluated\texcluded");
            let print_metric = |name: &str, r: &eval::MetricReport| {
                println!("{name}\t{:.6}\t{}\t{}", r.mean, r.evaluated, r.excluded);
            };
            print_metric(
                &format!("ndcg@{}", cfg.eval.ndcg_k),
                &eval::ndcg_at_k(&entries, &qrels, cfg.eval.ndcg_k),
            );
            print_metric(
                "map",
                &eval::average_precision(&entries, &qrels, cfg.eval.rel_threshold),
            );
            print_metric(
                &format!("mrr@{}", cfg.eval.mrr_k),
                &eval::mrr_at_k(&entries, &qrels, cfg.eval.mrr_k, cfg.eval.rel_threshold),
            );
            for &k in &cfg.eval.recall_ks {
                print_metric(
                    &format!("recall@{k}"),
                    &eval::recall_at_k(&entries, &qrels, k, cfg.eval.rel_threshold),
                );
            }
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg, &out_dir)?;
            for (tag, path) in &report.runs {
                println!("{tag}\t{}", path.display());
            }
            println!("final\t{}", report.final_run.display());
            for (tag, metrics) in &report.metrics {
                for (name, r) in metrics {
                    println!("{tag}\t{name}\t{:.6}", r.mean);
                }
            }
        }
        Command::Synth { n_docs, n_queries, vocab, lexical_fraction, rel_per_query } => {
            let mut synth_cfg = cfg.synth.clone();
            if let Some(v) = n_docs {
                synth_cfg.n_docs = v;
            }
            if let Some(v) = n_queries {
                synth_cfg.n_queries = v;
            }
            if let Some(v) = vocab {
                synth_cfg.vocab = v;
            }
            if let Some(v) = lexical_fraction {
                synth_cfg.lexical_fraction = v;
            }
            if let Some(v) = rel_per_query {
                synth_cfg.rel_per_query = v;
            }
            let data = pipeline::synth::generate_synthetic(&synth_cfg)?;
            pipeline::synth::write_synthetic(&data, &out_dir)?;
            println!(
                "{} passages, {} queries, {} judgments -> {}",
                data.passages.len(),
                data.queries.len(),
                data.qrels.len(),
                out_dir.display()
            );
        }
        Command::Sweep { sizes } => {
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad size `{s}`")))
                .collect::<anyhow::Result<_>>()?;
            let rows = sweep_candidate_size(&cfg, &sizes, &out_dir)?;
            let mut table = format!("size\tndcg@{}\n", cfg.eval.ndcg_k);
            println!("size\tndcg@{}", cfg.eval.ndcg_k);
            for (size, ndcg) in &rows {
                println!("{size}\t{ndcg:.6}");
                table.push_str(&format!("{size}\t{ndcg:.6}\n"));
            }
            std::fs::write(out_dir.join("sweep.tsv"), table)?;
        }
    }
    Ok(())
}
