//! Acceptance gate for the whole engine: eleven numbered criteria, each
//! checked against an oracle implemented here from the definitions alone
//! and printed as one pass/fail line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade::corpus::{Corpus, Passage, Qrels, Query};
use cascade::dense::{build_vector_store, retrieve_dense, Embedder, VectorStore};
use cascade::eval::{self, RunEntry, ScoreChannel};
use cascade::fusion::{self, CandidateList, NormMethod};
use cascade::hlatr::{
    self, hlatr_grads, hlatr_loss, HlatrConfig, HlatrMasks, HlatrModel, RankedCandidate,
    RankedList, Tensors,
};
use cascade::pipeline::synth::{generate_synthetic, write_synthetic, SynthConfig};
use cascade::pipeline::{maxp_aggregate, run_pipeline, PipelineConfig};
use cascade::rerank::{rdrop_grads, rdrop_loss, InteractionScorer, RdropMasks, FEATURE_DIM};
use cascade::sparse::{build_inverted_index, retrieve_bm25};

fn criterion(n: u32, name: &str, check: impl FnOnce() -> Result<(), String>) {
    match check() {
        Ok(()) => println!("criterion {n:2} ({name}): pass"),
        Err(msg) => {
            println!("criterion {n:2} ({name}): FAIL: {msg}");
            panic!("criterion {n} ({name}): {msg}");
        }
    }
}

fn workspace_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .unwrap()
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn make_corpus(entries: &[(&str, &str)]) -> Corpus {
    Corpus::from_passages(
        entries
            .iter()
            .map(|(id, text)| Passage {
                passage_id: id.to_string(),
                parent_doc_id: id.to_string(),
                text: text.to_string(),
                token_span: None,
            })
            .collect(),
    )
    .unwrap()
}

fn query(id: &str, text: &str) -> Query {
    Query {
        query_id: id.to_string(),
        text: text.to_string(),
    }
}

// Definition-level metric oracles. Ranked input is the retrieved doc order;
// judgments come straight from the qrels map. None means the query cannot
// support the metric and must be excluded from the mean.

fn oracle_dcg(gains: &[f64], k: usize) -> f64 {
    gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| g / (i as f64 + 2.0).log2())
        .sum()
}

fn oracle_ndcg(ranked: &[&str], judged: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let mut ideal: Vec<f64> = judged.values().map(|&g| g as f64).collect();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg = oracle_dcg(&ideal, k);
    if idcg == 0.0 {
        return None;
    }
    let gains: Vec<f64> = ranked
        .iter()
        .map(|d| judged.get(*d).copied().unwrap_or(0) as f64)
        .collect();
    Some(oracle_dcg(&gains, k) / idcg)
}

fn oracle_relevant(judged: &BTreeMap<String, u32>, threshold: u32) -> BTreeSet<&str> {
    judged
        .iter()
        .filter(|(_, &g)| g >= threshold)
        .map(|(d, _)| d.as_str())
        .collect()
}

fn oracle_ap(ranked: &[&str], judged: &BTreeMap<String, u32>, threshold: u32) -> Option<f64> {
    let rel = oracle_relevant(judged, threshold);
    if rel.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if rel.contains(*d) {
            hits += 1;
            sum += hits as f64 / (i as f64 + 1.0);
        }
    }
    Some(sum / rel.len() as f64)
}

fn oracle_recall(
    ranked: &[&str],
    judged: &BTreeMap<String, u32>,
    k: usize,
    threshold: u32,
) -> Option<f64> {
    let rel = oracle_relevant(judged, threshold);
    if rel.is_empty() {
        return None;
    }
    let found = ranked.iter().take(k).filter(|d| rel.contains(**d)).count();
    Some(found as f64 / rel.len() as f64)
}

fn oracle_mrr(
    ranked: &[&str],
    judged: &BTreeMap<String, u32>,
    k: usize,
    threshold: u32,
) -> Option<f64> {
    let rel = oracle_relevant(judged, threshold);
    if rel.is_empty() {
        return None;
    }
    for (i, d) in ranked.iter().take(k).enumerate() {
        if rel.contains(*d) {
            return Some(1.0 / (i as f64 + 1.0));
        }
    }
    Some(0.0)
}

/// Compare a metric report against per-query oracle values (None =
/// excluded query).
fn check_metric(
    tag: &str,
    rep: &eval::MetricReport,
    oracle: &BTreeMap<String, Option<f64>>,
) -> Result<(), String> {
    let expected: Vec<(&String, f64)> = oracle
        .iter()
        .filter_map(|(q, v)| v.map(|x| (q, x)))
        .collect();
    if rep.evaluated != expected.len() || rep.excluded != oracle.len() - expected.len() {
        return Err(format!(
            "{tag}: evaluated/excluded {}/{} wanted {}/{}",
            rep.evaluated,
            rep.excluded,
            expected.len(),
            oracle.len() - expected.len()
        ));
    }
    if rep.per_query.len() != expected.len() {
        return Err(format!("{tag}: per-query size {}", rep.per_query.len()));
    }
    let mut sum = 0.0;
    for (qid, want) in &expected {
        let got = rep
            .per_query
            .get(*qid)
            .ok_or_else(|| format!("{tag}: query {qid} missing"))?;
        if (got - want).abs() > 1e-9 {
            return Err(format!("{tag}: query {qid} got {got} wanted {want}"));
        }
        sum += want;
    }
    let mean = if expected.is_empty() {
        0.0
    } else {
        sum / expected.len() as f64
    };
    if (rep.mean - mean).abs() > 1e-9 {
        return Err(format!("{tag}: mean {} wanted {mean}", rep.mean));
    }
    Ok(())
}

#[test]
fn criterion_01_metric_oracle_equivalence() {
    criterion(1, "metric oracle equivalence", || {
        let t0 = Instant::now();
        for instance in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + instance);
            let n_docs = rng.gen_range(1..=20);
            let docs: Vec<String> = (0..n_docs).map(|i| format!("d{i:02}")).collect();
            let n_queries = rng.gen_range(1..=5);

            let mut qrels = Qrels::new();
            let mut judged_by_q: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
            for qi in 0..n_queries {
                let qid = format!("q{qi}");
                let mut judged = BTreeMap::new();
                for d in &docs {
                    if rng.gen_bool(0.7) {
                        let grade = rng.gen_range(0..=3u32);
                        qrels.insert(&qid, d, grade).map_err(|e| e.to_string())?;
                        judged.insert(d.clone(), grade);
                    }
                }
                // A query judged on nothing never enters the qrels.
                if !judged.is_empty() {
                    judged_by_q.insert(qid, judged);
                }
            }

            let mut run: Vec<RunEntry> = Vec::new();
            let mut ranked_by_q: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for qid in judged_by_q.keys() {
                if rng.gen_bool(0.1) {
                    // Judged query absent from the run scores zero.
                    ranked_by_q.insert(qid.clone(), Vec::new());
                    continue;
                }
                let mut scored: Vec<(String, f64)> = Vec::new();
                for d in &docs {
                    if rng.gen_bool(0.7) {
                        scored.push((d.clone(), rng.gen_range(0..=5) as f64 * 0.5));
                    }
                }
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                for (i, (d, s)) in scored.iter().enumerate() {
                    run.push(RunEntry {
                        query_id: qid.clone(),
                        doc_id: d.clone(),
                        rank: (i + 1) as u32,
                        score: *s,
                        tag: "t".into(),
                    });
                }
                ranked_by_q.insert(qid.clone(), scored.into_iter().map(|(d, _)| d).collect());
            }
            // A run-only query outside the qrels must not disturb anything.
            run.push(RunEntry {
                query_id: "zz".into(),
                doc_id: "d00".into(),
                rank: 1,
                score: 1.0,
                tag: "t".into(),
            });

            let per_q = |f: &dyn Fn(&[&str], &BTreeMap<String, u32>) -> Option<f64>| {
                judged_by_q
                    .iter()
                    .map(|(qid, judged)| {
                        let ranked: Vec<&str> = ranked_by_q[qid].iter().map(|s| s.as_str()).collect();
                        (qid.clone(), f(&ranked, judged))
                    })
                    .collect::<BTreeMap<String, Option<f64>>>()
            };

            check_metric(
                "ndcg@10",
                &eval::ndcg_at_k(&run, &qrels, 10),
                &per_q(&|r, j| oracle_ndcg(r, j, 10)),
            )?;
            check_metric(
                "map",
                &eval::average_precision(&run, &qrels, 2),
                &per_q(&|r, j| oracle_ap(r, j, 2)),
            )?;
            for k in [3usize, 10] {
                check_metric(
                    &format!("recall@{k}"),
                    &eval::recall_at_k(&run, &qrels, k, 2),
                    &per_q(&|r, j| oracle_recall(r, j, k, 2)),
                )?;
                check_metric(
                    &format!("mrr@{k}"),
                    &eval::mrr_at_k(&run, &qrels, k, 2),
                    &per_q(&|r, j| oracle_mrr(r, j, k, 2)),
                )?;
            }
        }
        let dt = t0.elapsed();
        if dt.as_secs_f64() >= 5.0 {
            return Err(format!("took {dt:?}, limit 5 s"));
        }
        Ok(())
    });
}

#[test]
fn criterion_02_bm25_exactness() {
    criterion(2, "bm25 exactness", || {
        // Hand corpus: d1 "a b a", d2 "b c", d3 "c c c"; query "a b";
        // k1 = 1.2, b = 0.75, N = 3, avgdl = 8/3.
        let corpus = make_corpus(&[("d1", "a b a"), ("d2", "b c"), ("d3", "c c c")]);
        let idx = build_inverted_index(&corpus, None).map_err(|e| e.to_string())?;
        let got = retrieve_bm25(&idx, &query("q", "a b"), 10, 1.2, 0.75);

        let avgdl = 8.0 / 3.0;
        let idf_a = (1.0_f64 + (3.0 - 1.0 + 0.5) / (1.0 + 0.5)).ln();
        let idf_b = (1.0_f64 + (3.0 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
        let tf_norm =
            |tf: f64, len: f64| tf * (1.2 + 1.0) / (tf + 1.2 * (1.0 - 0.75 + 0.75 * len / avgdl));
        let d1 = idf_a * tf_norm(2.0, 3.0) + idf_b * tf_norm(1.0, 3.0);
        let d2 = idf_b * tf_norm(1.0, 2.0);

        if got.len() != 2 {
            return Err(format!("hand corpus returned {} candidates, wanted 2", got.len()));
        }
        let ids: Vec<&str> = got.candidates.iter().map(|c| c.passage_id.as_str()).collect();
        if ids != ["d1", "d2"] {
            return Err(format!("hand corpus order {ids:?}"));
        }
        for (c, want) in got.candidates.iter().zip([d1, d2]) {
            if (c.retrieval_score - want).abs() > 1e-9 {
                return Err(format!(
                    "{}: score {} wanted {want}",
                    c.passage_id, c.retrieval_score
                ));
            }
        }

        // 50 random docs vs exhaustive definition-level scoring.
        for round in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4100 + round);
            let vocab: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
            let mut texts: Vec<String> = (0..50)
                .map(|_| {
                    let len = rng.gen_range(3..=12);
                    (0..len)
                        .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            texts[30] = texts[10].clone(); // forced score tie
            let entries: Vec<(String, String)> = texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("r{i:02}"), t))
                .collect();
            let refs: Vec<(&str, &str)> =
                entries.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let corpus = make_corpus(&refs);
            let idx = build_inverted_index(&corpus, None).map_err(|e| e.to_string())?;

            let qterms = ["t1", "t4", "t9"];
            let q = query("q", &qterms.join(" "));
            let got = retrieve_bm25(&idx, &q, 60, 1.2, 0.75);

            // Brute force over every document.
            let tokenized: Vec<Vec<&str>> = refs
                .iter()
                .map(|(_, t)| t.split_whitespace().collect())
                .collect();
            let n = refs.len() as f64;
            let avgdl = tokenized.iter().map(|t| t.len() as f64).sum::<f64>() / n;
            let mut expect: Vec<(String, f64)> = Vec::new();
            for (i, toks) in tokenized.iter().enumerate() {
                let mut score = 0.0;
                let mut overlap = false;
                for &term in &qterms {
                    let tf = toks.iter().filter(|&&t| t == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    overlap = true;
                    let df = tokenized.iter().filter(|d| d.contains(&term)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let len = toks.len() as f64;
                    score += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len / avgdl));
                }
                if overlap {
                    expect.push((refs[i].0.to_string(), score));
                }
            }
            expect.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

            let got_ids: Vec<&str> = got.candidates.iter().map(|c| c.passage_id.as_str()).collect();
            let want_ids: Vec<&str> = expect.iter().map(|(id, _)| id.as_str()).collect();
            if got_ids != want_ids {
                return Err(format!("round {round}: ranking differs: {got_ids:?} vs {want_ids:?}"));
            }
            for (c, (_, s)) in got.candidates.iter().zip(&expect) {
                if (c.retrieval_score - s).abs() > 1e-9 {
                    return Err(format!("round {round}: {} score drift", c.passage_id));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_03_dense_exactness() {
    criterion(3, "dense retrieval exactness", || {
        let dim = 48;
        let mut rng = ChaCha8Rng::seed_from_u64(3000);
        let mut rows: Vec<(String, Vec<f32>)> = (0..200)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                (format!("v{i:03}"), v)
            })
            .collect();
        rows[150].1 = rows[3].1.clone(); // duplicate vector forces ties
        let store = VectorStore::from_vectors(rows, dim).map_err(|e| e.to_string())?;

        for qi in 0..10 {
            let qv: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let got = retrieve_dense(&store, &format!("q{qi}"), &qv, 25).map_err(|e| e.to_string())?;

            let mut expect: Vec<(String, f64)> = (0..store.len() as u32)
                .map(|o| {
                    let dot: f64 = store
                        .vector(o)
                        .iter()
                        .zip(&qv)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    (store.id_table().id(o).to_string(), dot)
                })
                .collect();
            expect.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            expect.truncate(25);

            let got_ids: Vec<&str> = got.candidates.iter().map(|c| c.passage_id.as_str()).collect();
            let want_ids: Vec<&str> = expect.iter().map(|(id, _)| id.as_str()).collect();
            if got_ids != want_ids {
                return Err(format!("query {qi}: order {got_ids:?} vs {want_ids:?}"));
            }
            for (c, (_, s)) in got.candidates.iter().zip(&expect) {
                if (c.retrieval_score - s).abs() > 1e-12 {
                    return Err(format!("query {qi}: {} score drift", c.passage_id));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_04_hybrid_complementarity() {
    criterion(4, "hybrid complementarity fixture", || {
        let t0 = Instant::now();
        let cfg = SynthConfig::default();
        if (cfg.n_docs, cfg.n_queries, cfg.seed) != (1000, 20, 42) || cfg.lexical_fraction != 0.5 {
            return Err("synthetic defaults moved off the fixture point".into());
        }
        let data = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
        let corpus = Corpus::from_passages(data.passages.clone()).map_err(|e| e.to_string())?;
        let idx = build_inverted_index(&corpus, None).map_err(|e| e.to_string())?;
        let embedder = Embedder::default();
        let store = build_vector_store(&corpus, &embedder).map_err(|e| e.to_string())?;

        let (mut sum_s, mut sum_d, mut sum_f) = (0.0, 0.0, 0.0);
        let mut strictly_better = 0usize;
        for q in &data.queries {
            let sparse = retrieve_bm25(&idx, q, 1000, 1.2, 0.75);
            let qv = embedder.embed(&q.text).map_err(|e| e.to_string())?;
            let dense = retrieve_dense(&store, &q.query_id, &qv, 1000).map_err(|e| e.to_string())?;
            let fused = fusion::weighted_fuse(
                &[
                    fusion::normalize_scores(&sparse, NormMethod::MinMax).map_err(|e| e.to_string())?,
                    fusion::normalize_scores(&dense, NormMethod::MinMax).map_err(|e| e.to_string())?,
                ],
                &[0.4, 0.6],
                1000,
            )
            .map_err(|e| e.to_string())?;

            let judged = data
                .qrels
                .judgments(&q.query_id)
                .ok_or_else(|| format!("no judgments for {}", q.query_id))?;
            let rel: BTreeSet<&str> = judged
                .iter()
                .filter(|(_, &g)| g >= 2)
                .map(|(d, _)| d.as_str())
                .collect();
            let r100 = |l: &CandidateList| {
                l.candidates
                    .iter()
                    .take(100)
                    .filter(|c| rel.contains(c.passage_id.as_str()))
                    .count() as f64
                    / rel.len() as f64
            };
            let (rs, rd, rf) = (r100(&sparse), r100(&dense), r100(&fused));
            sum_s += rs;
            sum_d += rd;
            sum_f += rf;
            if rf > rs.max(rd) + 1e-12 {
                strictly_better += 1;
            }
        }
        let nq = data.queries.len() as f64;
        let (mean_s, mean_d, mean_f) = (sum_s / nq, sum_d / nq, sum_f / nq);
        if mean_f + 1e-12 < mean_s.max(mean_d) {
            return Err(format!(
                "fused R@100 {mean_f:.4} below best single channel ({mean_s:.4} sparse, {mean_d:.4} dense)"
            ));
        }
        if strictly_better < 15 {
            return Err(format!(
                "fused strictly better on only {strictly_better}/20 queries"
            ));
        }
        let dt = t0.elapsed();
        if dt.as_secs_f64() >= 30.0 {
            return Err(format!("took {dt:?}, limit 30 s"));
        }
        Ok(())
    });
}

fn scorer_slot_count(s: &InteractionScorer) -> usize {
    s.w1.len() + s.b1.len() + s.w2.len() + 1
}

fn scorer_slot(s: &mut InteractionScorer, slot: usize) -> &mut f64 {
    let (n1, n2, n3) = (s.w1.len(), s.b1.len(), s.w2.len());
    if slot < n1 {
        &mut s.w1[slot]
    } else if slot < n1 + n2 {
        &mut s.b1[slot - n1]
    } else if slot < n1 + n2 + n3 {
        &mut s.w2[slot - n1 - n2]
    } else {
        &mut s.b2
    }
}

#[test]
fn criterion_05_gradient_fidelity() {
    criterion(5, "gradient fidelity", || {
        let h = 1e-5;
        let rel_err = |a: f64, f: f64| (a - f).abs() / (a.abs() + f.abs()).max(1e-6);

        // Interaction scorer under the R-Drop loss.
        for i in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
            let hidden = [4, 6, 8, 5, 7][i as usize];
            let dropout = [0.0, 0.2, 0.3, 0.5, 0.25][i as usize];
            let alpha = [0.0, 0.5, 1.0, 0.7, 0.3][i as usize];
            let n_cands = 2 + i as usize;
            let mut scorer = InteractionScorer::init(hidden, dropout, &mut rng);
            let rows: Vec<[f64; FEATURE_DIM]> = (0..n_cands)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            let masks = RdropMasks::sample(n_cands, hidden, dropout, &mut rng);
            let (_, grads) = rdrop_grads(&scorer, &rows, &masks, alpha);
            let flat: Vec<f64> = grads
                .w1
                .iter()
                .chain(&grads.b1)
                .chain(&grads.w2)
                .chain(std::iter::once(&grads.b2))
                .copied()
                .collect();
            for slot in 0..scorer_slot_count(&scorer) {
                let orig = *scorer_slot(&mut scorer, slot);
                *scorer_slot(&mut scorer, slot) = orig + h;
                let lp = rdrop_loss(&scorer, &rows, &masks, alpha);
                *scorer_slot(&mut scorer, slot) = orig - h;
                let lm = rdrop_loss(&scorer, &rows, &masks, alpha);
                *scorer_slot(&mut scorer, slot) = orig;
                let fd = (lp - lm) / (2.0 * h);
                let e = rel_err(flat[slot], fd);
                if e >= 1e-3 {
                    return Err(format!(
                        "scorer instance {i} slot {slot}: analytic {} vs fd {fd} (rel {e:.2e})",
                        flat[slot]
                    ));
                }
            }
        }

        // Full list-aware reranker, every tensor group.
        for i in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + i);
            let dropout = [0.0, 0.3, 0.2, 0.4, 0.25][i as usize];
            let alpha = [0.0, 0.0, 0.7, 1.0, 0.5][i as usize];
            let cfg = HlatrConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                max_list_len: 6,
                ff: 10,
                dropout,
                lr: 1e-3,
                epochs: 1,
                seed: 600 + i,
                rdrop_alpha: alpha,
            };
            let mut model = HlatrModel::init(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
            let n = 5;
            let ranks = [1u32, 3, 2, 9, 5]; // rank 9 exercises the clamped row
            let list = RankedList {
                query_id: format!("g{i}"),
                candidates: (0..n)
                    .map(|j| RankedCandidate {
                        passage_id: format!("c{j}"),
                        retrieval_rank: ranks[j],
                        ranking_score: rng.gen_range(0.0..1.0),
                    })
                    .collect(),
                positive: None,
            };
            let n_masks = if i % 2 == 0 { 1 } else { 2 };
            let masks: Vec<HlatrMasks> = (0..n_masks)
                .map(|_| HlatrMasks::sample(cfg.n_layers, n, cfg.d_model, dropout, &mut rng))
                .collect();
            let alpha = if n_masks == 1 { 0.0 } else { alpha };
            let pos = 2;
            let (_, grads) =
                hlatr_grads(&model, &list, &masks, pos, alpha).map_err(|e| e.to_string())?;
            let gflat = grads.flatten();
            let base = model.params.flatten();
            let mut work = base.clone();
            for idx in 0..base.len() {
                work[idx] = base[idx] + h;
                model.params.assign(&work);
                let lp = hlatr_loss(&model, &list, &masks, pos, alpha).map_err(|e| e.to_string())?;
                work[idx] = base[idx] - h;
                model.params.assign(&work);
                let lm = hlatr_loss(&model, &list, &masks, pos, alpha).map_err(|e| e.to_string())?;
                work[idx] = base[idx];
                let fd = (lp - lm) / (2.0 * h);
                let e = rel_err(gflat[idx], fd);
                if e >= 1e-3 {
                    let name = Tensors::spans(&cfg)
                        .into_iter()
                        .find(|(_, r)| r.contains(&idx))
                        .map(|(n, _)| n)
                        .unwrap_or_default();
                    return Err(format!(
                        "hlatr instance {i} param {idx} ({name}): analytic {} vs fd {fd} (rel {e:.2e})",
                        gflat[idx]
                    ));
                }
            }
            model.params.assign(&base);
            // Every tensor group sits inside the checked flat range.
            for (name, range) in Tensors::spans(&cfg) {
                if range.is_empty() || range.end > base.len() {
                    return Err(format!("span {name} outside checked parameters"));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_06_rdrop_degeneracy() {
    criterion(6, "r-drop degeneracy", || {
        // Zero dropout: both passes coincide, the KL term vanishes exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let hidden = 8;
        let n = 5;
        let scorer = InteractionScorer::init(hidden, 0.0, &mut rng);
        let rows: Vec<[f64; FEATURE_DIM]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let masks = RdropMasks::ones(n, hidden);
        let with_alpha = rdrop_loss(&scorer, &rows, &masks, 1.7);
        let without = rdrop_loss(&scorer, &rows, &masks, 0.0);
        if with_alpha.to_bits() != without.to_bits() {
            return Err(format!("KL term not exactly zero: {with_alpha} vs {without}"));
        }
        // And the total equals plain cross-entropy recomputed here, bit for bit.
        let ones = vec![1.0; hidden];
        let z: Vec<f64> = rows.iter().map(|f| scorer.score_with_mask(f, &ones)).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let ce = -(exp[0] / sum).ln();
        if ce.to_bits() != with_alpha.to_bits() {
            return Err(format!("loss {with_alpha} differs from plain CE {ce}"));
        }

        // Uniform logits: initial CE is ln N.
        for n in [2usize, 4, 8] {
            let scorer = InteractionScorer::zeros(4, 0.0);
            let rows: Vec<[f64; FEATURE_DIM]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            let masks = RdropMasks::ones(n, 4);
            let loss = rdrop_loss(&scorer, &rows, &masks, 0.9);
            if (loss - (n as f64).ln()).abs() >= 1e-12 {
                return Err(format!("N={n}: loss {loss} vs ln N {}", (n as f64).ln()));
            }
        }
        Ok(())
    });
}

/// Ten candidates, the positive carrying the strictly largest ranking
/// score; returns shuffled (id, score) pairs plus the positive's id.
fn learnability_pairs(rng: &mut ChaCha8Rng) -> (Vec<(String, f64)>, String) {
    let pos = rng.gen_range(0..10);
    let mut pairs: Vec<(String, f64)> = (0..10)
        .map(|j| {
            let s = if j == pos {
                rng.gen_range(1.05..1.45)
            } else {
                rng.gen_range(0.0..1.0)
            };
            (format!("d{j}"), s)
        })
        .collect();
    pairs.shuffle(rng);
    (pairs, format!("d{pos}"))
}

#[test]
fn criterion_07_hlatr_learnability() {
    criterion(7, "hlatr learnability", || {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(777);

        let train: Vec<RankedList> = (0..500)
            .map(|i| {
                let (pairs, pos) = learnability_pairs(&mut rng);
                RankedList {
                    query_id: format!("t{i}"),
                    candidates: pairs
                        .into_iter()
                        .enumerate()
                        .map(|(r, (id, s))| RankedCandidate {
                            passage_id: id,
                            retrieval_rank: (r + 1) as u32,
                            ranking_score: s,
                        })
                        .collect(),
                    positive: Some(pos),
                }
            })
            .collect();

        // Held-out lists arrive deliberately corrupted: ascending score
        // order puts the positive last in the input ordering.
        let mut qrels = Qrels::new();
        let mut eval_lists = Vec::new();
        for i in 0..100 {
            let (mut pairs, pos) = learnability_pairs(&mut rng);
            pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
            let qid = format!("e{i}");
            qrels.insert(&qid, &pos, 2).map_err(|e| e.to_string())?;
            eval_lists.push(RankedList {
                query_id: qid,
                candidates: pairs
                    .into_iter()
                    .enumerate()
                    .map(|(r, (id, s))| RankedCandidate {
                        passage_id: id,
                        retrieval_rank: (r + 1) as u32,
                        ranking_score: s,
                    })
                    .collect(),
                positive: None,
            });
        }

        let cfg = HlatrConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_list_len: 10,
            ff: 128,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 30,
            seed: 42,
            rdrop_alpha: 0.0,
        };
        let reranked = with_pool(1, || -> Result<_, String> {
            let model = hlatr::train_hlatr(&train, &cfg).map_err(|e| e.to_string())?;
            hlatr::rerank(&model, &eval_lists).map_err(|e| e.to_string())
        })?;

        let input_entries: Vec<RunEntry> = eval_lists
            .iter()
            .flat_map(|l| {
                l.candidates.iter().enumerate().map(|(j, c)| RunEntry {
                    query_id: l.query_id.clone(),
                    doc_id: c.passage_id.clone(),
                    rank: (j + 1) as u32,
                    score: (10 - j) as f64,
                    tag: "input".into(),
                })
            })
            .collect();
        let hlatr_entries =
            eval::lists_to_run(&reranked, ScoreChannel::Hlatr, "hlatr").map_err(|e| e.to_string())?;

        let ndcg_in = eval::ndcg_at_k(&input_entries, &qrels, 10).mean;
        let ndcg_out = eval::ndcg_at_k(&hlatr_entries, &qrels, 10).mean;
        let mrr = eval::mrr_at_k(&hlatr_entries, &qrels, 10, 2).mean;
        if mrr < 0.95 {
            return Err(format!("held-out MRR@10 {mrr:.4} < 0.95"));
        }
        if ndcg_out - ndcg_in < 0.05 {
            return Err(format!(
                "NDCG@10 gain {:.4} (input {ndcg_in:.4} -> {ndcg_out:.4}) < 0.05",
                ndcg_out - ndcg_in
            ));
        }
        let dt = t0.elapsed();
        if dt.as_secs_f64() >= 120.0 {
            return Err(format!("took {dt:?}, limit 2 min"));
        }
        Ok(())
    });
}

/// Scalar-loop re-implementation of the reranker forward pass, written
/// directly from the layer equations.
fn oracle_hlatr_forward(model: &HlatrModel, list: &RankedList) -> Vec<f64> {
    let cfg = &model.config;
    let p = &model.params;
    let (d, nh, ff, lmax) = (cfg.d_model, cfg.n_heads, cfg.ff, cfg.max_list_len);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let eps = 1e-5;
    let n = list.candidates.len();

    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        (0..d).map(|j| g[j] * (x[j] - mean) * inv + b[j]).collect()
    };

    let mut x: Vec<Vec<f64>> = list
        .candidates
        .iter()
        .map(|c| {
            let row = (c.retrieval_rank.max(1) as usize - 1).min(lmax - 1);
            (0..d)
                .map(|j| p.pos_embed[row * d + j] + c.ranking_score * p.w_proj[j] + p.b_proj[j])
                .collect()
        })
        .collect();

    for layer in &p.layers {
        let h1: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &layer.ln1_g, &layer.ln1_b)).collect();
        let proj = |w: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
            h1.iter()
                .map(|r| {
                    (0..d)
                        .map(|c| b[c] + (0..d).map(|j| r[j] * w[j * d + c]).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (
            proj(&layer.wq, &layer.bq),
            proj(&layer.wk, &layer.bk),
            proj(&layer.wv, &layer.bv),
        );
        let mut ctx = vec![vec![0.0; d]; n];
        for head in 0..nh {
            let c0 = head * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|t| (0..dh).map(|c| q[i][c0 + c] * k[t][c0 + c]).sum::<f64>() * scale)
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|&z| (z - mx).exp()).collect();
                let sum: f64 = ex.iter().sum();
                for t in 0..n {
                    let a = ex[t] / sum;
                    for c in 0..dh {
                        ctx[i][c0 + c] += a * v[t][c0 + c];
                    }
                }
            }
        }
        for i in 0..n {
            for c in 0..d {
                let o = layer.bo[c] + (0..d).map(|j| ctx[i][j] * layer.wo[j * d + c]).sum::<f64>();
                x[i][c] += o;
            }
        }
        let h2: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &layer.ln2_g, &layer.ln2_b)).collect();
        for i in 0..n {
            let u: Vec<f64> = (0..ff)
                .map(|f| {
                    layer.ff_b1[f] + (0..d).map(|j| h2[i][j] * layer.ff_w1[j * ff + f]).sum::<f64>()
                })
                .map(|v| v.max(0.0))
                .collect();
            for c in 0..d {
                let o = layer.ff_b2[c] + (0..ff).map(|f| u[f] * layer.ff_w2[f * d + c]).sum::<f64>();
                x[i][c] += o;
            }
        }
    }
    x.iter()
        .map(|r| p.head_b + (0..d).map(|j| r[j] * p.head_w[j]).sum::<f64>())
        .collect()
}

#[test]
fn criterion_08_hlatr_forward_oracle() {
    criterion(8, "hlatr forward oracle", || {
        for seed in 0..5u64 {
            let cfg = HlatrConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                max_list_len: 4,
                ff: 6,
                dropout: 0.0,
                lr: 1e-3,
                epochs: 1,
                seed,
                rdrop_alpha: 0.0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let model = HlatrModel::init(cfg, &mut rng).map_err(|e| e.to_string())?;
            let list = RankedList {
                query_id: "q".into(),
                candidates: vec![
                    RankedCandidate {
                        passage_id: "x".into(),
                        retrieval_rank: 1,
                        ranking_score: 0.7,
                    },
                    RankedCandidate {
                        passage_id: "y".into(),
                        retrieval_rank: 2,
                        ranking_score: 0.2,
                    },
                    RankedCandidate {
                        // Beyond the position table: shares its last row.
                        passage_id: "z".into(),
                        retrieval_rank: 9,
                        ranking_score: 0.9,
                    },
                ],
                positive: None,
            };
            let got = hlatr::forward(&model, &list).map_err(|e| e.to_string())?;
            let want = oracle_hlatr_forward(&model, &list);
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                if (g - w).abs() > 1e-9 {
                    return Err(format!("seed {seed} candidate {i}: {g} vs oracle {w}"));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_09_maxp_correctness() {
    criterion(9, "maxp aggregation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(900);
        let mut entries: Vec<RunEntry> = Vec::new();
        for qi in 0..4 {
            let qid = format!("q{qi}");
            let mut pool: Vec<String> = Vec::new();
            for g in 0..40 {
                for p in 0..10 {
                    pool.push(format!("D{g:02}#{p}"));
                }
            }
            for s in 0..30 {
                pool.push(format!("solo{s:02}"));
            }
            pool.shuffle(&mut rng);
            pool.truncate(250);
            let mut scored: Vec<(String, f64)> = pool
                .into_iter()
                .map(|id| (id, [0.0, 0.25, 0.5, 0.75, 1.0, 1.25][rng.gen_range(0..6)]))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            for (i, (id, s)) in scored.into_iter().enumerate() {
                entries.push(RunEntry {
                    query_id: qid.clone(),
                    doc_id: id,
                    rank: (i + 1) as u32,
                    score: s,
                    tag: "t".into(),
                });
            }
        }

        let got = maxp_aggregate(&entries).map_err(|e| e.to_string())?;

        // Group-by-max oracle with the same parent rule.
        let parent = |id: &str| -> String {
            match id.rsplit_once('#') {
                Some((pre, suf))
                    if !pre.is_empty() && !suf.is_empty() && suf.bytes().all(|b| b.is_ascii_digit()) =>
                {
                    pre.to_string()
                }
                _ => id.to_string(),
            }
        };
        let mut expect: Vec<RunEntry> = Vec::new();
        let mut queries: Vec<String> = entries.iter().map(|e| e.query_id.clone()).collect();
        queries.sort();
        queries.dedup();
        for qid in queries {
            let mut best: BTreeMap<String, f64> = BTreeMap::new();
            for e in entries.iter().filter(|e| e.query_id == qid) {
                let doc = parent(&e.doc_id);
                let cur = best.entry(doc).or_insert(f64::NEG_INFINITY);
                if e.score > *cur {
                    *cur = e.score;
                }
            }
            let mut rows: Vec<(String, f64)> = best.into_iter().collect();
            rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            for (i, (doc, s)) in rows.into_iter().enumerate() {
                expect.push(RunEntry {
                    query_id: qid.clone(),
                    doc_id: doc,
                    rank: (i + 1) as u32,
                    score: s,
                    tag: "t".into(),
                });
            }
        }

        if got.len() != expect.len() {
            return Err(format!("{} rows, oracle {}", got.len(), expect.len()));
        }
        for (g, w) in got.iter().zip(&expect) {
            if g.query_id != w.query_id
                || g.doc_id != w.doc_id
                || g.rank != w.rank
                || g.score.to_bits() != w.score.to_bits()
            {
                return Err(format!("row differs: {g:?} vs {w:?}"));
            }
        }
        Ok(())
    });
}

fn bundled_config() -> PipelineConfig {
    let root = workspace_root();
    let mut cfg = PipelineConfig::default();
    cfg.data.passages = root.join("data/passages.jsonl").to_string_lossy().into_owned();
    cfg.data.queries = root.join("data/queries.tsv").to_string_lossy().into_owned();
    cfg.data.qrels = root.join("data/qrels.txt").to_string_lossy().into_owned();
    cfg.stages.sparse = true;
    cfg.stages.impact = true;
    cfg.stages.dense = true;
    cfg.stages.fuse = true;
    cfg.stages.rerank = true;
    cfg.stages.hlatr = true;
    cfg.stages.maxp = true;
    cfg.stages.eval = true;
    cfg
}

fn dir_snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let run_file = name.starts_with("run.") && name.ends_with(".trec");
        if run_file || name == "metrics.tsv" {
            out.insert(name, fs::read(entry.path()).map_err(|e| e.to_string())?);
        }
    }
    if out.is_empty() {
        return Err(format!("no run files under {}", dir.display()));
    }
    Ok(out)
}

#[test]
fn criterion_10_end_to_end_determinism() {
    criterion(10, "end-to-end determinism", || {
        let cfg = bundled_config();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (dir_a, dir_b, dir_c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
        with_pool(4, || run_pipeline(&cfg, &dir_a)).map_err(|e| e.to_string())?;
        with_pool(4, || run_pipeline(&cfg, &dir_b)).map_err(|e| e.to_string())?;
        with_pool(1, || run_pipeline(&cfg, &dir_c)).map_err(|e| e.to_string())?;
        let snap_a = dir_snapshot(&dir_a)?;
        if snap_a != dir_snapshot(&dir_b)? {
            return Err("repeated run with the same seed differs".into());
        }
        if snap_a != dir_snapshot(&dir_c)? {
            return Err("1-thread and 4-thread runs differ".into());
        }

        // Scale check: 10k passages, 50 queries, one core, under a minute.
        let mut synth = SynthConfig::default();
        synth.n_docs = 10_000;
        synth.n_queries = 50;
        let data = generate_synthetic(&synth).map_err(|e| e.to_string())?;
        let data_dir = tmp.path().join("big");
        write_synthetic(&data, &data_dir).map_err(|e| e.to_string())?;
        let mut big = bundled_config();
        big.data.passages = data_dir.join("passages.jsonl").to_string_lossy().into_owned();
        big.data.queries = data_dir.join("queries.tsv").to_string_lossy().into_owned();
        big.data.qrels = data_dir.join("qrels.txt").to_string_lossy().into_owned();
        let t0 = Instant::now();
        with_pool(1, || run_pipeline(&big, tmp.path().join("big_out"))).map_err(|e| e.to_string())?;
        let dt = t0.elapsed();
        if dt.as_secs_f64() >= 60.0 {
            return Err(format!("10k/50 pipeline took {dt:?}, limit 60 s"));
        }
        Ok(())
    });
}

#[test]
fn criterion_11_format_fidelity() {
    criterion(11, "format fidelity", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

        // Run files survive a write/read cycle for awkward doubles.
        let mut entries = Vec::new();
        let scores = [6.02214076e23, 1.0 / 3.0, 1e-7, 0.0, -2.25];
        for (i, &s) in scores.iter().enumerate() {
            entries.push(RunEntry {
                query_id: "q1".into(),
                doc_id: format!("d{i}"),
                rank: (i + 1) as u32,
                score: s,
                tag: "sys".into(),
            });
        }
        let run_path = tmp.path().join("run.trec");
        eval::write_run(&entries, &run_path).map_err(|e| e.to_string())?;
        let back = eval::read_run(&run_path).map_err(|e| e.to_string())?;
        if back.len() != entries.len() {
            return Err("round-trip changed row count".into());
        }
        for (a, b) in entries.iter().zip(&back) {
            if a.query_id != b.query_id
                || a.doc_id != b.doc_id
                || a.rank != b.rank
                || a.score.to_bits() != b.score.to_bits()
                || a.tag != b.tag
            {
                return Err(format!("round-trip mutated a row: {a:?} vs {b:?}"));
            }
        }
        let run_path2 = tmp.path().join("run2.trec");
        eval::write_run(&back, &run_path2).map_err(|e| e.to_string())?;
        if fs::read(&run_path).unwrap() != fs::read(&run_path2).unwrap() {
            return Err("second write not byte-identical".into());
        }

        // Qrels survive parsing and canonical re-serialization.
        let qrels_path = tmp.path().join("qrels.txt");
        fs::write(&qrels_path, "q1 0 d1 2\nq1\t0\td2\t0\nq2 0 d9 3\n").unwrap();
        let qrels = cascade::corpus::load_qrels(&qrels_path).map_err(|e| e.to_string())?;
        let mut canonical = String::new();
        for qid in qrels.query_ids() {
            for (doc, grade) in qrels.judgments(qid).unwrap() {
                canonical.push_str(&format!("{qid} 0 {doc} {grade}\n"));
            }
        }
        let qrels_path2 = tmp.path().join("qrels2.txt");
        fs::write(&qrels_path2, &canonical).unwrap();
        let qrels2 = cascade::corpus::load_qrels(&qrels_path2).map_err(|e| e.to_string())?;
        for (qid, doc, want) in [("q1", "d1", 2u32), ("q1", "d2", 0), ("q2", "d9", 3)] {
            if qrels2.grade(qid, doc) != Some(want) {
                return Err(format!("qrels round-trip lost {qid}/{doc}"));
            }
        }

        // An externally produced run evaluates as-is.
        let external = "\
1 Q0 DOC-003 1 14.8928 indri\n\
1 Q0 DOC-001 2 13.5099 indri\n\
1 Q0 DOC-404 3 12.0332 indri\n\
2 Q0 DOC-009 1 22.7516 indri\n\
2 Q0 DOC-005 2 18.3021 indri\n";
        let ext_path = tmp.path().join("external.trec");
        fs::write(&ext_path, external).unwrap();
        let ext_run = eval::read_run(&ext_path).map_err(|e| e.to_string())?;
        let mut ext_qrels = Qrels::new();
        for (q, d, g) in [("1", "DOC-001", 2), ("1", "DOC-003", 0), ("2", "DOC-005", 3)] {
            ext_qrels.insert(q, d, g).map_err(|e| e.to_string())?;
        }
        let judged: BTreeMap<String, BTreeMap<String, u32>> = ext_qrels
            .query_ids()
            .map(|q| (q.to_string(), ext_qrels.judgments(q).unwrap().clone()))
            .collect();
        let ranked: BTreeMap<&str, Vec<&str>> = [
            ("1", vec!["DOC-003", "DOC-001", "DOC-404"]),
            ("2", vec!["DOC-009", "DOC-005"]),
        ]
        .into_iter()
        .collect();
        let reports = [
            ("ndcg", eval::ndcg_at_k(&ext_run, &ext_qrels, 10)),
            ("ap", eval::average_precision(&ext_run, &ext_qrels, 2)),
        ];
        for (name, rep) in &reports {
            for (qid, j) in &judged {
                let want = match *name {
                    "ndcg" => oracle_ndcg(&ranked[qid.as_str()], j, 10),
                    _ => oracle_ap(&ranked[qid.as_str()], j, 2),
                };
                match (want, rep.per_query.get(qid)) {
                    (Some(w), Some(&got)) => {
                        if (got - w).abs() > 1e-12 {
                            return Err(format!("external {name} {qid}: {got} vs {w}"));
                        }
                    }
                    (Some(_), None) => return Err(format!("external {name} {qid} missing")),
                    (None, Some(_)) => {
                        return Err(format!("external {name} {qid} should be excluded"))
                    }
                    (None, None) => {}
                }
            }
        }
        Ok(())
    });
}
