//! TREC-compatible run files and rank-quality metrics.
//!
//! NDCG uses linear gain (the `ndcg_cut` convention), so graded judgments
//! contribute their grade directly; AP, recall, and MRR binarize at a
//! configurable grade threshold, 2 by default. Queries whose judgments
//! cannot support a metric (no positive grade) are excluded from the mean
//! and counted; qualifying queries missing from the run score 0.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};
use crate::fusion::CandidateList;

pub const DEFAULT_REL_THRESHOLD: u32 = 2;

/// One row of a TREC run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    /// 1-based rank within the query.
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// Group run entries per query, ordered by rank.
pub fn group_by_query(entries: &[RunEntry]) -> BTreeMap<&str, Vec<&RunEntry>> {
    let mut grouped: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in entries {
        grouped.entry(e.query_id.as_str()).or_default().push(e);
    }
    for list in grouped.values_mut() {
        list.sort_by(|a, b| {
            a.rank
                .cmp(&b.rank)
                .then_with(|| b.score.total_cmp(&a.score))
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
    }
    grouped
}

fn validate_run(entries: &[RunEntry]) -> Result<()> {
    for (qid, list) in group_by_query(entries) {
        let mut seen = HashSet::new();
        for (i, e) in list.iter().enumerate() {
            if e.rank != (i + 1) as u32 {
                return Err(Error::invalid(format!(
                    "run for query `{qid}`: rank {} where {} expected",
                    e.rank,
                    i + 1
                )));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::DuplicateId {
                    id: e.doc_id.clone(),
                    context: format!("run for query `{qid}`"),
                });
            }
            if i > 0 && list[i - 1].score < e.score {
                return Err(Error::invalid(format!(
                    "run for query `{qid}`: score increases at rank {}",
                    e.rank
                )));
            }
        }
    }
    Ok(())
}

/// Write the six-column TREC format `query_id Q0 doc_id rank score tag`.
/// Scores use the shortest decimal form that parses back to the same f64,
/// so written runs read back bit-exact. Rejects rank gaps, duplicate docs,
/// and score/rank disagreement.
pub fn write_run(entries: &[RunEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    validate_run(entries)?;
    let mut out = String::new();
    for (_, list) in group_by_query(entries) {
        for e in list {
            writeln!(
                out,
                "{} Q0 {} {} {} {}",
                e.query_id, e.doc_id, e.rank, e.score, e.tag
            )
            .unwrap();
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a TREC run, tolerating arbitrary whitespace between columns.
pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RunEntry>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                line_num,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let rank: u32 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, line_num, format!("bad rank `{}`", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(path, line_num, format!("bad score `{}`", fields[4])))?;
        entries.push(RunEntry {
            query_id: fields[0].to_owned(),
            doc_id: fields[2].to_owned(),
            rank,
            score,
            tag: fields[5].to_owned(),
        });
    }
    Ok(entries)
}

/// Which per-candidate score a run should carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreChannel {
    Retrieval,
    Ranking,
    Hlatr,
}

/// Flatten candidate lists into run entries, re-ranking by the chosen score
/// channel under the global tie rule.
pub fn lists_to_run(
    lists: &[CandidateList],
    channel: ScoreChannel,
    tag: &str,
) -> Result<Vec<RunEntry>> {
    let mut entries = Vec::new();
    for list in lists {
        let mut scored: Vec<(String, f64)> = Vec::with_capacity(list.len());
        for c in &list.candidates {
            let score = match channel {
                ScoreChannel::Retrieval => Some(c.retrieval_score),
                ScoreChannel::Ranking => c.ranking_score,
                ScoreChannel::Hlatr => c.hlatr_score,
            };
            let score = score.ok_or_else(|| Error::MissingArtifact {
                stage: tag.to_owned(),
                what: format!(
                    "score for passage `{}` of query `{}`",
                    c.passage_id, list.query_id
                ),
            })?;
            scored.push((c.passage_id.clone(), score));
        }
        crate::fusion::sort_scored(&mut scored);
        for (i, (doc_id, score)) in scored.into_iter().enumerate() {
            entries.push(RunEntry {
                query_id: list.query_id.clone(),
                doc_id,
                rank: (i + 1) as u32,
                score,
                tag: tag.to_owned(),
            });
        }
    }
    Ok(entries)
}

/// Reassemble candidate lists from run entries, one list per query in
/// query-id order, ranks renumbered from the entries' recorded order.
pub fn run_to_lists(entries: &[RunEntry]) -> Vec<CandidateList> {
    group_by_query(entries)
        .into_iter()
        .map(|(query_id, rows)| CandidateList {
            query_id: query_id.to_string(),
            candidates: rows
                .iter()
                .enumerate()
                .map(|(i, r)| crate::fusion::Candidate {
                    passage_id: r.doc_id.clone(),
                    retrieval_score: r.score,
                    retrieval_rank: (i + 1) as u32,
                    source_tag: r.tag.clone(),
                    ranking_score: None,
                    hlatr_score: None,
                })
                .collect(),
        })
        .collect()
}

/// Per-query metric values plus their mean over evaluated queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Queries contributing to the mean.
    pub evaluated: usize,
    /// Qrels queries skipped because no judgment can support the metric.
    pub excluded: usize,
}

impl MetricReport {
    fn from_per_query(per_query: BTreeMap<String, f64>, excluded: usize) -> Self {
        let evaluated = per_query.len();
        let mean = if evaluated == 0 {
            0.0
        } else {
            per_query.values().sum::<f64>() / evaluated as f64
        };
        MetricReport {
            per_query,
            mean,
            evaluated,
            excluded,
        }
    }
}

fn ranked_docs<'a>(
    grouped: &'a BTreeMap<&str, Vec<&RunEntry>>,
    query_id: &str,
) -> Vec<&'a str> {
    grouped
        .get(query_id)
        .map(|list| list.iter().map(|e| e.doc_id.as_str()).collect())
        .unwrap_or_default()
}

/// NDCG@k with linear gain: DCG = Σ grade_i / log2(i+1) over the top `k`,
/// normalized by the DCG of the grade-sorted ideal ordering at the same
/// cutoff. Queries with no positive grade are excluded.
pub fn ndcg_at_k(run: &[RunEntry], qrels: &Qrels, k: usize) -> MetricReport {
    let grouped = group_by_query(run);
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for qid in qrels.query_ids() {
        let judged = qrels.judgments(qid).unwrap();
        let mut grades: Vec<u32> = judged.values().copied().collect();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
            .sum();
        if idcg == 0.0 {
            excluded += 1;
            continue;
        }
        let dcg: f64 = ranked_docs(&grouped, qid)
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, doc)| {
                let g = qrels.grade(qid, doc).unwrap_or(0) as f64;
                g / ((i + 2) as f64).log2()
            })
            .sum();
        per_query.insert(qid.to_owned(), dcg / idcg);
    }
    MetricReport::from_per_query(per_query, excluded)
}

fn relevant_set<'q>(qrels: &'q Qrels, qid: &str, threshold: u32) -> Vec<&'q str> {
    qrels
        .judgments(qid)
        .map(|j| {
            j.iter()
                .filter(|&(_, &g)| g >= threshold)
                .map(|(d, _)| d.as_str())
                .collect()
        })
        .unwrap_or_default()
}

/// Full-depth average precision: mean over all relevant docs of the
/// precision at each relevant hit; relevant docs never retrieved contribute
/// zero through the denominator.
pub fn average_precision(run: &[RunEntry], qrels: &Qrels, rel_threshold: u32) -> MetricReport {
    let grouped = group_by_query(run);
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for qid in qrels.query_ids() {
        let relevant = relevant_set(qrels, qid, rel_threshold);
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let rel: HashSet<&str> = relevant.iter().copied().collect();
        let mut hits = 0u32;
        let mut sum = 0.0;
        for (i, doc) in ranked_docs(&grouped, qid).iter().enumerate() {
            if rel.contains(doc) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        per_query.insert(qid.to_owned(), sum / relevant.len() as f64);
    }
    MetricReport::from_per_query(per_query, excluded)
}

/// R@k: fraction of the relevant docs found in the top `k`.
pub fn recall_at_k(run: &[RunEntry], qrels: &Qrels, k: usize, rel_threshold: u32) -> MetricReport {
    let grouped = group_by_query(run);
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for qid in qrels.query_ids() {
        let relevant = relevant_set(qrels, qid, rel_threshold);
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let rel: HashSet<&str> = relevant.iter().copied().collect();
        let found = ranked_docs(&grouped, qid)
            .iter()
            .take(k)
            .filter(|d| rel.contains(*d))
            .count();
        per_query.insert(qid.to_owned(), found as f64 / relevant.len() as f64);
    }
    MetricReport::from_per_query(per_query, excluded)
}

/// MRR@k: reciprocal rank of the first relevant doc within the top `k`,
/// else 0.
pub fn mrr_at_k(run: &[RunEntry], qrels: &Qrels, k: usize, rel_threshold: u32) -> MetricReport {
    let grouped = group_by_query(run);
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for qid in qrels.query_ids() {
        let relevant = relevant_set(qrels, qid, rel_threshold);
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let rel: HashSet<&str> = relevant.iter().copied().collect();
        let rr = ranked_docs(&grouped, qid)
            .iter()
            .take(k)
            .position(|d| rel.contains(d))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64);
        per_query.insert(qid.to_owned(), rr);
    }
    MetricReport::from_per_query(per_query, excluded)
}
