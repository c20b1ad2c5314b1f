//! Candidate lists, per-query score normalization, and weighted ensembling.
//!
//! Every retriever and ranking stage produces a [`CandidateList`] per query.
//! Fusion normalizes each list to a common scale and sums the scores with
//! non-negative weights; passages absent from a list contribute zero.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One retrieved passage inside a per-query candidate list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub passage_id: String,
    pub retrieval_score: f64,
    /// 1-based rank in the list that produced this candidate.
    pub retrieval_rank: u32,
    pub source_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hlatr_score: Option<f64>,
}

/// A ranked list of unique candidates for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

/// Sort by score descending, passage id ascending on ties. This is the one
/// ordering rule used by every stage.
pub(crate) fn sort_scored(entries: &mut [(String, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

impl CandidateList {
    /// Build a list from (passage_id, score) pairs: applies the tie rule,
    /// truncates to `k`, and assigns consecutive 1-based ranks.
    pub fn from_scored(
        query_id: &str,
        source_tag: &str,
        mut entries: Vec<(String, f64)>,
        k: usize,
    ) -> Self {
        sort_scored(&mut entries);
        entries.truncate(k);
        let candidates = entries
            .into_iter()
            .enumerate()
            .map(|(i, (passage_id, score))| Candidate {
                passage_id,
                retrieval_score: score,
                retrieval_rank: (i + 1) as u32,
                source_tag: source_tag.to_owned(),
                ranking_score: None,
                hlatr_score: None,
            })
            .collect();
        CandidateList {
            query_id: query_id.to_owned(),
            candidates,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Check rank consecutiveness, id uniqueness, and the sort order.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, c) in self.candidates.iter().enumerate() {
            if c.retrieval_rank != (i + 1) as u32 {
                return Err(Error::invalid(format!(
                    "candidate list for query `{}`: rank {} at position {}",
                    self.query_id,
                    c.retrieval_rank,
                    i + 1
                )));
            }
            if !seen.insert(c.passage_id.as_str()) {
                return Err(Error::DuplicateId {
                    id: c.passage_id.clone(),
                    context: format!("candidate list for query `{}`", self.query_id),
                });
            }
            if i > 0 {
                let prev = &self.candidates[i - 1];
                let ordered = prev.retrieval_score > c.retrieval_score
                    || (prev.retrieval_score == c.retrieval_score
                        && prev.passage_id < c.passage_id);
                if !ordered {
                    return Err(Error::invalid(format!(
                        "candidate list for query `{}` out of order at rank {}",
                        self.query_id,
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-query score normalization applied before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    MinMax,
    ZScore,
    None,
}

impl FromStr for NormMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormMethod::MinMax),
            "zscore" => Ok(NormMethod::ZScore),
            "none" => Ok(NormMethod::None),
            other => Err(Error::invalid(format!(
                "unknown normalization `{other}` (expected minmax, zscore, or none)"
            ))),
        }
    }
}

/// Affine map to [0, 1]; a constant list maps to all 1.0.
pub(crate) fn minmax(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![1.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / (max - min)).collect()
}

/// Center to mean 0 and scale by the population standard deviation; a
/// constant list maps to all 0.0.
pub(crate) fn zscore(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; scores.len()];
    }
    let sd = var.sqrt();
    scores.iter().map(|s| (s - mean) / sd).collect()
}

/// Normalize the retrieval scores of a list; ordering is unchanged.
pub fn normalize_scores(list: &CandidateList, method: NormMethod) -> Result<CandidateList> {
    if list.candidates.is_empty() {
        return Err(Error::invalid(format!(
            "cannot normalize empty candidate list for query `{}`",
            list.query_id
        )));
    }
    let scores: Vec<f64> = list.candidates.iter().map(|c| c.retrieval_score).collect();
    let normed = match method {
        NormMethod::MinMax => minmax(&scores),
        NormMethod::ZScore => zscore(&scores),
        NormMethod::None => scores,
    };
    let mut out = list.clone();
    for (c, s) in out.candidates.iter_mut().zip(normed) {
        c.retrieval_score = s;
    }
    Ok(out)
}

/// Weighted linear fusion of normalized lists for one query.
///
/// Fused score of a passage is the weight-dot over its per-list scores, with
/// 0 for lists it is absent from. Output is top-`k` under the global tie
/// rule, re-ranked from 1, tagged `fused`.
pub fn weighted_fuse(lists: &[CandidateList], weights: &[f64], k: usize) -> Result<CandidateList> {
    if lists.is_empty() || lists.len() != weights.len() {
        return Err(Error::invalid(format!(
            "fusion needs equally many lists and weights, got {} and {}",
            lists.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("fusion weights must be finite and >= 0"));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::invalid("fusion weights must not all be zero"));
    }
    let query_id = &lists[0].query_id;
    if lists.iter().any(|l| &l.query_id != query_id) {
        return Err(Error::invalid(
            "fusion inputs must belong to the same query",
        ));
    }
    let mut fused: BTreeMap<&str, f64> = BTreeMap::new();
    for (list, &w) in lists.iter().zip(weights) {
        for c in &list.candidates {
            *fused.entry(c.passage_id.as_str()).or_insert(0.0) += w * c.retrieval_score;
        }
    }
    let entries: Vec<(String, f64)> = fused.into_iter().map(|(id, s)| (id.to_owned(), s)).collect();
    Ok(CandidateList::from_scored(query_id, "fused", entries, k))
}
