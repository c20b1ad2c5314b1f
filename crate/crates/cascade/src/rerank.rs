//! The ranking stage: retrieval-driven negative sampling and a trainable
//! interaction scorer with R-Drop consistency regularization.
//!
//! The scorer is a two-layer perceptron over per-(query, passage)
//! interaction features. It keeps the role and training recipe of the heavy
//! single-tower rankers it stands in for: candidates come from retrieval,
//! negatives are sampled from the retrieved non-relevant pool, and the loss
//! is a list-wise softmax cross entropy regularized by the symmetric KL
//! between two dropout-perturbed forward passes. Externally produced scores
//! enter through score files and are ensembled with the same normalize-and-
//! sum arithmetic the fusion stage uses.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Qrels, Query};
use crate::dense::{Embedder, VectorStore};
use crate::error::{Error, Result};
use crate::fusion::CandidateList;
use crate::sparse::{bm25_score, ImpactIndex, InvertedIndex};

pub const SCORER_FORMAT_VERSION: u32 = 1;

/// Feature count and order; see [`FeatureContext::features`].
pub const FEATURE_DIM: usize = 7;

/// Fixed-order interaction features:
/// 0 bm25 score, 1 impact score, 2 dense cosine, 3 unique-term overlap
/// |q∩p|/|q|, 4 reciprocal retrieval rank, 5 ln(1+query tokens),
/// 6 ln(1+passage tokens).
pub type FeatureVector = [f64; FEATURE_DIM];

/// Shared retrieval structures the features are computed from.
pub struct FeatureContext<'a> {
    pub inverted: &'a InvertedIndex,
    pub impact: &'a ImpactIndex,
    pub store: &'a VectorStore,
    pub embedder: Embedder,
    pub k1: f64,
    pub b: f64,
}

/// Query-side values computed once and reused across that query's passages.
pub struct PreparedQuery {
    tokens: Vec<String>,
    unique: BTreeSet<String>,
    weights: BTreeMap<String, f64>,
    vector: Vec<f32>,
    log_len: f64,
}

impl<'a> FeatureContext<'a> {
    pub fn prepare(&self, query: &Query) -> Result<PreparedQuery> {
        let tokens = tokenize(&query.text);
        if tokens.is_empty() {
            return Err(Error::invalid(format!(
                "query `{}` has no tokens to featurize",
                query.query_id
            )));
        }
        let unique: BTreeSet<String> = tokens.iter().cloned().collect();
        let weights = unique.iter().map(|t| (t.clone(), 1.0)).collect();
        let vector = self.embedder.embed(&query.text)?;
        let log_len = (1.0 + tokens.len() as f64).ln();
        Ok(PreparedQuery {
            tokens,
            unique,
            weights,
            vector,
            log_len,
        })
    }

    /// Compute the feature vector for one candidate passage at the given
    /// 1-based retrieval rank.
    pub fn features(
        &self,
        query: &PreparedQuery,
        passage_id: &str,
        retrieval_rank: u32,
    ) -> Result<FeatureVector> {
        let ord_inv = self.inverted.id_table().ordinal(passage_id).ok_or_else(|| {
            Error::UnknownId {
                id: passage_id.to_owned(),
                context: "inverted index".into(),
            }
        })?;
        let ord_imp = self.impact.id_table().ordinal(passage_id).ok_or_else(|| {
            Error::UnknownId {
                id: passage_id.to_owned(),
                context: "impact index".into(),
            }
        })?;
        let ord_vec = self.store.id_table().ordinal(passage_id).ok_or_else(|| {
            Error::UnknownId {
                id: passage_id.to_owned(),
                context: "vector store".into(),
            }
        })?;
        let bm25 = bm25_score(self.inverted, &query.tokens, ord_inv, self.k1, self.b);
        let impact = self.impact.score_one(ord_imp, &query.weights);
        let cosine: f64 = self
            .store
            .vector(ord_vec)
            .iter()
            .zip(&query.vector)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let overlap = query
            .unique
            .iter()
            .filter(|t| self.inverted.tf_of(t, ord_inv) > 0)
            .count() as f64
            / query.unique.len() as f64;
        let features: FeatureVector = [
            bm25,
            impact,
            cosine,
            overlap,
            1.0 / retrieval_rank as f64,
            query.log_len,
            (1.0 + self.inverted.doc_length(ord_inv) as f64).ln(),
        ];
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature for passage `{passage_id}`"
            )));
        }
        Ok(features)
    }
}

/// One list-wise training instance: the positive first, then its sampled
/// negatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub positive_features: FeatureVector,
    pub negative_features: Vec<FeatureVector>,
}

impl TrainingExample {
    /// Feature rows with the positive at index 0.
    pub fn feature_rows(&self) -> Vec<FeatureVector> {
        let mut rows = Vec::with_capacity(1 + self.negative_features.len());
        rows.push(self.positive_features);
        rows.extend(self.negative_features.iter().copied());
        rows
    }
}

/// Build training examples from retrieval output: per query, the positive is
/// the highest-ranked candidate with grade ≥ `rel_threshold`, negatives are
/// `n_neg` seeded uniform draws (without replacement) from the rest of the
/// list. Queries without a relevant candidate are skipped and counted.
pub fn sample_negatives(
    lists: &[CandidateList],
    qrels: &Qrels,
    n_neg: usize,
    seed: u64,
    rel_threshold: u32,
    mut features: impl FnMut(&str, &str, u32) -> Result<FeatureVector>,
) -> Result<(Vec<TrainingExample>, usize)> {
    if n_neg < 1 {
        return Err(Error::invalid("n_neg must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for list in lists {
        let grade = |pid: &str| qrels.grade(&list.query_id, pid).unwrap_or(0);
        let positive = list
            .candidates
            .iter()
            .find(|c| grade(&c.passage_id) >= rel_threshold);
        let Some(positive) = positive else {
            skipped += 1;
            continue;
        };
        let pool: Vec<_> = list
            .candidates
            .iter()
            .filter(|c| grade(&c.passage_id) < rel_threshold)
            .collect();
        if pool.is_empty() {
            skipped += 1;
            continue;
        }
        let negatives: Vec<_> = pool.choose_multiple(&mut rng, n_neg).copied().collect();
        let positive_features =
            features(&list.query_id, &positive.passage_id, positive.retrieval_rank)?;
        let negative_features = negatives
            .iter()
            .map(|c| features(&list.query_id, &c.passage_id, c.retrieval_rank))
            .collect::<Result<Vec<_>>>()?;
        examples.push(TrainingExample {
            query_id: list.query_id.clone(),
            positive: positive.passage_id.clone(),
            negatives: negatives.iter().map(|c| c.passage_id.clone()).collect(),
            positive_features,
            negative_features,
        });
    }
    Ok((examples, skipped))
}

/// Two-layer ReLU perceptron scorer with inverted dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionScorer {
    version: u32,
    pub hidden: usize,
    pub dropout: f64,
    /// H×F, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// 1×H.
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl InteractionScorer {
    pub fn zeros(hidden: usize, dropout: f64) -> Self {
        InteractionScorer {
            version: SCORER_FORMAT_VERSION,
            hidden,
            dropout,
            w1: vec![0.0; hidden * FEATURE_DIM],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(hidden: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let mut s = Self::zeros(hidden, dropout);
        let a1 = (6.0 / (FEATURE_DIM + hidden) as f64).sqrt();
        for w in &mut s.w1 {
            *w = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        for w in &mut s.w2 {
            *w = rng.gen_range(-a2..a2);
        }
        s
    }

    /// Pre-activation hidden layer.
    fn hidden_pre(&self, f: &FeatureVector) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
                row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.b1[j]
            })
            .collect()
    }

    /// Logit for one feature vector given per-unit dropout scale factors
    /// (0 for dropped units, 1/(1−rate) for survivors, all 1 for no
    /// dropout).
    pub fn score_with_mask(&self, f: &FeatureVector, mask: &[f64]) -> f64 {
        let pre = self.hidden_pre(f);
        pre.iter()
            .zip(mask)
            .zip(&self.w2)
            .map(|((&a, &m), &w)| w * a.max(0.0) * m)
            .sum::<f64>()
            + self.b2
    }

    /// Logit with dropout sampled from `rng` when `dropout_active`.
    pub fn score(&self, f: &FeatureVector, dropout_active: bool, rng: &mut impl Rng) -> f64 {
        if dropout_active && self.dropout > 0.0 {
            let mask = sample_mask(self.hidden, self.dropout, rng);
            self.score_with_mask(f, &mask)
        } else {
            self.score_with_mask(f, &vec![1.0; self.hidden])
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: InteractionScorer = serde_json::from_str(&content).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if s.version != SCORER_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "scorer format version {}, this build reads {SCORER_FORMAT_VERSION}",
                    s.version
                ),
            });
        }
        Ok(s)
    }
}

/// Inverted-dropout scale factors for one hidden layer.
pub fn sample_mask(hidden: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..hidden)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect()
}

/// Per-pass, per-candidate dropout masks for one R-Drop step.
#[derive(Debug, Clone)]
pub struct RdropMasks {
    /// `[pass][candidate][hidden unit]` scale factors.
    pub passes: [Vec<Vec<f64>>; 2],
}

impl RdropMasks {
    pub fn ones(n_candidates: usize, hidden: usize) -> Self {
        let pass = vec![vec![1.0; hidden]; n_candidates];
        RdropMasks {
            passes: [pass.clone(), pass],
        }
    }

    pub fn sample(n_candidates: usize, hidden: usize, rate: f64, rng: &mut impl Rng) -> Self {
        if rate == 0.0 {
            return Self::ones(n_candidates, hidden);
        }
        let mut draw = || {
            (0..n_candidates)
                .map(|_| sample_mask(hidden, rate, rng))
                .collect::<Vec<_>>()
        };
        RdropMasks {
            passes: [draw(), draw()],
        }
    }
}

/// Gradients with the same shapes as the scorer parameters.
#[derive(Debug, Clone)]
pub struct ScorerGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
        .sum()
}

/// The R-Drop loss for one example under fixed dropout masks: the candidate
/// at index 0 is the positive; z¹, z² are the two passes' logit vectors;
/// loss = ½(CE(p¹)+CE(p²)) + α·½(KL(p¹‖p²)+KL(p²‖p¹)).
pub fn rdrop_loss(
    scorer: &InteractionScorer,
    rows: &[FeatureVector],
    masks: &RdropMasks,
    alpha: f64,
) -> f64 {
    let z: [Vec<f64>; 2] = [0, 1].map(|pass| {
        rows.iter()
            .zip(&masks.passes[pass])
            .map(|(f, m)| scorer.score_with_mask(f, m))
            .collect()
    });
    let p = softmax(&z[0]);
    let q = softmax(&z[1]);
    let ce = -0.5 * (p[0].ln() + q[0].ln());
    ce + alpha * 0.5 * (kl(&p, &q) + kl(&q, &p))
}

/// Exact gradients of [`rdrop_loss`] by backpropagation through both
/// passes.
pub fn rdrop_grads(
    scorer: &InteractionScorer,
    rows: &[FeatureVector],
    masks: &RdropMasks,
    alpha: f64,
) -> (f64, ScorerGrads) {
    let n = rows.len();
    let h = scorer.hidden;
    // Forward, keeping pre-activations per pass and candidate.
    let pre: Vec<Vec<f64>> = rows.iter().map(|f| scorer.hidden_pre(f)).collect();
    let mut z = [vec![0.0; n], vec![0.0; n]];
    for pass in 0..2 {
        for c in 0..n {
            let m = &masks.passes[pass][c];
            z[pass][c] = pre[c]
                .iter()
                .zip(m)
                .zip(&scorer.w2)
                .map(|((&a, &mk), &w)| w * a.max(0.0) * mk)
                .sum::<f64>()
                + scorer.b2;
        }
    }
    let p = softmax(&z[0]);
    let q = softmax(&z[1]);
    let kl_pq = kl(&p, &q);
    let kl_qp = kl(&q, &p);
    let loss = -0.5 * (p[0].ln() + q[0].ln()) + alpha * 0.5 * (kl_pq + kl_qp);

    // dL/dz per pass: the CE half plus the symmetric-KL half.
    let mut dz = [vec![0.0; n], vec![0.0; n]];
    for c in 0..n {
        let y = if c == 0 { 1.0 } else { 0.0 };
        dz[0][c] = 0.5 * (p[c] - y)
            + alpha * 0.5 * (p[c] * ((p[c] / q[c]).ln() - kl_pq) + (p[c] - q[c]));
        dz[1][c] = 0.5 * (q[c] - y)
            + alpha * 0.5 * (q[c] * ((q[c] / p[c]).ln() - kl_qp) + (q[c] - p[c]));
    }

    let mut g = ScorerGrads {
        w1: vec![0.0; h * FEATURE_DIM],
        b1: vec![0.0; h],
        w2: vec![0.0; h],
        b2: 0.0,
    };
    for pass in 0..2 {
        for c in 0..n {
            let d = dz[pass][c];
            if d == 0.0 {
                continue;
            }
            g.b2 += d;
            let m = &masks.passes[pass][c];
            for j in 0..h {
                let act = pre[c][j].max(0.0) * m[j];
                g.w2[j] += d * act;
                if pre[c][j] > 0.0 && m[j] != 0.0 {
                    let da = d * scorer.w2[j] * m[j];
                    g.b1[j] += da;
                    for (i, &x) in rows[c].iter().enumerate() {
                        g.w1[j * FEATURE_DIM + i] += da * x;
                    }
                }
            }
        }
    }
    (loss, g)
}

/// Training hyperparameters; `hidden` sizes freshly initialized scorers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankTrainConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub rdrop_alpha: f64,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        RerankTrainConfig {
            hidden: 16,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 20,
            rdrop_alpha: 1.0,
            seed: 42,
        }
    }
}

pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Train a scorer from scratch: per example, two dropout passes, the R-Drop
/// loss, exact backprop, one Adam step. Fully seeded; single-threaded.
pub fn train_interaction_scorer(
    examples: &[TrainingExample],
    config: &RerankTrainConfig,
) -> Result<InteractionScorer> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if config.lr <= 0.0 || config.rdrop_alpha < 0.0 {
        return Err(Error::invalid("lr must be > 0 and rdrop_alpha >= 0"));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::invalid("dropout must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scorer = InteractionScorer::init(config.hidden, config.dropout, &mut rng);
    let mut opt = Adam::new(scorer.w1.len() + scorer.b1.len() + scorer.w2.len() + 1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            let rows = ex.feature_rows();
            let masks = RdropMasks::sample(rows.len(), config.hidden, config.dropout, &mut rng);
            let (loss, g) = rdrop_grads(&scorer, &rows, &masks, config.rdrop_alpha);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!(
                        "interaction scorer epoch {epoch}, query `{}`",
                        ex.query_id
                    ),
                });
            }
            // One flat Adam step over all parameter groups.
            let mut params: Vec<f64> = Vec::with_capacity(opt.m.len());
            params.extend_from_slice(&scorer.w1);
            params.extend_from_slice(&scorer.b1);
            params.extend_from_slice(&scorer.w2);
            params.push(scorer.b2);
            let mut grads: Vec<f64> = Vec::with_capacity(opt.m.len());
            grads.extend_from_slice(&g.w1);
            grads.extend_from_slice(&g.b1);
            grads.extend_from_slice(&g.w2);
            grads.push(g.b2);
            opt.step(&mut params, &grads, config.lr);
            let (w1, rest) = params.split_at(scorer.w1.len());
            let (b1, rest) = rest.split_at(scorer.b1.len());
            let (w2, b2) = rest.split_at(scorer.w2.len());
            scorer.w1.copy_from_slice(w1);
            scorer.b1.copy_from_slice(b1);
            scorer.w2.copy_from_slice(w2);
            scorer.b2 = b2[0];
        }
    }
    Ok(scorer)
}

/// Mean plain cross entropy of the positive under the current scorer, no
/// dropout. Training progress measure.
pub fn mean_cross_entropy(scorer: &InteractionScorer, examples: &[TrainingExample]) -> f64 {
    let mut total = 0.0;
    for ex in examples {
        let rows = ex.feature_rows();
        let mask = vec![1.0; scorer.hidden];
        let z: Vec<f64> = rows.iter().map(|f| scorer.score_with_mask(f, &mask)).collect();
        total -= softmax(&z)[0].ln();
    }
    total / examples.len() as f64
}

/// query_id → passage_id → score.
pub type ScoreMap = BTreeMap<String, BTreeMap<String, f64>>;

/// Read per-(query, passage) scores from a TSV (`qid<TAB>pid<TAB>score`) or
/// TREC run file (ranks ignored). Duplicate pairs keep the last value; the
/// duplicate count is returned alongside.
pub fn load_score_file(path: impl AsRef<Path>) -> Result<(ScoreMap, usize)> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: ScoreMap = BTreeMap::new();
    let mut duplicates = 0usize;
    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (qid, pid, score_str) = match fields.len() {
            3 => (fields[0], fields[1], fields[2]),
            6 => (fields[0], fields[2], fields[4]),
            n => {
                return Err(Error::parse(
                    path,
                    line_num,
                    format!("expected 3 (TSV) or 6 (TREC) fields, got {n}"),
                ))
            }
        };
        let score: f64 = score_str.parse().map_err(|_| {
            Error::parse(path, line_num, format!("bad score `{score_str}`"))
        })?;
        if out
            .entry(qid.to_owned())
            .or_default()
            .insert(pid.to_owned(), score)
            .is_some()
        {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!(
            "{}: {duplicates} duplicate (query, passage) pairs, last value kept",
            path.display()
        );
    }
    Ok((out, duplicates))
}

/// Minmax-normalize each source per query, then weight-sum with absent→0,
/// the same arithmetic as list fusion.
pub fn ensemble_scores(sources: &[ScoreMap], weights: &[f64]) -> Result<ScoreMap> {
    if sources.is_empty() || sources.len() != weights.len() {
        return Err(Error::invalid(format!(
            "ensemble needs equally many sources and weights, got {} and {}",
            sources.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("ensemble weights must be finite and >= 0"));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::invalid("ensemble weights must not all be zero"));
    }
    let mut out: ScoreMap = BTreeMap::new();
    for (source, &w) in sources.iter().zip(weights) {
        for (qid, per_passage) in source {
            if per_passage.is_empty() {
                continue;
            }
            let scores: Vec<f64> = per_passage.values().copied().collect();
            let normed = crate::fusion::minmax(&scores);
            let acc = out.entry(qid.clone()).or_default();
            for ((pid, _), s) in per_passage.iter().zip(normed) {
                *acc.entry(pid.clone()).or_insert(0.0) += w * s;
            }
        }
    }
    Ok(out)
}
