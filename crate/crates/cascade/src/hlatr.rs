//! List-aware re-ranking: a small pre-norm transformer encoder over
//! per-candidate features, trained list-wise, producing the final ordering.
//!
//! Each candidate enters as the sum of a learned position embedding of its
//! retrieval rank and a linear projection of its (minmax-normalized)
//! ranking score, so the model sees both how the retrieval stage ordered
//! the list and how the ranking stage scored it. Everything — attention,
//! layer norm, feedforward, embeddings, heads — is trained from scratch
//! with exact backpropagation in f64; no external autodiff.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Candidate, CandidateList};
use crate::rerank::Adam;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlatrConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest list the position table covers.
    pub max_list_len: usize,
    pub ff: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// 0 disables the optional R-Drop consistency term.
    pub rdrop_alpha: f64,
}

impl Default for HlatrConfig {
    fn default() -> Self {
        HlatrConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_list_len: 100,
            ff: 128,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 30,
            seed: 42,
            rdrop_alpha: 0.0,
        }
    }
}

impl HlatrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_list_len < 2 {
            return Err(Error::invalid("max_list_len must be >= 2"));
        }
        if self.ff == 0 || self.lr <= 0.0 {
            return Err(Error::invalid("ff width and lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.rdrop_alpha < 0.0 {
            return Err(Error::invalid(
                "dropout must lie in [0, 1) and rdrop_alpha must be >= 0",
            ));
        }
        Ok(())
    }
}

/// One encoder layer's parameters. Projection matrices are row-major
/// `[d_in][d_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTensors {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub ff_w1: Vec<f64>,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Vec<f64>,
    pub ff_b2: Vec<f64>,
}

/// All trainable tensors; doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    /// L×d, row r = embedding of retrieval rank r+1.
    pub pos_embed: Vec<f64>,
    pub w_proj: Vec<f64>,
    pub b_proj: Vec<f64>,
    pub layers: Vec<LayerTensors>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl Tensors {
    pub fn zeros(config: &HlatrConfig) -> Self {
        let d = config.d_model;
        let layer = LayerTensors {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            ff_w1: vec![0.0; d * config.ff],
            ff_b1: vec![0.0; config.ff],
            ff_w2: vec![0.0; config.ff * d],
            ff_b2: vec![0.0; d],
        };
        Tensors {
            pos_embed: vec![0.0; config.max_list_len * d],
            w_proj: vec![0.0; d],
            b_proj: vec![0.0; d],
            layers: vec![layer; config.n_layers],
            head_w: vec![0.0; d],
            head_b: 0.0,
        }
    }

    /// Canonical tensor enumeration; the flat layout every consumer shares.
    fn tensor_names_and_lens(config: &HlatrConfig) -> Vec<(String, usize)> {
        let d = config.d_model;
        let mut out = vec![
            ("pos_embed".to_string(), config.max_list_len * d),
            ("w_proj".to_string(), d),
            ("b_proj".to_string(), d),
        ];
        for l in 0..config.n_layers {
            for (name, len) in [
                ("ln1_g", d),
                ("ln1_b", d),
                ("wq", d * d),
                ("bq", d),
                ("wk", d * d),
                ("bk", d),
                ("wv", d * d),
                ("bv", d),
                ("wo", d * d),
                ("bo", d),
                ("ln2_g", d),
                ("ln2_b", d),
                ("ff_w1", d * config.ff),
                ("ff_b1", config.ff),
                ("ff_w2", config.ff * d),
                ("ff_b2", d),
            ] {
                out.push((format!("layer{l}.{name}"), len));
            }
        }
        out.push(("head_w".to_string(), d));
        out.push(("head_b".to_string(), 1));
        out
    }

    /// Named index ranges of every tensor in the flat layout.
    pub fn spans(config: &HlatrConfig) -> Vec<(String, std::ops::Range<usize>)> {
        let mut offset = 0;
        Self::tensor_names_and_lens(config)
            .into_iter()
            .map(|(name, len)| {
                let span = offset..offset + len;
                offset += len;
                (name, span)
            })
            .collect()
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.pos_embed, &self.w_proj, &self.b_proj];
        for l in &self.layers {
            out.extend([
                &l.ln1_g[..],
                &l.ln1_b,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ln2_g,
                &l.ln2_b,
                &l.ff_w1,
                &l.ff_b1,
                &l.ff_w2,
                &l.ff_b2,
            ]);
        }
        out.push(&self.head_w);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![&mut self.pos_embed, &mut self.w_proj, &mut self.b_proj];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g[..],
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
            ]);
        }
        out.push(&mut self.head_w);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for s in self.slices() {
            flat.extend_from_slice(s);
        }
        flat.push(self.head_b);
        flat
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        self.head_b = flat[offset];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlatrModel {
    version: u32,
    pub config: HlatrConfig,
    pub params: Tensors,
}

impl HlatrModel {
    pub fn zeros(config: HlatrConfig) -> Result<Self> {
        config.validate()?;
        let params = Tensors::zeros(&config);
        Ok(HlatrModel {
            version: CHECKPOINT_FORMAT_VERSION,
            config,
            params,
        })
    }

    /// Seeded init: Xavier-uniform projection matrices, U(−0.1, 0.1)
    /// embeddings and score projection, unit layer-norm gains, zero biases.
    pub fn init(config: HlatrConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let d = m.config.d_model;
        for x in m.params.pos_embed.iter_mut().chain(&mut m.params.w_proj) {
            *x = rng.gen_range(-0.1..0.1);
        }
        let xavier = |rng: &mut dyn rand::RngCore, w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.gen_range(-a..a);
            }
        };
        for l in &mut m.params.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            xavier(rng, &mut l.wq, d, d);
            xavier(rng, &mut l.wk, d, d);
            xavier(rng, &mut l.wv, d, d);
            xavier(rng, &mut l.wo, d, d);
            xavier(rng, &mut l.ff_w1, d, m.config.ff);
            xavier(rng, &mut l.ff_w2, m.config.ff, d);
        }
        xavier(rng, &mut m.params.head_w, d, 1);
        Ok(m)
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
        let m: HlatrModel = serde_json::from_str(&content).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if m.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "checkpoint format version {}, this build reads {CHECKPOINT_FORMAT_VERSION}",
                    m.version
                ),
            });
        }
        m.config.validate()?;
        Ok(m)
    }
}

/// One candidate as the list-aware stage sees it: where retrieval put it
/// and what the ranking stage scored it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub passage_id: String,
    pub retrieval_rank: u32,
    pub ranking_score: f64,
}

/// Per-query input list; `positive` marks the relevant candidate during
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub candidates: Vec<RankedCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

impl RankedList {
    /// Copy with ranking scores minmax-normalized over the list.
    pub fn normalized(&self) -> RankedList {
        let scores: Vec<f64> = self.candidates.iter().map(|c| c.ranking_score).collect();
        let normed = crate::fusion::minmax(&scores);
        let mut out = self.clone();
        for (c, s) in out.candidates.iter_mut().zip(normed) {
            c.ranking_score = s;
        }
        out
    }

    pub fn positive_index(&self) -> Option<usize> {
        let positive = self.positive.as_deref()?;
        self.candidates.iter().position(|c| c.passage_id == positive)
    }
}

/// Line-delimited JSON training lists.
pub fn save_ranked_lists(lists: &[RankedList], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for l in lists {
        out.push_str(&serde_json::to_string(l).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_ranked_lists(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lists = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lists.push(serde_json::from_str(line).map_err(|e| {
            Error::parse(path, lineno + 1, format!("bad ranked-list record: {e}"))
        })?);
    }
    Ok(lists)
}

/// Position-table row for a retrieval rank; ranks beyond the table share
/// its last row.
fn rank_row(rank: u32, max_list_len: usize) -> usize {
    ((rank.max(1) as usize) - 1).min(max_list_len - 1)
}

/// input_i = PE[rank_i − 1] + s_i · w_proj + b_proj. Ranking scores are
/// expected minmax-normalized per list.
pub fn build_inputs(list: &RankedList, model: &HlatrModel) -> Result<Vec<Vec<f64>>> {
    let d = model.config.d_model;
    if list.candidates.len() > model.config.max_list_len {
        return Err(Error::invalid(format!(
            "list of {} candidates exceeds max_list_len {}",
            list.candidates.len(),
            model.config.max_list_len
        )));
    }
    Ok(list
        .candidates
        .iter()
        .map(|c| {
            let row = rank_row(c.retrieval_rank, model.config.max_list_len);
            let pe = &model.params.pos_embed[row * d..(row + 1) * d];
            (0..d)
                .map(|j| pe[j] + c.ranking_score * model.params.w_proj[j] + model.params.b_proj[j])
                .collect()
        })
        .collect())
}

/// Dropout scale factors for every sublayer output of one pass:
/// `layers[l][0]` masks the attention output, `layers[l][1]` the
/// feedforward output, each n×d.
#[derive(Debug, Clone)]
pub struct HlatrMasks {
    pub layers: Vec<[Vec<Vec<f64>>; 2]>,
}

impl HlatrMasks {
    pub fn ones(n_layers: usize, n: usize, d: usize) -> Self {
        let m = vec![vec![1.0; d]; n];
        HlatrMasks {
            layers: vec![[m.clone(), m]; n_layers],
        }
    }

    pub fn sample(n_layers: usize, n: usize, d: usize, rate: f64, rng: &mut impl Rng) -> Self {
        if rate == 0.0 {
            return Self::ones(n_layers, n, d);
        }
        let keep = 1.0 - rate;
        let mut draw = || {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        };
        HlatrMasks {
            layers: (0..n_layers).map(|_| [draw(), draw()]).collect(),
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv_sigma).collect();
    let out: Vec<f64> = xhat
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&xh, &gj), &bj)| gj * xh + bj)
        .collect();
    (out, xhat, inv_sigma)
}

/// y = x·W + b for row-major W `[d_in][d_out]`.
fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut out = b.to_vec();
            for (j, &xj) in row.iter().enumerate() {
                if xj != 0.0 {
                    let wrow = &w[j * d_out..(j + 1) * d_out];
                    for c in 0..d_out {
                        out[c] += xj * wrow[c];
                    }
                }
            }
            debug_assert_eq!(row.len(), d_in);
            out
        })
        .collect()
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

struct LnCache {
    out: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    inv_sigma: Vec<f64>,
}

fn layer_norm_all(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> LnCache {
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_sigma = Vec::with_capacity(x.len());
    for row in x {
        let (o, xh, is) = layer_norm(row, g, b);
        out.push(o);
        xhat.push(xh);
        inv_sigma.push(is);
    }
    LnCache {
        out,
        xhat,
        inv_sigma,
    }
}

struct LayerCache {
    ln1: LnCache,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention weights per head, each n×n.
    att: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs, pre-Wo.
    concat: Vec<Vec<f64>>,
    ln2: LnCache,
    ff_pre: Vec<Vec<f64>>,
    ff_act: Vec<Vec<f64>>,
}

struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    x_final: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

fn forward_cached(model: &HlatrModel, list: &RankedList, masks: &HlatrMasks) -> Result<ForwardCache> {
    let d = model.config.d_model;
    let n_heads = model.config.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let inputs = build_inputs(list, model)?;
    let n = inputs.len();
    let mut x = inputs.clone();
    let mut layers = Vec::with_capacity(model.config.n_layers);
    for (l, p) in model.params.layers.iter().enumerate() {
        let ln1 = layer_norm_all(&x, &p.ln1_g, &p.ln1_b);
        let q = affine(&ln1.out, &p.wq, &p.bq, d, d);
        let k = affine(&ln1.out, &p.wk, &p.bk, d, d);
        let v = affine(&ln1.out, &p.wv, &p.bv, d, d);
        let mut att = Vec::with_capacity(n_heads);
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut a_h = Vec::with_capacity(n);
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|t| {
                        q[i][cols.clone()]
                            .iter()
                            .zip(&k[t][cols.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                a_h.push(softmax_row(&logits));
            }
            for i in 0..n {
                for t in 0..n {
                    let w = a_h[i][t];
                    for c in cols.clone() {
                        concat[i][c] += w * v[t][c];
                    }
                }
            }
            att.push(a_h);
        }
        let attn_out = affine(&concat, &p.wo, &p.bo, d, d);
        let mask_a = &masks.layers[l][0];
        let mut x_mid = x;
        for i in 0..n {
            for j in 0..d {
                x_mid[i][j] += attn_out[i][j] * mask_a[i][j];
            }
        }
        let ln2 = layer_norm_all(&x_mid, &p.ln2_g, &p.ln2_b);
        let ff_pre = affine(&ln2.out, &p.ff_w1, &p.ff_b1, d, model.config.ff);
        let ff_act: Vec<Vec<f64>> = ff_pre
            .iter()
            .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
            .collect();
        let ff_out = affine(&ff_act, &p.ff_w2, &p.ff_b2, model.config.ff, d);
        let mask_f = &masks.layers[l][1];
        let mut x_out = x_mid;
        for i in 0..n {
            for j in 0..d {
                x_out[i][j] += ff_out[i][j] * mask_f[i][j];
            }
        }
        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            att,
            concat,
            ln2,
            ff_pre,
            ff_act,
        });
        x = x_out;
    }
    let scores: Vec<f64> = x
        .iter()
        .map(|row| {
            row.iter()
                .zip(&model.params.head_w)
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
                + model.params.head_b
        })
        .collect();
    Ok(ForwardCache {
        inputs,
        layers,
        x_final: x,
        scores,
    })
}

/// Inference forward: no dropout, one score per candidate.
pub fn forward(model: &HlatrModel, list: &RankedList) -> Result<Vec<f64>> {
    let masks = HlatrMasks::ones(
        model.config.n_layers,
        list.candidates.len(),
        model.config.d_model,
    );
    Ok(forward_cached(model, list, &masks)?.scores)
}

/// Inference forward that also returns every head's attention rows
/// (layer-major, then head, then query position).
pub fn forward_debug(model: &HlatrModel, list: &RankedList) -> Result<(Vec<f64>, Vec<Vec<Vec<Vec<f64>>>>)> {
    let masks = HlatrMasks::ones(
        model.config.n_layers,
        list.candidates.len(),
        model.config.d_model,
    );
    let cache = forward_cached(model, list, &masks)?;
    let att = cache.layers.iter().map(|l| l.att.clone()).collect();
    Ok((cache.scores, att))
}

/// −log softmax(scores)[positive_index].
pub fn listwise_loss(scores: &[f64], positive_index: usize) -> f64 {
    let p = softmax_row(scores);
    -p[positive_index].ln()
}

fn ln_backward(
    dout: &[Vec<f64>],
    cache: &LnCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<Vec<f64>> {
    let d = g.len() as f64;
    dout.iter()
        .zip(&cache.xhat)
        .zip(&cache.inv_sigma)
        .map(|((dout_row, xhat_row), &inv_sigma)| {
            let mut dxhat = vec![0.0; g.len()];
            for j in 0..g.len() {
                dg[j] += dout_row[j] * xhat_row[j];
                db[j] += dout_row[j];
                dxhat[j] = dout_row[j] * g[j];
            }
            let mean1 = dxhat.iter().sum::<f64>() / d;
            let mean2 = dxhat
                .iter()
                .zip(xhat_row)
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
                / d;
            (0..g.len())
                .map(|j| inv_sigma * (dxhat[j] - mean1 - xhat_row[j] * mean2))
                .collect()
        })
        .collect()
}

/// Backward of `affine`: accumulates dW and db, returns dx.
fn affine_backward(
    dout: &[Vec<f64>],
    x: &[Vec<f64>],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    d_in: usize,
    d_out: usize,
) -> Vec<Vec<f64>> {
    let mut dx = vec![vec![0.0; d_in]; x.len()];
    for (i, dout_row) in dout.iter().enumerate() {
        for c in 0..d_out {
            db[c] += dout_row[c];
        }
        for j in 0..d_in {
            let wrow = &w[j * d_out..(j + 1) * d_out];
            let dwrow = &mut dw[j * d_out..(j + 1) * d_out];
            let xj = x[i][j];
            let mut acc = 0.0;
            for c in 0..d_out {
                dwrow[c] += xj * dout_row[c];
                acc += dout_row[c] * wrow[c];
            }
            dx[i][j] = acc;
        }
    }
    dx
}

/// Backpropagate dL/dscores through the whole model, accumulating into
/// `grads`.
fn backward(
    model: &HlatrModel,
    list: &RankedList,
    masks: &HlatrMasks,
    cache: &ForwardCache,
    dscores: &[f64],
    grads: &mut Tensors,
) {
    let d = model.config.d_model;
    let n_heads = model.config.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = cache.inputs.len();

    // Scoring head.
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    for i in 0..n {
        grads.head_b += dscores[i];
        for j in 0..d {
            grads.head_w[j] += dscores[i] * cache.x_final[i][j];
            dx[i][j] = dscores[i] * model.params.head_w[j];
        }
    }

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let p = &model.params.layers[l];
        let g = &mut grads.layers[l];
        let mask_f = &masks.layers[l][1];
        let mask_a = &masks.layers[l][0];

        // x_out = x_mid + ff_out ⊙ mask_f.
        let mut dff_out = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..d {
                dff_out[i][j] = dx[i][j] * mask_f[i][j];
            }
        }
        let mut dx_mid = dx;

        // ff_out = relu(ln2_out·W1 + b1)·W2 + b2.
        let dff_act = affine_backward(
            &dff_out,
            &lc.ff_act,
            &p.ff_w2,
            &mut g.ff_w2,
            &mut g.ff_b2,
            model.config.ff,
            d,
        );
        let dff_pre: Vec<Vec<f64>> = dff_act
            .iter()
            .zip(&lc.ff_pre)
            .map(|(da, pre)| {
                da.iter()
                    .zip(pre)
                    .map(|(&a, &b)| if b > 0.0 { a } else { 0.0 })
                    .collect()
            })
            .collect();
        let dln2_out = affine_backward(
            &dff_pre,
            &lc.ln2.out,
            &p.ff_w1,
            &mut g.ff_w1,
            &mut g.ff_b1,
            d,
            model.config.ff,
        );
        let dx_from_ln2 = ln_backward(&dln2_out, &lc.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        for i in 0..n {
            for j in 0..d {
                dx_mid[i][j] += dx_from_ln2[i][j];
            }
        }

        // x_mid = x_in + attn_out ⊙ mask_a.
        let mut dattn_out = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..d {
                dattn_out[i][j] = dx_mid[i][j] * mask_a[i][j];
            }
        }
        let dconcat = affine_backward(
            &dattn_out,
            &lc.concat,
            &p.wo,
            &mut g.wo,
            &mut g.bo,
            d,
            d,
        );

        // Attention per head.
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let a_h = &lc.att[h];
            for i in 0..n {
                // dA_it = dconcat_i · V_t over this head's columns.
                let da: Vec<f64> = (0..n)
                    .map(|t| {
                        cols.clone()
                            .map(|c| dconcat[i][c] * lc.v[t][c])
                            .sum::<f64>()
                    })
                    .collect();
                for t in 0..n {
                    let w = a_h[i][t];
                    for c in cols.clone() {
                        dv[t][c] += w * dconcat[i][c];
                    }
                }
                // Softmax row backward.
                let dot: f64 = a_h[i].iter().zip(&da).map(|(&a, &b)| a * b).sum();
                for t in 0..n {
                    let ds = a_h[i][t] * (da[t] - dot) * scale;
                    for c in cols.clone() {
                        dq[i][c] += ds * lc.k[t][c];
                        dk[t][c] += ds * lc.q[i][c];
                    }
                }
            }
        }

        let mut dln1_out = affine_backward(&dq, &lc.ln1.out, &p.wq, &mut g.wq, &mut g.bq, d, d);
        let dk_in = affine_backward(&dk, &lc.ln1.out, &p.wk, &mut g.wk, &mut g.bk, d, d);
        let dv_in = affine_backward(&dv, &lc.ln1.out, &p.wv, &mut g.wv, &mut g.bv, d, d);
        for i in 0..n {
            for j in 0..d {
                dln1_out[i][j] += dk_in[i][j] + dv_in[i][j];
            }
        }
        let dx_from_ln1 = ln_backward(&dln1_out, &lc.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        dx = dx_mid;
        for i in 0..n {
            for j in 0..d {
                dx[i][j] += dx_from_ln1[i][j];
            }
        }
    }

    // Inputs: x0_i = PE[rank_i − 1] + s_i·w_proj + b_proj.
    for (i, c) in list.candidates.iter().enumerate() {
        let row = rank_row(c.retrieval_rank, model.config.max_list_len);
        let pe = &mut grads.pos_embed[row * d..(row + 1) * d];
        for j in 0..d {
            pe[j] += dx[i][j];
            grads.w_proj[j] += dx[i][j] * c.ranking_score;
            grads.b_proj[j] += dx[i][j];
        }
    }
}

/// The training loss for one list under fixed dropout masks: plain
/// list-wise CE with one mask set, or the R-Drop combination (matching the
/// ranking stage's formula) with two.
pub fn hlatr_loss(
    model: &HlatrModel,
    list: &RankedList,
    masks: &[HlatrMasks],
    positive_index: usize,
    rdrop_alpha: f64,
) -> Result<f64> {
    match masks {
        [m] => Ok(listwise_loss(&forward_cached(model, list, m)?.scores, positive_index)),
        [m1, m2] => {
            let z1 = forward_cached(model, list, m1)?.scores;
            let z2 = forward_cached(model, list, m2)?.scores;
            let p = softmax_row(&z1);
            let q = softmax_row(&z2);
            let kl = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(&x, &y)| x * (x / y).ln()).sum()
            };
            Ok(-0.5 * (p[positive_index].ln() + q[positive_index].ln())
                + rdrop_alpha * 0.5 * (kl(&p, &q) + kl(&q, &p)))
        }
        _ => Err(Error::invalid("expected one or two dropout mask sets")),
    }
}

/// Loss plus exact gradients for every tensor, same mask convention as
/// [`hlatr_loss`].
pub fn hlatr_grads(
    model: &HlatrModel,
    list: &RankedList,
    masks: &[HlatrMasks],
    positive_index: usize,
    rdrop_alpha: f64,
) -> Result<(f64, Tensors)> {
    let mut grads = Tensors::zeros(&model.config);
    match masks {
        [m] => {
            let cache = forward_cached(model, list, m)?;
            let p = softmax_row(&cache.scores);
            let loss = -p[positive_index].ln();
            let dscores: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| pi - if i == positive_index { 1.0 } else { 0.0 })
                .collect();
            backward(model, list, m, &cache, &dscores, &mut grads);
            Ok((loss, grads))
        }
        [m1, m2] => {
            let c1 = forward_cached(model, list, m1)?;
            let c2 = forward_cached(model, list, m2)?;
            let p = softmax_row(&c1.scores);
            let q = softmax_row(&c2.scores);
            let kl = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(&x, &y)| x * (x / y).ln()).sum()
            };
            let kl_pq = kl(&p, &q);
            let kl_qp = kl(&q, &p);
            let loss = -0.5 * (p[positive_index].ln() + q[positive_index].ln())
                + rdrop_alpha * 0.5 * (kl_pq + kl_qp);
            let n = p.len();
            let mut d1 = vec![0.0; n];
            let mut d2 = vec![0.0; n];
            for i in 0..n {
                let y = if i == positive_index { 1.0 } else { 0.0 };
                d1[i] = 0.5 * (p[i] - y)
                    + rdrop_alpha * 0.5 * (p[i] * ((p[i] / q[i]).ln() - kl_pq) + (p[i] - q[i]));
                d2[i] = 0.5 * (q[i] - y)
                    + rdrop_alpha * 0.5 * (q[i] * ((q[i] / p[i]).ln() - kl_qp) + (q[i] - p[i]));
            }
            backward(model, list, m1, &c1, &d1, &mut grads);
            backward(model, list, m2, &c2, &d2, &mut grads);
            Ok((loss, grads))
        }
        _ => Err(Error::invalid("expected one or two dropout mask sets")),
    }
}

/// Train from scratch on positive-marked lists. Lists are normalized and
/// truncated to the model's window here; lists shorter than 2 candidates
/// or whose positive falls outside the window are skipped and counted.
/// Single-threaded, fully seeded; per-epoch mean loss goes to the log.
pub fn train_hlatr(lists: &[RankedList], config: &HlatrConfig) -> Result<HlatrModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = HlatrModel::init(config.clone(), &mut rng)?;
    let mut usable: Vec<(RankedList, usize)> = Vec::new();
    let mut skipped = 0usize;
    for list in lists {
        if list.positive.is_none() {
            return Err(Error::invalid(format!(
                "training list for query `{}` has no positive",
                list.query_id
            )));
        }
        let mut l = list.normalized();
        l.candidates.truncate(config.max_list_len);
        match l.positive_index() {
            Some(pos) if l.candidates.len() >= 2 => usable.push((l, pos)),
            _ => skipped += 1,
        }
    }
    if usable.is_empty() {
        return Err(Error::invalid("no usable training lists"));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} training lists (too short or positive outside window)");
    }
    let n_params = model.params.flatten().len();
    let mut opt = Adam::new(n_params);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let (list, pos) = &usable[idx];
            let n = list.candidates.len();
            let masks: Vec<HlatrMasks> = if config.rdrop_alpha > 0.0 {
                vec![
                    HlatrMasks::sample(config.n_layers, n, config.d_model, config.dropout, &mut rng),
                    HlatrMasks::sample(config.n_layers, n, config.d_model, config.dropout, &mut rng),
                ]
            } else {
                vec![HlatrMasks::sample(
                    config.n_layers,
                    n,
                    config.d_model,
                    config.dropout,
                    &mut rng,
                )]
            };
            let (loss, grads) = hlatr_grads(&model, list, &masks, *pos, config.rdrop_alpha)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("list-aware reranker epoch {epoch}, query `{}`", list.query_id),
                });
            }
            epoch_loss += loss;
            let mut flat = model.params.flatten();
            opt.step(&mut flat, &grads.flatten(), config.lr);
            model.params.assign(&flat);
        }
        log::info!(
            "hlatr epoch {epoch}: mean loss {:.6}",
            epoch_loss / usable.len() as f64
        );
    }
    Ok(model)
}

/// Final-stage reordering: candidates inside the model window are scored
/// and sorted (desc, ties by id asc); candidates beyond the window keep
/// their stage-2 order below, carrying synthetic strictly-lower scores.
pub fn rerank(model: &HlatrModel, lists: &[RankedList]) -> Result<Vec<CandidateList>> {
    let mut out = Vec::with_capacity(lists.len());
    for list in lists {
        if list.candidates.len() < 2 {
            log::warn!(
                "query `{}`: list of {} candidate(s) passed through unscored",
                list.query_id,
                list.candidates.len()
            );
            let candidates = list
                .candidates
                .iter()
                .map(|c| Candidate {
                    passage_id: c.passage_id.clone(),
                    retrieval_score: c.ranking_score,
                    retrieval_rank: 1,
                    source_tag: "hlatr".into(),
                    ranking_score: Some(c.ranking_score),
                    hlatr_score: Some(c.ranking_score),
                })
                .collect();
            out.push(CandidateList {
                query_id: list.query_id.clone(),
                candidates,
            });
            continue;
        }
        let normalized = list.normalized();
        let window = model.config.max_list_len.min(normalized.candidates.len());
        let head = RankedList {
            query_id: normalized.query_id.clone(),
            candidates: normalized.candidates[..window].to_vec(),
            positive: None,
        };
        let scores = forward(model, &head)?;
        let mut scored: Vec<(String, f64)> = head
            .candidates
            .iter()
            .zip(&scores)
            .map(|(c, &s)| (c.passage_id.clone(), s))
            .collect();
        crate::fusion::sort_scored(&mut scored);
        // Tail candidates keep stage-2 order strictly below the head.
        let floor = scored
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::INFINITY, f64::min);
        for (j, c) in normalized.candidates[window..].iter().enumerate() {
            scored.push((c.passage_id.clone(), floor - 1.0 - j as f64));
        }
        let candidates = scored
            .into_iter()
            .enumerate()
            .map(|(i, (passage_id, s))| {
                let orig = list
                    .candidates
                    .iter()
                    .find(|c| c.passage_id == passage_id)
                    .unwrap();
                Candidate {
                    passage_id,
                    retrieval_score: s,
                    retrieval_rank: (i + 1) as u32,
                    source_tag: "hlatr".into(),
                    ranking_score: Some(orig.ranking_score),
                    hlatr_score: Some(s),
                }
            })
            .collect();
        out.push(CandidateList {
            query_id: list.query_id.clone(),
            candidates,
        });
    }
    Ok(out)
}
