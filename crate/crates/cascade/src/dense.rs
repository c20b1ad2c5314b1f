//! Dense retrieval: hashed feature embeddings and an exact-scoring vector
//! store.
//!
//! The built-in embedder is a deterministic stand-in for a neural encoder:
//! unigram and adjacent-bigram features are hashed into signed buckets and
//! the accumulated vector is L2-normalized, so texts sharing surface
//! features land near each other while unrelated texts are near-orthogonal
//! at reasonable dimensions. Externally produced embeddings can be ingested
//! from a vector file instead.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{tokenize, Corpus, IdTable};
use crate::error::{Error, Result};
use crate::fusion::CandidateList;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_SEED: u64 = 42;

/// 64-bit FNV-1a, hand-rolled so the hash is stable across platforms and
/// toolchain versions.
fn fnv1a(seed: u64, data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    h
}

/// Bucket index and sign for one feature string. The low hash bit picks the
/// sign, the remaining bits the bucket.
pub(crate) fn feature_slot(feature: &str, dim: usize, seed: u64) -> (usize, f32) {
    let h = fnv1a(seed, feature.as_bytes());
    let bucket = ((h >> 1) % dim as u64) as usize;
    let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

pub(crate) fn unigram_feature(token: &str) -> String {
    format!("u:{token}")
}

/// Deterministic hashed embedding of `text`: one feature per token plus one
/// per adjacent token bigram, summed into signed buckets, L2-normalized.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < 8 {
        return Err(Error::invalid(format!("embedding dim must be >= 8, got {dim}")));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::invalid("unembeddable empty text"));
    }
    let mut acc = vec![0.0f32; dim];
    for t in &tokens {
        let (bucket, sign) = feature_slot(&unigram_feature(t), dim, seed);
        acc[bucket] += sign;
    }
    for pair in tokens.windows(2) {
        let (bucket, sign) = feature_slot(&format!("b:{} {}", pair[0], pair[1]), dim, seed);
        acc[bucket] += sign;
    }
    normalize(&mut acc).ok_or_else(|| Error::invalid("unembeddable empty text"))?;
    Ok(acc)
}

/// In-place L2 normalization; None when the vector is all zero.
fn normalize(v: &mut [f32]) -> Option<()> {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Some(())
}

/// The built-in text embedder: a (dim, seed) pair.
#[derive(Debug, Clone, Copy)]
pub struct Embedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Embedder { dim, seed }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        hash_embed(text, self.dim, self.seed)
    }
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::new(DEFAULT_DIM, DEFAULT_SEED)
    }
}

/// Unit-normalized passage embeddings with exact inner-product retrieval.
#[derive(Debug, Clone)]
pub struct VectorStore {
    dim: usize,
    /// Row-major, `dim` floats per passage ordinal.
    vectors: Vec<f32>,
    id_table: IdTable,
}

impl VectorStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.id_table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_table.is_empty()
    }

    pub fn id_table(&self) -> &IdTable {
        &self.id_table
    }

    pub fn vector(&self, ordinal: u32) -> &[f32] {
        let start = ordinal as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Build from raw (id, vector) rows, re-normalizing each to unit length.
    pub fn from_vectors(rows: Vec<(String, Vec<f32>)>, dim: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (id, mut v) in rows {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    id,
                    expected: dim,
                    got: v.len(),
                });
            }
            normalize(&mut v).ok_or_else(|| {
                Error::invalid(format!("zero vector for passage `{id}` cannot be normalized"))
            })?;
            ids.push(id);
            vectors.extend_from_slice(&v);
        }
        Ok(VectorStore {
            dim,
            vectors,
            id_table: IdTable::new(ids)?,
        })
    }

    /// Vector file: optional `#dim=<d>` header, then `id<TAB>v1,v2,...,vd`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        writeln!(out, "#dim={}", self.dim).unwrap();
        for o in 0..self.len() as u32 {
            out.push_str(self.id_table.id(o));
            out.push('\t');
            for (i, x) in self.vector(o).iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{x}").unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Embed every passage with the built-in embedder.
pub fn build_vector_store(corpus: &Corpus, embedder: &Embedder) -> Result<VectorStore> {
    let mut rows = Vec::with_capacity(corpus.len());
    for p in corpus.passages() {
        let v = embedder.embed(&p.text).map_err(|e| {
            Error::invalid(format!("passage `{}`: {e}", p.passage_id))
        })?;
        rows.push((p.passage_id.clone(), v));
    }
    VectorStore::from_vectors(rows, embedder.dim)
}

/// Load externally produced vectors, re-normalizing to unit length. When a
/// corpus is given, every file id must name one of its passages.
pub fn load_vectors(path: impl AsRef<Path>, corpus: Option<&Corpus>) -> Result<VectorStore> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut declared_dim: Option<usize> = None;
    let mut rows: Vec<(String, Vec<f32>)> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix("#dim=") {
            declared_dim = Some(rest.trim().parse().map_err(|_| {
                Error::parse(path, line_num, format!("bad dim header `{t}`"))
            })?);
            continue;
        }
        if t.starts_with('#') {
            continue;
        }
        let (id, nums) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_num, "expected `id<TAB>v1,v2,...`"))?;
        let v: Vec<f32> = nums
            .split(',')
            .map(|s| s.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, line_num, format!("bad vector component: {e}")))?;
        if let Some(c) = corpus {
            if !c.contains(id) {
                return Err(Error::UnknownId {
                    id: id.to_owned(),
                    context: format!("vector file {} names a passage absent from the corpus", path.display()),
                });
            }
        }
        rows.push((id.to_owned(), v));
    }
    let dim = match declared_dim.or_else(|| rows.first().map(|(_, v)| v.len())) {
        Some(d) => d,
        None => return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "vector file contains no vectors".into(),
        }),
    };
    VectorStore::from_vectors(rows, dim)
}

/// Exact top-`k` by inner product over every stored vector. Products are
/// accumulated in f64 so the ranking is independent of summation tricks.
pub fn retrieve_dense(
    store: &VectorStore,
    query_id: &str,
    query_vector: &[f32],
    k: usize,
) -> Result<CandidateList> {
    if query_vector.len() != store.dim {
        return Err(Error::DimensionMismatch {
            id: query_id.to_owned(),
            expected: store.dim,
            got: query_vector.len(),
        });
    }
    let entries: Vec<(String, f64)> = (0..store.len() as u32)
        .map(|o| {
            let dot: f64 = store
                .vector(o)
                .iter()
                .zip(query_vector)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (store.id_table.id(o).to_owned(), dot)
        })
        .collect();
    Ok(CandidateList::from_scored(query_id, "dense", entries, k))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
