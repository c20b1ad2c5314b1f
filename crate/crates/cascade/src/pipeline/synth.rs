//! Seeded synthetic corpus generation, including the hybrid
//! complementarity fixture: a share of each query's relevant passages is
//! reachable only through exact term match, the rest only through
//! embedding similarity.
//!
//! The semantic half works by construction against the default hash
//! embedder (dim 256, seed 42): for each "concept" token a pool of fresh
//! surrogate tokens is mined so that each surrogate hashes into the same
//! signed bucket as the concept's unigram feature. A passage stacking
//! surrogates shares embedding mass with a query naming the concepts
//! while sharing no surface token with it, so BM25 cannot see it at all.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, Qrels, Query};
use crate::dense;
use crate::error::{Error, Result};

const CONCEPT_POOL: usize = 8;
const CONCEPTS_PER_QUERY: usize = 3;
const RARE_PER_QUERY: usize = 3;
const MINED_PER_CONCEPT: usize = 12;
const MINED_PER_PASSAGE_PER_CONCEPT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_queries: usize,
    /// Filler vocabulary size.
    pub vocab: usize,
    pub seed: u64,
    /// Share of each query's relevants that are term-match reachable.
    pub lexical_fraction: f64,
    pub rel_per_query: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 1000,
            n_queries: 20,
            vocab: 500,
            seed: 42,
            lexical_fraction: 0.5,
            rel_per_query: 10,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.n_queries == 0 || self.rel_per_query == 0 {
            return Err(Error::invalid("n_docs, n_queries, rel_per_query must be positive"));
        }
        if self.vocab < 10 {
            return Err(Error::invalid("vocab must be >= 10"));
        }
        if !(0.0..=1.0).contains(&self.lexical_fraction) {
            return Err(Error::invalid("lexical_fraction must lie in [0, 1]"));
        }
        if self.n_docs < self.n_queries * self.rel_per_query {
            return Err(Error::invalid(format!(
                "n_docs {} cannot hold {} queries x {} relevants",
                self.n_docs, self.n_queries, self.rel_per_query
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub passages: Vec<Passage>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

/// Mine a fresh token whose unigram feature lands in `target`'s signed
/// bucket under the default embedder.
fn mine_surrogate(target: (usize, f32), counter: &mut u64) -> Result<String> {
    for _ in 0..1_000_000 {
        let tok = format!("z{counter}");
        *counter += 1;
        let slot = dense::feature_slot(
            &dense::unigram_feature(&tok),
            dense::DEFAULT_DIM,
            dense::DEFAULT_SEED,
        );
        if slot == target {
            return Ok(tok);
        }
    }
    Err(Error::invalid("surrogate mining failed to converge"))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let concepts: Vec<String> = (0..CONCEPT_POOL).map(|i| format!("c{i}")).collect();
    let vocab: Vec<String> = (0..cfg.vocab).map(|i| format!("w{i}")).collect();

    // Surrogate pools, one per concept, sharing that concept's signed
    // embedding bucket.
    let mut mine_counter = 0u64;
    let mut surrogates: Vec<Vec<String>> = Vec::with_capacity(CONCEPT_POOL);
    for concept in &concepts {
        let target = dense::feature_slot(
            &dense::unigram_feature(concept),
            dense::DEFAULT_DIM,
            dense::DEFAULT_SEED,
        );
        let pool = (0..MINED_PER_CONCEPT)
            .map(|_| mine_surrogate(target, &mut mine_counter))
            .collect::<Result<Vec<_>>>()?;
        surrogates.push(pool);
    }

    let n_lex = ((cfg.rel_per_query as f64) * cfg.lexical_fraction).round() as usize;
    let n_lex = n_lex.min(cfg.rel_per_query);
    let n_sem = cfg.rel_per_query - n_lex;

    // (text, Some(query index) when relevant).
    let mut drafts: Vec<(String, Option<usize>)> = Vec::with_capacity(cfg.n_docs);
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut unique_counter = 0u64;

    for qi in 0..cfg.n_queries {
        let rare: Vec<String> = (0..RARE_PER_QUERY).map(|j| format!("q{qi}r{j}")).collect();
        let picked: Vec<usize> = {
            let mut idx: Vec<usize> = (0..CONCEPT_POOL).collect();
            idx.shuffle(&mut rng);
            idx.truncate(CONCEPTS_PER_QUERY);
            idx
        };
        let mut qtokens = rare.clone();
        qtokens.extend(picked.iter().map(|&c| concepts[c].clone()));
        queries.push(Query {
            query_id: format!("q{qi}"),
            text: qtokens.join(" "),
        });

        // Lexical relevants: all three rare tokens spread through filler
        // text, so BM25 sees a strong multi-term match while the
        // embedding similarity stays low (long passage, no concepts).
        for _ in 0..n_lex {
            let mut tokens: Vec<String> = (0..27)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                .collect();
            tokens.insert(3, rare[0].clone());
            tokens.insert(11, rare[1].clone());
            tokens.insert(19, rare[2].clone());
            drafts.push((tokens.join(" "), Some(qi)));
        }

        // Semantic relevants: surrogate stacks for this query's concepts
        // plus a few never-repeated tokens; zero surface overlap with
        // the query.
        for _ in 0..n_sem {
            let mut tokens: Vec<String> = Vec::new();
            for &c in &picked {
                let mut pool = surrogates[c].clone();
                pool.shuffle(&mut rng);
                tokens.extend(pool.into_iter().take(MINED_PER_PASSAGE_PER_CONCEPT));
            }
            for _ in 0..3 {
                tokens.push(format!("x{unique_counter}"));
                unique_counter += 1;
            }
            tokens.shuffle(&mut rng);
            drafts.push((tokens.join(" "), Some(qi)));
        }
    }

    // Fillers: a few concept tokens plus vocabulary noise. They crowd the
    // middle of both rankings without ever being judged relevant.
    while drafts.len() < cfg.n_docs {
        let mut tokens: Vec<String> = {
            let mut idx: Vec<usize> = (0..CONCEPT_POOL).collect();
            idx.shuffle(&mut rng);
            idx.truncate(CONCEPTS_PER_QUERY);
            idx.into_iter().map(|c| concepts[c].clone()).collect()
        };
        for _ in 0..5 {
            tokens.push(vocab[rng.gen_range(0..vocab.len())].clone());
        }
        tokens.shuffle(&mut rng);
        drafts.push((tokens.join(" "), None));
    }

    drafts.shuffle(&mut rng);
    let width = (cfg.n_docs.max(2) - 1).to_string().len();
    let mut passages = Vec::with_capacity(cfg.n_docs);
    let mut qrels = Qrels::new();
    for (i, (text, relevant_to)) in drafts.into_iter().enumerate() {
        let passage_id = format!("p{i:0width$}");
        if let Some(qi) = relevant_to {
            qrels.insert(&format!("q{qi}"), &passage_id, 2)?;
        }
        passages.push(Passage {
            passage_id: passage_id.clone(),
            parent_doc_id: passage_id,
            text,
            token_span: None,
        });
    }

    Ok(SynthData {
        passages,
        queries,
        qrels,
    })
}

/// Write the generated fixture as the pipeline's input files:
/// `passages.jsonl`, `queries.tsv`, `qrels.txt`.
pub fn write_synthetic(data: &SynthData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut jsonl = String::new();
    for p in &data.passages {
        let line = serde_json::json!({"passage_id": p.passage_id, "text": p.text});
        jsonl.push_str(&line.to_string());
        jsonl.push('\n');
    }
    let path = dir.join("passages.jsonl");
    std::fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;

    let mut tsv = String::new();
    for q in &data.queries {
        tsv.push_str(&format!("{}\t{}\n", q.query_id, q.text));
    }
    let path = dir.join("queries.tsv");
    std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;

    data.qrels.save(dir.join("qrels.txt"))
}
