//! Corpus ingestion: documents, passages, queries, and relevance judgments.
//!
//! Retrieval operates over [`Passage`]s. A passage corpus is either loaded
//! natively (one passage per input record) or produced by splitting documents
//! into overlapping token windows, which is how the document-ranking task is
//! mapped onto the passage pipeline.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw document as ingested, before passage splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

/// A retrieval unit. For split documents the id is `<doc_id>#<window_index>`
/// and `token_span` records the window's token offsets into the parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub parent_doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

/// Lowercase and split on every maximal run of non-alphanumeric characters.
///
/// This is the single tokenization rule used everywhere: indexing, query
/// processing, passage splitting, and the hashing embedder. No stemming, no
/// stopword removal.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Split a document into overlapping token windows.
///
/// Window `i` covers tokens `[i*stride, i*stride + window)`; a window is only
/// emitted while it contributes at least one token not covered before, so a
/// document with `<= window` tokens yields exactly one passage and an empty
/// document yields none.
pub fn split_passages(doc: &Document, window: usize, stride: usize) -> Result<Vec<Passage>> {
    if window < 1 {
        return Err(Error::invalid("split window must be >= 1"));
    }
    if stride < 1 || stride > window {
        return Err(Error::invalid(format!(
            "split stride must satisfy 1 <= stride <= window, got stride={stride} window={window}"
        )));
    }
    let tokens = tokenize(&doc.text);
    let n = tokens.len();
    let mut passages = Vec::new();
    if n == 0 {
        return Ok(passages);
    }
    let mut i = 0usize;
    loop {
        let start = i * stride;
        let end = (start + window).min(n);
        passages.push(Passage {
            passage_id: format!("{}#{}", doc.doc_id, i),
            parent_doc_id: doc.doc_id.clone(),
            text: tokens[start..end].join(" "),
            token_span: Some((start, end)),
        });
        if start + window >= n {
            break;
        }
        i += 1;
    }
    Ok(passages)
}

/// Recover a parent document id from a passage id.
///
/// Ids of the form `<doc>#<index>` map to `<doc>`; ids without `#` are their
/// own parent (native passage corpora). A trailing `#<non-integer>` or an
/// empty prefix is rejected.
pub fn parent_doc_id(passage_id: &str) -> Result<&str> {
    match passage_id.rsplit_once('#') {
        None => {
            if passage_id.is_empty() {
                Err(Error::invalid("empty passage id"))
            } else {
                Ok(passage_id)
            }
        }
        Some((prefix, suffix)) => {
            if prefix.is_empty() || suffix.parse::<u64>().is_err() {
                Err(Error::invalid(format!(
                    "passage id `{passage_id}` has no recoverable parent document id"
                )))
            } else {
                Ok(prefix)
            }
        }
    }
}

/// An immutable passage collection with unique ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.passage_id.is_empty() {
                return Err(Error::invalid("empty passage id"));
            }
            if let Some((start, end)) = p.token_span {
                if start >= end {
                    return Err(Error::invalid(format!(
                        "passage `{}` has empty token span",
                        p.passage_id
                    )));
                }
            }
            if by_id.insert(p.passage_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: p.passage_id.clone(),
                    context: "corpus".into(),
                });
            }
        }
        Ok(Corpus { passages, by_id })
    }

    /// Split every document into windowed passages and collect the result.
    pub fn from_documents(docs: &[Document], window: usize, stride: usize) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if d.doc_id.is_empty() {
                return Err(Error::invalid("empty doc id"));
            }
            if seen.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: d.doc_id.clone(),
                    context: "document corpus".into(),
                });
            }
        }
        let mut passages = Vec::new();
        for d in docs {
            passages.extend(split_passages(d, window, stride)?);
        }
        Self::from_passages(passages)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, passage_id: &str) -> Option<&Passage> {
        self.by_id.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.by_id.contains_key(passage_id)
    }
}

/// Ordinal <-> passage id mapping shared by the retrieval backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdTable {
    ids: Vec<String>,
    #[serde(skip)]
    by_id: HashMap<String, u32>,
}

impl IdTable {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if by_id.insert(id.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    context: "id table".into(),
                });
            }
        }
        Ok(IdTable { ids, by_id })
    }

    /// Rebuild the reverse map after deserialization.
    pub fn reindex(&mut self) {
        self.by_id = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, ordinal: u32) -> &str {
        &self.ids[ordinal as usize]
    }

    pub fn ordinal(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Graded relevance judgments keyed by (query_id, doc_id).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// At most one grade per (query, doc) pair.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        let per_query = self.grades.entry(query_id.to_owned()).or_default();
        if per_query.insert(doc_id.to_owned(), grade).is_some() {
            return Err(Error::DuplicateId {
                id: format!("({query_id}, {doc_id})"),
                context: "qrels".into(),
            });
        }
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(query_id)?.get(doc_id).copied()
    }

    /// Judged docs for one query, in doc-id order.
    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// TREC qrels serialization: `query_id 0 doc_id grade`, one per line.
    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (qid, per_query) in &self.grades {
            for (did, grade) in per_query {
                writeln!(out, "{qid} 0 {did} {grade}").unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_trec_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One JSON object per line with `doc_id` (or `passage_id`), `text`,
    /// optional `title`.
    Jsonl,
    /// Two-column `id<TAB>text`.
    Tsv,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn detect_format(content: &str) -> CorpusFormat {
    for line in content.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        return if t.starts_with('{') {
            CorpusFormat::Jsonl
        } else {
            CorpusFormat::Tsv
        };
    }
    CorpusFormat::Jsonl
}

#[derive(Deserialize)]
struct CorpusRecord {
    doc_id: Option<String>,
    passage_id: Option<String>,
    text: String,
    title: Option<String>,
}

/// Load a document corpus. JSONL records keep their `title`; TSV rows have
/// none. Duplicate ids are rejected by name.
pub fn load_documents(path: impl AsRef<Path>, format: Option<CorpusFormat>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let format = format.unwrap_or_else(|| detect_format(&content));
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let (id, text, title) = match format {
            CorpusFormat::Jsonl => {
                let rec: CorpusRecord = serde_json::from_str(t)
                    .map_err(|e| Error::parse(path, line_num, format!("bad JSON record: {e}")))?;
                let id = rec.doc_id.or(rec.passage_id).ok_or_else(|| {
                    Error::parse(path, line_num, "record has neither doc_id nor passage_id")
                })?;
                (id, rec.text, rec.title)
            }
            CorpusFormat::Tsv => {
                let (id, text) = line.split_once('\t').ok_or_else(|| {
                    Error::parse(path, line_num, "expected `id<TAB>text`")
                })?;
                (id.trim().to_owned(), text.to_owned(), None)
            }
        };
        if id.is_empty() {
            return Err(Error::parse(path, line_num, "empty id"));
        }
        if seen.insert(id.clone(), line_num).is_some() {
            return Err(Error::DuplicateId {
                id,
                context: format!("{}", path.display()),
            });
        }
        docs.push(Document {
            doc_id: id,
            text,
            title,
        });
    }
    Ok(docs)
}

/// Load records as a native passage corpus (each record is one passage and
/// its own parent document).
pub fn load_passage_corpus(path: impl AsRef<Path>, format: Option<CorpusFormat>) -> Result<Corpus> {
    let docs = load_documents(path, format)?;
    let passages = docs
        .into_iter()
        .map(|d| Passage {
            parent_doc_id: d.doc_id.clone(),
            passage_id: d.doc_id,
            text: match d.title {
                Some(title) if !title.is_empty() => format!("{title} {}", d.text),
                _ => d.text,
            },
            token_span: None,
        })
        .collect();
    Corpus::from_passages(passages)
}

/// Queries come as `query_id<TAB>text`.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let mut queries = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_num, "expected `query_id<TAB>text`"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::parse(path, line_num, "empty query id"));
        }
        if seen.insert(id.to_owned(), line_num).is_some() {
            return Err(Error::DuplicateId {
                id: id.to_owned(),
                context: format!("{}", path.display()),
            });
        }
        queries.push(Query {
            query_id: id.to_owned(),
            text: text.to_owned(),
        });
    }
    Ok(queries)
}

/// TREC qrels: whitespace-separated `query_id 0 doc_id grade`.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let mut qrels = Qrels::new();
    for (lineno, line) in content.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                line_num,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let grade: u32 = fields[3].parse().map_err(|_| {
            Error::parse(path, line_num, format!("bad relevance grade `{}`", fields[3]))
        })?;
        qrels
            .insert(fields[0], fields[2], grade)
            .map_err(|e| match e {
                Error::DuplicateId { id, .. } => Error::parse(
                    path,
                    line_num,
                    format!("duplicate judgment for {id}"),
                ),
                other => other,
            })?;
    }
    Ok(qrels)
}
