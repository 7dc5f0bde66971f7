//! Shared domain types and the on-disk formats for corpora, queries and runs.
//!
//! Corpus, query and triplet files are JSONL (one UTF-8 record per line).
//! Run files are whitespace-separated text, one `qid docid rank score` per line,
//! with scores written to six decimal places.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One retrievable text passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub id: String,
    pub text: String,
}

impl KnowledgeDoc {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// A query whose information is split between a text and an image, the
/// image being represented by a sequence of discrete visual tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MultimodalQuery {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub visual_tokens: Vec<u32>,
    #[serde(default)]
    pub gold_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
}

impl MultimodalQuery {
    pub fn new(id: impl Into<String>, text: impl Into<String>, visual_tokens: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            visual_tokens,
            ..Default::default()
        }
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_ids.push(gold.into());
        self
    }

    /// The same query with the visual tokens dropped.
    pub fn text_only(&self) -> Self {
        Self {
            visual_tokens: Vec::new(),
            ..self.clone()
        }
    }

    /// The same query with the text dropped.
    pub fn image_only(&self) -> Self {
        Self {
            text: String::new(),
            ..self.clone()
        }
    }
}

/// A retrieved document together with its relevance score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub doc_id: String,
    pub score: f64,
}

impl ScoredHit {
    pub fn new(doc_id: impl Into<String>, score: f64) -> Self {
        Self {
            doc_id: doc_id.into(),
            score,
        }
    }
}

/// Ranking order used everywhere: descending score, ties by ascending doc id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_id.cmp(b_id))
}

/// Hits in descending score order, ties broken by ascending doc id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub hits: Vec<ScoredHit>,
}

impl RankedList {
    /// Sorts arbitrary hits into ranking order.
    pub fn from_unsorted(mut hits: Vec<ScoredHit>) -> Self {
        hits.sort_by(|a, b| rank_order(a.score, &a.doc_id, b.score, &b.doc_id));
        Self { hits }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.doc_id.as_str())
    }

    pub fn truncate(&mut self, k: usize) {
        self.hits.truncate(k);
    }
}

/// Keeps the best `k` of `(score, ordinal)` candidates under [`rank_order`],
/// where ordinal indexes `ids`. Exact; O(n log k).
pub(crate) fn select_top_k<I>(candidates: I, ids: &[String], k: usize) -> RankedList
where
    I: IntoIterator<Item = (f64, usize)>,
{
    use std::collections::BinaryHeap;

    struct Entry<'a> {
        score: f64,
        id: &'a str,
    }
    impl PartialEq for Entry<'_> {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl Eq for Entry<'_> {}
    impl PartialOrd for Entry<'_> {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    // "less" means better rank, so the heap top is the current worst entry
    impl Ord for Entry<'_> {
        fn cmp(&self, other: &Self) -> Ordering {
            rank_order(self.score, self.id, other.score, other.id)
        }
    }

    if k == 0 {
        return RankedList::default();
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (score, ord) in candidates {
        let entry = Entry {
            score,
            id: ids[ord].as_str(),
        };
        if heap.len() < k {
            heap.push(entry);
        } else if let Some(worst) = heap.peek() {
            if entry < *worst {
                heap.pop();
                heap.push(entry);
            }
        }
    }
    RankedList {
        hits: heap
            .into_sorted_vec()
            .into_iter()
            .map(|e| ScoredHit::new(e.id, e.score))
            .collect(),
    }
}

/// Ranked results for a set of queries, in query insertion order.
pub type RunFile = IndexMap<String, RankedList>;

/// Summary of a loaded corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub doc_count: usize,
    pub path: String,
    /// Hex SHA-256 of the file bytes.
    pub checksum: String,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL file, skipping blank lines. Parse errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: impl AsRef<Path>, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads a corpus file, validating id uniqueness and non-empty text.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<KnowledgeDoc>, CorpusManifest)> {
    let path = path.as_ref();
    let docs: Vec<KnowledgeDoc> = read_jsonl(path)?;
    validate_corpus(&docs)?;
    let manifest = CorpusManifest {
        doc_count: docs.len(),
        path: path.display().to_string(),
        checksum: file_checksum(path)?,
    };
    Ok((docs, manifest))
}

pub fn validate_corpus(docs: &[KnowledgeDoc]) -> Result<()> {
    let mut seen = HashSet::with_capacity(docs.len());
    for doc in docs {
        if doc.id.is_empty() {
            return Err(Error::InvalidArgument("document with empty id".into()));
        }
        if doc.text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "document `{}` has empty text",
                doc.id
            )));
        }
        if !seen.insert(doc.id.as_str()) {
            return Err(Error::DuplicateId(doc.id.clone()));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawQuery {
    id: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    visual_tokens: Vec<i64>,
    #[serde(default)]
    gold_ids: Vec<String>,
    #[serde(default)]
    answers: Option<Vec<String>>,
}

/// Loads a query file. Absent `visual_tokens` become an empty sequence.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<MultimodalQuery>> {
    let raw: Vec<RawQuery> = read_jsonl(path)?;
    raw.into_iter()
        .map(|r| {
            let visual_tokens = r
                .visual_tokens
                .iter()
                .map(|&t| {
                    u32::try_from(t).map_err(|_| Error::InvalidQuery {
                        id: r.id.clone(),
                        message: format!("visual token {t} out of range"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let q = MultimodalQuery {
                id: r.id,
                text: r.text,
                visual_tokens,
                gold_ids: r.gold_ids,
                answers: r.answers,
            };
            validate_query(&q)?;
            Ok(q)
        })
        .collect()
}

pub fn validate_query(q: &MultimodalQuery) -> Result<()> {
    if q.text.trim().is_empty() && q.visual_tokens.is_empty() {
        return Err(Error::InvalidQuery {
            id: q.id.clone(),
            message: "both text and visual_tokens are empty".into(),
        });
    }
    Ok(())
}

fn check_run_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!(
            "{kind} `{s}` cannot be written to a run file"
        )));
    }
    Ok(())
}

/// Writes `qid docid rank score` lines, ranks 1-based, scores to 6 decimals.
pub fn write_run(run: &RunFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for (qid, list) in run {
        check_run_token("query id", qid)?;
        for hit in &list.hits {
            check_run_token("doc id", &hit.doc_id)?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (qid, list) in run {
        for (rank, hit) in list.hits.iter().enumerate() {
            writeln!(w, "{} {} {} {:.6}", qid, hit.doc_id, rank + 1, hit.score)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a run file, checking contiguous ranks and unique doc ids per query.
pub fn load_run(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let reader = BufReader::new(open(path)?);
    let mut run = RunFile::new();
    let mut seen: IndexMap<String, HashSet<String>> = IndexMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, doc, rank, score] = fields[..] else {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| bad(format!("bad rank `{rank}`")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| bad(format!("bad score `{score}`")))?;
        let list = run.entry(qid.to_string()).or_default();
        if rank != list.len() + 1 {
            return Err(bad(format!(
                "rank {rank} for query `{qid}` is not contiguous (expected {})",
                list.len() + 1
            )));
        }
        if !seen.entry(qid.to_string()).or_default().insert(doc.to_string()) {
            return Err(bad(format!("doc `{doc}` repeated for query `{qid}`")));
        }
        list.hits.push(ScoredHit::new(doc, score));
    }
    Ok(run)
}
