//! Okapi BM25 inverted index.
//!
//! Documents and queries are tokenized with stopwords removed. A query is
//! treated as the set of its distinct terms, in first-occurrence order.
//!
//! score(d) = Σ_t idf(t) · tf(t,d)·(k1+1) / (tf(t,d) + k1·(1 − b + b·len(d)/avgdl))
//! idf(t)   = ln(1 + (N − df + 0.5) / (df + 0.5))
//!
//! # On-disk layout
//!
//! All integers are little-endian `u32`, floats little-endian `f64`, strings
//! are a `u32` byte length followed by UTF-8 bytes.
//!
//! ```text
//! "BM25" version k1 b N
//! N × (doc_id doc_len)
//! term_count
//! term_count × (term posting_count posting_count × (ordinal tf))   terms sorted
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{select_top_k, KnowledgeDoc, RankedList};
use crate::textproc::token_surfaces;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

const MAGIC: &[u8; 4] = b"BM25";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    avgdl: f64,
    ids: Vec<String>,
    k1: f64,
    b: f64,
}

/// ln(1 + (N − df + 0.5)/(df + 0.5)); always positive for df ≤ N.
pub fn bm25_idf(n: usize, df: usize) -> f64 {
    let n = n as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

fn check_params(k1: f64, b: f64) -> Result<()> {
    if !(k1 > 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
        return Err(Error::InvalidArgument(format!(
            "BM25 needs k1 > 0 and 0 <= b <= 1 (got k1={k1}, b={b})"
        )));
    }
    Ok(())
}

/// Distinct query terms in first-occurrence order.
fn query_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    token_surfaces(query, true)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

impl Bm25Index {
    pub fn build(corpus: &[KnowledgeDoc], k1: f64, b: f64) -> Result<Self> {
        check_params(k1, b)?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (ord, doc) in corpus.iter().enumerate() {
            let terms = token_surfaces(&doc.text, true);
            doc_len.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    ordinal: ord as u32,
                    tf: count,
                });
            }
        }
        let ids = corpus.iter().map(|d| d.id.clone()).collect();
        Ok(Self::assemble(postings, doc_len, ids, k1, b))
    }

    fn assemble(
        postings: BTreeMap<String, Vec<Posting>>,
        doc_len: Vec<u32>,
        ids: Vec<String>,
        k1: f64,
        b: f64,
    ) -> Self {
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avgdl = total as f64 / doc_len.len() as f64;
        Self {
            postings,
            doc_len,
            avgdl,
            ids,
            k1,
            b,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, ordinal: usize) -> u32 {
        self.doc_len[ordinal]
    }

    pub fn doc_id(&self, ordinal: usize) -> &str {
        &self.ids[ordinal]
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// Top-`k` documents for `query`; documents matching no query term are omitted.
    pub fn search(&self, query: &str, k: usize) -> Result<RankedList> {
        if k < 1 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let n = self.num_docs();
        let mut scores = vec![0.0f64; n];
        let mut touched = vec![false; n];
        for term in query_terms(query) {
            let plist = self.postings(&term);
            if plist.is_empty() {
                continue;
            }
            let idf = bm25_idf(n, plist.len());
            for p in plist {
                let ord = p.ordinal as usize;
                let tf = p.tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[ord] as f64 / self.avgdl);
                scores[ord] += idf * tf * (self.k1 + 1.0) / (tf + norm);
                touched[ord] = true;
            }
        }
        let candidates = (0..n).filter(|&i| touched[i]).map(|i| (scores[i], i));
        Ok(select_top_k(candidates, &self.ids, k))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.k1.to_le_bytes());
        buf.extend_from_slice(&self.b.to_le_bytes());
        buf.extend_from_slice(&(self.num_docs() as u32).to_le_bytes());
        for (id, len) in self.ids.iter().zip(&self.doc_len) {
            put_str(&mut buf, id);
            buf.extend_from_slice(&len.to_le_bytes());
        }
        buf.extend_from_slice(&(self.postings.len() as u32).to_le_bytes());
        for (term, plist) in &self.postings {
            put_str(&mut buf, term);
            buf.extend_from_slice(&(plist.len() as u32).to_le_bytes());
            for p in plist {
                buf.extend_from_slice(&p.ordinal.to_le_bytes());
                buf.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "missing BM25 magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let k1 = r.f64()?;
        let b = r.f64()?;
        check_params(k1, b)?;
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(Error::format(path, "index has no documents"));
        }
        let mut ids = Vec::with_capacity(n);
        let mut doc_len = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.string()?);
            doc_len.push(r.u32()?);
        }
        let term_count = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..term_count {
            let term = r.string()?;
            let count = r.u32()? as usize;
            let mut plist = Vec::with_capacity(count);
            for _ in 0..count {
                let ordinal = r.u32()?;
                if ordinal as usize >= n {
                    return Err(Error::format(path, format!("posting ordinal {ordinal} >= {n}")));
                }
                plist.push(Posting { ordinal, tf: r.u32()? });
            }
            postings.insert(term, plist);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self::assemble(postings, doc_len, ids, k1, b))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}
