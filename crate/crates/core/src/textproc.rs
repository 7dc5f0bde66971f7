//! Tokenization, stopwords, tf-idf keyword scoring and sentence splitting.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal mask marker inserted into masked text.
pub const MASK_TOKEN: &str = "[MASK]";
/// Token surface the tokenizer emits for [`MASK_TOKEN`].
pub const MASK_SURFACE: &str = "[mask]";

const STOPWORDS_TXT: &str = include_str!("../data/stopwords.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn is_stopword(surface: &str) -> bool {
    stopwords().contains(surface)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub surface: String,
    pub is_stopword: bool,
}

impl Token {
    pub fn is_mask(&self) -> bool {
        self.surface == MASK_SURFACE
    }

    /// Non-stopword, non-mask token.
    pub fn is_content(&self) -> bool {
        !self.is_stopword && !self.is_mask()
    }
}

/// A token together with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SpannedToken {
    pub span: Range<usize>,
    pub token: Token,
}

fn starts_with_mask(s: &str) -> bool {
    s.len() >= MASK_TOKEN.len()
        && s.is_char_boundary(MASK_TOKEN.len())
        && s[..MASK_TOKEN.len()].eq_ignore_ascii_case(MASK_TOKEN)
}

pub(crate) fn tokenize_spans(text: &str) -> Vec<SpannedToken> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut iter = text.char_indices().peekable();
    let flush = |out: &mut Vec<SpannedToken>, range: Range<usize>| {
        let surface = text[range.clone()].to_lowercase();
        let is_stopword = is_stopword(&surface);
        out.push(SpannedToken {
            span: range,
            token: Token {
                surface,
                is_stopword,
            },
        });
    };
    while let Some((i, c)) = iter.next() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            flush(&mut out, s..i);
        }
        if c == '[' && starts_with_mask(&text[i..]) {
            let end = i + MASK_TOKEN.len();
            out.push(SpannedToken {
                span: i..end,
                token: Token {
                    surface: MASK_SURFACE.to_string(),
                    is_stopword: false,
                },
            });
            while iter.peek().is_some_and(|&(j, _)| j < end) {
                iter.next();
            }
        }
    }
    if let Some(s) = start {
        flush(&mut out, s..text.len());
    }
    out
}

/// Lowercases and splits on whitespace and punctuation. `[MASK]` is kept as a
/// single token.
pub fn tokenize(text: &str, drop_stopwords: bool) -> Vec<Token> {
    tokenize_spans(text)
        .into_iter()
        .map(|s| s.token)
        .filter(|t| !(drop_stopwords && t.is_stopword))
        .collect()
}

/// Token surfaces only.
pub fn token_surfaces(text: &str, drop_stopwords: bool) -> Vec<String> {
    tokenize(text, drop_stopwords)
        .into_iter()
        .map(|t| t.surface)
        .collect()
}

/// Document-frequency statistics for `tf * ln(N / df)` scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    doc_count: usize,
    df: HashMap<String, usize>,
}

impl TfIdfModel {
    pub fn fit<'a, I>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut doc_count = 0;
        for doc in docs {
            doc_count += 1;
            let uniq: HashSet<String> = token_surfaces(doc, false).into_iter().collect();
            for term in uniq {
                *df.entry(term).or_default() += 1;
            }
        }
        Self::from_counts(doc_count, df)
    }

    pub fn from_counts(doc_count: usize, df: HashMap<String, usize>) -> Result<Self> {
        if doc_count == 0 {
            return Err(Error::InvalidArgument("tf-idf model needs N >= 1".into()));
        }
        if let Some((term, &n)) = df.iter().find(|(_, &n)| n == 0 || n > doc_count) {
            return Err(Error::InvalidArgument(format!(
                "df({term}) = {n} outside [1, {doc_count}]"
            )));
        }
        Ok(Self { doc_count, df })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    /// Document frequency, floored at 1 for unseen terms.
    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(1).max(1)
    }

    pub fn idf(&self, term: &str) -> f64 {
        (self.doc_count as f64 / self.df(term) as f64).ln()
    }
}

/// Up to `top_n` distinct content terms of `question` with the highest
/// `tf * ln(N/df)`. Ties go to the earlier first occurrence.
pub fn tfidf_keywords(question: &str, model: &TfIdfModel, top_n: usize) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    let mut tf: HashMap<String, usize> = HashMap::new();
    for tok in tokenize(question, true) {
        if !tok.is_content() {
            continue;
        }
        let count = tf.entry(tok.surface.clone()).or_default();
        if *count == 0 {
            order.push(tok.surface);
        }
        *count += 1;
    }
    let mut scored: Vec<(usize, f64, String)> = order
        .into_iter()
        .enumerate()
        .map(|(pos, term)| (pos, tf[&term] as f64 * model.idf(&term), term))
        .collect();
    // stable sort keeps first-occurrence order among equal scores
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    scored.into_iter().take(top_n).map(|(_, _, t)| t).collect()
}

/// Splits at `.`, `?` or `!` followed by whitespace or end of text. Delimiters
/// stay with the sentence on their left; pieces are trimmed.
pub fn split_sentences(passage: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = passage.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let at_boundary = match iter.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if at_boundary {
            let end = i + c.len_utf8();
            let piece = passage[start..end].trim();
            if !piece.is_empty() {
                out.push(piece.to_string());
            }
            start = end;
        }
    }
    let tail = passage[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}
