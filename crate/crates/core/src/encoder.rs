//! Toy dual encoder.
//!
//! Query:     h = mean(text-token rows ∪ visual-token rows),  z_q = tanh(W_q·h + b_q)
//! Knowledge: h = mean(knowledge-token rows),                  z_k = tanh(W_k·h + b_k)
//! Relevance is the inner product z_k · z_q.
//!
//! Text is tokenized with stopwords dropped; if that leaves nothing, all tokens
//! are used. Unknown words map to the UNK row 0 of their table. Visual token
//! `t` uses row `t + 1` of the visual table; ids past the end fall back to row 0.
//!
//! # Params file
//!
//! Little-endian throughout:
//!
//! ```text
//! "DEP1" d:u32 V_t:u32 V_v:u32 V_k:u32 seed:u64
//! text vocab:      byte_len:u64, then "token\tid\n" lines
//! knowledge vocab: byte_len:u64, then "token\tid\n" lines
//! f64 tensors in order E_t, E_v, E_k, W_q, W_k, b_q, b_k (row-major)
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{KnowledgeDoc, MultimodalQuery};
use crate::sparse::ByteReader;
use crate::textproc::{tokenize, Token, MASK_SURFACE};

pub const UNK_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_SURFACE: &str = "[unk]";
/// Half-width of the uniform init for projection weights and biases.
pub const INIT_RANGE: f64 = 0.1;
/// Half-width of the uniform init for the three embedding tables.
pub const EMBEDDING_INIT_RANGE: f64 = 0.5;

const MAGIC: &[u8; 4] = b"DEP1";

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Token string ↔ id table. Id 0 is UNK and id 1 the mask marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNK_SURFACE);
        v.insert(MASK_SURFACE);
        v
    }
}

impl Vocab {
    /// Builds a vocabulary from the encoder tokens of `texts`, ids in
    /// first-occurrence order.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut v = Self::default();
        for text in texts {
            for tok in encoder_tokens(text) {
                v.insert(&tok.surface);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn to_lines(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    fn from_lines(text: &str, path: &Path) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in text.lines() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("bad vocab line `{line}`")))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::format(path, format!("bad vocab id in `{line}`")))?;
            if id as usize != v.tokens.len() || v.insert(tok) != id {
                return Err(Error::format(path, format!("vocab ids not contiguous at `{line}`")));
            }
        }
        if v.token(UNK_ID) != Some(UNK_SURFACE) || v.token(MASK_ID) != Some(MASK_SURFACE) {
            return Err(Error::format(path, "vocab lacks reserved entries"));
        }
        Ok(v)
    }
}

/// Tokens the encoders consume: content tokens, or every token when the text
/// is made only of stopwords.
pub fn encoder_tokens(text: &str) -> Vec<Token> {
    let all = tokenize(text, false);
    let content: Vec<Token> = all.iter().filter(|t| !t.is_stopword).cloned().collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTensors {
    pub text_emb: Matrix,
    pub visual_emb: Matrix,
    pub knowledge_emb: Matrix,
    pub query_proj: Matrix,
    pub knowledge_proj: Matrix,
    pub query_bias: Vec<f64>,
    pub knowledge_bias: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "text_emb",
    "visual_emb",
    "knowledge_emb",
    "query_proj",
    "knowledge_proj",
    "query_bias",
    "knowledge_bias",
];

impl EncoderTensors {
    pub fn zeros(dim: usize, text_rows: usize, visual_rows: usize, knowledge_rows: usize) -> Self {
        Self {
            text_emb: Matrix::zeros(text_rows, dim),
            visual_emb: Matrix::zeros(visual_rows, dim),
            knowledge_emb: Matrix::zeros(knowledge_rows, dim),
            query_proj: Matrix::zeros(dim, dim),
            knowledge_proj: Matrix::zeros(dim, dim),
            query_bias: vec![0.0; dim],
            knowledge_bias: vec![0.0; dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.query_bias.len(),
            self.text_emb.rows(),
            self.visual_emb.rows(),
            self.knowledge_emb.rows(),
        )
    }

    /// Tensors flattened, in [`TENSOR_NAMES`] order.
    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.text_emb.as_slice(),
            self.visual_emb.as_slice(),
            self.knowledge_emb.as_slice(),
            self.query_proj.as_slice(),
            self.knowledge_proj.as_slice(),
            &self.query_bias,
            &self.knowledge_bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.text_emb.as_mut_slice(),
            self.visual_emb.as_mut_slice(),
            self.knowledge_emb.as_mut_slice(),
            self.query_proj.as_mut_slice(),
            self.knowledge_proj.as_mut_slice(),
            &mut self.query_bias,
            &mut self.knowledge_bias,
        ]
    }

    pub fn num_coords(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.slices()
            .iter()
            .zip(other.slices())
            .all(|(a, b)| a.len() == b.len())
            && self.query_bias.len() == other.query_bias.len()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Table {
    Text,
    Visual,
    Knowledge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Head {
    Query,
    Knowledge,
}

/// Forward pass state kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Activation {
    pub head: Head,
    pub rows: Vec<(Table, usize)>,
    pub pooled: Vec<f64>,
    pub z: Vec<f64>,
}

/// Parameters of both encoders plus their vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderParams {
    pub dim: usize,
    pub seed: u64,
    pub text_vocab: Vocab,
    pub knowledge_vocab: Vocab,
    pub tensors: EncoderTensors,
}

impl DualEncoderParams {
    /// Zero-valued parameters. `visual_rows` counts the UNK row.
    pub fn zeros(
        dim: usize,
        text_vocab: Vocab,
        knowledge_vocab: Vocab,
        visual_rows: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("dimension {dim} < 2")));
        }
        if visual_rows < 2 {
            return Err(Error::InvalidArgument(format!(
                "visual table needs >= 2 rows, got {visual_rows}"
            )));
        }
        let tensors =
            EncoderTensors::zeros(dim, text_vocab.len(), visual_rows, knowledge_vocab.len());
        Ok(Self {
            dim,
            seed,
            text_vocab,
            knowledge_vocab,
            tensors,
        })
    }

    /// Uniform initialization from `seed`: embedding tables in
    /// ±[`EMBEDDING_INIT_RANGE`], projections and biases in ±[`INIT_RANGE`].
    pub fn init(
        dim: usize,
        text_vocab: Vocab,
        knowledge_vocab: Vocab,
        visual_rows: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut p = Self::zeros(dim, text_vocab, knowledge_vocab, visual_rows, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, slice) in p.tensors.slices_mut().into_iter().enumerate() {
            let r = if i < 3 { EMBEDDING_INIT_RANGE } else { INIT_RANGE };
            for v in slice.iter_mut() {
                *v = rng.gen_range(-r..r);
            }
        }
        Ok(p)
    }

    /// Visual table rows needed for tokens `0..=max_token`, plus UNK.
    pub fn visual_rows_for(max_token: Option<u32>) -> usize {
        max_token.map_or(2, |m| (m as usize + 2).max(2))
    }

    pub fn visual_rows(&self) -> usize {
        self.tensors.visual_emb.rows()
    }

    fn visual_row(&self, token: u32) -> usize {
        let row = token as usize + 1;
        if row < self.visual_rows() {
            row
        } else {
            UNK_ID as usize
        }
    }

    fn table(&self, table: Table) -> &Matrix {
        match table {
            Table::Text => &self.tensors.text_emb,
            Table::Visual => &self.tensors.visual_emb,
            Table::Knowledge => &self.tensors.knowledge_emb,
        }
    }

    pub(crate) fn query_rows(&self, q: &MultimodalQuery) -> Vec<(Table, usize)> {
        let mut rows: Vec<(Table, usize)> = if q.text.trim().is_empty() {
            Vec::new()
        } else {
            encoder_tokens(&q.text)
                .iter()
                .map(|t| (Table::Text, self.text_vocab.id(&t.surface) as usize))
                .collect()
        };
        rows.extend(q.visual_tokens.iter().map(|&t| (Table::Visual, self.visual_row(t))));
        rows
    }

    pub(crate) fn knowledge_rows(&self, text: &str) -> Vec<(Table, usize)> {
        encoder_tokens(text)
            .iter()
            .map(|t| (Table::Knowledge, self.knowledge_vocab.id(&t.surface) as usize))
            .collect()
    }

    fn forward(&self, head: Head, rows: Vec<(Table, usize)>, label: &str) -> Result<Activation> {
        if rows.is_empty() {
            return Err(Error::EmptyInput(label.to_string()));
        }
        let mut pooled = vec![0.0; self.dim];
        for &(table, r) in &rows {
            for (p, v) in pooled.iter_mut().zip(self.table(table).row(r)) {
                *p += v;
            }
        }
        let n = rows.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        let (proj, bias) = match head {
            Head::Query => (&self.tensors.query_proj, &self.tensors.query_bias),
            Head::Knowledge => (&self.tensors.knowledge_proj, &self.tensors.knowledge_bias),
        };
        let z: Vec<f64> = proj
            .matvec(&pooled)
            .iter()
            .zip(bias)
            .map(|(u, b)| (u + b).tanh())
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoding of `{label}`")));
        }
        Ok(Activation {
            head,
            rows,
            pooled,
            z,
        })
    }

    pub(crate) fn forward_query(&self, q: &MultimodalQuery) -> Result<Activation> {
        self.forward(Head::Query, self.query_rows(q), &q.id)
    }

    pub(crate) fn forward_knowledge(&self, doc: &KnowledgeDoc) -> Result<Activation> {
        self.forward(Head::Knowledge, self.knowledge_rows(&doc.text), &doc.id)
    }

    /// Accumulates into `grad` the gradient flowing from `dz` (∂L/∂z) back
    /// through the head and the mean pooling.
    pub(crate) fn backward(&self, act: &Activation, dz: &[f64], grad: &mut EncoderTensors) {
        let du: Vec<f64> = dz
            .iter()
            .zip(&act.z)
            .map(|(g, z)| g * (1.0 - z * z))
            .collect();
        let (proj, gproj, gbias) = match act.head {
            Head::Query => (
                &self.tensors.query_proj,
                &mut grad.query_proj,
                &mut grad.query_bias,
            ),
            Head::Knowledge => (
                &self.tensors.knowledge_proj,
                &mut grad.knowledge_proj,
                &mut grad.knowledge_bias,
            ),
        };
        for (r, &dur) in du.iter().enumerate() {
            for (g, h) in gproj.row_mut(r).iter_mut().zip(&act.pooled) {
                *g += dur * h;
            }
        }
        for (g, d) in gbias.iter_mut().zip(&du) {
            *g += d;
        }
        let mut dh = proj.matvec_t(&du);
        let n = act.rows.len() as f64;
        dh.iter_mut().for_each(|v| *v /= n);
        for &(table, r) in &act.rows {
            let target = match table {
                Table::Text => &mut grad.text_emb,
                Table::Visual => &mut grad.visual_emb,
                Table::Knowledge => &mut grad.knowledge_emb,
            };
            for (g, v) in target.row_mut(r).iter_mut().zip(&dh) {
                *g += v;
            }
        }
    }

    /// z_q for a query. Components lie in (−1, 1).
    pub fn encode_query(&self, q: &MultimodalQuery) -> Result<Vec<f64>> {
        Ok(self.forward_query(q)?.z)
    }

    /// z_k for a document.
    pub fn encode_knowledge(&self, doc: &KnowledgeDoc) -> Result<Vec<f64>> {
        Ok(self.forward_knowledge(doc)?.z)
    }

    /// z_kᵀ · z_q
    pub fn relevance_score(&self, q: &MultimodalQuery, doc: &KnowledgeDoc) -> Result<f64> {
        Ok(dot(&self.encode_knowledge(doc)?, &self.encode_query(q)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for n in [
            self.dim,
            self.text_vocab.len(),
            self.visual_rows(),
            self.knowledge_vocab.len(),
        ] {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for vocab in [&self.text_vocab, &self.knowledge_vocab] {
            let lines = vocab.to_lines();
            buf.extend_from_slice(&(lines.len() as u64).to_le_bytes());
            buf.extend_from_slice(lines.as_bytes());
        }
        for slice in self.tensors.slices() {
            for v in slice {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "missing DEP1 magic"));
        }
        let dim = r.u32()? as usize;
        let text_rows = r.u32()? as usize;
        let visual_rows = r.u32()? as usize;
        let knowledge_rows = r.u32()? as usize;
        let seed = r.u64()?;
        let mut vocabs = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.u64()? as usize;
            let raw = r.take(len)?;
            let text =
                std::str::from_utf8(raw).map_err(|_| Error::format(path, "invalid UTF-8"))?;
            vocabs.push(Vocab::from_lines(text, path)?);
        }
        let knowledge_vocab = vocabs.pop().unwrap();
        let text_vocab = vocabs.pop().unwrap();
        if text_vocab.len() != text_rows || knowledge_vocab.len() != knowledge_rows {
            return Err(Error::format(path, "vocab size disagrees with header"));
        }
        let mut p = Self::zeros(dim, text_vocab, knowledge_vocab, visual_rows, seed)?;
        for slice in p.tensors.slices_mut() {
            for v in slice.iter_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        if !p.tensors.all_finite() {
            return Err(Error::NonFinite(format!("parameters in {}", path.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocabs() -> (Vocab, Vocab) {
        (
            Vocab::from_texts(["red bus", "tall tower"]),
            Vocab::from_texts(["london bus red", "paris tower tall iron"]),
        )
    }

    fn seeded(dim: usize) -> DualEncoderParams {
        let (t, k) = vocabs();
        DualEncoderParams::init(dim, t, k, 6, 7).unwrap()
    }

    fn tanh_vec(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.tanh()).collect()
    }

    #[test]
    fn vocab_reserved_ids() {
        let (t, _) = vocabs();
        assert_eq!(t.id(UNK_SURFACE), UNK_ID);
        assert_eq!(t.id(MASK_SURFACE), MASK_ID);
        assert_eq!(t.id("nonexistent"), UNK_ID);
        assert_eq!(t.id("red"), 2);
    }

    #[test]
    fn zero_params_give_zero_vectors() {
        let (t, k) = vocabs();
        let p = DualEncoderParams::zeros(4, t, k, 3, 0).unwrap();
        let q = MultimodalQuery::new("q", "red bus", vec![0, 1]);
        assert_eq!(p.encode_query(&q).unwrap(), vec![0.0; 4]);
        let d = KnowledgeDoc::new("d", "london bus");
        assert_eq!(p.encode_knowledge(&d).unwrap(), vec![0.0; 4]);
        assert_eq!(p.relevance_score(&q, &d).unwrap(), 0.0);
    }

    #[test]
    fn single_text_token_is_exact() {
        let p = seeded(8);
        let q = MultimodalQuery::new("q", "tower", vec![]);
        let row = p.tensors.text_emb.row(p.text_vocab.id("tower") as usize);
        let u: Vec<f64> = p
            .tensors
            .query_proj
            .matvec(row)
            .iter()
            .zip(&p.tensors.query_bias)
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(p.encode_query(&q).unwrap(), tanh_vec(&u));
    }

    #[test]
    fn query_straight_line() {
        let p = seeded(8);
        let q = MultimodalQuery::new("q", "the red bus", vec![2, 0]);
        let t = &p.tensors;
        let rows = [
            t.text_emb.row(p.text_vocab.id("red") as usize),
            t.text_emb.row(p.text_vocab.id("bus") as usize),
            t.visual_emb.row(3),
            t.visual_emb.row(1),
        ];
        let mut expect = Vec::new();
        for r in 0..8 {
            let mut u = t.query_bias[r];
            for c in 0..8 {
                let h = (rows[0][c] + rows[1][c] + rows[2][c] + rows[3][c]) / 4.0;
                u += t.query_proj.get(r, c) * h;
            }
            expect.push(u.tanh());
        }
        let got = p.encode_query(&q).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn knowledge_straight_line_and_mean_idempotence() {
        let p = seeded(8);
        let d = KnowledgeDoc::new("d", "Paris iron tower");
        let t = &p.tensors;
        let ids: Vec<usize> = ["paris", "iron", "tower"]
            .iter()
            .map(|w| p.knowledge_vocab.id(w) as usize)
            .collect();
        let got = p.encode_knowledge(&d).unwrap();
        for r in 0..8 {
            let mut u = t.knowledge_bias[r];
            for c in 0..8 {
                let h: f64 = ids.iter().map(|&i| t.knowledge_emb.get(i, c)).sum::<f64>() / 3.0;
                u += t.knowledge_proj.get(r, c) * h;
            }
            assert!((got[r] - u.tanh()).abs() < 1e-12);
        }
        let x = p.encode_knowledge(&KnowledgeDoc::new("a", "tower")).unwrap();
        let xx = p.encode_knowledge(&KnowledgeDoc::new("b", "tower tower")).unwrap();
        assert_eq!(x, xx);
    }

    #[test]
    fn empty_inputs_rejected() {
        let p = seeded(4);
        assert!(matches!(
            p.encode_query(&MultimodalQuery::new("q", "", vec![])),
            Err(Error::EmptyInput(_))
        ));
        assert!(p.encode_knowledge(&KnowledgeDoc::new("d", "?!")).is_err());
    }

    #[test]
    fn stopword_only_text_still_encodes() {
        let p = seeded(4);
        assert!(p.encode_knowledge(&KnowledgeDoc::new("d", "the of")).is_ok());
    }

    #[test]
    fn out_of_range_visual_tokens_use_unk() {
        let p = seeded(4);
        let far = MultimodalQuery::new("q", "", vec![1000]);
        let unk = p.tensors.visual_emb.row(0);
        let u: Vec<f64> = p
            .tensors
            .query_proj
            .matvec(unk)
            .iter()
            .zip(&p.tensors.query_bias)
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(p.encode_query(&far).unwrap(), tanh_vec(&u));
    }

    #[test]
    fn self_inner_product_nonnegative() {
        // identical tables and heads make z_q == z_k for matching token ids
        let v = Vocab::from_texts(["alpha beta"]);
        let mut p = DualEncoderParams::init(6, v.clone(), v, 2, 3).unwrap();
        p.tensors.knowledge_emb = p.tensors.text_emb.clone();
        p.tensors.knowledge_proj = p.tensors.query_proj.clone();
        p.tensors.knowledge_bias = p.tensors.query_bias.clone();
        let q = MultimodalQuery::new("q", "alpha beta", vec![]);
        let d = KnowledgeDoc::new("d", "alpha beta");
        let zq = p.encode_query(&q).unwrap();
        assert_eq!(zq, p.encode_knowledge(&d).unwrap());
        let s = p.relevance_score(&q, &d).unwrap();
        assert_eq!(s, dot(&zq, &zq));
        assert!(s >= 0.0);
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dep");
        let p = seeded(5);
        p.save(&path).unwrap();
        let back = DualEncoderParams::load(&path).unwrap();
        assert_eq!(back, p);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DEP1");
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(DualEncoderParams::load(&path).is_err());
    }

    #[test]
    fn invalid_shapes_rejected() {
        let (t, k) = vocabs();
        assert!(DualEncoderParams::zeros(1, t.clone(), k.clone(), 3, 0).is_err());
        assert!(DualEncoderParams::zeros(4, t, k, 1, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn outputs_bounded_and_order_free(
                seed in 0u64..1000,
                words in proptest::collection::vec(0usize..4, 1..6),
                visual in proptest::collection::vec(0u32..5, 0..4),
            ) {
                let vocab = ["red", "bus", "tall", "tower"];
                let (t, k) = vocabs();
                let p = DualEncoderParams::init(8, t, k, 6, seed).unwrap();
                let text: Vec<&str> = words.iter().map(|&i| vocab[i]).collect();
                let q = MultimodalQuery::new("q", text.join(" "), visual.clone());
                let z = p.encode_query(&q).unwrap();
                prop_assert!(z.iter().all(|v| v.abs() < 1.0));
                let mut rev_text = text.clone();
                rev_text.reverse();
                let mut rev_vis = visual;
                rev_vis.reverse();
                let zr = p.encode_query(&MultimodalQuery::new("q", rev_text.join(" "), rev_vis)).unwrap();
                for (a, b) in z.iter().zip(&zr) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let d = KnowledgeDoc::new("d", text.join(" "));
                let zk = p.encode_knowledge(&d).unwrap();
                prop_assert_eq!(p.relevance_score(&q, &d).unwrap(), dot(&zk, &z));
            }
        }
    }
}
