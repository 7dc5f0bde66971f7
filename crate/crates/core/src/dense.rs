//! Embedding store with exact maximum-inner-product search and the
//! late-fusion re-ranker.
//!
//! Embedding files start with `"EMB1"`, then `u32` row count and `u32` dim,
//! then row-major little-endian `f32` values. Doc ids live in an adjacent text
//! file (`<path>.ids`), one per line.

use std::collections::BTreeSet;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::encoder::{dot, DualEncoderParams};
use crate::error::{Error, Result};
use crate::model::{select_top_k, KnowledgeDoc, RankedList};
use crate::sparse::ByteReader;

pub use crate::model::ScoredHit;

/// Number of per-modality candidates re-ranked by late fusion.
pub const DEFAULT_FUSION_DEPTH: usize = 100;

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
    ids: Vec<String>,
}

/// Path of the id list stored next to an embedding file.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

impl EmbeddingMatrix {
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim < 1 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of `{id}`")));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data, ids })
    }

    /// Encodes every document with the knowledge encoder; row i is doc i.
    pub fn build(corpus: &[KnowledgeDoc], params: &DualEncoderParams) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let rows = corpus
            .par_iter()
            .map(|doc| params.encode_knowledge(doc))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(corpus.iter().map(|d| d.id.clone()).collect(), rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, ordinal: usize) -> &[f64] {
        &self.data[ordinal * self.dim..(ordinal + 1) * self.dim]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn check_query(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query vector".into()));
        }
        Ok(())
    }

    /// Inner product of every row with `v`.
    pub fn scores(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_query(v)?;
        Ok((0..self.len()).map(|i| dot(self.row(i), v)).collect())
    }

    /// Exact top-`k` rows by inner product with `query`.
    pub fn mips_topk(&self, query: &[f64], k: usize) -> Result<RankedList> {
        if k < 1 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let scores = self.scores(query)?;
        Ok(select_top_k(scores.into_iter().zip(0..), &self.ids, k))
    }

    /// Retrieves the top `m` rows for each modality, then re-ranks the union of
    /// both candidate lists by image score + text score.
    pub fn late_fusion_rerank(
        &self,
        image_vec: &[f64],
        text_vec: &[f64],
        m: usize,
        k: usize,
    ) -> Result<RankedList> {
        if k < 1 || m < k {
            return Err(Error::InvalidArgument(format!(
                "fusion needs m >= k >= 1 (got m={m}, k={k})"
            )));
        }
        let image_scores = self.scores(image_vec)?;
        let text_scores = self.scores(text_vec)?;
        let image_top = select_top_k(image_scores.iter().copied().zip(0..), &self.ids, m);
        let text_top = select_top_k(text_scores.iter().copied().zip(0..), &self.ids, m);
        let ordinal: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let candidates: BTreeSet<usize> = image_top
            .doc_ids()
            .chain(text_top.doc_ids())
            .map(|id| ordinal[id])
            .collect();
        let fused = candidates
            .into_iter()
            .map(|i| (image_scores[i] + text_scores[i], i));
        Ok(select_top_k(fused, &self.ids, k))
    }

    /// Writes the `EMB1` file (values rounded to f32) and the adjacent id list.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let ids = ids_path(path);
        let file = std::fs::File::create(&ids).map_err(|e| Error::io(&ids, e))?;
        let mut w = BufWriter::new(file);
        for id in &self.ids {
            writeln!(w, "{id}").map_err(|e| Error::io(&ids, e))?;
        }
        w.flush().map_err(|e| Error::io(&ids, e))
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
            return Err(Error::format(path, "missing EMB1 magic"));
        }
        let rows = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim < 1 {
            return Err(Error::format(path, "dimension must be >= 1"));
        }
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            let v = r.f32()? as f64;
            if !v.is_finite() {
                return Err(Error::format(path, "non-finite embedding value"));
            }
            data.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        let ids_file = ids_path(path);
        let text = std::fs::read_to_string(&ids_file).map_err(|e| Error::io(&ids_file, e))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != rows {
            return Err(Error::format(
                &ids_file,
                format!("{} ids for {rows} rows", ids.len()),
            ));
        }
        Ok(Self { dim, data, ids })
    }
}
