//! Generated retrieval task in which neither modality alone identifies the
//! target: every document is a (visual cue, text cue) pair, each cue shared by
//! many documents, and each query supplies one cue through each modality.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{DualEncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::model::{KnowledgeDoc, MultimodalQuery};
use crate::trainer::TrainExample;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub num_docs: usize,
    pub visual_cues: usize,
    pub text_cues: usize,
    /// Lower bound on the number of documents sharing any single cue.
    pub min_docs_per_cue: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_docs: 200,
            visual_cues: 15,
            text_cues: 15,
            min_docs_per_cue: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub corpus: Vec<KnowledgeDoc>,
    /// One query per document, gold = that document.
    pub queries: Vec<MultimodalQuery>,
    /// (visual cue, text cue) of each document.
    pub cues: Vec<(u32, u32)>,
}

pub fn doc_text(visual: u32, text: u32) -> String {
    format!("place{visual} detail{text}")
}

pub fn query_text(text: u32) -> String {
    format!("detail{text}")
}

impl SyntheticTask {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        let cells = config.visual_cues * config.text_cues;
        if config.num_docs > cells {
            return Err(Error::InvalidArgument(format!(
                "{} docs need more than {cells} cue pairs",
                config.num_docs
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut grid: Vec<(u32, u32)> = (0..config.visual_cues as u32)
            .flat_map(|v| (0..config.text_cues as u32).map(move |t| (v, t)))
            .collect();
        let mut attempts = 0;
        let cues = loop {
            grid.shuffle(&mut rng);
            let mut pick = grid[..config.num_docs].to_vec();
            let mut by_v: HashMap<u32, usize> = HashMap::new();
            let mut by_t: HashMap<u32, usize> = HashMap::new();
            for &(v, t) in &pick {
                *by_v.entry(v).or_default() += 1;
                *by_t.entry(t).or_default() += 1;
            }
            let ok = by_v.len() == config.visual_cues
                && by_t.len() == config.text_cues
                && by_v.values().chain(by_t.values()).all(|&n| n >= config.min_docs_per_cue);
            if ok {
                pick.sort_unstable();
                break pick;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::InvalidArgument(
                    "cannot satisfy the per-cue document minimum".into(),
                ));
            }
        };
        let corpus = cues
            .iter()
            .enumerate()
            .map(|(i, &(v, t))| KnowledgeDoc::new(format!("doc{i:04}"), doc_text(v, t)))
            .collect::<Vec<_>>();
        let queries = cues
            .iter()
            .zip(&corpus)
            .enumerate()
            .map(|(i, (&(v, t), doc))| {
                MultimodalQuery::new(format!("q{i:04}"), query_text(t), vec![v]).with_gold(&doc.id)
            })
            .collect();
        Ok(Self {
            corpus,
            queries,
            cues,
        })
    }

    pub fn examples(&self) -> Vec<TrainExample> {
        self.queries
            .iter()
            .zip(&self.corpus)
            .map(|(q, d)| TrainExample::new(q.clone(), d.clone()))
            .collect()
    }

    /// Freshly initialized encoders whose vocabularies cover the task.
    pub fn init_params(&self, dim: usize, seed: u64) -> Result<DualEncoderParams> {
        let text_vocab = Vocab::from_texts(self.queries.iter().map(|q| q.text.as_str()));
        let knowledge_vocab = Vocab::from_texts(self.corpus.iter().map(|d| d.text.as_str()));
        let max_visual = self.cues.iter().map(|c| c.0).max();
        DualEncoderParams::init(
            dim,
            text_vocab,
            knowledge_vocab,
            DualEncoderParams::visual_rows_for(max_visual),
            seed,
        )
    }
}
