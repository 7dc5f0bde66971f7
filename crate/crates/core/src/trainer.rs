//! Contrastive training with in-batch negatives and mined hard negatives.
//!
//! For query i of a batch of size B the candidate set is every positive in the
//! batch plus the query's own hard negatives. The loss is the batch mean of
//! `−log softmax(score)[positive_i]`, with scores `z_q · z_k`. Gradients are
//! analytic; parameters are updated by plain SGD.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::EmbeddingMatrix;
use crate::encoder::{dot, Activation, DualEncoderParams, EncoderTensors};
use crate::error::{Error, Result};
use crate::model::{read_jsonl, write_jsonl, KnowledgeDoc, MultimodalQuery};

/// One gradient tensor per parameter tensor.
pub type GradientSet = EncoderTensors;

/// Query id → mined negative doc ids, ordered by query id.
pub type HardNegativeSet = BTreeMap<String, Vec<String>>;

/// A query, its positive document and any explicit negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub query: MultimodalQuery,
    pub positive: KnowledgeDoc,
    pub negatives: Vec<KnowledgeDoc>,
}

impl TrainExample {
    pub fn new(query: MultimodalQuery, positive: KnowledgeDoc) -> Self {
        Self {
            query,
            positive,
            negatives: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub queries: Vec<&'a MultimodalQuery>,
    pub positives: Vec<&'a KnowledgeDoc>,
    /// Per-query negatives; empty when the batch has none.
    pub hard_negatives: Vec<Vec<&'a KnowledgeDoc>>,
}

impl<'a> Batch<'a> {
    pub fn new(
        queries: Vec<&'a MultimodalQuery>,
        positives: Vec<&'a KnowledgeDoc>,
        hard_negatives: Option<Vec<Vec<&'a KnowledgeDoc>>>,
    ) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::InvalidArgument("batch must hold at least one query".into()));
        }
        if queries.len() != positives.len() {
            return Err(Error::DimensionMismatch {
                expected: queries.len(),
                actual: positives.len(),
            });
        }
        let hard_negatives = match hard_negatives {
            Some(h) if h.len() != queries.len() => {
                return Err(Error::DimensionMismatch {
                    expected: queries.len(),
                    actual: h.len(),
                })
            }
            Some(h) => h,
            None => vec![Vec::new(); queries.len()],
        };
        Ok(Self {
            queries,
            positives,
            hard_negatives,
        })
    }

    /// Uses at most `negatives_per_query` of each example's negatives.
    pub fn from_examples(examples: &[&'a TrainExample], negatives_per_query: usize) -> Result<Self> {
        Self::new(
            examples.iter().map(|e| &e.query).collect(),
            examples.iter().map(|e| &e.positive).collect(),
            Some(
                examples
                    .iter()
                    .map(|e| e.negatives.iter().take(negatives_per_query).collect())
                    .collect(),
            ),
        )
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

struct Forward {
    loss: f64,
    queries: Vec<Activation>,
    positives: Vec<Activation>,
    negatives: Vec<Vec<Activation>>,
    /// Softmax over each query's candidates: positives first, then its negatives.
    probs: Vec<Vec<f64>>,
}

fn forward(batch: &Batch<'_>, params: &DualEncoderParams) -> Result<Forward> {
    let queries = batch
        .queries
        .iter()
        .map(|q| params.forward_query(q))
        .collect::<Result<Vec<_>>>()?;
    let positives = batch
        .positives
        .iter()
        .map(|d| params.forward_knowledge(d))
        .collect::<Result<Vec<_>>>()?;
    let negatives = batch
        .hard_negatives
        .iter()
        .map(|negs| negs.iter().map(|d| params.forward_knowledge(d)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;

    let b = batch.len();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(b);
    for (i, qa) in queries.iter().enumerate() {
        let scores: Vec<f64> = positives
            .iter()
            .chain(&negatives[i])
            .map(|ka| dot(&qa.z, &ka.z))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += (max - scores[i]) + total.ln();
        probs.push(exps.iter().map(|e| e / total).collect());
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(Forward {
        loss,
        queries,
        positives,
        negatives,
        probs,
    })
}

/// Mean over the batch of −log softmax of each query's positive.
pub fn contrastive_loss(batch: &Batch<'_>, params: &DualEncoderParams) -> Result<f64> {
    Ok(forward(batch, params)?.loss)
}

/// Loss and its exact gradient with respect to every parameter tensor.
pub fn loss_and_gradient(batch: &Batch<'_>, params: &DualEncoderParams) -> Result<(f64, GradientSet)> {
    let fw = forward(batch, params)?;
    let b = batch.len();
    let dim = params.dim;
    let inv_b = 1.0 / b as f64;

    let mut dq = vec![vec![0.0; dim]; b];
    let mut dpos = vec![vec![0.0; dim]; b];
    let mut dneg: Vec<Vec<Vec<f64>>> = fw
        .negatives
        .iter()
        .map(|negs| vec![vec![0.0; dim]; negs.len()])
        .collect();

    for i in 0..b {
        let zq = &fw.queries[i].z;
        for (c, &p) in fw.probs[i].iter().enumerate() {
            let coef = (p - if c == i { 1.0 } else { 0.0 }) * inv_b;
            if coef == 0.0 {
                continue;
            }
            let (zk, dk) = if c < b {
                (&fw.positives[c].z, &mut dpos[c])
            } else {
                (&fw.negatives[i][c - b].z, &mut dneg[i][c - b])
            };
            for d in 0..dim {
                dq[i][d] += coef * zk[d];
                dk[d] += coef * zq[d];
            }
        }
    }

    let mut grad = params.tensors.zeros_like();
    for (act, g) in fw.queries.iter().zip(&dq) {
        params.backward(act, g, &mut grad);
    }
    for (act, g) in fw.positives.iter().zip(&dpos) {
        params.backward(act, g, &mut grad);
    }
    for (acts, gs) in fw.negatives.iter().zip(&dneg) {
        for (act, g) in acts.iter().zip(gs) {
            params.backward(act, g, &mut grad);
        }
    }
    Ok((fw.loss, grad))
}

pub fn loss_gradient(batch: &Batch<'_>, params: &DualEncoderParams) -> Result<GradientSet> {
    Ok(loss_and_gradient(batch, params)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negatives_per_query: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            negatives_per_query: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One pass over `data` in a seeded order. Returns the example-weighted mean
/// loss, each batch's loss measured before its update. The trailing partial
/// batch is trained, not dropped.
pub fn train_epoch(
    data: &[TrainExample],
    config: &TrainConfig,
    params: &mut DualEncoderParams,
    epoch: usize,
) -> Result<f64> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch)));

    let mut weighted = 0.0;
    for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
        let examples: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_examples(&examples, config.negatives_per_query)?;
        let diverged = |loss: f64| Error::Diverged {
            epoch,
            batch: batch_idx,
            loss,
        };
        let (loss, grad) = match loss_and_gradient(&batch, params) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if config.learning_rate != 0.0 {
            params.tensors.add_scaled(-config.learning_rate, &grad);
            if !params.tensors.all_finite() {
                return Err(diverged(loss));
            }
        }
        weighted += loss * batch.len() as f64;
    }
    Ok(weighted / data.len() as f64)
}

/// Runs `config.epochs` epochs; returns the mean loss of each.
pub fn train(
    data: &[TrainExample],
    config: &TrainConfig,
    params: &mut DualEncoderParams,
) -> Result<Vec<f64>> {
    (0..config.epochs)
        .map(|epoch| train_epoch(data, config, params, epoch))
        .collect()
}

/// Top-`depth` non-gold documents per query under the current encoders.
pub fn mine_hard_negatives(
    params: &DualEncoderParams,
    corpus: &[KnowledgeDoc],
    queries: &[MultimodalQuery],
    depth: usize,
) -> Result<HardNegativeSet> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let index = EmbeddingMatrix::build(corpus, params)?;
    mine_with_index(&index, params, queries, depth)
}

/// As [`mine_hard_negatives`] over a prebuilt index. Retrieves
/// `depth + |gold|` candidates, then drops gold ids.
pub fn mine_with_index(
    index: &EmbeddingMatrix,
    params: &DualEncoderParams,
    queries: &[MultimodalQuery],
    depth: usize,
) -> Result<HardNegativeSet> {
    if depth < 1 {
        return Err(Error::InvalidArgument("mining depth must be >= 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mined = queries
        .par_iter()
        .map(|q| {
            let gold: HashSet<&str> = q.gold_ids.iter().map(String::as_str).collect();
            let zq = params.encode_query(q)?;
            let hits = index.mips_topk(&zq, depth + gold.len())?;
            let negs: Vec<String> = hits
                .hits
                .into_iter()
                .filter(|h| !gold.contains(h.doc_id.as_str()))
                .take(depth)
                .map(|h| h.doc_id)
                .collect();
            Ok((q.id.clone(), negs))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mined.into_iter().collect())
}

/// Replaces each example's negatives with its mined list, resolved in `corpus`.
pub fn attach_hard_negatives(
    examples: &mut [TrainExample],
    mined: &HardNegativeSet,
    corpus: &[KnowledgeDoc],
) -> Result<()> {
    let by_id: HashMap<&str, &KnowledgeDoc> = corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    for ex in examples.iter_mut() {
        let ids = mined.get(&ex.query.id).map(Vec::as_slice).unwrap_or_default();
        ex.negatives = ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|d| (*d).clone()).ok_or_else(|| {
                    Error::InvalidArgument(format!("negative `{id}` is not in the corpus"))
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardNegativeRecord {
    pub qid: String,
    pub neg_ids: Vec<String>,
}

pub fn write_hard_negatives(set: &HardNegativeSet, path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<HardNegativeRecord> = set
        .iter()
        .map(|(qid, negs)| HardNegativeRecord {
            qid: qid.clone(),
            neg_ids: negs.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn load_hard_negatives(path: impl AsRef<Path>) -> Result<HardNegativeSet> {
    let records: Vec<HardNegativeRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(|r| (r.qid, r.neg_ids)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Vocab;

    fn q(id: &str, text: &str) -> MultimodalQuery {
        MultimodalQuery::new(id, text, vec![])
    }

    fn d(id: &str, text: &str) -> KnowledgeDoc {
        KnowledgeDoc::new(id, text)
    }

    fn small_params(seed: u64) -> DualEncoderParams {
        let tv = Vocab::from_texts(["red bus", "tall tower", "iron"]);
        let kv = Vocab::from_texts(["london red bus", "paris tall tower", "iron bridge"]);
        DualEncoderParams::init(8, tv, kv, 4, seed).unwrap()
    }

    /// Zero tables; knowledge bias set so every z_k = tanh(bias).
    fn engineered(zq: &[f64], zk: &[f64]) -> DualEncoderParams {
        let atanh = |v: &[f64]| v.iter().map(|x| x.atanh()).collect::<Vec<_>>();
        let mut p =
            DualEncoderParams::zeros(zq.len(), Vocab::default(), Vocab::default(), 2, 0).unwrap();
        p.tensors.query_bias = atanh(zq);
        p.tensors.knowledge_bias = atanh(zk);
        p
    }

    #[test]
    fn singleton_batch_has_zero_loss_and_gradient() {
        let p = small_params(1);
        let (qq, dd) = (q("q", "red bus"), d("d", "london bus"));
        let batch = Batch::new(vec![&qq], vec![&dd], None).unwrap();
        assert_eq!(contrastive_loss(&batch, &p).unwrap(), 0.0);
        assert_eq!(loss_gradient(&batch, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn uniform_two_candidates_is_ln2() {
        let p = engineered(&[0.5, 0.0], &[0.5, 0.0]);
        let (q1, q2) = (q("a", "x"), q("b", "y"));
        let (d1, d2) = (d("1", "x"), d("2", "y"));
        let batch = Batch::new(vec![&q1, &q2], vec![&d1, &d2], None).unwrap();
        let loss = contrastive_loss(&batch, &p).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn engineered_hard_negative_value() {
        // z_q = tanh(1)·(1,1,1,1); the positive's z_k has every component c
        // with 4·tanh(1)·c = 2, the negative is an UNK-only doc with z_k = 0.
        let mut p =
            DualEncoderParams::zeros(4, Vocab::default(), Vocab::from_texts(["pos"]), 2, 0)
                .unwrap();
        let c = 2.0 / (4.0 * 1.0f64.tanh());
        p.tensors.query_bias = vec![1.0; 4];
        p.tensors.knowledge_emb.set(2, 0, 1.0);
        for r in 0..4 {
            p.tensors.knowledge_proj.set(r, 0, c.atanh());
        }
        let (qq, pos, neg) = (q("q", "x"), d("p", "pos"), d("n", "other"));
        assert!((p.relevance_score(&qq, &pos).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(p.relevance_score(&qq, &neg).unwrap(), 0.0);
        let batch = Batch::new(vec![&qq], vec![&pos], Some(vec![vec![&neg]])).unwrap();
        let loss = contrastive_loss(&batch, &p).unwrap();
        assert!((loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_shape_errors() {
        let (qq, dd) = (q("q", "x"), d("d", "x"));
        assert!(Batch::new(vec![], vec![], None).is_err());
        assert!(Batch::new(vec![&qq], vec![&dd, &dd], None).is_err());
        assert!(Batch::new(vec![&qq], vec![&dd], Some(vec![])).is_err());
    }

    #[test]
    fn unused_rows_get_zero_gradient() {
        let p = small_params(2);
        let (q1, q2) = (q("a", "red bus"), q("b", "tall"));
        let (d1, d2) = (d("1", "london red bus"), d("2", "paris tower"));
        let batch = Batch::new(vec![&q1, &q2], vec![&d1, &d2], None).unwrap();
        let g = loss_gradient(&batch, &p).unwrap();
        let iron = p.text_vocab.id("iron") as usize;
        assert!(g.text_emb.row(iron).iter().all(|&v| v == 0.0));
        let bridge = p.knowledge_vocab.id("bridge") as usize;
        assert!(g.knowledge_emb.row(bridge).iter().all(|&v| v == 0.0));
        assert!(g.visual_emb.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.text_emb.row(p.text_vocab.id("red") as usize).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hard_negative_never_lowers_loss() {
        let p = small_params(3);
        let (q1, q2) = (q("a", "red bus"), q("b", "tall tower"));
        let (d1, d2, n) = (d("1", "london red bus"), d("2", "paris tall tower"), d("3", "iron bridge"));
        let plain = Batch::new(vec![&q1, &q2], vec![&d1, &d2], None).unwrap();
        let hard = Batch::new(vec![&q1, &q2], vec![&d1, &d2], Some(vec![vec![&n], vec![]])).unwrap();
        assert!(contrastive_loss(&hard, &p).unwrap() >= contrastive_loss(&plain, &p).unwrap());
    }

    fn toy_data() -> Vec<TrainExample> {
        vec![
            TrainExample::new(q("a", "red bus"), d("1", "london red bus")),
            TrainExample::new(q("b", "tall tower"), d("2", "paris tall tower")),
            TrainExample::new(q("c", "iron"), d("3", "iron bridge")),
        ]
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p = small_params(4);
        let before = p.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..Default::default()
        };
        let loss = train_epoch(&toy_data(), &cfg, &mut p, 0).unwrap();
        assert!(loss > 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn single_pair_never_moves() {
        let mut p = small_params(5);
        let before = p.clone();
        let data = vec![TrainExample::new(q("a", "red bus"), d("1", "london red bus"))];
        let cfg = TrainConfig {
            batch_size: 1,
            epochs: 3,
            ..Default::default()
        };
        assert_eq!(train(&data, &cfg, &mut p).unwrap(), vec![0.0; 3]);
        assert_eq!(p, before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 2,
            epochs: 30,
            seed: 9,
            negatives_per_query: 1,
        };
        let mut a = small_params(6);
        let mut b = small_params(6);
        let la = train(&toy_data(), &cfg, &mut a).unwrap();
        let lb = train(&toy_data(), &cfg, &mut b).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(la.last().unwrap() < la.first().unwrap());
    }

    #[test]
    fn bad_config_and_empty_data() {
        let mut p = small_params(7);
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train_epoch(&toy_data(), &cfg, &mut p, 0).is_err());
        assert!(train_epoch(&[], &TrainConfig::default(), &mut p, 0).is_err());
    }

    #[test]
    fn divergence_is_located() {
        let mut p = small_params(8);
        p.tensors.query_bias[0] = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 2,
            ..Default::default()
        };
        match train_epoch(&toy_data(), &cfg, &mut p, 3) {
            Err(Error::Diverged { epoch, batch, .. }) => {
                assert_eq!(epoch, 3);
                assert_eq!(batch, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mining_small_cases() {
        let p = small_params(9);
        let query = q("a", "red bus").with_gold("g");
        let only_gold = vec![d("g", "london red bus")];
        let mined = mine_hard_negatives(&p, &only_gold, &[query.clone()], 100).unwrap();
        assert!(mined["a"].is_empty());

        let three = vec![d("g", "london red bus"), d("x", "paris tower"), d("y", "iron bridge")];
        let mined = mine_hard_negatives(&p, &three, &[query.clone()], 100).unwrap();
        let zq = p.encode_query(&query).unwrap();
        let mut expect: Vec<(f64, &str)> = three[1..]
            .iter()
            .map(|doc| (dot(&p.encode_knowledge(doc).unwrap(), &zq), doc.id.as_str()))
            .collect();
        expect.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        assert_eq!(mined["a"], expect.iter().map(|e| e.1).collect::<Vec<_>>());

        assert!(mine_hard_negatives(&p, &[], &[query.clone()], 5).is_err());
        assert!(mine_hard_negatives(&p, &three, &[query], 0).is_err());
    }

    #[test]
    fn negatives_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.jsonl");
        let set: HardNegativeSet = [
            ("q1".to_string(), vec!["a".to_string(), "b".to_string()]),
            ("q2".to_string(), vec![]),
        ]
        .into_iter()
        .collect();
        write_hard_negatives(&set, &path).unwrap();
        assert_eq!(load_hard_negatives(&path).unwrap(), set);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"qid\":\"q1\",\"neg_ids\":[\"a\",\"b\"]}"));
    }

    #[test]
    fn attach_resolves_ids() {
        let mut data = toy_data();
        let corpus: Vec<KnowledgeDoc> = data.iter().map(|e| e.positive.clone()).collect();
        let mined: HardNegativeSet = [("a".to_string(), vec!["2".to_string()])].into_iter().collect();
        attach_hard_negatives(&mut data, &mined, &corpus).unwrap();
        assert_eq!(data[0].negatives, vec![corpus[1].clone()]);
        assert!(data[1].negatives.is_empty());
        let bad: HardNegativeSet = [("a".to_string(), vec!["zzz".to_string()])].into_iter().collect();
        assert!(attach_hard_negatives(&mut data, &bad, &corpus).is_err());
    }
}
