//! Fixture-level checks against independent brute-force oracles.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use mmret::dense::EmbeddingMatrix;
use mmret::encoder::dot;
use mmret::metrics::{judge_relevance, RelevanceJudgments};
use mmret::model::{load_corpus, load_queries, load_run, write_run, KnowledgeDoc, MultimodalQuery, RunFile};
use mmret::sparse::{Bm25Index, DEFAULT_B, DEFAULT_K1};
use mmret::synthetic::{SyntheticConfig, SyntheticTask};
use mmret::trainer::{mine_hard_negatives, train, TrainConfig};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn corpus50() -> Vec<KnowledgeDoc> {
    load_corpus(fixture("corpus50.jsonl")).unwrap().0
}

fn trained_small() -> (SyntheticTask, mmret::encoder::DualEncoderParams) {
    let task = SyntheticTask::generate(&SyntheticConfig::default()).unwrap();
    let mut p = task.init_params(16, 4).unwrap();
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    train(&task.examples(), &config, &mut p).unwrap();
    (task, p)
}

#[test]
fn postings_match_brute_force_counts() {
    let corpus = vec![
        KnowledgeDoc::new("x", "Harbor lights harbor fog"),
        KnowledgeDoc::new("y", "Fog over the valley"),
        KnowledgeDoc::new("z", "valley valley harbor bells ring"),
    ];
    let index = Bm25Index::build(&corpus, DEFAULT_K1, DEFAULT_B).unwrap();
    let mut counts: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
    for (i, d) in corpus.iter().enumerate() {
        for w in d.text.split(' ') {
            let w = w.to_lowercase();
            if ["the", "over"].contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w).or_default().entry(i).or_default() += 1;
        }
    }
    assert_eq!(index.terms().count(), counts.len());
    for (term, docs) in &counts {
        let got: BTreeMap<usize, u32> = index
            .postings(term)
            .iter()
            .map(|p| (p.ordinal as usize, p.tf))
            .collect();
        assert_eq!(&got, docs, "{term}");
    }
    assert_eq!(index.doc_len(0), 4);
    assert_eq!(index.doc_len(1), 2);
    assert_eq!(index.doc_len(2), 5);
}

#[test]
fn dense_index_is_bitwise_reproducible() {
    let (_, p) = trained_small();
    let corpus = corpus50();
    let a = EmbeddingMatrix::build(&corpus, &p).unwrap();
    let b = EmbeddingMatrix::build(&corpus, &p).unwrap();
    for i in 0..corpus.len() {
        let (ra, rb): (Vec<u64>, Vec<u64>) = (
            a.row(i).iter().map(|x| x.to_bits()).collect(),
            b.row(i).iter().map(|x| x.to_bits()).collect(),
        );
        assert_eq!(ra, rb);
    }
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.emb"), dir.path().join("b.emb"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
}

#[test]
fn index_scores_agree_with_relevance_score() {
    let (task, p) = trained_small();
    let index = EmbeddingMatrix::build(&task.corpus, &p).unwrap();
    for q in task.queries.iter().take(8) {
        let zq = p.encode_query(q).unwrap();
        for (i, d) in task.corpus.iter().enumerate().step_by(17) {
            let via_index = dot(index.row(i), &zq);
            assert!((via_index - p.relevance_score(q, d).unwrap()).abs() <= 1e-12);
        }
    }
}

#[test]
fn fusion_on_fixture_matches_brute_force() {
    let (_, p) = trained_small();
    let corpus = corpus50();
    let index = EmbeddingMatrix::build(&corpus, &p).unwrap();
    let image: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 / 5.0 - 0.4).collect();
    let text: Vec<f64> = (0..16).map(|i| ((i * 3) % 7) as f64 / 7.0 - 0.5).collect();
    let si: Vec<f64> = (0..corpus.len()).map(|i| dot(index.row(i), &image)).collect();
    let st: Vec<f64> = (0..corpus.len()).map(|i| dot(index.row(i), &text)).collect();
    let order = |s: &[f64]| {
        let mut o: Vec<usize> = (0..s.len()).collect();
        o.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(corpus[a].id.cmp(&corpus[b].id)));
        o
    };
    let pool: HashSet<usize> = order(&si)[..10].iter().chain(&order(&st)[..10]).copied().collect();
    let sum: Vec<f64> = si.iter().zip(&st).map(|(a, b)| a + b).collect();
    let want: Vec<&str> = order(&sum)
        .into_iter()
        .filter(|i| pool.contains(i))
        .take(5)
        .map(|i| corpus[i].id.as_str())
        .collect();
    let got = index.late_fusion_rerank(&image, &text, 10, 5).unwrap();
    assert_eq!(got.doc_ids().collect::<Vec<_>>(), want);
}

#[test]
fn mining_on_fixture_matches_brute_force() {
    let (_, p) = trained_small();
    let corpus = corpus50();
    let queries = load_queries(fixture("queries10.jsonl")).unwrap();
    let mined = mine_hard_negatives(&p, &corpus, &queries, 10).unwrap();
    for q in &queries {
        let mut scored: Vec<(f64, &str)> = corpus
            .iter()
            .map(|d| (p.relevance_score(q, d).unwrap(), d.id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let want: Vec<&str> = scored
            .into_iter()
            .map(|(_, id)| id)
            .filter(|id| !q.gold_ids.iter().any(|g| g == id))
            .take(10)
            .collect();
        assert_eq!(mined[&q.id], want, "{}", q.id);
    }
}

#[test]
fn hundred_query_run_round_trips() {
    let (task, p) = trained_small();
    let index = EmbeddingMatrix::build(&task.corpus, &p).unwrap();
    let run: RunFile = task
        .queries
        .iter()
        .take(100)
        .map(|q| (q.id.clone(), index.mips_topk(&p.encode_query(q).unwrap(), 20).unwrap()))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.txt");
    write_run(&run, &path).unwrap();
    let back = load_run(&path).unwrap();
    assert_eq!(back.len(), 100);
    for (qid, list) in &run {
        let other = &back[qid];
        assert_eq!(list.doc_ids().collect::<Vec<_>>(), other.doc_ids().collect::<Vec<_>>());
        for (a, b) in list.hits.iter().zip(&other.hits) {
            assert!((a.score - b.score).abs() <= 5e-7);
        }
    }
}

#[test]
fn answer_judgments_match_scan_oracle() {
    let docs: Vec<KnowledgeDoc> = (0..20)
        .map(|i| {
            let text = match i % 4 {
                0 => format!("The  Brown BEAR number {i} lives near New\tYork."),
                1 => format!("A grizzly sighting, report {i}."),
                2 => format!("Nothing relevant in document {i}"),
                _ => format!("Polar bears and new york city {i}"),
            };
            KnowledgeDoc::new(format!("doc{i}"), text)
        })
        .collect();
    let answer_sets: [&[&str]; 5] = [
        &["new york"],
        &["grizzly", "brown"],
        &["Brown bear"],
        &["penguin"],
        &["  BEAR  number 1 "],
    ];
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let queries: Vec<MultimodalQuery> = answer_sets
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut q = MultimodalQuery::new(format!("q{i}"), "what is shown", vec![]);
            q.answers = Some(a.iter().map(|s| s.to_string()).collect());
            q
        })
        .collect();
    let judged = RelevanceJudgments::from_answers(&queries, &docs, false);
    for (q, answers) in queries.iter().zip(answer_sets) {
        let owned: Vec<String> = answers.iter().map(|s| s.to_string()).collect();
        for d in &docs {
            let oracle = answers.iter().any(|a| norm(&d.text).contains(&norm(a)));
            assert_eq!(judge_relevance(d, &owned), oracle, "{} / {}", q.id, d.id);
            assert_eq!(judged.relevant[&q.id].contains(&d.id), oracle, "{} / {}", q.id, d.id);
        }
    }
}

#[test]
fn synthetic_training_lowers_loss() {
    let task = SyntheticTask::generate(&SyntheticConfig::default()).unwrap();
    let mut p = task.init_params(64, 0).unwrap();
    let losses = train(&task.examples(), &TrainConfig::default(), &mut p).unwrap();
    assert_eq!(losses.len(), 50);
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}
