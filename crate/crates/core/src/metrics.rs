//! Relevance judgments and the ranking metrics MRR@K, P@K and R@K.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_jsonl, write_jsonl, KnowledgeDoc, MultimodalQuery, RunFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgmentMode {
    ExplicitGold,
    AnswerSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelRecord {
    pub qid: String,
    pub relevant_ids: Vec<String>,
}

/// Query id → relevant doc ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudgments {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
    pub mode: JudgmentMode,
}

impl RelevanceJudgments {
    pub fn from_gold(queries: &[MultimodalQuery]) -> Self {
        Self {
            relevant: queries
                .iter()
                .map(|q| (q.id.clone(), q.gold_ids.iter().cloned().collect()))
                .collect(),
            mode: JudgmentMode::ExplicitGold,
        }
    }

    /// A doc is relevant to a query when it contains one of the query's answers.
    /// Queries without answers get an empty relevant set.
    pub fn from_answers(
        queries: &[MultimodalQuery],
        corpus: &[KnowledgeDoc],
        token_boundary: bool,
    ) -> Self {
        let normalized: Vec<String> = corpus.iter().map(|d| normalize(&d.text)).collect();
        let relevant = queries
            .iter()
            .map(|q| {
                let answers: Vec<String> = q
                    .answers
                    .iter()
                    .flatten()
                    .map(|a| normalize(a))
                    .filter(|a| !a.is_empty())
                    .collect();
                let rel = corpus
                    .iter()
                    .zip(&normalized)
                    .filter(|(_, text)| {
                        answers
                            .iter()
                            .any(|a| contains_normalized(text, a, token_boundary))
                    })
                    .map(|(d, _)| d.id.clone())
                    .collect();
                (q.id.clone(), rel)
            })
            .collect();
        Self {
            relevant,
            mode: JudgmentMode::AnswerSpan,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<QrelRecord> = read_jsonl(path)?;
        Ok(Self {
            relevant: records
                .into_iter()
                .map(|r| (r.qid, r.relevant_ids.into_iter().collect()))
                .collect(),
            mode: JudgmentMode::ExplicitGold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<QrelRecord> = self
            .relevant
            .iter()
            .map(|(qid, rel)| QrelRecord {
                qid: qid.clone(),
                relevant_ids: rel.iter().cloned().collect(),
            })
            .collect();
        write_jsonl(path, &records)
    }
}

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn contains_normalized(haystack: &str, needle: &str, token_boundary: bool) -> bool {
    if !token_boundary {
        return haystack.contains(needle);
    }
    haystack.match_indices(needle).any(|(at, _)| {
        let before = haystack[..at].chars().next_back();
        let after = haystack[at + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// True iff some answer alias occurs in the document text, both sides
/// lowercased and whitespace-normalized.
pub fn judge_relevance(doc: &KnowledgeDoc, answers: &[String]) -> bool {
    judge_relevance_with(doc, answers, false)
}

/// [`judge_relevance`] with optional whole-token matching.
pub fn judge_relevance_with(doc: &KnowledgeDoc, answers: &[String], token_boundary: bool) -> bool {
    let text = normalize(&doc.text);
    answers.iter().any(|a| {
        let a = normalize(a);
        !a.is_empty() && contains_normalized(&text, &a, token_boundary)
    })
}

/// Mean metric values over all judged queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub query_count: usize,
    pub metrics: IndexMap<String, f64>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn render_table(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = String::new();
        writeln!(out, "{:<width$}  value", "metric").unwrap();
        writeln!(out, "{}  ------", "-".repeat(width)).unwrap();
        for (name, v) in &self.metrics {
            writeln!(out, "{name:<width$}  {v:.4}").unwrap();
        }
        writeln!(out, "queries: {}", self.query_count).unwrap();
        out
    }
}

/// Per query: MRR@K = 1/rank of the first relevant doc within K (else 0),
/// P@K = hits/K, R@K = hits/|relevant| (0 when nothing is relevant).
/// Judged queries absent from the run score 0. MRR@5 is always reported.
pub fn evaluate_run(
    run: &RunFile,
    judgments: &RelevanceJudgments,
    k_list: &[usize],
) -> Result<MetricReport> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::InvalidArgument(
            "k list must be non-empty with every k >= 1".into(),
        ));
    }
    if let Some(qid) = run.keys().find(|q| !judgments.relevant.contains_key(*q)) {
        return Err(Error::MissingJudgment(qid.clone()));
    }

    let mut names: Vec<(String, Metric, usize)> = vec![("MRR@5".into(), Metric::Mrr, 5)];
    for &k in k_list {
        for (prefix, m) in [("MRR", Metric::Mrr), ("P", Metric::Precision), ("R", Metric::Recall)] {
            let name = format!("{prefix}@{k}");
            if !names.iter().any(|(n, _, _)| *n == name) {
                names.push((name, m, k));
            }
        }
    }

    let mut sums = vec![0.0; names.len()];
    let empty = Vec::new();
    for (qid, relevant) in &judgments.relevant {
        let ranked: Vec<&str> = run
            .get(qid)
            .map(|l| l.doc_ids().collect())
            .unwrap_or_else(|| empty.clone());
        for (sum, (_, metric, k)) in sums.iter_mut().zip(&names) {
            *sum += metric.score(&ranked, relevant, *k);
        }
    }
    let n = judgments.relevant.len();
    let metrics = names
        .into_iter()
        .zip(sums)
        .map(|((name, _, _), s)| (name, if n == 0 { 0.0 } else { s / n as f64 }))
        .collect();
    Ok(MetricReport {
        query_count: n,
        metrics,
    })
}

#[derive(Debug, Clone, Copy)]
enum Metric {
    Mrr,
    Precision,
    Recall,
}

impl Metric {
    fn score(self, ranked: &[&str], relevant: &BTreeSet<String>, k: usize) -> f64 {
        let top = &ranked[..ranked.len().min(k)];
        match self {
            Metric::Mrr => top
                .iter()
                .position(|d| relevant.contains(*d))
                .map_or(0.0, |p| 1.0 / (p + 1) as f64),
            Metric::Precision => {
                top.iter().filter(|d| relevant.contains(**d)).count() as f64 / k as f64
            }
            Metric::Recall if relevant.is_empty() => 0.0,
            Metric::Recall => {
                top.iter().filter(|d| relevant.contains(**d)).count() as f64
                    / relevant.len() as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RankedList, ScoredHit};

    fn run_of(lists: &[(&str, &[&str])]) -> RunFile {
        lists
            .iter()
            .map(|(q, docs)| {
                let hits = docs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| ScoredHit::new(*d, -(i as f64)))
                    .collect();
                (q.to_string(), RankedList { hits })
            })
            .collect()
    }

    fn judged(pairs: &[(&str, &[&str])]) -> RelevanceJudgments {
        RelevanceJudgments {
            relevant: pairs
                .iter()
                .map(|(q, rel)| (q.to_string(), rel.iter().map(|s| s.to_string()).collect()))
                .collect(),
            mode: JudgmentMode::ExplicitGold,
        }
    }

    #[test]
    fn judge_examples() {
        let doc = KnowledgeDoc::new("d", "It is located in   New\nYork City.");
        assert!(judge_relevance(&doc, &["new york".into()]));
        let doc = KnowledgeDoc::new("d", "no match here");
        assert!(!judge_relevance(&doc, &["grizzly".into(), "brown".into()]));
    }

    #[test]
    fn token_boundary_flag() {
        let doc = KnowledgeDoc::new("d", "Brownies are baked");
        assert!(judge_relevance_with(&doc, &["brown".into()], false));
        assert!(!judge_relevance_with(&doc, &["brown".into()], true));
        let doc = KnowledgeDoc::new("d", "a brown, bear");
        assert!(judge_relevance_with(&doc, &["brown".into()], true));
    }

    #[test]
    fn gold_at_rank_three() {
        let run = run_of(&[("q", &["a", "b", "g", "c", "d"])]);
        let r = evaluate_run(&run, &judged(&[("q", &["g"])]), &[5]).unwrap();
        assert_eq!(r.get("MRR@5"), Some(1.0 / 3.0));
        assert_eq!(r.get("R@5"), Some(1.0));
        assert_eq!(r.get("P@5"), Some(0.2));
    }

    #[test]
    fn two_query_mrr() {
        let run = run_of(&[("q1", &["g1", "x"]), ("q2", &["a", "b", "c", "g2"])]);
        let r = evaluate_run(&run, &judged(&[("q1", &["g1"]), ("q2", &["g2"])]), &[5]).unwrap();
        assert_eq!(r.get("MRR@5"), Some(0.625));
        assert_eq!(r.query_count, 2);
    }

    #[test]
    fn multi_relevant_precision_recall() {
        let run = run_of(&[("q", &["r1", "x", "r2", "y", "z", "r3", "r4"])]);
        let r = evaluate_run(&run, &judged(&[("q", &["r1", "r2", "r3", "r4"])]), &[5]).unwrap();
        assert_eq!(r.get("P@5"), Some(0.4));
        assert_eq!(r.get("R@5"), Some(0.5));
    }

    #[test]
    fn missing_judgment_named() {
        let run = run_of(&[("q9", &["a"])]);
        let err = evaluate_run(&run, &judged(&[("q1", &["a"])]), &[5]).unwrap_err();
        assert!(err.to_string().contains("q9"));
    }

    #[test]
    fn unretrieved_and_unanswerable_count_as_zero() {
        let run = run_of(&[("q1", &["g"])]);
        let j = judged(&[("q1", &["g"]), ("q2", &["h"]), ("q3", &[])]);
        let r = evaluate_run(&run, &j, &[1]).unwrap();
        assert_eq!(r.query_count, 3);
        assert_eq!(r.get("R@1"), Some(1.0 / 3.0));
        assert_eq!(r.get("MRR@1"), Some(1.0 / 3.0));
    }

    #[test]
    fn bad_k_list() {
        let run = run_of(&[]);
        assert!(evaluate_run(&run, &judged(&[]), &[]).is_err());
        assert!(evaluate_run(&run, &judged(&[]), &[0]).is_err());
    }

    #[test]
    fn answer_span_judgments() {
        let corpus = vec![
            KnowledgeDoc::new("a", "The grizzly bear is brown."),
            KnowledgeDoc::new("b", "Polar bears are white."),
        ];
        let mut q = MultimodalQuery::new("q", "bear colour", vec![]);
        q.answers = Some(vec!["Brown".into()]);
        let j = RelevanceJudgments::from_answers(&[q], &corpus, false);
        assert_eq!(j.mode, JudgmentMode::AnswerSpan);
        assert_eq!(j.relevant["q"], BTreeSet::from(["a".to_string()]));
    }

    #[test]
    fn qrels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qrels.jsonl");
        let j = judged(&[("q1", &["a", "b"]), ("q2", &["c"])]);
        j.save(&p).unwrap();
        assert_eq!(RelevanceJudgments::load(&p).unwrap(), j);
    }

    #[test]
    fn table_renders_every_metric() {
        let run = run_of(&[("q", &["g"])]);
        let r = evaluate_run(&run, &judged(&[("q", &["g"])]), &[1, 10]).unwrap();
        let table = r.render_table();
        for name in r.metrics.keys() {
            assert!(table.contains(name.as_str()));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bounded_monotone_permutation_free(
                ranks in proptest::collection::vec(proptest::collection::vec(0usize..30, 0..20), 1..8),
                rel in proptest::collection::vec(proptest::collection::btree_set(0usize..30, 0..4), 8),
            ) {
                let mut run = RunFile::new();
                let mut j = judged(&[]);
                for (i, docs) in ranks.iter().enumerate() {
                    let mut seen = BTreeSet::new();
                    let hits = docs.iter().filter(|d| seen.insert(**d))
                        .enumerate()
                        .map(|(r, d)| ScoredHit::new(format!("d{d}"), -(r as f64)))
                        .collect();
                    run.insert(format!("q{i}"), RankedList { hits });
                    j.relevant.insert(format!("q{i}"), rel[i].iter().map(|d| format!("d{d}")).collect());
                }
                let ks = [1, 2, 3, 5, 10, 20];
                let r = evaluate_run(&run, &j, &ks).unwrap();
                for v in r.metrics.values() {
                    prop_assert!((0.0..=1.0).contains(v));
                }
                for w in ks.windows(2) {
                    let at = |m: &str, k: usize| r.get(&format!("{m}@{k}")).unwrap();
                    prop_assert!(at("R", w[0]) <= at("R", w[1]));
                    prop_assert!(at("MRR", w[0]) <= at("MRR", w[1]));
                }
                let reversed: RunFile = run.iter().rev().map(|(k, v)| (k.clone(), v.clone())).collect();
                prop_assert_eq!(evaluate_run(&reversed, &j, &ks).unwrap(), r);
            }
        }
    }
}
