//! Dataset forging: ReMuQ-style benchmarks from WebQA-like multiple-choice
//! records, and VL-ICT (image, masked sentence, remaining passage) triplets
//! from WiT-like page records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_jsonl, KnowledgeDoc, MultimodalQuery};
use crate::textproc::{split_sentences, tfidf_keywords, tokenize, tokenize_spans, TfIdfModel, MASK_TOKEN};
use crate::trainer::TrainExample;

/// Image key → visual token sequence.
pub type VisualTokenMap = HashMap<String, Vec<u32>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct VisualTokenRecord {
    image_ref: String,
    visual_tokens: Vec<u32>,
}

pub fn load_visual_tokens(path: impl AsRef<Path>) -> Result<VisualTokenMap> {
    let records: Vec<VisualTokenRecord> = read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| (r.image_ref, r.visual_tokens))
        .collect())
}

/// Per-record seed so results do not depend on processing order.
fn record_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ⌈x⌉ tolerant of products like 0.7 × 10 = 7.000000000000001.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!("{name} {r} outside [0, 1]")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ReMuQ

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebQaChoice {
    pub kind: ChoiceKind,
    pub content: String,
    #[serde(default)]
    pub is_answer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebQaRecord {
    pub qid: String,
    pub question: String,
    pub choices: Vec<WebQaChoice>,
    #[serde(default)]
    pub image_ref: String,
}

impl WebQaRecord {
    fn has_answer(&self, kind: ChoiceKind) -> bool {
        self.choices.iter().any(|c| c.is_answer && c.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemuqSample {
    pub qid: String,
    pub augmented_question: String,
    pub image_ref: String,
    pub gold_knowledge_id: String,
    pub removed_keywords: Vec<String>,
}

impl RemuqSample {
    pub fn to_query(&self, visual: &VisualTokenMap) -> MultimodalQuery {
        MultimodalQuery {
            id: self.qid.clone(),
            text: self.augmented_question.clone(),
            visual_tokens: visual.get(&self.image_ref).cloned().unwrap_or_default(),
            gold_ids: vec![self.gold_knowledge_id.clone()],
            answers: None,
        }
    }
}

/// Which texts supply the document frequencies for keyword selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KeywordSource {
    #[default]
    Corpus,
    Questions,
}

impl fmt::Display for KeywordSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeywordSource::Corpus => "corpus",
            KeywordSource::Questions => "questions",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemuqOptions {
    pub top_n: usize,
    pub train_frac: f64,
    pub seed: u64,
    pub keyword_source: KeywordSource,
}

impl Default for RemuqOptions {
    fn default() -> Self {
        Self {
            top_n: 3,
            train_frac: 0.7,
            seed: 0,
            keyword_source: KeywordSource::Corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemuqManifest {
    pub input_records: usize,
    pub kept_records: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub corpus_count: usize,
    pub seed: u64,
    pub top_n: usize,
    pub train_frac: f64,
    pub keyword_source: KeywordSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemuqDataset {
    pub train: Vec<RemuqSample>,
    pub test: Vec<RemuqSample>,
    pub corpus: Vec<KnowledgeDoc>,
    pub manifest: RemuqManifest,
}

/// Deletes every token of `text` whose lowercase surface is a keyword,
/// leaving other characters in place, then collapses whitespace.
pub fn remove_keywords(text: &str, keywords: &[String]) -> String {
    let drop: HashSet<&str> = keywords.iter().map(String::as_str).collect();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for st in tokenize_spans(text) {
        if drop.contains(st.token.surface.as_str()) {
            out.push_str(&text[cursor..st.span.start]);
            cursor = st.span.end;
        }
    }
    out.push_str(&text[cursor..]);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Filters records answerable only with both an image and a text, removes the
/// top tf-idf keywords from each question, pools every text choice into a
/// deduplicated corpus, and splits train/test after a seeded shuffle.
pub fn build_remuq(records: &[WebQaRecord], options: &RemuqOptions) -> Result<RemuqDataset> {
    if !(options.train_frac > 0.0 && options.train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} outside (0, 1)",
            options.train_frac
        )));
    }
    let kept: Vec<&WebQaRecord> = records
        .iter()
        .filter(|r| !r.question.trim().is_empty())
        .filter(|r| r.has_answer(ChoiceKind::Image) && r.has_answer(ChoiceKind::Text))
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "no record has both an image and a text answer".into(),
        ));
    }

    let mut corpus: Vec<KnowledgeDoc> = Vec::new();
    let mut id_of: HashMap<&str, String> = HashMap::new();
    for rec in &kept {
        for choice in rec.choices.iter().filter(|c| c.kind == ChoiceKind::Text) {
            if choice.content.trim().is_empty() || id_of.contains_key(choice.content.as_str()) {
                continue;
            }
            let id = format!("k{:06}", corpus.len());
            id_of.insert(choice.content.as_str(), id.clone());
            corpus.push(KnowledgeDoc::new(id, choice.content.clone()));
        }
    }

    let model = match options.keyword_source {
        KeywordSource::Corpus => TfIdfModel::fit(corpus.iter().map(|d| d.text.as_str()))?,
        KeywordSource::Questions => TfIdfModel::fit(kept.iter().map(|r| r.question.as_str()))?,
    };

    let mut samples: Vec<RemuqSample> = kept
        .iter()
        .map(|rec| {
            let gold = rec
                .choices
                .iter()
                .find(|c| c.is_answer && c.kind == ChoiceKind::Text && id_of.contains_key(c.content.as_str()))
                .map(|c| id_of[c.content.as_str()].clone())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("record `{}` has an empty text answer", rec.qid))
                })?;
            let keywords = tfidf_keywords(&rec.question, &model, options.top_n);
            Ok(RemuqSample {
                qid: rec.qid.clone(),
                augmented_question: remove_keywords(&rec.question, &keywords),
                image_ref: rec.image_ref.clone(),
                gold_knowledge_id: gold,
                removed_keywords: keywords,
            })
        })
        .collect::<Result<_>>()?;

    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let n_train = ((samples.len() as f64 * options.train_frac) + 1e-9).floor() as usize;
    let test = samples.split_off(n_train.min(samples.len()));
    let train = samples;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split of {} records at {} leaves an empty side",
            train.len() + test.len(),
            options.train_frac
        )));
    }
    let manifest = RemuqManifest {
        input_records: records.len(),
        kept_records: kept.len(),
        train_count: train.len(),
        test_count: test.len(),
        corpus_count: corpus.len(),
        seed: options.seed,
        top_n: options.top_n,
        train_frac: options.train_frac,
        keyword_source: options.keyword_source,
    };
    Ok(RemuqDataset {
        train,
        test,
        corpus,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// VL-ICT

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitRecord {
    pub title_or_caption: String,
    pub passage: String,
    #[serde(default)]
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlIctTriplet {
    pub text: String,
    pub image_ref: String,
    pub knowledge: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    TooFewSentences,
    EmptyCaption,
    NoMatch,
    TextInKnowledge,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::TooFewSentences => "too-few-sentences",
            SkipReason::EmptyCaption => "empty-caption",
            SkipReason::NoMatch => "no-match",
            SkipReason::TextInKnowledge => "text-in-knowledge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlIctOptions {
    pub mask_ratio: f64,
    pub seed: u64,
    /// Pick a random matching sentence instead of the first.
    pub random_sentence: bool,
}

impl Default for VlIctOptions {
    fn default() -> Self {
        Self {
            mask_ratio: 0.0,
            seed: 0,
            random_sentence: false,
        }
    }
}

/// Masks every content token of `sentence` that also occurs in `caption`, then
/// a seeded ⌈ratio · remaining⌉ of the other content tokens. Everything else
/// is left byte-for-byte.
pub fn mask_overlap_keywords(sentence: &str, caption: &str, mask_ratio: f64, seed: u64) -> String {
    let caption_terms: HashSet<String> = tokenize(caption, true)
        .into_iter()
        .filter(|t| t.is_content())
        .map(|t| t.surface)
        .collect();
    let spans = tokenize_spans(sentence);
    let mut masked = vec![false; spans.len()];
    let mut remaining = Vec::new();
    for (i, st) in spans.iter().enumerate() {
        if !st.token.is_content() {
            continue;
        }
        if caption_terms.contains(&st.token.surface) {
            masked[i] = true;
        } else {
            remaining.push(i);
        }
    }
    let extra = ceil_count(mask_ratio.clamp(0.0, 1.0) * remaining.len() as f64).min(remaining.len());
    if extra > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &i in remaining.choose_multiple(&mut rng, extra) {
            masked[i] = true;
        }
    }
    let mut out = String::with_capacity(sentence.len());
    let mut cursor = 0;
    for (st, m) in spans.iter().zip(masked) {
        if m {
            out.push_str(&sentence[cursor..st.span.start]);
            out.push_str(MASK_TOKEN);
            cursor = st.span.end;
        }
    }
    out.push_str(&sentence[cursor..]);
    out
}

/// Finds the sentence naming the caption entity, masks it, and pairs it with
/// the rest of the passage.
pub fn build_vlict_triplet(
    record: &WitRecord,
    mask_ratio: f64,
    seed: u64,
) -> std::result::Result<VlIctTriplet, SkipReason> {
    build_vlict_triplet_with(
        record,
        &VlIctOptions {
            mask_ratio,
            seed,
            random_sentence: false,
        },
    )
}

pub fn build_vlict_triplet_with(
    record: &WitRecord,
    options: &VlIctOptions,
) -> std::result::Result<VlIctTriplet, SkipReason> {
    let sentences = split_sentences(&record.passage);
    if sentences.len() < 2 {
        return Err(SkipReason::TooFewSentences);
    }
    let caption_terms: Vec<String> = tokenize(&record.title_or_caption, true)
        .into_iter()
        .filter(|t| t.is_content())
        .map(|t| t.surface)
        .collect();
    if caption_terms.is_empty() {
        return Err(SkipReason::EmptyCaption);
    }
    let matching: Vec<usize> = sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let terms: HashSet<String> = tokenize(s, false).into_iter().map(|t| t.surface).collect();
            caption_terms.iter().all(|c| terms.contains(c))
        })
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let chosen = if options.random_sentence {
        *matching.choose(&mut rng).ok_or(SkipReason::NoMatch)?
    } else {
        *matching.first().ok_or(SkipReason::NoMatch)?
    };
    let mask_seed = record_seed(options.seed, usize::MAX);
    let text = mask_overlap_keywords(
        &sentences[chosen],
        &record.title_or_caption,
        options.mask_ratio,
        mask_seed,
    );
    let knowledge = sentences
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != chosen)
        .map(|(_, s)| s.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    if knowledge.contains(&text) {
        return Err(SkipReason::TextInKnowledge);
    }
    Ok(VlIctTriplet {
        text,
        image_ref: record.image_ref.clone(),
        knowledge,
    })
}

/// On-disk triplet record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub qid: String,
    pub text: String,
    #[serde(default)]
    pub visual_tokens: Vec<u32>,
    pub knowledge: String,
}

impl TripletRecord {
    pub fn knowledge_id(&self) -> String {
        format!("{}-k", self.qid)
    }

    pub fn to_example(&self) -> TrainExample {
        TrainExample::new(
            MultimodalQuery {
                id: self.qid.clone(),
                text: self.text.clone(),
                visual_tokens: self.visual_tokens.clone(),
                gold_ids: vec![self.knowledge_id()],
                answers: None,
            },
            KnowledgeDoc::new(self.knowledge_id(), self.knowledge.clone()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlIctManifest {
    pub input_records: usize,
    pub triplets: usize,
    pub skipped: BTreeMap<String, usize>,
    pub mask_ratio: f64,
    pub seed: u64,
    pub random_sentence: bool,
}

/// Builds triplets for every record, in input order. Record `i` draws its
/// randomness from `(seed, i)`.
pub fn build_vlict(
    records: &[WitRecord],
    options: &VlIctOptions,
    visual: &VisualTokenMap,
) -> Result<(Vec<TripletRecord>, VlIctManifest)> {
    check_ratio("mask ratio", options.mask_ratio)?;
    let results: Vec<std::result::Result<VlIctTriplet, SkipReason>> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let opts = VlIctOptions {
                seed: record_seed(options.seed, i),
                ..options.clone()
            };
            build_vlict_triplet_with(rec, &opts)
        })
        .collect();
    let mut triplets = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => triplets.push(TripletRecord {
                qid: format!("wit{i:06}"),
                visual_tokens: visual.get(&t.image_ref).cloned().unwrap_or_default(),
                text: t.text,
                knowledge: t.knowledge,
            }),
            Err(reason) => *skipped.entry(reason.to_string()).or_default() += 1,
        }
    }
    let manifest = VlIctManifest {
        input_records: records.len(),
        triplets: triplets.len(),
        skipped,
        mask_ratio: options.mask_ratio,
        seed: options.seed,
        random_sentence: options.random_sentence,
    };
    Ok((triplets, manifest))
}
