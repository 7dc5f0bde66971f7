//! The `mmret` command line. Each subcommand reads only the files named by its
//! flags and writes its resolved configuration as JSON beside its outputs:
//! `config.json` inside an output directory, or `<stem>.config.json` next to
//! an output file.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{EmbeddingMatrix, DEFAULT_FUSION_DEPTH};
use crate::encoder::{DualEncoderParams, Vocab};
use crate::forge::{
    build_remuq, build_vlict, load_visual_tokens, KeywordSource, RemuqOptions, TripletRecord,
    VisualTokenMap, VlIctOptions, WebQaRecord, WitRecord,
};
use crate::metrics::{evaluate_run, MetricReport, RelevanceJudgments};
use crate::model::{
    load_corpus, load_queries, load_run, read_jsonl, validate_corpus, write_json, write_jsonl,
    write_run, KnowledgeDoc, MultimodalQuery, RankedList, RunFile,
};
use crate::sparse::{Bm25Index, DEFAULT_B, DEFAULT_K1};
use crate::trainer::{
    attach_hard_negatives, load_hard_negatives, mine_hard_negatives, train, write_hard_negatives,
    TrainConfig, TrainExample,
};

/// Columns of the sweep CSV after `ratio`.
pub const SWEEP_METRICS: [&str; 6] = ["MRR@5", "R@5", "R@10", "R@20", "R@50", "R@100"];
const SWEEP_K_LIST: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Debug, Parser)]
#[command(
    name = "mmret",
    version,
    about = "Multimodal-query knowledge retrieval experiments"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores). Never
    /// changes results.
    #[arg(long, env = "MMR_THREADS", global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Build a ReMuQ-style benchmark from WebQA-like records.
    ForgeRemuq(ForgeRemuqArgs),
    /// Build VL-ICT triplets from WiT-like page records.
    ForgeVlict(ForgeVlictArgs),
    /// Build a BM25 index over a corpus.
    IndexBm25(IndexBm25Args),
    /// Encode a corpus with a trained knowledge encoder.
    IndexDense(IndexDenseArgs),
    /// Train (or fine-tune) the dual encoder.
    Train(TrainArgs),
    /// Mine hard negatives with a trained encoder.
    MineNegatives(MineArgs),
    /// Produce a run file.
    Retrieve(RetrieveArgs),
    /// Score a run file against relevance judgments.
    Evaluate(EvaluateArgs),
    /// forge-vlict, train, retrieve and evaluate for each mask ratio.
    SweepMaskRatio(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KeywordSourceArg {
    Corpus,
    Questions,
}

impl From<KeywordSourceArg> for KeywordSource {
    fn from(k: KeywordSourceArg) -> Self {
        match k {
            KeywordSourceArg::Corpus => KeywordSource::Corpus,
            KeywordSourceArg::Questions => KeywordSource::Questions,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ForgeRemuqArgs {
    /// WebQA-like records, one JSON object per line.
    #[arg(long)]
    pub webqa: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image key → visual token records.
    #[arg(long)]
    pub visual_tokens: Option<PathBuf>,
    /// Keywords removed per question.
    #[arg(long, default_value_t = 3)]
    pub top_n: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = KeywordSourceArg::Corpus)]
    pub keyword_source: KeywordSourceArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ForgeVlictArgs {
    /// WiT-like records, one JSON object per line.
    #[arg(long)]
    pub wit: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub visual_tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pick a random caption-matching sentence instead of the first.
    #[arg(long)]
    pub random_sentence: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexBm25Args {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K1)]
    pub k1: f64,
    #[arg(long, default_value_t = DEFAULT_B)]
    pub b: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexDenseArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training data: a triplet file, or queries with gold ids plus a corpus.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, conflicts_with_all = ["queries", "corpus"], required_unless_present = "queries")]
    pub triplets: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    pub queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Mined hard negatives to append per query.
    #[arg(long)]
    pub negatives: Option<PathBuf>,
    /// Continue from an existing model instead of a fresh init.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64, conflicts_with = "init_model")]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub negatives_per_query: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub depth: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieveMode {
    Bm25,
    Dense,
    Fusion,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RetrieveArgs {
    #[arg(long, value_enum)]
    pub mode: RetrieveMode,
    #[arg(long)]
    pub queries: PathBuf,
    /// BM25 index for `bm25`, embedding index for `dense` and `fusion`.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, required_if_eq_any = [("mode", "dense"), ("mode", "fusion")])]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Per-modality candidate depth for `fusion`.
    #[arg(long, default_value_t = DEFAULT_FUSION_DEPTH)]
    pub m: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// `{"qid", "relevant_ids"}` records.
    #[arg(long, conflicts_with = "queries", required_unless_present = "queries")]
    pub qrels: Option<PathBuf>,
    /// Queries whose gold ids are the judgments, or whose answers are matched
    /// against `--corpus`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Judge by answer containment in this corpus.
    #[arg(long, requires = "queries")]
    pub corpus: Option<PathBuf>,
    /// Answer matches must start and end on word boundaries.
    #[arg(long, requires = "corpus")]
    pub token_boundary: bool,
    #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 20, 50, 100])]
    pub k_list: Vec<usize>,
    /// Report path (default: report.json beside the run).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub wit: PathBuf,
    #[arg(long)]
    pub visual_tokens: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Share of triplets held out for evaluation when no external benchmark
    /// is given.
    #[arg(long, default_value_t = 0.3)]
    pub eval_fraction: f64,
    #[arg(long, requires = "eval_corpus")]
    pub eval_queries: Option<PathBuf>,
    #[arg(long, requires = "eval_queries")]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub random_sentence: bool,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// The fully resolved flags of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig<'a> {
    pub version: &'static str,
    pub threads: Option<usize>,
    #[serde(flatten)]
    pub command: &'a Command,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on a runtime failure, 2 on a usage
/// error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("building the thread pool")?;
    pool.install(|| dispatch(&cli.command, cli.threads))
}

fn dispatch(command: &Command, threads: Option<usize>) -> Result<()> {
    match command {
        Command::ForgeRemuq(a) => forge_remuq(a),
        Command::ForgeVlict(a) => forge_vlict(a),
        Command::IndexBm25(a) => index_bm25(a),
        Command::IndexDense(a) => index_dense(a),
        Command::Train(a) => train_cmd(a),
        Command::MineNegatives(a) => mine(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepMaskRatio(a) => sweep(a, threads),
    }?;
    let config = ExperimentConfig {
        version: env!("CARGO_PKG_VERSION"),
        threads,
        command,
    };
    write_json(config_path(command), &config)?;
    Ok(())
}

/// Where `command` records its resolved configuration.
pub fn config_path(command: &Command) -> PathBuf {
    match command {
        Command::ForgeRemuq(a) => a.out_dir.join("config.json"),
        Command::ForgeVlict(a) => a.out_dir.join("config.json"),
        Command::SweepMaskRatio(a) => a.out_dir.join("config.json"),
        Command::IndexBm25(a) => beside(&a.out),
        Command::IndexDense(a) => beside(&a.out),
        Command::Train(a) => beside(&a.out),
        Command::MineNegatives(a) => beside(&a.out),
        Command::Retrieve(a) => beside(&a.out),
        Command::Evaluate(a) => beside(&report_path(a)),
    }
}

fn beside(output: &Path) -> PathBuf {
    output.with_extension("config.json")
}

fn report_path(a: &EvaluateArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| {
        a.run
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join("report.json")
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn visual_map(path: Option<&Path>) -> Result<VisualTokenMap> {
    Ok(match path {
        Some(p) => load_visual_tokens(p)?,
        None => VisualTokenMap::new(),
    })
}

// ---------------------------------------------------------------------------
// forge

fn forge_remuq(a: &ForgeRemuqArgs) -> Result<()> {
    let records: Vec<WebQaRecord> = read_jsonl(&a.webqa)?;
    let visual = visual_map(a.visual_tokens.as_deref())?;
    let options = RemuqOptions {
        top_n: a.top_n,
        train_frac: a.train_frac,
        seed: a.seed,
        keyword_source: a.keyword_source.into(),
    };
    let ds = build_remuq(&records, &options)?;
    create_dir(&a.out_dir)?;
    let dir = &a.out_dir;
    write_jsonl(dir.join("train.jsonl"), &ds.train)?;
    write_jsonl(dir.join("test.jsonl"), &ds.test)?;
    write_jsonl(dir.join("corpus.jsonl"), &ds.corpus)?;
    for (name, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let queries: Vec<MultimodalQuery> = samples.iter().map(|s| s.to_query(&visual)).collect();
        write_jsonl(dir.join(format!("{name}_queries.jsonl")), &queries)?;
        RelevanceJudgments::from_gold(&queries).save(dir.join(format!("{name}_qrels.jsonl")))?;
    }
    write_json(dir.join("manifest.json"), &ds.manifest)?;
    println!(
        "train {} / test {} / corpus {}",
        ds.manifest.train_count, ds.manifest.test_count, ds.manifest.corpus_count
    );
    Ok(())
}

fn forge_vlict(a: &ForgeVlictArgs) -> Result<()> {
    let records: Vec<WitRecord> = read_jsonl(&a.wit)?;
    let visual = visual_map(a.visual_tokens.as_deref())?;
    let options = VlIctOptions {
        mask_ratio: a.mask_ratio,
        seed: a.seed,
        random_sentence: a.random_sentence,
    };
    let (triplets, manifest) = build_vlict(&records, &options, &visual)?;
    create_dir(&a.out_dir)?;
    write_jsonl(a.out_dir.join("triplets.jsonl"), &triplets)?;
    write_json(a.out_dir.join("manifest.json"), &manifest)?;
    let skipped: usize = manifest.skipped.values().sum();
    println!("{} triplets, {skipped} records skipped", manifest.triplets);
    Ok(())
}

// ---------------------------------------------------------------------------
// indexes

fn index_bm25(a: &IndexBm25Args) -> Result<()> {
    let (corpus, _) = load_corpus(&a.corpus)?;
    let index = Bm25Index::build(&corpus, a.k1, a.b)?;
    create_parent(&a.out)?;
    index.save(&a.out)?;
    println!("indexed {} documents", index.num_docs());
    Ok(())
}

fn index_dense(a: &IndexDenseArgs) -> Result<()> {
    let (corpus, _) = load_corpus(&a.corpus)?;
    let params = DualEncoderParams::load(&a.model)?;
    let index = EmbeddingMatrix::build(&corpus, &params)?;
    create_parent(&a.out)?;
    index.save(&a.out)?;
    println!("encoded {} documents (d={})", index.len(), index.dim());
    Ok(())
}

// ---------------------------------------------------------------------------
// training

struct Dataset {
    queries: Vec<MultimodalQuery>,
    corpus: Vec<KnowledgeDoc>,
    examples: Vec<TrainExample>,
}

fn load_dataset(d: &DataArgs) -> Result<Dataset> {
    if let Some(path) = &d.triplets {
        let records: Vec<TripletRecord> = read_jsonl(path)?;
        let examples: Vec<TrainExample> = records.iter().map(TripletRecord::to_example).collect();
        let corpus: Vec<KnowledgeDoc> = examples.iter().map(|e| e.positive.clone()).collect();
        validate_corpus(&corpus).with_context(|| format!("triplets in {}", path.display()))?;
        let queries = examples.iter().map(|e| e.query.clone()).collect();
        return Ok(Dataset {
            queries,
            corpus,
            examples,
        });
    }
    let (Some(qpath), Some(cpath)) = (&d.queries, &d.corpus) else {
        bail!("either --triplets or both --queries and --corpus are required");
    };
    let queries = load_queries(qpath)?;
    let (corpus, _) = load_corpus(cpath)?;
    let by_id: IndexMap<&str, &KnowledgeDoc> = corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    let examples = queries
        .iter()
        .map(|q| {
            let gold = q
                .gold_ids
                .first()
                .with_context(|| format!("query `{}` in {} has no gold id", q.id, qpath.display()))?;
            let doc = by_id.get(gold.as_str()).with_context(|| {
                format!("gold `{gold}` of query `{}` is not in {}", q.id, cpath.display())
            })?;
            Ok(TrainExample::new(q.clone(), (*doc).clone()))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        queries,
        corpus,
        examples,
    })
}

/// Fresh encoders whose vocabularies cover the training queries and corpus.
pub fn init_for(
    queries: &[MultimodalQuery],
    corpus: &[KnowledgeDoc],
    dim: usize,
    seed: u64,
) -> crate::Result<DualEncoderParams> {
    let text_vocab = Vocab::from_texts(queries.iter().map(|q| q.text.as_str()));
    let knowledge_vocab = Vocab::from_texts(corpus.iter().map(|d| d.text.as_str()));
    let max_visual = queries.iter().flat_map(|q| q.visual_tokens.iter().copied()).max();
    DualEncoderParams::init(
        dim,
        text_vocab,
        knowledge_vocab,
        DualEncoderParams::visual_rows_for(max_visual),
        seed,
    )
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut data = load_dataset(&a.data)?;
    let mut params = match &a.init_model {
        Some(path) => DualEncoderParams::load(path)?,
        None => init_for(&data.queries, &data.corpus, a.dim, a.seed)?,
    };
    if let Some(path) = &a.negatives {
        let mined = load_hard_negatives(path)?;
        attach_hard_negatives(&mut data.examples, &mined, &data.corpus)
            .with_context(|| format!("attaching negatives from {}", path.display()))?;
    }
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        negatives_per_query: a.negatives_per_query,
    };
    let losses = train(&data.examples, &config, &mut params)?;
    create_parent(&a.out)?;
    params.save(&a.out)?;
    write_json(a.out.with_extension("losses.json"), &losses)?;
    if let Some(last) = losses.last() {
        println!("{} epochs, final loss {last:.6}", losses.len());
    }
    Ok(())
}

fn mine(a: &MineArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let params = DualEncoderParams::load(&a.model)?;
    let mined = mine_hard_negatives(&params, &data.corpus, &data.queries, a.depth)?;
    create_parent(&a.out)?;
    write_hard_negatives(&mined, &a.out)?;
    println!("mined negatives for {} queries", mined.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// retrieval and evaluation

fn encode_or_zero(params: &DualEncoderParams, q: &MultimodalQuery, present: bool) -> crate::Result<Vec<f64>> {
    if present {
        params.encode_query(q)
    } else {
        Ok(vec![0.0; params.dim])
    }
}

fn retrieve(a: &RetrieveArgs) -> Result<()> {
    if a.k < 1 {
        bail!("--k must be >= 1");
    }
    let queries = load_queries(&a.queries)?;
    let lists: Vec<RankedList> = match a.mode {
        RetrieveMode::Bm25 => {
            let index = Bm25Index::load(&a.index)?;
            queries
                .par_iter()
                .map(|q| index.search(&q.text, a.k))
                .collect::<crate::Result<_>>()?
        }
        RetrieveMode::Dense | RetrieveMode::Fusion => {
            let model = a.model.as_ref().context("--model is required")?;
            let params = DualEncoderParams::load(model)?;
            let index = EmbeddingMatrix::load(&a.index)?;
            if index.dim() != params.dim {
                bail!(
                    "index {} has d={} but model {} has d={}",
                    a.index.display(),
                    index.dim(),
                    model.display(),
                    params.dim
                );
            }
            let fusion = a.mode == RetrieveMode::Fusion;
            queries
                .par_iter()
                .map(|q| {
                    if fusion {
                        let image = encode_or_zero(&params, &q.image_only(), !q.visual_tokens.is_empty())?;
                        let text = encode_or_zero(&params, &q.text_only(), !q.text.trim().is_empty())?;
                        index.late_fusion_rerank(&image, &text, a.m, a.k)
                    } else {
                        index.mips_topk(&params.encode_query(q)?, a.k)
                    }
                })
                .collect::<crate::Result<_>>()?
        }
    };
    let run: RunFile = queries.iter().map(|q| q.id.clone()).zip(lists).collect();
    create_parent(&a.out)?;
    write_run(&run, &a.out)?;
    println!("wrote {} ranked lists", run.len());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let judgments = match (&a.qrels, &a.queries, &a.corpus) {
        (Some(path), _, _) => RelevanceJudgments::load(path)?,
        (None, Some(q), Some(c)) => {
            let (corpus, _) = load_corpus(c)?;
            RelevanceJudgments::from_answers(&load_queries(q)?, &corpus, a.token_boundary)
        }
        (None, Some(q), None) => RelevanceJudgments::from_gold(&load_queries(q)?),
        (None, None, _) => bail!("either --qrels or --queries is required"),
    };
    let report = evaluate_run(&run, &judgments, &a.k_list)?;
    let out = report_path(a);
    create_parent(&out)?;
    write_json(&out, &report)?;
    print!("{}", report.render_table());
    Ok(())
}

// ---------------------------------------------------------------------------
// mask-ratio sweep

fn ratio_dir(out_dir: &Path, ratio: f64) -> PathBuf {
    out_dir.join(format!("ratio-{ratio}"))
}

/// Header plus one row per ratio, metrics printed to six decimals.
pub fn sweep_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut out = String::from("ratio");
    for m in SWEEP_METRICS {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for (ratio, report) in rows {
        write!(out, "{ratio}").unwrap();
        for m in SWEEP_METRICS {
            write!(out, ",{:.6}", report.get(m).unwrap_or(0.0)).unwrap();
        }
        out.push('\n');
    }
    out
}

fn sweep(a: &SweepArgs, threads: Option<usize>) -> Result<()> {
    if a.ratios.is_empty() {
        bail!("--ratios is empty");
    }
    create_dir(&a.out_dir)?;
    let step = |command: Command| dispatch(&command, threads);

    // The evaluation set is fixed across ratios: either the external
    // benchmark or a held-out share of the overlap-masked triplets.
    let eval_dir = a.out_dir.join("eval");
    let (eval_queries, eval_corpus, held_out) = match (&a.eval_queries, &a.eval_corpus) {
        (Some(q), Some(c)) => (q.clone(), c.clone(), HashSet::new()),
        _ => {
            step(Command::ForgeVlict(ForgeVlictArgs {
                wit: a.wit.clone(),
                out_dir: eval_dir.clone(),
                visual_tokens: a.visual_tokens.clone(),
                mask_ratio: 0.0,
                seed: a.seed,
                random_sentence: a.random_sentence,
            }))?;
            let triplets: Vec<TripletRecord> = read_jsonl(eval_dir.join("triplets.jsonl"))?;
            if triplets.len() < 2 {
                bail!(
                    "{} yields {} triplets; at least 2 are needed to hold some out",
                    a.wit.display(),
                    triplets.len()
                );
            }
            if !(a.eval_fraction > 0.0 && a.eval_fraction < 1.0) {
                bail!("--eval-fraction {} outside (0, 1)", a.eval_fraction);
            }
            let mut qids: Vec<&str> = triplets.iter().map(|t| t.qid.as_str()).collect();
            qids.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
            let n = ((a.eval_fraction * qids.len() as f64).ceil() as usize).clamp(1, qids.len() - 1);
            let held_out: HashSet<String> = qids[..n].iter().map(|s| s.to_string()).collect();

            let examples: Vec<TrainExample> = triplets.iter().map(TripletRecord::to_example).collect();
            let corpus: Vec<&KnowledgeDoc> = examples.iter().map(|e| &e.positive).collect();
            let queries: Vec<&MultimodalQuery> = examples
                .iter()
                .map(|e| &e.query)
                .filter(|q| held_out.contains(&q.id))
                .collect();
            let qpath = eval_dir.join("queries.jsonl");
            let cpath = eval_dir.join("corpus.jsonl");
            write_jsonl(&qpath, queries)?;
            write_jsonl(&cpath, corpus)?;
            (qpath, cpath, held_out)
        }
    };

    let mut rows = Vec::with_capacity(a.ratios.len());
    for &ratio in &a.ratios {
        let dir = ratio_dir(&a.out_dir, ratio);
        step(Command::ForgeVlict(ForgeVlictArgs {
            wit: a.wit.clone(),
            out_dir: dir.clone(),
            visual_tokens: a.visual_tokens.clone(),
            mask_ratio: ratio,
            seed: a.seed,
            random_sentence: a.random_sentence,
        }))?;
        let triplets: Vec<TripletRecord> = read_jsonl(dir.join("triplets.jsonl"))?;
        let train_set: Vec<&TripletRecord> =
            triplets.iter().filter(|t| !held_out.contains(&t.qid)).collect();
        if train_set.is_empty() {
            bail!("no training triplets at mask ratio {ratio}");
        }
        let train_path = dir.join("train_triplets.jsonl");
        write_jsonl(&train_path, train_set)?;

        let model = dir.join("model.bin");
        let index = dir.join("index.emb");
        let run_path = dir.join("run.txt");
        step(Command::Train(TrainArgs {
            data: DataArgs {
                triplets: Some(train_path),
                queries: None,
                corpus: None,
            },
            negatives: None,
            init_model: None,
            out: model.clone(),
            dim: a.dim,
            lr: a.lr,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.seed,
            negatives_per_query: 1,
        }))?;
        step(Command::IndexDense(IndexDenseArgs {
            corpus: eval_corpus.clone(),
            model: model.clone(),
            out: index.clone(),
        }))?;
        step(Command::Retrieve(RetrieveArgs {
            mode: RetrieveMode::Dense,
            queries: eval_queries.clone(),
            index,
            model: Some(model),
            k: 100,
            m: DEFAULT_FUSION_DEPTH,
            out: run_path.clone(),
        }))?;
        let report_file = dir.join("report.json");
        step(Command::Evaluate(EvaluateArgs {
            run: run_path,
            qrels: None,
            queries: Some(eval_queries.clone()),
            corpus: None,
            token_boundary: false,
            k_list: SWEEP_K_LIST.to_vec(),
            out: Some(report_file.clone()),
        }))?;
        let text = fs::read_to_string(&report_file)
            .with_context(|| format!("reading {}", report_file.display()))?;
        let report: MetricReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", report_file.display()))?;
        rows.push((ratio, report));
    }

    let csv_path = a.out_dir.join("sweep.csv");
    fs::write(&csv_path, sweep_csv(&rows)).with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
