//! `dome` command line: preprocessing, training, labeling, retrieval,
//! generation, evaluation and attention export.
//!
//! Machine-readable results go to stdout as JSON; logs go to stderr.
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 internal error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use dome::coin::{auto_label, record_tokens, train_classifier, ClassifierConfig, IntentClassifier};
use dome::corpus::{filter_others, read_corpus, read_unlabeled, write_corpus, CodeCommentRecord, IntentCategory, Vocabulary};
use dome::pipeline::{classifier_from_checkpoint, classifier_to_checkpoint, ModelBundle};
use dome::trainer::{train_dome, TrainConfig, SEED_ENV};
use dome::Error;

#[derive(Parser)]
#[command(name = "dome", version, about = "Intent-aware code comment generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a labeled corpus and optionally drop `others` records.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop_others: bool,
    },
    /// Train the intent classifier.
    TrainCoin(TrainArgs),
    /// Train the comment generator.
    TrainDome(TrainArgs),
    /// Label records with a trained intent classifier.
    Label {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show the exemplar retrieved for a snippet.
    Retrieve(QueryArgs),
    /// Generate a comment for a snippet.
    Generate {
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long)]
        beam: Option<usize>,
        /// Also write the attention traces of the generation here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score generations against a labeled test set.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Print the attention traces of a generation.
    InspectAttention {
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long)]
        beam: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// File holding the code snippet.
    #[arg(long)]
    code: PathBuf,
    #[arg(long)]
    intent: String,
}

enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidIntent(_) => Failure::Usage(msg),
            Error::EmptyInput(_)
            | Error::Parse { .. }
            | Error::NoExemplar(_)
            | Error::InputTooLong { .. }
            | Error::CorruptCheckpoint(_)
            | Error::Io(_)
            | Error::Json(_) => Failure::Data(msg),
            Error::Shape(_) | Error::DegenerateRow { .. } | Error::State(_) => Failure::Internal(msg),
        }
    }
}

type CmdResult = Result<Value, Failure>;

/// Opens an input named on the command line; a missing path is a usage error.
fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Vec<CodeCommentRecord>, Failure> {
    Ok(read_corpus(open(path)?)?)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Internal(e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Failure::Data(e.to_string()))
}

fn parse_intent(name: &str) -> Result<IntentCategory, Failure> {
    let intent: IntentCategory = name.parse().map_err(|_| {
        let names: Vec<&str> = IntentCategory::GENERATABLE.iter().map(|c| c.name()).collect();
        Failure::Usage(format!("unknown intent {name:?}; expected one of {}", names.join(", ")))
    })?;
    if intent.is_noise() {
        return Err(Failure::Usage(format!("{intent} comments are not generated")));
    }
    Ok(intent)
}

fn load_bundle(path: &Path) -> Result<ModelBundle, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{}: no such checkpoint", path.display())));
    }
    Ok(ModelBundle::load(path)?)
}

fn preprocess(input: &Path, out: &Path, drop_others: bool) -> CmdResult {
    let corpus = load_corpus(input)?;
    let total = corpus.len();
    let kept = if drop_others { filter_others(corpus) } else { corpus };
    if kept.is_empty() {
        warn!("no records left after preprocessing");
    }
    let mut w = create(out)?;
    write_corpus(&mut w, &kept)?;
    w.flush().map_err(|e| Failure::Data(e.to_string()))?;
    info!("wrote {} of {total} records to {}", kept.len(), out.display());
    Ok(json!({ "input": total, "written": kept.len(), "dropped": total - kept.len() }))
}

fn classifier_config(path: &Path) -> Result<ClassifierConfig, Failure> {
    let mut cfg: ClassifierConfig =
        serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().map_err(|_| Failure::Usage(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_coin(args: &TrainArgs) -> CmdResult {
    let cfg = classifier_config(&args.config)?;
    let corpus = load_corpus(&args.corpus)?;
    let lists: Vec<Vec<String>> = corpus
        .iter()
        .map(|r| {
            let (comment, code) = record_tokens(&r.comment, &r.code);
            comment.into_iter().chain(code).collect()
        })
        .collect();
    let vocab = Vocabulary::from_token_lists(&lists, cfg.vocab_size)?;
    let mut clf = IntentClassifier::new(cfg, vocab)?;
    info!("training intent classifier on {} records", corpus.len());
    let history = train_classifier(&mut clf, &corpus)?;
    classifier_to_checkpoint(&clf, &history)?.save(&args.out)?;
    Ok(json!({ "history": history, "checkpoint": args.out }))
}

fn train_generator(args: &TrainArgs) -> CmdResult {
    if !args.config.exists() {
        return Err(Failure::Usage(format!("{}: no such config", args.config.display())));
    }
    let mut cfg = TrainConfig::from_json_file(&args.config)?;
    cfg.checkpoint = Some(args.out.clone());
    let corpus = load_corpus(&args.corpus)?;
    info!("training generator on {} records", corpus.len());
    let out = train_dome(&corpus, &cfg)?;
    Ok(json!({ "history": out.history, "checkpoint": args.out }))
}

fn label(ckpt: &Path, input: &Path, out: &Path) -> CmdResult {
    if !ckpt.exists() {
        return Err(Failure::Usage(format!("{}: no such checkpoint", ckpt.display())));
    }
    let clf = classifier_from_checkpoint(&dome::checkpoint::Checkpoint::load(ckpt)?)?;
    let records = read_unlabeled(open(input)?)?;
    if records.is_empty() {
        return Err(Failure::Data(format!("{}: no records", input.display())));
    }
    let labeled_before = records.iter().filter(|r| r.intent.is_some()).count();
    if labeled_before > 0 {
        warn!("overwriting {labeled_before} existing labels");
    }
    let labeled = auto_label(&clf, &records)?;
    let mut counts = serde_json::Map::new();
    for c in IntentCategory::ALL {
        counts.insert(c.name().into(), json!(labeled.iter().filter(|r| r.intent == c).count()));
    }
    let mut w = create(out)?;
    write_corpus(&mut w, &labeled)?;
    w.flush().map_err(|e| Failure::Data(e.to_string()))?;
    Ok(json!({ "labeled": labeled.len(), "overwritten": labeled_before, "counts": counts }))
}

fn retrieve(q: &QueryArgs) -> CmdResult {
    let intent = parse_intent(&q.intent)?;
    let bundle = load_bundle(&q.ckpt)?;
    let code = read_text(&q.code)?;
    let exemplar = bundle.retrieve(&code, intent, None)?;
    serde_json::to_value(exemplar).map_err(|e| Failure::Internal(e.to_string()))
}

fn generate(q: &QueryArgs, beam: Option<usize>, trace: Option<&Path>) -> CmdResult {
    let intent = parse_intent(&q.intent)?;
    let bundle = load_bundle(&q.ckpt)?;
    let code = read_text(&q.code)?;
    let beam = beam.unwrap_or(bundle.config.model.beam_size);
    let generation = bundle.generate(&code, intent, beam)?;
    if let Some(path) = trace {
        let traces = bundle.attention_traces(&code, intent, &generation)?;
        write_json(path, &serde_json::to_value(traces).map_err(|e| Failure::Internal(e.to_string()))?)?;
    }
    serde_json::to_value(generation).map_err(|e| Failure::Internal(e.to_string()))
}

fn evaluate(ckpt: &Path, test: &Path, out: &Path, beam: Option<usize>) -> CmdResult {
    let bundle = load_bundle(ckpt)?;
    let records = load_corpus(test)?;
    let skipped = records.iter().filter(|r| r.intent.is_noise()).count();
    if skipped > 0 {
        warn!("skipping {skipped} records labeled others");
    }
    let beam = beam.unwrap_or(bundle.config.model.beam_size);
    let report = bundle.evaluate(&records, beam)?;
    let value = serde_json::to_value(report).map_err(|e| Failure::Internal(e.to_string()))?;
    write_json(out, &value)?;
    Ok(value)
}

fn inspect_attention(q: &QueryArgs, beam: Option<usize>) -> CmdResult {
    let intent = parse_intent(&q.intent)?;
    let bundle = load_bundle(&q.ckpt)?;
    let code = read_text(&q.code)?;
    let beam = beam.unwrap_or(bundle.config.model.beam_size);
    let generation = bundle.generate(&code, intent, beam)?;
    let traces = bundle.attention_traces(&code, intent, &generation)?;
    Ok(json!({ "generation": generation, "traces": traces }))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Preprocess { input, out, drop_others } => preprocess(&input, &out, drop_others),
        Command::TrainCoin(args) => train_coin(&args),
        Command::TrainDome(args) => train_generator(&args),
        Command::Label { ckpt, input, out } => label(&ckpt, &input, &out),
        Command::Retrieve(q) => retrieve(&q),
        Command::Generate { query, beam, trace } => generate(&query, beam, trace.as_deref()),
        Command::Evaluate { ckpt, test, out, beam } => evaluate(&ckpt, &test, &out, beam),
        Command::InspectAttention { query, beam } => inspect_attention(&query, beam),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
