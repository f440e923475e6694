use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use forumint_core::backend::{
    CompletionBackend, LiveBackend, RecordingBackend, ReplayBackend, TranscriptSink,
};
use forumint_core::corpus::{ingest, sample_batches, CorpusError, IngestMode};
use forumint_core::eval::{
    self, accuracy, intercoder_agreement, report_from_annotations, AccuracyReport,
    AdjudicationRecord, AgreementReport, AnnotationRecord, CellRef, EvalError, MergedDecision,
    Pooling,
};
use forumint_core::pipeline::{self, BackendMode, Chunking, PipelineError};
use forumint_core::review::{store_report, ReviewService};
use forumint_core::schema::{default_schema, ExtractionSchema, OverflowPolicy, TensePolicy};
use forumint_core::store::{self, Filter, OpenMode, Predicate, Store, StoreError};

use crate::config::{CliConfig, FileConfig, FlagOverrides, ProcessEnv, Tense};
use crate::server::{self, AppState};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_MISSING_TRANSCRIPT: u8 = 3;
pub const EXIT_UNRESOLVED: u8 = 4;

/// An error that carries a specific process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn fail(code: u8, message: impl Into<String>) -> anyhow::Error {
    Failure {
        code,
        message: message.into(),
    }
    .into()
}

/// Exit code for an error returned by [`execute`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<Failure>().map_or(EXIT_ERROR, |f| f.code)
}

const AFTER_HELP: &str = "Exit codes: 0 ok, 1 error, 2 invalid input, 3 missing transcript (replay), 4 unresolved coder conflicts.\n\
Environment: FORUMINT_API_KEY (credential, never read from files), FORUMINT_API_BASE, FORUMINT_STORE, FORUMINT_MODEL, FORUMINT_CONCURRENCY, FORUMINT_CONFIG.";

#[derive(Debug, Parser)]
#[command(name = "forumint", version, about = "Structured threat-intelligence extraction from forum conversations", after_help = AFTER_HELP)]
pub struct Cli {
    /// Config file (default: $FORUMINT_CONFIG, then ./forumint.toml).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Store directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus file into the store.
    Ingest {
        file: PathBuf,
        /// Skip and count bad lines instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Draw a seeded random sample of daily conversations.
    Sample {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Read the corpus from this file instead of the store.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Summarize and code every daily conversation in the store.
    Run(RunArgs),
    /// Per-variable accuracy of the model against human review.
    Report {
        /// Merged decisions file.
        #[arg(long, value_name = "FILE", conflicts_with = "annotations")]
        merged: Option<PathBuf>,
        /// Directory of per-coder annotation files (*.jsonl).
        #[arg(long, value_name = "DIR")]
        annotations: Option<PathBuf>,
        /// Adjudication file applied when merging annotations.
        #[arg(long, value_name = "FILE", requires = "annotations")]
        adjudications: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Agreement between two coders.
    Agree {
        #[arg(long, value_name = "FILE")]
        a: PathBuf,
        #[arg(long, value_name = "FILE")]
        b: PathBuf,
        /// Pool all cells instead of averaging per variable.
        #[arg(long)]
        pooled: bool,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Merge two coders' annotations into common decisions.
    Merge {
        #[arg(long, value_name = "FILE")]
        a: PathBuf,
        #[arg(long, value_name = "FILE")]
        b: PathBuf,
        #[arg(long, value_name = "FILE")]
        adjudications: Option<PathBuf>,
        /// Output file (default: stdout).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// List stored summaries matching every predicate.
    Query {
        /// `name=true|false`, `name contains X` or `name~X`.
        #[arg(long = "where", value_name = "PREDICATE")]
        predicates: Vec<String>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Print the prompt a stored summary was produced from.
    Prompt {
        unit_id: String,
        #[arg(long, value_parser = parse_kebab::<Chunking>)]
        chunking: Option<Chunking>,
        #[arg(long)]
        no_title_always: bool,
    },
    /// Serve the review API (and UI assets) over HTTP.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Allowed coder ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        coders: Option<Vec<String>>,
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Configuration commands.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Check store files against the manifest.
    Verify {
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Print every effective setting and where overrides apply.
    Show {
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_parser = parse_kebab::<BackendMode>)]
    pub backend: Option<BackendMode>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_output: Option<u32>,
    /// Only give the thread title to a conversation's first day.
    #[arg(long)]
    pub no_title_always: bool,
    #[arg(long)]
    pub narrative_guard: bool,
    #[arg(long, value_parser = parse_kebab::<Chunking>)]
    pub chunking: Option<Chunking>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub char_budget: Option<usize>,
    #[arg(long, value_parser = parse_kebab::<OverflowPolicy>)]
    pub overflow: Option<OverflowPolicy>,
    #[arg(long, value_enum)]
    pub tense: Option<Tense>,
    /// Transcript file for replay (default: the store's own transcripts).
    #[arg(long, value_name = "FILE")]
    pub transcripts: Option<PathBuf>,
    /// Attempt batches that were quarantined by an earlier run.
    #[arg(long)]
    pub retry_quarantined: bool,
    /// Also write the run report as JSON to this file.
    #[arg(long, value_name = "FILE")]
    pub report_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

/// Parses a kebab-case enum value through its serde representation.
fn parse_kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

/// Reads a JSON-lines file; a bad line is an input error naming its line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| {
            fail(EXIT_VALIDATION, format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// All `*.jsonl` files of `dir`, in name order.
fn read_annotation_dir(dir: &Path) -> anyhow::Result<Vec<AnnotationRecord>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_jsonl::<AnnotationRecord>(&f)?);
    }
    Ok(out)
}

fn eval_failure(err: EvalError) -> anyhow::Error {
    match err {
        EvalError::UnresolvedConflict(cells) => unresolved(&cells),
        other => fail(EXIT_VALIDATION, other.to_string()),
    }
}

fn unresolved(cells: &[CellRef]) -> anyhow::Error {
    let mut msg = format!("{} unresolved conflict(s):", cells.len());
    for c in cells {
        msg.push_str(&format!("\n  {} {}", c.unit_id, c.variable));
    }
    fail(EXIT_UNRESOLVED, msg)
}

fn store_failure(err: StoreError) -> anyhow::Error {
    match err {
        StoreError::Integrity { .. }
        | StoreError::CorruptManifest(_)
        | StoreError::UnknownVariable(_)
        | StoreError::BadPredicate(_)
        | StoreError::Record { .. } => fail(EXIT_VALIDATION, err.to_string()),
        other => anyhow::Error::new(other),
    }
}

fn schema_for(tense: Tense) -> ExtractionSchema {
    default_schema().with_tense(match tense {
        Tense::Present => TensePolicy::Present,
        Tense::Any => TensePolicy::Any,
    })
}

pub fn render_accuracy(r: &AccuracyReport) -> String {
    let mut out = format!("{:<38}{:>6}{:>9}{:>10}\n", "variable", "N", "correct", "accuracy");
    for row in &r.rows {
        let acc = row.accuracy.map_or("-".to_string(), |a| format!("{a:.1}"));
        out.push_str(&format!(
            "{:<38}{:>6}{:>9}{:>10}\n",
            row.variable, row.n, row.correct, acc
        ));
    }
    out.push_str(&format!("\nunits            {}\n", r.units));
    out.push_str(&format!("unweighted mean  {:.3}\n", r.unweighted_mean));
    out.push_str(&format!("weighted mean    {:.3}\n", r.weighted_mean));
    out.push_str(&format!("min / max        {:.1} / {:.1}\n", r.min, r.max));
    out
}

pub fn render_agreement(r: &AgreementReport) -> String {
    let mut out = format!("{:<38}{:>8}{:>8}{:>9}\n", "variable", "agree", "units", "percent");
    for row in &r.rows {
        out.push_str(&format!(
            "{:<38}{:>8}{:>8}{:>9.1}\n",
            row.variable, row.agreements, row.units, row.percent
        ));
    }
    out.push_str(&format!(
        "\naverage {:.1}  min {:.1}  max {:.1}  ({} units)\n",
        r.average, r.min, r.max, r.units
    ));
    out
}

/// Flattens a JSON object into sorted `a.b = value` lines.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let Cli {
        config,
        store,
        command,
        ..
    } = cli;
    let (file, path) = FileConfig::load(config.as_deref()).map_err(|e| fail(EXIT_VALIDATION, format!("{e:#}")))?;
    let mut flags = FlagOverrides {
        store,
        ..FlagOverrides::default()
    };
    match &command {
        Command::Run(a) => {
            flags.backend = a.backend;
            flags.model = a.model.clone();
            flags.temperature = a.temperature;
            flags.max_output = a.max_output;
            flags.no_title_always = a.no_title_always;
            flags.narrative_guard = a.narrative_guard;
            flags.chunking = a.chunking;
            flags.concurrency = a.concurrency;
            flags.char_budget = a.char_budget;
            flags.overflow = a.overflow;
            flags.tense = a.tense;
            flags.transcripts = a.transcripts.clone();
            flags.retry_quarantined = a.retry_quarantined;
        }
        Command::Prompt {
            chunking,
            no_title_always,
            ..
        } => {
            flags.chunking = *chunking;
            flags.no_title_always = *no_title_always;
        }
        Command::Serve {
            port,
            coders,
            static_dir,
        } => {
            flags.port = *port;
            flags.coders = coders.clone();
            flags.static_dir = static_dir.clone();
        }
        _ => {}
    }
    let cfg = CliConfig::resolve(file, path, &ProcessEnv, &flags)
        .map_err(|e| fail(EXIT_VALIDATION, format!("{e:#}")))?;

    match command {
        Command::Ingest {
            file,
            lenient,
            format,
        } => cmd_ingest(&cfg, &file, lenient, format),
        Command::Sample {
            n,
            seed,
            corpus,
            format,
        } => cmd_sample(&cfg, n, seed, corpus.as_deref(), format),
        Command::Run(args) => cmd_run(&cfg, &args),
        Command::Report {
            merged,
            annotations,
            adjudications,
            format,
        } => cmd_report(&cfg, merged, annotations, adjudications, format),
        Command::Agree {
            a,
            b,
            pooled,
            format,
        } => {
            let a: Vec<AnnotationRecord> = read_jsonl(&a)?;
            let b: Vec<AnnotationRecord> = read_jsonl(&b)?;
            let pooling = if pooled { Pooling::Pooled } else { Pooling::PerVariable };
            let r = intercoder_agreement(&a, &b, pooling).map_err(eval_failure)?;
            match format {
                Format::Json => print_json(&r),
                Format::Table => emit(&render_agreement(&r)),
            }
        }
        Command::Merge {
            a,
            b,
            adjudications,
            out,
        } => {
            let a: Vec<AnnotationRecord> = read_jsonl(&a)?;
            let b: Vec<AnnotationRecord> = read_jsonl(&b)?;
            let adj: Vec<AdjudicationRecord> = match adjudications {
                Some(p) => read_jsonl(&p)?,
                None => Vec::new(),
            };
            let merged = eval::merge(&a, &b, &adj).map_err(eval_failure)?;
            let mut text = String::new();
            for m in &merged {
                text.push_str(&store::canonical_line(m)?);
                text.push('\n');
            }
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => emit(&text)?,
            }
            Ok(())
        }
        Command::Query { predicates, format } => cmd_query(&cfg, &predicates, format),
        Command::Prompt { unit_id, .. } => {
            let store = Store::open(cfg.store_path()?, OpenMode::Read).map_err(store_failure)?;
            let corpus = store.corpus().map_err(store_failure)?;
            let schema = schema_for(cfg.run.tense);
            let prompt = pipeline::reconstruct_prompt(&unit_id, &corpus, &schema, &store, &cfg.run_config())
                .map_err(|e| match e {
                    PipelineError::UnknownUnit(_) => fail(EXIT_VALIDATION, e.to_string()),
                    other => anyhow::Error::new(other),
                })?;
            emit(&(prompt.full_text() + "\n"))
        }
        Command::Serve { .. } => cmd_serve(&cfg),
        Command::Config {
            action: ConfigAction::Show { format },
        } => {
            let value = serde_json::to_value(&cfg)?;
            match format {
                Format::Json => print_json(&value),
                Format::Table => {
                    let mut lines = Vec::new();
                    flatten("", &value, &mut lines);
                    emit(&(lines.join("\n") + "\n"))
                }
            }
        }
        Command::Verify { format } => {
            let root = cfg.store_path()?;
            let (manifest, torn) = store::verify(root).map_err(store_failure)?;
            match format {
                Format::Json => print_json(&serde_json::json!({
                    "manifest": manifest,
                    "torn_records": torn,
                })),
                Format::Table => {
                    let mut text = String::new();
                    for (name, entry) in &manifest.files {
                        text += &format!("{name:<32}{:>8} records{:>10} bytes\n", entry.records, entry.bytes);
                    }
                    for t in &torn {
                        text += &format!("torn record in {} at offset {} ({} bytes excluded)\n", t.file, t.offset, t.bytes);
                    }
                    if torn.is_empty() {
                        text += "ok\n";
                    }
                    emit(&text)
                }
            }
        }
    }
}

fn cmd_ingest(cfg: &CliConfig, file: &Path, lenient: bool, format: Format) -> anyhow::Result<()> {
    let root = cfg.store_path()?;
    let mode = if lenient { IngestMode::Lenient } else { IngestMode::Strict };
    let (corpus, report) = ingest(file, mode).map_err(|e| match e {
        CorpusError::Io(_) => anyhow::Error::new(e),
        other => fail(EXIT_VALIDATION, format!("{}: {other}", file.display())),
    })?;
    let store = Store::init(root).map_err(store_failure)?;
    let added = store.import_corpus(&corpus).map_err(|e| match e {
        StoreError::DuplicateKey(_) => fail(EXIT_VALIDATION, e.to_string()),
        other => store_failure(other),
    })?;
    for skipped in &report.skipped {
        eprintln!("skipped {skipped}");
    }
    match format {
        Format::Json => print_json(&serde_json::json!({
            "threads": report.threads,
            "messages": report.messages,
            "added": added,
            "skipped": report.skipped.len(),
        })),
        Format::Table => {
            let mut text = format!("{} threads, {} messages\n", report.threads, report.messages);
            if lenient {
                text += &format!("skipped {}\n", report.skipped.len());
            }
            emit(&text)
        }
    }
}

fn cmd_sample(
    cfg: &CliConfig,
    n: usize,
    seed: u64,
    corpus_file: Option<&Path>,
    format: Format,
) -> anyhow::Result<()> {
    let corpus = match corpus_file {
        Some(f) => {
            ingest(f, IngestMode::Strict)
                .map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", f.display())))?
                .0
        }
        None => Store::open(cfg.store_path()?, OpenMode::Read)
            .and_then(|s| s.corpus())
            .map_err(store_failure)?,
    };
    let picks = sample_batches(&corpus, n, seed);
    let rows: Vec<Value> = picks
        .iter()
        .map(|b| {
            serde_json::json!({
                "thread_id": b.thread_id,
                "batch_date": b.batch_date,
                "batch_index": b.batch_index,
                "messages": b.messages.len(),
            })
        })
        .collect();
    match format {
        Format::Json => print_json(&rows),
        Format::Table => emit(
            &picks
                .iter()
                .map(|b| format!("{}\t{}\t{}\n", b.thread_id, b.batch_date, b.messages.len()))
                .collect::<String>(),
        ),
    }
}

fn cmd_run(cfg: &CliConfig, args: &RunArgs) -> anyhow::Result<()> {
    let store = Arc::new(Store::init(cfg.store_path()?).map_err(store_failure)?);
    let corpus = store.corpus().map_err(store_failure)?;
    if corpus.is_empty() {
        return Err(fail(EXIT_VALIDATION, "store holds no corpus; run `ingest` first"));
    }
    let schema = schema_for(cfg.run.tense);
    let run_config = cfg.run_config();

    let backend: Box<dyn CompletionBackend> = match cfg.run.backend {
        BackendMode::Replay => {
            let replay = match &cfg.run.transcripts {
                Some(p) => ReplayBackend::from_file(p),
                None => ReplayBackend::from_entries(store.transcripts()),
            }
            .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            Box::new(replay)
        }
        BackendMode::Live => Box::new(LiveBackend::new(cfg.live_config(&ProcessEnv)?)),
        BackendMode::Record => {
            let live = LiveBackend::new(cfg.live_config(&ProcessEnv)?);
            let sink: Arc<dyn TranscriptSink> = store.clone();
            Box::new(RecordingBackend::new(live, sink))
        }
    };

    let report = pipeline::run(&corpus, &schema, backend.as_ref(), &store, &run_config).map_err(
        |e| match e {
            PipelineError::Store(s) => store_failure(s),
            PipelineError::SchemaMismatch { .. } | PipelineError::Config(_) => {
                fail(EXIT_VALIDATION, e.to_string())
            }
            other => anyhow::Error::new(other),
        },
    )?;

    if let Some(path) = &args.report_out {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    match args.format {
        Format::Json => print_json(&report)?,
        Format::Table => emit(&report.render_table())?,
    }
    if !report.missing_transcripts.is_empty() {
        let mut msg = format!("{} request(s) had no recorded transcript:", report.missing_transcripts.len());
        for fp in &report.missing_transcripts {
            msg.push_str(&format!("\n  {fp}"));
        }
        return Err(fail(EXIT_MISSING_TRANSCRIPT, msg));
    }
    Ok(())
}

fn cmd_report(
    cfg: &CliConfig,
    merged: Option<PathBuf>,
    annotations: Option<PathBuf>,
    adjudications: Option<PathBuf>,
    format: Format,
) -> anyhow::Result<()> {
    let report = if let Some(path) = merged {
        let merged: Vec<MergedDecision> = read_jsonl(&path)?;
        accuracy(&merged)
    } else if let Some(dir) = annotations {
        let records = read_annotation_dir(&dir)?;
        let adj: Vec<AdjudicationRecord> = match adjudications {
            Some(p) => read_jsonl(&p)?,
            None => Vec::new(),
        };
        report_from_annotations(&records, &adj)
    } else {
        let store = Store::open(cfg.store_path()?, OpenMode::Read).map_err(store_failure)?;
        store_report(&store)
    }
    .map_err(eval_failure)?;
    match format {
        Format::Json => print_json(&report),
        Format::Table => emit(&render_accuracy(&report)),
    }
}

fn cmd_query(cfg: &CliConfig, raw: &[String], format: Format) -> anyhow::Result<()> {
    let predicates = raw
        .iter()
        .map(|p| p.parse::<Predicate>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(store_failure)?;
    let store = Store::open(cfg.store_path()?, OpenMode::Read).map_err(store_failure)?;
    let hits = store
        .query(&Filter::new(predicates), &schema_for(cfg.run.tense))
        .map_err(store_failure)?;
    match format {
        Format::Json => print_json(&hits),
        Format::Table => emit(
            &hits
                .iter()
                .map(|s| format!("{}\t{}\t{}\n", s.thread_id, s.batch_date, s.summary))
                .collect::<String>(),
        ),
    }
}

fn cmd_serve(cfg: &CliConfig) -> anyhow::Result<()> {
    let store = Arc::new(Store::init(cfg.store_path()?).map_err(store_failure)?);
    let coders = cfg
        .serve
        .coders
        .as_ref()
        .map(|c| c.iter().cloned().collect::<BTreeSet<_>>());
    let service = ReviewService::new(store, schema_for(cfg.run.tense), coders)
        .map_err(|e| anyhow!("{e}"))?;
    let state = AppState {
        service: Arc::new(service),
        static_dir: cfg.serve.static_dir.clone(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(server::serve(state, cfg.serve.port))
}
