//! The extraction loop: per thread, per batch, assemble context, call the
//! model, parse and persist.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest, DEFAULT_MODEL};
use crate::corpus::{chunk_daily, chunk_whole, Corpus, DailyBatch, Thread};
use crate::schema::{
    build_prompt, parse_response, ExtractionSchema, PromptConfig, PromptContext, PromptError,
    RenderedPrompt, SummaryKey, UnitSummary, REPAIR_SUFFIX,
};
use crate::store::{Store, StoreError};
use crate::timefmt;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store holds schema {store:?}, run uses {run:?}")]
    SchemaMismatch { store: String, run: String },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("unit {0} not found")]
    UnknownUnit(String),
    #[error("thread {0} not in corpus")]
    UnknownThread(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendMode {
    Live,
    #[default]
    Replay,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Chunking {
    #[default]
    Daily,
    WholeThread,
}

impl Chunking {
    pub fn batches(self, thread: &Thread) -> Vec<DailyBatch> {
        match self {
            Chunking::Daily => chunk_daily(thread),
            Chunking::WholeThread => chunk_whole(thread),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend_mode: BackendMode,
    pub model_id: String,
    pub temperature: f64,
    pub max_output: u32,
    pub include_title_always: bool,
    pub chunking: Chunking,
    /// Threads processed at once.
    pub concurrency: usize,
    pub prompt: PromptConfig,
    /// Re-attempt batches already in the quarantine log.
    pub retry_quarantined: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend_mode: BackendMode::Replay,
            model_id: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output: 1024,
            include_title_always: true,
            chunking: Chunking::Daily,
            concurrency: 4,
            prompt: PromptConfig::default(),
            retry_quarantined: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(PipelineError::Config("model id is empty".into()));
        }
        if self.prompt.char_budget == 0 {
            return Err(PipelineError::Config("character budget must be positive".into()));
        }
        Ok(())
    }
}

/// A batch whose output could not be turned into a summary. Raw model text
/// is kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub thread_id: String,
    pub batch_date: NaiveDate,
    pub batch_index: usize,
    pub schema_version: String,
    pub prompt_fingerprint: String,
    pub model_id: String,
    pub error_kind: String,
    pub error: String,
    /// Model output of each attempt, in order.
    pub raw_outputs: Vec<String>,
    /// Request fingerprints that had no transcript in replay mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_fingerprints: Vec<String>,
    #[serde(with = "timefmt::rfc3339")]
    pub created_at: DateTime<Utc>,
}

impl QuarantineRecord {
    pub fn key(&self) -> SummaryKey {
        SummaryKey {
            thread_id: self.thread_id.clone(),
            batch_date: self.batch_date,
            schema_version: self.schema_version.clone(),
            prompt_fingerprint: self.prompt_fingerprint.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchOutcome {
    Summary(UnitSummary),
    Quarantined(QuarantineRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub threads: usize,
    pub attempted: usize,
    pub processed: usize,
    pub skipped: usize,
    pub quarantined: usize,
    pub repairs: usize,
    /// Batches after the first whose context fell back to the title because
    /// every predecessor was quarantined.
    pub title_only_fallbacks: usize,
    pub errors: BTreeMap<String, usize>,
    pub missing_transcripts: Vec<String>,
    #[serde(serialize_with = "ser_millis")]
    pub wall_time: Duration,
}

fn ser_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_millis() as u64)
}

impl RunReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: String| out.push_str(&format!("{k:<22}{v:>10}\n"));
        row("threads", self.threads.to_string());
        row("batches attempted", self.attempted.to_string());
        row("processed", self.processed.to_string());
        row("skipped", self.skipped.to_string());
        row("quarantined", self.quarantined.to_string());
        row("repairs", self.repairs.to_string());
        row("title-only fallbacks", self.title_only_fallbacks.to_string());
        for (k, v) in &self.errors {
            row(&format!("error {k}"), v.to_string());
        }
        row("wall time (ms)", self.wall_time.as_millis().to_string());
        out
    }
}

/// Context for batch `batch_index` given the summaries of its predecessors
/// (`None` for a quarantined predecessor).
pub fn context_for(
    thread: &Thread,
    batch_index: usize,
    predecessors: &[Option<String>],
    config: &RunConfig,
) -> PromptContext {
    let prior_summary = if batch_index == 0 {
        None
    } else {
        predecessors[..batch_index.min(predecessors.len())]
            .iter()
            .rev()
            .find_map(|s| s.clone())
    };
    let thread_title = if prior_summary.is_none() || config.include_title_always {
        Some(thread.title.clone())
    } else {
        None
    };
    PromptContext {
        thread_title,
        prior_summary,
        batch_index,
    }
}

fn request(prompt: &RenderedPrompt, user_text: String, config: &RunConfig) -> CompletionRequest {
    CompletionRequest {
        model_id: config.model_id.clone(),
        system_text: Some(prompt.system_text.clone()),
        user_text,
        temperature: config.temperature,
        max_output: config.max_output,
    }
}

/// The repair re-prompt: the original prompt followed by the repair suffix.
pub fn repair_request(prompt: &RenderedPrompt, config: &RunConfig) -> CompletionRequest {
    request(prompt, format!("{}\n\n{REPAIR_SUFFIX}", prompt.user_text), config)
}

pub fn initial_request(prompt: &RenderedPrompt, config: &RunConfig) -> CompletionRequest {
    request(prompt, prompt.user_text.clone(), config)
}

/// Calls the model for one batch, with a single repair attempt on a parse
/// failure. Never fails: errors become a quarantine record.
pub fn process_batch(
    batch: &DailyBatch,
    prompt: &RenderedPrompt,
    schema: &ExtractionSchema,
    backend: &dyn CompletionBackend,
    config: &RunConfig,
) -> BatchOutcome {
    let fingerprint = prompt.fingerprint();
    let quarantine = |kind: &str, error: String, raw: Vec<String>, missing: Vec<String>| {
        BatchOutcome::Quarantined(QuarantineRecord {
            thread_id: batch.thread_id.clone(),
            batch_date: batch.batch_date,
            batch_index: batch.batch_index,
            schema_version: schema.schema_version.clone(),
            prompt_fingerprint: fingerprint.clone(),
            model_id: config.model_id.clone(),
            error_kind: kind.to_string(),
            error,
            raw_outputs: raw,
            missing_fingerprints: missing,
            created_at: timefmt::now(),
        })
    };
    let call = |req: &CompletionRequest| backend.complete(req);
    let backend_failure = |req: &CompletionRequest, e: BackendError, raw: Vec<String>| {
        let missing = match e {
            BackendError::MissingTranscript(_) => vec![req.fingerprint()],
            _ => Vec::new(),
        };
        quarantine(e.kind(), e.to_string(), raw, missing)
    };

    let first = initial_request(prompt, config);
    let raw = match call(&first) {
        Ok(r) => r.raw_text,
        Err(e) => return backend_failure(&first, e, Vec::new()),
    };
    let (parsed, repair_used) = match parse_response(&raw, schema) {
        Ok(p) => (p, false),
        Err(err) => {
            tracing::debug!(thread = %batch.thread_id, date = %batch.batch_date, error = %err, "re-prompting");
            let repair = repair_request(prompt, config);
            let raw2 = match call(&repair) {
                Ok(r) => r.raw_text,
                Err(e) => return backend_failure(&repair, e, vec![raw]),
            };
            match parse_response(&raw2, schema) {
                Ok(p) => (p, true),
                Err(err2) => {
                    return quarantine(err2.kind(), err2.to_string(), vec![raw, raw2], Vec::new())
                }
            }
        }
    };
    let key = SummaryKey {
        thread_id: batch.thread_id.clone(),
        batch_date: batch.batch_date,
        schema_version: schema.schema_version.clone(),
        prompt_fingerprint: fingerprint.clone(),
    };
    BatchOutcome::Summary(UnitSummary {
        unit_id: key.unit_id(),
        thread_id: batch.thread_id.clone(),
        batch_date: batch.batch_date,
        batch_index: batch.batch_index,
        schema_version: schema.schema_version.clone(),
        summary: parsed.summary,
        values: parsed.values,
        model_id: config.model_id.clone(),
        prompt_fingerprint: fingerprint,
        repair_used,
        created_at: timefmt::now(),
    })
}

enum Step {
    Skipped,
    Fresh(Box<BatchOutcome>),
}

struct ThreadResult {
    steps: Vec<Step>,
    fallbacks: usize,
}

fn run_thread(
    thread: &Thread,
    schema: &ExtractionSchema,
    backend: &dyn CompletionBackend,
    store: &Store,
    config: &RunConfig,
) -> ThreadResult {
    let batches = config.chunking.batches(thread);
    let mut predecessors: Vec<Option<String>> = Vec::with_capacity(batches.len());
    let mut steps = Vec::with_capacity(batches.len());
    let mut fallbacks = 0;
    for batch in &batches {
        let ctx = context_for(thread, batch.batch_index, &predecessors, config);
        if batch.batch_index > 0 && ctx.prior_summary.is_none() {
            fallbacks += 1;
        }
        let prompt = match build_prompt(schema, &ctx, batch, &config.prompt) {
            Ok(p) => p,
            Err(e) => {
                // Budget overflow under the error policy: nothing to send.
                let q = QuarantineRecord {
                    thread_id: batch.thread_id.clone(),
                    batch_date: batch.batch_date,
                    batch_index: batch.batch_index,
                    schema_version: schema.schema_version.clone(),
                    prompt_fingerprint: String::new(),
                    model_id: config.model_id.clone(),
                    error_kind: match e {
                        PromptError::BudgetExceeded { .. } => "BudgetExceeded",
                        PromptError::ContextMismatch(_) => "ContextMismatch",
                    }
                    .into(),
                    error: e.to_string(),
                    raw_outputs: Vec::new(),
                    missing_fingerprints: Vec::new(),
                    created_at: timefmt::now(),
                };
                predecessors.push(None);
                let skip = !config.retry_quarantined && store.is_quarantined(&q.key());
                steps.push(if skip {
                    Step::Skipped
                } else {
                    Step::Fresh(Box::new(BatchOutcome::Quarantined(q)))
                });
                continue;
            }
        };
        let key = SummaryKey {
            thread_id: batch.thread_id.clone(),
            batch_date: batch.batch_date,
            schema_version: schema.schema_version.clone(),
            prompt_fingerprint: prompt.fingerprint(),
        };
        if let Some(done) = store.summary_for(&key) {
            predecessors.push(Some(done.summary));
            steps.push(Step::Skipped);
            continue;
        }
        if !config.retry_quarantined && store.is_quarantined(&key) {
            predecessors.push(None);
            steps.push(Step::Skipped);
            continue;
        }
        let outcome = process_batch(batch, &prompt, schema, backend, config);
        predecessors.push(match &outcome {
            BatchOutcome::Summary(u) => Some(u.summary.clone()),
            BatchOutcome::Quarantined(_) => None,
        });
        steps.push(Step::Fresh(Box::new(outcome)));
    }
    ThreadResult { steps, fallbacks }
}

/// Runs every batch of every thread. Threads run concurrently (up to
/// `config.concurrency`); batches within a thread run in order. Results are
/// committed in thread-id order so replay runs produce identical stores.
pub fn run(
    corpus: &Corpus,
    schema: &ExtractionSchema,
    backend: &dyn CompletionBackend,
    store: &Store,
    config: &RunConfig,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    if let Some(v) = store.schema_version() {
        if v != schema.schema_version {
            return Err(PipelineError::SchemaMismatch {
                store: v,
                run: schema.schema_version.clone(),
            });
        }
    }
    let started = Instant::now();
    let threads: Vec<&Thread> = corpus.threads().collect();
    let mut report = RunReport {
        threads: threads.len(),
        ..RunReport::default()
    };
    let next = AtomicUsize::new(0);
    let workers = config.concurrency.min(threads.len()).max(1);

    std::thread::scope(|scope| -> Result<(), PipelineError> {
        let (tx, rx) = mpsc::channel::<(usize, ThreadResult)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let threads = &threads;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(thread) = threads.get(i) else { break };
                let result = run_thread(thread, schema, backend, store, config);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, ThreadResult> = BTreeMap::new();
        let mut cursor = 0;
        let mut failure = None;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&cursor) {
                cursor += 1;
                if failure.is_some() {
                    continue;
                }
                if let Err(e) = commit(result, store, &mut report) {
                    // Stop handing out work; let in-flight threads finish.
                    next.store(usize::MAX / 2, Ordering::Relaxed);
                    failure = Some(e);
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })?;

    report.missing_transcripts.sort();
    report.missing_transcripts.dedup();
    report.wall_time = started.elapsed();
    tracing::info!(
        processed = report.processed,
        skipped = report.skipped,
        quarantined = report.quarantined,
        "run finished"
    );
    Ok(report)
}

fn commit(result: ThreadResult, store: &Store, report: &mut RunReport) -> Result<(), PipelineError> {
    report.title_only_fallbacks += result.fallbacks;
    for step in result.steps {
        report.attempted += 1;
        let outcome = match step {
            Step::Skipped => {
                report.skipped += 1;
                continue;
            }
            Step::Fresh(outcome) => *outcome,
        };
        match outcome {
            BatchOutcome::Summary(u) => {
                store.append_summary(&u)?;
                report.processed += 1;
                if u.repair_used {
                    report.repairs += 1;
                }
            }
            BatchOutcome::Quarantined(q) => {
                *report.errors.entry(q.error_kind.clone()).or_default() += 1;
                report
                    .missing_transcripts
                    .extend(q.missing_fingerprints.iter().cloned());
                if !store.is_quarantined(&q.key()) {
                    store.append_quarantine(&q)?;
                }
                report.quarantined += 1;
            }
        }
    }
    Ok(())
}

/// Rebuilds the prompt a stored summary was produced from, using the stored
/// summary of its predecessor as context.
pub fn reconstruct_prompt(
    unit_id: &str,
    corpus: &Corpus,
    schema: &ExtractionSchema,
    store: &Store,
    config: &RunConfig,
) -> Result<RenderedPrompt, PipelineError> {
    let summaries = store.summaries();
    let target = summaries
        .iter()
        .find(|s| s.unit_id == unit_id)
        .ok_or_else(|| PipelineError::UnknownUnit(unit_id.to_string()))?;
    let thread = corpus
        .thread(&target.thread_id)
        .ok_or_else(|| PipelineError::UnknownThread(target.thread_id.clone()))?;
    let batches = config.chunking.batches(thread);
    let batch = batches
        .iter()
        .find(|b| b.batch_date == target.batch_date)
        .ok_or_else(|| PipelineError::UnknownUnit(unit_id.to_string()))?;

    let mut predecessors = vec![None; batch.batch_index];
    for s in summaries.iter().filter(|s| {
        s.thread_id == target.thread_id
            && s.schema_version == target.schema_version
            && s.batch_index < batch.batch_index
    }) {
        predecessors[s.batch_index] = Some(s.summary.clone());
    }
    let ctx = context_for(thread, batch.batch_index, &predecessors, config);
    Ok(build_prompt(schema, &ctx, batch, &config.prompt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        BackendKind, CompletionResult, MemoryTranscripts, ReplayBackend, TranscriptEntry,
    };
    use crate::corpus::{Message, Thread};
    use crate::schema::default_schema;
    use chrono::TimeZone;
    use std::sync::Mutex;

    fn thread(days: u32) -> Thread {
        let messages = (0..days)
            .flat_map(|d| {
                (0..2).map(move |m| Message {
                    message_id: format!("m{d}{m}"),
                    thread_id: "t1".into(),
                    author: format!("user{m}"),
                    posted_at: Utc.with_ymd_and_hms(2023, 5, 1 + d, 10 + m, 0, 0).unwrap(),
                    body: format!("selling access day {d} msg {m}"),
                })
            })
            .collect();
        Thread::new("t1", "forum", "Selling VPN access", messages)
    }

    fn answer(summary: &str) -> String {
        serde_json::json!({
            "summary": summary,
            "is_sale": true, "is_initial_access": true, "is_targeting_large_organization": false,
            "is_targeting_critical_infrastructure": false, "is_remotely_exploitable": true,
            "is_actively_exploitable": false, "is_geopolitics": false, "is_targeting_mainstream": false,
            "targeted_technologies": ["VPN"], "industries": ["Finance"]
        })
        .to_string()
    }

    /// Backend that answers from a closure of the request.
    struct FnBackend<F>(F, Mutex<Vec<CompletionRequest>>);

    impl<F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync> CompletionBackend
        for FnBackend<F>
    {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
            self.1.lock().unwrap().push(req.clone());
            (self.0)(req).map(|raw_text| CompletionResult {
                raw_text,
                latency: Duration::ZERO,
                usage: None,
                backend_kind: BackendKind::Replay,
                retries: 0,
            })
        }
        fn kind(&self) -> BackendKind {
            BackendKind::Replay
        }
    }

    fn fn_backend<F>(f: F) -> FnBackend<F> {
        FnBackend(f, Mutex::new(Vec::new()))
    }

    #[test]
    fn context_rules() {
        let t = thread(3);
        let cfg = RunConfig::default();
        let c0 = context_for(&t, 0, &[], &cfg);
        assert_eq!(c0.thread_title.as_deref(), Some("Selling VPN access"));
        assert!(c0.prior_summary.is_none());

        let preds = vec![Some("s0".to_string()), None];
        let c2 = context_for(&t, 2, &preds, &cfg);
        assert_eq!(c2.prior_summary.as_deref(), Some("s0"));

        let no_title = RunConfig {
            include_title_always: false,
            ..RunConfig::default()
        };
        let c1 = context_for(&t, 1, &preds, &no_title);
        assert!(c1.thread_title.is_none());
        assert_eq!(c1.prior_summary.as_deref(), Some("s0"));

        let all_bad = vec![None, None];
        let c = context_for(&t, 2, &all_bad, &no_title);
        assert_eq!(c.thread_title.as_deref(), Some("Selling VPN access"));
        assert!(c.prior_summary.is_none());
    }

    #[test]
    fn three_batches_chain_summaries_and_rerun_skips() {
        let corpus = Corpus::from_threads([thread(3)]);
        let schema = default_schema();
        let backend = fn_backend(|req: &CompletionRequest| {
            let day = req.user_text.split("Conversation of ").nth(1).unwrap()[..10].to_string();
            Ok(answer(&format!("summary of {day}")))
        });
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path()).unwrap();
        let cfg = RunConfig::default();
        let r = run(&corpus, &schema, &backend, &store, &cfg).unwrap();
        assert_eq!((r.processed, r.skipped, r.quarantined), (3, 0, 0));

        let reqs = backend.1.lock().unwrap().clone();
        assert!(!reqs[0].user_text.contains("Summary of the prior conversation"));
        assert!(reqs[1]
            .user_text
            .contains("Summary of the prior conversation: summary of 2023-05-01"));
        assert!(reqs[2]
            .user_text
            .contains("Summary of the prior conversation: summary of 2023-05-02"));

        for s in store.summaries() {
            let p = reconstruct_prompt(&s.unit_id, &corpus, &schema, &store, &cfg).unwrap();
            assert_eq!(p.fingerprint(), s.prompt_fingerprint);
        }

        let r2 = run(&corpus, &schema, &backend, &store, &cfg).unwrap();
        assert_eq!((r2.processed, r2.skipped, r2.quarantined), (0, 3, 0));
        assert_eq!(store.summaries().len(), 3);
    }

    fn record_full_run(corpus: &Corpus, cfg: &RunConfig) -> Vec<TranscriptEntry> {
        let sink = std::sync::Arc::new(MemoryTranscripts::default());
        let recorder = crate::backend::RecordingBackend::new(
            fn_backend(|req: &CompletionRequest| {
                let day = req.user_text.split("Conversation of ").nth(1).unwrap()[..10].to_string();
                Ok(answer(&format!("summary of {day}")))
            }),
            sink.clone(),
        );
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path()).unwrap();
        run(corpus, &default_schema(), &recorder, &store, cfg).unwrap();
        sink.entries()
    }

    #[test]
    fn missing_last_transcript_quarantines_and_continues() {
        let corpus = Corpus::from_threads([thread(3)]);
        let cfg = RunConfig::default();
        let mut entries = record_full_run(&corpus, &cfg);
        assert_eq!(entries.len(), 3);
        let dropped = entries.remove(2);
        let replay = ReplayBackend::from_entries(entries).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path()).unwrap();
        let r = run(&corpus, &default_schema(), &replay, &store, &cfg).unwrap();
        assert_eq!((r.processed, r.skipped, r.quarantined), (2, 0, 1));
        assert_eq!(r.missing_transcripts, vec![dropped.fingerprint]);
        assert_eq!(r.errors.get("MissingTranscript"), Some(&1));
    }

    #[test]
    fn missing_middle_transcript_changes_successor_context() {
        let corpus = Corpus::from_threads([thread(3)]);
        let cfg = RunConfig::default();
        let mut entries = record_full_run(&corpus, &cfg);
        entries.remove(1);
        let replay = ReplayBackend::from_entries(entries).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path()).unwrap();
        let r = run(&corpus, &default_schema(), &replay, &store, &cfg).unwrap();
        // Batch 2 now carries batch 0's summary, a prompt never recorded.
        assert_eq!((r.processed, r.quarantined), (1, 2));
        assert_eq!(r.missing_transcripts.len(), 2);
        assert_eq!(store.quarantine().len(), 2);
    }

    #[test]
    fn repair_then_quarantine() {
        let t = thread(1);
        let batch = chunk_daily(&t).remove(0);
        let schema = default_schema();
        let cfg = RunConfig::default();
        let ctx = context_for(&t, 0, &[], &cfg);
        let prompt = build_prompt(&schema, &ctx, &batch, &cfg.prompt).unwrap();

        let repairable = fn_backend(|req: &CompletionRequest| {
            Ok(if req.user_text.ends_with(REPAIR_SUFFIX) {
                answer("fixed")
            } else {
                "Sure! Here is the summary you asked for.".to_string()
            })
        });
        match process_batch(&batch, &prompt, &schema, &repairable, &cfg) {
            BatchOutcome::Summary(u) => {
                assert!(u.repair_used);
                assert_eq!(u.summary, "fixed");
            }
            other => panic!("{other:?}"),
        }

        let hopeless = fn_backend(|_: &CompletionRequest| Ok("no json here".to_string()));
        match process_batch(&batch, &prompt, &schema, &hopeless, &cfg) {
            BatchOutcome::Quarantined(q) => {
                assert_eq!(q.error_kind, "MalformedDocument");
                assert_eq!(q.raw_outputs.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn budget_overflow_quarantines_under_error_policy() {
        let corpus = Corpus::from_threads([thread(1)]);
        let schema = default_schema();
        let mut cfg = RunConfig::default();
        cfg.prompt.char_budget = 100;
        let backend = fn_backend(|_: &CompletionRequest| Ok(answer("x")));
        let dir = tempfile::tempdir().unwrap();
        let store = Store::init(dir.path()).unwrap();
        let r = run(&corpus, &schema, &backend, &store, &cfg).unwrap();
        assert_eq!(r.quarantined, 1);
        assert!(backend.1.lock().unwrap().is_empty());
        let r2 = run(&corpus, &schema, &backend, &store, &cfg).unwrap();
        assert_eq!((r2.skipped, r2.quarantined), (1, 0));
    }

    #[test]
    fn zero_concurrency_is_rejected() {
        let cfg = RunConfig {
            concurrency: 0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
