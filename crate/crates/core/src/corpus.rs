//! Forum corpus ingestion and per-day partitioning of threads.
//!
//! A corpus file is newline-delimited JSON, one message per line. Messages are
//! grouped into [`Thread`]s and each thread is cut into [`DailyBatch`]es, one
//! per UTC calendar day that has at least one post.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timefmt;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate message_id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: thread {thread_id:?} has conflicting {field}")]
    ThreadMismatch {
        line: usize,
        thread_id: String,
        field: &'static str,
    },
}

impl CorpusError {
    /// Source line of the offending record, when the error is tied to one.
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Io(_) => None,
            CorpusError::Malformed { line, .. }
            | CorpusError::DuplicateId { line, .. }
            | CorpusError::ThreadMismatch { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Hash)]
pub struct Message {
    pub message_id: String,
    pub thread_id: String,
    pub author: String,
    #[serde(with = "timefmt::rfc3339")]
    pub posted_at: DateTime<Utc>,
    pub body: String,
}

impl Message {
    /// Total order used everywhere messages are sorted.
    pub fn sort_key(&self) -> (DateTime<Utc>, &str) {
        (self.posted_at, self.message_id.as_str())
    }

    pub fn day(&self) -> NaiveDate {
        self.posted_at.date_naive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Thread {
    pub thread_id: String,
    pub forum: String,
    pub title: String,
    pub messages: Vec<Message>,
}

impl Thread {
    /// Builds a thread, sorting messages by `(posted_at, message_id)`.
    pub fn new(
        thread_id: impl Into<String>,
        forum: impl Into<String>,
        title: impl Into<String>,
        mut messages: Vec<Message>,
    ) -> Self {
        messages.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Thread {
            thread_id: thread_id.into(),
            forum: forum.into(),
            title: title.into(),
            messages,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DailyBatch {
    pub thread_id: String,
    pub batch_date: NaiveDate,
    pub batch_index: usize,
    pub messages: Vec<Message>,
}

/// Threads keyed by id. Immutable after ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    threads: BTreeMap<String, Thread>,
}

impl Corpus {
    pub fn from_threads(threads: impl IntoIterator<Item = Thread>) -> Self {
        Corpus {
            threads: threads
                .into_iter()
                .map(|t| (t.thread_id.clone(), t))
                .collect(),
        }
    }

    pub fn threads(&self) -> impl ExactSizeIterator<Item = &Thread> {
        self.threads.values()
    }

    pub fn thread(&self, thread_id: &str) -> Option<&Thread> {
        self.threads.get(thread_id)
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn message_count(&self) -> usize {
        self.threads.values().map(|t| t.messages.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.threads.is_empty()
    }

    /// Every daily batch of every thread, in `(thread_id, batch_index)` order.
    pub fn daily_batches(&self) -> Vec<DailyBatch> {
        self.threads.values().flat_map(chunk_daily).collect()
    }

    /// Flattens the corpus back into wire records, thread by thread.
    pub fn to_records(&self) -> Vec<MessageRecord> {
        self.threads
            .values()
            .flat_map(|t| {
                t.messages.iter().map(move |m| MessageRecord {
                    message_id: m.message_id.clone(),
                    thread_id: t.thread_id.clone(),
                    forum: t.forum.clone(),
                    thread_title: t.title.clone(),
                    author: m.author.clone(),
                    posted_at: m.posted_at,
                    body: m.body.clone(),
                })
            })
            .collect()
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MessageRecord {
    pub message_id: String,
    pub thread_id: String,
    pub forum: String,
    pub thread_title: String,
    pub author: String,
    #[serde(with = "timefmt::rfc3339")]
    pub posted_at: DateTime<Utc>,
    pub body: String,
}

impl MessageRecord {
    fn check(&self) -> Result<(), String> {
        for (field, value) in [
            ("message_id", &self.message_id),
            ("thread_id", &self.thread_id),
            ("thread_title", &self.thread_title),
            ("author", &self.author),
        ] {
            if value.trim().is_empty() {
                return Err(format!("{field} is empty"));
            }
        }
        if self.body.trim().is_empty() {
            return Err("body is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    #[default]
    Strict,
    /// Skip rejected lines and tally them instead of aborting.
    Lenient,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub threads: usize,
    pub messages: usize,
    pub skipped: Vec<CorpusError>,
}

pub fn ingest(path: &Path, mode: IngestMode) -> Result<(Corpus, IngestReport), CorpusError> {
    let file = File::open(path)?;
    ingest_reader(BufReader::new(file), mode)
}

pub fn ingest_reader<R: Read>(
    reader: BufReader<R>,
    mode: IngestMode,
) -> Result<(Corpus, IngestReport), CorpusError> {
    struct Partial {
        forum: String,
        title: String,
        messages: Vec<Message>,
    }

    let mut seen = HashSet::new();
    let mut partial: BTreeMap<String, Partial> = BTreeMap::new();
    let mut report = IngestReport::default();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<MessageRecord>(&line)
            .map_err(|e| CorpusError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })
            .and_then(|rec| {
                rec.check().map_err(|reason| CorpusError::Malformed {
                    line: line_no,
                    reason,
                })?;
                if seen.contains(&rec.message_id) {
                    return Err(CorpusError::DuplicateId {
                        line: line_no,
                        id: rec.message_id,
                    });
                }
                if let Some(p) = partial.get(&rec.thread_id) {
                    let field = if p.title != rec.thread_title {
                        Some("thread_title")
                    } else if p.forum != rec.forum {
                        Some("forum")
                    } else {
                        None
                    };
                    if let Some(field) = field {
                        return Err(CorpusError::ThreadMismatch {
                            line: line_no,
                            thread_id: rec.thread_id,
                            field,
                        });
                    }
                }
                Ok(rec)
            });

        let rec = match outcome {
            Ok(rec) => rec,
            Err(e) if mode == IngestMode::Lenient => {
                report.skipped.push(e);
                continue;
            }
            Err(e) => return Err(e),
        };

        seen.insert(rec.message_id.clone());
        let msg = Message {
            message_id: rec.message_id,
            thread_id: rec.thread_id.clone(),
            author: rec.author,
            posted_at: rec.posted_at,
            body: rec.body,
        };
        match partial.entry(rec.thread_id) {
            Entry::Occupied(mut e) => e.get_mut().messages.push(msg),
            Entry::Vacant(e) => {
                e.insert(Partial {
                    forum: rec.forum,
                    title: rec.thread_title,
                    messages: vec![msg],
                });
            }
        }
    }

    let corpus = Corpus::from_threads(
        partial
            .into_iter()
            .map(|(id, p)| Thread::new(id, p.forum, p.title, p.messages)),
    );
    report.threads = corpus.thread_count();
    report.messages = corpus.message_count();
    Ok((corpus, report))
}

/// Partitions a thread's messages by UTC calendar day.
///
/// Assumes `thread.messages` is already sorted (as [`Thread::new`] guarantees);
/// batches come out in ascending date order with indices `0..k`.
pub fn chunk_daily(thread: &Thread) -> Vec<DailyBatch> {
    let mut batches: Vec<DailyBatch> = Vec::new();
    for msg in &thread.messages {
        let day = msg.day();
        match batches.last_mut() {
            Some(b) if b.batch_date == day => b.messages.push(msg.clone()),
            _ => batches.push(DailyBatch {
                thread_id: thread.thread_id.clone(),
                batch_date: day,
                batch_index: batches.len(),
                messages: vec![msg.clone()],
            }),
        }
    }
    batches
}

/// The whole thread as a single batch dated by its first message.
pub fn chunk_whole(thread: &Thread) -> Vec<DailyBatch> {
    match thread.messages.first() {
        None => Vec::new(),
        Some(first) => vec![DailyBatch {
            thread_id: thread.thread_id.clone(),
            batch_date: first.day(),
            batch_index: 0,
            messages: thread.messages.clone(),
        }],
    }
}

/// Uniform sample of daily batches without replacement.
///
/// Returns `min(n, population)` batches; the order is part of the
/// deterministic output for a given seed.
pub fn sample_batches(corpus: &Corpus, n: usize, seed: u64) -> Vec<DailyBatch> {
    let population = corpus.daily_batches();
    let amount = n.min(population.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, population.len(), amount);
    let mut slots: Vec<Option<DailyBatch>> = population.into_iter().map(Some).collect();
    picks
        .into_iter()
        .map(|i| slots[i].take().expect("index sample yields distinct indices"))
        .collect()
}
