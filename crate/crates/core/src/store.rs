//! Append-only record store.
//!
//! A store is a directory of newline-delimited JSON files plus a
//! `manifest.json` inventory:
//!
//! ```text
//! corpus.jsonl            ingested messages
//! summaries.jsonl         one UnitSummary per processed batch
//! quarantine.jsonl        batches whose output could not be parsed
//! transcripts.jsonl       recorded model answers
//! annotations/<coder>.jsonl
//! adjudications.jsonl
//! merged.jsonl
//! manifest.json
//! ```
//!
//! For every file the manifest keeps the record count, byte length and
//! SHA-256 of the content, plus the offset and hash of everything before the
//! last record. On open the content is checked against both: a file that
//! matches the full hash is intact (anything after it is an unmanifested
//! append and is recovered), a file that only matches the prefix hash lost
//! part of its final record (a torn write), anything else is an integrity
//! failure.
//!
//! Records are written in canonical form (sorted keys, fixed timestamp
//! format) so identical inputs give byte-identical files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, TranscriptEntry, TranscriptSink};
use crate::corpus::{Corpus, CorpusError, IngestMode, MessageRecord};
use crate::eval::{AdjudicationRecord, AnnotationRecord, MergedDecision};
use crate::pipeline::QuarantineRecord;
use crate::schema::{ExtractionSchema, SummaryKey, UnitSummary, VariableKind, VariableValue};

pub const STORE_VERSION: u32 = 1;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const ADJUDICATIONS_FILE: &str = "adjudications.jsonl";
pub const MERGED_FILE: &str = "merged.jsonl";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = "store.lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no store at {0}")]
    NotFound(PathBuf),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("store version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("store holds schema {store:?}, record uses {record:?}")]
    SchemaMismatch { store: String, record: String },
    #[error("integrity check failed for {file}: {reason}")]
    Integrity { file: String, reason: String },
    #[error("{file} line {line}: {reason}")]
    Record {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("store is open read-only")]
    ReadOnly,
    #[error("store is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("unknown variable {0:?} in predicate")]
    UnknownVariable(String),
    #[error("bad predicate: {0}")]
    BadPredicate(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenMode {
    Read,
    Append,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub records: usize,
    pub bytes: u64,
    pub sha256: String,
    /// Byte offset where the last record starts.
    pub last_offset: u64,
    /// Hash of the content before `last_offset`.
    pub prefix_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub store_version: u32,
    pub schema_version: Option<String>,
    pub files: BTreeMap<String, FileEntry>,
}

/// A final record cut short by an interrupted write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TornRecord {
    pub file: String,
    pub offset: u64,
    pub bytes: usize,
}

/// Serializes a record in canonical form: keys sorted, no whitespace.
pub fn canonical_line<T: Serialize>(record: &T) -> Result<String, StoreError> {
    let value = serde_json::to_value(record).map_err(|e| StoreError::Invalid(e.to_string()))?;
    Ok(value.to_string())
}

/// One append-only file and its running hash state.
struct RecordLog {
    path: PathBuf,
    records: usize,
    bytes: u64,
    full: Sha256,
    prefix: Sha256,
    last_offset: u64,
    handle: Option<File>,
}

impl RecordLog {
    fn empty(root: &Path, rel: &str) -> Self {
        RecordLog {
            path: root.join(rel),
            records: 0,
            bytes: 0,
            full: Sha256::new(),
            prefix: Sha256::new(),
            last_offset: 0,
            handle: None,
        }
    }

    fn entry(&self) -> FileEntry {
        FileEntry {
            records: self.records,
            bytes: self.bytes,
            sha256: hex::encode(self.full.clone().finalize()),
            last_offset: self.last_offset,
            prefix_sha256: hex::encode(self.prefix.clone().finalize()),
        }
    }

    fn absorb(&mut self, line_with_newline: &[u8]) {
        self.prefix = self.full.clone();
        self.last_offset = self.bytes;
        self.full.update(line_with_newline);
        self.bytes += line_with_newline.len() as u64;
        self.records += 1;
    }

    fn append(&mut self, line: &str) -> Result<(), StoreError> {
        if self.handle.is_none() {
            if let Some(parent) = self.path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err(&self.path))?;
            self.handle = Some(f);
        }
        let handle = self.handle.as_mut().expect("handle opened above");
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        handle.write_all(&buf).map_err(io_err(&self.path))?;
        handle.sync_data().map_err(io_err(&self.path))?;
        self.absorb(&buf);
        Ok(())
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Loaded {
    log: RecordLog,
    lines: Vec<(usize, String)>,
    torn: Option<TornRecord>,
}

/// Reads and verifies one file against its manifest entry.
fn load_log(root: &Path, rel: &str, entry: Option<&FileEntry>) -> Result<Loaded, StoreError> {
    let mut log = RecordLog::empty(root, rel);
    let data = match fs::read(&log.path) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if entry.is_some_and(|e| e.records > 0) {
                return Err(StoreError::Integrity {
                    file: rel.into(),
                    reason: "file listed in manifest is missing".into(),
                });
            }
            return Ok(Loaded {
                log,
                lines: Vec::new(),
                torn: None,
            });
        }
        Err(e) => return Err(io_err(&log.path)(e)),
    };

    let integrity = |reason: &str| StoreError::Integrity {
        file: rel.into(),
        reason: reason.into(),
    };

    // Length of content vouched for by the manifest.
    let (verified, mut torn) = match entry {
        None => (0usize, None),
        Some(e) => {
            let bytes = e.bytes as usize;
            let last = e.last_offset as usize;
            if data.len() >= bytes && sha_hex(&data[..bytes]) == e.sha256 {
                (bytes, None)
            } else if e.records > 0
                && data.len() > last
                && data.len() < bytes
                && sha_hex(&data[..last]) == e.prefix_sha256
                && !data[last..].contains(&b'\n')
            {
                (
                    last,
                    Some(TornRecord {
                        file: rel.into(),
                        offset: last as u64,
                        bytes: data.len() - last,
                    }),
                )
            } else {
                return Err(integrity("content does not match manifest hash"));
            }
        }
    };

    let usable = match torn {
        Some(ref t) => t.offset as usize,
        None => {
            // Anything past the verified region: complete lines are recovered
            // appends, an unterminated remainder is a torn record.
            let tail = &data[verified..];
            match tail.iter().rposition(|&b| b == b'\n') {
                Some(i) if verified + i + 1 < data.len() => {
                    torn = Some(TornRecord {
                        file: rel.into(),
                        offset: (verified + i + 1) as u64,
                        bytes: data.len() - verified - i - 1,
                    });
                    verified + i + 1
                }
                None if !tail.is_empty() => {
                    torn = Some(TornRecord {
                        file: rel.into(),
                        offset: verified as u64,
                        bytes: tail.len(),
                    });
                    verified
                }
                _ => data.len(),
            }
        }
    };

    let mut lines = Vec::new();
    let mut start = 0;
    let mut line_no = 0;
    while start < usable {
        let end = start
            + data[start..usable]
                .iter()
                .position(|&b| b == b'\n')
                .expect("usable region ends on a newline");
        line_no += 1;
        let chunk = &data[start..=end];
        let text = std::str::from_utf8(&chunk[..chunk.len() - 1])
            .map_err(|_| integrity("record is not UTF-8"))?;
        log.absorb(chunk);
        lines.push((line_no, text.to_string()));
        start = end + 1;
    }
    if let Some(e) = entry {
        if torn.is_none() && log.records < e.records {
            return Err(integrity("fewer records than the manifest lists"));
        }
    }
    Ok(Loaded { log, lines, torn })
}

fn parse_lines<T: DeserializeOwned>(
    file: &str,
    lines: &[(usize, String)],
) -> Result<Vec<T>, StoreError> {
    lines
        .iter()
        .map(|(line, text)| {
            serde_json::from_str(text).map_err(|e| StoreError::Record {
                file: file.into(),
                line: *line,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn valid_coder_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Default)]
struct Inner {
    logs: HashMap<String, RecordLog>,
    schema_version: Option<String>,
    corpus: Vec<MessageRecord>,
    message_ids: HashMap<String, usize>,
    summaries: Vec<UnitSummary>,
    summary_keys: HashMap<SummaryKey, usize>,
    quarantine: Vec<QuarantineRecord>,
    quarantine_keys: HashSet<SummaryKey>,
    transcripts: Vec<TranscriptEntry>,
    transcript_index: HashMap<String, usize>,
    annotations: Vec<AnnotationRecord>,
    adjudications: Vec<AdjudicationRecord>,
    merged: Vec<MergedDecision>,
    merged_units: HashSet<String>,
    torn: Vec<TornRecord>,
}

impl Inner {
    fn manifest(&self) -> StoreManifest {
        StoreManifest {
            store_version: STORE_VERSION,
            schema_version: self.schema_version.clone(),
            files: self
                .logs
                .iter()
                .filter(|(_, l)| l.records > 0 || l.path.exists())
                .map(|(k, l)| (k.clone(), l.entry()))
                .collect(),
        }
    }

    fn log(&mut self, root: &Path, rel: &str) -> &mut RecordLog {
        self.logs
            .entry(rel.to_string())
            .or_insert_with(|| RecordLog::empty(root, rel))
    }
}

pub struct Store {
    root: PathBuf,
    mode: OpenMode,
    inner: Mutex<Inner>,
    _lock: Option<File>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreCounts {
    pub messages: usize,
    pub summaries: usize,
    pub quarantined: usize,
    pub transcripts: usize,
    pub annotations: usize,
    pub adjudications: usize,
    pub merged: usize,
}

impl Store {
    /// Creates an empty store (or opens an existing one) for appending.
    pub fn init(root: &Path) -> Result<Store, StoreError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            let manifest = StoreManifest {
                store_version: STORE_VERSION,
                schema_version: None,
                files: BTreeMap::new(),
            };
            write_manifest(root, &manifest)?;
        }
        Store::open(root, OpenMode::Append)
    }

    pub fn open(root: &Path, mode: OpenMode) -> Result<Store, StoreError> {
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(StoreError::NotFound(root.to_path_buf()));
        }
        let lock = match mode {
            OpenMode::Read => None,
            OpenMode::Append => Some(acquire_lock(root)?),
        };
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: StoreManifest =
            serde_json::from_str(&text).map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
        if manifest.store_version != STORE_VERSION {
            return Err(StoreError::VersionMismatch {
                found: manifest.store_version,
                expected: STORE_VERSION,
            });
        }

        let mut rels: Vec<String> = [
            CORPUS_FILE,
            SUMMARIES_FILE,
            QUARANTINE_FILE,
            TRANSCRIPTS_FILE,
            ADJUDICATIONS_FILE,
            MERGED_FILE,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        rels.extend(annotation_files(root)?);
        for rel in manifest.files.keys() {
            if !rels.contains(rel) {
                rels.push(rel.clone());
            }
        }

        let mut inner = Inner {
            schema_version: manifest.schema_version.clone(),
            ..Inner::default()
        };
        for rel in &rels {
            let loaded = load_log(root, rel, manifest.files.get(rel))?;
            if let Some(t) = loaded.torn.clone() {
                tracing::warn!(file = %t.file, offset = t.offset, "excluding torn record");
                inner.torn.push(t);
            }
            inner.ingest_lines(rel, &loaded.lines)?;
            let mut log = loaded.log;
            if mode == OpenMode::Append {
                if let Some(t) = &loaded.torn {
                    // Drop the torn bytes so the next append starts on a
                    // record boundary.
                    let f = OpenOptions::new()
                        .write(true)
                        .open(&log.path)
                        .map_err(io_err(&log.path))?;
                    f.set_len(t.offset).map_err(io_err(&log.path))?;
                    f.sync_all().map_err(io_err(&log.path))?;
                }
            }
            log.handle = None;
            inner.logs.insert(rel.clone(), log);
        }

        let store = Store {
            root: root.to_path_buf(),
            mode,
            inner: Mutex::new(inner),
            _lock: lock,
        };
        if mode == OpenMode::Append {
            let inner = store.lock();
            write_manifest(root, &inner.manifest())?;
        }
        Ok(store)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("store mutex poisoned")
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn mode(&self) -> OpenMode {
        self.mode
    }

    pub fn manifest(&self) -> StoreManifest {
        self.lock().manifest()
    }

    pub fn schema_version(&self) -> Option<String> {
        self.lock().schema_version.clone()
    }

    pub fn torn_records(&self) -> Vec<TornRecord> {
        self.lock().torn.clone()
    }

    pub fn counts(&self) -> StoreCounts {
        let i = self.lock();
        StoreCounts {
            messages: i.corpus.len(),
            summaries: i.summaries.len(),
            quarantined: i.quarantine.len(),
            transcripts: i.transcripts.len(),
            annotations: i.annotations.len(),
            adjudications: i.adjudications.len(),
            merged: i.merged.len(),
        }
    }

    /// Appends `line` to `rel`. `check` runs under the same lock as the
    /// append, so key checks cannot race; it returns `Ok(false)` to skip
    /// the write silently.
    fn write<C, F>(&self, rel: &str, line: String, check: C, commit: F) -> Result<bool, StoreError>
    where
        C: FnOnce(&Inner) -> Result<bool, StoreError>,
        F: FnOnce(&mut Inner),
    {
        if self.mode != OpenMode::Append {
            return Err(StoreError::ReadOnly);
        }
        let mut inner = self.lock();
        if !check(&inner)? {
            return Ok(false);
        }
        inner.log(&self.root, rel).append(&line)?;
        commit(&mut inner);
        write_manifest(&self.root, &inner.manifest())?;
        Ok(true)
    }

    // -- corpus ------------------------------------------------------------

    /// Adds messages not yet in the store. Re-importing an identical message
    /// is a no-op; a different message under an existing id is rejected.
    pub fn import_corpus(&self, corpus: &Corpus) -> Result<usize, StoreError> {
        let mut added = 0;
        for rec in corpus.to_records() {
            let line = canonical_line(&rec)?;
            let check = |inner: &Inner| match inner.message_ids.get(&rec.message_id) {
                None => Ok(true),
                Some(&i) if inner.corpus[i] == rec => Ok(false),
                Some(_) => Err(StoreError::DuplicateKey(format!("message {}", rec.message_id))),
            };
            let id = rec.message_id.clone();
            let wrote = self.write(CORPUS_FILE, line, check, |inner| {
                inner.message_ids.insert(id, inner.corpus.len());
                inner.corpus.push(rec.clone());
            })?;
            added += wrote as usize;
        }
        Ok(added)
    }

    pub fn corpus(&self) -> Result<Corpus, StoreError> {
        let records = self.lock().corpus.clone();
        let mut text = String::new();
        for r in &records {
            text.push_str(&canonical_line(r)?);
            text.push('\n');
        }
        let (corpus, _) = crate::corpus::ingest_reader(
            std::io::BufReader::new(text.as_bytes()),
            IngestMode::Strict,
        )?;
        Ok(corpus)
    }

    // -- summaries ---------------------------------------------------------

    pub fn append_summary(&self, u: &UnitSummary) -> Result<(), StoreError> {
        let key = u.key();
        let line = canonical_line(u)?;
        let check = |inner: &Inner| {
            if inner.summary_keys.contains_key(&key) {
                return Err(StoreError::DuplicateKey(format!("summary {}", u.unit_id)));
            }
            match &inner.schema_version {
                Some(v) if *v != u.schema_version => Err(StoreError::SchemaMismatch {
                    store: v.clone(),
                    record: u.schema_version.clone(),
                }),
                _ => Ok(true),
            }
        };
        let record = u.clone();
        self.write(SUMMARIES_FILE, line, check, |inner| {
            inner.schema_version.get_or_insert_with(|| record.schema_version.clone());
            inner.summary_keys.insert(key.clone(), inner.summaries.len());
            inner.summaries.push(record);
        })
        .map(drop)
    }

    pub fn summaries(&self) -> Vec<UnitSummary> {
        self.lock().summaries.clone()
    }

    pub fn summary_for(&self, key: &SummaryKey) -> Option<UnitSummary> {
        let inner = self.lock();
        inner.summary_keys.get(key).map(|&i| inner.summaries[i].clone())
    }

    pub fn summary_by_unit(&self, unit_id: &str) -> Option<UnitSummary> {
        self.lock()
            .summaries
            .iter()
            .find(|s| s.unit_id == unit_id)
            .cloned()
    }

    // -- quarantine --------------------------------------------------------

    pub fn append_quarantine(&self, q: &QuarantineRecord) -> Result<(), StoreError> {
        let key = q.key();
        let line = canonical_line(q)?;
        let check = |inner: &Inner| {
            if inner.quarantine_keys.contains(&key) {
                return Err(StoreError::DuplicateKey(format!(
                    "quarantine {}/{}",
                    q.thread_id, q.batch_date
                )));
            }
            Ok(true)
        };
        let record = q.clone();
        self.write(QUARANTINE_FILE, line, check, |inner| {
            inner.quarantine_keys.insert(key.clone());
            inner.quarantine.push(record);
        })
        .map(drop)
    }

    pub fn quarantine(&self) -> Vec<QuarantineRecord> {
        self.lock().quarantine.clone()
    }

    pub fn is_quarantined(&self, key: &SummaryKey) -> bool {
        self.lock().quarantine_keys.contains(key)
    }

    // -- transcripts -------------------------------------------------------

    pub fn transcripts(&self) -> Vec<TranscriptEntry> {
        self.lock().transcripts.clone()
    }

    // -- annotations -------------------------------------------------------

    /// Appends a coder's annotation. Later records for the same
    /// `(unit_id, coder_id)` supersede earlier ones; nothing is removed.
    pub fn append_annotation(&self, a: &AnnotationRecord) -> Result<(), StoreError> {
        if !valid_coder_id(&a.coder_id) {
            return Err(StoreError::Invalid(format!("coder id {:?}", a.coder_id)));
        }
        let rel = format!("{ANNOTATIONS_DIR}/{}.jsonl", a.coder_id);
        let line = canonical_line(a)?;
        let a = a.clone();
        self.write(&rel, line, |_| Ok(true), |inner| inner.annotations.push(a))
            .map(drop)
    }

    /// Every annotation ever appended, in log order per coder file.
    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.lock().annotations.clone()
    }

    pub fn append_adjudication(&self, a: &AdjudicationRecord) -> Result<(), StoreError> {
        let line = canonical_line(a)?;
        let a = a.clone();
        self.write(ADJUDICATIONS_FILE, line, |_| Ok(true), |inner| inner.adjudications.push(a))
            .map(drop)
    }

    pub fn adjudications(&self) -> Vec<AdjudicationRecord> {
        self.lock().adjudications.clone()
    }

    pub fn append_merged(&self, m: &MergedDecision) -> Result<(), StoreError> {
        let line = canonical_line(m)?;
        let check = |inner: &Inner| {
            if inner.merged_units.contains(&m.unit_id) {
                return Err(StoreError::DuplicateKey(format!("merged {}", m.unit_id)));
            }
            Ok(true)
        };
        let record = m.clone();
        self.write(MERGED_FILE, line, check, |inner| {
            inner.merged_units.insert(record.unit_id.clone());
            inner.merged.push(record);
        })
        .map(drop)
    }

    pub fn merged(&self) -> Vec<MergedDecision> {
        self.lock().merged.clone()
    }

    // -- query -------------------------------------------------------------

    /// Summaries satisfying every predicate, ordered by
    /// `(thread_id, batch_date)`.
    pub fn query(
        &self,
        filter: &Filter,
        schema: &ExtractionSchema,
    ) -> Result<Vec<UnitSummary>, StoreError> {
        filter.check(schema)?;
        let mut out: Vec<UnitSummary> = self
            .lock()
            .summaries
            .iter()
            .filter(|s| filter.matches(s))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            (&a.thread_id, a.batch_date, &a.unit_id).cmp(&(&b.thread_id, b.batch_date, &b.unit_id))
        });
        Ok(out)
    }
}

impl Inner {
    fn ingest_lines(&mut self, rel: &str, lines: &[(usize, String)]) -> Result<(), StoreError> {
        match rel {
            CORPUS_FILE => {
                for rec in parse_lines::<MessageRecord>(rel, lines)? {
                    self.message_ids.insert(rec.message_id.clone(), self.corpus.len());
                    self.corpus.push(rec);
                }
            }
            SUMMARIES_FILE => {
                for s in parse_lines::<UnitSummary>(rel, lines)? {
                    self.summary_keys.insert(s.key(), self.summaries.len());
                    self.summaries.push(s);
                }
            }
            QUARANTINE_FILE => {
                for q in parse_lines::<QuarantineRecord>(rel, lines)? {
                    self.quarantine_keys.insert(q.key());
                    self.quarantine.push(q);
                }
            }
            TRANSCRIPTS_FILE => {
                for t in parse_lines::<TranscriptEntry>(rel, lines)? {
                    self.transcript_index
                        .entry(t.fingerprint.clone())
                        .or_insert(self.transcripts.len());
                    self.transcripts.push(t);
                }
            }
            ADJUDICATIONS_FILE => self.adjudications.extend(parse_lines(rel, lines)?),
            MERGED_FILE => {
                for m in parse_lines::<MergedDecision>(rel, lines)? {
                    self.merged_units.insert(m.unit_id.clone());
                    self.merged.push(m);
                }
            }
            other if other.starts_with(ANNOTATIONS_DIR) => {
                self.annotations.extend(parse_lines(rel, lines)?)
            }
            other => {
                return Err(StoreError::CorruptManifest(format!("unexpected file {other}")));
            }
        }
        Ok(())
    }
}

impl TranscriptSink for Store {
    fn lookup_transcript(&self, fingerprint: &str) -> Option<String> {
        let inner = self.lock();
        inner
            .transcript_index
            .get(fingerprint)
            .map(|&i| inner.transcripts[i].raw_text.clone())
    }

    fn append_transcript(&self, entry: TranscriptEntry) -> Result<(), BackendError> {
        let line = canonical_line(&entry).map_err(|e| BackendError::Sink(e.to_string()))?;
        self.write(TRANSCRIPTS_FILE, line, |_| Ok(true), |inner| {
            inner
                .transcript_index
                .entry(entry.fingerprint.clone())
                .or_insert(inner.transcripts.len());
            inner.transcripts.push(entry);
        })
        .map(drop)
        .map_err(|e| BackendError::Sink(e.to_string()))
    }
}

fn annotation_files(root: &Path) -> Result<Vec<String>, StoreError> {
    let dir = root.join(ANNOTATIONS_DIR);
    let mut out = Vec::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(&dir)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(&dir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.ends_with(".jsonl") {
            out.push(format!("{ANNOTATIONS_DIR}/{name}"));
        }
    }
    out.sort();
    Ok(out)
}

fn write_manifest(root: &Path, manifest: &StoreManifest) -> Result<(), StoreError> {
    let path = root.join(MANIFEST_FILE);
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
    text.push('\n');
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

fn acquire_lock(root: &Path) -> Result<File, StoreError> {
    let path = root.join(LOCK_FILE);
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(io_err(&path))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(std::fs::TryLockError::WouldBlock) => Err(StoreError::Locked(path)),
        Err(std::fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
    }
}

/// Full read-only verification of a store directory.
pub fn verify(root: &Path) -> Result<(StoreManifest, Vec<TornRecord>), StoreError> {
    let store = Store::open(root, OpenMode::Read)?;
    Ok((store.manifest(), store.torn_records()))
}

// ---------------------------------------------------------------------------
// Query predicates

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Test {
    Is(bool),
    Contains(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub variable: String,
    pub test: Test,
}

impl Predicate {
    pub fn is(variable: &str, value: bool) -> Self {
        Predicate {
            variable: variable.into(),
            test: Test::Is(value),
        }
    }

    pub fn contains(variable: &str, item: &str) -> Self {
        Predicate {
            variable: variable.into(),
            test: Test::Contains(item.into()),
        }
    }

    pub fn matches(&self, s: &UnitSummary) -> bool {
        match (&self.test, s.values.get(&self.variable)) {
            (Test::Is(want), Some(VariableValue::Bool(b))) => b == want,
            (Test::Contains(item), Some(VariableValue::List(items))) => {
                items.iter().any(|i| i.eq_ignore_ascii_case(item))
            }
            _ => false,
        }
    }
}

impl FromStr for Predicate {
    type Err = StoreError;

    /// `name=true|false`, `name contains Item` or `name~Item`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((name, item)) = s.split_once(" contains ").or_else(|| s.split_once('~')) {
            return Ok(Predicate::contains(name.trim(), item.trim()));
        }
        if let Some((name, value)) = s.split_once('=') {
            let value = match value.trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => {
                    return Err(StoreError::BadPredicate(format!(
                        "{s}: expected true or false, got {other:?}"
                    )))
                }
            };
            return Ok(Predicate::is(name.trim(), value));
        }
        Err(StoreError::BadPredicate(s.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub predicates: Vec<Predicate>,
}

impl Filter {
    pub fn new(predicates: Vec<Predicate>) -> Self {
        Filter { predicates }
    }

    pub fn matches(&self, s: &UnitSummary) -> bool {
        self.predicates.iter().all(|p| p.matches(s))
    }

    fn check(&self, schema: &ExtractionSchema) -> Result<(), StoreError> {
        for p in &self.predicates {
            let spec = schema
                .variable(&p.variable)
                .ok_or_else(|| StoreError::UnknownVariable(p.variable.clone()))?;
            let fits = matches!(
                (&p.test, spec.kind),
                (Test::Is(_), VariableKind::Boolean)
                    | (Test::Contains(_), VariableKind::StringList | VariableKind::EnumList)
            );
            if !fits {
                return Err(StoreError::BadPredicate(format!(
                    "{} is {:?}, predicate does not apply",
                    p.variable, spec.kind
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::default_schema;
    use chrono::{NaiveDate, TimeZone, Utc};

    fn summary(thread: &str, day: u32, is_sale: bool, industries: &[&str]) -> UnitSummary {
        let mut values = BTreeMap::new();
        for v in default_schema().variables {
            let val = match v.kind {
                VariableKind::Boolean => VariableValue::Bool(v.name == "is_sale" && is_sale),
                VariableKind::StringList => VariableValue::List(vec![]),
                VariableKind::EnumList => {
                    VariableValue::List(industries.iter().map(|s| s.to_string()).collect())
                }
            };
            values.insert(v.name, val);
        }
        let mut u = UnitSummary {
            unit_id: String::new(),
            thread_id: thread.into(),
            batch_date: NaiveDate::from_ymd_opt(2023, 5, day).unwrap(),
            batch_index: day as usize - 1,
            schema_version: "v1".into(),
            summary: format!("summary {thread} {day}"),
            values,
            model_id: "m".into(),
            prompt_fingerprint: crate::sha256_hex(format!("{thread}{day}")),
            repair_used: false,
            created_at: Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap(),
        };
        u.unit_id = u.key().unit_id();
        u
    }

    #[test]
    fn fresh_store_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        drop(Store::init(dir.path()).unwrap());
        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert_eq!(s.counts(), StoreCounts::default());
    }

    #[test]
    fn appends_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::init(dir.path()).unwrap();
            for d in 1..=3 {
                s.append_summary(&summary("t1", d, true, &[])).unwrap();
            }
        }
        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert_eq!(s.counts().summaries, 3);
        assert_eq!(s.manifest().files[SUMMARIES_FILE].records, 3);
        assert_eq!(s.schema_version().as_deref(), Some("v1"));
    }

    #[test]
    fn duplicate_summary_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::init(dir.path()).unwrap();
        let u = summary("t1", 1, true, &[]);
        s.append_summary(&u).unwrap();
        assert!(matches!(s.append_summary(&u), Err(StoreError::DuplicateKey(_))));
        assert_eq!(s.summaries().len(), 1);
    }

    #[test]
    fn schema_version_is_pinned_by_first_summary() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::init(dir.path()).unwrap();
        s.append_summary(&summary("t1", 1, true, &[])).unwrap();
        let mut other = summary("t1", 2, true, &[]);
        other.schema_version = "v1+tense-any".into();
        assert!(matches!(
            s.append_summary(&other),
            Err(StoreError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn read_only_store_refuses_writes() {
        let dir = tempfile::tempdir().unwrap();
        drop(Store::init(dir.path()).unwrap());
        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert!(matches!(
            s.append_summary(&summary("t1", 1, true, &[])),
            Err(StoreError::ReadOnly)
        ));
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _w = Store::init(dir.path()).unwrap();
        assert!(matches!(
            Store::open(dir.path(), OpenMode::Append),
            Err(StoreError::Locked(_))
        ));
        assert!(Store::open(dir.path(), OpenMode::Read).is_ok());
    }

    #[test]
    fn flipped_byte_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::init(dir.path()).unwrap();
            for d in 1..=3 {
                s.append_summary(&summary("t1", d, true, &[])).unwrap();
            }
        }
        let path = dir.path().join(SUMMARIES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        match Store::open(dir.path(), OpenMode::Read) {
            Err(StoreError::Integrity { file, .. }) => assert_eq!(file, SUMMARIES_FILE),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn torn_final_record_is_excluded_and_repaired_on_append() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::init(dir.path()).unwrap();
            for d in 1..=3 {
                s.append_summary(&summary("t1", d, true, &[])).unwrap();
            }
        }
        let path = dir.path().join(SUMMARIES_FILE);
        let len = fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 20).unwrap();

        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert_eq!(s.counts().summaries, 2);
        assert_eq!(s.torn_records().len(), 1);
        drop(s);

        let s = Store::open(dir.path(), OpenMode::Append).unwrap();
        assert_eq!(s.torn_records().len(), 1);
        s.append_summary(&summary("t1", 3, true, &[])).unwrap();
        drop(s);
        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert_eq!(s.counts().summaries, 3);
        assert!(s.torn_records().is_empty());
    }

    #[test]
    fn unmanifested_complete_append_is_recovered() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = Store::init(dir.path()).unwrap();
            s.append_summary(&summary("t1", 1, true, &[])).unwrap();
        }
        // Simulate a crash between the record write and the manifest update.
        let line = canonical_line(&summary("t1", 2, true, &[])).unwrap();
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join(SUMMARIES_FILE))
            .unwrap();
        writeln!(f, "{line}").unwrap();
        write!(f, "{{\"partial").unwrap();
        drop(f);
        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert_eq!(s.counts().summaries, 2);
        assert_eq!(s.torn_records().len(), 1);
    }

    #[test]
    fn corrupt_manifest_and_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        drop(Store::init(dir.path()).unwrap());
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, "{ nope").unwrap();
        assert!(matches!(
            Store::open(dir.path(), OpenMode::Read),
            Err(StoreError::CorruptManifest(_))
        ));
        fs::write(&path, r#"{"store_version":9,"schema_version":null,"files":{}}"#).unwrap();
        assert!(matches!(
            Store::open(dir.path(), OpenMode::Read),
            Err(StoreError::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            Store::open(&dir.path().join("missing"), OpenMode::Read),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn query_filters_in_thread_date_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::init(dir.path()).unwrap();
        let schema = default_schema();
        assert!(s.query(&Filter::default(), &schema).unwrap().is_empty());
        s.append_summary(&summary("t2", 1, true, &["Finance"])).unwrap();
        s.append_summary(&summary("t1", 2, true, &[])).unwrap();
        s.append_summary(&summary("t1", 1, false, &["Finance"])).unwrap();
        s.append_summary(&summary("t3", 1, true, &["Healthcare"])).unwrap();
        s.append_summary(&summary("t3", 2, false, &[])).unwrap();

        let sales = s.query(&Filter::new(vec![Predicate::is("is_sale", true)]), &schema).unwrap();
        let ids: Vec<(&str, u32)> = sales
            .iter()
            .map(|u| (u.thread_id.as_str(), chrono::Datelike::day(&u.batch_date)))
            .collect();
        assert_eq!(ids, vec![("t1", 2), ("t2", 1), ("t3", 1)]);

        let both: Filter = Filter::new(vec![
            "is_sale=true".parse().unwrap(),
            "industries contains finance".parse().unwrap(),
        ]);
        let hits = s.query(&both, &schema).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].thread_id, "t2");

        assert!(matches!(
            s.query(&Filter::new(vec![Predicate::is("is_hot", true)]), &schema),
            Err(StoreError::UnknownVariable(_))
        ));
        assert!(matches!(
            s.query(&Filter::new(vec![Predicate::is("industries", true)]), &schema),
            Err(StoreError::BadPredicate(_))
        ));
        assert!("is_sale=maybe".parse::<Predicate>().is_err());
    }

    #[test]
    fn annotations_are_split_per_coder_and_kept_after_supersession() {
        use crate::eval::Judgment;
        let dir = tempfile::tempdir().unwrap();
        let s = Store::init(dir.path()).unwrap();
        let mut a = AnnotationRecord {
            unit_id: "u1".into(),
            coder_id: "alice".into(),
            judgments: [("is_sale".to_string(), Judgment::Agree)].into(),
            summary_judgment: Judgment::Agree,
            presence: BTreeMap::new(),
            note: None,
        };
        s.append_annotation(&a).unwrap();
        a.judgments.insert("is_sale".into(), Judgment::Disagree);
        s.append_annotation(&a).unwrap();
        a.coder_id = "../evil".into();
        assert!(s.append_annotation(&a).is_err());
        drop(s);
        assert!(dir.path().join("annotations/alice.jsonl").exists());
        let s = Store::open(dir.path(), OpenMode::Read).unwrap();
        assert_eq!(s.annotations().len(), 2);
    }

    #[test]
    fn transcripts_act_as_a_sink() {
        use crate::backend::{record, BackendKind, CompletionRequest, CompletionResult};
        let dir = tempfile::tempdir().unwrap();
        let s = Store::init(dir.path()).unwrap();
        let req = CompletionRequest {
            model_id: "m".into(),
            system_text: None,
            user_text: "u".into(),
            temperature: 0.0,
            max_output: 10,
        };
        let res = CompletionResult {
            raw_text: "r".into(),
            latency: std::time::Duration::ZERO,
            usage: None,
            backend_kind: BackendKind::Live,
            retries: 0,
        };
        record(&req, &res, &s).unwrap();
        record(&req, &res, &s).unwrap();
        assert_eq!(s.transcripts().len(), 1);
        assert_eq!(s.lookup_transcript(&req.fingerprint()).as_deref(), Some("r"));
    }
}
