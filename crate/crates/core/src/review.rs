//! Coder review workflow over a store: task listing, annotation intake,
//! conflicts, adjudication and the accuracy report. Transport-agnostic; the
//! HTTP layer maps [`ReviewError`] onto status codes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{chunk_daily, Corpus};
use crate::eval::{
    self, AccuracyReport, AdjudicationRecord, AnnotationRecord, CellRef, Conflict, EvalError,
    FieldError,
};
use crate::schema::{ExtractionSchema, UnitSummary};
use crate::store::{Store, StoreError};
use crate::timefmt;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("missing coder identity")]
    Unauthenticated,
    #[error("unknown coder {0:?}")]
    UnknownCoder(String),
    #[error("coder {header:?} cannot submit for {body:?}")]
    CoderMismatch { header: String, body: String },
    #[error("unknown unit {0}")]
    UnknownUnit(String),
    #[error("invalid request: {}", join(.0))]
    Invalid(Vec<FieldError>),
    #[error("{} unresolved conflict(s)", .0.len())]
    Unresolved(Vec<CellRef>),
    #[error(transparent)]
    Eval(EvalError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn join(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<EvalError> for ReviewError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnresolvedConflict(cells) => ReviewError::Unresolved(cells),
            other => ReviewError::Eval(other),
        }
    }
}

fn field_error(field: &str, reason: &str) -> FieldError {
    FieldError {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversationMessage {
    pub message_id: String,
    pub author: String,
    #[serde(with = "timefmt::rfc3339")]
    pub posted_at: DateTime<Utc>,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conversation {
    pub thread_id: String,
    pub thread_title: String,
    pub forum: String,
    pub batch_date: NaiveDate,
    pub batch_index: usize,
    pub messages: Vec<ConversationMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReviewTask {
    pub unit_id: String,
    pub conversation: Conversation,
    pub llm_output: UnitSummary,
    pub my_annotation: Option<AnnotationRecord>,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskQuery {
    pub coder: Option<String>,
    pub status: Option<TaskStatus>,
    /// 1-based.
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskPage {
    pub coder: String,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
    pub tasks: Vec<ReviewTask>,
}

/// Slices `items` into 1-based pages; out-of-range pages are empty.
pub fn paginate<T: Clone>(items: &[T], page: usize, page_size: usize) -> Vec<T> {
    let page_size = page_size.max(1);
    let start = page.saturating_sub(1).saturating_mul(page_size);
    items.iter().skip(start).take(page_size).cloned().collect()
}

pub fn page_count(total: usize, page_size: usize) -> usize {
    total.div_ceil(page_size.max(1))
}

/// The accuracy report for whatever evaluation data a store holds: the
/// coders' annotations (merged with adjudications) when present, otherwise
/// previously merged decisions. CLI and HTTP both go through here.
pub fn store_report(store: &Store) -> Result<AccuracyReport, EvalError> {
    let annotations = store.annotations();
    if annotations.is_empty() {
        return eval::accuracy(&store.merged());
    }
    eval::report_from_annotations(&annotations, &store.adjudications())
}

pub struct ReviewService {
    store: Arc<Store>,
    schema: ExtractionSchema,
    corpus: Corpus,
    allowed_coders: Option<BTreeSet<String>>,
}

impl ReviewService {
    pub fn new(
        store: Arc<Store>,
        schema: ExtractionSchema,
        allowed_coders: Option<BTreeSet<String>>,
    ) -> Result<Self, ReviewError> {
        let corpus = store.corpus()?;
        Ok(ReviewService {
            store,
            schema,
            corpus,
            allowed_coders,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn schema(&self) -> &ExtractionSchema {
        &self.schema
    }

    /// Validates a coder id from a header or query parameter.
    pub fn check_coder(&self, coder: Option<&str>) -> Result<String, ReviewError> {
        let coder = coder.map(str::trim).filter(|c| !c.is_empty());
        let Some(coder) = coder else {
            return Err(ReviewError::Unauthenticated);
        };
        let well_formed = coder.len() <= 64
            && coder
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        let allowed = self
            .allowed_coders
            .as_ref()
            .is_none_or(|set| set.contains(coder));
        if !well_formed || !allowed {
            return Err(ReviewError::UnknownCoder(coder.to_string()));
        }
        Ok(coder.to_string())
    }

    fn conversation(&self, s: &UnitSummary) -> Conversation {
        let thread = self.corpus.thread(&s.thread_id);
        let messages = thread
            .map(|t| {
                chunk_daily(t)
                    .into_iter()
                    .find(|b| b.batch_date == s.batch_date)
                    .map(|b| b.messages)
                    .unwrap_or_default()
            })
            .unwrap_or_default();
        Conversation {
            thread_id: s.thread_id.clone(),
            thread_title: thread.map(|t| t.title.clone()).unwrap_or_default(),
            forum: thread.map(|t| t.forum.clone()).unwrap_or_default(),
            batch_date: s.batch_date,
            batch_index: s.batch_index,
            messages: messages
                .into_iter()
                .map(|m| ConversationMessage {
                    message_id: m.message_id,
                    author: m.author,
                    posted_at: m.posted_at,
                    body: m.body,
                })
                .collect(),
        }
    }

    /// Tasks for `coder` (the query's coder, defaulting to the caller),
    /// ordered by `(thread_id, batch_date)`.
    pub fn tasks(&self, caller: &str, query: &TaskQuery) -> Result<TaskPage, ReviewError> {
        let coder = match &query.coder {
            Some(c) => self.check_coder(Some(c))?,
            None => caller.to_string(),
        };
        let page = query.page.unwrap_or(1);
        if page == 0 {
            return Err(ReviewError::Invalid(vec![field_error("page", "pages start at 1")]));
        }
        let page_size = query.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ReviewError::Invalid(vec![field_error(
                "page_size",
                &format!("must be between 1 and {MAX_PAGE_SIZE}"),
            )]));
        }

        let annotations = self.store.annotations();
        let mine: Vec<AnnotationRecord> = annotations
            .into_iter()
            .filter(|a| a.coder_id == coder)
            .collect();
        let latest = eval::latest_by_unit(&mine);

        let mut summaries = self.store.summaries();
        summaries.sort_by(|a, b| {
            (&a.thread_id, a.batch_date, &a.unit_id).cmp(&(&b.thread_id, b.batch_date, &b.unit_id))
        });
        let selected: Vec<(UnitSummary, Option<AnnotationRecord>)> = summaries
            .into_iter()
            .map(|s| {
                let ann = latest.get(&s.unit_id).map(|a| (*a).clone());
                (s, ann)
            })
            .filter(|(_, ann)| match query.status {
                None => true,
                Some(TaskStatus::Done) => ann.is_some(),
                Some(TaskStatus::Pending) => ann.is_none(),
            })
            .collect();

        let total = selected.len();
        let tasks = paginate(&selected, page, page_size)
            .into_iter()
            .map(|(s, ann)| ReviewTask {
                unit_id: s.unit_id.clone(),
                conversation: self.conversation(&s),
                status: if ann.is_some() {
                    TaskStatus::Done
                } else {
                    TaskStatus::Pending
                },
                my_annotation: ann,
                llm_output: s,
            })
            .collect();
        Ok(TaskPage {
            coder,
            page,
            page_size,
            total,
            pages: page_count(total, page_size),
            tasks,
        })
    }

    /// Validates and appends an annotation for `caller`. A body `coder_id`,
    /// if given, must match the caller.
    pub fn submit(&self, caller: &str, body: &Value) -> Result<AnnotationRecord, ReviewError> {
        let mut body = body.clone();
        if let Some(obj) = body.as_object_mut() {
            match obj.get("coder_id") {
                Some(Value::String(c)) if c != caller => {
                    return Err(ReviewError::CoderMismatch {
                        header: caller.to_string(),
                        body: c.clone(),
                    })
                }
                _ => {
                    obj.insert("coder_id".into(), Value::String(caller.to_string()));
                }
            }
        }
        let record =
            AnnotationRecord::from_submission(&body, &self.schema).map_err(ReviewError::Invalid)?;
        if self.store.summary_by_unit(&record.unit_id).is_none() {
            return Err(ReviewError::UnknownUnit(record.unit_id));
        }
        self.store.append_annotation(&record)?;
        Ok(record)
    }

    /// Differences between the two coders over the units both have coded.
    pub fn conflicts(&self) -> Result<Vec<Conflict>, ReviewError> {
        let annotations = self.store.annotations();
        let ids = eval::coders(&annotations);
        match ids.len() {
            0 | 1 => return Ok(Vec::new()),
            2 => {}
            _ => return Err(ReviewError::Eval(EvalError::CoderCount(ids))),
        }
        let (a, b) = eval::split_coders(&annotations)?;
        let units_a: BTreeSet<&str> = a.iter().map(|r| r.unit_id.as_str()).collect();
        let units_b: BTreeSet<&str> = b.iter().map(|r| r.unit_id.as_str()).collect();
        let both: BTreeSet<&str> = units_a.intersection(&units_b).copied().collect();
        let keep = |rs: &[AnnotationRecord]| -> Vec<AnnotationRecord> {
            rs.iter()
                .filter(|r| both.contains(r.unit_id.as_str()))
                .cloned()
                .collect()
        };
        Ok(eval::conflicts(&keep(&a), &keep(&b), &self.store.adjudications())?)
    }

    pub fn adjudicate(&self, body: &Value) -> Result<AdjudicationRecord, ReviewError> {
        let record: AdjudicationRecord = serde_json::from_value(body.clone())
            .map_err(|e| ReviewError::Invalid(vec![field_error("body", &e.to_string())]))?;
        let mut errors = Vec::new();
        for key in record.judgments.keys() {
            if self.schema.variable(key).is_none() {
                errors.push(field_error(&format!("judgments.{key}"), "unknown variable"));
            }
        }
        let conditional: BTreeSet<&str> = self.schema.conditional_variables().collect();
        for key in record.presence.keys() {
            if !conditional.contains(key.as_str()) {
                errors.push(field_error(&format!("presence.{key}"), "not a conditional variable"));
            }
        }
        if record.judgments.is_empty()
            && record.presence.is_empty()
            && record.summary_judgment.is_none()
        {
            errors.push(field_error("body", "adjudication resolves no cell"));
        }
        if !errors.is_empty() {
            return Err(ReviewError::Invalid(errors));
        }
        if self.store.summary_by_unit(&record.unit_id).is_none() {
            return Err(ReviewError::UnknownUnit(record.unit_id));
        }
        self.store.append_adjudication(&record)?;
        Ok(record)
    }

    pub fn report(&self) -> Result<AccuracyReport, ReviewError> {
        Ok(store_report(&self.store)?)
    }

    /// Per-coder progress: units annotated out of units available.
    pub fn progress(&self) -> BTreeMap<String, (usize, usize)> {
        let total = self.store.summaries().len();
        let annotations = self.store.annotations();
        eval::coders(&annotations)
            .into_iter()
            .map(|c| {
                let done = annotations
                    .iter()
                    .filter(|a| a.coder_id == c)
                    .map(|a| a.unit_id.as_str())
                    .collect::<BTreeSet<_>>()
                    .len();
                (c, (done, total))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paging_covers_everything_once() {
        let items: Vec<u32> = (0..5).collect();
        let pages: Vec<Vec<u32>> = (1..=page_count(5, 2)).map(|p| paginate(&items, p, 2)).collect();
        assert_eq!(pages.len(), 3);
        assert_eq!(pages.concat(), items);
        assert!(paginate(&items, 4, 2).is_empty());
        assert_eq!(page_count(0, 2), 0);
    }
}
