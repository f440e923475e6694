//! Two-coder evaluation of unit summaries.
//!
//! Each coder records, per unit and per variable, whether they agree (1) or
//! disagree (0) with the model's coding, plus whether a value genuinely
//! applies for the list-valued variables. The two coders' records are
//! compared ([`intercoder_agreement`]), reconciled into one decision per unit
//! ([`merge`]), and the merged decisions give the per-variable accuracy
//! ([`accuracy`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::schema::ExtractionSchema;

/// Name used for the summary judgment wherever it is listed next to variables.
pub const SUMMARY: &str = "summary";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("coders cover different units (missing from A: {missing_in_a:?}, missing from B: {missing_in_b:?})")]
    CoverageMismatch {
        missing_in_a: Vec<String>,
        missing_in_b: Vec<String>,
    },
    #[error("{} unresolved conflict(s), first: {:?}", .0.len(), .0.first())]
    UnresolvedConflict(Vec<CellRef>),
    #[error("unit {unit_id}: {detail}")]
    InconsistentVariables { unit_id: String, detail: String },
    #[error("expected exactly two coders, found {0:?}")]
    CoderCount(Vec<String>),
    #[error("no records to evaluate")]
    EmptyInput,
}

/// A binary coder judgment, serialized as `0` or `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Judgment {
    Disagree,
    Agree,
}

impl Judgment {
    pub fn from_bit(bit: u64) -> Option<Self> {
        match bit {
            0 => Some(Judgment::Disagree),
            1 => Some(Judgment::Agree),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Judgment::Disagree => 0,
            Judgment::Agree => 1,
        }
    }

    pub fn is_agree(self) -> bool {
        self == Judgment::Agree
    }
}

impl Serialize for Judgment {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Judgment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bit = u64::deserialize(d)?;
        Judgment::from_bit(bit)
            .ok_or_else(|| serde::de::Error::custom(format!("judgment must be 0 or 1, got {bit}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub unit_id: String,
    #[serde(default)]
    pub coder_id: String,
    pub judgments: BTreeMap<String, Judgment>,
    pub summary_judgment: Judgment,
    #[serde(default)]
    pub presence: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Field-level problem found while validating an incoming annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

fn field_error(field: impl Into<String>, reason: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        reason: reason.into(),
    }
}

fn read_bit(value: &Value) -> Option<Judgment> {
    value.as_u64().and_then(Judgment::from_bit)
}

impl AnnotationRecord {
    /// Validates a submitted record against the schema: every variable
    /// judged with 0 or 1, the summary judged, presence given for each
    /// conditional variable, and nothing else.
    pub fn from_submission(
        value: &Value,
        schema: &ExtractionSchema,
    ) -> Result<AnnotationRecord, Vec<FieldError>> {
        let mut errors = Vec::new();
        let Some(obj) = value.as_object() else {
            return Err(vec![field_error("body", "expected an object")]);
        };
        for key in obj.keys() {
            if !matches!(
                key.as_str(),
                "unit_id" | "coder_id" | "judgments" | "summary_judgment" | "presence" | "note"
            ) {
                errors.push(field_error(key.as_str(), "unknown field"));
            }
        }
        let unit_id = match obj.get("unit_id").and_then(Value::as_str) {
            Some(u) if !u.trim().is_empty() => u.to_string(),
            _ => {
                errors.push(field_error("unit_id", "missing"));
                String::new()
            }
        };
        let coder_id = obj
            .get("coder_id")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let summary_judgment = match obj.get("summary_judgment") {
            None => {
                errors.push(field_error("summary_judgment", "missing"));
                Judgment::Disagree
            }
            Some(v) => read_bit(v).unwrap_or_else(|| {
                errors.push(field_error("summary_judgment", format!("must be 0 or 1, got {v}")));
                Judgment::Disagree
            }),
        };

        let empty = serde_json::Map::new();
        let judged = match obj.get("judgments") {
            Some(Value::Object(m)) => m,
            Some(_) => {
                errors.push(field_error("judgments", "expected an object"));
                &empty
            }
            None => {
                errors.push(field_error("judgments", "missing"));
                &empty
            }
        };
        let mut judgments = BTreeMap::new();
        for name in schema.variable_names() {
            match judged.get(name) {
                None => errors.push(field_error(name, "missing judgment")),
                Some(v) => match read_bit(v) {
                    Some(j) => {
                        judgments.insert(name.to_string(), j);
                    }
                    None => errors.push(field_error(name, format!("must be 0 or 1, got {v}"))),
                },
            }
        }
        for key in judged.keys() {
            if schema.variable(key).is_none() {
                errors.push(field_error(key.as_str(), "not in schema"));
            }
        }

        let given = match obj.get("presence") {
            Some(Value::Object(m)) => m,
            Some(_) => {
                errors.push(field_error("presence", "expected an object"));
                &empty
            }
            None => &empty,
        };
        let mut presence = BTreeMap::new();
        for name in schema.conditional_variables() {
            match given.get(name).and_then(Value::as_bool) {
                Some(p) => {
                    presence.insert(name.to_string(), p);
                }
                None => errors.push(field_error(
                    format!("presence.{name}"),
                    "missing or not a boolean",
                )),
            }
        }
        for key in given.keys() {
            if !schema.conditional_variables().any(|c| c == key) {
                errors.push(field_error(format!("presence.{key}"), "not a conditional variable"));
            }
        }

        let note = match obj.get("note") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                errors.push(field_error("note", "expected a string"));
                None
            }
        };

        if errors.is_empty() {
            Ok(AnnotationRecord {
                unit_id,
                coder_id,
                judgments,
                summary_judgment,
                presence,
                note,
            })
        } else {
            Err(errors)
        }
    }

    fn cell(&self, cell: &Cell) -> Option<CellValue> {
        match cell {
            Cell::Summary => Some(CellValue::Judgment(self.summary_judgment)),
            Cell::Judgment(v) => self.judgments.get(v).copied().map(CellValue::Judgment),
            Cell::Presence(v) => self.presence.get(v).copied().map(CellValue::Presence),
        }
    }
}

/// Adjudicated values for the cells where the coders differed. Same shape
/// as an annotation without `coder_id`; every field is partial.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjudicationRecord {
    pub unit_id: String,
    #[serde(default)]
    pub judgments: BTreeMap<String, Judgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_judgment: Option<Judgment>,
    #[serde(default)]
    pub presence: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AdjudicationRecord {
    fn cell(&self, cell: &Cell) -> Option<CellValue> {
        match cell {
            Cell::Summary => self.summary_judgment.map(CellValue::Judgment),
            Cell::Judgment(v) => self.judgments.get(v).copied().map(CellValue::Judgment),
            Cell::Presence(v) => self.presence.get(v).copied().map(CellValue::Presence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResolvedBy {
    AutoConsensus,
    Adjudication,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergedDecision {
    pub unit_id: String,
    pub judgments: BTreeMap<String, Judgment>,
    pub summary_judgment: Judgment,
    #[serde(default)]
    pub presence: BTreeMap<String, bool>,
    pub resolved_by: ResolvedBy,
}

/// One judged field of a unit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cell {
    Summary,
    Judgment(String),
    Presence(String),
}

impl Cell {
    pub fn parse(name: &str) -> Cell {
        if name == SUMMARY {
            Cell::Summary
        } else if let Some(v) = name.strip_prefix("presence.") {
            Cell::Presence(v.to_string())
        } else {
            Cell::Judgment(name.to_string())
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Summary => f.write_str(SUMMARY),
            Cell::Judgment(v) => f.write_str(v),
            Cell::Presence(v) => write!(f, "presence.{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellValue {
    Judgment(Judgment),
    Presence(bool),
}

impl Serialize for CellValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CellValue::Judgment(j) => j.serialize(s),
            CellValue::Presence(p) => s.serialize_bool(*p),
        }
    }
}

/// `(unit_id, cell)` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct CellRef {
    pub unit_id: String,
    pub variable: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conflict {
    pub unit_id: String,
    pub variable: String,
    pub a: CellValue,
    pub b: CellValue,
    pub adjudicated: Option<CellValue>,
}

/// Last record per unit wins, matching resubmission semantics.
pub fn latest_by_unit(records: &[AnnotationRecord]) -> BTreeMap<String, &AnnotationRecord> {
    records.iter().map(|r| (r.unit_id.clone(), r)).collect()
}

/// Coder ids present in `records`, sorted.
pub fn coders(records: &[AnnotationRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.coder_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Canonical row order: summary first, bundled schema order, then the rest
/// alphabetically.
fn ordered(names: BTreeSet<String>) -> Vec<String> {
    let schema = crate::schema::default_schema();
    let mut out: Vec<String> = Vec::with_capacity(names.len() + 1);
    let mut rest = names;
    if rest.remove(SUMMARY) {
        out.push(SUMMARY.to_string());
    }
    for v in schema.variable_names() {
        if rest.remove(v) {
            out.push(v.to_string());
        }
    }
    out.extend(rest);
    out
}

struct Paired<'a> {
    units: Vec<(&'a AnnotationRecord, &'a AnnotationRecord)>,
    variables: Vec<String>,
    conditional: Vec<String>,
}

fn pair<'a>(
    a: &'a [AnnotationRecord],
    b: &'a [AnnotationRecord],
) -> Result<Paired<'a>, EvalError> {
    let la = latest_by_unit(a);
    let lb = latest_by_unit(b);
    let missing_in_a: Vec<String> = lb.keys().filter(|u| !la.contains_key(*u)).cloned().collect();
    let missing_in_b: Vec<String> = la.keys().filter(|u| !lb.contains_key(*u)).cloned().collect();
    if !missing_in_a.is_empty() || !missing_in_b.is_empty() {
        return Err(EvalError::CoverageMismatch {
            missing_in_a,
            missing_in_b,
        });
    }
    let units: Vec<_> = la
        .into_iter()
        .map(|(u, ra)| (ra, lb[&u]))
        .collect();
    let Some((first, _)) = units.first() else {
        return Err(EvalError::EmptyInput);
    };
    let judged: BTreeSet<String> = first.judgments.keys().cloned().collect();
    let present: BTreeSet<String> = first.presence.keys().cloned().collect();
    for (ra, rb) in &units {
        for r in [ra, rb] {
            if r.judgments.keys().ne(judged.iter()) {
                return Err(EvalError::InconsistentVariables {
                    unit_id: r.unit_id.clone(),
                    detail: format!("coder {} judged a different variable set", r.coder_id),
                });
            }
            if r.presence.keys().ne(present.iter()) {
                return Err(EvalError::InconsistentVariables {
                    unit_id: r.unit_id.clone(),
                    detail: format!("coder {} gave presence for a different set", r.coder_id),
                });
            }
        }
    }
    let mut names = judged;
    names.insert(SUMMARY.to_string());
    Ok(Paired {
        units,
        variables: ordered(names),
        conditional: ordered(present),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Agreement per variable, then the unweighted mean over variables.
    #[default]
    PerVariable,
    /// Agreement over all judged cells at once.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub variable: String,
    pub agreements: usize,
    pub units: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub units: usize,
    pub pooling: Pooling,
    pub rows: Vec<AgreementRow>,
    pub average: f64,
    pub min: f64,
    pub max: f64,
}

pub fn intercoder_agreement(
    a: &[AnnotationRecord],
    b: &[AnnotationRecord],
    pooling: Pooling,
) -> Result<AgreementReport, EvalError> {
    let paired = pair(a, b)?;
    let n = paired.units.len();
    let rows: Vec<AgreementRow> = paired
        .variables
        .iter()
        .map(|name| {
            let cell = Cell::parse(name);
            let agreements = paired
                .units
                .iter()
                .filter(|(ra, rb)| ra.cell(&cell) == rb.cell(&cell))
                .count();
            AgreementRow {
                variable: name.clone(),
                agreements,
                units: n,
                percent: round_tenths(agreements, n),
            }
        })
        .collect();

    let average = match pooling {
        Pooling::PerVariable => {
            rows.iter().map(|r| exact_percent(r.agreements, n)).sum::<f64>() / rows.len() as f64
        }
        Pooling::Pooled => {
            let agreed: usize = rows.iter().map(|r| r.agreements).sum();
            exact_percent(agreed, n * rows.len())
        }
    };
    let min = rows.iter().map(|r| r.percent).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.percent).fold(f64::NEG_INFINITY, f64::max);
    Ok(AgreementReport {
        units: n,
        pooling,
        rows,
        average,
        min,
        max,
    })
}

/// Every cell (judgments and presence) where the two coders differ, with
/// any adjudicated value already recorded. Later adjudications override
/// earlier ones cell by cell.
pub fn conflicts(
    a: &[AnnotationRecord],
    b: &[AnnotationRecord],
    adjudications: &[AdjudicationRecord],
) -> Result<Vec<Conflict>, EvalError> {
    let paired = pair(a, b)?;
    let cells: Vec<Cell> = paired
        .variables
        .iter()
        .map(|v| Cell::parse(v))
        .chain(paired.conditional.iter().map(|v| Cell::Presence(v.clone())))
        .collect();
    let mut out = Vec::new();
    for (ra, rb) in &paired.units {
        for cell in &cells {
            let (va, vb) = (ra.cell(cell), rb.cell(cell));
            if va == vb {
                continue;
            }
            let (Some(va), Some(vb)) = (va, vb) else {
                continue;
            };
            let adjudicated = adjudications
                .iter()
                .rev()
                .filter(|adj| adj.unit_id == ra.unit_id)
                .find_map(|adj| adj.cell(cell));
            out.push(Conflict {
                unit_id: ra.unit_id.clone(),
                variable: cell.to_string(),
                a: va,
                b: vb,
                adjudicated,
            });
        }
    }
    Ok(out)
}

pub fn merge(
    a: &[AnnotationRecord],
    b: &[AnnotationRecord],
    adjudications: &[AdjudicationRecord],
) -> Result<Vec<MergedDecision>, EvalError> {
    let found = conflicts(a, b, adjudications)?;
    let unresolved: Vec<CellRef> = found
        .iter()
        .filter(|c| c.adjudicated.is_none())
        .map(|c| CellRef {
            unit_id: c.unit_id.clone(),
            variable: c.variable.clone(),
        })
        .collect();
    if !unresolved.is_empty() {
        return Err(EvalError::UnresolvedConflict(unresolved));
    }

    let mut by_unit: BTreeMap<&str, Vec<&Conflict>> = BTreeMap::new();
    for c in &found {
        by_unit.entry(c.unit_id.as_str()).or_default().push(c);
    }

    let paired = pair(a, b)?;
    Ok(paired
        .units
        .iter()
        .map(|(ra, _)| {
            let mut decision = MergedDecision {
                unit_id: ra.unit_id.clone(),
                judgments: ra.judgments.clone(),
                summary_judgment: ra.summary_judgment,
                presence: ra.presence.clone(),
                resolved_by: ResolvedBy::AutoConsensus,
            };
            for c in by_unit.get(ra.unit_id.as_str()).into_iter().flatten() {
                decision.resolved_by = ResolvedBy::Adjudication;
                match (Cell::parse(&c.variable), c.adjudicated) {
                    (Cell::Summary, Some(CellValue::Judgment(j))) => decision.summary_judgment = j,
                    (Cell::Judgment(v), Some(CellValue::Judgment(j))) => {
                        decision.judgments.insert(v, j);
                    }
                    (Cell::Presence(v), Some(CellValue::Presence(p))) => {
                        decision.presence.insert(v, p);
                    }
                    _ => unreachable!("adjudicated value matches its cell kind"),
                }
            }
            decision
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Accuracy

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub variable: String,
    /// Denominator: all units, or units where the value applies.
    pub n: usize,
    pub correct: usize,
    /// Percentage rounded half-up to one decimal; absent when `n` is zero.
    pub accuracy: Option<f64>,
    pub conditional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub units: usize,
    pub rows: Vec<AccuracyRow>,
    /// Mean of the per-variable accuracies.
    pub unweighted_mean: f64,
    /// Total correct over total judged, across variables.
    pub weighted_mean: f64,
    pub min: f64,
    pub max: f64,
}

impl AccuracyReport {
    pub fn row(&self, variable: &str) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.variable == variable)
    }
}

/// `100 * num / den` rounded half-up to one decimal, in exact arithmetic.
pub fn round_tenths(num: usize, den: usize) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let (num, den) = (num as u128, den as u128);
    let tenths = (2000 * num + den) / (2 * den);
    tenths as f64 / 10.0
}

fn exact_percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn accuracy(merged: &[MergedDecision]) -> Result<AccuracyReport, EvalError> {
    let Some(first) = merged.first() else {
        return Err(EvalError::EmptyInput);
    };
    let judged: BTreeSet<String> = first.judgments.keys().cloned().collect();
    let conditional: BTreeSet<String> = merged
        .iter()
        .flat_map(|m| m.presence.keys().cloned())
        .collect();
    for m in merged {
        if m.judgments.keys().ne(judged.iter()) {
            return Err(EvalError::InconsistentVariables {
                unit_id: m.unit_id.clone(),
                detail: "judged variable set differs from the first record".into(),
            });
        }
    }

    let mut names = judged;
    names.insert(SUMMARY.to_string());
    let rows: Vec<AccuracyRow> = ordered(names)
        .into_iter()
        .map(|variable| {
            let is_conditional = conditional.contains(&variable);
            let mut n = 0;
            let mut correct = 0;
            for m in merged {
                if is_conditional && !m.presence.get(&variable).copied().unwrap_or(false) {
                    continue;
                }
                n += 1;
                let j = if variable == SUMMARY {
                    m.summary_judgment
                } else {
                    m.judgments[&variable]
                };
                if j.is_agree() {
                    correct += 1;
                }
            }
            AccuracyRow {
                accuracy: (n > 0).then(|| round_tenths(correct, n)),
                variable,
                n,
                correct,
                conditional: is_conditional,
            }
        })
        .collect();

    let scored: Vec<&AccuracyRow> = rows.iter().filter(|r| r.n > 0).collect();
    let unweighted_mean = if scored.is_empty() {
        0.0
    } else {
        scored
            .iter()
            .map(|r| exact_percent(r.correct, r.n))
            .sum::<f64>()
            / scored.len() as f64
    };
    let weighted_mean = exact_percent(
        scored.iter().map(|r| r.correct).sum(),
        scored.iter().map(|r| r.n).sum(),
    );
    let accs = scored.iter().filter_map(|r| r.accuracy);
    let min = accs.clone().fold(f64::INFINITY, f64::min);
    let max = accs.fold(f64::NEG_INFINITY, f64::max);
    Ok(AccuracyReport {
        units: merged.len(),
        rows,
        unweighted_mean,
        weighted_mean,
        min: if min.is_finite() { min } else { 0.0 },
        max: if max.is_finite() { max } else { 0.0 },
    })
}

/// Splits a mixed annotation log into the two coders' record lists.
pub fn split_coders(
    annotations: &[AnnotationRecord],
) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>), EvalError> {
    let ids = coders(annotations);
    let [a, b] = ids.as_slice() else {
        return Err(EvalError::CoderCount(ids));
    };
    let pick = |id: &str| {
        annotations
            .iter()
            .filter(|r| r.coder_id == id)
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok((pick(a), pick(b)))
}

/// Merge then score: the single path every accuracy report goes through.
pub fn report_from_annotations(
    annotations: &[AnnotationRecord],
    adjudications: &[AdjudicationRecord],
) -> Result<AccuracyReport, EvalError> {
    let (a, b) = split_coders(annotations)?;
    accuracy(&merge(&a, &b, adjudications)?)
}
