//! CTI variable schema, prompt rendering and response parsing.
//!
//! The bundled schema (`schema/v1.json`) carries the analyst persona, the
//! summary instruction and the ten extraction variables. [`build_prompt`]
//! turns a daily batch plus its rolling context into a prompt;
//! [`parse_response`] turns model output back into typed values.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::DailyBatch;
use crate::hashing::{sha256_hex, FieldHasher};
use crate::timefmt;

const BUNDLED_V1: &str = include_str!("../schema/v1.json");

/// Appended to the persona when the narrative guard is enabled.
pub const NARRATIVE_GUARD: &str =
    "Report events performed by conversation participants now, not retold news stories.";

/// Appended to the user turn when re-prompting after an unparseable answer.
pub const REPAIR_SUFFIX: &str = "Return only the specified object.";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema document is not valid: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid schema: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Boolean,
    StringList,
    EnumList,
}

impl VariableKind {
    /// List-valued variables only apply to some conversations; their accuracy
    /// is measured over the units where a value genuinely applies.
    pub fn is_conditional(self) -> bool {
        !matches!(self, VariableKind::Boolean)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumOption {
    pub label: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub enum_options: Vec<EnumOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tense_variant: Option<String>,
}

impl VariableSpec {
    fn canonical_label(&self, raw: &str) -> Option<&str> {
        self.enum_options
            .iter()
            .find(|o| o.label.eq_ignore_ascii_case(raw))
            .map(|o| o.label.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TensePolicy {
    /// Prompts exactly as bundled (present tense).
    #[default]
    Present,
    /// Boolean prompts that also cover past events, where a variant exists.
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSchema {
    pub schema_version: String,
    pub persona_preamble: String,
    pub summary_instruction: String,
    pub variables: Vec<VariableSpec>,
}

/// The bundled schema.
pub fn default_schema() -> ExtractionSchema {
    ExtractionSchema::from_json(BUNDLED_V1).expect("bundled schema is valid")
}

impl ExtractionSchema {
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let schema: ExtractionSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let invalid = |m: String| Err(SchemaError::Invalid(m));
        if self.schema_version.trim().is_empty() {
            return invalid("schema_version is empty".into());
        }
        if self.variables.is_empty() {
            return invalid("no variables".into());
        }
        let mut names = HashSet::new();
        for v in &self.variables {
            if !is_identifier(&v.name) {
                return invalid(format!("variable name {:?} is not an identifier", v.name));
            }
            if v.name == "summary" {
                return invalid("`summary` is reserved".into());
            }
            if !names.insert(v.name.as_str()) {
                return invalid(format!("duplicate variable {:?}", v.name));
            }
            match v.kind {
                VariableKind::EnumList => {
                    if v.enum_options.len() < 2 {
                        return invalid(format!("{}: enum_list needs at least two options", v.name));
                    }
                    let mut labels = HashSet::new();
                    for o in &v.enum_options {
                        if !labels.insert(o.label.to_ascii_lowercase()) {
                            return invalid(format!("{}: duplicate option {:?}", v.name, o.label));
                        }
                    }
                }
                _ if !v.enum_options.is_empty() => {
                    return invalid(format!("{}: only enum_list variables take options", v.name));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn variable_names(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    /// Variables whose accuracy denominator is restricted to units where
    /// they apply.
    pub fn conditional_variables(&self) -> impl Iterator<Item = &str> {
        self.variables
            .iter()
            .filter(|v| v.kind.is_conditional())
            .map(|v| v.name.as_str())
    }

    /// Returns the schema with the given tense policy applied. The version
    /// string records the policy so stores never mix the two.
    pub fn with_tense(&self, policy: TensePolicy) -> ExtractionSchema {
        match policy {
            TensePolicy::Present => self.clone(),
            TensePolicy::Any => {
                let mut out = self.clone();
                out.schema_version = format!("{}+tense-any", self.schema_version);
                for v in &mut out.variables {
                    if let Some(alt) = v.tense_variant.take() {
                        v.prompt_text = alt;
                    }
                }
                out
            }
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

// ---------------------------------------------------------------------------
// Prompt rendering

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptContext {
    pub thread_title: Option<String>,
    pub prior_summary: Option<String>,
    pub batch_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    #[default]
    Error,
    TruncateOldest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub narrative_guard: bool,
    /// Upper bound on the rendered prompt, in characters.
    pub char_budget: usize,
    pub overflow: OverflowPolicy,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            narrative_guard: false,
            char_budget: 48_000,
            overflow: OverflowPolicy::Error,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("rendered prompt is {chars} characters, budget is {budget}")]
    BudgetExceeded { chars: usize, budget: usize },
    #[error("context does not match batch: {0}")]
    ContextMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    /// Persona preamble (plus the narrative guard when enabled).
    pub system_text: String,
    /// Context block, conversation, instructions and output exemplar.
    pub user_text: String,
    /// Messages dropped from the front of the batch to meet the budget.
    pub dropped_messages: usize,
}

impl RenderedPrompt {
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_text)
    }

    /// Lowercase hex SHA-256 of the full rendered prompt.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.full_text())
    }

    pub fn char_count(&self) -> usize {
        self.system_text.chars().count() + 2 + self.user_text.chars().count()
    }
}

pub fn build_prompt(
    schema: &ExtractionSchema,
    context: &PromptContext,
    batch: &DailyBatch,
    config: &PromptConfig,
) -> Result<RenderedPrompt, PromptError> {
    if context.batch_index != batch.batch_index {
        return Err(PromptError::ContextMismatch(format!(
            "context is for batch {}, batch is {}",
            context.batch_index, batch.batch_index
        )));
    }
    if context.batch_index == 0 && context.prior_summary.is_some() {
        return Err(PromptError::ContextMismatch(
            "first batch of a thread cannot carry a prior summary".into(),
        ));
    }

    let mut system_text = schema.persona_preamble.clone();
    if config.narrative_guard {
        system_text.push(' ');
        system_text.push_str(NARRATIVE_GUARD);
    }

    let head = render_context(context);
    let tail = render_instructions(schema);

    let mut dropped = 0;
    loop {
        let prompt = RenderedPrompt {
            system_text: system_text.clone(),
            user_text: format!(
                "{head}{}\n{tail}",
                render_conversation(batch, &batch.messages[dropped..])
            ),
            dropped_messages: dropped,
        };
        let chars = prompt.char_count();
        if chars <= config.char_budget {
            return Ok(prompt);
        }
        let can_drop = config.overflow == OverflowPolicy::TruncateOldest
            && dropped + 1 < batch.messages.len();
        if !can_drop {
            return Err(PromptError::BudgetExceeded {
                chars,
                budget: config.char_budget,
            });
        }
        dropped += 1;
    }
}

fn render_context(context: &PromptContext) -> String {
    let mut out = String::new();
    if let Some(title) = &context.thread_title {
        out.push_str(&format!("Thread title: {title}\n"));
    }
    if let Some(prior) = &context.prior_summary {
        out.push_str(&format!("Summary of the prior conversation: {prior}\n"));
    }
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

fn render_conversation(batch: &DailyBatch, messages: &[crate::corpus::Message]) -> String {
    let mut out = format!("Conversation of {}:\n", batch.batch_date);
    for m in messages {
        out.push_str(&format!(
            "[{}] {}: {}\n",
            timefmt::format(&m.posted_at),
            m.author,
            m.body
        ));
    }
    out
}

fn as_question(text: &str) -> String {
    match text.strip_suffix('.') {
        Some(stem) => format!("{stem}?"),
        None => text.to_string(),
    }
}

fn render_instructions(schema: &ExtractionSchema) -> String {
    let mut out = String::from("Please extract the following information:\n");
    out.push_str(&format!("summary: {}\n", schema.summary_instruction));
    for (i, v) in schema.variables.iter().enumerate() {
        out.push_str(&format!("{}. {}: {}\n", i + 1, v.name, as_question(&v.prompt_text)));
        for o in &v.enum_options {
            out.push_str(&format!("   - {}: {}\n", o.label, o.definition));
        }
    }
    out.push_str("Output your answer in the following format, as an example.\n\n");
    out.push_str(&render_exemplar(schema));
    out
}

const EXEMPLAR_SUMMARY: &str = "The conversation focused on the sale of a new exploit targeting XYZ software. An actor claimed to have discovered a vulnerability and is offering it for sale. There was also a discussion about potential targets using ABC technology.";

fn render_exemplar(schema: &ExtractionSchema) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serializes");
    let lines: Vec<String> = schema
        .variables
        .iter()
        .map(|v| {
            let value = match v.kind {
                VariableKind::Boolean => {
                    matches!(v.name.as_str(), "is_sale" | "is_initial_access").to_string()
                }
                VariableKind::StringList => q("XYZ software, ABC technology"),
                VariableKind::EnumList => format!("[{}]", q(&v.enum_options[0].label)),
            };
            format!("     {}: {value}", q(&v.name))
        })
        .collect();
    format!(
        "{{\n \"summary\": {},\n \"variables\": {{\n{}\n }}\n}}\n",
        q(EXEMPLAR_SUMMARY),
        lines.join(",\n")
    )
}

// ---------------------------------------------------------------------------
// Response parsing

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariableValue {
    Bool(bool),
    List(Vec<String>),
}

impl VariableValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            VariableValue::Bool(b) => Some(*b),
            VariableValue::List(_) => None,
        }
    }

    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            VariableValue::List(l) => Some(l),
            VariableValue::Bool(_) => None,
        }
    }
}

impl fmt::Display for VariableValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariableValue::Bool(b) => write!(f, "{b}"),
            VariableValue::List(l) => write!(f, "[{}]", l.join(", ")),
        }
    }
}

pub type VariableValues = BTreeMap<String, VariableValue>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub summary: String,
    pub values: VariableValues,
}

impl ParsedOutput {
    /// Renders the output in the exemplar wire shape, lists as arrays.
    pub fn to_response_json(&self, schema: &ExtractionSchema) -> String {
        let mut vars = serde_json::Map::new();
        for v in &schema.variables {
            if let Some(val) = self.values.get(&v.name) {
                vars.insert(v.name.clone(), serde_json::to_value(val).expect("value serializes"));
            }
        }
        let doc = serde_json::json!({ "summary": self.summary, "variables": vars });
        serde_json::to_string_pretty(&doc).expect("document serializes")
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no parsable object in response: {0}")]
    MalformedDocument(String),
    #[error("schema violation at {key}: {reason}")]
    SchemaViolation { key: String, reason: String },
}

impl ParseError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::MalformedDocument(_) => "MalformedDocument",
            ParseError::SchemaViolation { .. } => "SchemaViolation",
        }
    }
}

fn violation(key: &str, reason: impl Into<String>) -> ParseError {
    ParseError::SchemaViolation {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// First JSON object embedded in `raw`, skipping any surrounding prose.
fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

pub fn parse_response(raw: &str, schema: &ExtractionSchema) -> Result<ParsedOutput, ParseError> {
    let mut doc = first_object(raw).ok_or_else(|| {
        let preview: String = raw.chars().take(80).collect();
        ParseError::MalformedDocument(preview)
    })?;

    let summary = match doc.remove("summary") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::String(_)) => return Err(violation("summary", "empty")),
        Some(_) => return Err(violation("summary", "expected a string")),
        None => return Err(violation("summary", "missing")),
    };

    // Accept both the nested exemplar shape and a flat object.
    let mut vars = match doc.remove("variables") {
        Some(Value::Object(map)) => map,
        Some(_) => return Err(violation("variables", "expected an object")),
        None => doc,
    };

    let mut values = BTreeMap::new();
    for spec in &schema.variables {
        let raw_value = vars
            .remove(&spec.name)
            .ok_or_else(|| violation(&spec.name, "missing"))?;
        values.insert(spec.name.clone(), coerce(spec, raw_value)?);
    }
    if let Some(extra) = vars.keys().next() {
        return Err(violation(extra, "not in schema"));
    }
    Ok(ParsedOutput { summary, values })
}

fn coerce(spec: &VariableSpec, value: Value) -> Result<VariableValue, ParseError> {
    let items = match (spec.kind, value) {
        (VariableKind::Boolean, Value::Bool(b)) => return Ok(VariableValue::Bool(b)),
        (VariableKind::Boolean, other) => {
            return Err(violation(&spec.name, format!("expected boolean, got {other}")))
        }
        (_, Value::Null) => Vec::new(),
        (_, Value::String(s)) => s
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        (_, Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                    Value::String(_) => {}
                    other => {
                        return Err(violation(
                            &spec.name,
                            format!("expected list of strings, found element {other}"),
                        ))
                    }
                }
            }
            out
        }
        (_, other) => {
            return Err(violation(&spec.name, format!("expected list, got {other}")))
        }
    };

    if spec.kind == VariableKind::StringList {
        return Ok(VariableValue::List(items));
    }
    let mut labels: Vec<String> = Vec::with_capacity(items.len());
    for item in items {
        let label = spec
            .canonical_label(&item)
            .ok_or_else(|| violation(&spec.name, format!("unknown option {item:?}")))?;
        if !labels.iter().any(|l| l == label) {
            labels.push(label.to_string());
        }
    }
    Ok(VariableValue::List(labels))
}

// ---------------------------------------------------------------------------
// Unit summaries

/// Exactly-once key of a stored summary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SummaryKey {
    pub thread_id: String,
    pub batch_date: NaiveDate,
    pub schema_version: String,
    pub prompt_fingerprint: String,
}

impl SummaryKey {
    pub fn unit_id(&self) -> String {
        let mut h = FieldHasher::new("forumint.unit");
        h.field(self.thread_id.as_bytes())
            .field(self.batch_date.to_string().as_bytes())
            .field(self.schema_version.as_bytes())
            .field(self.prompt_fingerprint.as_bytes());
        format!("u-{}", &h.finish()[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit_id: String,
    pub thread_id: String,
    pub batch_date: NaiveDate,
    pub batch_index: usize,
    pub schema_version: String,
    pub summary: String,
    pub values: VariableValues,
    pub model_id: String,
    pub prompt_fingerprint: String,
    #[serde(default)]
    pub repair_used: bool,
    #[serde(with = "timefmt::rfc3339")]
    pub created_at: DateTime<Utc>,
}

impl UnitSummary {
    pub fn key(&self) -> SummaryKey {
        SummaryKey {
            thread_id: self.thread_id.clone(),
            batch_date: self.batch_date,
            schema_version: self.schema_version.clone(),
            prompt_fingerprint: self.prompt_fingerprint.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub key: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

pub fn validate_unit_summary(u: &UnitSummary, schema: &ExtractionSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |key: &str, reason: String| {
        out.push(Violation {
            key: key.to_string(),
            reason,
        })
    };

    if u.summary.trim().is_empty() {
        push("summary", "empty".into());
    }
    if u.unit_id.trim().is_empty() {
        push("unit_id", "empty".into());
    }
    if u.schema_version != schema.schema_version {
        push(
            "schema_version",
            format!("{:?} does not match schema {:?}", u.schema_version, schema.schema_version),
        );
    }
    let fp = &u.prompt_fingerprint;
    if fp.len() != 64 || !fp.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        push("prompt_fingerprint", "not a lowercase 256-bit hex digest".into());
    }

    for spec in &schema.variables {
        match (spec.kind, u.values.get(&spec.name)) {
            (_, None) => push(&spec.name, "missing".into()),
            (VariableKind::Boolean, Some(VariableValue::Bool(_))) => {}
            (VariableKind::Boolean, Some(other)) => {
                push(&spec.name, format!("expected boolean, got {other}"))
            }
            (_, Some(VariableValue::Bool(b))) => {
                push(&spec.name, format!("expected list, got {b}"))
            }
            (VariableKind::StringList, Some(VariableValue::List(_))) => {}
            (VariableKind::EnumList, Some(VariableValue::List(labels))) => {
                for label in labels {
                    if !spec.enum_options.iter().any(|o| &o.label == label) {
                        push(&spec.name, format!("unknown option {label:?}"));
                    }
                }
            }
        }
    }
    for key in u.values.keys() {
        if schema.variable(key).is_none() {
            push(key, "not in schema".into());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Message;
    use chrono::TimeZone;

    const PAPER_EXAMPLE: &str = r#"{
 "summary": "The conversation focused on the sale of a new exploit targeting XYZ software. An actor claimed to have discovered a vulnerability and is offering it for sale. There was also a discussion about potential targets using ABC technology.",
 "variables": {
     "is_sale": true,
     "is_initial_access": true,
     "targeted_technologies": "XYZ software, ABC technology"
 }
}"#;

    fn three_variable_schema() -> ExtractionSchema {
        let full = default_schema();
        ExtractionSchema {
            variables: full
                .variables
                .into_iter()
                .filter(|v| {
                    matches!(
                        v.name.as_str(),
                        "is_sale" | "is_initial_access" | "targeted_technologies"
                    )
                })
                .collect(),
            ..default_schema()
        }
    }

    fn batch(index: usize) -> DailyBatch {
        let ts = Utc.with_ymd_and_hms(2023, 5, 1, 10, 0, 0).unwrap();
        DailyBatch {
            thread_id: "t1".into(),
            batch_date: ts.date_naive(),
            batch_index: index,
            messages: vec![
                Message {
                    message_id: "m1".into(),
                    thread_id: "t1".into(),
                    author: "seller".into(),
                    posted_at: ts,
                    body: "Selling RDP access to a US bank.".into(),
                },
                Message {
                    message_id: "m2".into(),
                    thread_id: "t1".into(),
                    author: "buyer".into(),
                    posted_at: ts + chrono::Duration::minutes(5),
                    body: "PM sent.".into(),
                },
            ],
        }
    }

    fn full_output() -> ParsedOutput {
        let mut values = BTreeMap::new();
        for v in default_schema().variables {
            let value = match v.kind {
                VariableKind::Boolean => VariableValue::Bool(v.name == "is_sale"),
                VariableKind::StringList => VariableValue::List(vec!["RDP".into()]),
                VariableKind::EnumList => VariableValue::List(vec!["Finance".into()]),
            };
            values.insert(v.name, value);
        }
        ParsedOutput {
            summary: "An actor sold RDP access to a bank.".into(),
            values,
        }
    }

    #[test]
    fn default_schema_has_the_bundled_rows() {
        let s = default_schema();
        let names: Vec<&str> = s.variable_names().collect();
        assert_eq!(
            names,
            vec![
                "is_sale",
                "is_initial_access",
                "is_targeting_mainstream",
                "is_targeting_large_organization",
                "is_targeting_critical_infrastructure",
                "is_remotely_exploitable",
                "is_actively_exploitable",
                "is_geopolitics",
                "targeted_technologies",
                "industries",
            ]
        );
        assert_eq!(
            s.variable("is_sale").unwrap().prompt_text,
            "An actor is selling something."
        );
        let industries = s.variable("industries").unwrap();
        let labels: Vec<&str> = industries.enum_options.iter().map(|o| o.label.as_str()).collect();
        assert_eq!(
            labels,
            vec![
                "Finance",
                "Technology and Software",
                "Critical Infrastructure",
                "Healthcare",
                "Other",
                "All"
            ]
        );
        assert_eq!(
            industries.enum_options[4].definition,
            "Any industry not explicitly mentioned above."
        );
        assert!(s.summary_instruction.starts_with("Generate concise extraction summaries"));
        assert_eq!(
            s.conditional_variables().collect::<Vec<_>>(),
            vec!["targeted_technologies", "industries"]
        );
    }

    #[test]
    fn schema_validation_rejects_bad_definitions() {
        let mut s = default_schema();
        s.variables.push(s.variables[0].clone());
        assert!(s.validate().is_err());

        let mut s = default_schema();
        s.variables[0].name = "IsSale".into();
        assert!(s.validate().is_err());

        let mut s = default_schema();
        let ind = s.variables.iter_mut().find(|v| v.name == "industries").unwrap();
        ind.enum_options.truncate(1);
        assert!(s.validate().is_err());

        let mut s = default_schema();
        let ind = s.variables.iter_mut().find(|v| v.name == "industries").unwrap();
        ind.enum_options[1].label = "finance".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn tense_variant_rewrites_boolean_prompts() {
        let s = default_schema().with_tense(TensePolicy::Any);
        assert_eq!(s.schema_version, "v1+tense-any");
        assert_eq!(
            s.variable("is_sale").unwrap().prompt_text,
            "An actor is selling or has sold something."
        );
        // Untouched where no variant exists.
        assert_eq!(
            s.variable("is_geopolitics").unwrap().prompt_text,
            "The discussion involves geopolitical issues."
        );
        assert_eq!(default_schema().with_tense(TensePolicy::Present), default_schema());
    }

    #[test]
    fn first_batch_prompt_carries_title_only() {
        let ctx = PromptContext {
            thread_title: Some("Selling bank RDP".into()),
            prior_summary: None,
            batch_index: 0,
        };
        let p = build_prompt(&default_schema(), &ctx, &batch(0), &PromptConfig::default()).unwrap();
        assert!(p.user_text.starts_with("Thread title: Selling bank RDP\n"));
        assert!(!p.user_text.contains("Summary of the prior conversation"));
        assert!(p.system_text.starts_with("As a cyber threat intelligence analyst"));
    }

    #[test]
    fn later_batch_prompt_carries_prior_summary() {
        let ctx = PromptContext {
            thread_title: Some("Selling bank RDP".into()),
            prior_summary: Some("Yesterday an actor offered RDP.".into()),
            batch_index: 1,
        };
        let p = build_prompt(&default_schema(), &ctx, &batch(1), &PromptConfig::default()).unwrap();
        assert!(p
            .user_text
            .contains("Summary of the prior conversation: Yesterday an actor offered RDP."));
    }

    #[test]
    fn prompt_sections_appear_in_order() {
        let ctx = PromptContext {
            thread_title: Some("T".into()),
            prior_summary: None,
            batch_index: 0,
        };
        let p = build_prompt(&default_schema(), &ctx, &batch(0), &PromptConfig::default()).unwrap();
        let full = p.full_text();
        let positions: Vec<usize> = [
            "As a cyber threat intelligence analyst",
            "Thread title: T",
            "[2023-05-01T10:00:00Z] seller: Selling RDP",
            "1. is_sale: An actor is selling something?",
            "   - Finance: Involving banking",
            "Output your answer in the following format, as an example.",
            "\"is_sale\": true",
        ]
        .iter()
        .map(|needle| full.find(needle).unwrap_or_else(|| panic!("missing {needle}")))
        .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");
    }

    #[test]
    fn prompt_is_pure() {
        let ctx = PromptContext {
            thread_title: Some("T".into()),
            prior_summary: Some("S".into()),
            batch_index: 1,
        };
        let cfg = PromptConfig::default();
        let a = build_prompt(&default_schema(), &ctx, &batch(1), &cfg).unwrap();
        let b = build_prompt(&default_schema(), &ctx, &batch(1), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn narrative_guard_extends_persona() {
        let ctx = PromptContext {
            thread_title: Some("T".into()),
            prior_summary: None,
            batch_index: 0,
        };
        let cfg = PromptConfig {
            narrative_guard: true,
            ..PromptConfig::default()
        };
        let p = build_prompt(&default_schema(), &ctx, &batch(0), &cfg).unwrap();
        assert!(p.system_text.ends_with(NARRATIVE_GUARD));
    }

    #[test]
    fn budget_overflow_errors_or_truncates() {
        let ctx = PromptContext {
            thread_title: Some("T".into()),
            prior_summary: None,
            batch_index: 0,
        };
        let full = build_prompt(&default_schema(), &ctx, &batch(0), &PromptConfig::default())
            .unwrap()
            .char_count();
        let tight = PromptConfig {
            char_budget: full - 1,
            ..PromptConfig::default()
        };
        assert_eq!(
            build_prompt(&default_schema(), &ctx, &batch(0), &tight),
            Err(PromptError::BudgetExceeded {
                chars: full,
                budget: full - 1
            })
        );
        let truncating = PromptConfig {
            overflow: OverflowPolicy::TruncateOldest,
            ..tight
        };
        let p = build_prompt(&default_schema(), &ctx, &batch(0), &truncating).unwrap();
        assert_eq!(p.dropped_messages, 1);
        assert!(!p.user_text.contains("Selling RDP"));
        assert!(p.user_text.contains("PM sent."));

        let hopeless = PromptConfig {
            char_budget: 10,
            overflow: OverflowPolicy::TruncateOldest,
            ..PromptConfig::default()
        };
        assert!(matches!(
            build_prompt(&default_schema(), &ctx, &batch(0), &hopeless),
            Err(PromptError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn inconsistent_context_is_rejected() {
        let ctx = PromptContext {
            thread_title: Some("T".into()),
            prior_summary: Some("S".into()),
            batch_index: 0,
        };
        assert!(matches!(
            build_prompt(&default_schema(), &ctx, &batch(0), &PromptConfig::default()),
            Err(PromptError::ContextMismatch(_))
        ));
        let ctx = PromptContext {
            batch_index: 3,
            ..PromptContext::default()
        };
        assert!(build_prompt(&default_schema(), &ctx, &batch(1), &PromptConfig::default()).is_err());
    }

    #[test]
    fn paper_example_parses_to_its_values() {
        let out = parse_response(PAPER_EXAMPLE, &three_variable_schema()).unwrap();
        assert!(out.summary.starts_with("The conversation focused on the sale of a new exploit"));
        assert_eq!(out.values["is_sale"], VariableValue::Bool(true));
        assert_eq!(out.values["is_initial_access"], VariableValue::Bool(true));
        assert_eq!(
            out.values["targeted_technologies"],
            VariableValue::List(vec!["XYZ software".into(), "ABC technology".into()])
        );
    }

    #[test]
    fn surrounding_prose_and_fences_are_tolerated() {
        let raw = format!("Sure {{not json}}. Here it is:\n```json\n{PAPER_EXAMPLE}\n```\nThanks!");
        assert!(parse_response(&raw, &three_variable_schema()).is_ok());
    }

    #[test]
    fn refusal_is_malformed() {
        assert!(matches!(
            parse_response("sorry, I cannot help", &default_schema()),
            Err(ParseError::MalformedDocument(_))
        ));
    }

    #[test]
    fn missing_key_is_a_schema_violation() {
        let mut out = full_output();
        out.values.remove("is_geopolitics");
        let raw = out.to_response_json(&default_schema());
        assert_eq!(
            parse_response(&raw, &default_schema()).unwrap_err(),
            violation("is_geopolitics", "missing")
        );
    }

    #[test]
    fn wrong_types_and_labels_are_violations() {
        let schema = default_schema();
        let mut doc: Value =
            serde_json::from_str(&full_output().to_response_json(&schema)).unwrap();
        doc["variables"]["is_sale"] = "yes".into();
        let err = parse_response(&doc.to_string(), &schema).unwrap_err();
        assert!(matches!(err, ParseError::SchemaViolation { ref key, .. } if key == "is_sale"));

        let mut doc: Value =
            serde_json::from_str(&full_output().to_response_json(&schema)).unwrap();
        doc["variables"]["industries"] = serde_json::json!(["Agriculture"]);
        let err = parse_response(&doc.to_string(), &schema).unwrap_err();
        assert!(matches!(err, ParseError::SchemaViolation { ref key, .. } if key == "industries"));

        let mut doc: Value =
            serde_json::from_str(&full_output().to_response_json(&schema)).unwrap();
        doc["variables"]["targeted_organization"] = "Apple".into();
        let err = parse_response(&doc.to_string(), &schema).unwrap_err();
        assert!(
            matches!(err, ParseError::SchemaViolation { ref key, .. } if key == "targeted_organization")
        );
    }

    #[test]
    fn enum_labels_are_canonicalized() {
        let schema = default_schema();
        let mut doc: Value =
            serde_json::from_str(&full_output().to_response_json(&schema)).unwrap();
        doc["variables"]["industries"] = "finance, HEALTHCARE, Finance".into();
        let out = parse_response(&doc.to_string(), &schema).unwrap();
        assert_eq!(
            out.values["industries"],
            VariableValue::List(vec!["Finance".into(), "Healthcare".into()])
        );
    }

    fn stored(out: ParsedOutput) -> UnitSummary {
        UnitSummary {
            unit_id: "u-1".into(),
            thread_id: "t1".into(),
            batch_date: NaiveDate::from_ymd_opt(2023, 5, 1).unwrap(),
            batch_index: 0,
            schema_version: "v1".into(),
            summary: out.summary,
            values: out.values,
            model_id: "gpt-3.5-turbo-16k-0613".into(),
            prompt_fingerprint: sha256_hex("x"),
            repair_used: false,
            created_at: Utc.with_ymd_and_hms(2023, 5, 2, 0, 0, 0).unwrap(),
        }
    }

    #[test]
    fn validation_of_unit_summaries() {
        let schema = default_schema();
        assert!(validate_unit_summary(&stored(full_output()), &schema).is_empty());

        let mut u = stored(full_output());
        u.values
            .insert("industries".into(), VariableValue::List(vec!["Agriculture".into()]));
        let v = validate_unit_summary(&u, &schema);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].key, "industries");
        assert!(v[0].reason.contains("Agriculture"));

        let mut u = stored(full_output());
        u.values
            .insert("targeted_organization".into(), VariableValue::List(vec!["Apple".into()]));
        let v = validate_unit_summary(&u, &schema);
        assert_eq!(v, vec![Violation {
            key: "targeted_organization".into(),
            reason: "not in schema".into()
        }]);

        let mut u = stored(full_output());
        u.summary = " ".into();
        u.values.remove("is_sale");
        u.prompt_fingerprint = "ABC".into();
        assert_eq!(validate_unit_summary(&u, &schema).len(), 3);
    }

    #[test]
    fn unit_ids_follow_the_key() {
        let u = stored(full_output());
        let a = u.key().unit_id();
        let mut other = u.key();
        other.prompt_fingerprint = sha256_hex("y");
        assert_ne!(a, other.unit_id());
        assert_eq!(a, u.key().unit_id());
        assert!(a.starts_with("u-") && a.len() == 18);
    }
}
