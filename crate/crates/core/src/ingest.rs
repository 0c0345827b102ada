//! Raw log lines to preprocessed, chronologically ordered events.
//!
//! A [`FieldLayout`] says how to pull named fields out of a line; lines that
//! lack a required field are skipped. The textual fields (component,
//! severity, message) are concatenated, variable values are masked with
//! [`MaskRule`]s, and the result is reduced to lowercase alphabetic words
//! separated by single spaces.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use regex_automata::nfa::thompson::pikevm::PikeVM;
use regex_automata::{Anchored, Input, MatchKind};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TIMESTAMP: &str = "timestamp";
pub const SEVERITY: &str = "severity";
pub const COMPONENT: &str = "component";
pub const MESSAGE: &str = "message";
pub const LABEL: &str = "label";

const KNOWN_FIELDS: [&str; 5] = [TIMESTAMP, SEVERITY, COMPONENT, MESSAGE, LABEL];

/// Text used for events whose preprocessed text would otherwise be empty.
pub const EMPTY_SENTINEL: &str = "empty";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLogRecord {
    pub line_no: usize,
    pub raw_text: String,
}

/// How one field is extracted from a raw line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldRule {
    /// First capture group of the regex (or the whole match without groups).
    Regex { regex: String },
    /// Whitespace-separated column, 0-based.
    Column { column: usize },
    /// Everything from the given whitespace column to the end of the line.
    RestFrom { rest_from: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(flatten)]
    pub rule: FieldRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRule {
    pub pattern: String,
    pub replacement: String,
}

impl MaskRule {
    pub fn new(pattern: impl Into<String>, replacement: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            replacement: replacement.into(),
        }
    }
}

/// The JSON ingest configuration: field layout plus mask rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub fields: Vec<FieldSpec>,
    pub required: Vec<String>,
    /// `None` selects [`default_masks`]; an explicit empty list disables masking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<MaskRule>>,
}

impl IngestConfig {
    pub fn layout(&self) -> Result<FieldLayout> {
        FieldLayout::new(self.fields.clone(), self.required.clone())
    }

    pub fn mask_rules(&self) -> Vec<MaskRule> {
        self.masks.clone().unwrap_or_else(default_masks)
    }
}

#[derive(Debug, Clone)]
enum CompiledRule {
    Regex(Regex),
    Column(usize),
    RestFrom(usize),
}

/// A validated field layout with compiled extraction rules.
#[derive(Debug, Clone)]
pub struct FieldLayout {
    specs: Vec<(String, CompiledRule)>,
    required: Vec<String>,
}

impl FieldLayout {
    pub fn new(fields: Vec<FieldSpec>, required: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut specs = Vec::with_capacity(fields.len());
        for f in fields {
            if !seen.insert(f.name.clone()) {
                return Err(Error::Config(format!("duplicate field name {:?}", f.name)));
            }
            let rule = match f.rule {
                FieldRule::Regex { regex } => CompiledRule::Regex(Regex::new(&regex).map_err(|e| {
                    Error::Config(format!("field {:?}: invalid regex: {e}", f.name))
                })?),
                FieldRule::Column { column } => CompiledRule::Column(column),
                FieldRule::RestFrom { rest_from } => CompiledRule::RestFrom(rest_from),
            };
            specs.push((f.name, rule));
        }
        for r in &required {
            if !KNOWN_FIELDS.contains(&r.as_str()) {
                return Err(Error::Config(format!(
                    "required field {r:?} is not one of {KNOWN_FIELDS:?}"
                )));
            }
            if !seen.contains(r) {
                return Err(Error::Config(format!("required field {r:?} has no extraction rule")));
            }
        }
        Ok(Self { specs, required })
    }

    pub fn required(&self) -> &[String] {
        &self.required
    }
}

/// Extracted fields of one line, keyed by field name.
pub type FieldMap = BTreeMap<String, String>;

/// Extracts the layout's fields. `None` is the skip signal: the line is empty
/// or a required field is missing.
pub fn parse_raw_line(record: &RawLogRecord, layout: &FieldLayout) -> Option<FieldMap> {
    let line = record.raw_text.trim_end_matches(['\n', '\r']);
    if line.trim().is_empty() {
        return None;
    }
    let columns: Vec<&str> = line.split_whitespace().collect();
    let mut fields = FieldMap::new();
    for (name, rule) in &layout.specs {
        let value = match rule {
            CompiledRule::Regex(re) => re.captures(line).and_then(|c| {
                c.get(1).or_else(|| c.get(0)).map(|m| m.as_str().trim().to_string())
            }),
            CompiledRule::Column(i) => columns.get(*i).map(|s| s.to_string()),
            CompiledRule::RestFrom(i) => {
                (*i < columns.len()).then(|| columns[*i..].join(" "))
            }
        };
        if let Some(v) = value.filter(|v| !v.is_empty()) {
            fields.insert(name.clone(), v);
        }
    }
    if let Some(ts) = fields.get(TIMESTAMP) {
        if ts.parse::<f64>().map_or(true, |t| !t.is_finite()) {
            fields.remove(TIMESTAMP);
        }
    }
    layout
        .required
        .iter()
        .all(|r| fields.contains_key(r))
        .then_some(fields)
}

/// A mask rule compiled for leftmost-longest replacement.
#[derive(Debug, Clone)]
pub struct CompiledMask {
    finder: Regex,
    longest: PikeVM,
    replacement: String,
}

impl CompiledMask {
    pub fn new(rule: &MaskRule) -> Result<Self> {
        let valid = !rule.replacement.trim().is_empty()
            && rule.replacement.chars().all(|c| c.is_ascii_lowercase() || c == ' ');
        if !valid {
            return Err(Error::Config(format!(
                "mask replacement {:?} must be lowercase alphabetic words",
                rule.replacement
            )));
        }
        let finder = Regex::new(&rule.pattern)
            .map_err(|e| Error::Config(format!("mask {:?}: invalid regex: {e}", rule.pattern)))?;
        let longest = PikeVM::builder()
            .configure(PikeVM::config().match_kind(MatchKind::All))
            .build(&rule.pattern)
            .map_err(|e| Error::Config(format!("mask {:?}: {e}", rule.pattern)))?;
        Ok(Self {
            finder,
            longest,
            replacement: rule.replacement.split_whitespace().collect::<Vec<_>>().join(" "),
        })
    }

    /// Replaces every non-overlapping leftmost-longest match.
    pub fn apply(&self, text: &str) -> String {
        let mut cache = self.longest.create_cache();
        let mut out = String::with_capacity(text.len());
        let mut copied = 0;
        let mut pos = 0;
        while pos <= text.len() {
            let Some(m) = self.finder.find_at(text, pos) else { break };
            let start = m.start();
            let input = Input::new(text).range(start..).anchored(Anchored::Yes);
            let end = self
                .longest
                .find(&mut cache, input)
                .map_or(m.end(), |lm| lm.end().max(m.end()));
            if end == start {
                // empty match: step over one character
                pos = text[start..].chars().next().map_or(text.len() + 1, |c| start + c.len_utf8());
                continue;
            }
            out.push_str(&text[copied..start]);
            out.push(' ');
            out.push_str(&self.replacement);
            out.push(' ');
            copied = end;
            pos = end;
        }
        out.push_str(&text[copied..]);
        out
    }
}

pub fn compile_masks(rules: &[MaskRule]) -> Result<Vec<CompiledMask>> {
    rules.iter().map(CompiledMask::new).collect()
}

/// Default masks: IPv4 addresses, absolute paths, and hex identifiers.
pub fn default_masks() -> Vec<MaskRule> {
    vec![
        MaskRule::new(r"\b\d{1,3}(?:\.(?:\d{1,3}|\*)){3}(?::\d+)?", "ip address"),
        MaskRule::new(r#"(?:^|[\s=:"'(\[])/[^\s"')\]]*"#, "file path"),
        MaskRule::new(hex_id_pattern(), "hex id"),
    ]
}

/// Hex strings of length ≥ 8 that contain at least one digit, optionally
/// `0x`-prefixed. Requiring a digit keeps the mask from firing on plain
/// words such as "deadbeef", so masking stays idempotent.
fn hex_id_pattern() -> String {
    let mut alts: Vec<String> = (0..7)
        .map(|k| format!("[a-f]{{{k}}}[0-9][0-9a-f]{{{},}}", 7 - k))
        .collect();
    alts.push("[a-f]{7,}[0-9][0-9a-f]*".into());
    format!(r"(?i)\b(?:0x[0-9a-f]{{8,}}|{})\b", alts.join("|"))
}

/// Concatenates component, severity and message, then masks, lowercases and
/// reduces to single-space-separated runs of `a-z`.
pub fn preprocess_text(fields: &FieldMap, masks: &[CompiledMask]) -> String {
    let joined = [COMPONENT, SEVERITY, MESSAGE]
        .iter()
        .filter_map(|k| fields.get(*k))
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ");
    normalize(&joined, masks)
}

/// Masking and normalization of an arbitrary string.
pub fn normalize(text: &str, masks: &[CompiledMask]) -> String {
    let mut masked = text.to_string();
    for m in masks {
        masked = m.apply(&masked);
    }
    let lower = masked.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split(|c: char| !c.is_ascii_lowercase()) {
        if word.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
    Unknown,
}

impl Label {
    /// `-`, `normal` and `0` mean normal; any other non-empty value is an
    /// anomaly category.
    pub fn from_field(value: Option<&str>) -> Self {
        match value.map(str::trim) {
            None | Some("") => Label::Unknown,
            Some(v) if v == "-" || v == "0" || v.eq_ignore_ascii_case("normal") => Label::Normal,
            Some(_) => Label::Anomalous,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub index: usize,
    pub timestamp: Option<f64>,
    pub text: String,
    pub label: Label,
}

impl LogEvent {
    pub fn tokens(&self) -> Vec<&str> {
        self.text.split(' ').filter(|t| !t.is_empty()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub events: Vec<LogEvent>,
    pub skipped: usize,
}

/// Parses and preprocesses `lines` (1-based line numbers are assigned in
/// order), then sorts by timestamp. Events without a timestamp sort first;
/// ties keep their original line order.
pub fn events_from_lines<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    layout: &FieldLayout,
    masks: &[CompiledMask],
) -> Dataset {
    let records: Vec<RawLogRecord> = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| RawLogRecord {
            line_no: i + 1,
            raw_text: l.to_string(),
        })
        .collect();
    let parsed: Vec<Option<(Option<f64>, String, Label)>> = records
        .par_iter()
        .map(|r| {
            parse_raw_line(r, layout).map(|fields| {
                let ts = fields.get(TIMESTAMP).and_then(|t| t.parse::<f64>().ok());
                let mut text = preprocess_text(&fields, masks);
                if text.is_empty() {
                    text = EMPTY_SENTINEL.to_string();
                }
                (ts, text, Label::from_field(fields.get(LABEL).map(String::as_str)))
            })
        })
        .collect();
    let skipped = parsed.iter().filter(|p| p.is_none()).count();
    let mut kept: Vec<(Option<f64>, String, Label)> = parsed.into_iter().flatten().collect();
    kept.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (None, Some(_)) => std::cmp::Ordering::Less,
        (Some(_), None) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let events = kept
        .into_iter()
        .enumerate()
        .map(|(index, (timestamp, text, label))| LogEvent {
            index,
            timestamp,
            text,
            label,
        })
        .collect();
    Dataset { events, skipped }
}

pub fn load_dataset(path: impl AsRef<Path>, layout: &FieldLayout, masks: &[MaskRule]) -> Result<Dataset> {
    let path = path.as_ref();
    let compiled = compile_masks(masks)?;
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&raw);
    let ds = events_from_lines(text.lines(), layout, &compiled);
    if ds.events.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    log::info!(
        "loaded {} events from {} ({} skipped)",
        ds.events.len(),
        path.display(),
        ds.skipped
    );
    Ok(ds)
}
