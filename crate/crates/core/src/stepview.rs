//! StepView adapter execution.
//!
//! An [`AdapterSpec`] is declarative data interpreted by a fixed selector
//! engine. Executing it against a raw step document yields a
//! [`StepViewRecord`], which serializes to the canonical monitor-facing text
//! `METADATA=[..] OBSERVATION=[..] ACTION=[action=..; tool=..; args=..] RESULT=[status=..; text=..]`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trace_model::{read_jsonl, write_jsonl, Outcome, RawTrajectory};

pub const UNKNOWN: &str = "unknown";
pub const MAX_FIELD_CHARS: usize = 4096;
pub const ADAPTER_SPEC_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepViewRecord {
    pub metadata_lines: Vec<String>,
    pub observation_lines: Vec<String>,
    pub action_text: String,
    pub tool_name: String,
    pub tool_args_text: String,
    pub result_text: String,
    pub status: String,
}

impl Default for StepViewRecord {
    fn default() -> Self {
        StepViewRecord {
            metadata_lines: Vec::new(),
            observation_lines: Vec::new(),
            action_text: String::new(),
            tool_name: UNKNOWN.to_string(),
            tool_args_text: String::new(),
            result_text: String::new(),
            status: UNKNOWN.to_string(),
        }
    }
}

/// Field extraction rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    /// Top-level key lookup.
    Key { key: String },
    /// Dotted path; numeric segments index arrays (`messages.0.content`).
    Path { path: String },
    /// First capture group of `pattern` applied to the text found at `path`
    /// (the whole step rendered as compact JSON when `path` is empty).
    Regex {
        #[serde(default)]
        path: String,
        pattern: String,
        #[serde(default = "default_group")]
        group: usize,
    },
    Const { value: String },
    None,
}

fn default_group() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationUnit {
    Line,
    DialogueTurn,
    LogBlock,
    KvBlock,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    LexicalLines,
    DialogueTurns,
    LogBlocks,
    KvBlocks,
    None,
}

/// How the status field is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusPolicy {
    /// Use the status selector verbatim.
    Native,
    /// Use the selector when it yields a value, otherwise derive `error`/`ok`
    /// from the result text via the error lexicon.
    DeriveFromResult,
    /// Never populated; always the sentinel.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub version: String,
    pub metadata_sources: Vec<Selector>,
    pub observation_source: Selector,
    pub observation_unit: ObservationUnit,
    pub reducer_kind: ReducerKind,
    pub max_observation_units: usize,
    pub action_source: Selector,
    pub tool_source: Selector,
    pub args_source: Selector,
    pub result_source: Selector,
    pub status_source: Selector,
    pub status_policy: StatusPolicy,
    #[serde(default)]
    pub tool_aliases: BTreeMap<String, String>,
    /// When nonempty, tools outside this set trigger the monolithic fallback.
    #[serde(default)]
    pub known_tools: Vec<String>,
}

impl AdapterSpec {
    /// Spec matching the raw step layout emitted by the synthetic generator.
    pub fn synthetic_default() -> Self {
        let key = |k: &str| Selector::Key { key: k.to_string() };
        AdapterSpec {
            version: ADAPTER_SPEC_VERSION.to_string(),
            metadata_sources: vec![
                Selector::Path { path: "meta.task".into() },
                Selector::Path { path: "meta.site".into() },
            ],
            observation_source: key("observation"),
            observation_unit: ObservationUnit::Line,
            reducer_kind: ReducerKind::LexicalLines,
            max_observation_units: 4,
            action_source: key("action"),
            tool_source: key("tool"),
            args_source: key("args"),
            result_source: key("result"),
            status_source: key("status"),
            status_policy: StatusPolicy::Native,
            tool_aliases: BTreeMap::new(),
            known_tools: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ADAPTER_SPEC_VERSION {
            return Err(Error::Config(format!(
                "unsupported adapter spec version {:?} (expected {ADAPTER_SPEC_VERSION:?})",
                self.version
            )));
        }
        let selectors = self.metadata_sources.iter().chain([
            &self.observation_source,
            &self.action_source,
            &self.tool_source,
            &self.args_source,
            &self.result_source,
            &self.status_source,
        ]);
        for sel in selectors {
            match sel {
                Selector::Key { key } if key.is_empty() => {
                    return Err(Error::Config("key selector with empty key".into()))
                }
                Selector::Path { path } if path.is_empty() => {
                    return Err(Error::Config("path selector with empty path".into()))
                }
                Selector::Regex { pattern, group, .. } => {
                    let re = Regex::new(pattern)
                        .map_err(|e| Error::Config(format!("bad regex {pattern:?}: {e}")))?;
                    if *group >= re.captures_len() {
                        return Err(Error::Config(format!("regex {pattern:?} has no group {group}")));
                    }
                }
                _ => {}
            }
        }
        if self.max_observation_units == 0 && self.observation_unit != ObservationUnit::None {
            return Err(Error::Config("max_observation_units must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: AdapterSpec = serde_json::from_str(&text).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Adapter spec that passed validation, with compiled regexes.
#[derive(Debug, Clone)]
pub struct Adapter {
    spec: AdapterSpec,
    regexes: Vec<Option<Regex>>,
}

impl Adapter {
    pub fn new(spec: AdapterSpec) -> Result<Self> {
        spec.validate()?;
        let regexes = all_selectors(&spec)
            .map(|s| match s {
                Selector::Regex { pattern, .. } => Some(Regex::new(pattern).expect("validated")),
                _ => None,
            })
            .collect();
        Ok(Adapter { spec, regexes })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    fn select(&self, slot: usize, step: &Value) -> Option<String> {
        let sel = all_selectors(&self.spec).nth(slot).expect("slot in range");
        match sel {
            Selector::Key { key } => step.get(key).and_then(render),
            Selector::Path { path } => lookup_path(step, path).and_then(render),
            Selector::Regex { path, group, .. } => {
                let text = if path.is_empty() {
                    Some(step.to_string())
                } else {
                    lookup_path(step, path).and_then(render)
                }?;
                let re = self.regexes[slot].as_ref().expect("compiled");
                re.captures(&text)
                    .and_then(|c| c.get(*group))
                    .map(|m| m.as_str().to_string())
            }
            Selector::Const { value } => Some(value.clone()),
            Selector::None => None,
        }
    }

    fn select_value<'a>(&self, sel: &Selector, step: &'a Value) -> Option<&'a Value> {
        match sel {
            Selector::Key { key } => step.get(key),
            Selector::Path { path } => lookup_path(step, path),
            _ => None,
        }
    }

    /// Applies the adapter to one raw step. `index` and `trajectory_id` only
    /// label parse errors.
    pub fn apply(&self, raw_step: &Value, trajectory_id: &str, index: usize) -> Result<AppliedStep> {
        if !raw_step.is_object() {
            return Err(Error::StepParse {
                trajectory_id: trajectory_id.to_string(),
                index,
                reason: format!("expected a JSON object, found {}", json_kind(raw_step)),
            });
        }
        let spec = &self.spec;
        let n_meta = spec.metadata_sources.len();
        // Slot layout mirrors `all_selectors`.
        let (obs_slot, action_slot, tool_slot, args_slot, result_slot, status_slot) =
            (n_meta, n_meta + 1, n_meta + 2, n_meta + 3, n_meta + 4, n_meta + 5);

        let tool = self
            .select(tool_slot, raw_step)
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .map(|t| spec.tool_aliases.get(&t).cloned().unwrap_or(t));
        let tool = match tool {
            Some(t) if spec.known_tools.is_empty() || spec.known_tools.contains(&t) => t,
            _ => {
                return Ok(AppliedStep {
                    record: StepViewRecord {
                        result_text: truncate(&raw_step.to_string()),
                        ..StepViewRecord::default()
                    },
                    fallback: true,
                })
            }
        };

        let metadata_lines = (0..n_meta)
            .filter_map(|slot| self.select(slot, raw_step))
            .map(|s| truncate(s.trim()))
            .filter(|s| !s.is_empty())
            .collect();

        let observation_lines = if spec.observation_unit == ObservationUnit::None {
            Vec::new()
        } else {
            let units = match &spec.observation_source {
                s @ (Selector::Key { .. } | Selector::Path { .. }) => self
                    .select_value(s, raw_step)
                    .map(|v| split_units(v, spec.observation_unit))
                    .unwrap_or_default(),
                _ => self
                    .select(obs_slot, raw_step)
                    .map(|s| split_units(&Value::String(s), spec.observation_unit))
                    .unwrap_or_default(),
            };
            reduce_units(units, spec.reducer_kind)
                .into_iter()
                .take(spec.max_observation_units)
                .map(|u| truncate(&u))
                .collect()
        };

        let action_text = self.select(action_slot, raw_step).map(|s| truncate(&s)).unwrap_or_default();
        let tool_args_text = self.select(args_slot, raw_step).map(|s| truncate(&s)).unwrap_or_default();
        let result_text = self.select(result_slot, raw_step).map(|s| truncate(&s)).unwrap_or_default();
        let status = match spec.status_policy {
            StatusPolicy::None => UNKNOWN.to_string(),
            StatusPolicy::Native => self
                .select(status_slot, raw_step)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| UNKNOWN.to_string()),
            StatusPolicy::DeriveFromResult => self
                .select(status_slot, raw_step)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| {
                    if error_lexicon().is_match(&result_text) { "error" } else { "ok" }.to_string()
                }),
        };

        Ok(AppliedStep {
            record: StepViewRecord {
                metadata_lines,
                observation_lines,
                action_text,
                tool_name: truncate(&tool),
                tool_args_text,
                result_text,
                status: truncate(&status),
            },
            fallback: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedStep {
    pub record: StepViewRecord,
    /// The tool could not be resolved and the whole step was stored as result text.
    pub fallback: bool,
}

fn all_selectors(spec: &AdapterSpec) -> impl Iterator<Item = &Selector> {
    spec.metadata_sources.iter().chain([
        &spec.observation_source,
        &spec.action_source,
        &spec.tool_source,
        &spec.args_source,
        &spec.result_source,
        &spec.status_source,
    ])
}

pub fn apply_adapter(spec: &AdapterSpec, raw_step: &Value) -> Result<StepViewRecord> {
    Ok(Adapter::new(spec.clone())?.apply(raw_step, "", 0)?.record)
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn lookup_path<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, seg| match cur {
        Value::Object(map) => map.get(seg),
        Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

/// Renders a JSON value as field text; null yields nothing.
fn render(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Bool(_) | Value::Number(_) => Some(v.to_string()),
        Value::Array(_) | Value::Object(_) => Some(v.to_string()),
    }
}

fn split_units(v: &Value, unit: ObservationUnit) -> Vec<String> {
    match (unit, v) {
        (ObservationUnit::None, _) => Vec::new(),
        (ObservationUnit::DialogueTurn, Value::Array(turns)) => turns
            .iter()
            .filter_map(|t| match t {
                Value::Object(_) => {
                    let role = t.get("role").and_then(render).unwrap_or_default();
                    let content = t.get("content").and_then(render).unwrap_or_default();
                    Some(if role.is_empty() { content } else { format!("{role}: {content}") })
                }
                other => render(other),
            })
            .collect(),
        (ObservationUnit::KvBlock, Value::Object(map)) => map
            .iter()
            .map(|(k, v)| format!("{k}={}", render(v).unwrap_or_default()))
            .collect(),
        (_, Value::Array(items)) => items.iter().filter_map(render).collect(),
        (unit, other) => {
            let Some(text) = render(other) else { return Vec::new() };
            match unit {
                ObservationUnit::LogBlock => text.split("\n\n").map(str::to_string).collect(),
                _ => text.lines().map(str::to_string).collect(),
            }
        }
    }
}

fn reduce_units(units: Vec<String>, reducer: ReducerKind) -> Vec<String> {
    match reducer {
        ReducerKind::None => units,
        ReducerKind::LexicalLines => units
            .iter()
            .map(|u| u.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|u| !u.is_empty())
            .collect(),
        ReducerKind::DialogueTurns | ReducerKind::LogBlocks | ReducerKind::KvBlocks => units
            .into_iter()
            .map(|u| u.trim().to_string())
            .filter(|u| !u.is_empty())
            .collect(),
    }
}

fn truncate(s: &str) -> String {
    match s.char_indices().nth(MAX_FIELD_CHARS) {
        Some((cut, _)) => s[..cut].to_string(),
        None => s.to_string(),
    }
}

fn error_lexicon() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(error|exception|traceback|fail(ed|ure)?|denied|timeout|timed out|invalid|not found|refused)\b")
            .expect("static regex")
    })
}

/// Canonical monitor-facing text of a record. Byte-identical for equal records.
pub fn serialize_record(record: &StepViewRecord) -> String {
    let or_unknown = |s: &str| if s.is_empty() { UNKNOWN.to_string() } else { truncate(s) };
    let join = |lines: &[String]| lines.iter().map(|l| truncate(l)).collect::<Vec<_>>().join(" | ");
    format!(
        "METADATA=[{}] OBSERVATION=[{}] ACTION=[action={}; tool={}; args={}] RESULT=[status={}; text={}]",
        join(&record.metadata_lines),
        join(&record.observation_lines),
        truncate(&record.action_text),
        or_unknown(&record.tool_name),
        truncate(&record.tool_args_text),
        or_unknown(&record.status),
        truncate(&record.result_text),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldFill {
    pub filled: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total_steps: usize,
    pub metadata: FieldFill,
    pub observation: FieldFill,
    pub action: FieldFill,
    pub tool_name: FieldFill,
    pub args: FieldFill,
    pub result: FieldFill,
    pub status: FieldFill,
    pub fallback_steps: usize,
    pub fallback_rate: f64,
    /// True when every status value is the sentinel.
    pub status_sentinel_only: bool,
}

#[derive(Default)]
struct CoverageCounter {
    total: usize,
    counts: [usize; 7],
    fallback: usize,
}

impl CoverageCounter {
    fn add(&mut self, step: &AppliedStep) {
        let r = &step.record;
        let filled = [
            !r.metadata_lines.is_empty(),
            !r.observation_lines.is_empty(),
            !r.action_text.is_empty(),
            !r.tool_name.is_empty() && r.tool_name != UNKNOWN,
            !r.tool_args_text.is_empty(),
            !r.result_text.is_empty(),
            !r.status.is_empty() && r.status != UNKNOWN,
        ];
        for (c, f) in self.counts.iter_mut().zip(filled) {
            *c += usize::from(f);
        }
        self.fallback += usize::from(step.fallback);
        self.total += 1;
    }

    fn report(&self) -> CoverageReport {
        let rate = |n: usize| if self.total == 0 { 0.0 } else { n as f64 / self.total as f64 };
        let fill = |i: usize| FieldFill { filled: self.counts[i], rate: rate(self.counts[i]) };
        CoverageReport {
            total_steps: self.total,
            metadata: fill(0),
            observation: fill(1),
            action: fill(2),
            tool_name: fill(3),
            args: fill(4),
            result: fill(5),
            status: fill(6),
            fallback_steps: self.fallback,
            fallback_rate: rate(self.fallback),
            status_sentinel_only: self.total > 0 && self.counts[6] == 0,
        }
    }
}

/// Per-field fill rates and fallback rate of `spec` over a sample corpus.
/// Steps that fail to parse count as fallbacks.
pub fn validate_adapter(spec: &AdapterSpec, sample: &[RawTrajectory]) -> Result<CoverageReport> {
    let adapter = Adapter::new(spec.clone())?;
    let mut counter = CoverageCounter::default();
    for t in sample {
        for (i, step) in t.steps.iter().enumerate() {
            match adapter.apply(step, &t.trajectory_id, i) {
                Ok(applied) => counter.add(&applied),
                Err(_) => counter.add(&AppliedStep { record: StepViewRecord::default(), fallback: true }),
            }
        }
    }
    Ok(counter.report())
}

/// A trajectory with its StepView conversion, as stored in StepView corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepViewTrajectory {
    pub trajectory_id: String,
    pub task_id: String,
    pub outcome: Outcome,
    pub steps: Vec<Value>,
    pub stepview: Vec<StepViewRecord>,
}

impl StepViewTrajectory {
    pub fn len(&self) -> usize {
        self.stepview.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stepview.is_empty()
    }

    pub fn canonical_texts(&self) -> Vec<String> {
        self.stepview.iter().map(serialize_record).collect()
    }
}

/// Converts a corpus, failing on the first malformed step.
pub fn convert_corpus(
    adapter: &Adapter,
    corpus: &[RawTrajectory],
) -> Result<(Vec<StepViewTrajectory>, CoverageReport)> {
    let mut counter = CoverageCounter::default();
    let mut out = Vec::with_capacity(corpus.len());
    for t in corpus {
        let mut records = Vec::with_capacity(t.len());
        for (i, step) in t.steps.iter().enumerate() {
            let applied = adapter.apply(step, &t.trajectory_id, i)?;
            counter.add(&applied);
            records.push(applied.record);
        }
        out.push(StepViewTrajectory {
            trajectory_id: t.trajectory_id.clone(),
            task_id: t.task_id.clone(),
            outcome: t.outcome,
            steps: t.steps.clone(),
            stepview: records,
        });
    }
    Ok((out, counter.report()))
}

pub fn read_stepview_corpus(path: &Path) -> Result<Vec<StepViewTrajectory>> {
    let corpus: Vec<StepViewTrajectory> = read_jsonl(path)?;
    for t in &corpus {
        if t.stepview.is_empty() || t.stepview.len() != t.steps.len() {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                reason: format!(
                    "trajectory {} has {} raw steps but {} StepView records",
                    t.trajectory_id,
                    t.steps.len(),
                    t.stepview.len()
                ),
            });
        }
    }
    Ok(corpus)
}

pub fn write_stepview_corpus(path: &Path, corpus: &[StepViewTrajectory]) -> Result<()> {
    write_jsonl(path, corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleBucket {
    Initial,
    Mid,
    Tool,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub bucket: SampleBucket,
    pub trajectory_id: String,
    pub step_index: usize,
    pub step: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePack {
    pub entries: Vec<SampleEntry>,
    pub source_trajectory_ids: Vec<String>,
}

pub const SAMPLE_PACK_SIZE: usize = 12;
pub const SAMPLE_SCAN_LIMIT: usize = 64;
const BUCKET_QUOTAS: [(SampleBucket, usize); 4] = [
    (SampleBucket::Initial, 4),
    (SampleBucket::Mid, 4),
    (SampleBucket::Tool, 2),
    (SampleBucket::Anomalous, 2),
];
const TOOL_KEYS: [&str; 6] = ["tool", "tool_name", "action", "function", "command", "name"];

fn classify_raw_step(step: &Value, index: usize, len: usize) -> Option<SampleBucket> {
    if raw_step_is_anomalous(step) {
        return Some(SampleBucket::Anomalous);
    }
    if index == 0 {
        return Some(SampleBucket::Initial);
    }
    if 4 * index >= len && 4 * index < 3 * len {
        return Some(SampleBucket::Mid);
    }
    let has_tool = step
        .as_object()
        .is_some_and(|m| TOOL_KEYS.iter().any(|k| m.contains_key(*k)));
    has_tool.then_some(SampleBucket::Tool)
}

fn raw_step_is_anomalous(step: &Value) -> bool {
    let status_bad = ["status", "state"].iter().any(|k| {
        step.get(*k).and_then(Value::as_str).is_some_and(|s| {
            let s = s.trim().to_ascii_lowercase();
            !matches!(s.as_str(), "ok" | "success" | "")
        })
    });
    status_bad || error_lexicon().is_match(&step.to_string())
}

fn step_hash(trajectory_id: &str, index: usize) -> String {
    hex::encode(Sha256::digest(format!("{trajectory_id}:{index}").as_bytes()))
}

/// Deterministic 12-step raw sample pack with initial/mid/tool/anomalous quotas
/// of 4/4/2/2, drawn from the first 64 trajectories in id order. Shortfalls
/// are backfilled from the mid bucket, then the tool, initial, anomalous and
/// unbucketed remainders.
pub fn build_sample_pack(trajectories: &[RawTrajectory]) -> Result<SamplePack> {
    if trajectories.is_empty() {
        return Err(Error::invalid("sample pack needs at least one trajectory"));
    }
    let mut scanned: Vec<&RawTrajectory> = trajectories.iter().collect();
    scanned.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    scanned.truncate(SAMPLE_SCAN_LIMIT);

    // (hash, trajectory_id, index, step) per bucket; `None` collects the rest.
    type Candidate<'a> = (String, &'a str, usize, &'a Value);
    let mut buckets: BTreeMap<Option<SampleBucket>, Vec<Candidate>> = BTreeMap::new();
    for t in &scanned {
        for (i, step) in t.steps.iter().enumerate() {
            let bucket = classify_raw_step(step, i, t.len());
            buckets
                .entry(bucket)
                .or_default()
                .push((step_hash(&t.trajectory_id, i), &t.trajectory_id, i, step));
        }
    }
    let eligible: usize = buckets.values().map(Vec::len).sum();
    if eligible < SAMPLE_PACK_SIZE {
        return Err(Error::invalid(format!(
            "sample pack needs {SAMPLE_PACK_SIZE} steps but the scanned trajectories hold only {eligible}"
        )));
    }
    for list in buckets.values_mut() {
        list.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
        list.reverse(); // pop from the end in ascending hash order
    }

    let mut entries = Vec::with_capacity(SAMPLE_PACK_SIZE);
    let mut shortfall = 0;
    for (bucket, quota) in BUCKET_QUOTAS {
        let list = buckets.entry(Some(bucket)).or_default();
        for _ in 0..quota {
            match list.pop() {
                Some((_, id, i, step)) => entries.push(SampleEntry {
                    bucket,
                    trajectory_id: id.to_string(),
                    step_index: i,
                    step: step.clone(),
                }),
                None => shortfall += 1,
            }
        }
    }
    let backfill_order = [
        Some(SampleBucket::Mid),
        Some(SampleBucket::Tool),
        Some(SampleBucket::Initial),
        Some(SampleBucket::Anomalous),
        None,
    ];
    for source in backfill_order {
        while shortfall > 0 {
            let Some((_, id, i, step)) = buckets.entry(source).or_default().pop() else { break };
            entries.push(SampleEntry {
                bucket: source.unwrap_or(SampleBucket::Mid),
                trajectory_id: id.to_string(),
                step_index: i,
                step: step.clone(),
            });
            shortfall -= 1;
        }
    }
    debug_assert_eq!(entries.len(), SAMPLE_PACK_SIZE);

    let mut source_trajectory_ids: Vec<String> = entries.iter().map(|e| e.trajectory_id.clone()).collect();
    source_trajectory_ids.sort();
    source_trajectory_ids.dedup();
    Ok(SamplePack { entries, source_trajectory_ids })
}
