//! Append-only, hash-chained audit log and the per-loop memory views built
//! on top of it.
//!
//! Each line of the log file is the canonical JSON of one [`LogEntry`].
//! `entry_hash = sha256(prev_hash || canonical(entry without entry_hash))`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::hashing::{canonical_json, sha256_hex, ZERO_HASH};

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("audit log is closed")]
    LogClosed,
    #[error("audit log I/O failure: {0}")]
    IoFailure(String),
    #[error("character budget {budget} cannot hold the mandatory block of {needed}")]
    BudgetImpossible { budget: usize, needed: usize },
    #[error("audit chain invalid at seq {first_bad_seq}: {reason}")]
    ChainInvalid { first_bad_seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "A_model")]
    Model,
    #[serde(rename = "A_refinement")]
    Refinement,
    #[serde(rename = "A_fine_tune")]
    FineTune,
    #[serde(rename = "A_logging")]
    Logging,
    #[serde(rename = "debug_attempt")]
    DebugAttempt,
    #[serde(rename = "phase_marker")]
    PhaseMarker,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Model => "A_model",
            Action::Refinement => "A_refinement",
            Action::FineTune => "A_fine_tune",
            Action::Logging => "A_logging",
            Action::DebugAttempt => "debug_attempt",
            Action::PhaseMarker => "phase_marker",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "accepted")]
    Accepted,
    #[serde(rename = "rejected")]
    Rejected,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accepted => "accepted",
            Verdict::Rejected => "rejected",
            Verdict::NotApplicable => "n/a",
        }
    }
}

/// Caller-supplied part of an entry; the log fills in seq, time and hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryFields {
    pub iteration: u64,
    pub candidate_id: String,
    pub action: Action,
    pub payload: Value,
    pub rationale: String,
    pub config_digest: String,
    pub metrics: Option<BTreeMap<String, f64>>,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub seq: u64,
    pub iteration: u64,
    pub candidate_id: String,
    pub action: Action,
    pub payload: Value,
    pub rationale: String,
    pub config_digest: String,
    pub metrics: Option<BTreeMap<String, f64>>,
    pub verdict: Option<Verdict>,
    pub timestamp: String,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl LogEntry {
    fn body_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("entry serializes");
        v.as_object_mut().expect("entry is an object").remove("entry_hash");
        v
    }

    pub fn compute_hash(&self) -> String {
        let mut material = self.prev_hash.clone();
        material.push_str(&canonical_json(&self.body_value()));
        sha256_hex(material.as_bytes())
    }

    /// The exact line written to the log file (without newline).
    pub fn to_line(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("entry serializes"))
    }

    pub fn primary_loss(&self) -> Option<f64> {
        self.payload.get("primary_loss").and_then(Value::as_f64)
    }
}

struct Inner {
    file: Option<File>,
    entries: Vec<LogEntry>,
    head: String,
    closed: bool,
}

/// The shared sink of a run. `append` is the only synchronized operation and
/// assigns the total order.
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl AuditLog {
    /// A new log file at `path`, replacing any previous file.
    pub fn create(path: &Path) -> Result<Self, AuditError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| AuditError::IoFailure(format!("{}: {e}", path.display())))?;
        Ok(Self::with_file(Some(file)))
    }

    pub fn in_memory() -> Self {
        Self::with_file(None)
    }

    fn with_file(file: Option<File>) -> Self {
        Self {
            inner: Mutex::new(Inner { file, entries: Vec::new(), head: ZERO_HASH.to_string(), closed: false }),
        }
    }

    pub fn append(&self, fields: EntryFields) -> Result<LogEntry, AuditError> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if inner.closed {
            return Err(AuditError::LogClosed);
        }
        let mut entry = LogEntry {
            seq: inner.entries.len() as u64,
            iteration: fields.iteration,
            candidate_id: fields.candidate_id,
            action: fields.action,
            payload: fields.payload,
            rationale: fields.rationale,
            config_digest: fields.config_digest,
            metrics: fields.metrics,
            verdict: fields.verdict,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            prev_hash: inner.head.clone(),
            entry_hash: String::new(),
        };
        // round-trip so the stored entry is exactly what a reader will parse
        let normalized: LogEntry = serde_json::from_value(serde_json::to_value(&entry).expect("serializes"))
            .map_err(|e| AuditError::IoFailure(format!("entry does not round-trip: {e}")))?;
        entry = normalized;
        entry.entry_hash = entry.compute_hash();
        if let Some(file) = inner.file.as_mut() {
            let mut line = entry.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| AuditError::IoFailure(e.to_string()))?;
        }
        inner.head = entry.entry_hash.clone();
        inner.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn close(&self) {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).closed = true;
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).entries.clone()
    }

    pub fn head_hash(&self) -> String {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).head.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The log rendered exactly as the file holds it.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|e| e.to_line() + "\n").collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ChainVerdict {
    Ok { entries: u64, head_hash: String },
    Bad { first_bad_seq: u64, reason: String },
}

impl ChainVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainVerdict::Ok { .. })
    }
}

/// Check one raw line as entry `seq` following `prev_hash`.
pub fn check_line(line: &[u8], seq: u64, prev_hash: &str) -> Result<LogEntry, String> {
    let text = std::str::from_utf8(line).map_err(|_| "line is not UTF-8".to_string())?;
    let value: Value = serde_json::from_str(text).map_err(|e| format!("unparsable: {e}"))?;
    if canonical_json(&value) != text {
        return Err("line is not in canonical form".into());
    }
    let entry: LogEntry = serde_json::from_value(value).map_err(|e| format!("schema: {e}"))?;
    if entry.seq != seq {
        return Err(format!("expected seq {seq}, found {}", entry.seq));
    }
    if entry.prev_hash != prev_hash {
        return Err("prev_hash does not match predecessor".into());
    }
    if entry.compute_hash() != entry.entry_hash {
        return Err("entry_hash mismatch".into());
    }
    Ok(entry)
}

/// Verify a whole log held in memory.
pub fn verify_bytes(bytes: &[u8]) -> ChainVerdict {
    let mut prev = ZERO_HASH.to_string();
    if bytes.is_empty() {
        return ChainVerdict::Ok { entries: 0, head_hash: prev };
    }
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    let terminated = lines.last().is_some_and(|l| l.is_empty());
    if terminated {
        lines.pop();
    }
    for (i, line) in lines.iter().enumerate() {
        let seq = i as u64;
        if i + 1 == lines.len() && !terminated {
            return ChainVerdict::Bad { first_bad_seq: seq, reason: "missing final newline".into() };
        }
        match check_line(line, seq, &prev) {
            Ok(entry) => prev = entry.entry_hash,
            Err(reason) => return ChainVerdict::Bad { first_bad_seq: seq, reason },
        }
    }
    ChainVerdict::Ok { entries: lines.len() as u64, head_hash: prev }
}

pub fn verify_chain(path: &Path) -> Result<ChainVerdict, AuditError> {
    let bytes = std::fs::read(path).map_err(|e| AuditError::IoFailure(format!("{}: {e}", path.display())))?;
    Ok(verify_bytes(&bytes))
}

/// Parse a log after verifying it.
pub fn read_verified(bytes: &[u8]) -> Result<Vec<LogEntry>, AuditError> {
    match verify_bytes(bytes) {
        ChainVerdict::Ok { .. } => {}
        ChainVerdict::Bad { first_bad_seq, reason } => return Err(AuditError::ChainInvalid { first_bad_seq, reason }),
    }
    Ok(bytes
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).expect("verified lines parse"))
        .collect())
}

fn one_line(text: &str) -> &str {
    text.lines().next().unwrap_or("")
}

fn fmt_loss(loss: Option<f64>) -> String {
    loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into())
}

/// What one loop remembers: its own entries, the sequence of configurations
/// it tried and the best one so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Memory {
    pub candidate_id: String,
    entries: Vec<LogEntry>,
    script_states: Vec<String>,
    best: Option<(String, f64)>,
}

impl Memory {
    pub fn new(candidate_id: impl Into<String>) -> Self {
        Self { candidate_id: candidate_id.into(), ..Default::default() }
    }

    /// Add an entry from the shared log. Execution outcomes extend the
    /// script-state sequence; accepted ones may move the best-so-far.
    pub fn record(&mut self, entry: &LogEntry) {
        if entry.action == Action::Logging {
            self.script_states.push(entry.config_digest.clone());
            if entry.verdict == Some(Verdict::Accepted) {
                if let Some(loss) = entry.primary_loss() {
                    if self.best.as_ref().is_none_or(|(_, b)| loss < *b) {
                        self.best = Some((entry.config_digest.clone(), loss));
                    }
                }
            }
        }
        self.entries.push(entry.clone());
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn script_states(&self) -> &[String] {
        &self.script_states
    }

    pub fn best(&self) -> Option<(&str, f64)> {
        self.best.as_ref().map(|(d, l)| (d.as_str(), *l))
    }

    pub fn candidate_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.candidate_id.as_str()).collect()
    }

    fn best_block(&self) -> String {
        match &self.best {
            Some((digest, loss)) => format!(
                "Best so far: config {} primary_loss {}",
                &digest[..digest.len().min(12)],
                fmt_loss(Some(*loss))
            ),
            None => "Best so far: none yet".to_string(),
        }
    }

    fn render_entry(e: &LogEntry) -> String {
        format!(
            "[t={}] {} verdict={} loss={} | {}",
            e.iteration,
            e.action.as_str(),
            e.verdict.map(Verdict::as_str).unwrap_or("n/a"),
            fmt_loss(e.primary_loss()),
            one_line(&e.rationale)
        )
    }

    fn render_outcome(e: &LogEntry) -> Option<String> {
        if e.action != Action::Logging {
            return None;
        }
        let hp = e.payload.get("hyperparams").map(canonical_json).unwrap_or_default();
        let metrics = e
            .metrics
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| format!("{k}={v:.6}")).collect::<Vec<_>>().join(", "))
            .unwrap_or_else(|| e.payload.get("status").and_then(Value::as_str).unwrap_or("failed").to_string());
        Some(format!(
            "[t={}] {} hyperparams {hp} -> {metrics}",
            e.iteration,
            e.verdict.map(Verdict::as_str).unwrap_or("n/a")
        ))
    }

    fn budgeted(&self, budget: usize, lines: impl Iterator<Item = String>) -> Result<String, AuditError> {
        let mut out = self.best_block();
        let needed = out.chars().count();
        if needed > budget {
            return Err(AuditError::BudgetImpossible { budget, needed });
        }
        let mut used = needed;
        for line in lines {
            let cost = line.chars().count() + 1;
            if used + cost > budget {
                break;
            }
            out.push('\n');
            out.push_str(&line);
            used += cost;
        }
        Ok(out)
    }

    /// Best-so-far block, then entries newest-first while they fit.
    pub fn digest_for_context(&self, budget: usize) -> Result<String, AuditError> {
        self.budgeted(budget, self.entries.iter().rev().map(Self::render_entry))
    }

    /// Execution outcomes only (hyperparameters and metrics), newest-first.
    pub fn metrics_history(&self, budget: usize) -> Result<String, AuditError> {
        self.budgeted(budget, self.entries.iter().rev().filter_map(Self::render_outcome))
    }

    /// Identity of the memory contents, for isolation checks.
    pub fn digest(&self) -> String {
        let hashes: Vec<&str> = self.entries.iter().map(|e| e.entry_hash.as_str()).collect();
        crate::hashing::digest_of(&hashes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}` (md|json)")),
        }
    }
}

/// Entries grouped by (candidate, iteration) in order of first appearance.
fn iteration_groups(entries: &[LogEntry]) -> Vec<((String, u64), Vec<&LogEntry>)> {
    let mut groups: Vec<((String, u64), Vec<&LogEntry>)> = Vec::new();
    for e in entries {
        let key = (e.candidate_id.clone(), e.iteration);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(e),
            None => groups.push((key, vec![e])),
        }
    }
    groups
}

fn accepted(entries: &[LogEntry]) -> Vec<&LogEntry> {
    entries
        .iter()
        .filter(|e| e.action == Action::Logging && e.verdict == Some(Verdict::Accepted))
        .collect()
}

/// Human-readable chronology of a verified log.
pub fn export_report(bytes: &[u8], format: ReportFormat) -> Result<String, AuditError> {
    let entries = read_verified(bytes)?;
    let head = entries.last().map(|e| e.entry_hash.clone()).unwrap_or_else(|| ZERO_HASH.to_string());
    Ok(match format {
        ReportFormat::Markdown => render_markdown(&entries, &head),
        ReportFormat::Json => {
            let iterations: Vec<Value> = iteration_groups(&entries)
                .into_iter()
                .map(|((cid, t), es)| {
                    json!({
                        "candidate_id": cid,
                        "iteration": t,
                        "actions": es.iter().map(|e| json!({
                            "seq": e.seq,
                            "action": e.action,
                            "verdict": e.verdict,
                            "rationale": e.rationale,
                            "config_digest": e.config_digest,
                            "metrics": e.metrics,
                            "payload": e.payload,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let incumbents: Vec<Value> = accepted(&entries)
                .into_iter()
                .map(|e| {
                    json!({
                        "seq": e.seq,
                        "candidate_id": e.candidate_id,
                        "iteration": e.iteration,
                        "config_digest": e.config_digest,
                        "primary_loss": e.primary_loss(),
                    })
                })
                .collect();
            let doc = json!({
                "entries": entries.len(),
                "head_hash": head,
                "iterations": iterations,
                "accepted_incumbents": incumbents,
            });
            serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
        }
    })
}

fn render_markdown(entries: &[LogEntry], head: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Audit report\n");
    let _ = writeln!(out, "Entries: {}  ", entries.len());
    let _ = writeln!(out, "Chain head: `{head}`\n");
    for ((cid, t), es) in iteration_groups(entries) {
        let _ = writeln!(out, "## {cid}, iteration {t}\n");
        for e in es {
            let verdict = match e.verdict {
                Some(Verdict::Rejected) => match e.payload.get("reverted_to").and_then(Value::as_str) {
                    Some(d) => format!("rejected (reverted to `{}`)", &d[..d.len().min(12)]),
                    None => "rejected".to_string(),
                },
                Some(v) => v.as_str().to_string(),
                None => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "- #{} **{}** [{}] config `{}`",
                e.seq,
                e.action.as_str(),
                verdict,
                &e.config_digest[..e.config_digest.len().min(12)]
            );
            for line in e.rationale.lines() {
                let _ = writeln!(out, "  > {line}");
            }
            if let Some(m) = &e.metrics {
                let parts: Vec<String> = m.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
                let _ = writeln!(out, "  metrics: {}", parts.join(", "));
            }
        }
        out.push('\n');
    }
    let _ = writeln!(out, "## Accepted incumbents\n");
    let _ = writeln!(out, "| seq | candidate | iteration | config | primary loss |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for e in accepted(entries) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | `{}` | {} |",
            e.seq,
            e.candidate_id,
            e.iteration,
            &e.config_digest[..e.config_digest.len().min(12)],
            fmt_loss(e.primary_loss())
        );
    }
    out
}
