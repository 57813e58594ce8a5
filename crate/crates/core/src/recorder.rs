//! Append-only episode trace, bounded context for the reasoner, the
//! repetition guard, and replay.
//!
//! A trace file is JSONL: a header line followed by one event per line.
//! Each event's `state_hash` chains the previous hash, the hash of the
//! event's canonical payload and the snapshot hash of the episode state
//! after the event, so both state drift and edits to any recorded payload
//! surface at the first affected event.
//!
//! Event payloads by kind:
//!
//! | kind         | payload |
//! |--------------|---------|
//! | `decision`   | `{decision, exchanges?, forced?}` |
//! | `execution`  | `{results: [ToolResult]}` |
//! | `projection` | `{evidence: [Evidence], discarded: [id], reverted_to_global, space}` |
//! | `backtrack`  | `{discarded: [id], reverted_to_global}` |
//! | `finalize`   | `{prediction, poi_hint?}` |
//! | `error`      | `{message, exhausted}` |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Decision, PoiHint, ProbeAction};
use crate::canon;
use crate::executor::{ToolResult, ToolStatus};
use crate::geo::{Gazetteer, RegionId};
use crate::state::{ApplyReport, CandidateSpace, EpisodeState, Evidence, EvidenceId, Prediction, StateError};

pub const TRACE_FORMAT_VERSION: &str = "1";
pub const DEFAULT_CONTEXT_BUDGET: usize = 4000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: String,
    pub episode_id: String,
    pub gazetteer_hash: String,
    pub config_hash: String,
}

impl TraceHeader {
    pub fn new(episode_id: impl Into<String>, gazetteer_hash: impl Into<String>, config_hash: impl Into<String>) -> Self {
        TraceHeader {
            format_version: TRACE_FORMAT_VERSION.into(),
            episode_id: episode_id.into(),
            gazetteer_hash: gazetteer_hash.into(),
            config_hash: config_hash.into(),
        }
    }

    /// Chain seed for the first event.
    fn genesis(&self) -> String {
        canon::canonical_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Decision,
    Execution,
    Projection,
    Backtrack,
    Finalize,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub seq: u64,
    pub step: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
    pub state_hash: String,
    /// Unix milliseconds; informational, not hashed.
    pub wall_time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPayload {
    pub decision: Decision,
    /// Raw reasoner request/response bodies, auth removed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<serde_json::Value>,
    /// Set when the loop overrode the backend (budget or repetition).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPayload {
    pub results: Vec<ToolResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPayload {
    pub evidence: Vec<Evidence>,
    pub discarded: Vec<EvidenceId>,
    pub reverted_to_global: bool,
    pub space: CandidateSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktrackPayload {
    pub discarded: Vec<EvidenceId>,
    pub reverted_to_global: bool,
}

impl From<&ApplyReport> for BacktrackPayload {
    fn from(r: &ApplyReport) -> Self {
        BacktrackPayload {
            discarded: r.discarded.clone(),
            reverted_to_global: r.reverted_to_global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizePayload {
    pub prediction: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poi_hint: Option<PoiHint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
    pub exhausted: bool,
}

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("context floor needs {floor} chars but the budget is {budget}")]
    BudgetTooSmall { floor: usize, budget: usize },
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn chain_hash(prev: &str, payload: &serde_json::Value, snapshot_hash: &str) -> String {
    let payload_hash = canon::canonical_hash(payload);
    canon::sha256_hex(format!("{prev}{payload_hash}{snapshot_hash}").as_bytes())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn trace_file_name(episode_id: &str) -> String {
    format!("{episode_id}.trace.jsonl")
}

/// Single-writer event log for one episode. With a file attached, every
/// event is written and flushed before `append` returns.
pub struct Recorder {
    header: TraceHeader,
    events: Vec<TrajectoryEvent>,
    last_hash: String,
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl Recorder {
    pub fn in_memory(header: TraceHeader) -> Self {
        Recorder {
            last_hash: header.genesis(),
            header,
            events: Vec::new(),
            out: None,
        }
    }

    /// Creates `<dir>/<episode-id>.trace.jsonl` and writes the header.
    pub fn create(dir: &Path, header: TraceHeader) -> Result<Self, RecorderError> {
        let path = dir.join(trace_file_name(&header.episode_id));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{}", canon::canonical_json(&header))?;
        w.flush()?;
        let mut r = Self::in_memory(header);
        r.out = Some((path, w));
        Ok(r)
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn events(&self) -> &[TrajectoryEvent] {
        &self.events
    }

    pub fn path(&self) -> Option<&Path> {
        self.out.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn next_seq(&self) -> u64 {
        self.events.last().map_or(1, |e| e.seq + 1)
    }

    /// Appends a fully formed event. Its seq must follow the last one.
    pub fn record(&mut self, event: TrajectoryEvent) -> Result<(), RecorderError> {
        let expected = self.next_seq();
        if event.seq != expected {
            return Err(RecorderError::SeqGap { expected, got: event.seq });
        }
        if let Some((_, w)) = self.out.as_mut() {
            writeln!(w, "{}", canon::canonical_json(&event))?;
            w.flush()?;
        }
        self.last_hash = event.state_hash.clone();
        self.events.push(event);
        Ok(())
    }

    /// Builds the next event for `payload` and the state after it, and
    /// records it.
    pub fn append<P: Serialize>(
        &mut self,
        step: u64,
        kind: EventKind,
        payload: &P,
        state: &EpisodeState,
    ) -> Result<&TrajectoryEvent, RecorderError> {
        let payload = serde_json::to_value(payload).expect("payload serializes");
        let state_hash = chain_hash(&self.last_hash, &payload, &state.snapshot_hash());
        let event = TrajectoryEvent {
            seq: self.next_seq(),
            step,
            kind,
            payload,
            state_hash,
            wall_time: now_ms(),
        };
        self.record(event)?;
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn trace(&self) -> Trace {
        Trace {
            header: self.header.clone(),
            events: self.events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TrajectoryEvent>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: trace is truncated")]
    Truncated { line: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: sequence gap, expected seq {expected}, got {got}")]
    SeqGap { line: usize, expected: u64, got: u64 },
    #[error("unsupported trace format version {0:?}")]
    Version(String),
    #[error("io: {0}")]
    Io(String),
}

impl Trace {
    /// Parses trace text. A final line without its newline that does not
    /// parse is reported as truncation at that line.
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let last = lines.len();
        let fail = |line: usize, message: String| {
            if line == last && !complete {
                TraceError::Truncated { line }
            } else {
                TraceError::Malformed { line, message }
            }
        };
        let Some(first) = lines.first() else {
            return Err(TraceError::Truncated { line: 1 });
        };
        let header: TraceHeader = serde_json::from_str(first).map_err(|e| fail(1, e.to_string()))?;
        if header.format_version != TRACE_FORMAT_VERSION {
            return Err(TraceError::Version(header.format_version));
        }
        let mut events: Vec<TrajectoryEvent> = Vec::new();
        for (i, raw) in lines.iter().enumerate().skip(1) {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let e: TrajectoryEvent = serde_json::from_str(raw).map_err(|e| fail(line, e.to_string()))?;
            let expected = events.last().map_or(1, |p| p.seq + 1);
            if e.seq != expected {
                return Err(TraceError::SeqGap { line, expected, got: e.seq });
            }
            events.push(e);
        }
        Ok(Trace { header, events })
    }

    pub fn load(path: &Path) -> Result<Trace, TraceError> {
        let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = canon::canonical_json(&self.header);
        out.push('\n');
        for e in &self.events {
            out.push_str(&canon::canonical_json(e));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("seq {seq}: state hash mismatch")]
    HashMismatch { seq: u64, expected: String, actual: String },
    #[error("seq {seq}: bad payload: {message}")]
    Payload { seq: u64, message: String },
    #[error("seq {seq}: evidence {evidence} does not cite an ok tool result in the trace")]
    Fabricated { seq: u64, evidence: EvidenceId },
    #[error("seq {seq}: recomputed prediction differs from the recorded one")]
    PredictionMismatch { seq: u64 },
    #[error("seq {seq}: {error}")]
    State { seq: u64, error: StateError },
    #[error("trace was recorded against gazetteer {recorded}, replaying against {actual}")]
    GazetteerMismatch { recorded: String, actual: String },
}

fn payload<T: serde::de::DeserializeOwned>(e: &TrajectoryEvent) -> Result<T, ReplayError> {
    serde_json::from_value(e.payload.clone()).map_err(|err| ReplayError::Payload {
        seq: e.seq,
        message: err.to_string(),
    })
}

/// Re-applies every recorded event to a fresh state and checks each
/// recomputed hash against the recorded one. Tools are never contacted:
/// results and evidence come from the trace.
pub fn replay(trace: &Trace, g: &Gazetteer) -> Result<EpisodeState, ReplayError> {
    replay_with(trace, g, |_, _| {})
}

/// [`replay`] with a callback receiving each verified event and the state
/// after it.
pub fn replay_with(
    trace: &Trace,
    g: &Gazetteer,
    mut on_event: impl FnMut(&TrajectoryEvent, &EpisodeState),
) -> Result<EpisodeState, ReplayError> {
    if trace.header.gazetteer_hash != g.content_hash() {
        return Err(ReplayError::GazetteerMismatch {
            recorded: trace.header.gazetteer_hash.clone(),
            actual: g.content_hash(),
        });
    }
    let mut state = EpisodeState::new();
    let mut prev = trace.header.genesis();
    // (action id, payload hash) of every ok result seen so far
    let mut cited: BTreeSet<(u64, String)> = BTreeSet::new();
    for e in &trace.events {
        match e.kind {
            EventKind::Decision => {
                payload::<DecisionPayload>(e)?;
            }
            EventKind::Execution => {
                let p: ExecutionPayload = payload(e)?;
                for r in p.results.iter().filter(|r| r.status == ToolStatus::Ok) {
                    cited.insert((r.action_id.0, r.payload_sha256()));
                }
            }
            EventKind::Projection => {
                let p: ProjectionPayload = payload(e)?;
                for ev in &p.evidence {
                    if !cited.contains(&(ev.provenance.action_id.0, ev.provenance.payload_sha256.clone())) {
                        return Err(ReplayError::Fabricated { seq: e.seq, evidence: ev.id });
                    }
                }
                state
                    .apply_evidence(p.evidence, g)
                    .map_err(|error| ReplayError::State { seq: e.seq, error })?;
            }
            EventKind::Backtrack => {
                payload::<BacktrackPayload>(e)?;
            }
            EventKind::Finalize => {
                let p: FinalizePayload = payload(e)?;
                let pred = state
                    .finalize(g, p.poi_hint.as_ref())
                    .map_err(|error| ReplayError::State { seq: e.seq, error })?;
                if pred != p.prediction {
                    return Err(ReplayError::PredictionMismatch { seq: e.seq });
                }
            }
            EventKind::Error => {
                let p: ErrorPayload = payload(e)?;
                if p.exhausted {
                    state.mark_exhausted();
                }
            }
        }
        let actual = chain_hash(&prev, &e.payload, &state.snapshot_hash());
        if actual != e.state_hash {
            return Err(ReplayError::HashMismatch {
                seq: e.seq,
                expected: e.state_hash.clone(),
                actual,
            });
        }
        prev = actual;
        on_event(e, &state);
    }
    Ok(state)
}

/// Repetition keys of every action that went to execution.
pub fn executed_keys(events: &[TrajectoryEvent]) -> BTreeSet<String> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Decision)
        .filter_map(|e| serde_json::from_value::<DecisionPayload>(e.payload.clone()).ok())
        .filter_map(|p| match p.decision {
            Decision::Batch { actions } => Some(actions),
            Decision::Finalize { .. } => None,
        })
        .flatten()
        .map(|a| a.repetition_key())
        .collect()
}

/// True iff an earlier executed action has the same module, tool and
/// canonical arguments.
pub fn is_repetition(events: &[TrajectoryEvent], a: &ProbeAction) -> bool {
    executed_keys(events).contains(&a.repetition_key())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RowForm {
    Full,
    NoClaim,
    Floor,
    IdOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceRow {
    pub id: EvidenceId,
    pub claim: String,
    pub constraint: Vec<(RegionId, String)>,
    pub confidence: f64,
    form: RowForm,
}

impl EvidenceRow {
    fn render(&self) -> String {
        let ids = || self.constraint.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(",");
        let names = || {
            self.constraint
                .iter()
                .map(|(id, name)| format!("{name} [{id}]"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        match self.form {
            RowForm::Full => format!("{} | {} | {} | {:.2}", self.id, self.claim, names(), self.confidence),
            RowForm::NoClaim => format!("{} | {} | {:.2}", self.id, names(), self.confidence),
            RowForm::Floor => format!("{} | {}", self.id, ids()),
            RowForm::IdOnly => self.id.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDigest {
    pub step: u64,
    /// `module/tool status` per executed action.
    pub actions: Vec<String>,
}

/// Bounded rendering of the history for the reasoner.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedContext {
    pub evidence_table: Vec<EvidenceRow>,
    pub action_digest: Vec<StepDigest>,
    /// Leading digest steps folded into one summary line.
    pub collapsed_steps: usize,
    pub candidate_summary: String,
    pub candidate_ids: String,
    pub ids_only_candidates: bool,
    pub budget_chars: usize,
}

impl CompressedContext {
    pub fn render(&self) -> String {
        let mut out = String::from("EVIDENCE (id | claim | constraint | confidence)\n");
        if self.evidence_table.is_empty() {
            out.push_str("(none)\n");
        }
        for row in &self.evidence_table {
            out.push_str(&row.render());
            out.push('\n');
        }
        out.push_str("ACTIONS\n");
        if self.action_digest.is_empty() {
            out.push_str("(none)\n");
        }
        let collapsed = &self.action_digest[..self.collapsed_steps.min(self.action_digest.len())];
        if let (Some(first), Some(last)) = (collapsed.first(), collapsed.last()) {
            let n: usize = collapsed.iter().map(|d| d.actions.len()).sum();
            let ok: usize = collapsed
                .iter()
                .flat_map(|d| &d.actions)
                .filter(|a| a.ends_with(" ok"))
                .count();
            out.push_str(&format!("steps {}-{}: {n} actions, {ok} ok\n", first.step, last.step));
        }
        for d in &self.action_digest[collapsed.len()..] {
            out.push_str(&format!("step {}: {}\n", d.step, d.actions.join(", ")));
        }
        out.push_str("CANDIDATES\n");
        if self.ids_only_candidates {
            out.push_str(&self.candidate_ids);
        } else {
            out.push_str(&self.candidate_summary);
        }
        out.push('\n');
        out
    }

    pub fn len_chars(&self) -> usize {
        self.render().chars().count()
    }
}

/// Compresses a trace into at most `budget` characters.
///
/// Shortening order: fold the oldest action-digest steps into one summary
/// line; drop claims from evidence rows, oldest first; reduce evidence rows
/// to id and constraint ids, then to the bare id, oldest first; list
/// candidates by id only.
/// Active evidence ids and the frontier always survive.
pub fn compress(events: &[TrajectoryEvent], g: &Gazetteer, budget: usize) -> Result<CompressedContext, RecorderError> {
    let mut evidence: BTreeMap<EvidenceId, Evidence> = BTreeMap::new();
    let mut space = CandidateSpace::global();
    let mut steps: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let mut pending: BTreeMap<u64, String> = BTreeMap::new();
    for e in events {
        match e.kind {
            EventKind::Decision => {
                if let Ok(DecisionPayload { decision: Decision::Batch { actions }, .. }) =
                    serde_json::from_value(e.payload.clone())
                {
                    for a in actions {
                        pending.insert(a.id.0, format!("{}/{}", a.module, a.tool));
                    }
                }
            }
            EventKind::Execution => {
                if let Ok(p) = serde_json::from_value::<ExecutionPayload>(e.payload.clone()) {
                    let line = steps.entry(e.step).or_default();
                    for r in p.results {
                        let label = pending.remove(&r.action_id.0).unwrap_or_else(|| r.tool.to_string());
                        let status = match (&r.status, &r.error) {
                            (ToolStatus::Ok, _) => "ok".to_string(),
                            (ToolStatus::Timeout, _) => "timeout".to_string(),
                            (ToolStatus::ToolError, Some(code)) => format!("error({code})"),
                            (ToolStatus::ToolError, None) => "error".to_string(),
                        };
                        line.push(format!("{label} {status}"));
                    }
                }
            }
            EventKind::Projection => {
                if let Ok(p) = serde_json::from_value::<ProjectionPayload>(e.payload.clone()) {
                    for ev in p.evidence {
                        evidence.insert(ev.id, ev);
                    }
                    for id in &p.discarded {
                        if let Some(ev) = evidence.get_mut(id) {
                            ev.active = false;
                        }
                    }
                    space = p.space;
                }
            }
            _ => {}
        }
    }
    let name = |id: &RegionId| g.get(id).map_or_else(|| id.to_string(), |r| format!("{} ({})", r.name, r.level));
    let mut ctx = CompressedContext {
        evidence_table: evidence
            .values()
            .filter(|e| e.active)
            .map(|e| EvidenceRow {
                id: e.id,
                claim: e.claim.clone(),
                constraint: e.constraint.iter().map(|id| (id.clone(), name(id))).collect(),
                confidence: e.confidence,
                form: RowForm::Full,
            })
            .collect(),
        action_digest: steps.into_iter().map(|(step, actions)| StepDigest { step, actions }).collect(),
        collapsed_steps: 0,
        candidate_summary: space.describe(g),
        candidate_ids: if space.is_global {
            "global".into()
        } else {
            space.frontier.iter().map(|id| id.as_str()).collect::<Vec<_>>().join(",")
        },
        ids_only_candidates: false,
        budget_chars: budget,
    };
    let mut size = ctx.len_chars();
    while size > budget && ctx.collapsed_steps < ctx.action_digest.len() {
        ctx.collapsed_steps += 1;
        size = ctx.len_chars();
    }
    for form in [RowForm::NoClaim, RowForm::Floor, RowForm::IdOnly] {
        for i in 0..ctx.evidence_table.len() {
            if size <= budget {
                break;
            }
            if ctx.evidence_table[i].form < form {
                ctx.evidence_table[i].form = form;
                size = ctx.len_chars();
            }
        }
    }
    if size > budget {
        ctx.ids_only_candidates = true;
        size = ctx.len_chars();
    }
    if size > budget {
        return Err(RecorderError::BudgetTooSmall { floor: size, budget });
    }
    Ok(ctx)
}
