//! Decision making: planner context, prompt rendering, the scripted
//! salience policy, the chat-completions backend, and `decide_next`, which
//! applies the step budget and the repetition guard to any backend.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::action::{
    parse_decision, AtomicTool, CapabilityModule, Decision, PoiHint, ProbeAction, ENVELOPE_VERSION,
};
use crate::executor::live::{self, Endpoint, HttpFailure, RetryPolicy};
use crate::geo::{RegionId, RegionLevel};
use crate::synth::{Clue, ClueKind};

pub const DEFAULT_MAX_STEPS: u64 = 12;
pub const PARSE_RETRIES: usize = 2;
/// Room for everything in a prompt except the compressed history.
pub const PROMPT_FRAME_CHARS: usize = 6000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub id: RegionId,
    pub name: String,
    pub level: RegionLevel,
}

/// Everything a backend may look at when choosing the next decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerContext {
    pub image_ref: String,
    /// Clues visible in a scene descriptor; empty for real images.
    pub clues: Vec<Clue>,
    /// Rendered compressed history (evidence, actions, candidates).
    pub compressed_history: String,
    pub candidate_summary: String,
    pub schema_text: String,
    /// 1-based index of the decision being made.
    pub step: u64,
    pub remaining_steps: u64,
    pub is_global: bool,
    pub frontier: Vec<FrontierEntry>,
    /// Consecutive executed steps that did not shrink the leaf cover.
    pub stalled_steps: u64,
    pub poi_hint: Option<PoiHint>,
    pub active_evidence: Vec<u64>,
    /// Repetition keys of actions already executed this episode.
    pub executed: BTreeSet<String>,
    pub enabled_tools: BTreeSet<AtomicTool>,
    pub next_action_id: u64,
    pub max_parallel: usize,
    /// Set on the re-ask after a fully repeated batch.
    pub repetition_warning: bool,
}

impl PlannerContext {
    /// Minimal context for a fresh episode; callers fill in the rest.
    pub fn initial(image_ref: impl Into<String>, clues: Vec<Clue>, max_steps: u64) -> Self {
        PlannerContext {
            image_ref: image_ref.into(),
            clues,
            compressed_history: String::new(),
            candidate_summary: "global (no constraint yet)".into(),
            schema_text: crate::action::render_action_schema(),
            step: 1,
            remaining_steps: max_steps,
            is_global: true,
            frontier: Vec::new(),
            stalled_steps: 0,
            poi_hint: None,
            active_evidence: Vec::new(),
            executed: BTreeSet::new(),
            enabled_tools: AtomicTool::ALL.into_iter().collect(),
            next_action_id: 1,
            max_parallel: crate::action::DEFAULT_MAX_PARALLEL,
            repetition_warning: false,
        }
    }

    fn single_city(&self) -> bool {
        !self.is_global && self.frontier.len() == 1 && self.frontier[0].level >= RegionLevel::City
    }
}

fn clue_label(k: ClueKind) -> &'static str {
    match k {
        ClueKind::Vegetation => "vegetation",
        ClueKind::Terrain => "terrain",
        ClueKind::Architecture => "architecture",
        ClueKind::SignText => "sign_text",
        ClueKind::Poi => "poi",
        ClueKind::Vehicle => "vehicle",
    }
}

const ROLE: &str = "You are the reasoner of an image geolocation agent. You never see pixels directly; \
you act through capability modules and their tools, and each tool result becomes evidence that narrows \
a hierarchical candidate space (country, province, city, district).";

const STRATEGY: &str = "STRATEGY
Work from macro to micro: environmental cues (terrain, vegetation, climate) narrow large regions, \
infrastructure (architecture, vehicles, public facilities) identifies provinces and city types, and \
semantic symbols (signs, shop names, landmarks) anchor the answer to a concrete division. \
When a salient micro-level clue is visible, such as readable text or a named landmark, skip directly to it. \
Use image matching when reasoning stalls between several candidate cities. \
Never repeat an action that was already executed with the same arguments.";

const GROUNDING: &str = "GROUNDING
Every conclusion must rest on evidence produced by a tool in this episode. \
A finalize decision must cite the ids of the active evidence it relies on. \
Do not guess: if the evidence does not support an answer yet, probe further.";

/// Renders the full prompt. Pure function of the context.
pub fn build_prompt(ctx: &PlannerContext) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{ROLE}");
    let _ = writeln!(out, "Decision envelope version: {ENVELOPE_VERSION}");
    let _ = writeln!(out);
    let _ = writeln!(out, "{STRATEGY}");
    let _ = writeln!(out);
    let _ = writeln!(out, "{GROUNDING}");
    let _ = writeln!(out);
    out.push_str(&ctx.schema_text);
    if !ctx.schema_text.ends_with('\n') {
        out.push('\n');
    }
    let disabled: Vec<&str> = AtomicTool::ALL
        .into_iter()
        .filter(|t| !ctx.enabled_tools.contains(t))
        .map(|t| t.as_str())
        .collect();
    if !disabled.is_empty() {
        let _ = writeln!(out, "Unavailable in this run: {}", disabled.join(", "));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "IMAGE");
    let _ = writeln!(out, "image_ref: {}", ctx.image_ref);
    if !ctx.clues.is_empty() {
        let _ = writeln!(out, "visible clues:");
        for c in &ctx.clues {
            let _ = writeln!(out, "- {}: {:?} (salience {:.2})", clue_label(c.kind), c.value, c.salience);
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "HISTORY");
    if ctx.compressed_history.is_empty() {
        let _ = writeln!(out, "(no steps yet)");
        let _ = writeln!(out, "CANDIDATES");
        let _ = writeln!(out, "{}", ctx.candidate_summary);
    } else {
        out.push_str(&ctx.compressed_history);
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "STEP {} ({} remaining, stalled for {})",
        ctx.step, ctx.remaining_steps, ctx.stalled_steps
    );
    if ctx.repetition_warning {
        let _ = writeln!(out, "Your previous batch only repeated executed actions. Choose different actions or finalize.");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "REPLY FORMAT");
    let _ = writeln!(out, "Reply with exactly one JSON object, either a batch of 1 to {} actions:", ctx.max_parallel);
    let _ = writeln!(
        out,
        "{{\"version\":\"{ENVELOPE_VERSION}\",\"type\":\"batch\",\"actions\":[{{\"module\":\"<module>\",\"tool\":\"<tool>\",\"args\":{{\"<name>\":\"<value>\"}},\"rationale\":\"<why>\"}}]}}"
    );
    let _ = writeln!(out, "or a final answer:");
    let _ = writeln!(
        out,
        "{{\"version\":\"{ENVELOPE_VERSION}\",\"type\":\"finalize\",\"cites\":[<evidence ids>],\"poi_hint\":{{\"lat\":<deg>,\"lon\":<deg>,\"city\":\"<name>\"}}}}"
    );
    let _ = writeln!(out, "poi_hint is optional; give it only when a tool returned exact coordinates.");
    out
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("reasoner backend unavailable: {0}")]
pub struct BackendUnavailable(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub decision: Decision,
    /// Request/response bodies exchanged with a remote model.
    pub exchanges: Vec<serde_json::Value>,
}

pub trait ReasonerBackend: Send + Sync {
    fn name(&self) -> String;
    fn decide(&self, ctx: &PlannerContext) -> Result<BackendReply, BackendUnavailable>;
}

type RuleFn = dyn Fn(&PlannerContext) -> Option<Decision> + Send + Sync;

/// A named rule: returns a decision when it applies.
#[derive(Clone)]
pub struct Rule {
    pub name: String,
    apply: Arc<RuleFn>,
}

impl Rule {
    pub fn new(name: impl Into<String>, f: impl Fn(&PlannerContext) -> Option<Decision> + Send + Sync + 'static) -> Self {
        Rule {
            name: name.into(),
            apply: Arc::new(f),
        }
    }
}

impl std::fmt::Debug for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Rule({})", self.name)
    }
}

/// First matching rule wins; with no match the backend finalizes.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    pub rules: Vec<Rule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>) -> Self {
        ScriptedBackend { rules }
    }

    /// Name of the rule that fires for `ctx`, if any.
    pub fn matching_rule(&self, ctx: &PlannerContext) -> Option<(&str, Decision)> {
        self.rules
            .iter()
            .find_map(|r| (r.apply)(ctx).map(|d| (r.name.as_str(), d)))
    }
}

impl ReasonerBackend for ScriptedBackend {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn decide(&self, ctx: &PlannerContext) -> Result<BackendReply, BackendUnavailable> {
        let decision = self
            .matching_rule(ctx)
            .map(|(_, d)| d)
            .unwrap_or_else(|| finalize_for(ctx));
        Ok(BackendReply {
            decision,
            exchanges: Vec::new(),
        })
    }
}

fn finalize_for(ctx: &PlannerContext) -> Decision {
    Decision::Finalize {
        poi_hint: ctx.poi_hint.clone(),
        cites: ctx.active_evidence.clone(),
    }
}

/// Repetition key without the module, so the same probe issued under a
/// different module still counts as done.
fn bare_key(key: &str) -> &str {
    key.split_once('/').map_or(key, |(_, rest)| rest)
}

fn act(module: CapabilityModule, tool: AtomicTool, args: Vec<(&'static str, String)>, why: &str) -> ProbeAction {
    ProbeAction::new(0, module, tool, args, why)
}

/// Turns the first round with anything left to do into a batch.
fn first_fresh_round(ctx: &PlannerContext, rounds: Vec<Vec<ProbeAction>>) -> Option<Decision> {
    let done: BTreeSet<&str> = ctx.executed.iter().map(|k| bare_key(k)).collect();
    for round in rounds {
        let mut seen = BTreeSet::new();
        let fresh: Vec<ProbeAction> = round
            .into_iter()
            .filter(|a| ctx.enabled_tools.contains(&a.tool))
            .filter(|a| {
                let key = a.repetition_key();
                let bare = bare_key(&key).to_string();
                !done.contains(bare.as_str()) && seen.insert(bare)
            })
            .take(ctx.max_parallel)
            .enumerate()
            .map(|(i, mut a)| {
                a.id = crate::action::ActionId(ctx.next_action_id + i as u64);
                a
            })
            .collect();
        if !fresh.is_empty() {
            return Some(Decision::batch(fresh));
        }
    }
    None
}

fn clues_by_salience<'c>(ctx: &'c PlannerContext, kinds: &[ClueKind]) -> Vec<&'c Clue> {
    let mut v: Vec<&Clue> = ctx.clues.iter().filter(|c| kinds.contains(&c.kind)).collect();
    v.sort_by(|a, b| b.salience.partial_cmp(&a.salience).unwrap_or(std::cmp::Ordering::Equal));
    v
}

/// Crop windows in unit image coordinates, tried pairwise.
const MATCH_WINDOWS: [&str; 6] = [
    "0,0,1,1",
    "0.25,0.25,0.5,0.5",
    "0,0,0.5,0.5",
    "0.5,0.5,0.5,0.5",
    "0.5,0,0.5,0.5",
    "0,0.5,0.5,0.5",
];

fn image_matching_rounds(ctx: &PlannerContext) -> Vec<Vec<ProbeAction>> {
    MATCH_WINDOWS
        .chunks(2)
        .map(|pair| {
            pair.iter()
                .map(|w| {
                    act(
                        CapabilityModule::ImageMatching,
                        AtomicTool::ImageSearch,
                        vec![("image_ref", ctx.image_ref.clone()), ("bbox", w.to_string())],
                        "retrieve visually similar geotagged images to separate candidate cities",
                    )
                })
                .collect()
        })
        .collect()
}

fn semantic_rounds(ctx: &PlannerContext) -> Vec<Vec<ProbeAction>> {
    use AtomicTool::*;
    let m = CapabilityModule::SemanticSymbol;
    let texts = clues_by_salience(ctx, &[ClueKind::SignText, ClueKind::Poi]);
    let mut first = Vec::new();
    if ctx.clues.iter().any(|c| c.kind == ClueKind::SignText) {
        first.push(act(m, Ocr, vec![("image_ref", ctx.image_ref.clone())], "read the visible sign text"));
    }
    for c in texts.iter().filter(|c| c.kind == ClueKind::Poi) {
        first.push(act(m, Geocode, vec![("name", c.value.clone())], "locate the named landmark"));
    }
    let kb = texts
        .iter()
        .map(|c| act(m, KnowledgeBase, vec![("query", c.value.clone())], "look up where this name occurs"))
        .collect();
    let search = texts
        .iter()
        .map(|c| act(m, TextSearch, vec![("query", c.value.clone())], "search the web for this name"))
        .collect();
    vec![first, kb, search]
}

fn infrastructure_rounds(ctx: &PlannerContext) -> Vec<Vec<ProbeAction>> {
    use AtomicTool::*;
    let m = CapabilityModule::Infrastructure;
    let clues = clues_by_salience(ctx, &[ClueKind::Architecture, ClueKind::Vehicle]);
    vec![
        vec![act(m, Caption, vec![("image_ref", ctx.image_ref.clone())], "describe buildings, roads and vehicles")],
        clues
            .iter()
            .map(|c| act(m, KnowledgeBase, vec![("query", c.value.clone())], "find regions with this infrastructure style"))
            .collect(),
        clues
            .iter()
            .map(|c| act(m, TextSearch, vec![("query", c.value.clone())], "search for places with this style"))
            .collect(),
    ]
}

fn environmental_rounds(ctx: &PlannerContext) -> Vec<Vec<ProbeAction>> {
    use AtomicTool::*;
    let m = CapabilityModule::Environmental;
    let tags: Vec<String> = clues_by_salience(ctx, &[ClueKind::Vegetation, ClueKind::Terrain])
        .iter()
        .map(|c| c.value.clone())
        .collect();
    let mut rounds = vec![vec![act(m, Caption, vec![("image_ref", ctx.image_ref.clone())], "describe terrain, vegetation and climate")]];
    if !tags.is_empty() {
        rounds.push(vec![act(m, TextSearch, vec![("query", tags.join(" "))], "search where this landscape occurs")]);
    }
    rounds
}

/// The reference policy. Salient micro clues (signs, named places) go
/// straight to semantic probes, then infrastructure, then environmental
/// probes; image matching breaks stalls once the space is at province level
/// or finer but not yet a single city. Finalizes on an exact-coordinate
/// anchor or a single city-level candidate.
pub fn scripted_salience_policy() -> ScriptedBackend {
    let has = |ctx: &PlannerContext, kinds: &[ClueKind]| ctx.clues.iter().any(|c| kinds.contains(&c.kind));
    ScriptedBackend::new(vec![
        Rule::new("finalize-on-anchor", |ctx| ctx.poi_hint.as_ref().map(|_| finalize_for(ctx))),
        Rule::new("finalize-at-city", |ctx| ctx.single_city().then(|| finalize_for(ctx))),
        Rule::new("match-when-stalled", |ctx| {
            let below_country = !ctx.is_global
                && !ctx.frontier.is_empty()
                && ctx.frontier.iter().all(|f| f.level >= RegionLevel::Province);
            if below_country && ctx.stalled_steps >= 2 {
                first_fresh_round(ctx, image_matching_rounds(ctx))
            } else {
                None
            }
        }),
        Rule::new("semantic-symbol", move |ctx| {
            if has(ctx, &[ClueKind::SignText, ClueKind::Poi]) {
                first_fresh_round(ctx, semantic_rounds(ctx))
            } else {
                None
            }
        }),
        Rule::new("infrastructure", move |ctx| {
            if has(ctx, &[ClueKind::Architecture, ClueKind::Vehicle]) {
                first_fresh_round(ctx, infrastructure_rounds(ctx))
            } else {
                None
            }
        }),
        Rule::new("environmental", |ctx| first_fresh_round(ctx, environmental_rounds(ctx))),
        Rule::new("image-matching", |ctx| first_fresh_round(ctx, image_matching_rounds(ctx))),
    ])
}

/// Chat-completions backend. One client is shared across threads.
pub struct LlmBackend {
    pub endpoint: Endpoint,
    pub model: String,
    pub temperature: f64,
    pub policy: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl LlmBackend {
    pub fn new(endpoint: Endpoint, model: impl Into<String>, policy: RetryPolicy) -> Self {
        LlmBackend {
            endpoint,
            model: model.into(),
            temperature: 0.0,
            client: live::client(&policy),
            policy,
        }
    }

    fn fallback(ctx: &PlannerContext) -> Decision {
        if ctx.is_global {
            Decision::batch(vec![ProbeAction::new(
                ctx.next_action_id,
                CapabilityModule::Environmental,
                AtomicTool::Caption,
                [("image_ref", ctx.image_ref.clone())],
                "fallback probe after unparseable replies",
            )])
        } else {
            finalize_for(ctx)
        }
    }
}

/// Text of the first choice in a chat-completions response.
pub fn completion_text(body: &str) -> Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

impl ReasonerBackend for LlmBackend {
    fn name(&self) -> String {
        format!("llm:{}", self.model)
    }

    fn decide(&self, ctx: &PlannerContext) -> Result<BackendReply, BackendUnavailable> {
        let mut messages = vec![
            json!({"role": "system", "content": ROLE}),
            json!({"role": "user", "content": build_prompt(ctx)}),
        ];
        let mut exchanges = Vec::new();
        for _ in 0..=PARSE_RETRIES {
            let body = json!({"model": self.model, "messages": messages, "temperature": self.temperature});
            let reply = match live::post_json(&self.client, &self.endpoint, &body, &self.policy) {
                Ok(r) => r,
                Err((failure, attempts)) => {
                    let why = match failure {
                        HttpFailure::Timeout => "timeout".to_string(),
                        HttpFailure::Status(code, _) => format!("HTTP {code}"),
                        HttpFailure::Transport(e) => e,
                    };
                    return Err(BackendUnavailable(format!("{why} after {attempts} attempts")));
                }
            };
            exchanges.push(json!({"request": body, "response": reply.body}));
            let parsed = completion_text(&reply.body)
                .and_then(|text| {
                    parse_decision(&text, ctx.max_parallel, ctx.next_action_id)
                        .map(|d| (text, d))
                        .map_err(|e| e.to_string())
                });
            match parsed {
                Ok((_, decision)) => return Ok(BackendReply { decision, exchanges }),
                Err(err) => {
                    let said = completion_text(&reply.body).unwrap_or_default();
                    messages.push(json!({"role": "assistant", "content": said}));
                    messages.push(json!({
                        "role": "user",
                        "content": format!(
                            "Your reply could not be used: {err}. Reply with a single {ENVELOPE_VERSION} decision envelope JSON object and nothing else."
                        )
                    }));
                }
            }
        }
        Ok(BackendReply {
            decision: Self::fallback(ctx),
            exchanges,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutcome {
    pub decision: Decision,
    pub exchanges: Vec<serde_json::Value>,
    /// The loop overrode the backend: budget exhausted or repeated batch.
    pub forced: bool,
}

/// Asks `backend` for the next decision, enforcing the step budget, batch
/// validity and the repetition guard. Actions already executed are dropped;
/// a batch made only of such actions is re-asked once, then the episode is
/// finalized.
pub fn decide_next(backend: &dyn ReasonerBackend, ctx: &PlannerContext) -> Result<DecisionOutcome, BackendUnavailable> {
    if ctx.remaining_steps == 0 {
        return Ok(DecisionOutcome {
            decision: finalize_for(ctx),
            exchanges: Vec::new(),
            forced: true,
        });
    }
    let mut exchanges = Vec::new();
    let mut asked = ctx.clone();
    for _ in 0..2 {
        let reply = backend.decide(&asked)?;
        exchanges.extend(reply.exchanges);
        let actions = match reply.decision {
            Decision::Finalize { .. } => {
                return Ok(DecisionOutcome {
                    decision: reply.decision,
                    exchanges,
                    forced: false,
                })
            }
            Decision::Batch { actions } => actions,
        };
        let mut seen = BTreeSet::new();
        let fresh: Vec<ProbeAction> = actions
            .into_iter()
            .filter(|a| !ctx.executed.contains(&a.repetition_key()) && seen.insert(a.repetition_key()))
            .take(ctx.max_parallel)
            .enumerate()
            .map(|(i, mut a)| {
                a.id = crate::action::ActionId(ctx.next_action_id + i as u64);
                a
            })
            .collect();
        if !fresh.is_empty() {
            let decision = Decision::batch(fresh);
            if decision.validate(ctx.max_parallel).is_ok() {
                return Ok(DecisionOutcome {
                    decision,
                    exchanges,
                    forced: false,
                });
            }
            // invalid output never reaches the executor
            return Ok(DecisionOutcome {
                decision: finalize_for(ctx),
                exchanges,
                forced: true,
            });
        }
        asked.repetition_warning = true;
    }
    Ok(DecisionOutcome {
        decision: finalize_for(ctx),
        exchanges,
        forced: true,
    })
}
