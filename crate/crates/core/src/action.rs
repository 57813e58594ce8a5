//! The structured action space: capability modules, atomic tools, the
//! module→tool composition map, per-tool argument schemas, and the JSON
//! decision envelope the reasoner answers with.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

/// Version tag of the decision envelope and the rendered action schema.
pub const ENVELOPE_VERSION: &str = "v1";

pub const DEFAULT_MAX_PARALLEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityModule {
    Environmental,
    Infrastructure,
    SemanticSymbol,
    ImageMatching,
}

impl CapabilityModule {
    pub const ALL: [CapabilityModule; 4] = [
        CapabilityModule::Environmental,
        CapabilityModule::Infrastructure,
        CapabilityModule::SemanticSymbol,
        CapabilityModule::ImageMatching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CapabilityModule::Environmental => "environmental",
            CapabilityModule::Infrastructure => "infrastructure",
            CapabilityModule::SemanticSymbol => "semantic_symbol",
            CapabilityModule::ImageMatching => "image_matching",
        }
    }

    fn purpose(self) -> &'static str {
        match self {
            CapabilityModule::Environmental => {
                "macro-level terrain, vegetation and climate analysis; narrows large regions early"
            }
            CapabilityModule::Infrastructure => {
                "meso-level architecture, traffic and public-facility analysis; identifies provinces and city types"
            }
            CapabilityModule::SemanticSymbol => {
                "micro-level text and symbols (signs, shop names, phone prefixes); anchors to concrete divisions"
            }
            CapabilityModule::ImageMatching => {
                "retrieval against a geographic image database; proposes candidate cities when reasoning is ambiguous"
            }
        }
    }
}

impl fmt::Display for CapabilityModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomicTool {
    Caption,
    Crop,
    Ocr,
    KnowledgeBase,
    TextSearch,
    ImageSearch,
    Geocode,
}

impl AtomicTool {
    pub const ALL: [AtomicTool; 7] = [
        AtomicTool::Caption,
        AtomicTool::Crop,
        AtomicTool::Ocr,
        AtomicTool::KnowledgeBase,
        AtomicTool::TextSearch,
        AtomicTool::ImageSearch,
        AtomicTool::Geocode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AtomicTool::Caption => "caption",
            AtomicTool::Crop => "crop",
            AtomicTool::Ocr => "ocr",
            AtomicTool::KnowledgeBase => "knowledge_base",
            AtomicTool::TextSearch => "text_search",
            AtomicTool::ImageSearch => "image_search",
            AtomicTool::Geocode => "geocode",
        }
    }

    pub fn parse(s: &str) -> Option<AtomicTool> {
        AtomicTool::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Human wording used in ablation condition labels ("w/o image search").
    pub fn label(self) -> &'static str {
        match self {
            AtomicTool::Caption => "caption",
            AtomicTool::Crop => "crop",
            AtomicTool::Ocr => "ocr",
            AtomicTool::KnowledgeBase => "knowledge base",
            AtomicTool::TextSearch => "text search",
            AtomicTool::ImageSearch => "image search",
            AtomicTool::Geocode => "geocode",
        }
    }

    fn purpose(self) -> &'static str {
        match self {
            AtomicTool::Caption => "describe the scene and list environment tags",
            AtomicTool::Crop => "cut a sub-image for closer inspection",
            AtomicTool::Ocr => "read text spans in the image or a region of it",
            AtomicTool::KnowledgeBase => "look up a name or feature in region-aware knowledge bases",
            AtomicTool::TextSearch => "open-domain web text retrieval",
            AtomicTool::ImageSearch => "retrieve visually similar geotagged imagery",
            AtomicTool::Geocode => "resolve a place or POI name to coordinates",
        }
    }
}

impl fmt::Display for AtomicTool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tools each capability module may invoke.
pub fn composition_map() -> BTreeMap<CapabilityModule, BTreeSet<AtomicTool>> {
    CapabilityModule::ALL
        .into_iter()
        .map(|m| (m, module_tools(m).iter().copied().collect()))
        .collect()
}

pub fn module_tools(m: CapabilityModule) -> &'static [AtomicTool] {
    use AtomicTool::*;
    match m {
        CapabilityModule::Environmental => &[Caption, TextSearch],
        CapabilityModule::Infrastructure => &[Caption, Crop, KnowledgeBase, TextSearch],
        CapabilityModule::SemanticSymbol => &[Crop, Ocr, KnowledgeBase, TextSearch, Geocode],
        CapabilityModule::ImageMatching => &[Crop, ImageSearch],
    }
}

pub fn is_permitted(m: CapabilityModule, t: AtomicTool) -> bool {
    module_tools(m).contains(&t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKind {
    Text,
    RegionId,
    ImageRef,
    BoundingBox,
    Count,
}

impl ArgKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArgKind::Text => "text",
            ArgKind::RegionId => "region-id",
            ArgKind::ImageRef => "image-ref",
            ArgKind::BoundingBox => "bounding-box",
            ArgKind::Count => "count",
        }
    }

    fn accepts(self, value: &str) -> bool {
        match self {
            ArgKind::Text => !value.trim().is_empty(),
            ArgKind::RegionId => {
                !value.is_empty()
                    && value
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
            }
            ArgKind::ImageRef => {
                !value.trim().is_empty() && !value.chars().any(|c| c.is_control())
            }
            ArgKind::BoundingBox => parse_bbox(value).is_some(),
            ArgKind::Count => matches!(value.parse::<u32>(), Ok(n) if (1..=100).contains(&n)),
        }
    }
}

impl fmt::Display for ArgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses `"x,y,w,h"` with non-negative finite components and positive size.
pub fn parse_bbox(value: &str) -> Option<[f64; 4]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    let [x, y, w, h]: [f64; 4] = parts.try_into().ok()?;
    let ok = [x, y, w, h].iter().all(|v| v.is_finite() && *v >= 0.0) && w > 0.0 && h > 0.0;
    ok.then_some([x, y, w, h])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArgSpec {
    pub name: &'static str,
    pub kind: ArgKind,
    pub required: bool,
}

const fn arg(name: &'static str, kind: ArgKind, required: bool) -> ArgSpec {
    ArgSpec {
        name,
        kind,
        required,
    }
}

pub fn arg_schema(tool: AtomicTool) -> &'static [ArgSpec] {
    use ArgKind::*;
    match tool {
        AtomicTool::Caption => const { &[arg("image_ref", ImageRef, true)] },
        AtomicTool::Crop => const { &[arg("image_ref", ImageRef, true), arg("bbox", BoundingBox, true)] },
        AtomicTool::Ocr => const { &[arg("image_ref", ImageRef, true), arg("bbox", BoundingBox, false)] },
        AtomicTool::KnowledgeBase => const { &[arg("query", Text, true), arg("region_scope", RegionId, false)] },
        AtomicTool::TextSearch => const { &[arg("query", Text, true), arg("top_k", Count, false)] },
        AtomicTool::ImageSearch => const { &[
            arg("image_ref", ImageRef, true),
            arg("bbox", BoundingBox, false),
            arg("top_k", Count, false),
        ] },
        AtomicTool::Geocode => const { &[arg("name", Text, true)] },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u64);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeAction {
    pub id: ActionId,
    pub module: CapabilityModule,
    pub tool: AtomicTool,
    pub args: BTreeMap<String, String>,
    #[serde(default)]
    pub rationale: String,
}

impl ProbeAction {
    pub fn new(
        id: u64,
        module: CapabilityModule,
        tool: AtomicTool,
        args: impl IntoIterator<Item = (&'static str, String)>,
        rationale: impl Into<String>,
    ) -> Self {
        ProbeAction {
            id: ActionId(id),
            module,
            tool,
            args: args.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            rationale: rationale.into(),
        }
    }

    pub fn arg(&self, name: &str) -> Option<&str> {
        self.args.get(name).map(String::as_str)
    }

    /// `(module, tool, canonical args)` used by the repetition guard.
    /// Text arguments are trimmed, whitespace-collapsed and lowercased.
    pub fn repetition_key(&self) -> String {
        let mut key = format!("{}/{}", self.module, self.tool);
        for (k, v) in &self.args {
            let kind = arg_schema(self.tool)
                .iter()
                .find(|s| s.name == k)
                .map(|s| s.kind);
            let canon = match kind {
                Some(ArgKind::Text) => v
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
                    .to_lowercase(),
                Some(ArgKind::BoundingBox) => match parse_bbox(v) {
                    Some(b) => format!("{},{},{},{}", b[0], b[1], b[2], b[3]),
                    None => v.trim().to_string(),
                },
                _ => v.trim().to_string(),
            };
            let _ = write!(key, "|{k}={canon}");
        }
        key
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("module {module} cannot invoke tool {tool}")]
    ModuleToolMismatch {
        module: CapabilityModule,
        tool: AtomicTool,
    },
    #[error("missing required argument {0:?}")]
    MissingArg(String),
    #[error("unknown argument {0:?}")]
    UnknownArg(String),
    #[error("argument {arg:?} is not a valid {expected}: {value:?}")]
    BadArgKind {
        arg: String,
        expected: ArgKind,
        value: String,
    },
}

impl ValidationError {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ValidationError::ModuleToolMismatch { .. } => "ModuleToolMismatch",
            ValidationError::MissingArg(_) => "MissingArg",
            ValidationError::UnknownArg(_) => "UnknownArg",
            ValidationError::BadArgKind { .. } => "BadArgKind",
        }
    }
}

pub fn validate_action(a: &ProbeAction) -> Result<(), ValidationError> {
    if !is_permitted(a.module, a.tool) {
        return Err(ValidationError::ModuleToolMismatch {
            module: a.module,
            tool: a.tool,
        });
    }
    let schema = arg_schema(a.tool);
    for name in a.args.keys() {
        if !schema.iter().any(|s| s.name == name) {
            return Err(ValidationError::UnknownArg(name.clone()));
        }
    }
    for spec in schema {
        match a.args.get(spec.name) {
            None if spec.required => return Err(ValidationError::MissingArg(spec.name.into())),
            None => {}
            Some(v) if !spec.kind.accepts(v) => {
                return Err(ValidationError::BadArgKind {
                    arg: spec.name.into(),
                    expected: spec.kind,
                    value: v.clone(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Exact coordinates plus the city they belong to, used to override the
/// region-centroid answer at finalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiHint {
    #[serde(flatten)]
    pub point: GeoPoint,
    pub city: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Decision {
    Batch {
        actions: Vec<ProbeAction>,
    },
    Finalize {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        poi_hint: Option<PoiHint>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        cites: Vec<u64>,
    },
}

impl Decision {
    pub fn finalize() -> Self {
        Decision::Finalize {
            poi_hint: None,
            cites: Vec::new(),
        }
    }

    pub fn batch(actions: Vec<ProbeAction>) -> Self {
        Decision::Batch { actions }
    }

    pub fn is_finalize(&self) -> bool {
        matches!(self, Decision::Finalize { .. })
    }

    /// Envelope JSON as the reasoner is asked to produce it.
    pub fn to_envelope(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("decision serializes");
        if let Some(actions) = v.get_mut("actions").and_then(|a| a.as_array_mut()) {
            for a in actions {
                if let Some(obj) = a.as_object_mut() {
                    obj.remove("id");
                }
            }
        }
        v.as_object_mut()
            .expect("object")
            .insert("version".into(), ENVELOPE_VERSION.into());
        v
    }

    /// Checks batch size and every contained action.
    pub fn validate(&self, max_parallel: usize) -> Result<(), DecisionError> {
        if let Decision::Batch { actions } = self {
            if actions.is_empty() || actions.len() > max_parallel {
                return Err(DecisionError::BatchSize {
                    len: actions.len(),
                    max: max_parallel,
                });
            }
            for a in actions {
                validate_action(a).map_err(|e| DecisionError::Invalid { action: a.id, error: e })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecisionError {
    #[error("batch of {len} actions, expected 1..={max}")]
    BatchSize { len: usize, max: usize },
    #[error("action {action}: {error}")]
    Invalid {
        action: ActionId,
        error: ValidationError,
    },
}

/// A rejected reasoner reply. `span` is a byte range into the input text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} (bytes {}..{})", span.start, span.end)]
pub struct ParseError {
    pub message: String,
    pub span: Range<usize>,
    pub validation: Option<ValidationError>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    #[serde(default)]
    version: Option<String>,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    actions: Option<Vec<RawAction>>,
    #[serde(default)]
    poi_hint: Option<PoiHint>,
    #[serde(default)]
    cites: Vec<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    module: CapabilityModule,
    tool: AtomicTool,
    #[serde(default)]
    args: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    rationale: String,
}

/// Finds the first complete JSON object embedded in `text`.
fn first_json_object(text: &str) -> Option<(serde_json::Value, Range<usize>)> {
    for (start, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v @ serde_json::Value::Object(_))) = stream.next() {
            let end = start + stream.byte_offset();
            return Some((v, start..end));
        }
    }
    None
}

/// Parses a reasoner reply into a validated [`Decision`].
///
/// Surrounding prose is ignored: the first well-formed JSON object is taken
/// as the envelope. Action ids are assigned in array order starting at
/// `first_id`.
pub fn parse_decision(text: &str, max_parallel: usize, first_id: u64) -> Result<Decision, ParseError> {
    let (value, span) = first_json_object(text).ok_or_else(|| ParseError {
        message: "no JSON object found".into(),
        span: 0..text.len(),
        validation: None,
    })?;
    let fail = |message: String, validation: Option<ValidationError>| ParseError {
        message,
        span: span.clone(),
        validation,
    };
    let raw: RawEnvelope =
        serde_json::from_value(value).map_err(|e| fail(format!("bad envelope: {e}"), None))?;
    if let Some(v) = &raw.version {
        if v != ENVELOPE_VERSION {
            return Err(fail(format!("unsupported envelope version {v:?}"), None));
        }
    }
    match raw.kind.as_str() {
        "finalize" => {
            if raw.actions.as_ref().is_some_and(|a| !a.is_empty()) {
                return Err(fail("finalize must not carry actions".into(), None));
            }
            Ok(Decision::Finalize {
                poi_hint: raw.poi_hint,
                cites: raw.cites,
            })
        }
        "batch" => {
            let raw_actions = raw.actions.unwrap_or_default();
            if raw_actions.is_empty() || raw_actions.len() > max_parallel {
                return Err(fail(
                    format!(
                        "batch of {} actions, expected 1..={max_parallel}",
                        raw_actions.len()
                    ),
                    None,
                ));
            }
            let mut actions = Vec::with_capacity(raw_actions.len());
            for (i, ra) in raw_actions.into_iter().enumerate() {
                let mut args = BTreeMap::new();
                for (k, v) in ra.args {
                    let s = match v {
                        serde_json::Value::String(s) => s,
                        serde_json::Value::Number(n) => n.to_string(),
                        other => {
                            return Err(fail(
                                format!("action {}: argument {k:?} must be a string, got {other}", i + 1),
                                None,
                            ))
                        }
                    };
                    args.insert(k, s);
                }
                let action = ProbeAction {
                    id: ActionId(first_id + i as u64),
                    module: ra.module,
                    tool: ra.tool,
                    args,
                    rationale: ra.rationale,
                };
                validate_action(&action).map_err(|e| {
                    fail(format!("action {}: {e}", i + 1), Some(e))
                })?;
                actions.push(action);
            }
            Ok(Decision::Batch { actions })
        }
        other => Err(fail(format!("unknown decision type {other:?}"), None)),
    }
}

/// Prompt-facing description of the action space. Deterministic; changes to
/// the output are versioned through [`ENVELOPE_VERSION`].
pub fn render_action_schema() -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ACTION SCHEMA {ENVELOPE_VERSION}");
    let _ = writeln!(out);
    let _ = writeln!(out, "Capability modules:");
    for m in CapabilityModule::ALL {
        let tools: Vec<&str> = module_tools(m).iter().map(|t| t.as_str()).collect();
        let _ = writeln!(out, "- {}: {}", m, m.purpose());
        let _ = writeln!(out, "  tools: {}", tools.join(", "));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Atomic tools:");
    for t in AtomicTool::ALL {
        let args: Vec<String> = arg_schema(t)
            .iter()
            .map(|a| {
                format!(
                    "{}: {}{}",
                    a.name,
                    a.kind,
                    if a.required { "" } else { " (optional)" }
                )
            })
            .collect();
        let _ = writeln!(out, "- {}({}): {}", t, args.join(", "), t.purpose());
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Argument kinds:");
    let _ = writeln!(out, "- text: non-empty string");
    let _ = writeln!(out, "- region-id: gazetteer region identifier [A-Za-z0-9_.:-]+");
    let _ = writeln!(out, "- image-ref: reference to the query image or a crop of it");
    let _ = writeln!(out, "- bounding-box: \"x,y,w,h\" with non-negative numbers and w,h > 0");
    let _ = writeln!(out, "- count: integer in 1..=100");
    let _ = writeln!(out);
    let _ = writeln!(out, "Permitted module/tool pairs:");
    for m in CapabilityModule::ALL {
        for t in module_tools(m) {
            let _ = writeln!(out, "  {m}/{t}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(module: CapabilityModule, tool: AtomicTool, args: &[(&'static str, &str)]) -> ProbeAction {
        ProbeAction::new(
            1,
            module,
            tool,
            args.iter().map(|(k, v)| (*k, v.to_string())),
            "",
        )
    }

    #[test]
    fn composition_map_membership() {
        let map = composition_map();
        assert!(map[&CapabilityModule::Environmental].contains(&AtomicTool::Caption));
        assert!(!map[&CapabilityModule::ImageMatching].contains(&AtomicTool::Ocr));
        let all: BTreeSet<_> = map.values().flatten().copied().collect();
        assert_eq!(all.len(), AtomicTool::ALL.len());
        assert!(map.values().all(|s| !s.is_empty()));
    }

    #[test]
    fn validation_codes() {
        use AtomicTool::*;
        use CapabilityModule::*;
        assert_eq!(
            validate_action(&act(SemanticSymbol, Ocr, &[("image_ref", "img"), ("bbox", "0,0,10,10")])),
            Ok(())
        );
        assert_eq!(
            validate_action(&act(Environmental, Ocr, &[("image_ref", "img")]))
                .unwrap_err()
                .code(),
            "ModuleToolMismatch"
        );
        assert_eq!(
            validate_action(&act(SemanticSymbol, TextSearch, &[])),
            Err(ValidationError::MissingArg("query".into()))
        );
        assert_eq!(
            validate_action(&act(SemanticSymbol, Geocode, &[("name", "x"), ("lang", "zh")])),
            Err(ValidationError::UnknownArg("lang".into()))
        );
        let bad = validate_action(&act(ImageMatching, Crop, &[("image_ref", "img"), ("bbox", "0,0,0,5")]));
        assert_eq!(bad.unwrap_err().code(), "BadArgKind");
        let bad = validate_action(&act(Environmental, TextSearch, &[("query", "x"), ("top_k", "zero")]));
        assert_eq!(bad.unwrap_err().code(), "BadArgKind");
        let bad = validate_action(&act(SemanticSymbol, KnowledgeBase, &[("query", "x"), ("region_scope", "a b")]));
        assert_eq!(bad.unwrap_err().code(), "BadArgKind");
    }

    #[test]
    fn parse_finalize_and_batch() {
        assert_eq!(parse_decision(r#"{"type":"finalize"}"#, 4, 1), Ok(Decision::finalize()));

        let text = r#"{"version":"v1","type":"batch","actions":[
            {"module":"semantic_symbol","tool":"ocr","args":{"image_ref":"img"}},
            {"module":"infrastructure","tool":"caption","args":{"image_ref":"img"},"rationale":"bridge"}]}"#;
        let Decision::Batch { actions } = parse_decision(text, 4, 1).unwrap() else {
            panic!("expected batch");
        };
        assert_eq!(actions.iter().map(|a| a.id.0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(actions[1].rationale, "bridge");
    }

    #[test]
    fn parse_tolerates_prose_and_reports_spans() {
        let bare = r#"{"type":"batch","actions":[{"module":"environmental","tool":"text_search","args":{"query":"karst","top_k":5}}]}"#;
        let wrapped = format!("Thinking about {{this}}... here you go:\n{bare}\nDone {{ }}.");
        assert_eq!(parse_decision(&wrapped, 4, 7), parse_decision(bare, 4, 7));

        let bad = "ok: {\"type\":\"batch\",\"actions\":[{\"module\":\"environmental\",\"tool\":\"ocr\",\"args\":{\"image_ref\":\"i\"}}]} end";
        let err = parse_decision(bad, 4, 1).unwrap_err();
        assert_eq!(&bad[err.span.clone()], &bad[4..bad.len() - 4]);
        assert_eq!(err.validation.unwrap().code(), "ModuleToolMismatch");

        assert!(parse_decision("no json here", 4, 1).is_err());
        assert!(parse_decision(r#"{"type":"batch","actions":[]}"#, 4, 1).is_err());
        assert!(parse_decision(r#"{"type":"launch"}"#, 4, 1).is_err());
        assert!(parse_decision(r#"{"version":"v2","type":"finalize"}"#, 4, 1).is_err());
    }

    #[test]
    fn envelope_round_trip() {
        let d = Decision::Batch {
            actions: vec![act(
                CapabilityModule::ImageMatching,
                AtomicTool::ImageSearch,
                &[("image_ref", "img"), ("top_k", "5")],
            )],
        };
        let text = d.to_envelope().to_string();
        assert_eq!(parse_decision(&text, 4, 1).unwrap(), d);

        let f = Decision::Finalize {
            poi_hint: Some(PoiHint {
                point: GeoPoint::new(31.2, 121.5).unwrap(),
                city: "Shanghai".into(),
            }),
            cites: vec![3, 4],
        };
        assert_eq!(parse_decision(&f.to_envelope().to_string(), 4, 1).unwrap(), f);
    }

    #[test]
    fn repetition_key_canonicalizes_text() {
        let a = act(CapabilityModule::SemanticSymbol, AtomicTool::TextSearch, &[("query", " Lotus  Tea ")]);
        let b = act(CapabilityModule::SemanticSymbol, AtomicTool::TextSearch, &[("query", "lotus tea")]);
        let c = act(CapabilityModule::SemanticSymbol, AtomicTool::TextSearch, &[("query", "lotus cafe")]);
        assert_eq!(a.repetition_key(), b.repetition_key());
        assert_ne!(a.repetition_key(), c.repetition_key());
    }
}
