//! Tool execution: adapters, ablation, batch fan-out and evidence extraction.
//!
//! Every failure is an in-band [`ToolResult`]; nothing here returns an error
//! to the agent loop except extraction against a misconfigured gazetteer.

mod extract;
pub mod live;
pub mod stub;

pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::action::{ActionId, AtomicTool, ProbeAction};
use crate::canon;
use crate::geo::{GeoPoint, RegionId};

pub use extract::{EvidenceExtractor, TagTable, CAPTION_CONFIDENCE, NAMED_REGION_CONFIDENCE, SEARCH_HIT_CONFIDENCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    ToolError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrSpan {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbRecord {
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<RegionId>,
    #[serde(default)]
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    #[serde(default)]
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinates: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<RegionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<GeoPoint>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeocodeHit {
    pub name: String,
    pub point: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<RegionId>,
}

/// Tool-specific structured output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolPayload {
    Caption { text: String, tags: Vec<String> },
    Crop { image_ref: String },
    Ocr { spans: Vec<OcrSpan> },
    KnowledgeBase { records: Vec<KbRecord> },
    Search { hits: Vec<SearchHit> },
    ImageMatch { candidates: Vec<MatchCandidate> },
    Geocode { results: Vec<GeocodeHit> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub action_id: ActionId,
    pub tool: AtomicTool,
    pub status: ToolStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<ToolPayload>,
    pub latency_ms: u64,
    /// Unparseable response body, kept for the trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_body: Option<String>,
}

impl ToolResult {
    pub fn ok(action: &ProbeAction, payload: ToolPayload) -> Self {
        ToolResult {
            action_id: action.id,
            tool: action.tool,
            status: ToolStatus::Ok,
            error: None,
            payload: Some(payload),
            latency_ms: 0,
            raw_body: None,
        }
    }

    pub fn error(action: &ProbeAction, code: impl Into<String>) -> Self {
        ToolResult {
            action_id: action.id,
            tool: action.tool,
            status: ToolStatus::ToolError,
            error: Some(code.into()),
            payload: None,
            latency_ms: 0,
            raw_body: None,
        }
    }

    pub fn timeout(action: &ProbeAction) -> Self {
        ToolResult {
            status: ToolStatus::Timeout,
            error: Some("Timeout".into()),
            ..ToolResult::error(action, "Timeout")
        }
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == ToolStatus::Ok
    }

    /// SHA-256 of the canonical payload, referenced by evidence provenance.
    pub fn payload_sha256(&self) -> String {
        canon::canonical_hash(&self.payload)
    }
}

/// One tool implementation. Implementations must turn every failure into a
/// [`ToolResult`] and be callable from several threads at once.
pub trait ToolAdapter: Send + Sync {
    fn execute(&self, action: &ProbeAction) -> ToolResult;
}

impl<F> ToolAdapter for F
where
    F: Fn(&ProbeAction) -> ToolResult + Send + Sync,
{
    fn execute(&self, action: &ProbeAction) -> ToolResult {
        self(action)
    }
}

/// Tool → adapter routing table.
#[derive(Clone, Default)]
pub struct AdapterSet {
    adapters: BTreeMap<AtomicTool, Arc<dyn ToolAdapter>>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tool: AtomicTool, adapter: Arc<dyn ToolAdapter>) -> &mut Self {
        self.adapters.insert(tool, adapter);
        self
    }

    pub fn with(mut self, tool: AtomicTool, adapter: Arc<dyn ToolAdapter>) -> Self {
        self.insert(tool, adapter);
        self
    }

    pub fn get(&self, tool: AtomicTool) -> Option<&Arc<dyn ToolAdapter>> {
        self.adapters.get(&tool)
    }

    pub fn tools(&self) -> impl Iterator<Item = AtomicTool> + '_ {
        self.adapters.keys().copied()
    }
}

impl std::fmt::Debug for AdapterSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.adapters.keys()).finish()
    }
}

/// Which tools an experiment may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub enabled_tools: BTreeSet<AtomicTool>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            enabled_tools: AtomicTool::ALL.into_iter().collect(),
        }
    }
}

impl AblationConfig {
    pub fn without(tools: impl IntoIterator<Item = AtomicTool>) -> Self {
        let mut cfg = Self::default();
        for t in tools {
            cfg.enabled_tools.remove(&t);
        }
        cfg
    }

    pub fn none() -> Self {
        AblationConfig {
            enabled_tools: BTreeSet::new(),
        }
    }

    pub fn is_enabled(&self, tool: AtomicTool) -> bool {
        self.enabled_tools.contains(&tool)
    }

    pub fn disabled(&self) -> Vec<AtomicTool> {
        AtomicTool::ALL
            .into_iter()
            .filter(|t| !self.enabled_tools.contains(t))
            .collect()
    }

    /// Experiment row label: `all tools` when nothing is disabled,
    /// otherwise `w/o <tools>` (`w/o all tools` when everything is).
    pub fn condition_label(&self) -> String {
        let disabled = self.disabled();
        if disabled.is_empty() {
            "all tools".into()
        } else if self.enabled_tools.is_empty() {
            "w/o all tools".into()
        } else {
            let names: Vec<&str> = disabled.iter().map(|t| t.label()).collect();
            format!("w/o {}", names.join(", "))
        }
    }
}

/// Runs a validated batch. Disabled tools answer `ToolDisabled` without
/// being invoked; the rest run concurrently. Results come back in action-id
/// order regardless of completion order.
pub fn execute_batch(actions: &[ProbeAction], adapters: &AdapterSet, cfg: &AblationConfig) -> Vec<ToolResult> {
    let mut results: Vec<ToolResult> = Vec::with_capacity(actions.len());
    let mut runnable: Vec<(&ProbeAction, Arc<dyn ToolAdapter>)> = Vec::new();
    for a in actions {
        if !cfg.is_enabled(a.tool) {
            results.push(ToolResult::error(a, "ToolDisabled"));
            continue;
        }
        match adapters.get(a.tool) {
            Some(ad) => runnable.push((a, Arc::clone(ad))),
            None => results.push(ToolResult::error(a, "NoAdapter")),
        }
    }
    match runnable.len() {
        0 => {}
        1 => {
            let (a, ad) = &runnable[0];
            results.push(ad.execute(a));
        }
        _ => std::thread::scope(|s| {
            let handles: Vec<_> = runnable
                .iter()
                .map(|(a, ad)| s.spawn(move || ad.execute(a)))
                .collect();
            for (h, (a, _)) in handles.into_iter().zip(&runnable) {
                results.push(h.join().unwrap_or_else(|_| ToolResult::error(a, "AdapterPanicked")));
            }
        }),
    }
    results.sort_by_key(|r| r.action_id);
    results
}
