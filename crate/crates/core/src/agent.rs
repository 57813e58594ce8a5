//! The episode loop (decide, execute, extract, project, record) and the
//! benchmark runner that fans episodes out over a worker pool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Decision, DEFAULT_MAX_PARALLEL};
use crate::eval::{self, BenchmarkSample, Media};
use crate::executor::{execute_batch, AblationConfig, AdapterSet, EvidenceExtractor};
use crate::geo::Gazetteer;
use crate::reasoner::{decide_next, FrontierEntry, PlannerContext, ReasonerBackend, DEFAULT_MAX_STEPS};
use crate::recorder::{
    self, BacktrackPayload, DecisionPayload, ErrorPayload, EventKind, ExecutionPayload, FinalizePayload,
    ProjectionPayload, Recorder, RecorderError, Trace, TraceHeader, DEFAULT_CONTEXT_BUDGET,
};
use crate::state::{CandidateSpace, EpisodeState, EpisodeStatus, Prediction};
use crate::synth::Clue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_steps: u64,
    pub max_parallel: usize,
    pub context_budget: usize,
    pub ablation: AblationConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_steps: DEFAULT_MAX_STEPS,
            max_parallel: DEFAULT_MAX_PARALLEL,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            ablation: AblationConfig::default(),
        }
    }
}

/// What the agent is asked to locate.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInput {
    pub episode_id: String,
    pub image_ref: String,
    /// Visible descriptor clues; empty for real images.
    pub clues: Vec<Clue>,
}

impl EpisodeInput {
    /// Descriptor samples are addressed by their id, image samples by path.
    /// The descriptor's truth is never passed on.
    pub fn from_sample(s: &BenchmarkSample) -> Self {
        match &s.media {
            Media::ImagePath(p) => EpisodeInput {
                episode_id: s.id.clone(),
                image_ref: p.clone(),
                clues: Vec::new(),
            },
            Media::Descriptor(d) => EpisodeInput {
                episode_id: s.id.clone(),
                image_ref: s.id.clone(),
                clues: d.clues.clone(),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Recorder(#[from] RecorderError),
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub state: EpisodeState,
    pub prediction: Option<Prediction>,
    pub trace: Trace,
    pub trace_path: Option<PathBuf>,
    pub decisions: u64,
}

impl EpisodeOutcome {
    pub fn status(&self) -> EpisodeStatus {
        self.state.status
    }
}

/// Everything an episode needs besides its input.
pub struct Agent<'a> {
    pub gazetteer: &'a Gazetteer,
    pub backend: &'a dyn ReasonerBackend,
    pub adapters: &'a AdapterSet,
    pub extractor: &'a EvidenceExtractor,
    pub config: &'a AgentConfig,
}

fn leaf_count(space: &CandidateSpace, g: &Gazetteer) -> usize {
    space.leaf_cover(g).len()
}

impl Agent<'_> {
    pub fn header(&self, episode_id: &str, config_hash: &str) -> TraceHeader {
        TraceHeader::new(episode_id, self.gazetteer.content_hash(), config_hash)
    }

    fn context(&self, input: &EpisodeInput, state: &EpisodeState, rec: &Recorder, decisions: u64, stalled: u64) -> Result<PlannerContext, AgentError> {
        let g = self.gazetteer;
        let history = recorder::compress(rec.events(), g, self.config.context_budget)?;
        let step = decisions + 1;
        let next_action_id = rec
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::Decision)
            .filter_map(|e| serde_json::from_value::<DecisionPayload>(e.payload.clone()).ok())
            .filter_map(|p| match p.decision {
                Decision::Batch { actions } => actions.iter().map(|a| a.id.0).max(),
                Decision::Finalize { .. } => None,
            })
            .max()
            .map_or(1, |m| m + 1);
        Ok(PlannerContext {
            image_ref: input.image_ref.clone(),
            clues: input.clues.clone(),
            compressed_history: if rec.events().is_empty() { String::new() } else { history.render() },
            candidate_summary: state.space.describe(g),
            schema_text: crate::action::render_action_schema(),
            step,
            remaining_steps: self.config.max_steps.saturating_sub(step),
            is_global: state.space.is_global,
            frontier: state
                .space
                .frontier
                .iter()
                .filter_map(|id| g.get(id))
                .map(|r| FrontierEntry {
                    id: r.id.clone(),
                    name: r.name.clone(),
                    level: r.level,
                })
                .collect(),
            stalled_steps: stalled,
            poi_hint: state.anchored_hint(g),
            active_evidence: state.active_evidence().map(|e| e.id.0).collect(),
            executed: recorder::executed_keys(rec.events()),
            enabled_tools: self.config.ablation.enabled_tools.clone(),
            next_action_id,
            max_parallel: self.config.max_parallel,
            repetition_warning: false,
        })
    }

    /// Finalizes if the state supports an answer, otherwise marks the
    /// episode exhausted. Either way the outcome is recorded.
    fn conclude(
        &self,
        state: &mut EpisodeState,
        rec: &mut Recorder,
        step: u64,
        poi_hint: Option<crate::action::PoiHint>,
    ) -> Result<Option<Prediction>, AgentError> {
        let mut trial = state.clone();
        match trial.finalize(self.gazetteer, poi_hint.as_ref()) {
            Ok(prediction) => {
                *state = trial;
                rec.append(step, EventKind::Finalize, &FinalizePayload { prediction: prediction.clone(), poi_hint }, state)?;
                Ok(Some(prediction))
            }
            Err(e) => {
                state.mark_exhausted();
                rec.append(step, EventKind::Error, &ErrorPayload { message: e.to_string(), exhausted: true }, state)?;
                Ok(None)
            }
        }
    }

    /// Runs one episode to Finalized or Exhausted, recording every event
    /// before the next decision is requested.
    pub fn run_episode(&self, input: &EpisodeInput, mut rec: Recorder) -> Result<EpisodeOutcome, AgentError> {
        let g = self.gazetteer;
        let mut state = EpisodeState::new();
        let mut decisions = 0u64;
        let mut stalled = 0u64;
        let prediction = loop {
            let ctx = self.context(input, &state, &rec, decisions, stalled)?;
            let step = ctx.step;
            let outcome = match decide_next(self.backend, &ctx) {
                Ok(o) => o,
                Err(unavailable) => {
                    rec.append(step, EventKind::Error, &ErrorPayload { message: unavailable.to_string(), exhausted: false }, &state)?;
                    break self.conclude(&mut state, &mut rec, step, None)?;
                }
            };
            decisions += 1;
            rec.append(
                step,
                EventKind::Decision,
                &DecisionPayload {
                    decision: outcome.decision.clone(),
                    exchanges: outcome.exchanges,
                    forced: outcome.forced,
                },
                &state,
            )?;
            let actions = match outcome.decision {
                Decision::Finalize { poi_hint, .. } => break self.conclude(&mut state, &mut rec, step, poi_hint)?,
                Decision::Batch { actions } => actions,
            };
            let results = execute_batch(&actions, self.adapters, &self.config.ablation);
            rec.append(step, EventKind::Execution, &ExecutionPayload { results: results.clone() }, &state)?;

            let mut next_id = state.next_evidence_id().0;
            let mut evidence = Vec::new();
            for r in &results {
                match self.extractor.extract(r, g, &mut next_id) {
                    Ok(ev) => evidence.extend(ev),
                    Err(e) => {
                        let message = format!("evidence from action {}: {e}", r.action_id);
                        rec.append(step, EventKind::Error, &ErrorPayload { message, exhausted: false }, &state)?;
                    }
                }
            }
            let before = leaf_count(&state.space, g);
            let report = match state.apply_evidence(evidence.clone(), g) {
                Ok(r) => r,
                Err(e) => {
                    rec.append(step, EventKind::Error, &ErrorPayload { message: e.to_string(), exhausted: false }, &state)?;
                    break self.conclude(&mut state, &mut rec, step, None)?;
                }
            };
            rec.append(
                step,
                EventKind::Projection,
                &ProjectionPayload {
                    evidence,
                    discarded: report.discarded.clone(),
                    reverted_to_global: report.reverted_to_global,
                    space: state.space.clone(),
                },
                &state,
            )?;
            if !report.discarded.is_empty() {
                rec.append(step, EventKind::Backtrack, &BacktrackPayload::from(&report), &state)?;
            }
            stalled = if leaf_count(&state.space, g) < before { 0 } else { stalled + 1 };
        };
        Ok(EpisodeOutcome {
            prediction,
            trace: rec.trace(),
            trace_path: rec.path().map(Path::to_path_buf),
            state,
            decisions,
        })
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub sample_id: String,
    pub status: EpisodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BenchEntry {
    /// Metric input for finalized entries.
    pub fn prediction(&self) -> Option<eval::Prediction> {
        let point = crate::geo::GeoPoint::new(self.lat?, self.lon?).ok()?;
        Some(eval::Prediction {
            sample_id: self.sample_id.clone(),
            point,
            city_name: self.city_name.clone(),
            trace_ref: self.trace_ref.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    /// In dataset order.
    pub entries: Vec<BenchEntry>,
}

impl BenchOutcome {
    pub fn predictions(&self) -> Vec<eval::Prediction> {
        self.entries.iter().filter_map(BenchEntry::prediction).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

/// Runs every sample on a pool of `workers` threads. A failing episode
/// becomes an exhausted entry; the run continues.
pub fn run_benchmark(
    agent: &Agent<'_>,
    samples: &[BenchmarkSample],
    config_hash: &str,
    trace_dir: Option<&Path>,
    workers: usize,
) -> BenchOutcome {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool");
    let entries = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let input = EpisodeInput::from_sample(s);
                let header = agent.header(&input.episode_id, config_hash);
                let rec = match trace_dir {
                    Some(dir) => Recorder::create(dir, header),
                    None => Ok(Recorder::in_memory(header)),
                };
                let run = rec.map_err(AgentError::from).and_then(|rec| agent.run_episode(&input, rec));
                let trace_ref = trace_dir.map(|_| format!("traces/{}", recorder::trace_file_name(&s.id)));
                match run {
                    Ok(o) => BenchEntry {
                        sample_id: s.id.clone(),
                        status: o.status(),
                        lat: o.prediction.as_ref().map(|p| p.point.lat()),
                        lon: o.prediction.as_ref().map(|p| p.point.lon()),
                        city_name: o.prediction.as_ref().map(|p| p.city_name.clone()),
                        trace_ref,
                        error: None,
                    },
                    Err(e) => BenchEntry {
                        sample_id: s.id.clone(),
                        status: EpisodeStatus::Exhausted,
                        lat: None,
                        lon: None,
                        city_name: None,
                        trace_ref,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    BenchOutcome { entries }
}

/// Synthetic adapters with every descriptor sample registered under its id.
pub fn synth_tools_for(world: std::sync::Arc<crate::synth::SynthWorld>, samples: &[BenchmarkSample]) -> crate::synth::SynthTools {
    let scenes = samples
        .iter()
        .filter_map(|s| match &s.media {
            Media::Descriptor(d) => Some((s.id.clone(), d.clone())),
            Media::ImagePath(_) => None,
        })
        .collect();
    crate::synth::SynthTools::new(world, scenes)
}
