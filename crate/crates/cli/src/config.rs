use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use geoprobe::action::AtomicTool;
use geoprobe::agent::AgentConfig;
use geoprobe::canon::canonical_hash;
use geoprobe::executor::live::{live_adapters, Endpoint, RetryPolicy};
use geoprobe::executor::{AblationConfig, AdapterSet, EvidenceExtractor, TagTable};
use geoprobe::geo::Gazetteer;
use geoprobe::reasoner::{scripted_salience_policy, LlmBackend, ReasonerBackend};
use geoprobe::synth::{SceneDescriptor, SynthTools, SynthWorld};
use serde::{Deserialize, Serialize};

/// Token variable used by the LLM backend when the config names none.
pub const DEFAULT_TOKEN_ENV: &str = "GEOPROBE_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReasonerConfig {
    Scripted,
    Llm {
        endpoint: Endpoint,
        model: String,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToolsConfig {
    /// Answers from the configured world; descriptor inputs only.
    Synthetic,
    Live {
        endpoints: BTreeMap<AtomicTool, Endpoint>,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

/// One JSON document. Secrets never live here: endpoints name the
/// environment variable that holds their token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic world file; supplies gazetteer and tag table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gazetteer: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_table: Option<PathBuf>,
    pub reasoner: ReasonerConfig,
    pub tools: ToolsConfig,
    #[serde(default)]
    pub disabled_tools: Vec<AtomicTool>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_budget")]
    pub context_budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_max_steps() -> u64 {
    AgentConfig::default().max_steps
}

fn default_max_parallel() -> usize {
    AgentConfig::default().max_parallel
}

fn default_budget() -> usize {
    AgentConfig::default().context_budget
}

fn default_workers() -> usize {
    4
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn scripted_synthetic(world: PathBuf) -> Self {
        RunConfig {
            world: Some(world),
            gazetteer: None,
            tag_table: None,
            reasoner: ReasonerConfig::Scripted,
            tools: ToolsConfig::Synthetic,
            disabled_tools: Vec::new(),
            max_steps: default_max_steps(),
            max_parallel: default_max_parallel(),
            context_budget: default_budget(),
            seed: 0,
            workers: default_workers(),
            out_dir: default_out(),
        }
    }

    /// Reads and validates; relative paths resolve against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.world, &mut cfg.gazetteer, &mut cfg.tag_table].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            bail!("max_steps must be at least 1");
        }
        if self.max_parallel < 1 {
            bail!("max_parallel must be at least 1");
        }
        if self.workers < 1 {
            bail!("workers must be at least 1");
        }
        match (&self.world, &self.gazetteer) {
            (None, None) => bail!("config needs either `world` or `gazetteer`"),
            (Some(_), Some(_)) => bail!("`world` and `gazetteer` are mutually exclusive"),
            _ => {}
        }
        for p in [&self.world, &self.gazetteer, &self.tag_table].into_iter().flatten() {
            if !p.is_file() {
                bail!("file not found: {}", p.display());
            }
        }
        if self.tools == ToolsConfig::Synthetic && self.world.is_none() {
            bail!("synthetic tools need a `world` file");
        }
        if let ToolsConfig::Live { endpoints, .. } = &self.tools {
            if endpoints.is_empty() {
                bail!("live tools need at least one endpoint");
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig::without(self.disabled_tools.iter().copied())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            max_steps: self.max_steps,
            max_parallel: self.max_parallel,
            context_budget: self.context_budget,
            ablation: self.ablation(),
        }
    }

    pub fn backend(&self) -> Box<dyn ReasonerBackend> {
        match &self.reasoner {
            ReasonerConfig::Scripted => Box::new(scripted_salience_policy()),
            ReasonerConfig::Llm { endpoint, model, retry } => {
                let mut ep = endpoint.clone();
                ep.token_env.get_or_insert_with(|| DEFAULT_TOKEN_ENV.to_string());
                Box::new(LlmBackend::new(ep, model.clone(), *retry))
            }
        }
    }
}

/// Loaded geography plus how to build adapters for a set of descriptors.
pub struct Environment {
    pub world: Option<Arc<SynthWorld>>,
    pub gazetteer: Gazetteer,
    pub extractor: EvidenceExtractor,
}

impl Environment {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        if let Some(path) = &cfg.world {
            let world = SynthWorld::load(path).with_context(|| format!("loading world {}", path.display()))?;
            let table = match &cfg.tag_table {
                Some(p) => TagTable::load(p).map_err(anyhow::Error::msg)?,
                None => world.tag_table(),
            };
            return Ok(Environment {
                gazetteer: world.gazetteer.clone(),
                extractor: EvidenceExtractor::new(table),
                world: Some(Arc::new(world)),
            });
        }
        let path = cfg.gazetteer.as_ref().expect("validated");
        let gazetteer = Gazetteer::load(path).with_context(|| format!("loading gazetteer {}", path.display()))?;
        let table = match &cfg.tag_table {
            Some(p) => TagTable::load(p).map_err(anyhow::Error::msg)?,
            None => TagTable::new([]),
        };
        let unknown = table.unknown_regions(&gazetteer);
        if !unknown.is_empty() {
            bail!("tag table names regions missing from the gazetteer: {unknown:?}");
        }
        Ok(Environment { world: None, gazetteer, extractor: EvidenceExtractor::new(table) })
    }

    pub fn adapters(&self, cfg: &RunConfig, scenes: BTreeMap<String, SceneDescriptor>) -> AdapterSet {
        match &cfg.tools {
            ToolsConfig::Synthetic => SynthTools::new(Arc::clone(self.world.as_ref().expect("validated")), scenes).adapters(),
            ToolsConfig::Live { endpoints, retry } => live_adapters(endpoints, *retry),
        }
    }
}
