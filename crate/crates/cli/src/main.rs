//! `geoprobe`: run episodes, benchmarks, replays and synthetic worlds.
//!
//! Exit codes: 0 ok, 2 config or input error, 3 exhausted episode,
//! 4 replay mismatch.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{Environment, RunConfig};
use geoprobe::agent::{run_benchmark, Agent, EpisodeInput};
use geoprobe::eval::{self, evaluate, render_json, render_text, BenchmarkSample, Media, DEFAULT_THRESHOLDS_KM};
use geoprobe::geo::Gazetteer;
use geoprobe::recorder::{replay_with, EventKind, Recorder, ReplayError, Trace};
use geoprobe::state::EpisodeStatus;
use geoprobe::synth::{mix_counts, SceneDescriptor, SynthWorld};

const DEFAULT_MIX: &str = "0.2333,0.5667,0.2";

#[derive(Parser)]
#[command(name = "geoprobe", version, about = "Evidence-driven image geolocation agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Locate one image or synthetic descriptor.
    Run {
        /// Image path or descriptor JSON file.
        input: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Take the input from a dataset instead (with --sample).
        #[arg(long, requires = "sample")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        sample: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every sample of a dataset and write predictions, traces and a report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-derive every state hash of a trace.
    Replay {
        trace: PathBuf,
        /// Config whose world or gazetteer the trace was recorded against.
        #[arg(long, conflicts_with_all = ["world", "gazetteer"])]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "gazetteer")]
        world: Option<PathBuf>,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
    },
    /// Generate a synthetic world, a descriptor dataset and a starter config.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        provinces: usize,
        #[arg(long, default_value_t = 5)]
        cities: usize,
        #[arg(long, default_value_t = 300)]
        samples: usize,
        /// Easy,Medium,Hard fractions; must sum to 1.
        #[arg(long, default_value = DEFAULT_MIX)]
        mix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Fail {
    Input(anyhow::Error),
    Exhausted,
    Mismatch(String),
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        Fail::Input(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { input, config, dataset, sample, out } => cmd_run(input, &config, dataset.zip(sample), out),
        Cmd::Bench { config, dataset, out, workers } => cmd_bench(&config, &dataset, out, workers),
        Cmd::Replay { trace, config, world, gazetteer } => cmd_replay(&trace, config, world, gazetteer),
        Cmd::Synth { seed, provinces, cities, samples, mix, out } => cmd_synth(seed, provinces, cities, samples, &mix, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Fail::Exhausted) => ExitCode::from(3),
        Err(Fail::Mismatch(msg)) => {
            eprintln!("replay mismatch: {msg}");
            ExitCode::from(4)
        }
    }
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn episode_input(input: Option<PathBuf>, from_dataset: Option<(PathBuf, String)>) -> Result<(EpisodeInput, Option<SceneDescriptor>)> {
    if let Some((path, id)) = from_dataset {
        let samples = eval::load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))?;
        let s = samples.into_iter().find(|s| s.id == id).ok_or_else(|| anyhow!("sample {id} not in {}", path.display()))?;
        let scene = match &s.media {
            Media::Descriptor(d) => Some(d.clone()),
            Media::ImagePath(_) => None,
        };
        return Ok((EpisodeInput::from_sample(&s), scene));
    }
    let path = input.ok_or_else(|| anyhow!("give an input file or --dataset with --sample"))?;
    if !path.is_file() {
        bail!("input not found: {}", path.display());
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "episode".into());
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let text = std::fs::read_to_string(&path)?;
        let scene: SceneDescriptor = serde_json::from_str(&text).with_context(|| format!("parsing descriptor {}", path.display()))?;
        let input = EpisodeInput { episode_id: id.clone(), image_ref: id, clues: scene.clues.clone() };
        return Ok((input, Some(scene)));
    }
    Ok((
        EpisodeInput { episode_id: id, image_ref: path.to_string_lossy().into_owned(), clues: Vec::new() },
        None,
    ))
}

fn cmd_run(input: Option<PathBuf>, config: &Path, from_dataset: Option<(PathBuf, String)>, out: Option<PathBuf>) -> Result<(), Fail> {
    let cfg = load_config(config, out)?;
    let env = Environment::load(&cfg)?;
    let (input, scene) = episode_input(input, from_dataset)?;
    if cfg.tools == config::ToolsConfig::Synthetic && scene.is_none() {
        return Err(anyhow!("synthetic tools can only answer descriptor inputs").into());
    }
    let scenes: BTreeMap<String, SceneDescriptor> = scene.into_iter().map(|s| (input.image_ref.clone(), s)).collect();
    let adapters = env.adapters(&cfg, scenes);
    let backend = cfg.backend();
    let agent_cfg = cfg.agent_config();
    let agent = Agent {
        gazetteer: &env.gazetteer,
        backend: backend.as_ref(),
        adapters: &adapters,
        extractor: &env.extractor,
        config: &agent_cfg,
    };
    let trace_dir = cfg.out_dir.join("traces");
    std::fs::create_dir_all(&trace_dir).with_context(|| format!("creating {}", trace_dir.display()))?;
    let rec = Recorder::create(&trace_dir, agent.header(&input.episode_id, &cfg.hash())).map_err(anyhow::Error::from)?;
    let outcome = agent.run_episode(&input, rec).map_err(anyhow::Error::from)?;
    let line = serde_json::json!({
        "episode_id": input.episode_id,
        "status": outcome.status(),
        "lat": outcome.prediction.as_ref().map(|p| p.point.lat()),
        "lon": outcome.prediction.as_ref().map(|p| p.point.lon()),
        "city": outcome.prediction.as_ref().map(|p| p.city_name.clone()),
        "trace": outcome.trace_path.as_ref().map(|p| p.display().to_string()),
    });
    println!("{line}");
    match outcome.status() {
        EpisodeStatus::Exhausted => Err(Fail::Exhausted),
        _ => Ok(()),
    }
}

fn cmd_bench(config: &Path, dataset: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<(), Fail> {
    let cfg = load_config(config, out)?;
    let env = Environment::load(&cfg)?;
    let samples: Vec<BenchmarkSample> =
        eval::load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    if samples.is_empty() {
        return Err(anyhow!("{}: {}", dataset.display(), eval::EvalError::EmptyDataset).into());
    }
    let scenes: BTreeMap<String, SceneDescriptor> = samples
        .iter()
        .filter_map(|s| match &s.media {
            Media::Descriptor(d) => Some((s.id.clone(), d.clone())),
            Media::ImagePath(_) => None,
        })
        .collect();
    let adapters = env.adapters(&cfg, scenes);
    let backend = cfg.backend();
    let agent_cfg = cfg.agent_config();
    let agent = Agent {
        gazetteer: &env.gazetteer,
        backend: backend.as_ref(),
        adapters: &adapters,
        extractor: &env.extractor,
        config: &agent_cfg,
    };
    let trace_dir = cfg.out_dir.join("traces");
    std::fs::create_dir_all(&trace_dir).with_context(|| format!("creating {}", trace_dir.display()))?;
    let outcome = run_benchmark(&agent, &samples, &cfg.hash(), Some(&trace_dir), workers.unwrap_or(cfg.workers));

    let report = evaluate(&cfg.ablation().condition_label(), &outcome.predictions(), &samples, &env.gazetteer, &DEFAULT_THRESHOLDS_KM)
        .map_err(anyhow::Error::from)?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = cfg.out_dir.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("predictions.jsonl", &outcome.to_jsonl())?;
    write("report.json", &render_json(&report))?;
    let text = render_text(&report);
    write("report.txt", &text)?;
    print!("{text}");
    let exhausted = outcome.entries.iter().filter(|e| e.status == EpisodeStatus::Exhausted).count();
    if exhausted > 0 {
        eprintln!("{exhausted} of {} episodes exhausted", samples.len());
    }
    Ok(())
}

fn replay_gazetteer(config: Option<PathBuf>, world: Option<PathBuf>, gazetteer: Option<PathBuf>) -> Result<Gazetteer> {
    if let Some(c) = config {
        return Ok(Environment::load(&RunConfig::load(&c)?)?.gazetteer);
    }
    if let Some(w) = world {
        return Ok(SynthWorld::load(&w).with_context(|| format!("loading world {}", w.display()))?.gazetteer);
    }
    if let Some(g) = gazetteer {
        return Gazetteer::load(&g).with_context(|| format!("loading gazetteer {}", g.display()));
    }
    bail!("replay needs --config, --world or --gazetteer")
}

fn cmd_replay(trace: &Path, config: Option<PathBuf>, world: Option<PathBuf>, gazetteer: Option<PathBuf>) -> Result<(), Fail> {
    let g = replay_gazetteer(config, world, gazetteer)?;
    let t = Trace::load(trace).with_context(|| format!("reading trace {}", trace.display()))?;
    println!("trace {} ({} events)", t.header.episode_id, t.events.len());
    let res = replay_with(&t, &g, |e, st| {
        let kind = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let extra = match e.kind {
            EventKind::Projection | EventKind::Backtrack => format!(" space: {}", st.space.describe(&g)),
            _ => String::new(),
        };
        println!("seq {:>3} step {:>2} {kind:<10} ok{extra}", e.seq, e.step);
    });
    match res {
        Ok(st) => {
            let active: Vec<String> = st.active_evidence().map(|e| e.id.to_string()).collect();
            println!("final: status {:?}, space {}, active evidence [{}]", st.status, st.space.describe(&g), active.join(", "));
            println!("verdict: OK");
            Ok(())
        }
        Err(e @ ReplayError::GazetteerMismatch { .. }) => Err(Fail::Input(e.into())),
        Err(e) => {
            println!("verdict: MISMATCH ({e})");
            Err(Fail::Mismatch(e.to_string()))
        }
    }
}

fn parse_mix(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad mix value {p:?}")))
        .collect::<Result<_>>()?;
    let [e, m, h] = parts[..] else {
        bail!("mix needs three values (easy,medium,hard), got {}", parts.len());
    };
    if parts.iter().any(|v| !(0.0..=1.0).contains(v)) || ((e + m + h) - 1.0).abs() > 1e-6 {
        bail!("mix {s:?} must be three fractions in [0, 1] summing to 1");
    }
    Ok([e, m, h])
}

fn cmd_synth(seed: u64, provinces: usize, cities: usize, n: usize, mix: &str, out: &Path) -> Result<(), Fail> {
    let mix = parse_mix(mix)?;
    let world = SynthWorld::generate(seed, provinces, cities).map_err(|e| anyhow!("{e}"))?;
    let samples = world.benchmark(seed, n, mix);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("world.json"), world.to_json()).context("writing world.json")?;
    eval::write_dataset(&out.join("synth.bench.jsonl"), &samples).context("writing synth.bench.jsonl")?;
    let cfg = RunConfig { seed, ..RunConfig::scripted_synthetic(PathBuf::from("world.json")) };
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(out.join("config.json"), text + "\n").context("writing config.json")?;
    let [e, m, h] = mix_counts(n, mix);
    println!(
        "wrote {}: world.json ({} regions), synth.bench.jsonl ({n} samples: {e} easy, {m} medium, {h} hard), config.json",
        out.display(),
        world.gazetteer.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix(DEFAULT_MIX).unwrap(), [0.2333, 0.5667, 0.2]);
        assert_eq!(parse_mix(" 1, 0 ,0").unwrap(), [1.0, 0.0, 0.0]);
        assert!(parse_mix("0.5,0.5").is_err());
        assert!(parse_mix("0.5,0.5,0.1").is_err());
        assert!(parse_mix("1.5,-0.5,0").is_err());
        assert!(parse_mix("a,b,c").is_err());
    }

    #[test]
    fn cli_shape_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
