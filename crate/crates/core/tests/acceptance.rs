//! Acceptance suite: one PASS/FAIL line per criterion. Runs offline; the
//! only network traffic is to a stub server on 127.0.0.1.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use geoprobe::action::{ActionId, AtomicTool};
use geoprobe::agent::{run_benchmark, synth_tools_for, Agent, AgentConfig, EpisodeInput};
use geoprobe::eval::{
    evaluate, latex_city_row, latex_threshold_row, render_json, render_text, threshold_accuracy, BenchmarkSample,
    Metrics, MetricsReport, Percent, Prediction, Strata, DEFAULT_THRESHOLDS_KM,
};
use geoprobe::executor::live::{live_adapters, RetryPolicy};
use geoprobe::executor::stub::StubServer;
use geoprobe::executor::{wire, AblationConfig, EvidenceExtractor};
use geoprobe::geo::{haversine_km, AdminRegion, Gazetteer, GeoPoint, RegionId, RegionLevel};
use geoprobe::reasoner::{scripted_salience_policy, ReasonerBackend};
use geoprobe::recorder::{compress, replay, replay_with, EventKind, ProjectionPayload, Recorder, ReplayError, Trace};
use geoprobe::state::{EpisodeState, Evidence, EvidenceId, Provenance};
use geoprobe::synth::SynthWorld;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

struct Harness {
    world: Arc<SynthWorld>,
    adapters: geoprobe::executor::AdapterSet,
    extractor: EvidenceExtractor,
}

impl Harness {
    fn new(world: Arc<SynthWorld>, samples: Vec<BenchmarkSample>) -> Self {
        let adapters = synth_tools_for(Arc::clone(&world), &samples).adapters();
        let extractor = EvidenceExtractor::new(world.tag_table());
        Harness { world, adapters, extractor }
    }

    fn traces(&self, backend: &dyn ReasonerBackend, config: &AgentConfig, samples: &[BenchmarkSample]) -> Vec<Trace> {
        let agent = Agent {
            gazetteer: &self.world.gazetteer,
            backend,
            adapters: &self.adapters,
            extractor: &self.extractor,
            config,
        };
        samples
            .iter()
            .map(|s| {
                let input = EpisodeInput::from_sample(s);
                let rec = Recorder::in_memory(agent.header(&input.episode_id, "acceptance"));
                agent.run_episode(&input, rec).expect("episode runs").trace
            })
            .collect()
    }
}

fn all_mix() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// 1: leaf cover never grows at a non-backtracking step, each such step
/// equals the leaf-level intersection, and the frontier is an antichain
/// after every event.
fn criterion_1() -> Verdict {
    let start = Instant::now();
    let world = world(101, 5, 4);
    let g = &world.gazetteer;
    let tree = Tree::of(g);
    let all_leaves = tree.leaves();
    let samples = world.benchmark(7, 1000, all_mix());
    let h = Harness::new(Arc::clone(&world), samples.clone());
    let scripted = scripted_salience_policy();
    let cfg = AgentConfig::default();
    let short = AgentConfig { max_steps: 6, ..AgentConfig::default() };

    let mut traces = h.traces(&scripted, &cfg, &samples[..500]);
    for (i, s) in samples[500..].iter().enumerate() {
        let random = RandomBackend::new(&world, 9000 + i as u64);
        traces.extend(h.traces(&random, &short, std::slice::from_ref(s)));
    }

    let (mut checked, mut backtracks) = (0usize, 0usize);
    let mut failures: Vec<String> = Vec::new();
    for t in &traces {
        let mut prev = all_leaves.clone();
        let res = replay_with(t, g, |e, st| {
            let cover = if st.space.is_global { all_leaves.clone() } else { tree.cover(&ids(st.space.frontier.clone())) };
            if !st.space.is_antichain(g) {
                failures.push(format!("{} seq {}: not an antichain", t.header.episode_id, e.seq));
            }
            if st.space.is_contradiction() {
                failures.push(format!("{} seq {}: empty space", t.header.episode_id, e.seq));
            }
            if e.kind == EventKind::Projection {
                let p: ProjectionPayload = serde_json::from_value(e.payload.clone()).unwrap();
                if p.discarded.is_empty() && !p.reverted_to_global {
                    checked += 1;
                    let mut expect = prev.clone();
                    for ev in &p.evidence {
                        let c = tree.cover(&ids(ev.constraint.clone()));
                        expect = expect.intersection(&c).cloned().collect();
                    }
                    if !cover.is_subset(&prev) || cover != expect {
                        failures.push(format!("{} seq {}: projection disagrees with leaf oracle", t.header.episode_id, e.seq));
                    }
                } else {
                    backtracks += 1;
                }
            }
            prev = cover;
        });
        if let Err(e) = res {
            failures.push(format!("{}: replay failed: {e}", t.header.episode_id));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && traces.len() == 1000 && secs < 10.0;
    let mut detail = format!(
        "{} episodes, {checked} projection steps checked, {backtracks} backtracking steps, {secs:.2}s (limit 10s)",
        traces.len()
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    (ok, detail)
}

/// 2: haversine vs the fixture, reverse geocoding vs brute force, threshold
/// accuracy vs direct counting.
fn criterion_2() -> Verdict {
    let fx = distance_fixture();
    assert_eq!(fx.radius_km, R_KM);
    let worst = fx
        .pairs
        .iter()
        .map(|p| {
            let got = haversine_km(GeoPoint::new(p.a.0, p.a.1).unwrap(), GeoPoint::new(p.b.0, p.b.1).unwrap());
            ((got - p.km) / p.km).abs()
        })
        .fold(0.0f64, f64::max);
    let dist_ok = fx.pairs.len() == 1000 && worst <= 0.005;

    let world = SynthWorld::generate(202, 4, 5).unwrap();
    let g = &world.gazetteer;
    let n_cities = g.cities().count();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cities: Vec<&AdminRegion> = g.cities().collect();
    let mut geo_mismatch = 0;
    for i in 0..100 {
        // half near a city, half anywhere in the country's bounding area
        let p = if i % 2 == 0 {
            let c = cities.choose(&mut rng).unwrap();
            (c.centroid.lat() + rng.gen_range(-0.6..0.6), c.centroid.lon() + rng.gen_range(-0.6..0.6))
        } else {
            let root = g.roots().next().unwrap();
            (root.centroid.lat() + rng.gen_range(-6.0..6.0), root.centroid.lon() + rng.gen_range(-6.0..6.0))
        };
        let got = g.reverse_geocode(GeoPoint::new(p.0, p.1).unwrap()).map(|r| r.id.as_str().to_string());
        if got != brute_reverse_geocode(g, p, 100.0) {
            geo_mismatch += 1;
        }
    }
    let geo_ok = n_cities == 20 && geo_mismatch == 0;

    // predictions placed due north of the truth at known distances
    let km_per_deg = std::f64::consts::PI * R_KM / 180.0;
    let offsets = [0.0, 0.5, 0.999, 1.2, 24.0, 26.0, 150.0, 199.0, 600.0, 760.0, 2000.0, 2600.0];
    let base = world.benchmark(3, offsets.len(), [1.0, 0.0, 0.0]);
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for (i, (off, s)) in offsets.iter().zip(base).enumerate() {
        let truth = GeoPoint::new(10.0 + i as f64 * 0.1, 100.0).unwrap();
        samples.push(BenchmarkSample { truth_point: truth, ..s.clone() });
        preds.push(Prediction {
            sample_id: s.id.clone(),
            point: GeoPoint::new(truth.lat() + off / km_per_deg, 100.0).unwrap(),
            city_name: None,
            trace_ref: None,
        });
    }
    let got = threshold_accuracy(&preds, &samples, &DEFAULT_THRESHOLDS_KM).unwrap();
    let mut thr_ok = true;
    for t in DEFAULT_THRESHOLDS_KM {
        let k = offsets.iter().filter(|&&o| o <= t as f64).count();
        let expect = Percent::from_hundredths(((20_000 * k + offsets.len()) / (2 * offsets.len())) as u32).unwrap();
        thr_ok &= got[&t] == expect;
    }
    (
        dist_ok && geo_ok && thr_ok,
        format!(
            "haversine worst rel err {:.2e} over {} pairs (limit 5e-3); reverse_geocode {} mismatches on 100 pts x {n_cities} cities; threshold counts {}",
            worst,
            fx.pairs.len(),
            geo_mismatch,
            if thr_ok { "match" } else { "differ" }
        ),
    )
}

/// 3: Easy episodes land in the exact city, Hard ones in the right province,
/// and reports are byte-identical across runs.
fn criterion_3() -> Verdict {
    let start = Instant::now();
    let world = world(303, 6, 5);
    let g = &world.gazetteer;
    let scripted = scripted_salience_policy();
    let cfg = AgentConfig::default();
    let run = |mix: [f64; 3], seed: u64, workers: usize| {
        let samples = world.benchmark(seed, 100, mix);
        let h = Harness::new(Arc::clone(&world), samples.clone());
        let agent = Agent {
            gazetteer: g,
            backend: &scripted,
            adapters: &h.adapters,
            extractor: &h.extractor,
            config: &cfg,
        };
        let out = run_benchmark(&agent, &samples, "acceptance", None, workers);
        let report = evaluate("all tools", &out.predictions(), &samples, g, &DEFAULT_THRESHOLDS_KM).unwrap();
        (samples, out, report)
    };
    let (_, easy_out, easy) = run([1.0, 0.0, 0.0], 31, 4);
    let (hard_samples, hard_out, hard) = run([0.0, 0.0, 1.0], 32, 4);
    let preds: BTreeMap<String, Prediction> = hard_out.predictions().into_iter().map(|p| (p.sample_id.clone(), p)).collect();
    let province_hits = hard_samples
        .iter()
        .filter(|s| preds.get(&s.id).and_then(|p| province_of_point(g, p.point)).as_deref() == Some(s.truth_province.as_str()))
        .count();

    let (_, easy_again, easy2) = run([1.0, 0.0, 0.0], 31, 1);
    let (_, hard_again, hard2) = run([0.0, 0.0, 1.0], 32, 1);
    let same = render_json(&easy) == render_json(&easy2)
        && render_text(&easy) == render_text(&easy2)
        && render_json(&hard) == render_json(&hard2)
        && easy_out.to_jsonl() == easy_again.to_jsonl()
        && hard_out.to_jsonl() == hard_again.to_jsonl();
    let secs = start.elapsed().as_secs_f64();
    let easy_pct = easy.overall.acc_city;
    let ok = easy_pct >= Percent::parse("95").unwrap() && province_hits >= 70 && same && secs < 30.0;
    (
        ok,
        format!(
            "easy exact city {easy_pct}% (>=95), hard correct province {province_hits}/100 (>=70), reports byte-identical: {same}, {secs:.2}s (limit 30s)"
        ),
    )
}

fn event_seq(e: &ReplayError) -> Option<u64> {
    match e {
        ReplayError::HashMismatch { seq, .. }
        | ReplayError::Payload { seq, .. }
        | ReplayError::Fabricated { seq, .. }
        | ReplayError::PredictionMismatch { seq }
        | ReplayError::State { seq, .. } => Some(*seq),
        ReplayError::GazetteerMismatch { .. } => None,
    }
}

/// Changes one ASCII letter or digit inside the serialized payload.
fn tamper(payload: &serde_json::Value, rng: &mut ChaCha8Rng) -> serde_json::Value {
    let text = serde_json::to_string(payload).unwrap();
    let positions: Vec<usize> = text.bytes().enumerate().filter(|(_, b)| b.is_ascii_alphanumeric()).map(|(i, _)| i).collect();
    loop {
        let i = *positions.choose(rng).unwrap();
        let mut bytes = text.clone().into_bytes();
        bytes[i] = match bytes[i] {
            b'9' => b'0',
            b'z' => b'a',
            b'Z' => b'A',
            b => b + 1,
        };
        let changed = String::from_utf8(bytes).unwrap();
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&changed) {
            if v != *payload {
                return v;
            }
        }
    }
}

/// 4: replay reproduces every recorded hash; one tampered byte is caught
/// at the event that carries it.
fn criterion_4() -> Verdict {
    let world = world(404, 5, 4);
    let g = &world.gazetteer;
    let samples = world.benchmark(41, 100, all_mix());
    let h = Harness::new(Arc::clone(&world), samples.clone());
    let scripted = scripted_salience_policy();
    let traces: Vec<Trace> = h
        .traces(&scripted, &AgentConfig::default(), &samples)
        .into_iter()
        .map(|t| Trace::parse(&t.to_jsonl()).expect("round-trips"))
        .collect();
    let mut mismatches = 0;
    let mut other = 0;
    for t in &traces {
        match replay(t, g) {
            Ok(_) => {}
            Err(ReplayError::HashMismatch { .. }) => mismatches += 1,
            Err(_) => other += 1,
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut caught = 0;
    for t in &traces {
        let mut bad = t.clone();
        let idx = rng.gen_range(0..bad.events.len());
        bad.events[idx].payload = tamper(&bad.events[idx].payload, &mut rng);
        let seq = bad.events[idx].seq;
        if replay(&bad, g).err().and_then(|e| event_seq(&e)) == Some(seq) {
            caught += 1;
        }
    }
    let ok = mismatches == 0 && other == 0 && caught == traces.len();
    (
        ok,
        format!(
            "{} traces replayed: {mismatches} hash mismatches, {other} other errors; tampering caught at the exact event {caught}/{}",
            traces.len(),
            traces.len()
        ),
    )
}

fn toy_tree(provinces: usize, cities: usize) -> Gazetteer {
    let pt = |lat: f64, lon: f64| GeoPoint::new(lat, lon).unwrap();
    let mut regions = vec![AdminRegion {
        id: RegionId::new("c"),
        level: RegionLevel::Country,
        name: "Toyland".into(),
        parent_id: None,
        centroid: pt(30.0, 110.0),
        radius_km: 3000.0,
    }];
    for p in 0..provinces {
        regions.push(AdminRegion {
            id: RegionId::new(format!("p{p}")),
            level: RegionLevel::Province,
            name: format!("Province {p}"),
            parent_id: Some(RegionId::new("c")),
            centroid: pt(30.0, 100.0 + 5.0 * p as f64),
            radius_km: 200.0,
        });
        for c in 0..cities {
            regions.push(AdminRegion {
                id: RegionId::new(format!("p{p}c{c}")),
                level: RegionLevel::City,
                name: format!("City {p}-{c}"),
                parent_id: Some(RegionId::new(format!("p{p}"))),
                centroid: pt(30.0 + 0.5 * c as f64, 100.0 + 5.0 * p as f64),
                radius_km: 30.0,
            });
        }
    }
    Gazetteer::new(regions).unwrap()
}

fn evidence(e: &OracleEvidence) -> Evidence {
    Evidence {
        id: EvidenceId(e.id),
        source_action_id: ActionId(e.id),
        claim: format!("claim {}", e.id),
        constraint: e.constraint.iter().map(|r| RegionId::new(r.as_str())).collect(),
        confidence: e.confidence,
        provenance: Provenance { action_id: ActionId(e.id), payload_sha256: String::new() },
        anchor: None,
        active: true,
    }
}

/// Runs the implementation over `steps` and compares with the oracle.
/// Returns an error description on disagreement.
fn check_backtracking(g: &Gazetteer, tree: &Tree, steps: &[Vec<OracleEvidence>]) -> Result<(), String> {
    let mut st = EpisodeState::new();
    for step in steps {
        st.apply_evidence(step.iter().map(evidence).collect(), g).map_err(|e| e.to_string())?;
        if st.space.is_contradiction() {
            return Err(format!("empty space after {steps:?}"));
        }
    }
    let (active, leaves) = greedy_oracle(tree, steps);
    let got_active: BTreeSet<u64> = st.active_evidence().map(|e| e.id.0).collect();
    let got_leaves = if st.space.is_global { None } else { Some(tree.cover(&ids(st.space.frontier.clone()))) };
    // an oracle with no active evidence is global
    let leaves = if active.is_empty() { None } else { leaves };
    if got_active != active || got_leaves != leaves {
        return Err(format!("{steps:?}: active {got_active:?} vs oracle {active:?}"));
    }
    Ok(())
}

/// 5: backtracking never leaves the space empty and matches the greedy
/// oracle on exhaustive toy-tree cases.
fn criterion_5() -> Verdict {
    let mut cases = 0usize;
    let mut failures: Vec<String> = Vec::new();
    let mut run = |g: &Gazetteer, tree: &Tree, steps: Vec<Vec<OracleEvidence>>| {
        cases += 1;
        if let Err(e) = check_backtracking(g, tree, &steps) {
            failures.push(e);
        }
    };
    let ev = |id: u64, c: f64, r: &[&String]| OracleEvidence {
        id,
        confidence: c,
        constraint: r.iter().map(|s| s.to_string()).collect(),
    };
    for (np, nc) in [(2, 2), (3, 2), (2, 3)] {
        let g = toy_tree(np, nc);
        let tree = Tree::of(&g);
        let regions: Vec<String> = tree.parent.keys().cloned().collect();
        let confs = [0.2, 0.5, 0.8];
        // every ordered triple of single-region constraints, one per step,
        // under every confidence assignment including ties
        let mut assignments: Vec<[f64; 3]> = Vec::new();
        for a in confs {
            for b in confs {
                for c in confs {
                    assignments.push([a, b, c]);
                }
            }
        }
        for r1 in &regions {
            for r2 in &regions {
                for r3 in &regions {
                    for w in &assignments {
                        run(&g, &tree, vec![vec![ev(1, w[0], &[r1])], vec![ev(2, w[1], &[r2])], vec![ev(3, w[2], &[r3])]]);
                    }
                    // two pieces arriving together after one
                    run(&g, &tree, vec![vec![ev(1, 0.5, &[r1])], vec![ev(2, 0.5, &[r2]), ev(3, 0.2, &[r3])]]);
                    run(&g, &tree, vec![vec![ev(1, 0.2, &[r1])], vec![ev(2, 0.8, &[r2]), ev(3, 0.8, &[r3])]]);
                }
            }
        }
        // random disjunctive constraints over longer chains
        let mut rng = ChaCha8Rng::seed_from_u64(np as u64 * 10 + nc as u64);
        for _ in 0..2000 {
            let mut id = 0;
            let steps: Vec<Vec<OracleEvidence>> = (0..rng.gen_range(1..6))
                .map(|_| {
                    (0..rng.gen_range(1..4))
                        .map(|_| {
                            id += 1;
                            let k = rng.gen_range(1..=3);
                            let rs: Vec<&String> = regions.choose_multiple(&mut rng, k).collect();
                            ev(id, *confs.choose(&mut rng).unwrap(), &rs)
                        })
                        .collect()
                })
                .collect();
            run(&g, &tree, steps);
        }
    }
    let ok = failures.is_empty();
    let mut detail = format!("{cases} toy-tree cases, {} disagreements with the greedy oracle", failures.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first: {f}"));
    }
    (ok, detail)
}

/// 6: with image search disabled no request reaches that route.
fn criterion_6() -> Verdict {
    let world = world(606, 5, 4);
    let g = &world.gazetteer;
    let samples = world.benchmark(61, 100, [0.2333, 0.5667, 0.2]);
    let stub = StubServer::start(Some(synth_tools_for(Arc::clone(&world), &samples))).expect("stub starts");
    let policy = RetryPolicy { timeout: Duration::from_secs(5), ..RetryPolicy::default() };
    let adapters = live_adapters(&stub.endpoints(), policy);
    let extractor = EvidenceExtractor::new(world.tag_table());
    let ablation = AblationConfig::without([AtomicTool::ImageSearch]);
    let label = ablation.condition_label();
    let cfg = AgentConfig { ablation, ..AgentConfig::default() };
    let scripted = scripted_salience_policy();
    let agent = Agent { gazetteer: g, backend: &scripted, adapters: &adapters, extractor: &extractor, config: &cfg };
    let out = run_benchmark(&agent, &samples, "acceptance", None, 4);
    let report = evaluate(&label, &out.predictions(), &samples, g, &DEFAULT_THRESHOLDS_KM).unwrap();
    let image_route = wire::route(AtomicTool::ImageSearch).unwrap();
    let image_requests = stub.count(image_route);
    let total = stub.requests().len();
    let rendered = render_text(&report);
    let ok = image_requests == 0 && total > 0 && label == "w/o image search" && rendered.starts_with("condition: w/o image search\n");
    (
        ok,
        format!("{image_requests} {image_route} requests out of {total} stub requests over 100 samples; label {label:?}"),
    )
}

/// 7: the renderer reproduces the reference rows verbatim.
fn criterion_7() -> Verdict {
    let pct = |s: &str| Percent::parse(s).unwrap();
    let thresholds: BTreeMap<u32, Percent> = DEFAULT_THRESHOLDS_KM
        .into_iter()
        .zip(["52.33", "82.00", "100.00", "100.00", "100.00"])
        .map(|(t, v)| (t, pct(v)))
        .collect();
    let m = Metrics {
        n: 300,
        threshold_acc: thresholds,
        acc_city: pct("84.67"),
        acc_loglat: pct("100.00"),
        location_compliance: Some(pct("100.00")),
    };
    let report = MetricsReport {
        condition: "Ours".into(),
        overall: m.clone(),
        strata: Strata { scene_category: BTreeMap::new(), difficulty: BTreeMap::new() },
    };
    let text = render_text(&report);
    let row: Vec<&str> = text.lines().find(|l| l.starts_with("all")).unwrap().split_whitespace().collect();
    let t1 = row[2..7].join(" & ");
    let t2 = row[7..10].join(" & ");
    let ok = t1 == "52.33 & 82.00 & 100.00 & 100.00 & 100.00"
        && t2 == "84.67 & 100.00 & 100.00"
        && latex_threshold_row("Ours", &m) == "Ours & 52.33 & 82.00 & 100.00 & 100.00 & 100.00"
        && latex_city_row("Ours", &m) == "Ours & 84.67 & 100.00 & 100.00";
    (ok, format!("thresholds row \"{t1}\", city row \"{t2}\""))
}

/// 8: 50-step traces compress within 4000 chars and keep every active id.
fn criterion_8() -> Verdict {
    let world = world(808, 6, 5);
    let g = &world.gazetteer;
    let samples = world.benchmark(81, 100, all_mix());
    let h = Harness::new(Arc::clone(&world), samples.clone());
    let cfg = AgentConfig { max_steps: 50, ..AgentConfig::default() };
    let (mut longest, mut missing, mut over, mut short) = (0usize, 0usize, 0usize, 0usize);
    let mut errors = 0;
    for (i, s) in samples.iter().enumerate() {
        let random = RandomBackend::new(&world, 8000 + i as u64);
        let t = h.traces(&random, &cfg, std::slice::from_ref(s)).remove(0);
        let decisions = t.events.iter().filter(|e| e.kind == EventKind::Decision).count();
        if decisions < 50 {
            short += 1;
        }
        let state = replay(&t, g).expect("replays");
        match compress(&t.events, g, 4000) {
            Ok(ctx) => {
                let text = ctx.render();
                let n = text.chars().count();
                longest = longest.max(n);
                if n > 4000 {
                    over += 1;
                }
                let listed: BTreeSet<&str> = text
                    .lines()
                    .filter_map(|l| l.split(" | ").next())
                    .filter(|id| id.starts_with('E'))
                    .collect();
                missing += state.active_evidence().filter(|e| !listed.contains(e.id.to_string().as_str())).count();
            }
            Err(_) => errors += 1,
        }
    }
    let ok = over == 0 && missing == 0 && errors == 0 && short == 0;
    (
        ok,
        format!(
            "100 traces of 50 steps ({short} shorter): longest context {longest} chars (limit 4000), {over} over budget, {missing} active ids missing, {errors} errors"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("projection soundness", criterion_1),
        ("oracle agreement", criterion_2),
        ("synthetic convergence", criterion_3),
        ("replay", criterion_4),
        ("backtracking", criterion_5),
        ("ablation", criterion_6),
        ("table rendering", criterion_7),
        ("compression", criterion_8),
    ];
    let mut all_ok = true;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = f();
        all_ok &= ok;
        println!(
            "criterion {}: {} {name}: {detail} [{:.2}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = secs < 60.0;
    all_ok &= ok;
    println!("criterion 9: {} offline speed: whole suite {secs:.2}s (limit 60s)", if ok { "PASS" } else { "FAIL" });
    if !all_ok {
        std::process::exit(1);
    }
}
