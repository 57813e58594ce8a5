//! Independent oracles and helpers shared by the integration tests. Nothing
//! here calls the code under test to compute an expected value.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use geoprobe::action::{AtomicTool, CapabilityModule, Decision, ProbeAction};
use geoprobe::geo::{Gazetteer, GeoPoint, RegionId, RegionLevel};
use geoprobe::reasoner::{BackendReply, BackendUnavailable, PlannerContext, ReasonerBackend};
use geoprobe::synth::SynthWorld;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const R_KM: f64 = 6371.0;

/// Great-circle distance via the atan2 form, unrelated to the haversine
/// implementation under test.
pub fn oracle_distance_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dl = (b.1 - a.1).to_radians();
    let num = (p2.cos() * dl.sin()).hypot(p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos());
    let den = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
    R_KM * num.atan2(den)
}

#[derive(serde::Deserialize)]
pub struct DistanceFixture {
    pub radius_km: f64,
    pub pairs: Vec<DistancePair>,
}

#[derive(serde::Deserialize)]
pub struct DistancePair {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub km: f64,
}

pub fn distance_fixture() -> DistanceFixture {
    let text = include_str!("../fixtures/distance_oracle.json");
    serde_json::from_str(text).expect("fixture parses")
}

/// Parent links read straight from the region records.
pub struct Tree {
    pub parent: BTreeMap<String, Option<String>>,
    pub level: BTreeMap<String, RegionLevel>,
}

impl Tree {
    pub fn of(g: &Gazetteer) -> Tree {
        let recs = g.to_records();
        Tree {
            parent: recs.iter().map(|r| (r.id.clone(), r.parent_id.clone())).collect(),
            level: recs.iter().map(|r| (r.id.clone(), r.level)).collect(),
        }
    }

    pub fn chain(&self, id: &str) -> Vec<String> {
        let mut out = vec![id.to_string()];
        let mut cur = id.to_string();
        while let Some(Some(p)) = self.parent.get(&cur) {
            out.push(p.clone());
            cur = p.clone();
        }
        out
    }

    pub fn leaves(&self) -> BTreeSet<String> {
        let parents: BTreeSet<&String> = self.parent.values().flatten().collect();
        self.parent.keys().filter(|k| !parents.contains(k)).cloned().collect()
    }

    /// Leaves inside any of `regions`.
    pub fn cover(&self, regions: &BTreeSet<String>) -> BTreeSet<String> {
        self.leaves()
            .into_iter()
            .filter(|l| self.chain(l).iter().any(|a| regions.contains(a)))
            .collect()
    }

    /// The stated rule: member, ancestor in constraint, or descendant in
    /// constraint.
    pub fn consistent(&self, region: &str, constraint: &BTreeSet<String>) -> bool {
        self.chain(region).iter().any(|a| constraint.contains(a))
            || constraint.iter().any(|c| self.chain(c).iter().skip(1).any(|a| a == region))
    }
}

pub fn ids(space: impl IntoIterator<Item = RegionId>) -> BTreeSet<String> {
    space.into_iter().map(|r| r.as_str().to_string()).collect()
}

#[derive(Debug, Clone)]
pub struct OracleEvidence {
    pub id: u64,
    pub confidence: f64,
    pub constraint: BTreeSet<String>,
}

/// Greedy discard simulated at leaf level. Returns active ids and the leaf
/// set (`None` when global).
pub fn greedy_oracle(tree: &Tree, steps: &[Vec<OracleEvidence>]) -> (BTreeSet<u64>, Option<BTreeSet<String>>) {
    let mut all: Vec<OracleEvidence> = Vec::new();
    let mut active: BTreeSet<u64> = BTreeSet::new();
    let leaves_of = |active: &BTreeSet<u64>, all: &[OracleEvidence]| -> Option<BTreeSet<String>> {
        let mut acc: Option<BTreeSet<String>> = None;
        for e in all.iter().filter(|e| active.contains(&e.id)) {
            let c = tree.cover(&e.constraint);
            acc = Some(match acc {
                None => c,
                Some(a) => a.intersection(&c).cloned().collect(),
            });
        }
        acc
    };
    let weakest = |cands: &[&OracleEvidence]| -> Option<u64> {
        cands
            .iter()
            .min_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap().then(b.id.cmp(&a.id)))
            .map(|e| e.id)
    };
    for step in steps {
        let mut batch = step.clone();
        batch.sort_by_key(|e| e.id);
        for e in &batch {
            active.insert(e.id);
            all.push(e.clone());
        }
        let empty = |s: &Option<BTreeSet<String>>| s.as_ref().is_some_and(|l| l.is_empty());
        if empty(&leaves_of(&active, &all)) {
            let mine: Vec<&OracleEvidence> = batch.iter().filter(|e| active.contains(&e.id)).collect();
            if let Some(w) = weakest(&mine) {
                active.remove(&w);
            }
            while empty(&leaves_of(&active, &all)) {
                let live: Vec<&OracleEvidence> = all.iter().filter(|e| active.contains(&e.id)).collect();
                match weakest(&live) {
                    Some(w) => {
                        active.remove(&w);
                    }
                    None => break,
                }
            }
        }
    }
    let leaves = leaves_of(&active, &all);
    (active, leaves)
}

/// City whose disc holds `p` with the nearest centroid (ties: smaller id),
/// else the nearest centroid within `fallback_km`.
pub fn brute_reverse_geocode(g: &Gazetteer, p: (f64, f64), fallback_km: f64) -> Option<String> {
    let mut cities: Vec<(f64, String, f64)> = g
        .to_records()
        .into_iter()
        .filter(|r| r.level == RegionLevel::City)
        .map(|r| (oracle_distance_km((r.lat, r.lon), p), r.id, r.radius_km))
        .collect();
    cities.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    cities
        .iter()
        .find(|(d, _, r)| d <= r)
        .or_else(|| cities.first().filter(|(d, _, _)| *d <= fallback_km))
        .map(|(_, id, _)| id.clone())
}

/// Province whose disc holds `p`, nearest centroid first.
pub fn province_of_point(g: &Gazetteer, p: GeoPoint) -> Option<String> {
    let mut provs: Vec<(f64, String, f64)> = g
        .to_records()
        .into_iter()
        .filter(|r| r.level == RegionLevel::Province)
        .map(|r| (oracle_distance_km((r.lat, r.lon), (p.lat(), p.lon())), r.name.clone(), r.radius_km))
        .collect();
    provs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    provs.into_iter().find(|(d, _, r)| d <= r).map(|(_, n, _)| n)
}

/// Seeded backend issuing random but valid probes and never finalizing on
/// its own. Every batch carries an image search with a fresh crop window,
/// so batches never repeat.
pub struct RandomBackend {
    pub seed: u64,
    names: Vec<String>,
    tags: Vec<String>,
}

impl RandomBackend {
    pub fn new(world: &SynthWorld, seed: u64) -> Self {
        let mut names: Vec<String> = world.signs.values().flatten().cloned().collect();
        names.extend(world.pois.values().flatten().map(|p| p.name.clone()));
        names.extend(world.gazetteer.to_records().into_iter().map(|r| r.name));
        let tags = world.tags.values().flatten().map(|t| t.value.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        RandomBackend { seed, names, tags }
    }
}

impl ReasonerBackend for RandomBackend {
    fn name(&self) -> String {
        "random".into()
    }

    fn decide(&self, ctx: &PlannerContext) -> Result<BackendReply, BackendUnavailable> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (ctx.step << 20) ^ ctx.repetition_warning as u64);
        let img = ctx.image_ref.clone();
        let x: f64 = (rng.gen::<f64>() * 0.5 * 1000.0).round() / 1000.0;
        let y: f64 = (rng.gen::<f64>() * 0.5 * 1000.0).round() / 1000.0;
        let mut actions = vec![ProbeAction::new(
            0,
            CapabilityModule::ImageMatching,
            AtomicTool::ImageSearch,
            [
                ("image_ref", img.clone()),
                ("bbox", format!("{x},{y},0.5,0.5")),
                ("top_k", rng.gen_range(2..=8u32).to_string()),
            ],
            "random",
        )];
        for _ in 0..rng.gen_range(0..=2) {
            let name = self.names.choose(&mut rng).unwrap().clone();
            let tag = self.tags.choose(&mut rng).unwrap().clone();
            let a = match rng.gen_range(0..5) {
                0 => ProbeAction::new(0, CapabilityModule::Environmental, AtomicTool::Caption, [("image_ref", img.clone())], ""),
                1 => ProbeAction::new(0, CapabilityModule::SemanticSymbol, AtomicTool::Ocr, [("image_ref", img.clone())], ""),
                2 => ProbeAction::new(0, CapabilityModule::Infrastructure, AtomicTool::KnowledgeBase, [("query", tag)], ""),
                3 => ProbeAction::new(0, CapabilityModule::SemanticSymbol, AtomicTool::TextSearch, [("query", name)], ""),
                _ => ProbeAction::new(0, CapabilityModule::SemanticSymbol, AtomicTool::Geocode, [("name", name)], ""),
            };
            actions.push(a);
        }
        for (i, a) in actions.iter_mut().enumerate() {
            a.id = geoprobe::action::ActionId(ctx.next_action_id + i as u64);
        }
        Ok(BackendReply { decision: Decision::batch(actions), exchanges: vec![] })
    }
}

pub fn world(seed: u64, provinces: usize, cities: usize) -> Arc<SynthWorld> {
    Arc::new(SynthWorld::generate(seed, provinces, cities).expect("world"))
}
