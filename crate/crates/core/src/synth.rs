//! Seeded synthetic geography: a country → province → city tree, per-region
//! scene tags, unique signs and POIs, scene descriptors standing in for
//! images, and pure tool adapters answering from the world.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_bbox, AtomicTool, ProbeAction};
use crate::canon;
use crate::eval::{BenchmarkSample, Difficulty, Media, SceneCategory};
use crate::executor::live::{base_image_ref, LocalCrop};
use crate::executor::wire::DEFAULT_TOP_K;
use crate::executor::{
    AdapterSet, GeocodeHit, KbRecord, MatchCandidate, OcrSpan, SearchHit, TagTable, ToolAdapter, ToolPayload,
    ToolResult,
};
use crate::geo::{
    haversine_km, AdminRegion, Gazetteer, GazetteerError, GeoPoint, RegionId, RegionLevel, RegionRecord,
    EARTH_RADIUS_KM,
};

const VEGETATION: [&str; 10] = [
    "bamboo groves",
    "rice paddies",
    "tea terraces",
    "pine forest",
    "palm trees",
    "birch woods",
    "cotton fields",
    "rubber plantations",
    "poplar rows",
    "wheat fields",
];

const TERRAIN: [&str; 8] = [
    "karst peaks",
    "loess plateau",
    "river delta",
    "alpine meadow",
    "sand dunes",
    "coastal cliffs",
    "basin floor",
    "rolling hills",
];

const SIGN_SUFFIXES: [&str; 8] = [
    "Railway Station",
    "People's Hospital",
    "No. 1 Middle School",
    "Bus Terminal",
    "Post Office",
    "Grand Hotel",
    "Night Market",
    "Public Library",
];

const POI_NOUNS: [&str; 8] = ["Tower", "Temple", "Bridge", "Museum", "Pagoda", "Plaza", "Garden", "Gate"];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Province grid cell size; provinces are discs inside their cells.
const PROVINCE_CELL_KM: f64 = 300.0;
const ORIGIN: (f64, f64) = (32.0, 108.0);
const KM_PER_DEG: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueKind {
    Vegetation,
    Terrain,
    Architecture,
    SignText,
    Poi,
    Vehicle,
}

impl ClueKind {
    /// Macro-level scene attributes, as opposed to readable text.
    pub fn is_tag(self) -> bool {
        !matches!(self, ClueKind::SignText | ClueKind::Poi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tag {
    pub kind: ClueKind,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub name: String,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clue {
    pub kind: ClueKind,
    pub value: String,
    pub salience: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub point: GeoPoint,
    pub city_id: RegionId,
}

/// Clue bundle used in place of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub clues: Vec<Clue>,
    pub truth: Truth,
    pub difficulty: Difficulty,
}

impl SceneDescriptor {
    pub fn clues_of(&self, kind: ClueKind) -> impl Iterator<Item = &Clue> {
        self.clues.iter().filter(move |c| c.kind == kind)
    }

    pub fn has(&self, kind: ClueKind) -> bool {
        self.clues_of(kind).next().is_some()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid world size: {0}")]
    InvalidSize(String),
    #[error("world gazetteer: {0}")]
    Gazetteer(#[from] GazetteerError),
    #[error("world file: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub gazetteer: Gazetteer,
    /// Tags carried directly by a region (cities also inherit their
    /// ancestors' tags when matching clues).
    pub tags: BTreeMap<RegionId, BTreeSet<Tag>>,
    pub signs: BTreeMap<RegionId, Vec<String>>,
    pub pois: BTreeMap<RegionId, Vec<Poi>>,
}

/// Single-file JSON form of a world.
#[derive(Serialize, Deserialize)]
struct WorldFile {
    regions: Vec<RegionRecord>,
    tags: BTreeMap<RegionId, BTreeSet<Tag>>,
    signs: BTreeMap<RegionId, Vec<String>>,
    pois: BTreeMap<RegionId, Vec<Poi>>,
}

struct NameGen {
    used: BTreeSet<String>,
}

impl NameGen {
    fn new() -> Self {
        let mut used = BTreeSet::new();
        for words in SIGN_SUFFIXES.iter().chain(POI_NOUNS.iter()) {
            for w in words.split_whitespace() {
                used.insert(w.to_lowercase());
            }
        }
        NameGen { used }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut s = String::new();
            for _ in 0..syllables {
                s.push_str(ONSETS.choose(rng).unwrap());
                s.push_str(VOWELS.choose(rng).unwrap());
                if rng.gen_bool(0.25) {
                    s.push('n');
                }
            }
            if self.used.insert(s.clone()) {
                let mut c = s.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                return std::iter::once(first).chain(c).collect();
            }
        }
    }
}

/// Point `(east_km, north_km)` away from `base` on the local
/// equirectangular plane at `base`'s latitude.
fn offset_from(base: GeoPoint, east_km: f64, north_km: f64) -> GeoPoint {
    let lat = base.lat() + north_km / KM_PER_DEG;
    let lon = base.lon() + east_km / (KM_PER_DEG * base.lat().to_radians().cos());
    GeoPoint::new(lat, lon).expect("synthetic coordinates stay in range")
}

fn grid(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (cols, rows)
}

impl SynthWorld {
    /// Builds a world from `seed`. Provinces sit on a grid; each province's
    /// cities sit on a grid inside the square inscribed in the province disc,
    /// so city discs never overlap and always nest inside their province.
    pub fn generate(seed: u64, n_provinces: usize, cities_per_province: usize) -> Result<Self, SynthError> {
        if n_provinces == 0 || cities_per_province == 0 {
            return Err(SynthError::InvalidSize(format!(
                "{n_provinces} provinces x {cities_per_province} cities; both must be >= 1"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = NameGen::new();
        let mut regions = Vec::new();
        let mut tags: BTreeMap<RegionId, BTreeSet<Tag>> = BTreeMap::new();
        let mut signs = BTreeMap::new();
        let mut pois = BTreeMap::new();

        let (pcols, prows) = grid(n_provinces);
        let p_radius = 0.45 * PROVINCE_CELL_KM;
        let (ccols, crows) = grid(cities_per_province);
        let half = p_radius * FRAC_1_SQRT_2 * 0.95;
        let c_cell = 2.0 * half / ccols.max(crows) as f64;
        let c_radius = 0.45 * c_cell;

        let origin = GeoPoint::new(ORIGIN.0, ORIGIN.1).expect("valid origin");
        let mut country_radius: f64 = 0.0;
        let country_id = RegionId::new("c0");
        let mut province_regions = Vec::new();
        for p in 0..n_provinces {
            let (col, row) = (p % pcols, p / pcols);
            let px = (col as f64 + 0.5 - pcols as f64 / 2.0) * PROVINCE_CELL_KM;
            let py = (row as f64 + 0.5 - prows as f64 / 2.0) * PROVINCE_CELL_KM;
            let pid = RegionId::new(format!("p{p}"));
            let centroid = offset_from(origin, px, py);
            country_radius = country_radius.max(haversine_km(origin, centroid) + p_radius * 1.05);

            let mut ptags = BTreeSet::new();
            for v in VEGETATION.choose_multiple(&mut rng, 2) {
                ptags.insert(Tag { kind: ClueKind::Vegetation, value: v.to_string() });
            }
            let terrain = TERRAIN.choose(&mut rng).unwrap().to_string();
            ptags.insert(Tag { kind: ClueKind::Terrain, value: terrain.clone() });
            ptags.insert(Tag {
                kind: ClueKind::Architecture,
                value: format!("{} style roofs", names.fresh(&mut rng).to_lowercase()),
            });
            ptags.insert(Tag {
                kind: ClueKind::Vehicle,
                value: format!("plates marked {}", names.fresh(&mut rng).to_lowercase()),
            });
            tags.insert(pid.clone(), ptags);

            province_regions.push(AdminRegion {
                id: pid.clone(),
                level: RegionLevel::Province,
                name: names.fresh(&mut rng),
                parent_id: Some(country_id.clone()),
                centroid,
                radius_km: p_radius,
            });

            for c in 0..cities_per_province {
                let (ccol, crow) = (c % ccols, c / ccols);
                let cx = (ccol as f64 + 0.5 - ccols as f64 / 2.0) * c_cell;
                let cy = (crow as f64 + 0.5 - crows as f64 / 2.0) * c_cell;
                let city_centroid = offset_from(centroid, cx, cy);
                let cid = RegionId::new(format!("p{p}c{c}"));
                let city_name = names.fresh(&mut rng);

                let mut ctags = BTreeSet::new();
                ctags.insert(Tag { kind: ClueKind::Terrain, value: terrain.clone() });
                ctags.insert(Tag {
                    kind: ClueKind::Vegetation,
                    value: VEGETATION.choose(&mut rng).unwrap().to_string(),
                });
                tags.insert(cid.clone(), ctags);

                let suffixes: Vec<&str> = SIGN_SUFFIXES.choose_multiple(&mut rng, 2).copied().collect();
                signs.insert(cid.clone(), suffixes.iter().map(|s| format!("{city_name} {s}")).collect::<Vec<_>>());

                let mut city_pois = Vec::new();
                for _ in 0..2 {
                    let r = c_radius * 0.6 * rng.gen::<f64>().sqrt();
                    let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                    city_pois.push(Poi {
                        name: format!("{} {}", names.fresh(&mut rng), POI_NOUNS.choose(&mut rng).unwrap()),
                        point: offset_from(city_centroid, r * theta.cos(), r * theta.sin()),
                    });
                }
                pois.insert(cid.clone(), city_pois);

                regions.push(AdminRegion {
                    id: cid,
                    level: RegionLevel::City,
                    name: city_name,
                    parent_id: Some(pid.clone()),
                    centroid: city_centroid,
                    radius_km: c_radius,
                });
            }
        }
        let country = AdminRegion {
            id: country_id,
            level: RegionLevel::Country,
            name: names.fresh(&mut rng),
            parent_id: None,
            centroid: origin,
            radius_km: country_radius.max(p_radius),
        };
        let mut all = vec![country];
        all.extend(province_regions);
        all.extend(regions);
        Ok(SynthWorld {
            gazetteer: Gazetteer::new(all)?,
            tags,
            signs,
            pois,
        })
    }

    pub fn to_json(&self) -> String {
        let file = WorldFile {
            regions: self.gazetteer.to_records(),
            tags: self.tags.clone(),
            signs: self.signs.clone(),
            pois: self.pois.clone(),
        };
        serde_json::to_string_pretty(&file).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let file: WorldFile = serde_json::from_str(text).map_err(|e| SynthError::Format(e.to_string()))?;
        let regions = serde_json::to_string(&file.regions).expect("records serialize");
        let gazetteer = Gazetteer::from_json_str(&regions)?;
        Ok(SynthWorld {
            gazetteer,
            tags: file.tags,
            signs: file.signs,
            pois: file.pois,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|e| SynthError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn content_hash(&self) -> String {
        canon::sha256_hex(self.to_json().as_bytes())
    }

    /// Tag → regions carrying it directly, for caption evidence.
    pub fn tag_table(&self) -> TagTable {
        let mut map: BTreeMap<String, BTreeSet<RegionId>> = BTreeMap::new();
        for (id, tags) in &self.tags {
            for t in tags {
                map.entry(t.value.clone()).or_default().insert(id.clone());
            }
        }
        TagTable::new(map)
    }

    /// Tags of `city` including those inherited from its ancestors.
    pub fn effective_tags(&self, city: &RegionId) -> BTreeSet<Tag> {
        let mut out: BTreeSet<Tag> = self.tags.get(city).cloned().unwrap_or_default();
        for anc in self.gazetteer.ancestors(city) {
            out.extend(self.tags.get(&anc).into_iter().flatten().cloned());
        }
        out
    }

    pub fn sign_owner(&self, text: &str) -> Option<&RegionId> {
        let key = text.trim().to_lowercase();
        self.signs
            .iter()
            .find(|(_, ss)| ss.iter().any(|s| s.to_lowercase() == key))
            .map(|(id, _)| id)
    }

    pub fn poi(&self, name: &str) -> Option<(&RegionId, &Poi)> {
        let key = name.trim().to_lowercase();
        self.pois
            .iter()
            .flat_map(|(id, ps)| ps.iter().map(move |p| (id, p)))
            .find(|(_, p)| p.name.to_lowercase() == key)
    }

    /// Cities compatible with every clue, by brute force over the world.
    pub fn compatible_cities(&self, clues: &[Clue]) -> BTreeSet<RegionId> {
        self.gazetteer
            .cities()
            .filter(|c| clues.iter().all(|clue| self.city_matches(&c.id, clue)))
            .map(|c| c.id.clone())
            .collect()
    }

    fn city_matches(&self, city: &RegionId, clue: &Clue) -> bool {
        match clue.kind {
            ClueKind::SignText => self.sign_owner(&clue.value) == Some(city),
            ClueKind::Poi => self.poi(&clue.value).map(|(id, _)| id) == Some(city),
            kind => self
                .effective_tags(city)
                .iter()
                .any(|t| t.kind == kind && t.value == clue.value),
        }
    }

    fn province_of(&self, city: &RegionId) -> Option<RegionId> {
        self.gazetteer
            .ancestor_at(city, RegionLevel::Province)
            .map(|p| p.id.clone())
    }

    fn random_point_in(&self, city: &RegionId, rng: &mut ChaCha8Rng) -> GeoPoint {
        let c = self.gazetteer.get(city).expect("city exists");
        let d = c.radius_km * 0.6 * rng.gen::<f64>().sqrt();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        offset_from(c.centroid, d * theta.cos(), d * theta.sin())
    }

    /// Draws a descriptor whose clue set is solvable by construction: the
    /// truth city is drawn uniformly from the cities compatible with the
    /// emitted clues.
    pub fn sample_episode(&self, seed: u64, difficulty: Difficulty) -> SceneDescriptor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce7e);
        let cities: Vec<RegionId> = self.gazetteer.cities().map(|c| c.id.clone()).collect();
        let anchor_city = cities.choose(&mut rng).expect("world has cities").clone();
        let macro_tags: Vec<Tag> = self
            .effective_tags(&anchor_city)
            .into_iter()
            .filter(|t| matches!(t.kind, ClueKind::Vegetation | ClueKind::Terrain))
            .collect();
        let clue = |t: &Tag, rng: &mut ChaCha8Rng| Clue {
            kind: t.kind,
            value: t.value.clone(),
            salience: ((0.3 + 0.4 * rng.gen::<f64>()) * 100.0).round() / 100.0,
        };

        match difficulty {
            Difficulty::Easy => {
                let mut clues = Vec::new();
                let truth_point;
                if rng.gen_bool(0.5) {
                    let sign = self.signs[&anchor_city].choose(&mut rng).unwrap().clone();
                    clues.push(Clue { kind: ClueKind::SignText, value: sign, salience: 0.9 });
                    truth_point = self.random_point_in(&anchor_city, &mut rng);
                } else {
                    let poi = self.pois[&anchor_city].choose(&mut rng).unwrap().clone();
                    clues.push(Clue { kind: ClueKind::Poi, value: poi.name.clone(), salience: 0.9 });
                    truth_point = poi.point;
                }
                if let Some(t) = macro_tags.choose(&mut rng) {
                    clues.push(clue(t, &mut rng));
                }
                SceneDescriptor {
                    clues,
                    truth: Truth { point: truth_point, city_id: anchor_city },
                    difficulty,
                }
            }
            Difficulty::Medium => {
                let province = self.province_of(&anchor_city).expect("city has a province");
                let mut clues: Vec<Clue> = self.tags[&province]
                    .iter()
                    .filter(|t| t.kind == ClueKind::Architecture)
                    .map(|t| Clue { kind: t.kind, value: t.value.clone(), salience: 0.7 })
                    .collect();
                if let Some(v) = self.tags[&anchor_city].iter().find(|t| t.kind == ClueKind::Vegetation) {
                    clues.push(clue(v, &mut rng));
                }
                self.with_truth(clues, difficulty, &mut rng)
            }
            Difficulty::Hard => {
                let mut best: Option<(usize, Vec<Clue>)> = None;
                for _ in 0..16 {
                    let k = rng.gen_range(1..=2.min(macro_tags.len()));
                    let chosen: Vec<Clue> = macro_tags.choose_multiple(&mut rng, k).map(|t| clue(t, &mut rng)).collect();
                    let spread = self
                        .compatible_cities(&chosen)
                        .iter()
                        .filter_map(|c| self.province_of(c))
                        .collect::<BTreeSet<_>>()
                        .len();
                    if spread >= 2 {
                        best = Some((spread, chosen));
                        break;
                    }
                    if best.as_ref().map_or(true, |(s, _)| spread > *s) {
                        best = Some((spread, chosen));
                    }
                }
                let (_, clues) = best.expect("at least one attempt");
                self.with_truth(clues, difficulty, &mut rng)
            }
        }
    }

    fn with_truth(&self, clues: Vec<Clue>, difficulty: Difficulty, rng: &mut ChaCha8Rng) -> SceneDescriptor {
        let compatible: Vec<RegionId> = self.compatible_cities(&clues).into_iter().collect();
        let city = compatible.choose(rng).expect("clues come from an existing city").clone();
        SceneDescriptor {
            truth: Truth { point: self.random_point_in(&city, rng), city_id: city },
            clues,
            difficulty,
        }
    }

    /// `n` descriptor-embedded samples. Difficulty counts follow `mix`
    /// (Easy, Medium, Hard) with largest-remainder rounding.
    pub fn benchmark(&self, seed: u64, n: usize, mix: [f64; 3]) -> Vec<BenchmarkSample> {
        let counts = mix_counts(n, mix);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let levels = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
        for (d, count) in levels.into_iter().zip(counts) {
            for _ in 0..count {
                let i = out.len();
                let desc = self.sample_episode(rng.gen(), d);
                let city = self.gazetteer.get(&desc.truth.city_id).expect("truth city");
                let province = self
                    .gazetteer
                    .ancestor_at(&city.id, RegionLevel::Province)
                    .map(|p| p.name.clone())
                    .unwrap_or_default();
                let scene = match (d, desc.has(ClueKind::SignText) || desc.has(ClueKind::Poi)) {
                    (_, true) => *[SceneCategory::Urban, SceneCategory::CloseUp].choose(&mut rng).unwrap(),
                    (Difficulty::Hard, _) => *[SceneCategory::Rural, SceneCategory::AerialDistant].choose(&mut rng).unwrap(),
                    _ => *[SceneCategory::Urban, SceneCategory::Rural].choose(&mut rng).unwrap(),
                };
                out.push(BenchmarkSample {
                    id: format!("s{i:04}"),
                    truth_point: desc.truth.point,
                    truth_city: city.name.clone(),
                    truth_province: province,
                    scene_category: scene,
                    difficulty: d,
                    clue_tags: desc.clues.iter().map(|c| format!("{:?}", c.kind).to_lowercase()).collect(),
                    media: Media::Descriptor(desc),
                });
            }
        }
        out
    }
}

/// Splits `n` by `mix` using largest remainders (ties to the earlier level).
pub fn mix_counts(n: usize, mix: [f64; 3]) -> [usize; 3] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|m| m / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Tool answers computed from a world and the scenes registered under their
/// image references. Every answer is a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct SynthTools {
    world: Arc<SynthWorld>,
    scenes: Arc<BTreeMap<String, SceneDescriptor>>,
}

impl SynthTools {
    pub fn new(world: Arc<SynthWorld>, scenes: BTreeMap<String, SceneDescriptor>) -> Self {
        SynthTools {
            world,
            scenes: Arc::new(scenes),
        }
    }

    pub fn single(world: Arc<SynthWorld>, image_ref: &str, scene: SceneDescriptor) -> Self {
        Self::new(world, BTreeMap::from([(image_ref.to_string(), scene)]))
    }

    pub fn world(&self) -> &SynthWorld {
        &self.world
    }

    fn scene(&self, action: &ProbeAction) -> Option<&SceneDescriptor> {
        let r = action.arg("image_ref")?;
        self.scenes.get(base_image_ref(r))
    }

    pub fn answer(&self, a: &ProbeAction) -> ToolResult {
        let w = &*self.world;
        let g = &w.gazetteer;
        let top_k = a
            .arg("top_k")
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(DEFAULT_TOP_K as usize);
        let payload = match a.tool {
            AtomicTool::Crop => return LocalCrop.execute(a),
            AtomicTool::Caption | AtomicTool::Ocr | AtomicTool::ImageSearch => {
                let Some(scene) = self.scene(a) else {
                    return ToolResult::error(a, "UnknownImage");
                };
                match a.tool {
                    AtomicTool::Caption => {
                        let tags: Vec<String> = scene
                            .clues
                            .iter()
                            .filter(|c| c.kind.is_tag())
                            .map(|c| c.value.clone())
                            .collect();
                        let text = if tags.is_empty() {
                            "A photograph with no distinctive scenery.".to_string()
                        } else {
                            format!("A scene showing {}.", tags.join(", "))
                        };
                        ToolPayload::Caption { text, tags }
                    }
                    AtomicTool::Ocr => ToolPayload::Ocr {
                        spans: scene
                            .clues_of(ClueKind::SignText)
                            .map(|c| OcrSpan { text: c.value.clone(), bbox: None })
                            .collect(),
                    },
                    _ => self.image_search(a, scene, top_k),
                }
            }
            AtomicTool::KnowledgeBase => {
                let q = a.arg("query").unwrap_or_default();
                ToolPayload::KnowledgeBase { records: self.kb(q) }
            }
            AtomicTool::TextSearch => {
                let q = a.arg("query").unwrap_or_default();
                let mut hits = self.search(q);
                hits.truncate(top_k);
                ToolPayload::Search { hits }
            }
            AtomicTool::Geocode => {
                let name = a.arg("name").unwrap_or_default();
                let mut results = Vec::new();
                if let Some((city, poi)) = w.poi(name) {
                    results.push(GeocodeHit { name: poi.name.clone(), point: poi.point, region_id: Some(city.clone()) });
                } else {
                    for id in g.lookup_name(name) {
                        let r = g.get(id).expect("indexed");
                        results.push(GeocodeHit { name: r.name.clone(), point: r.centroid, region_id: Some(id.clone()) });
                    }
                }
                ToolPayload::Geocode { results }
            }
        };
        ToolResult::ok(a, payload)
    }

    fn kb(&self, query: &str) -> Vec<KbRecord> {
        let w = &*self.world;
        let g = &w.gazetteer;
        let q = query.trim().to_lowercase();
        if let Some(city) = w.sign_owner(&q) {
            let name = &g.get(city).expect("city").name;
            return vec![KbRecord {
                title: query.trim().to_string(),
                region_name: Some(name.clone()),
                region_id: Some(city.clone()),
                summary: format!("A sign found in {name}."),
            }];
        }
        if let Some((city, poi)) = w.poi(&q) {
            let name = &g.get(city).expect("city").name;
            return vec![KbRecord {
                title: poi.name.clone(),
                region_name: Some(name.clone()),
                region_id: Some(city.clone()),
                summary: format!("Landmark in {name} at {}.", poi.point),
            }];
        }
        let mut out = Vec::new();
        for (id, tags) in &w.tags {
            if tags.iter().any(|t| t.value == q) {
                let r = g.get(id).expect("tagged region");
                out.push(KbRecord {
                    title: format!("{q} in {}", r.name),
                    region_name: Some(r.name.clone()),
                    region_id: Some(id.clone()),
                    summary: format!("{} is known for {q}.", r.name),
                });
            }
        }
        if out.is_empty() {
            for id in g.lookup_name(&q) {
                let r = g.get(id).expect("indexed");
                out.push(KbRecord {
                    title: r.name.clone(),
                    region_name: Some(r.name.clone()),
                    region_id: Some(id.clone()),
                    summary: format!("{} ({}).", r.name, r.level),
                });
            }
        }
        out
    }

    fn search(&self, query: &str) -> Vec<SearchHit> {
        let w = &*self.world;
        let g = &w.gazetteer;
        let q = query.trim().to_lowercase();
        if let Some(city) = w.sign_owner(&q) {
            let c = g.get(city).expect("city");
            return vec![SearchHit {
                title: query.trim().to_string(),
                snippet: format!("Photos tagged in {}.", c.name),
                coordinates: Some(c.centroid),
            }];
        }
        if let Some((_, poi)) = w.poi(&q) {
            return vec![SearchHit {
                title: poi.name.clone(),
                snippet: "Landmark page.".into(),
                coordinates: Some(poi.point),
            }];
        }
        // tag queries list the places known for the tag, without coordinates
        let mut hits = Vec::new();
        for (id, tags) in &w.tags {
            if tags.iter().any(|t| q.contains(&t.value)) {
                let r = g.get(id).expect("tagged region");
                hits.push(SearchHit {
                    title: r.name.clone(),
                    snippet: format!("{} ({})", r.name, r.level),
                    coordinates: None,
                });
            }
        }
        hits
    }

    /// Candidates ranked by score. The true city's rank depends on the
    /// scene difficulty; the remaining slots are distractors drawn from a
    /// seed derived from the queried image region, so different crops of
    /// one scene see different distractors.
    fn image_search(&self, a: &ProbeAction, scene: &SceneDescriptor, top_k: usize) -> ToolPayload {
        let g = &self.world.gazetteer;
        let bbox = a
            .arg("bbox")
            .and_then(parse_bbox)
            .map(|b| b.map(|v| format!("{v}")).join(","))
            .unwrap_or_default();
        let key = format!("{}|{bbox}", a.arg("image_ref").unwrap_or_default());
        let digest = canon::sha256_hex(key.as_bytes());
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut others: Vec<RegionId> = g
            .cities()
            .map(|c| c.id.clone())
            .filter(|id| *id != scene.truth.city_id)
            .collect();
        others.shuffle(&mut rng);
        let k = top_k.min(others.len() + 1).max(1);
        let max_rank = match scene.difficulty {
            Difficulty::Easy => 1,
            Difficulty::Medium => 3,
            Difficulty::Hard => 5,
        };
        let rank = rng.gen_range(1..=max_rank.min(k));
        let mut ranked: Vec<RegionId> = others.into_iter().take(k - 1).collect();
        ranked.insert(rank - 1, scene.truth.city_id.clone());
        ToolPayload::ImageMatch {
            candidates: ranked
                .into_iter()
                .enumerate()
                .map(|(i, id)| MatchCandidate {
                    region_id: Some(id),
                    point: None,
                    score: ((0.8 - 0.05 * i as f64) * 100.0).round() / 100.0,
                })
                .collect(),
        }
    }

    /// Adapters for all seven tools backed by this world.
    pub fn adapters(&self) -> AdapterSet {
        let mut set = AdapterSet::new();
        for tool in AtomicTool::ALL {
            let me = self.clone();
            set.insert(tool, Arc::new(move |a: &ProbeAction| me.answer(a)));
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::CapabilityModule;
    use crate::executor::EvidenceExtractor;

    fn world() -> SynthWorld {
        SynthWorld::generate(7, 4, 4).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SynthWorld::generate(7, 2, 2).unwrap();
        let b = SynthWorld::generate(7, 2, 2).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), SynthWorld::generate(8, 2, 2).unwrap().to_json());
        assert_eq!(SynthWorld::generate(1, 0, 3).unwrap_err(), SynthError::InvalidSize("0 provinces x 3 cities; both must be >= 1".into()));
    }

    #[test]
    fn json_round_trip() {
        let w = world();
        let back = SynthWorld::from_json(&w.to_json()).unwrap();
        assert_eq!(back.to_json(), w.to_json());
    }

    #[test]
    fn discs_nest_and_cities_do_not_overlap() {
        let w = SynthWorld::generate(3, 5, 7).unwrap();
        let g = &w.gazetteer;
        for r in g.regions() {
            if let Some(p) = g.parent(&r.id) {
                assert!(haversine_km(p.centroid, r.centroid) + r.radius_km <= p.radius_km, "{} not nested", r.id);
            }
        }
        let cities: Vec<_> = g.cities().collect();
        for (i, a) in cities.iter().enumerate() {
            for b in &cities[i + 1..] {
                assert!(haversine_km(a.centroid, b.centroid) > a.radius_km + b.radius_km);
            }
        }
        for (city, ps) in &w.pois {
            for p in ps {
                assert_eq!(g.cities_containing(p.point)[0].id, *city);
            }
        }
    }

    #[test]
    fn every_city_shares_a_tag_with_its_province() {
        let w = world();
        for c in w.gazetteer.cities() {
            let p = w.gazetteer.parent(&c.id).unwrap();
            assert!(!w.tags[&c.id].is_disjoint(&w.tags[&p.id]));
        }
    }

    #[test]
    fn descriptors_are_solvable_and_deterministic() {
        let w = world();
        for seed in 0..60 {
            for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
                let s = w.sample_episode(seed, d);
                assert_eq!(s, w.sample_episode(seed, d));
                assert!(!s.clues.is_empty());
                let compat = w.compatible_cities(&s.clues);
                assert!(compat.contains(&s.truth.city_id));
                match d {
                    Difficulty::Easy => {
                        assert!(s.has(ClueKind::SignText) || s.has(ClueKind::Poi));
                        assert_eq!(compat.len(), 1);
                    }
                    Difficulty::Medium => {
                        let provinces: BTreeSet<_> = compat.iter().filter_map(|c| w.province_of(c)).collect();
                        assert_eq!(provinces.len(), 1);
                    }
                    Difficulty::Hard => {
                        assert!(s.clues.iter().all(|c| matches!(c.kind, ClueKind::Vegetation | ClueKind::Terrain)));
                    }
                }
                let truth_city = w.gazetteer.get(&s.truth.city_id).unwrap();
                assert!(crate::geo::region_contains(truth_city, s.truth.point));
            }
        }
    }

    #[test]
    fn mix_counts_use_largest_remainder() {
        assert_eq!(mix_counts(300, [0.2333, 0.5667, 0.2]), [70, 170, 60]);
        assert_eq!(mix_counts(20, [0.2333, 0.5667, 0.2]), [5, 11, 4]);
        assert_eq!(mix_counts(1, [0.2333, 0.5667, 0.2]), [0, 1, 0]);
        assert_eq!(mix_counts(0, [1.0, 0.0, 0.0]), [0, 0, 0]);
    }

    fn act(tool: AtomicTool, args: &[(&'static str, &str)]) -> ProbeAction {
        let module = crate::action::CapabilityModule::ALL
            .into_iter()
            .find(|m| crate::action::is_permitted(*m, tool))
            .unwrap();
        ProbeAction::new(1, module, tool, args.iter().map(|(k, v)| (*k, v.to_string())), "")
    }

    #[test]
    fn adapters_answer_from_the_world() {
        let w = Arc::new(world());
        let scene = w.sample_episode(1, Difficulty::Hard);
        let tools = SynthTools::single(Arc::clone(&w), "img", scene.clone());

        let ocr = tools.answer(&act(AtomicTool::Ocr, &[("image_ref", "img")]));
        assert_eq!(ocr.payload, Some(ToolPayload::Ocr { spans: vec![] }));

        let (city, signs) = w.signs.iter().next().unwrap();
        let kb = tools.answer(&act(AtomicTool::KnowledgeBase, &[("query", &signs[0])]));
        let Some(ToolPayload::KnowledgeBase { records }) = kb.payload else { panic!() };
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].region_id.as_ref(), Some(city));

        let unknown = tools.answer(&act(AtomicTool::Caption, &[("image_ref", "other")]));
        assert_eq!(unknown.error.as_deref(), Some("UnknownImage"));

        let a = act(AtomicTool::ImageSearch, &[("image_ref", "img#crop=0,0,5,5")]);
        assert_eq!(tools.answer(&a), tools.answer(&a));
        let Some(ToolPayload::ImageMatch { candidates }) = tools.answer(&a).payload else { panic!() };
        assert_eq!(candidates.len(), 5);
        assert!(candidates.iter().any(|c| c.region_id.as_ref() == Some(&scene.truth.city_id)));
    }

    #[test]
    fn image_search_rank_follows_difficulty() {
        let w = Arc::new(world());
        for seed in 0..30 {
            for (d, max_rank) in [(Difficulty::Easy, 1), (Difficulty::Medium, 3), (Difficulty::Hard, 5)] {
                let scene = w.sample_episode(seed, d);
                let truth = scene.truth.city_id.clone();
                let tools = SynthTools::single(Arc::clone(&w), "img", scene);
                let bbox = format!("{seed},0,10,10");
                let r = tools.answer(&act(AtomicTool::ImageSearch, &[("image_ref", "img"), ("bbox", &bbox)]));
                let Some(ToolPayload::ImageMatch { candidates }) = r.payload else { panic!() };
                let rank = candidates.iter().position(|c| c.region_id.as_ref() == Some(&truth)).unwrap() + 1;
                assert!(rank <= max_rank, "{d:?} rank {rank}");
            }
        }
    }

    #[test]
    fn sign_extraction_recovers_the_encoded_city() {
        // every sign names its own city, so OCR evidence is exactly that city
        let w = Arc::new(SynthWorld::generate(11, 5, 20).unwrap());
        let ex = EvidenceExtractor::new(w.tag_table());
        let mut checked = 0;
        let mut next = 1;
        for (city, signs) in &w.signs {
            for sign in signs {
                let scene = SceneDescriptor {
                    clues: vec![Clue { kind: ClueKind::SignText, value: sign.clone(), salience: 1.0 }],
                    truth: Truth { point: w.gazetteer.get(city).unwrap().centroid, city_id: city.clone() },
                    difficulty: Difficulty::Easy,
                };
                let tools = SynthTools::single(Arc::clone(&w), "img", scene);
                let r = tools.answer(&ProbeAction::new(
                    1,
                    CapabilityModule::SemanticSymbol,
                    AtomicTool::Ocr,
                    [("image_ref", "img".to_string())],
                    "",
                ));
                let evs = ex.extract(&r, &w.gazetteer, &mut next).unwrap();
                assert_eq!(evs.len(), 1);
                assert_eq!(evs[0].constraint, BTreeSet::from([city.clone()]));
                checked += 1;
            }
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn thousand_city_world_has_unique_micro_clues() {
        let w = SynthWorld::generate(5, 10, 100).unwrap();
        assert_eq!(w.gazetteer.cities().count(), 1000);
        let mut seen = BTreeSet::new();
        for s in w.signs.values().flatten() {
            assert!(seen.insert(s.to_lowercase()), "duplicate sign {s}");
        }
        for p in w.pois.values().flatten() {
            assert!(seen.insert(p.name.to_lowercase()), "duplicate poi {}", p.name);
        }
    }
}
