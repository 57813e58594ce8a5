//! Benchmark datasets and the metric suite: distance-threshold accuracy,
//! city accuracy by name and by reverse geocoding, location compliance,
//! stratified reporting and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_km, Gazetteer, GeoPoint};
use crate::synth::SceneDescriptor;

pub const DEFAULT_THRESHOLDS_KM: [u32; 5] = [1, 25, 200, 750, 2500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneCategory {
    Rural,
    Urban,
    AerialDistant,
    CloseUp,
}

impl SceneCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            SceneCategory::Rural => "rural",
            SceneCategory::Urban => "urban",
            SceneCategory::AerialDistant => "aerial_distant",
            SceneCategory::CloseUp => "close_up",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Media {
    ImagePath(String),
    Descriptor(SceneDescriptor),
}

/// One benchmark item. On disk, exactly one of `image_path` and
/// `descriptor` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct BenchmarkSample {
    pub id: String,
    pub media: Media,
    pub truth_point: GeoPoint,
    pub truth_city: String,
    pub truth_province: String,
    pub scene_category: SceneCategory,
    pub difficulty: Difficulty,
    pub clue_tags: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptor: Option<SceneDescriptor>,
    truth_point: GeoPoint,
    truth_city: String,
    truth_province: String,
    scene_category: SceneCategory,
    difficulty: Difficulty,
    #[serde(default)]
    clue_tags: Vec<String>,
}

impl TryFrom<RawSample> for BenchmarkSample {
    type Error = String;

    fn try_from(r: RawSample) -> Result<Self, String> {
        let media = match (r.image_path, r.descriptor) {
            (Some(p), None) => Media::ImagePath(p),
            (None, Some(d)) => Media::Descriptor(d),
            _ => return Err("exactly one of image_path and descriptor must be present".into()),
        };
        Ok(BenchmarkSample {
            id: r.id,
            media,
            truth_point: r.truth_point,
            truth_city: r.truth_city,
            truth_province: r.truth_province,
            scene_category: r.scene_category,
            difficulty: r.difficulty,
            clue_tags: r.clue_tags,
        })
    }
}

impl From<BenchmarkSample> for RawSample {
    fn from(s: BenchmarkSample) -> Self {
        let (image_path, descriptor) = match s.media {
            Media::ImagePath(p) => (Some(p), None),
            Media::Descriptor(d) => (None, Some(d)),
        };
        RawSample {
            id: s.id,
            image_path,
            descriptor,
            truth_point: s.truth_point,
            truth_city: s.truth_city,
            truth_province: s.truth_province,
            scene_category: s.scene_category,
            difficulty: s.difficulty,
            clue_tags: s.clue_tags,
        }
    }
}

/// A method's answer for one sample. `city_name` is absent for methods
/// that only output coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub point: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field {field}: {message}")]
    Validation { line: usize, field: String, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no predictions")]
    EmptyPredictions,
    #[error("prediction for unknown sample {0}")]
    UnmatchedPrediction(String),
    #[error("more than one prediction for sample {0}")]
    DuplicatePrediction(String),
    #[error("io: {0}")]
    Io(String),
}

/// Percentage stored as integer hundredths, so reports print exactly the
/// two decimals that were computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(u32);

impl Percent {
    pub const ZERO: Percent = Percent(0);
    pub const HUNDRED: Percent = Percent(10_000);

    /// `100 * k / n`, rounded half-up to two decimals.
    pub fn from_ratio(k: usize, n: usize) -> Percent {
        assert!(n > 0 && k <= n, "ratio {k}/{n}");
        let (k, n) = (k as u64, n as u64);
        Percent(((20_000 * k + n) / (2 * n)) as u32)
    }

    pub fn from_hundredths(h: u32) -> Option<Percent> {
        (h <= 10_000).then_some(Percent(h))
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Parses `"52.33"`, `"100"` or `"7.5"`; at most two decimals.
    pub fn parse(s: &str) -> Option<Percent> {
        let s = s.trim();
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() || frac.len() > 2 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return None;
        }
        let int: u32 = int.parse().ok()?;
        let frac: u32 = format!("{frac:0<2}").parse().ok()?;
        Percent::from_hundredths(int.checked_mul(100)?.checked_add(frac)?)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = format!("{}.{:02}", self.0 / 100, self.0 % 100);
        f.pad(&s)
    }
}

impl Serialize for Percent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        let h = (v * 100.0).round();
        if !(0.0..=10_000.0).contains(&h) {
            return Err(serde::de::Error::custom(format!("percentage {v} out of range")));
        }
        Ok(Percent(h as u32))
    }
}

/// Pairs every sample with its prediction (if any), rejecting predictions
/// for unknown samples and duplicates.
fn pair<'a>(
    preds: &'a [Prediction],
    samples: &'a [BenchmarkSample],
) -> Result<Vec<(&'a BenchmarkSample, Option<&'a Prediction>)>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in preds {
        if !ids.contains(p.sample_id.as_str()) {
            return Err(EvalError::UnmatchedPrediction(p.sample_id.clone()));
        }
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }
    Ok(samples.iter().map(|s| (s, by_id.get(s.id.as_str()).copied())).collect())
}

fn share<'a, I>(pairs: I, n: usize, hit: impl Fn(&BenchmarkSample, &Prediction) -> bool) -> Percent
where
    I: IntoIterator<Item = &'a (&'a BenchmarkSample, Option<&'a Prediction>)>,
{
    let k = pairs
        .into_iter()
        .filter(|(s, p)| p.is_some_and(|p| hit(s, p)))
        .count();
    Percent::from_ratio(k, n)
}

/// Share of samples whose prediction lies within each threshold (inclusive).
/// Samples without a prediction count as misses.
pub fn threshold_accuracy(
    preds: &[Prediction],
    samples: &[BenchmarkSample],
    thresholds_km: &[u32],
) -> Result<BTreeMap<u32, Percent>, EvalError> {
    let pairs = pair(preds, samples)?;
    Ok(thresholds_km
        .iter()
        .map(|&t| {
            let acc = share(&pairs, pairs.len(), |s, p| haversine_km(p.point, s.truth_point) <= t as f64);
            (t, acc)
        })
        .collect())
}

/// Share of samples whose predicted city name matches the truth after
/// normalization.
pub fn acc_city(preds: &[Prediction], samples: &[BenchmarkSample], g: &Gazetteer) -> Result<Percent, EvalError> {
    let pairs = pair(preds, samples)?;
    let norm = g.normalizer();
    Ok(share(&pairs, pairs.len(), |s, p| {
        p.city_name
            .as_deref()
            .is_some_and(|c| norm.normalize(c) == norm.normalize(&s.truth_city))
    }))
}

/// Share of samples whose predicted point reverse-geocodes to the truth city.
pub fn acc_loglat(preds: &[Prediction], samples: &[BenchmarkSample], g: &Gazetteer) -> Result<Percent, EvalError> {
    let pairs = pair(preds, samples)?;
    let norm = g.normalizer();
    Ok(share(&pairs, pairs.len(), |s, p| {
        g.reverse_geocode(p.point)
            .is_some_and(|c| norm.normalize(&c.name) == norm.normalize(&s.truth_city))
    }))
}

/// Agreement between each prediction's city name and the city its point
/// reverse-geocodes to. Truth is not consulted. `None` when no prediction
/// carries a city name.
pub fn location_compliance(preds: &[Prediction], g: &Gazetteer) -> Result<Option<Percent>, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    if preds.iter().all(|p| p.city_name.is_none()) {
        return Ok(None);
    }
    let norm = g.normalizer();
    let k = preds
        .iter()
        .filter(|p| {
            let Some(name) = p.city_name.as_deref() else { return false };
            g.reverse_geocode(p.point)
                .is_some_and(|c| norm.normalize(&c.name) == norm.normalize(name))
        })
        .count();
    Ok(Some(Percent::from_ratio(k, preds.len())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub threshold_acc: BTreeMap<u32, Percent>,
    pub acc_city: Percent,
    pub acc_loglat: Percent,
    pub location_compliance: Option<Percent>,
}

impl Metrics {
    pub fn compute(
        preds: &[Prediction],
        samples: &[BenchmarkSample],
        g: &Gazetteer,
        thresholds_km: &[u32],
    ) -> Result<Metrics, EvalError> {
        let compliance = match location_compliance(preds, g) {
            Ok(c) => c,
            Err(EvalError::EmptyPredictions) => None,
            Err(e) => return Err(e),
        };
        Ok(Metrics {
            n: samples.len(),
            threshold_acc: threshold_accuracy(preds, samples, thresholds_km)?,
            acc_city: acc_city(preds, samples, g)?,
            acc_loglat: acc_loglat(preds, samples, g)?,
            location_compliance: compliance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata {
    pub scene_category: BTreeMap<SceneCategory, Metrics>,
    pub difficulty: BTreeMap<Difficulty, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Experiment row label, e.g. `w/o image search`.
    pub condition: String,
    pub overall: Metrics,
    pub strata: Strata,
}

/// Recomputes `metrics` over each group of samples sharing a key.
pub fn stratify<K: Ord + Copy>(
    preds: &[Prediction],
    samples: &[BenchmarkSample],
    g: &Gazetteer,
    thresholds_km: &[u32],
    key: impl Fn(&BenchmarkSample) -> K,
) -> Result<BTreeMap<K, Metrics>, EvalError> {
    pair(preds, samples)?;
    let mut groups: BTreeMap<K, Vec<BenchmarkSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(key(s)).or_default().push(s.clone());
    }
    groups
        .into_iter()
        .map(|(k, group)| {
            let ids: BTreeSet<&str> = group.iter().map(|s| s.id.as_str()).collect();
            let sub: Vec<Prediction> = preds.iter().filter(|p| ids.contains(p.sample_id.as_str())).cloned().collect();
            Metrics::compute(&sub, &group, g, thresholds_km).map(|m| (k, m))
        })
        .collect()
}

pub fn evaluate(
    condition: &str,
    preds: &[Prediction],
    samples: &[BenchmarkSample],
    g: &Gazetteer,
    thresholds_km: &[u32],
) -> Result<MetricsReport, EvalError> {
    Ok(MetricsReport {
        condition: condition.to_string(),
        overall: Metrics::compute(preds, samples, g, thresholds_km)?,
        strata: Strata {
            scene_category: stratify(preds, samples, g, thresholds_km, |s| s.scene_category)?,
            difficulty: stratify(preds, samples, g, thresholds_km, |s| s.difficulty)?,
        },
    })
}

fn cell(p: Option<Percent>) -> String {
    p.map_or_else(|| "/".to_string(), |p| p.to_string())
}

/// Aligned text table: one row overall, then one per stratum.
pub fn render_text(r: &MetricsReport) -> String {
    let thresholds: Vec<u32> = r.overall.threshold_acc.keys().copied().collect();
    let mut header = vec!["group".to_string(), "n".to_string()];
    header.extend(thresholds.iter().map(|t| format!("{t}km")));
    header.extend(["ACC-City", "ACC-Loglat", "Location Compliance"].map(String::from));

    let row = |label: String, m: &Metrics| {
        let mut cells = vec![label, m.n.to_string()];
        cells.extend(thresholds.iter().map(|t| cell(m.threshold_acc.get(t).copied())));
        cells.push(m.acc_city.to_string());
        cells.push(m.acc_loglat.to_string());
        cells.push(cell(m.location_compliance));
        cells
    };
    let mut rows = vec![header, row("all".into(), &r.overall)];
    for (k, m) in &r.strata.scene_category {
        rows.push(row(format!("scene={}", k.as_str()), m));
    }
    for (k, m) in &r.strata.difficulty {
        rows.push(row(format!("difficulty={}", k.as_str()), m));
    }

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("condition: {}\n", r.condition);
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn render_json(r: &MetricsReport) -> String {
    let v = serde_json::to_value(r).expect("report serializes");
    serde_json::to_string_pretty(&v).expect("JSON value serializes")
}

/// LaTeX row in threshold-accuracy layout: `label & 1km & 25km & ...`.
pub fn latex_threshold_row(label: &str, m: &Metrics) -> String {
    let mut cells = vec![label.to_string()];
    cells.extend(m.threshold_acc.values().map(|p| p.to_string()));
    cells.join(" & ")
}

/// LaTeX row in city-accuracy layout: `label & ACC-City & ACC-Loglat & Compliance`.
pub fn latex_city_row(label: &str, m: &Metrics) -> String {
    [label.to_string(), m.acc_city.to_string(), m.acc_loglat.to_string(), cell(m.location_compliance)].join(" & ")
}

fn field<T: serde::de::DeserializeOwned>(
    obj: &serde_json::Map<String, serde_json::Value>,
    name: &str,
    line: usize,
) -> Result<T, EvalError> {
    let v = obj.get(name).cloned().unwrap_or(serde_json::Value::Null);
    serde_json::from_value(v).map_err(|e| EvalError::Validation {
        line,
        field: name.to_string(),
        message: e.to_string(),
    })
}

/// Parses one dataset line; `line` is used in errors.
fn parse_sample(text: &str, line: usize) -> Result<BenchmarkSample, EvalError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| EvalError::Parse { line, message: e.to_string() })?;
    let obj = v.as_object().ok_or_else(|| EvalError::Parse { line, message: "expected a JSON object".into() })?;
    const KNOWN: [&str; 9] = [
        "id",
        "image_path",
        "descriptor",
        "truth_point",
        "truth_city",
        "truth_province",
        "scene_category",
        "difficulty",
        "clue_tags",
    ];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(EvalError::Validation { line, field: k.clone(), message: "unknown field".into() });
    }
    let image_path: Option<String> = field(obj, "image_path", line)?;
    let descriptor: Option<SceneDescriptor> = field(obj, "descriptor", line)?;
    let media = match (image_path, descriptor) {
        (Some(p), None) => Media::ImagePath(p),
        (None, Some(d)) => Media::Descriptor(d),
        (Some(_), Some(_)) | (None, None) => {
            return Err(EvalError::Validation {
                line,
                field: "media".into(),
                message: "exactly one of image_path and descriptor must be present".into(),
            })
        }
    };
    let clue_tags: Option<Vec<String>> = field(obj, "clue_tags", line)?;
    Ok(BenchmarkSample {
        id: field(obj, "id", line)?,
        media,
        truth_point: field(obj, "truth_point", line)?,
        truth_city: field(obj, "truth_city", line)?,
        truth_province: field(obj, "truth_province", line)?,
        scene_category: field(obj, "scene_category", line)?,
        difficulty: field(obj, "difficulty", line)?,
        clue_tags: clue_tags.unwrap_or_default(),
    })
}

/// Parses JSONL dataset text. Blank lines are skipped; ids must be unique.
pub fn parse_dataset(text: &str) -> Result<Vec<BenchmarkSample>, EvalError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let s = parse_sample(raw, line)?;
        if !seen.insert(s.id.clone()) {
            return Err(EvalError::Validation { line, field: "id".into(), message: format!("duplicate id {}", s.id) });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkSample>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
}

pub fn write_dataset(path: &Path, samples: &[BenchmarkSample]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}", crate::canon::canonical_json(s))?;
    }
    f.flush()
}
