//! Geographic primitives: points, great-circle distance, the administrative
//! region tree and city-name normalization.
//!
//! Regions are modelled as discs (centroid + radius) arranged in a strict
//! Country > Province > City > District hierarchy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::canon;

/// Mean Earth radius in kilometres (spherical model).
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Default search radius for the nearest-city fallback of [`Gazetteer::reverse_geocode`].
pub const DEFAULT_FALLBACK_RADIUS_KM: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} is not finite")]
    Longitude(f64),
}

/// A point on the sphere, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    /// Builds a point, normalizing longitude into `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !lon.is_finite() {
            return Err(GeoError::Longitude(lon));
        }
        Ok(GeoPoint {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(de)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.5}, {:.5})", self.lat, self.lon)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Great-circle distance in kilometres on a sphere of radius [`EARTH_RADIUS_KM`].
///
/// Differences are taken as absolute values so the result is bit-for-bit
/// symmetric in its arguments.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = (a.lat - b.lat).abs().to_radians();
    let dlon = (a.lon - b.lon).abs().to_radians();
    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Opaque, unique identifier of an administrative region.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(String);

impl RegionId {
    pub fn new(id: impl Into<String>) -> Self {
        RegionId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RegionId {
    fn from(s: &str) -> Self {
        RegionId(s.to_string())
    }
}

/// Administrative level, coarsest first. `Ord` follows depth in the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLevel {
    Country,
    Province,
    City,
    District,
}

impl RegionLevel {
    pub fn child(self) -> Option<RegionLevel> {
        match self {
            RegionLevel::Country => Some(RegionLevel::Province),
            RegionLevel::Province => Some(RegionLevel::City),
            RegionLevel::City => Some(RegionLevel::District),
            RegionLevel::District => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionLevel::Country => "country",
            RegionLevel::Province => "province",
            RegionLevel::City => "city",
            RegionLevel::District => "district",
        }
    }
}

impl fmt::Display for RegionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdminRegion {
    pub id: RegionId,
    pub level: RegionLevel,
    pub name: String,
    pub parent_id: Option<RegionId>,
    pub centroid: GeoPoint,
    pub radius_km: f64,
}

/// True iff `p` lies inside the region's disc. The boundary is inclusive.
pub fn region_contains(r: &AdminRegion, p: GeoPoint) -> bool {
    haversine_km(r.centroid, p) <= r.radius_km
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GazetteerError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: region {id}: {message}")]
    Invalid {
        line: usize,
        id: String,
        message: String,
    },
    #[error("gazetteer has no regions")]
    Empty,
    #[error("io: {0}")]
    Io(String),
}

/// On-disk record shape of a region (one element of the gazetteer JSON array).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: String,
    pub level: RegionLevel,
    pub name: String,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub lat: f64,
    pub lon: f64,
    pub radius_km: f64,
}

impl From<&AdminRegion> for RegionRecord {
    fn from(r: &AdminRegion) -> Self {
        RegionRecord {
            id: r.id.0.clone(),
            level: r.level,
            name: r.name.clone(),
            parent_id: r.parent_id.as_ref().map(|p| p.0.clone()),
            lat: r.centroid.lat,
            lon: r.centroid.lon,
            radius_km: r.radius_km,
        }
    }
}

/// Immutable, validated region forest with name and hierarchy indexes.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    regions: BTreeMap<RegionId, AdminRegion>,
    name_index: BTreeMap<String, Vec<RegionId>>,
    children: BTreeMap<RegionId, Vec<RegionId>>,
    normalizer: CityNameNormalizer,
}

impl Gazetteer {
    /// Validates and indexes `regions`. Error line numbers are 1-based
    /// positions in the input list.
    pub fn new(regions: Vec<AdminRegion>) -> Result<Self, GazetteerError> {
        let lines: Vec<usize> = (1..=regions.len()).collect();
        Self::build(regions, &lines, CityNameNormalizer::default())
    }

    pub fn with_normalizer(
        regions: Vec<AdminRegion>,
        normalizer: CityNameNormalizer,
    ) -> Result<Self, GazetteerError> {
        let lines: Vec<usize> = (1..=regions.len()).collect();
        Self::build(regions, &lines, normalizer)
    }

    fn build(
        regions: Vec<AdminRegion>,
        lines: &[usize],
        normalizer: CityNameNormalizer,
    ) -> Result<Self, GazetteerError> {
        if regions.is_empty() {
            return Err(GazetteerError::Empty);
        }
        let invalid = |line: usize, id: &RegionId, message: String| GazetteerError::Invalid {
            line,
            id: id.0.clone(),
            message,
        };

        let mut line_of = BTreeMap::new();
        let mut by_id = BTreeMap::new();
        for (region, &line) in regions.into_iter().zip(lines) {
            if region.id.0.is_empty() {
                return Err(invalid(line, &region.id, "empty id".into()));
            }
            if !(region.radius_km.is_finite() && region.radius_km > 0.0) {
                return Err(invalid(
                    line,
                    &region.id,
                    format!("radius_km must be positive, got {}", region.radius_km),
                ));
            }
            if region.name.trim().is_empty() {
                return Err(invalid(line, &region.id, "empty name".into()));
            }
            if by_id.contains_key(&region.id) {
                return Err(invalid(line, &region.id, "duplicate id".into()));
            }
            line_of.insert(region.id.clone(), line);
            by_id.insert(region.id.clone(), region);
        }

        let mut children: BTreeMap<RegionId, Vec<RegionId>> = BTreeMap::new();
        for region in by_id.values() {
            let line = line_of[&region.id];
            match (&region.parent_id, region.level) {
                (None, RegionLevel::Country) => {}
                (None, level) => {
                    return Err(invalid(
                        line,
                        &region.id,
                        format!("{level} region must have a parent"),
                    ))
                }
                (Some(_), RegionLevel::Country) => {
                    return Err(invalid(line, &region.id, "country must not have a parent".into()))
                }
                (Some(pid), level) => {
                    let parent = by_id.get(pid).ok_or_else(|| {
                        invalid(line, &region.id, format!("unknown parent {pid}"))
                    })?;
                    if parent.level.child() != Some(level) {
                        return Err(invalid(
                            line,
                            &region.id,
                            format!("{level} cannot be a child of {}", parent.level),
                        ));
                    }
                    let d = haversine_km(parent.centroid, region.centroid);
                    if d > parent.radius_km {
                        return Err(invalid(
                            line,
                            &region.id,
                            format!(
                                "centroid is {d:.3} km from parent {pid}, outside its {:.3} km disc",
                                parent.radius_km
                            ),
                        ));
                    }
                    children.entry(pid.clone()).or_default().push(region.id.clone());
                }
            }
        }
        // Levels strictly increase along parent links, so the forest is acyclic.

        let mut name_index: BTreeMap<String, Vec<RegionId>> = BTreeMap::new();
        for region in by_id.values() {
            let key = normalizer.normalize(&region.name);
            if !key.is_empty() {
                name_index.entry(key).or_default().push(region.id.clone());
            }
        }

        Ok(Gazetteer {
            regions: by_id,
            name_index,
            children,
            normalizer,
        })
    }

    /// Parses a JSON array of [`RegionRecord`]s. Errors name the source line
    /// on which the offending record starts.
    pub fn from_json_str(text: &str) -> Result<Self, GazetteerError> {
        Self::from_json_str_with(text, CityNameNormalizer::default())
    }

    pub fn from_json_str_with(
        text: &str,
        normalizer: CityNameNormalizer,
    ) -> Result<Self, GazetteerError> {
        let raw: Vec<&RawValue> = serde_json::from_str(text).map_err(|e| GazetteerError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut regions = Vec::with_capacity(raw.len());
        let mut lines = Vec::with_capacity(raw.len());
        for item in raw {
            let offset = item.get().as_ptr() as usize - text.as_ptr() as usize;
            let line = line_at(text, offset);
            let rec: RegionRecord =
                serde_json::from_str(item.get()).map_err(|e| GazetteerError::Parse {
                    line: line + e.line() - 1,
                    message: e.to_string(),
                })?;
            let id = RegionId(rec.id.clone());
            let centroid = GeoPoint::new(rec.lat, rec.lon).map_err(|e| GazetteerError::Invalid {
                line,
                id: id.0.clone(),
                message: e.to_string(),
            })?;
            regions.push(AdminRegion {
                id,
                level: rec.level,
                name: rec.name,
                parent_id: rec.parent_id.map(RegionId),
                centroid,
                radius_km: rec.radius_km,
            });
            lines.push(line);
        }
        Self::build(regions, &lines, normalizer)
    }

    pub fn load(path: &Path) -> Result<Self, GazetteerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GazetteerError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Records in id order.
    pub fn to_records(&self) -> Vec<RegionRecord> {
        self.regions.values().map(RegionRecord::from).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_records()).expect("records serialize")
    }

    /// SHA-256 of the canonical record list; recorded in trace headers.
    pub fn content_hash(&self) -> String {
        canon::sha256_hex(canon::canonical_json(&self.to_records()).as_bytes())
    }

    pub fn get(&self, id: &RegionId) -> Option<&AdminRegion> {
        self.regions.get(id)
    }

    pub fn contains_id(&self, id: &RegionId) -> bool {
        self.regions.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> impl Iterator<Item = &AdminRegion> {
        self.regions.values()
    }

    pub fn children(&self, id: &RegionId) -> &[RegionId] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent(&self, id: &RegionId) -> Option<&AdminRegion> {
        self.regions
            .get(id)
            .and_then(|r| r.parent_id.as_ref())
            .and_then(|p| self.regions.get(p))
    }

    pub fn roots(&self) -> impl Iterator<Item = &AdminRegion> {
        self.regions.values().filter(|r| r.parent_id.is_none())
    }

    pub fn cities(&self) -> impl Iterator<Item = &AdminRegion> {
        self.regions.values().filter(|r| r.level == RegionLevel::City)
    }

    /// Regions without children, in id order.
    pub fn leaves(&self) -> impl Iterator<Item = &AdminRegion> {
        self.regions
            .values()
            .filter(|r| !self.children.contains_key(&r.id))
    }

    /// Strict ancestors, nearest first.
    pub fn ancestors(&self, id: &RegionId) -> Vec<RegionId> {
        let mut out = Vec::new();
        let mut cur = self.regions.get(id).and_then(|r| r.parent_id.clone());
        while let Some(pid) = cur {
            cur = self.regions.get(&pid).and_then(|r| r.parent_id.clone());
            out.push(pid);
        }
        out
    }

    /// True iff `ancestor` is a strict ancestor of `id`.
    pub fn is_ancestor(&self, ancestor: &RegionId, id: &RegionId) -> bool {
        let Some(target) = self.regions.get(ancestor) else {
            return false;
        };
        let mut cur = self.regions.get(id);
        while let Some(r) = cur {
            if r.level <= target.level {
                return false;
            }
            match &r.parent_id {
                Some(p) if p == ancestor => return true,
                Some(p) => cur = self.regions.get(p),
                None => return false,
            }
        }
        false
    }

    /// The nearest ancestor-or-self at the given level.
    pub fn ancestor_at(&self, id: &RegionId, level: RegionLevel) -> Option<&AdminRegion> {
        let mut cur = self.regions.get(id);
        while let Some(r) = cur {
            if r.level == level {
                return Some(r);
            }
            if r.level < level {
                return None;
            }
            cur = r.parent_id.as_ref().and_then(|p| self.regions.get(p));
        }
        None
    }

    /// All leaf regions in the subtree rooted at `id` (including `id` itself
    /// when it is a leaf).
    pub fn leaves_under(&self, id: &RegionId) -> BTreeSet<RegionId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.clone()];
        while let Some(cur) = stack.pop() {
            match self.children.get(&cur) {
                Some(kids) => stack.extend(kids.iter().cloned()),
                None => {
                    out.insert(cur);
                }
            }
        }
        out
    }

    pub fn normalizer(&self) -> &CityNameNormalizer {
        &self.normalizer
    }

    /// Region ids whose normalized name equals the normalized `name`.
    pub fn lookup_name(&self, name: &str) -> &[RegionId] {
        let key = self.normalizer.normalize(name);
        self.name_index.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Normalized names present in the index, with their region ids.
    pub fn names(&self) -> impl Iterator<Item = (&str, &[RegionId])> {
        self.name_index.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// [`Gazetteer::reverse_geocode_with`] using the default 100 km fallback.
    pub fn reverse_geocode(&self, p: GeoPoint) -> Option<&AdminRegion> {
        self.reverse_geocode_with(p, DEFAULT_FALLBACK_RADIUS_KM)
    }

    /// Maps a point to a City-level region.
    ///
    /// Among cities whose disc contains `p`, the one with the nearest centroid
    /// wins. When no disc contains the point, the nearest centroid within
    /// `fallback_km` is used instead. Ties go to the smaller region id.
    pub fn reverse_geocode_with(&self, p: GeoPoint, fallback_km: f64) -> Option<&AdminRegion> {
        let mut best_inside: Option<(f64, &AdminRegion)> = None;
        let mut best_any: Option<(f64, &AdminRegion)> = None;
        // iteration is in id order, so strict `<` keeps the smaller id on ties
        for city in self.cities() {
            let d = haversine_km(city.centroid, p);
            if d <= city.radius_km && best_inside.map_or(true, |(bd, _)| d < bd) {
                best_inside = Some((d, city));
            }
            if best_any.map_or(true, |(bd, _)| d < bd) {
                best_any = Some((d, city));
            }
        }
        if let Some((_, c)) = best_inside {
            return Some(c);
        }
        best_any.filter(|(d, _)| *d <= fallback_km).map(|(_, c)| c)
    }

    /// City regions whose disc contains `p`, in id order.
    pub fn cities_containing(&self, p: GeoPoint) -> Vec<&AdminRegion> {
        self.cities().filter(|c| region_contains(c, p)).collect()
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizerError {
    #[error("alias cycle through {0:?}")]
    AliasCycle(String),
}

/// Canonicalizes free-form city names for comparison.
///
/// Steps: trim, lowercase, strip configured suffixes (repeatedly), then map
/// through the alias table. Aliases are resolved transitively at
/// construction, which makes [`CityNameNormalizer::normalize`] idempotent.
#[derive(Debug, Clone, PartialEq)]
pub struct CityNameNormalizer {
    suffixes: Vec<String>,
    aliases: BTreeMap<String, String>,
}

impl Default for CityNameNormalizer {
    fn default() -> Self {
        CityNameNormalizer {
            suffixes: default_suffixes(),
            aliases: BTreeMap::new(),
        }
    }
}

fn default_suffixes() -> Vec<String> {
    vec!["市".into(), " city".into(), " shi".into()]
}

impl CityNameNormalizer {
    pub fn new(
        suffixes: impl IntoIterator<Item = String>,
        aliases: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, NormalizerError> {
        let base = CityNameNormalizer {
            suffixes: suffixes.into_iter().map(|s| s.to_lowercase()).collect(),
            aliases: BTreeMap::new(),
        };
        let raw: BTreeMap<String, String> = aliases
            .into_iter()
            .map(|(k, v)| (base.strip(&k), base.strip(&v)))
            .filter(|(k, v)| !k.is_empty() && k != v)
            .collect();
        let mut resolved = BTreeMap::new();
        for key in raw.keys() {
            let mut seen = BTreeSet::from([key.clone()]);
            let mut cur = raw[key].clone();
            while let Some(next) = raw.get(&cur) {
                if !seen.insert(cur.clone()) {
                    return Err(NormalizerError::AliasCycle(key.clone()));
                }
                cur = next.clone();
            }
            if cur == *key {
                return Err(NormalizerError::AliasCycle(key.clone()));
            }
            resolved.insert(key.clone(), cur);
        }
        Ok(CityNameNormalizer {
            suffixes: base.suffixes,
            aliases: resolved,
        })
    }

    /// Default suffixes plus the given aliases.
    pub fn with_aliases(
        aliases: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, NormalizerError> {
        Self::new(default_suffixes(), aliases)
    }

    fn strip(&self, raw: &str) -> String {
        let mut s = raw.trim().to_lowercase();
        loop {
            let before = s.len();
            for suf in &self.suffixes {
                if s.len() > suf.len() && s.ends_with(suf.as_str()) {
                    s.truncate(s.len() - suf.len());
                    s = s.trim_end().to_string();
                }
            }
            if s.len() == before {
                return s;
            }
        }
    }

    pub fn normalize(&self, raw: &str) -> String {
        let s = self.strip(raw);
        match self.aliases.get(&s) {
            Some(target) => target.clone(),
            None => s,
        }
    }
}

/// [`CityNameNormalizer::normalize`] with the default configuration.
pub fn normalize_city_name(raw: &str) -> String {
    CityNameNormalizer::default().normalize(raw)
}
