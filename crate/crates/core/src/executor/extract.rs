//! Turns OK tool results into evidence. A payload that names nothing in the
//! gazetteer yields no evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ToolPayload, ToolResult};
use crate::geo::{Gazetteer, GeoPoint, RegionId};
use crate::state::{Evidence, EvidenceId, Provenance, StateError};

/// OCR text or a knowledge-base record naming a region; geocoder hits.
pub const NAMED_REGION_CONFIDENCE: f64 = 0.9;
/// Search hit whose coordinates fall in exactly one city disc.
pub const SEARCH_HIT_CONFIDENCE: f64 = 0.7;
/// Environment tag mapped through the tag table.
pub const CAPTION_CONFIDENCE: f64 = 0.5;

/// Environment tag → regions carrying it. Keys are stored lowercased and
/// trimmed; loaded from a JSON object `{"tag": ["region-id", ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagTable(BTreeMap<String, BTreeSet<RegionId>>);

impl TagTable {
    pub fn new(entries: impl IntoIterator<Item = (String, BTreeSet<RegionId>)>) -> Self {
        let mut map: BTreeMap<String, BTreeSet<RegionId>> = BTreeMap::new();
        for (k, v) in entries {
            map.entry(normalize_tag(&k)).or_default().extend(v);
        }
        TagTable(map)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let raw: BTreeMap<String, BTreeSet<RegionId>> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::new(raw))
    }

    pub fn get(&self, tag: &str) -> Option<&BTreeSet<RegionId>> {
        self.0.get(&normalize_tag(tag))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Table keys that occur in free caption text, in key order.
    fn tags_in_text(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        self.0
            .keys()
            .filter(|k| contains_bounded(&lower, k))
            .cloned()
            .collect()
    }

    /// Region ids referenced by the table that are missing from `g`.
    pub fn unknown_regions(&self, g: &Gazetteer) -> Vec<RegionId> {
        self.0
            .values()
            .flatten()
            .filter(|id| !g.contains_id(id))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn normalize_tag(tag: &str) -> String {
    tag.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Substring match where the neighbours of the match are not ASCII
/// alphanumerics. CJK neighbours count as boundaries.
fn contains_bounded(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(i, m)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + m.len()..].chars().next();
        !before.is_some_and(|c| c.is_ascii_alphanumeric())
            && !after.is_some_and(|c| c.is_ascii_alphanumeric())
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvidenceExtractor {
    pub tag_table: TagTable,
}

impl EvidenceExtractor {
    pub fn new(tag_table: TagTable) -> Self {
        EvidenceExtractor { tag_table }
    }

    /// Extracts evidence from one result, numbering it from `next_id`.
    ///
    /// Multi-item payloads (search hits, match candidates, OCR spans,
    /// records) produce one disjunctive piece of evidence whose constraint is
    /// the union of the regions the items point at. Caption tags each
    /// produce their own evidence because every tag holds simultaneously.
    pub fn extract(
        &self,
        r: &ToolResult,
        g: &Gazetteer,
        next_id: &mut u64,
    ) -> Result<Vec<Evidence>, StateError> {
        let Some(payload) = r.payload.as_ref().filter(|_| r.is_ok()) else {
            return Ok(Vec::new());
        };
        let digest = r.payload_sha256();
        let mut out = Vec::new();
        let mut push = |claim: String, constraint: BTreeSet<RegionId>, confidence: f64, anchor: Option<GeoPoint>| {
            if constraint.is_empty() {
                return;
            }
            out.push(Evidence {
                id: EvidenceId(*next_id),
                source_action_id: r.action_id,
                claim,
                constraint,
                confidence,
                provenance: Provenance {
                    action_id: r.action_id,
                    payload_sha256: digest.clone(),
                },
                anchor,
                active: true,
            });
            *next_id += 1;
        };

        match payload {
            ToolPayload::Caption { text, tags } => {
                let tags = if tags.is_empty() {
                    self.tag_table.tags_in_text(text)
                } else {
                    tags.clone()
                };
                let mut seen = BTreeSet::new();
                for tag in tags {
                    let key = normalize_tag(&tag);
                    if !seen.insert(key.clone()) {
                        continue;
                    }
                    if let Some(regions) = self.tag_table.get(&key) {
                        for id in regions {
                            known(g, id)?;
                        }
                        push(format!("scene shows \"{key}\""), regions.clone(), CAPTION_CONFIDENCE, None);
                    }
                }
            }
            ToolPayload::Crop { .. } => {}
            ToolPayload::Ocr { spans } => {
                let mut regions = BTreeSet::new();
                let mut texts = Vec::new();
                for span in spans {
                    let named = named_regions(g, &span.text);
                    if !named.is_empty() {
                        texts.push(span.text.trim().to_string());
                        regions.extend(named);
                    }
                }
                push(
                    format!("text in image reads {}", quote_list(&texts)),
                    regions,
                    NAMED_REGION_CONFIDENCE,
                    None,
                );
            }
            ToolPayload::KnowledgeBase { records } => {
                let mut regions = BTreeSet::new();
                let mut titles = Vec::new();
                for rec in records {
                    let before = regions.len();
                    if let Some(id) = &rec.region_id {
                        known(g, id)?;
                        regions.insert(id.clone());
                    } else if let Some(name) = &rec.region_name {
                        regions.extend(g.lookup_name(name).iter().cloned());
                    }
                    if regions.len() > before {
                        titles.push(rec.title.clone());
                    }
                }
                push(
                    format!("knowledge base places {}", quote_list(&titles)),
                    regions,
                    NAMED_REGION_CONFIDENCE,
                    None,
                );
            }
            ToolPayload::Search { hits } => {
                let mut regions = BTreeSet::new();
                let mut titles = Vec::new();
                for hit in hits {
                    if let Some(city) = hit.coordinates.and_then(|p| sole_city(g, p)) {
                        regions.insert(city);
                        titles.push(hit.title.clone());
                    }
                }
                push(
                    format!("search hits located: {}", quote_list(&titles)),
                    regions,
                    SEARCH_HIT_CONFIDENCE,
                    None,
                );
            }
            ToolPayload::ImageMatch { candidates } => {
                let mut regions = BTreeSet::new();
                let mut best: f64 = 0.0;
                for c in candidates {
                    let region = match (&c.region_id, c.point) {
                        (Some(id), _) => {
                            known(g, id)?;
                            Some(id.clone())
                        }
                        (None, Some(p)) => sole_city(g, p),
                        (None, None) => None,
                    };
                    if let Some(id) = region {
                        regions.insert(id);
                        best = best.max(c.score.clamp(0.0, 1.0));
                    }
                }
                let n = regions.len();
                push(
                    format!("image retrieval matched {n} candidate region(s)"),
                    regions,
                    best.min(1.0),
                    None,
                );
            }
            ToolPayload::Geocode { results } => {
                let mut regions = BTreeSet::new();
                let mut names = Vec::new();
                for hit in results {
                    let region = match &hit.region_id {
                        Some(id) => {
                            known(g, id)?;
                            Some(id.clone())
                        }
                        None => sole_city(g, hit.point),
                    };
                    if let Some(id) = region {
                        regions.insert(id);
                        names.push(hit.name.clone());
                    }
                }
                // exact coordinates only when the geocoder was unambiguous
                let anchor = match results.as_slice() {
                    [only] if !regions.is_empty() => Some(only.point),
                    _ => None,
                };
                push(
                    format!("geocoder resolved {}", quote_list(&names)),
                    regions,
                    NAMED_REGION_CONFIDENCE,
                    anchor,
                );
            }
        }
        Ok(out)
    }
}

fn known(g: &Gazetteer, id: &RegionId) -> Result<(), StateError> {
    if g.contains_id(id) {
        Ok(())
    } else {
        Err(StateError::UnknownRegion(id.clone()))
    }
}

/// The single city whose disc contains `p`, if exactly one does.
fn sole_city(g: &Gazetteer, p: GeoPoint) -> Option<RegionId> {
    match g.cities_containing(p).as_slice() {
        [only] => Some(only.id.clone()),
        _ => None,
    }
}

/// Regions whose name the text states, either as the whole text or as a
/// word-bounded part of it.
fn named_regions(g: &Gazetteer, text: &str) -> BTreeSet<RegionId> {
    let exact = g.lookup_name(text);
    if !exact.is_empty() {
        return exact.iter().cloned().collect();
    }
    let lower = text.trim().to_lowercase();
    g.names()
        .filter(|(name, _)| name.chars().count() >= 2 && contains_bounded(&lower, name))
        .flat_map(|(_, ids)| ids.iter().cloned())
        .collect()
}

fn quote_list(items: &[String]) -> String {
    items
        .iter()
        .map(|s| format!("\"{s}\""))
        .collect::<Vec<_>>()
        .join(", ")
}
