//! JSON bodies exchanged with tool services. One POST route per tool; crop
//! is local and has no route.
//!
//! | route           | request                          | response |
//! |-----------------|----------------------------------|----------|
//! | `/caption`      | `{image}`                        | `{caption, tags?}` |
//! | `/ocr`          | `{image, bbox?}`                 | `{spans: [{text, bbox?}]}` |
//! | `/kb`           | `{query, region_scope?}`         | `{records: [{title, region_name?, region_id?, summary?}]}` |
//! | `/text_search`  | `{query, top_k}`                 | `{hits: [{title, snippet?, lat?, lon?}]}` |
//! | `/image_search` | `{image, bbox?, top_k}`          | `{candidates: [{region_id?, lat?, lon?, score}]}` |
//! | `/geocode`      | `{name}`                         | `{results: [{name, lat, lon, region_id?}]}` |
//!
//! `bbox` is `[x, y, w, h]`; `image` is the action's image reference.

use serde::{Deserialize, Serialize};

use super::{GeocodeHit, KbRecord, MatchCandidate, OcrSpan, SearchHit, ToolPayload};
use crate::action::{parse_bbox, AtomicTool, CapabilityModule, ProbeAction};
use crate::geo::{GeoPoint, RegionId};

pub const DEFAULT_TOP_K: u32 = 5;

pub fn route(tool: AtomicTool) -> Option<&'static str> {
    match tool {
        AtomicTool::Caption => Some("/caption"),
        AtomicTool::Crop => None,
        AtomicTool::Ocr => Some("/ocr"),
        AtomicTool::KnowledgeBase => Some("/kb"),
        AtomicTool::TextSearch => Some("/text_search"),
        AtomicTool::ImageSearch => Some("/image_search"),
        AtomicTool::Geocode => Some("/geocode"),
    }
}

pub fn tool_for_route(path: &str) -> Option<AtomicTool> {
    AtomicTool::ALL.into_iter().find(|t| route(*t) == Some(path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum WireRequest {
    ImageSearch {
        image: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bbox: Option<[f64; 4]>,
        top_k: u32,
    },
    Ocr {
        image: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bbox: Option<[f64; 4]>,
    },
    Caption {
        image: String,
    },
    Kb {
        query: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region_scope: Option<String>,
    },
    TextSearch {
        query: String,
        top_k: u32,
    },
    Geocode {
        name: String,
    },
}

impl WireRequest {
    /// Request for a validated action; `None` for tools without a route.
    pub fn from_action(a: &ProbeAction) -> Option<Self> {
        let image = || a.arg("image_ref").unwrap_or_default().to_string();
        let bbox = || a.arg("bbox").and_then(parse_bbox);
        let top_k = || a.arg("top_k").and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_TOP_K);
        let text = |k: &str| a.arg(k).unwrap_or_default().to_string();
        Some(match a.tool {
            AtomicTool::Caption => WireRequest::Caption { image: image() },
            AtomicTool::Crop => return None,
            AtomicTool::Ocr => WireRequest::Ocr { image: image(), bbox: bbox() },
            AtomicTool::KnowledgeBase => WireRequest::Kb {
                query: text("query"),
                region_scope: a.arg("region_scope").map(str::to_string),
            },
            AtomicTool::TextSearch => WireRequest::TextSearch { query: text("query"), top_k: top_k() },
            AtomicTool::ImageSearch => WireRequest::ImageSearch { image: image(), bbox: bbox(), top_k: top_k() },
            AtomicTool::Geocode => WireRequest::Geocode { name: text("name") },
        })
    }

    /// Parses a request body arriving on `route`.
    pub fn parse(route_path: &str, body: &str) -> Result<Self, String> {
        let tool = tool_for_route(route_path).ok_or_else(|| format!("no such route {route_path}"))?;
        let v: serde_json::Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
        let req = match tool {
            AtomicTool::Caption => serde_json::from_value::<CaptionBody>(v).map(|b| WireRequest::Caption { image: b.image }),
            AtomicTool::Ocr => serde_json::from_value::<ImageBody>(v).map(|b| WireRequest::Ocr { image: b.image, bbox: b.bbox }),
            AtomicTool::KnowledgeBase => serde_json::from_value::<KbBody>(v).map(|b| WireRequest::Kb {
                query: b.query,
                region_scope: b.region_scope,
            }),
            AtomicTool::TextSearch => serde_json::from_value::<TextSearchBody>(v).map(|b| WireRequest::TextSearch {
                query: b.query,
                top_k: b.top_k.unwrap_or(DEFAULT_TOP_K),
            }),
            AtomicTool::ImageSearch => serde_json::from_value::<ImageBody>(v).map(|b| WireRequest::ImageSearch {
                image: b.image,
                bbox: b.bbox,
                top_k: b.top_k.unwrap_or(DEFAULT_TOP_K),
            }),
            AtomicTool::Geocode => serde_json::from_value::<GeocodeBody>(v).map(|b| WireRequest::Geocode { name: b.name }),
            AtomicTool::Crop => unreachable!("crop has no route"),
        };
        req.map_err(|e| e.to_string())
    }

    pub fn tool(&self) -> AtomicTool {
        match self {
            WireRequest::Caption { .. } => AtomicTool::Caption,
            WireRequest::Ocr { .. } => AtomicTool::Ocr,
            WireRequest::Kb { .. } => AtomicTool::KnowledgeBase,
            WireRequest::TextSearch { .. } => AtomicTool::TextSearch,
            WireRequest::ImageSearch { .. } => AtomicTool::ImageSearch,
            WireRequest::Geocode { .. } => AtomicTool::Geocode,
        }
    }

    /// Rebuilds an equivalent action, used by servers that answer through
    /// an in-process adapter.
    pub fn to_action(&self, id: u64) -> ProbeAction {
        let fmt_bbox = |b: &[f64; 4]| b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut args: Vec<(&'static str, String)> = Vec::new();
        let module = match self {
            WireRequest::Caption { image } => {
                args.push(("image_ref", image.clone()));
                CapabilityModule::Environmental
            }
            WireRequest::Ocr { image, bbox } => {
                args.push(("image_ref", image.clone()));
                if let Some(b) = bbox {
                    args.push(("bbox", fmt_bbox(b)));
                }
                CapabilityModule::SemanticSymbol
            }
            WireRequest::Kb { query, region_scope } => {
                args.push(("query", query.clone()));
                if let Some(s) = region_scope {
                    args.push(("region_scope", s.clone()));
                }
                CapabilityModule::SemanticSymbol
            }
            WireRequest::TextSearch { query, top_k } => {
                args.push(("query", query.clone()));
                args.push(("top_k", top_k.to_string()));
                CapabilityModule::Environmental
            }
            WireRequest::ImageSearch { image, bbox, top_k } => {
                args.push(("image_ref", image.clone()));
                if let Some(b) = bbox {
                    args.push(("bbox", fmt_bbox(b)));
                }
                args.push(("top_k", top_k.to_string()));
                CapabilityModule::ImageMatching
            }
            WireRequest::Geocode { name } => {
                args.push(("name", name.clone()));
                CapabilityModule::SemanticSymbol
            }
        };
        ProbeAction::new(id, module, self.tool(), args, "")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionBody {
    image: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageBody {
    image: String,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    top_k: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KbBody {
    query: String,
    #[serde(default)]
    region_scope: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextSearchBody {
    query: String,
    #[serde(default)]
    top_k: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeocodeBody {
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionResponse {
    caption: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tags: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OcrResponse {
    spans: Vec<OcrSpan>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbResponse {
    records: Vec<KbRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireHit {
    title: String,
    #[serde(default)]
    snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TextSearchResponse {
    hits: Vec<WireHit>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireCandidate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_id: Option<RegionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageSearchResponse {
    candidates: Vec<WireCandidate>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireGeocode {
    name: String,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region_id: Option<RegionId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeocodeResponse {
    results: Vec<WireGeocode>,
}

fn point(lat: Option<f64>, lon: Option<f64>) -> Result<Option<GeoPoint>, String> {
    match (lat, lon) {
        (Some(lat), Some(lon)) => GeoPoint::new(lat, lon).map(Some).map_err(|e| e.to_string()),
        (None, None) => Ok(None),
        _ => Err("lat and lon must be given together".into()),
    }
}

/// Parses a service response body into the tool's payload shape.
pub fn parse_response(tool: AtomicTool, body: &str) -> Result<ToolPayload, String> {
    fn de<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, String> {
        serde_json::from_str(body).map_err(|e| e.to_string())
    }
    Ok(match tool {
        AtomicTool::Caption => {
            let r: CaptionResponse = de(body)?;
            ToolPayload::Caption { text: r.caption, tags: r.tags }
        }
        AtomicTool::Crop => return Err("crop has no service response".into()),
        AtomicTool::Ocr => ToolPayload::Ocr { spans: de::<OcrResponse>(body)?.spans },
        AtomicTool::KnowledgeBase => ToolPayload::KnowledgeBase { records: de::<KbResponse>(body)?.records },
        AtomicTool::TextSearch => {
            let r: TextSearchResponse = de(body)?;
            let hits = r
                .hits
                .into_iter()
                .map(|h| {
                    Ok(SearchHit {
                        coordinates: point(h.lat, h.lon)?,
                        title: h.title,
                        snippet: h.snippet,
                    })
                })
                .collect::<Result<_, String>>()?;
            ToolPayload::Search { hits }
        }
        AtomicTool::ImageSearch => {
            let r: ImageSearchResponse = de(body)?;
            let candidates = r
                .candidates
                .into_iter()
                .map(|c| {
                    if !c.score.is_finite() {
                        return Err("non-finite score".to_string());
                    }
                    Ok(MatchCandidate {
                        point: point(c.lat, c.lon)?,
                        region_id: c.region_id,
                        score: c.score,
                    })
                })
                .collect::<Result<_, String>>()?;
            ToolPayload::ImageMatch { candidates }
        }
        AtomicTool::Geocode => {
            let r: GeocodeResponse = de(body)?;
            let results = r
                .results
                .into_iter()
                .map(|g| {
                    Ok(GeocodeHit {
                        point: GeoPoint::new(g.lat, g.lon).map_err(|e| e.to_string())?,
                        name: g.name,
                        region_id: g.region_id,
                    })
                })
                .collect::<Result<_, String>>()?;
            ToolPayload::Geocode { results }
        }
    })
}

/// Response body a service would send for `payload`. Crop payloads have no
/// wire form and encode as `null`.
pub fn encode_response(payload: &ToolPayload) -> serde_json::Value {
    let v = match payload {
        ToolPayload::Caption { text, tags } => serde_json::to_value(CaptionResponse {
            caption: text.clone(),
            tags: tags.clone(),
        }),
        ToolPayload::Crop { .. } => return serde_json::Value::Null,
        ToolPayload::Ocr { spans } => serde_json::to_value(OcrResponse { spans: spans.clone() }),
        ToolPayload::KnowledgeBase { records } => serde_json::to_value(KbResponse { records: records.clone() }),
        ToolPayload::Search { hits } => serde_json::to_value(TextSearchResponse {
            hits: hits
                .iter()
                .map(|h| WireHit {
                    title: h.title.clone(),
                    snippet: h.snippet.clone(),
                    lat: h.coordinates.map(|p| p.lat()),
                    lon: h.coordinates.map(|p| p.lon()),
                })
                .collect(),
        }),
        ToolPayload::ImageMatch { candidates } => serde_json::to_value(ImageSearchResponse {
            candidates: candidates
                .iter()
                .map(|c| WireCandidate {
                    region_id: c.region_id.clone(),
                    lat: c.point.map(|p| p.lat()),
                    lon: c.point.map(|p| p.lon()),
                    score: c.score,
                })
                .collect(),
        }),
        ToolPayload::Geocode { results } => serde_json::to_value(GeocodeResponse {
            results: results
                .iter()
                .map(|g| WireGeocode {
                    name: g.name.clone(),
                    lat: g.point.lat(),
                    lon: g.point.lon(),
                    region_id: g.region_id.clone(),
                })
                .collect(),
        }),
    };
    v.expect("wire response serializes")
}
