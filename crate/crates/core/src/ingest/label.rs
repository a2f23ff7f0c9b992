//! Chip label files.
//!
//! The native format is a flat JSON object:
//!
//! ```json
//! {"chip_id": "...", "disaster_id": "...", "disaster_type": "...",
//!  "buildings": [{"uid": "...", "wkt": "POLYGON ((x y, ...))", "damage": "no-damage"}]}
//! ```
//!
//! Post-disaster label files from the public xBD release (`features.xy` +
//! `metadata`) are also accepted so the pipeline can run on that corpus
//! directly.

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::geo::Point2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub chip_id: String,
    pub disaster_id: String,
    pub disaster_type: String,
    pub buildings: Vec<LabelBuilding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBuilding {
    pub uid: String,
    pub wkt: String,
    pub damage: String,
}

#[derive(Deserialize)]
struct XbdFile {
    features: XbdFeatures,
    metadata: XbdMetadata,
}

#[derive(Deserialize)]
struct XbdFeatures {
    xy: Vec<XbdFeature>,
}

#[derive(Deserialize)]
struct XbdFeature {
    properties: XbdProperties,
    wkt: String,
}

#[derive(Deserialize)]
struct XbdProperties {
    #[serde(default)]
    feature_type: Option<String>,
    #[serde(default)]
    subtype: Option<String>,
    uid: String,
}

#[derive(Deserialize)]
struct XbdMetadata {
    disaster: String,
    disaster_type: String,
    img_name: String,
}

impl From<XbdFile> for LabelFile {
    fn from(x: XbdFile) -> Self {
        let chip_id = x
            .metadata
            .img_name
            .trim_end_matches(".png")
            .trim_end_matches("_post_disaster")
            .trim_end_matches("_pre_disaster")
            .to_string();
        let buildings = x
            .features
            .xy
            .into_iter()
            .filter(|f| f.properties.feature_type.as_deref().is_none_or(|t| t == "building"))
            .map(|f| LabelBuilding {
                uid: f.properties.uid,
                wkt: f.wkt,
                // Pre-disaster files carry no subtype.
                damage: f.properties.subtype.unwrap_or_else(|| "un-classified".into()),
            })
            .collect();
        LabelFile { chip_id, disaster_id: x.metadata.disaster, disaster_type: x.metadata.disaster_type, buildings }
    }
}

impl LabelFile {
    /// Renders the label as an xBD post-disaster file named after `img_name`.
    pub fn to_xbd_json(&self, img_name: &str) -> serde_json::Value {
        let xy: Vec<_> = self
            .buildings
            .iter()
            .map(|b| {
                serde_json::json!({
                    "properties": {"feature_type": "building", "subtype": b.damage, "uid": b.uid},
                    "wkt": b.wkt,
                })
            })
            .collect();
        serde_json::json!({
            "features": {"lng_lat": [], "xy": xy},
            "metadata": {"disaster": self.disaster_id, "disaster_type": self.disaster_type, "img_name": img_name},
        })
    }
}

pub fn parse_label_json(bytes: &[u8]) -> Result<LabelFile, IngestError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| IngestError::Parse(format!("label JSON: {e}")))?;
    let is_xbd = value.get("features").is_some() && value.get("metadata").is_some();
    if is_xbd {
        let x: XbdFile = serde_json::from_value(value).map_err(|e| IngestError::Parse(format!("xBD label: {e}")))?;
        Ok(x.into())
    } else {
        serde_json::from_value(value).map_err(|e| IngestError::Parse(format!("label: {e}")))
    }
}

/// Parses the exterior ring of a WKT `POLYGON`. The closing vertex, when it
/// repeats the first, is dropped.
pub fn parse_wkt_polygon(wkt: &str) -> Result<Vec<Point2>, IngestError> {
    let err = || IngestError::Parse(format!("unsupported WKT: {wkt:.60}"));
    let s = wkt.trim();
    let rest = s
        .strip_prefix("POLYGON")
        .or_else(|| s.strip_prefix("polygon"))
        .ok_or_else(err)?
        .trim_start();
    let open = rest.strip_prefix('(').ok_or_else(err)?.trim_start();
    let ring = open.strip_prefix('(').ok_or_else(err)?;
    let end = ring.find(')').ok_or_else(err)?;
    let mut pts = Vec::new();
    for pair in ring[..end].split(',') {
        let mut it = pair.split_whitespace();
        let x: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(err)?;
        let y: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(err)?;
        pts.push(Point2::new(x, y));
    }
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    Ok(pts)
}

/// Formats a closed WKT polygon ring.
pub fn format_wkt_polygon(points: &[Point2]) -> String {
    let mut parts: Vec<String> = points.iter().map(|p| format!("{} {}", p.x, p.y)).collect();
    if let Some(first) = points.first() {
        parts.push(format!("{} {}", first.x, first.y));
    }
    format!("POLYGON (({}))", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wkt_round_trip() {
        let p = parse_wkt_polygon("POLYGON ((10 20, 30 20, 30 45.5, 10 45.5, 10 20))").unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[2], Point2::new(30.0, 45.5));
        assert_eq!(parse_wkt_polygon(&format_wkt_polygon(&p)).unwrap(), p);
        assert!(parse_wkt_polygon("POINT (1 2)").is_err());
        assert!(parse_wkt_polygon("POLYGON ((1 2, 3))").is_err());
    }

    #[test]
    fn native_schema_rejects_unknown_fields() {
        let ok = br#"{"chip_id":"c","disaster_id":"d","disaster_type":"fire","buildings":[]}"#;
        assert!(parse_label_json(ok).is_ok());
        let bad = br#"{"chip_id":"c","disaster_id":"d","disaster_type":"fire","buildings":[],"extra":1}"#;
        assert!(matches!(parse_label_json(bad), Err(IngestError::Parse(_))));
        assert!(matches!(parse_label_json(b"{not json"), Err(IngestError::Parse(_))));
    }

    #[test]
    fn xbd_schema() {
        let x = br#"{"features":{"lng_lat":[],"xy":[
            {"properties":{"feature_type":"building","subtype":"major-damage","uid":"u1"},"wkt":"POLYGON ((0 0, 4 0, 4 4, 0 0))"},
            {"properties":{"feature_type":"building","subtype":"no-damage","uid":"u2"},"wkt":"POLYGON ((9 9, 12 9, 12 12, 9 9))"}]},
            "metadata":{"disaster":"socal-fire","disaster_type":"fire","img_name":"socal-fire_00000001_post_disaster.png","width":1024}}"#;
        let l = parse_label_json(x).unwrap();
        assert_eq!(l.chip_id, "socal-fire_00000001");
        assert_eq!(l.disaster_id, "socal-fire");
        assert_eq!(l.buildings.len(), 2);
        assert_eq!(l.buildings[0].damage, "major-damage");
    }
}
