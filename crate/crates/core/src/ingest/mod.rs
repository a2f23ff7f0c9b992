//! Chip ingestion: label parsing, damage-class merging, chip filtering and
//! per-building crop extraction.

mod image;
mod label;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::image::{crop_resize, resize_bilinear, ChipImage};
pub use self::label::{format_wkt_polygon, parse_label_json, parse_wkt_polygon, LabelBuilding, LabelFile};
use crate::geo::{self, Envelope, GeoError, Point2};
use crate::nn::Tensor;

/// Side length of the square crops every building is resampled to.
pub const CROP_SIZE: usize = 128;

/// Number of damage classes after merging.
pub const NUM_CLASSES: usize = 3;

/// Offset applied to coincident centroids so triangulation sees distinct points.
pub const CENTROID_JITTER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("pre image is {pre:?} but post image is {post:?}")]
    ImageMismatch { pre: (usize, usize), post: (usize, usize) },
    #[error("image decode error: {0}")]
    Decode(String),
    #[error("unknown damage label {0:?}")]
    UnknownLabel(String),
    #[error("envelope does not intersect the image")]
    EmptyIntersection,
    #[error("building {uid}: {source}")]
    Geometry { uid: String, source: GeoError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Damage class after merging "major-damage" and "destroyed".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DamageClass {
    NoDamage,
    MinorDamage,
    MajorOrDestroyed,
    Unclassified,
}

impl DamageClass {
    pub const LABELED: [DamageClass; NUM_CLASSES] =
        [DamageClass::NoDamage, DamageClass::MinorDamage, DamageClass::MajorOrDestroyed];

    /// Class index for loss and metrics; `None` for unclassified buildings.
    pub fn index(self) -> Option<usize> {
        match self {
            DamageClass::NoDamage => Some(0),
            DamageClass::MinorDamage => Some(1),
            DamageClass::MajorOrDestroyed => Some(2),
            DamageClass::Unclassified => None,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::LABELED.get(i).copied()
    }

    /// Stable byte code used in binary caches (255 = unclassified).
    pub fn code(self) -> u8 {
        self.index().map_or(255, |i| i as u8)
    }

    pub fn from_code(c: u8) -> Option<Self> {
        if c == 255 {
            Some(DamageClass::Unclassified)
        } else {
            Self::from_index(c as usize)
        }
    }

    pub fn is_labeled(self) -> bool {
        self != DamageClass::Unclassified
    }
}

/// Maps a raw label string onto the merged class set.
pub fn merge_classes(raw_label: &str) -> Result<DamageClass, IngestError> {
    match raw_label {
        "no-damage" => Ok(DamageClass::NoDamage),
        "minor-damage" => Ok(DamageClass::MinorDamage),
        "major-damage" | "destroyed" => Ok(DamageClass::MajorOrDestroyed),
        "un-classified" => Ok(DamageClass::Unclassified),
        other => Err(IngestError::UnknownLabel(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawBuilding {
    pub uid: String,
    pub polygon: Vec<Point2>,
    pub raw_label: String,
}

/// One parsed chip: metadata, both images and the annotated footprints.
/// Polygons are in post-image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipRecord {
    pub chip_id: String,
    pub disaster_id: String,
    pub disaster_type: String,
    pub pre_image: ChipImage,
    pub post_image: ChipImage,
    pub buildings: Vec<RawBuilding>,
}

pub fn parse_chip(label_json: &[u8], pre_image: &[u8], post_image: &[u8]) -> Result<ChipRecord, IngestError> {
    let label = parse_label_json(label_json)?;
    let pre = ChipImage::decode_png(pre_image)?;
    let post = ChipImage::decode_png(post_image)?;
    chip_from_parts(label, pre, post)
}

pub fn chip_from_parts(label: LabelFile, pre: ChipImage, post: ChipImage) -> Result<ChipRecord, IngestError> {
    if pre.dims() != post.dims() {
        return Err(IngestError::ImageMismatch { pre: pre.dims(), post: post.dims() });
    }
    let buildings = label
        .buildings
        .into_iter()
        .map(|b| {
            Ok(RawBuilding { polygon: parse_wkt_polygon(&b.wkt)?, uid: b.uid, raw_label: b.damage })
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    Ok(ChipRecord {
        chip_id: label.chip_id,
        disaster_id: label.disaster_id,
        disaster_type: label.disaster_type,
        pre_image: pre,
        post_image: post,
        buildings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    NoBuildings,
    OnlyOneBuilding,
    NoLabeledBuildings,
    OnlyOneLabeledBuilding,
}

impl FilterReason {
    pub fn code(self) -> &'static str {
        match self {
            FilterReason::NoBuildings => "no_buildings",
            FilterReason::OnlyOneBuilding => "only_one_building",
            FilterReason::NoLabeledBuildings => "no_labeled_buildings",
            FilterReason::OnlyOneLabeledBuilding => "only_one_labeled_building",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep,
    Discard(FilterReason),
}

/// Keeps a chip only if it has at least two buildings and at least two of
/// them carry a damage label.
pub fn filter_chip(labels: &[DamageClass]) -> FilterDecision {
    let labeled = labels.iter().filter(|c| c.is_labeled()).count();
    let reason = match (labels.len(), labeled) {
        (0, _) => Some(FilterReason::NoBuildings),
        (1, _) => Some(FilterReason::OnlyOneBuilding),
        (_, 0) => Some(FilterReason::NoLabeledBuildings),
        (_, 1) => Some(FilterReason::OnlyOneLabeledBuilding),
        _ => None,
    };
    reason.map_or(FilterDecision::Keep, FilterDecision::Discard)
}

/// Merged labels of a chip's buildings, in file order.
pub fn merged_labels(record: &ChipRecord) -> Result<Vec<DamageClass>, IngestError> {
    record.buildings.iter().map(|b| merge_classes(&b.raw_label)).collect()
}

/// One building as a graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingNode {
    pub id: String,
    pub envelope: Envelope,
    pub centroid: Point2,
    /// `3 × 128 × 128`, values in `[0, 1]`.
    pub pre_crop: Tensor<f32>,
    pub post_crop: Tensor<f32>,
    pub label: DamageClass,
}

/// Builds graph nodes for every building of a chip. Coincident centroids
/// are nudged apart along x by multiples of [`CENTROID_JITTER`].
pub fn build_nodes(record: &ChipRecord) -> Result<Vec<BuildingNode>, IngestError> {
    let labels = merged_labels(record)?;
    let mut nodes: Vec<BuildingNode> = Vec::with_capacity(record.buildings.len());
    for (b, label) in record.buildings.iter().zip(labels) {
        let geo_err = |source| IngestError::Geometry { uid: b.uid.clone(), source };
        let envelope = geo::envelope_of(&b.polygon).map_err(geo_err)?;
        let mut centroid = geo::centroid(&envelope);
        let mut k = 1.0;
        while nodes.iter().any(|n| n.centroid == centroid) {
            centroid.x += CENTROID_JITTER * k;
            k += 1.0;
        }
        nodes.push(BuildingNode {
            id: b.uid.clone(),
            envelope,
            centroid,
            pre_crop: crop_resize(&record.pre_image, &envelope)?,
            post_crop: crop_resize(&record.post_image, &envelope)?,
            label,
        });
    }
    Ok(nodes)
}

/// Result of ingesting one chip.
#[derive(Debug)]
pub enum ChipOutcome {
    Kept(Vec<BuildingNode>),
    Discarded(FilterReason),
}

pub fn ingest_chip(record: &ChipRecord) -> Result<ChipOutcome, IngestError> {
    match filter_chip(&merged_labels(record)?) {
        FilterDecision::Discard(reason) => Ok(ChipOutcome::Discarded(reason)),
        FilterDecision::Keep => Ok(ChipOutcome::Kept(build_nodes(record)?)),
    }
}

/// One row of the dataset manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub chip_id: String,
    pub disaster_id: String,
    pub disaster_type: String,
    pub label_path: String,
    pub pre_path: String,
    pub post_path: String,
}

impl ManifestRow {
    /// Resolves the row's relative paths against the manifest directory.
    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf, PathBuf) {
        (base.join(&self.label_path), base.join(&self.pre_path), base.join(&self.post_path))
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, IngestError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<ManifestRow> = rdr
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display())))?;
    rows.sort_by(|a, b| a.chip_id.cmp(&b.chip_id));
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| IngestError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Reads and parses one manifest row from disk.
pub fn load_chip(row: &ManifestRow, base: &Path) -> Result<ChipRecord, IngestError> {
    let (label, pre, post) = row.resolve(base);
    let read = |p: &Path| std::fs::read(p).map_err(|source| IngestError::Io { path: p.to_path_buf(), source });
    let label_bytes = read(&label)?;
    let decode = |p: &Path| {
        ChipImage::decode_png(&read(p)?).map_err(|e| match e {
            IngestError::Decode(m) => IngestError::Decode(format!("{}: {m}", p.display())),
            e => e,
        })
    };
    let (pre_img, post_img) = (decode(&pre)?, decode(&post)?);
    let parsed = parse_label_json(&label_bytes).map_err(|e| match e {
        IngestError::Parse(m) => IngestError::Parse(format!("{}: {m}", label.display())),
        e => e,
    })?;
    chip_from_parts(parsed, pre_img, post_img)
}

/// Builds manifest rows for an xBD-style tree: `labels/<stem>_post_disaster.json`
/// with images at `images/<stem>_pre_disaster.png` and `images/<stem>_post_disaster.png`.
/// Paths are relative to `root`, so the manifest belongs in `root`.
pub fn scan_xbd_dir(root: &Path) -> Result<Vec<ManifestRow>, IngestError> {
    let labels = root.join("labels");
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    let mut rows = Vec::new();
    for entry in std::fs::read_dir(&labels).map_err(io(&labels))? {
        let path = entry.map_err(io(&labels))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix("_post_disaster.json") else { continue };
        let label = parse_label_json(&std::fs::read(&path).map_err(io(&path))?)?;
        let pre_path = format!("images/{stem}_pre_disaster.png");
        let post_path = format!("images/{stem}_post_disaster.png");
        for p in [&pre_path, &post_path] {
            if !root.join(p).is_file() {
                return Err(IngestError::Manifest(format!("{}: missing image {p}", path.display())));
            }
        }
        rows.push(ManifestRow {
            chip_id: stem.to_string(),
            disaster_id: label.disaster_id,
            disaster_type: label.disaster_type,
            label_path: format!("labels/{name}"),
            pre_path,
            post_path,
        });
    }
    rows.sort_by(|a, b| a.chip_id.cmp(&b.chip_id));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_json(damages: &[&str]) -> Vec<u8> {
        let buildings: Vec<LabelBuilding> = damages
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let x = 2.0 + 10.0 * i as f64;
                LabelBuilding {
                    uid: format!("b{i}"),
                    wkt: format_wkt_polygon(&[
                        Point2::new(x, 2.0),
                        Point2::new(x + 6.0, 2.0),
                        Point2::new(x + 6.0, 8.0 + i as f64),
                        Point2::new(x, 8.0 + i as f64),
                    ]),
                    damage: d.to_string(),
                }
            })
            .collect();
        serde_json::to_vec(&LabelFile {
            chip_id: "chip".into(),
            disaster_id: "d".into(),
            disaster_type: "fire".into(),
            buildings,
        })
        .unwrap()
    }

    fn png(w: usize, h: usize) -> Vec<u8> {
        ChipImage::filled(w, h, 0.5).encode_png().unwrap()
    }

    #[test]
    fn parse_chip_examples() {
        let rec = parse_chip(&label_json(&["no-damage", "no-damage"]), &png(32, 32), &png(32, 32)).unwrap();
        assert_eq!(rec.buildings.len(), 2);

        let rec = parse_chip(&label_json(&["destroyed"]), &png(32, 32), &png(32, 32)).unwrap();
        assert_eq!(rec.buildings[0].raw_label, "destroyed");

        assert!(matches!(
            parse_chip(&label_json(&["no-damage"]), &png(64, 64), &png(32, 32)),
            Err(IngestError::ImageMismatch { pre: (64, 64), post: (32, 32) })
        ));
        assert!(matches!(parse_chip(&label_json(&[]), b"nope", &png(4, 4)), Err(IngestError::Decode(_))));
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_classes("destroyed").unwrap(), DamageClass::MajorOrDestroyed);
        assert_eq!(merge_classes("major-damage").unwrap(), DamageClass::MajorOrDestroyed);
        assert_eq!(merge_classes("no-damage").unwrap(), DamageClass::NoDamage);
        assert_eq!(merge_classes("minor-damage").unwrap(), DamageClass::MinorDamage);
        assert_eq!(merge_classes("un-classified").unwrap(), DamageClass::Unclassified);
        assert!(matches!(merge_classes("flooded"), Err(IngestError::UnknownLabel(l)) if l == "flooded"));
    }

    #[test]
    fn filter_examples() {
        use DamageClass::*;
        assert_eq!(filter_chip(&[NoDamage]), FilterDecision::Discard(FilterReason::OnlyOneBuilding));
        assert_eq!(filter_chip(&[Unclassified; 5]), FilterDecision::Discard(FilterReason::NoLabeledBuildings));
        assert_eq!(filter_chip(&[NoDamage, Unclassified, MinorDamage]), FilterDecision::Keep);
        assert_eq!(
            filter_chip(&[NoDamage, Unclassified, Unclassified]),
            FilterDecision::Discard(FilterReason::OnlyOneLabeledBuilding)
        );
        assert_eq!(filter_chip(&[]), FilterDecision::Discard(FilterReason::NoBuildings));
    }

    #[test]
    fn class_codes_round_trip() {
        for c in [DamageClass::NoDamage, DamageClass::MinorDamage, DamageClass::MajorOrDestroyed, DamageClass::Unclassified] {
            assert_eq!(DamageClass::from_code(c.code()), Some(c));
        }
        assert_eq!(DamageClass::from_code(7), None);
    }

    #[test]
    fn nodes_satisfy_invariants() {
        let rec = parse_chip(&label_json(&["no-damage", "minor-damage", "un-classified"]), &png(40, 20), &png(40, 20))
            .unwrap();
        let nodes = build_nodes(&rec).unwrap();
        assert_eq!(nodes.len(), 3);
        for n in &nodes {
            assert_eq!(n.pre_crop.shape(), &[3, CROP_SIZE, CROP_SIZE]);
            assert!(n.post_crop.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(nodes[0].centroid, Point2::new(5.0, 5.0));
        assert_eq!(nodes[2].label, DamageClass::Unclassified);
    }

    #[test]
    fn coincident_centroids_are_jittered() {
        let square = format_wkt_polygon(&[
            Point2::new(1.0, 1.0),
            Point2::new(5.0, 1.0),
            Point2::new(5.0, 5.0),
            Point2::new(1.0, 5.0),
        ]);
        let label = LabelFile {
            chip_id: "c".into(),
            disaster_id: "d".into(),
            disaster_type: "t".into(),
            buildings: (0..3)
                .map(|i| LabelBuilding { uid: format!("u{i}"), wkt: square.clone(), damage: "no-damage".into() })
                .collect(),
        };
        let rec = chip_from_parts(label, ChipImage::filled(8, 8, 0.1), ChipImage::filled(8, 8, 0.1)).unwrap();
        let nodes = build_nodes(&rec).unwrap();
        let pts: Vec<Point2> = nodes.iter().map(|n| n.centroid).collect();
        assert_eq!(pts[0], Point2::new(3.0, 3.0));
        assert!(pts[1] != pts[0] && pts[2] != pts[0] && pts[2] != pts[1]);
        assert!(geo::delaunay(&pts).is_ok());
    }
}
