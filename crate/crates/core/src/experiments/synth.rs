//! Synthetic chip corpus with spatially correlated damage.
//!
//! Each chip places non-overlapping rectangular buildings on a noisy ground
//! texture. A random Fourier approximation of a smooth Gaussian field is
//! sampled at the building centroids and thresholded into the three damage
//! classes. A building's post-event pixels darken by a class-dependent
//! amount plus `coupling` times the mean darkening of its Delaunay
//! neighbors, so with positive coupling a crop mixes its own damage with
//! that of the buildings around it.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentError};
use crate::geo::{self, Envelope, Point2};
use crate::ingest::{format_wkt_polygon, write_manifest, ChipImage, DamageClass, LabelBuilding, LabelFile, ManifestRow};

/// Random Fourier features per damage field.
const FIELD_FEATURES: usize = 64;
/// Per-channel scale of the darkening applied to damaged roofs.
const TINT: [f64; 3] = [1.0, 0.85, 0.7];
const RAW_LABELS: [&str; 3] = ["no-damage", "minor-damage", "destroyed"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDisaster {
    pub id: String,
    pub disaster_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub chips: usize,
    pub min_buildings: usize,
    pub max_buildings: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Length scale of the damage field, in pixels.
    pub correlation_length: f64,
    /// Field values below `thresholds[0]` are undamaged, below
    /// `thresholds[1]` minor, else major. The field is standard normal.
    pub thresholds: [f64; 2],
    /// Probability that a building's class is redrawn uniformly.
    pub label_noise: f64,
    /// Roof darkening per class step.
    pub signal: f64,
    /// Standard deviation of per-building darkening noise.
    pub own_noise: f64,
    /// Amplitude of uniform per-pixel texture noise.
    pub pixel_noise: f64,
    /// Weight of the neighbors' mean darkening in a building's own darkening.
    pub coupling: f64,
    /// Chips are assigned to disasters round-robin.
    pub disasters: Vec<SynthDisaster>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            chips: 200,
            min_buildings: 10,
            max_buildings: 30,
            image_size: 256,
            min_side: 8,
            max_side: 20,
            correlation_length: 5.0,
            thresholds: [0.25, 0.85],
            label_noise: 0.0,
            signal: 0.12,
            own_noise: 0.03,
            pixel_noise: 0.05,
            coupling: 0.0,
            disasters: vec![SynthDisaster { id: "synthetic".into(), disaster_type: "synthetic".into() }],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(format!("synth: {m}")));
        if !(self.correlation_length > 0.0) {
            return bad("correlation_length must be positive");
        }
        if self.chips == 0 || self.disasters.is_empty() {
            return bad("need at least one chip and one disaster");
        }
        if self.min_buildings < 2 || self.min_buildings > self.max_buildings {
            return bad("building range must satisfy 2 <= min <= max");
        }
        if self.min_side < 2 || self.min_side > self.max_side || self.image_size < 4 * self.max_side {
            return bad("building sides must satisfy 2 <= min <= max <= image_size / 4");
        }
        if self.thresholds[0] > self.thresholds[1] {
            return bad("thresholds must be ascending");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1]");
        }
        for v in [self.signal, self.own_noise, self.pixel_noise, self.coupling] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("signal, noise and coupling must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// One generated chip before serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthChip {
    pub label: LabelFile,
    pub pre: ChipImage,
    pub post: ChipImage,
    pub classes: Vec<DamageClass>,
    pub centroids: Vec<Point2>,
    /// Delaunay edges over `centroids`.
    pub edges: Vec<(usize, usize)>,
}

fn place_buildings(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Envelope> {
    let target = rng.random_range(cfg.min_buildings..=cfg.max_buildings);
    let size = cfg.image_size as f64;
    let gap = 3.0;
    let mut placed: Vec<Envelope> = Vec::with_capacity(target);
    let mut attempts = 0;
    while placed.len() < target && attempts < 200 * target {
        attempts += 1;
        let w = rng.random_range(cfg.min_side..=cfg.max_side) as f64;
        let h = rng.random_range(cfg.min_side..=cfg.max_side) as f64;
        let x = rng.random_range(2..=(cfg.image_size - 2 - w as usize)) as f64;
        let y = rng.random_range(2..=(cfg.image_size - 2 - h as usize)) as f64;
        let env = Envelope { min_x: x, min_y: y, max_x: x + w, max_y: y + h };
        let clear = placed.iter().all(|o| {
            env.min_x >= o.max_x + gap || o.min_x >= env.max_x + gap || env.min_y >= o.max_y + gap || o.min_y >= env.max_y + gap
        });
        if clear && env.max_x <= size && env.max_y <= size {
            placed.push(env);
        }
    }
    placed
}

/// Samples a unit-variance smooth field with the given length scale.
fn damage_field(length: f64, rng: &mut ChaCha8Rng) -> impl Fn(Point2) -> f64 {
    let normal = Normal::new(0.0, 1.0 / length).expect("positive scale");
    let feats: Vec<(f64, f64, f64)> =
        (0..FIELD_FEATURES).map(|_| (normal.sample(rng), normal.sample(rng), rng.random_range(0.0..TAU))).collect();
    let amp = (2.0 / FIELD_FEATURES as f64).sqrt();
    move |p: Point2| amp * feats.iter().map(|&(wx, wy, phi)| (wx * p.x + wy * p.y + phi).cos()).sum::<f64>()
}

/// Fraction of edges joining buildings of the same class.
pub fn join_count(classes: &[DamageClass], edges: &[(usize, usize)]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    edges.iter().filter(|&&(i, j)| classes[i] == classes[j]).count() as f64 / edges.len() as f64
}

/// Per-disaster ground and roof tones, fixed by the disaster id.
fn disaster_tones(id: &str) -> ([f64; 3], [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, id));
    let ground = std::array::from_fn(|_| rng.random_range(0.3..0.45));
    let roof = std::array::from_fn(|_| rng.random_range(0.6..0.75));
    (ground, roof)
}

fn synth_chip_id(cfg: &SynthConfig, index: usize) -> String {
    format!("{}-{index:05}", cfg.disasters[index % cfg.disasters.len()].id)
}

/// Generates chip `index` of the corpus.
pub fn synth_chip(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SynthChip, ExperimentError> {
    cfg.validate()?;
    let disaster = &cfg.disasters[index % cfg.disasters.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("chip{index}")));
    let envelopes = place_buildings(cfg, &mut rng);
    let centroids: Vec<Point2> = envelopes.iter().map(Envelope::centroid).collect();
    let edges = geo::delaunay(&centroids).map_err(|e| ExperimentError::Config(format!("synth layout: {e}")))?.edges;

    let field = damage_field(cfg.correlation_length, &mut rng);
    let classes: Vec<DamageClass> = centroids
        .iter()
        .map(|&c| {
            let v = field(c);
            let mut k = if v < cfg.thresholds[0] {
                0
            } else if v < cfg.thresholds[1] {
                1
            } else {
                2
            };
            if rng.random::<f64>() < cfg.label_noise {
                k = rng.random_range(0..3);
            }
            DamageClass::LABELED[k]
        })
        .collect();

    let noise = Normal::new(0.0, cfg.own_noise.max(f64::MIN_POSITIVE)).expect("finite sd");
    let own: Vec<f64> = classes
        .iter()
        .map(|c| cfg.signal * c.index().expect("labeled") as f64 + if cfg.own_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 })
        .collect();
    let mut neighbor_sum = vec![0.0; own.len()];
    let mut degree = vec![0usize; own.len()];
    for &(i, j) in &edges {
        neighbor_sum[i] += own[j];
        neighbor_sum[j] += own[i];
        degree[i] += 1;
        degree[j] += 1;
    }
    let darkening: Vec<f64> = (0..own.len())
        .map(|v| own[v] + cfg.coupling * if degree[v] > 0 { neighbor_sum[v] / degree[v] as f64 } else { 0.0 })
        .collect();

    let (ground, roof) = disaster_tones(&disaster.id);
    let s = cfg.image_size;
    let mut pre = ChipImage::filled(s, s, 0.0);
    let mut owner = vec![usize::MAX; s * s];
    for (b, env) in envelopes.iter().enumerate() {
        for y in env.min_y as usize..env.max_y as usize {
            for x in env.min_x as usize..env.max_x as usize {
                owner[y * s + x] = b;
            }
        }
    }
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let base = if owner[y * s + x] == usize::MAX { ground[c] } else { roof[c] };
                pre.set(c, y, x, (base + jitter(&mut rng, cfg.pixel_noise)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let mut post = pre.clone();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut v = pre.get(c, y, x) as f64 + jitter(&mut rng, cfg.pixel_noise / 2.0);
                if let Some(&d) = darkening.get(owner[y * s + x]) {
                    v -= d * TINT[c];
                }
                post.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    let chip_id = synth_chip_id(cfg, index);
    let buildings = envelopes
        .iter()
        .zip(&classes)
        .enumerate()
        .map(|(b, (e, c))| LabelBuilding {
            uid: format!("{chip_id}-b{b:03}"),
            wkt: format_wkt_polygon(&[
                Point2::new(e.min_x, e.min_y),
                Point2::new(e.max_x, e.min_y),
                Point2::new(e.max_x, e.max_y),
                Point2::new(e.min_x, e.max_y),
            ]),
            damage: RAW_LABELS[c.index().expect("labeled")].into(),
        })
        .collect();
    let label = LabelFile {
        chip_id,
        disaster_id: disaster.id.clone(),
        disaster_type: disaster.disaster_type.clone(),
        buildings,
    };
    Ok(SynthChip { label, pre, post, classes, centroids, edges })
}

/// File layout written by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthLayout {
    /// Native label files plus `manifest.csv`.
    #[default]
    Native,
    /// xBD tree: `labels/<id>_post_disaster.json`, `images/<id>_{pre,post}_disaster.png`.
    Xbd,
}

impl std::str::FromStr for SynthLayout {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Self::Native),
            "xbd" => Ok(Self::Xbd),
            _ => Err(ExperimentError::Config(format!("unknown layout {s:?}"))),
        }
    }
}

/// Manifest rows of the corpus `cfg` describes, in chip index order, with
/// paths relative to the output directory. Nothing is written.
pub fn synth_plan(cfg: &SynthConfig, layout: SynthLayout) -> Result<Vec<ManifestRow>, ExperimentError> {
    cfg.validate()?;
    Ok((0..cfg.chips)
        .map(|index| {
            let id = synth_chip_id(cfg, index);
            let disaster = &cfg.disasters[index % cfg.disasters.len()];
            let (label_path, pre_path, post_path) = match layout {
                SynthLayout::Native => {
                    (format!("labels/{id}.json"), format!("images/{id}_pre.png"), format!("images/{id}_post.png"))
                }
                SynthLayout::Xbd => (
                    format!("labels/{id}_post_disaster.json"),
                    format!("images/{id}_pre_disaster.png"),
                    format!("images/{id}_post_disaster.png"),
                ),
            };
            ManifestRow {
                chip_id: id,
                disaster_id: disaster.id.clone(),
                disaster_type: disaster.disaster_type.clone(),
                label_path,
                pre_path,
                post_path,
            }
        })
        .collect())
}

/// Writes a native-layout corpus with its manifest under `out`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<Vec<ManifestRow>, ExperimentError> {
    synth_generate_layout(cfg, seed, out, SynthLayout::Native)
}

/// Writes a corpus under `out`. Both layouts also get a `manifest.csv`.
pub fn synth_generate_layout(
    cfg: &SynthConfig,
    seed: u64,
    out: &Path,
    layout: SynthLayout,
) -> Result<Vec<ManifestRow>, ExperimentError> {
    cfg.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    for sub in ["labels", "images"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io(&d))?;
    }
    let mut rows = synth_plan(cfg, layout)?;
    for (index, row) in rows.iter().enumerate() {
        let chip = synth_chip(cfg, seed, index)?;
        let (label, pre, post) = row.resolve(out);
        let json = match layout {
            SynthLayout::Native => serde_json::to_vec_pretty(&chip.label)?,
            SynthLayout::Xbd => serde_json::to_vec_pretty(&chip.label.to_xbd_json(&format!("{}_post_disaster.png", row.chip_id)))?,
        };
        fs::write(&label, json).map_err(io(&label))?;
        fs::write(&pre, chip.pre.encode_png()?).map_err(io(&pre))?;
        fs::write(&post, chip.post.encode_png()?).map_err(io(&post))?;
    }
    rows.sort_by(|a, b| a.chip_id.cmp(&b.chip_id));
    write_manifest(&out.join("manifest.csv"), &rows)?;
    Ok(rows)
}
