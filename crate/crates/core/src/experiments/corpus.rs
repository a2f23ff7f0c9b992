use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::graph::{build_chip_graph, read_graph_file, ChipGraph, ChipMeta, NodeFeatures, CROP_FEATURE_LEN};
use crate::ingest::{ingest_chip, load_chip, read_manifest, ChipOutcome, ManifestRow};
use crate::models::DamageModel;

/// Nodes encoded per forward pass when embedding crops.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLogEntry {
    pub chip_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CorpusLog {
    pub kept: usize,
    pub discarded: Vec<FilterLogEntry>,
}

/// Replaces crop features with the model's change embeddings.
pub fn embed_graph(model: &DamageModel<f32>, graph: ChipGraph) -> Result<ChipGraph, ExperimentError> {
    let NodeFeatures::Crops(data) = &graph.features else {
        return Ok(graph);
    };
    let dim = model.config.encoder.feature_dim;
    let mut out = Vec::with_capacity(graph.num_nodes() * dim);
    for chunk in data.chunks(EMBED_CHUNK * CROP_FEATURE_LEN) {
        let e = model.encode(&NodeFeatures::Crops(chunk.to_vec()))?;
        out.extend_from_slice(e.data());
    }
    Ok(graph.with_embeddings(dim, out)?)
}

/// Ingests one manifest row into a chip graph, or the reason it was filtered.
pub fn build_row(row: &ManifestRow, base: &Path) -> Result<Result<ChipGraph, FilterLogEntry>, ExperimentError> {
    let record = load_chip(row, base)?;
    match ingest_chip(&record)? {
        ChipOutcome::Discarded(reason) => {
            Ok(Err(FilterLogEntry { chip_id: record.chip_id, reason: reason.code().to_string() }))
        }
        ChipOutcome::Kept(nodes) => {
            let meta = ChipMeta {
                chip_id: record.chip_id,
                disaster_id: record.disaster_id,
                disaster_type: record.disaster_type,
            };
            Ok(Ok(build_chip_graph(meta, nodes)?))
        }
    }
}

/// Builds every chip of a manifest, embedding each one right away when an
/// encoder is given so the crops of the whole corpus never coexist in memory.
pub fn load_manifest_corpus(
    manifest: &Path,
    embedder: Option<&DamageModel<f32>>,
) -> Result<(Vec<ChipGraph>, CorpusLog), ExperimentError> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut graphs = Vec::new();
    let mut log = CorpusLog::default();
    for row in &rows {
        match build_row(row, base)? {
            Ok(g) => {
                graphs.push(match embedder {
                    Some(m) => embed_graph(m, g)?,
                    None => g,
                });
                log.kept += 1;
            }
            Err(entry) => log.discarded.push(entry),
        }
    }
    Ok((graphs, log))
}

/// Reads every `*.rscg` file of a directory, sorted by file name.
pub fn load_cache_dir(dir: &Path, embedder: Option<&DamageModel<f32>>) -> Result<Vec<ChipGraph>, ExperimentError> {
    let io = |source| ExperimentError::Io { path: dir.to_path_buf(), source };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "rscg"));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let g = read_graph_file(p)?;
            match embedder {
                Some(m) => embed_graph(m, g),
                None => Ok(g),
            }
        })
        .collect()
}
