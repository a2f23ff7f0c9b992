//! External per-chip node embeddings, for backbones trained elsewhere.
//!
//! Layout, little-endian, strings as `u32` length plus UTF-8:
//!
//! ```text
//! magic    4 bytes "RSEF"
//! version  u16
//! chip_id  string
//! dim      u32
//! n        u32
//! record*: node id string, f32 * dim
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::graph::{ChipGraph, GraphError};

pub const FEATURE_MAGIC: &[u8; 4] = b"RSEF";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub chip_id: String,
    pub dim: usize,
    pub node_ids: Vec<String>,
    /// `node_ids.len() × dim`, row-major.
    pub data: Vec<f32>,
}

pub fn write_features<W: Write>(rec: &FeatureRecord, mut w: W) -> Result<(), GraphError> {
    if rec.data.len() != rec.dim * rec.node_ids.len() {
        return Err(GraphError::Invalid(format!("{}: feature length does not match nodes x dim", rec.chip_id)));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_u16::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u32::<LittleEndian>(rec.chip_id.len() as u32)?;
    w.write_all(rec.chip_id.as_bytes())?;
    w.write_u32::<LittleEndian>(rec.dim as u32)?;
    w.write_u32::<LittleEndian>(rec.node_ids.len() as u32)?;
    for (k, id) in rec.node_ids.iter().enumerate() {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
        for &v in &rec.data[k * rec.dim..(k + 1) * rec.dim] {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String, GraphError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| GraphError::Format(e.to_string()))
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureRecord, GraphError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(GraphError::Format(format!("bad feature magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != FEATURE_VERSION {
        return Err(GraphError::Format(format!("unsupported feature version {version}")));
    }
    let chip_id = read_string(&mut r)?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut node_ids = Vec::with_capacity(n);
    let mut data = vec![0.0f32; n * dim];
    for k in 0..n {
        node_ids.push(read_string(&mut r)?);
        r.read_f32_into::<LittleEndian>(&mut data[k * dim..(k + 1) * dim])?;
    }
    Ok(FeatureRecord { chip_id, dim, node_ids, data })
}

/// Replaces the graph's node inputs with the record's embeddings, matched by
/// node id. Every graph node must appear in the record.
pub fn apply_features(graph: ChipGraph, rec: &FeatureRecord) -> Result<ChipGraph, GraphError> {
    if rec.chip_id != graph.meta.chip_id {
        return Err(GraphError::Invalid(format!("features for {} applied to {}", rec.chip_id, graph.meta.chip_id)));
    }
    let index: HashMap<&str, usize> = rec.node_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut data = Vec::with_capacity(graph.num_nodes() * rec.dim);
    for id in &graph.node_ids {
        let k = *index
            .get(id.as_str())
            .ok_or_else(|| GraphError::Invalid(format!("{}: no features for node {id}", rec.chip_id)))?;
        data.extend_from_slice(&rec.data[k * rec.dim..(k + 1) * rec.dim]);
    }
    graph.with_embeddings(rec.dim, data)
}
