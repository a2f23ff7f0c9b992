//! Binary cache of built chip graphs.
//!
//! Layout, all integers little-endian, strings as `u32` length plus UTF-8:
//!
//! ```text
//! magic     4 bytes "RSCG"
//! version   u16
//! chip_id, disaster_id, disaster_type   strings
//! n         u32
//! node*:    id string, label code u8, centroid f64 x2
//! kind      u8 (0 = crops, 1 = embeddings), dim u32
//! features  f32 * n * dim
//! m         u32
//! edge*:    i u32, j u32, weight f64
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{adjacency_from_edges, ChipGraph, ChipMeta, Edge, GraphError, NodeFeatures, CROP_FEATURE_LEN};
use crate::geo::Point2;
use crate::ingest::DamageClass;

pub const GRAPH_MAGIC: &[u8; 4] = b"RSCG";
pub const GRAPH_VERSION: u16 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, GraphError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| GraphError::Format(e.to_string()))
}

pub fn write_graph<W: Write>(g: &ChipGraph, mut w: W) -> Result<(), GraphError> {
    w.write_all(GRAPH_MAGIC)?;
    w.write_u16::<LittleEndian>(GRAPH_VERSION)?;
    write_str(&mut w, &g.meta.chip_id)?;
    write_str(&mut w, &g.meta.disaster_id)?;
    write_str(&mut w, &g.meta.disaster_type)?;
    w.write_u32::<LittleEndian>(g.num_nodes() as u32)?;
    for k in 0..g.num_nodes() {
        write_str(&mut w, &g.node_ids[k])?;
        w.write_u8(g.labels[k].code())?;
        w.write_f64::<LittleEndian>(g.centroids[k].x)?;
        w.write_f64::<LittleEndian>(g.centroids[k].y)?;
    }
    w.write_u8(if g.features.is_crops() { 0 } else { 1 })?;
    w.write_u32::<LittleEndian>(g.features.row_len() as u32)?;
    for &v in g.features.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.write_u32::<LittleEndian>(g.edges.len() as u32)?;
    for e in &g.edges {
        w.write_u32::<LittleEndian>(e.i as u32)?;
        w.write_u32::<LittleEndian>(e.j as u32)?;
        w.write_f64::<LittleEndian>(e.weight)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_graph<R: Read>(mut r: R) -> Result<ChipGraph, GraphError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRAPH_MAGIC {
        return Err(GraphError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != GRAPH_VERSION {
        return Err(GraphError::Format(format!("unsupported version {version}")));
    }
    let meta = ChipMeta { chip_id: read_str(&mut r)?, disaster_id: read_str(&mut r)?, disaster_type: read_str(&mut r)? };
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut node_ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut centroids = Vec::with_capacity(n);
    for _ in 0..n {
        node_ids.push(read_str(&mut r)?);
        let code = r.read_u8()?;
        labels.push(DamageClass::from_code(code).ok_or_else(|| GraphError::Format(format!("label code {code}")))?);
        let x = r.read_f64::<LittleEndian>()?;
        let y = r.read_f64::<LittleEndian>()?;
        centroids.push(Point2::new(x, y));
    }
    let kind = r.read_u8()?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0f32; n * dim];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let features = match kind {
        0 if dim == CROP_FEATURE_LEN => NodeFeatures::Crops(data),
        1 => NodeFeatures::Embeddings { dim, data },
        _ => return Err(GraphError::Format(format!("feature kind {kind} with dim {dim}"))),
    };
    let m = r.read_u32::<LittleEndian>()? as usize;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let i = r.read_u32::<LittleEndian>()? as usize;
        let j = r.read_u32::<LittleEndian>()? as usize;
        let weight = r.read_f64::<LittleEndian>()?;
        if i >= n || j >= n {
            return Err(GraphError::Format(format!("edge ({i}, {j}) out of range")));
        }
        edges.push(Edge { i, j, weight });
    }
    let adjacency = adjacency_from_edges(n, &edges);
    let g = ChipGraph { meta, node_ids, labels, centroids, features, edges, adjacency };
    g.validate()?;
    Ok(g)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_graph_file(g: &ChipGraph, path: &Path) -> Result<(), GraphError> {
    let tmp = path.with_extension("tmp");
    {
        let f = fs::File::create(&tmp)?;
        write_graph(g, BufWriter::new(f))?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_graph_file(path: &Path) -> Result<ChipGraph, GraphError> {
    read_graph(BufReader::new(fs::File::open(path)?))
}
