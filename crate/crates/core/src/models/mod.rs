//! Siamese change encoder with a SAGE or fully-connected classification head.
//!
//! Every node's pre and post crops pass through one shared convolutional
//! encoder and the two outputs are subtracted. The head then maps these
//! change embeddings to class logits, either by SAGE graph convolutions over
//! the batch's aggregation lists or by plain dense layers that ignore edges.

mod features;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{apply_features, read_features, write_features, FeatureRecord, FEATURE_MAGIC, FEATURE_VERSION};

use crate::graph::{GraphBatch, GraphError, NodeFeatures};
use crate::ingest::{CROP_SIZE, NUM_CLASSES};
use crate::nn::{self, he_uniform, Graph, NnError, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("model sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each conv block (3×3 conv, ReLU, 2×2 max pool).
    pub channels: Vec<usize>,
    /// Average-pool factor applied to the 128×128 input before the first block.
    pub stem_pool: usize,
    /// Embedding width after global pooling and the dense projection.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64], stem_pool: 4, feature_dim: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Sage,
    Mlp,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Sage => "sage",
            HeadKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sage" => Ok(HeadKind::Sage),
            "mlp" => Ok(HeadKind::Mlp),
            _ => Err(format!("unknown head {s:?}, expected sage or mlp")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Unweighted,
    Weighted,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unweighted" => Ok(Aggregation::Unweighted),
            "weighted" => Ok(Aggregation::Weighted),
            _ => Err(format!("unknown aggregation {s:?}, expected weighted or unweighted")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub layers: usize,
    pub hidden: usize,
    /// Applied after the first layer only.
    pub dropout: f64,
    pub classes: usize,
    pub aggregation: Aggregation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { kind: HeadKind::Sage, layers: 2, hidden: 32, dropout: 0.5, classes: NUM_CLASSES, aggregation: Aggregation::Unweighted }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if e.feature_dim == 0 || e.channels.is_empty() || e.channels.contains(&0) {
            return bad("encoder widths must be positive");
        }
        if e.stem_pool == 0 || CROP_SIZE % e.stem_pool != 0 {
            return bad("stem_pool must divide the crop size");
        }
        let side = CROP_SIZE / e.stem_pool;
        if side >> e.channels.len() == 0 {
            return bad("too many pooling blocks for the crop size");
        }
        let h = &self.head;
        if h.layers == 0 || h.hidden == 0 || h.classes < 2 {
            return bad("head needs at least one layer, positive width and two classes");
        }
        if !(0.0..1.0).contains(&h.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Parameter names and shapes in store order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (k, &c) in self.encoder.channels.iter().enumerate() {
            out.push((format!("encoder.conv{k}.weight"), vec![c, c_in, 3, 3], c_in * 9));
            out.push((format!("encoder.conv{k}.bias"), vec![c], 0));
            c_in = c;
        }
        let f = self.encoder.feature_dim;
        out.push(("encoder.fc.weight".into(), vec![f, c_in], c_in));
        out.push(("encoder.fc.bias".into(), vec![f], 0));
        let h = &self.head;
        let mut d_in = f;
        for l in 0..h.layers {
            let d_out = if l + 1 == h.layers { h.classes } else { h.hidden };
            out.push((format!("head.{l}.self.weight"), vec![d_out, d_in], d_in));
            if h.kind == HeadKind::Sage {
                out.push((format!("head.{l}.neigh.weight"), vec![d_out, d_in], d_in));
            }
            out.push((format!("head.{l}.bias"), vec![d_out], 0));
            d_in = d_out;
        }
        out
    }
}

/// Trainable damage model. Parameter values depend only on the config seed
/// and each parameter's name.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Forward outputs recorded on a tape.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Handles of every parameter, in store order.
    pub params: Vec<Var>,
}

impl<T: Scalar> DamageModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in config.param_shapes() {
            let t = if fan_in == 0 { Tensor::zeros(&shape) } else { he_uniform(&shape, fan_in, config.seed, &name) };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head.kind
    }

    pub fn cast<U: Scalar>(&self) -> DamageModel<U> {
        DamageModel { config: self.config.clone(), params: self.params.cast() }
    }

    fn load_params(&self, g: &mut Graph<T>) -> Vec<(String, Var)> {
        self.params.iter().map(|(n, t)| (n.to_string(), g.param(t.clone()))).collect()
    }

    /// Shared-weight encoder over a stack of RGB crops `[N, 3, 128, 128]`.
    fn encoder_stream(&self, g: &mut Graph<T>, vars: &[(String, Var)], x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        if self.config.encoder.stem_pool > 1 {
            h = g.avg_pool2d(h, self.config.encoder.stem_pool)?;
        }
        for k in 0..self.config.encoder.channels.len() {
            let w = lookup(vars, &format!("encoder.conv{k}.weight"))?;
            let b = lookup(vars, &format!("encoder.conv{k}.bias"))?;
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            h = g.relu(h);
            h = g.max_pool2d(h, 2, 2)?;
        }
        h = g.global_avg_pool(h)?;
        let w = lookup(vars, "encoder.fc.weight")?;
        let b = lookup(vars, "encoder.fc.bias")?;
        h = g.dense(h, w, Some(b))?;
        Ok(g.relu(h))
    }

    /// Change embeddings `enc(pre) − enc(post)`, `[B, F]`. Embedding inputs
    /// are passed through unchanged.
    fn encode_into(&self, g: &mut Graph<T>, vars: &[(String, Var)], features: &NodeFeatures) -> Result<Var, ModelError> {
        let f = self.config.encoder.feature_dim;
        match features {
            NodeFeatures::Embeddings { dim, data } => {
                if *dim != f {
                    return Err(NnError::ShapeMismatch(format!("embeddings of dim {dim}, model expects {f}")).into());
                }
                let n = data.len() / dim;
                let t = Tensor::new(vec![n, f], data.iter().map(|&v| T::from_f64(v as f64)).collect())?;
                Ok(g.constant(t))
            }
            NodeFeatures::Crops(data) => {
                let plane = 3 * CROP_SIZE * CROP_SIZE;
                let n = data.len() / (2 * plane);
                if data.len() != n * 2 * plane {
                    return Err(NnError::ShapeMismatch(format!("{} crop values is not a multiple of 6x128x128", data.len())).into());
                }
                // Stack all pre crops, then all post crops, so one encoder
                // pass serves both streams.
                let mut stacked = Vec::with_capacity(data.len());
                for half in 0..2 {
                    for row in data.chunks_exact(2 * plane) {
                        stacked.extend(row[half * plane..(half + 1) * plane].iter().map(|&v| T::from_f64(v as f64)));
                    }
                }
                let x = g.constant(Tensor::new(vec![2 * n, 3, CROP_SIZE, CROP_SIZE], stacked)?);
                let z = self.encoder_stream(g, vars, x)?;
                let pre_idx: Vec<usize> = (0..n).collect();
                let post_idx: Vec<usize> = (n..2 * n).collect();
                let pre = g.gather_rows(z, &pre_idx)?;
                let post = g.gather_rows(z, &post_idx)?;
                Ok(g.sub(pre, post)?)
            }
        }
    }

    /// One SAGE layer: `W_self h_v + W_neigh agg(h_u) + b` without activation.
    fn sage_layer(
        &self,
        g: &mut Graph<T>,
        vars: &[(String, Var)],
        l: usize,
        h: Var,
        batch: &GraphBatch,
    ) -> Result<Var, ModelError> {
        let ws = lookup(vars, &format!("head.{l}.self.weight"))?;
        let wn = lookup(vars, &format!("head.{l}.neigh.weight"))?;
        let b = lookup(vars, &format!("head.{l}.bias"))?;
        let agg = aggregate(g, h, batch, self.config.head.aggregation)?;
        let own = g.dense(h, ws, Some(b))?;
        let nb = g.dense(agg, wn, None)?;
        Ok(g.add(own, nb)?)
    }

    /// Records the full forward pass and returns the logits handle.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: &GraphBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let vars = self.load_params(g);
        let mut h = self.encode_into(g, &vars, &batch.features)?;
        let head = &self.config.head;
        for l in 0..head.layers {
            h = match head.kind {
                HeadKind::Sage => self.sage_layer(g, &vars, l, h, batch)?,
                HeadKind::Mlp => {
                    let w = lookup(&vars, &format!("head.{l}.self.weight"))?;
                    let b = lookup(&vars, &format!("head.{l}.bias"))?;
                    g.dense(h, w, Some(b))?
                }
            };
            if l + 1 < head.layers {
                h = g.relu(h);
                if l == 0 {
                    h = g.dropout(h, head.dropout, train, rng)?;
                }
            }
        }
        Ok(Forward { logits: h, params: vars.into_iter().map(|(_, v)| v).collect() })
    }

    /// Change embeddings for every node, `[B, F]`.
    pub fn encode(&self, features: &NodeFeatures) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.load_params(&mut g);
        let e = self.encode_into(&mut g, &vars, features)?;
        Ok(g.value(e).clone())
    }

    /// Evaluation-mode logits, `[B, K]`.
    pub fn logits(&self, batch: &GraphBatch) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward_tape(&mut g, batch, false, &mut rng)?;
        Ok(g.value(f.logits).clone())
    }

    /// Class probabilities, `[B, K]`. Training mode applies dropout drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &GraphBatch, train: bool, rng: &mut R) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let f = self.forward_tape(&mut g, batch, train, rng)?;
        let p = g.softmax(f.logits)?;
        Ok(g.value(p).clone())
    }

    /// Writes the parameters and a JSON sidecar holding the config.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp).map_err(io)?;
            nn::write_checkpoint(&self.params, BufWriter::new(f))?;
        }
        fs::rename(&tmp, path).map_err(io)?;
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, serde_json::to_vec_pretty(&self.config)?)
            .map_err(|source| ModelError::Io { path: sidecar, source })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let sidecar = sidecar_path(path);
        let bytes = fs::read(&sidecar).map_err(|source| ModelError::Io { path: sidecar, source })?;
        let config: ModelConfig = serde_json::from_slice(&bytes)?;
        let f = fs::File::open(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        let params: ParamStore<T> = nn::read_checkpoint(BufReader::new(f))?;
        let fresh = Self::new(config)?;
        for (name, t) in fresh.params.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(NnError::ShapeMismatch(format!("{name}: {:?} vs {:?}", got.shape(), t.shape())).into());
            }
        }
        if params.len() != fresh.params.len() {
            return Err(ModelError::Config("checkpoint has unexpected parameters".into()));
        }
        Ok(Self { config: fresh.config, params })
    }
}

fn lookup(vars: &[(String, Var)], name: &str) -> Result<Var, ModelError> {
    vars.iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .ok_or_else(|| ModelError::Nn(NnError::InvalidArgument(format!("missing parameter {name}"))))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Mean of neighbor rows per node over the batch's aggregation lists.
/// Nodes without neighbors get a zero row.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, h: Var, batch: &GraphBatch, mode: Aggregation) -> Result<Var, ModelError> {
    let n = batch.num_nodes();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut w = Vec::new();
    for (v, list) in batch.neighbors.iter().enumerate() {
        for &(u, wt) in list {
            src.push(u);
            dst.push(v);
            w.push(T::from_f64(wt));
        }
    }
    let rows = g.gather_rows(h, &src)?;
    let weights = match mode {
        Aggregation::Weighted => Some(w.as_slice()),
        Aggregation::Unweighted => None,
    };
    Ok(g.scatter_mean(rows, &dst, weights, n)?)
}
