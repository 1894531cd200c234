//! The image classifier: convolutional stem, optional learnable position
//! embedding, pre-norm encoder blocks and a sequence-pooling head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_params, save_checkpoint, CHECKPOINT_CONFIG, CHECKPOINT_MANIFEST, CHECKPOINT_PARAMS};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionGeometry, AttentionKind, AttentionVars};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{kaiming_normal, trunc_normal};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEmbedding {
    None,
    Learnable,
}

impl fmt::Display for PosEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEmbedding::None => "none",
            PosEmbedding::Learnable => "learnable",
        })
    }
}

impl FromStr for PosEmbedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PosEmbedding::None),
            "learnable" => Ok(PosEmbedding::Learnable),
            other => Err(Error::Config(format!("unknown pos_embedding `{other}`"))),
        }
    }
}

/// One 3×3 convolution (padding 1) + ReLU, optionally followed by a 3×3
/// stride-2 max-pool with padding 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemStage {
    pub out_channels: usize,
    pub stride: usize,
    pub pool: bool,
}

impl StemStage {
    pub const KERNEL: usize = 3;

    /// Spatial extent after this stage.
    pub fn output_extent(&self, input: usize) -> usize {
        let conv = (input - 1) / self.stride + 1;
        if self.pool {
            (conv - 1) / 2 + 1
        } else {
            conv
        }
    }
}

impl fmt::Display for StemStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pool = if self.pool { "pool" } else { "nopool" };
        write!(f, "{}:{}:{}", self.out_channels, self.stride, pool)
    }
}

impl FromStr for StemStage {
    type Err = Error;

    /// `channels[:stride][:pool|nopool]`, e.g. `32:1:pool`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad stem stage `{s}`, expected channels[:stride][:pool|nopool]"));
        let mut parts = s.trim().split(':');
        let out_channels = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let mut stage = StemStage {
            out_channels,
            stride: 1,
            pool: true,
        };
        for p in parts {
            match p {
                "pool" => stage.pool = true,
                "nopool" => stage.pool = false,
                n => stage.stride = n.parse().map_err(|_| bad())?,
            }
        }
        if stage.out_channels == 0 || stage.stride == 0 {
            return Err(bad());
        }
        Ok(stage)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub in_channels: usize,
    pub stem: Vec<StemStage>,
    /// Must equal the last stem stage's channel count.
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pos_embedding: PosEmbedding,
    pub num_classes: usize,
    pub attention: AttentionKind,
    pub qkv_bias: bool,
}

impl Default for ModelConfig {
    /// Two-block coupled model for 28×28 grayscale digits.
    fn default() -> Self {
        ModelConfig {
            img_h: 28,
            img_w: 28,
            in_channels: 1,
            stem: vec![
                StemStage {
                    out_channels: 8,
                    stride: 1,
                    pool: true,
                },
                StemStage {
                    out_channels: 32,
                    stride: 1,
                    pool: true,
                },
            ],
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            pos_embedding: PosEmbedding::Learnable,
            num_classes: 10,
            attention: AttentionKind::CoupledFast,
            qkv_bias: false,
        }
    }
}

impl ModelConfig {
    /// Token grid `(h, w)` produced by the stem.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        if self.img_h == 0 || self.img_w == 0 {
            return Err(Error::Config(format!("image size {}x{} is empty", self.img_h, self.img_w)));
        }
        let (h, w) = self
            .stem
            .iter()
            .fold((self.img_h, self.img_w), |(h, w), s| (s.output_extent(h), s.output_extent(w)));
        if h == 0 || w == 0 {
            return Err(Error::Config("stem collapses the feature map to zero".into()));
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem.is_empty() {
            return Err(Error::Config("stem needs at least one stage".into()));
        }
        let last = self.stem.last().map(|s| s.out_channels).unwrap_or(0);
        if last != self.embed_dim {
            return Err(Error::Config(format!(
                "last stem stage has {last} channels but embed_dim is {}",
                self.embed_dim
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("in_channels, num_classes and mlp_ratio must be positive".into()));
        }
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<AttentionGeometry> {
        let (h, w) = self.token_grid()?;
        AttentionGeometry::new(h, w, self.embed_dim, self.heads).map_err(|e| Error::Config(e.to_string()))
    }

    /// Closed-form parameter count:
    /// stem + position table + depth·(2 LN + 4d² + FFN) + final LN + pool + head.
    pub fn analytic_param_count(&self) -> Result<usize> {
        let (h, w) = self.token_grid()?;
        let d = self.embed_dim;
        let hidden = self.mlp_ratio * d;
        let mut stem = 0;
        let mut c_in = self.in_channels;
        for s in &self.stem {
            stem += s.out_channels * c_in * 9 + s.out_channels;
            c_in = s.out_channels;
        }
        let pos = match self.pos_embedding {
            PosEmbedding::None => 0,
            PosEmbedding::Learnable => h * w * d,
        };
        let attn = 4 * d * d + if self.qkv_bias { 4 * d } else { 0 };
        let block = 2 * (2 * d) + attn + (d * hidden + hidden + hidden * d + d);
        let final_norm = 2 * d;
        let pool = d;
        let head = d * self.num_classes + self.num_classes;
        Ok(stem + pos + self.depth * block + final_norm + pool + head)
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    biases: Option<[ParamId; 4]>,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    attn: AttnIds,
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Vec<(ParamId, ParamId)>,
    pos: Option<ParamId>,
    blocks: Vec<BlockIds>,
    norm: (ParamId, ParamId),
    pool: ParamId,
    head: (ParamId, ParamId),
}

/// Graph handles for one encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockVars {
    pub ln1: (Var, Var),
    pub attn: AttentionVars,
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    geometry: AttentionGeometry,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = config.embed_dim;
        let hidden = config.mlp_ratio * d;

        let mut stem = Vec::with_capacity(config.stem.len());
        let mut c_in = config.in_channels;
        for (i, s) in config.stem.iter().enumerate() {
            let k = StemStage::KERNEL;
            let w = kaiming_normal(&[s.out_channels, c_in, k, k], c_in * k * k, &mut rng);
            let w = p.push(format!("stem.{i}.weight"), w);
            let b = p.push(format!("stem.{i}.bias"), Tensor::zeros(&[s.out_channels]));
            stem.push((w, b));
            c_in = s.out_channels;
        }
        let pos = match config.pos_embedding {
            PosEmbedding::None => None,
            PosEmbedding::Learnable => Some(p.push("pos_embedding", Tensor::zeros(&[geometry.tokens(), d]))),
        };
        let layer_norm = |p: &mut ParamStore, name: String| {
            (
                p.push(format!("{name}.gamma"), Tensor::ones(&[d])),
                p.push(format!("{name}.beta"), Tensor::zeros(&[d])),
            )
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let ln1 = layer_norm(&mut p, format!("blocks.{b}.ln1"));
            let mut proj = |p: &mut ParamStore, n: &str| {
                p.push(format!("blocks.{b}.attn.{n}"), trunc_normal(&[d, d], INIT_STD, &mut rng))
            };
            let (wq, wk, wv, wo) = (proj(&mut p, "wq"), proj(&mut p, "wk"), proj(&mut p, "wv"), proj(&mut p, "wo"));
            let biases = config.qkv_bias.then(|| {
                ["bq", "bk", "bv", "bo"].map(|n| p.push(format!("blocks.{b}.attn.{n}"), Tensor::zeros(&[d])))
            });
            let ln2 = layer_norm(&mut p, format!("blocks.{b}.ln2"));
            let fc1 = (
                p.push(format!("blocks.{b}.ffn.w1"), trunc_normal(&[d, hidden], INIT_STD, &mut rng)),
                p.push(format!("blocks.{b}.ffn.b1"), Tensor::zeros(&[hidden])),
            );
            let fc2 = (
                p.push(format!("blocks.{b}.ffn.w2"), trunc_normal(&[hidden, d], INIT_STD, &mut rng)),
                p.push(format!("blocks.{b}.ffn.b2"), Tensor::zeros(&[d])),
            );
            blocks.push(BlockIds {
                ln1,
                attn: AttnIds { wq, wk, wv, wo, biases },
                ln2,
                fc1,
                fc2,
            });
        }
        let norm = layer_norm(&mut p, "norm".into());
        let pool = p.push("pool.weight", trunc_normal(&[d, 1], INIT_STD, &mut rng));
        let head = (
            p.push("head.weight", trunc_normal(&[d, config.num_classes], INIT_STD, &mut rng)),
            p.push("head.bias", Tensor::zeros(&[config.num_classes])),
        );
        Ok(Model {
            config,
            geometry,
            params: p,
            layout: Layout {
                stem,
                pos,
                blocks,
                norm,
                pool,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> AttentionGeometry {
        self.geometry
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Replaces the parameter values, which must match names and shapes.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.names() != self.params.names() {
            return Err(Error::Format(format!(
                "incompatible checkpoint geometry: {} parameters in checkpoint, {} expected (or names differ)",
                store.len(),
                self.params.len()
            )));
        }
        for ((name, have), want) in store.iter().zip(self.params.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "incompatible checkpoint geometry: {name} has shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        self.params = store;
        Ok(())
    }

    /// Registers every parameter as a trainable leaf; the result is indexed
    /// in registration order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(t.clone())).collect()
    }

    fn var(bound: &[Var], id: ParamId) -> Var {
        bound[id.0]
    }

    pub fn block_vars(&self, bound: &[Var], block: usize) -> EncoderBlockVars {
        let ids = &self.layout.blocks[block];
        let v = |id: ParamId| Self::var(bound, id);
        EncoderBlockVars {
            ln1: (v(ids.ln1.0), v(ids.ln1.1)),
            attn: AttentionVars {
                wq: v(ids.attn.wq),
                wk: v(ids.attn.wk),
                wv: v(ids.attn.wv),
                wo: v(ids.attn.wo),
                biases: ids.attn.biases.map(|b| b.map(v)),
            },
            ln2: (v(ids.ln2.0), v(ids.ln2.1)),
            fc1: (v(ids.fc1.0), v(ids.fc1.1)),
            fc2: (v(ids.fc2.0), v(ids.fc2.1)),
        }
    }

    /// Logits (shape `[num_classes]`) for one `C×H×W` image.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], image: Var) -> Result<Var> {
        let c = &self.config;
        if g.shape(image) != [c.in_channels, c.img_h, c.img_w] {
            return Err(Error::shape(
                "model_forward",
                format!("image {:?}, expected [{}, {}, {}]", g.shape(image), c.in_channels, c.img_h, c.img_w),
            ));
        }
        let stem: Vec<(Var, Var)> = self
            .layout
            .stem
            .iter()
            .map(|&(w, b)| (Self::var(bound, w), Self::var(bound, b)))
            .collect();
        let mut x = conv_stem_forward(g, image, &stem, &c.stem)?;
        if let Some(pos) = self.layout.pos {
            x = g.add(x, Self::var(bound, pos))?;
        }
        for b in 0..self.layout.blocks.len() {
            let vars = self.block_vars(bound, b);
            x = encoder_block_forward(g, x, &vars, c.attention, &self.geometry)?;
        }
        let (ng, nb) = self.layout.norm;
        x = g.layer_norm(x, Self::var(bound, ng), Self::var(bound, nb))?;
        let pooled = sequence_pool(g, x, Self::var(bound, self.layout.pool))?;
        let (hw, hb) = self.layout.head;
        let logits = g.matmul(pooled, Self::var(bound, hw))?;
        let logits = g.add_row(logits, Self::var(bound, hb))?;
        g.reshape(logits, &[c.num_classes])
    }

    /// Logits for one image, without recording gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, &bound, x)?;
        Ok(g.value(logits).clone())
    }

    /// Cross-entropy loss, whether the argmax is correct, and the gradient of
    /// the loss for every parameter (in registration order).
    pub fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<SampleGrads> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, &bound, x)?;
        let correct = argmax(g.value(logits).data()) == label;
        let loss = g.cross_entropy(logits, label)?;
        let loss_value = g.value(loss).item()?;
        g.backward(loss)?;
        let grads = bound
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok(SampleGrads {
            loss: loss_value,
            correct,
            grads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SampleGrads {
    pub loss: f64,
    pub correct: bool,
    pub grads: Vec<Tensor>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Runs the stem stages and flattens the final `c×h×w` map to `L×c` tokens
/// in raster order.
pub fn conv_stem_forward(g: &mut Graph, image: Var, weights: &[(Var, Var)], stages: &[StemStage]) -> Result<Var> {
    if weights.len() != stages.len() {
        return Err(Error::Invalid(format!("{} stem weights for {} stages", weights.len(), stages.len())));
    }
    let mut x = image;
    for (&(w, b), stage) in weights.iter().zip(stages) {
        x = g.conv2d(x, w, b, stage.stride, 1)?;
        x = g.relu(x);
        if stage.pool {
            x = g.max_pool2d(x, 3, 2, 1)?;
        }
    }
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose2d(flat)
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))` with a GELU
/// hidden layer.
pub fn encoder_block_forward(
    g: &mut Graph,
    x: Var,
    vars: &EncoderBlockVars,
    kind: AttentionKind,
    geom: &AttentionGeometry,
) -> Result<Var> {
    let n1 = g.layer_norm(x, vars.ln1.0, vars.ln1.1)?;
    let a = attend(g, kind, n1, &vars.attn, geom)?;
    let x = g.add(x, a)?;
    let n2 = g.layer_norm(x, vars.ln2.0, vars.ln2.1)?;
    let h = g.matmul(n2, vars.fc1.0)?;
    let h = g.add_row(h, vars.fc1.1)?;
    let h = g.gelu(h);
    let f = g.matmul(h, vars.fc2.0)?;
    let f = g.add_row(f, vars.fc2.1)?;
    g.add(x, f)
}

/// Attention-weighted token average: `α = softmax_L(x·weight)`, output
/// `αᵀ·x` of shape `1×d`.
pub fn sequence_pool(g: &mut Graph, x: Var, weight: Var) -> Result<Var> {
    let scores = g.matmul(x, weight)?;
    let scores = g.transpose2d(scores)?;
    let alpha = g.softmax_rows(scores)?;
    g.matmul(alpha, x)
}

#[cfg(test)]
mod tests;
