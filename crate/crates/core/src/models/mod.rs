//! The multi-task model: a shared convolutional extractor, an expandable instrument
//! classifier, a caption transformer and a graph-attention interaction head.

mod caption;
pub mod checkpoint;
mod graph;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use caption::Generation;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use graph::{AttentionNorm, GraphInput};

use crate::autograd::{Graph, Var};
use crate::curriculum::LoGKernel;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::synthdata::{crop_resize, encode_spatial_feature, semantic_embedding, DatasetConfig, SceneInstance, BOS, EOS, SPATIAL_DIM};
use crate::tensor::Tensor;
use caption::CaptionHead;
use graph::GraphHead;
use layers::{rms_rescale, square_side};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k_cls: usize,
    pub k_int: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    /// Side of the square crop fed to the extractor.
    pub crop_size: usize,
    /// Output channels of the stride-2 stages; the last entry is the feature dimension.
    pub channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_memory: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub ffn_dim: usize,
    pub semantic_dim: usize,
    pub graph_hidden: usize,
    pub edge_hidden: usize,
    pub attention_norm: AttentionNorm,
    pub region_pos_enc: bool,
}

impl ModelConfig {
    pub fn for_dataset(ds: &DatasetConfig) -> Self {
        Self {
            k_cls: ds.k_cls(),
            k_int: ds.n_interactions,
            vocab_size: ds.vocabulary().len(),
            max_caption_len: ds.max_caption_len,
            crop_size: 56,
            channels: vec![16, 32, 64],
            d_model: 64,
            n_heads: 2,
            n_memory: 4,
            n_enc: 3,
            n_dec: 3,
            ffn_dim: 128,
            semantic_dim: 32,
            graph_hidden: 64,
            edge_hidden: 64,
            attention_norm: AttentionNorm::PerDestination,
            region_pos_enc: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("model.{k}"), m.to_string()));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return err("channels", "need at least one stage with positive width");
        }
        if self.crop_size == 0 || self.crop_size % (1 << self.channels.len()) != 0 {
            return err("crop_size", "must be divisible by 2^stages");
        }
        if self.k_cls < 2 || self.k_int < 1 || self.vocab_size < 5 {
            return err("k_cls", "class, interaction and vocabulary sizes too small");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err("n_heads", "must divide d_model");
        }
        if square_side(self.d_model).is_none() || square_side(self.graph_hidden).is_none() {
            return err("d_model", "d_model and graph_hidden must be perfect squares");
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return err("n_enc", "need at least one encoder and decoder block");
        }
        if self.max_caption_len < 2 {
            return err("max_caption_len", "must be at least 2");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Classifier {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    stages: Vec<Stage>,
    classifier: Classifier,
    caption: CaptionHead,
    graph: GraphHead,
}

impl MtlModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = store.add_normal(format!("shared.conv{i}.w"), ParamGroup::Shared, &[c, cin, 3, 3], std, &mut rng);
            let b = store.add_const(format!("shared.conv{i}.b"), ParamGroup::Shared, &[c], 0.0);
            stages.push(Stage { w, b });
            cin = c;
        }
        let d = config.feature_dim();
        let cw = store.add_normal("classifier.w", ParamGroup::Classifier, &[config.k_cls, d], (1.0 / d as f64).sqrt(), &mut rng);
        let cb = store.add_const("classifier.b", ParamGroup::Classifier, &[config.k_cls], 0.0);
        let caption = CaptionHead::new(&mut store, &config, &mut rng);
        let graph = GraphHead::new(&mut store, &config, &mut rng);
        Ok(Self { config, store, stages, classifier: Classifier { w: cw, b: cb }, caption, graph })
    }

    /// SHA-256 over the configuration and every parameter's name, group and shape.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (_, p) in self.store.iter() {
            h.update(format!("|{}:{}:{:?}", p.name, p.group, p.value.shape()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn k_cls(&self) -> usize {
        self.config.k_cls
    }

    /// `[N, 3, S, S]` crops to `[N, D]` features. Every stage ends with the LoG
    /// filter and a per-sample RMS rescale, which stands in for the batch norm of a
    /// deeper backbone and keeps the zero-sum filter from shrinking activations stage
    /// after stage.
    pub fn extract(&self, g: &mut Graph, crops: Var, kernel: Option<&LoGKernel>) -> Result<Var> {
        let s = g.shape(crops);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("expected [N, 3, H, W] crops, got {s:?}")));
        }
        if s[2] != self.config.crop_size || s[3] != self.config.crop_size {
            return Err(Error::shape(format!("crops must be {0}x{0}, got {s:?}", self.config.crop_size)));
        }
        let mut x = crops;
        for st in &self.stages {
            let w = g.param(&self.store, st.w);
            let b = g.param(&self.store, st.b);
            x = g.conv2d(x, w, 2, 1)?;
            x = g.add_channel_bias(x, b)?;
            x = g.relu(x);
            x = g.curriculum(x, kernel)?;
            x = rms_rescale(g, x)?;
        }
        g.global_avg_pool(x)
    }

    pub fn classify(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        if s.len() != 2 || s[1] != self.config.feature_dim() {
            return Err(Error::shape(format!("classifier input {s:?}")));
        }
        let w = g.param(&self.store, self.classifier.w);
        let b = g.param(&self.store, self.classifier.b);
        let x = g.reshape(feats, &[1, s[0], s[1]])?;
        let w3 = g.reshape(w, &[1, self.config.k_cls, s[1]])?;
        let y = g.bmm(x, w3, true)?;
        let y = g.reshape(y, &[s[0], self.config.k_cls])?;
        g.add_bias(y, b)
    }

    pub fn caption_encode(&self, g: &mut Graph, regions: Var, kernel: Option<&LoGKernel>) -> Result<Vec<Var>> {
        self.caption.encode(g, &self.store, &self.config, regions, kernel)
    }

    pub fn caption_decode(&self, g: &mut Graph, enc: &[Var], tokens: &[usize]) -> Result<Var> {
        self.caption.decode(g, &self.store, &self.config, enc, tokens)
    }

    /// Teacher-forced caption logits `[L, V]` for one frame's regions `[R, D]`.
    pub fn caption_logits(&self, g: &mut Graph, regions: Var, tokens: &[usize], kernel: Option<&LoGKernel>) -> Result<Var> {
        let enc = self.caption_encode(g, regions, kernel)?;
        self.caption_decode(g, &enc, tokens)
    }

    /// Edge logits `[E, K_int]` for one frame.
    pub fn graph_logits(&self, g: &mut Graph, input: &GraphInput, kernel: Option<&LoGKernel>) -> Result<Var> {
        self.graph.forward(g, &self.store, &self.config, input, kernel, self.config.attention_norm)
    }

    pub fn graph_logits_with(&self, g: &mut Graph, input: &GraphInput, kernel: Option<&LoGKernel>, norm: AttentionNorm) -> Result<Var> {
        self.graph.forward(g, &self.store, &self.config, input, kernel, norm)
    }

    pub fn extract_features(&self, crops: &Tensor, kernel: Option<&LoGKernel>) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(crops.clone());
        let f = self.extract(&mut g, x, kernel)?;
        Ok(g.value(f).clone())
    }

    pub fn classify_features(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let y = self.classify(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn caption_forward(&self, regions: &Tensor, tokens: &[usize], kernel: Option<&LoGKernel>) -> Result<Tensor> {
        let mut g = Graph::new();
        let r = g.input(regions.clone());
        let y = self.caption_logits(&mut g, r, tokens, kernel)?;
        Ok(g.value(y).clone())
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens.
    pub fn caption_generate(&self, regions: &Tensor, max_len: usize, kernel: Option<&LoGKernel>) -> Result<Generation> {
        if max_len < 2 || max_len > self.config.max_caption_len {
            return Err(Error::invalid(format!("max_len {max_len} outside [2, {}]", self.config.max_caption_len)));
        }
        let mut g = Graph::new();
        let r = g.input(regions.clone());
        let enc = self.caption_encode(&mut g, r, kernel)?;
        let mut tokens = vec![BOS];
        let mut step_logits = Vec::new();
        while tokens.len() < max_len {
            let y = self.caption_decode(&mut g, &enc, &tokens)?;
            let v = self.config.vocab_size;
            let last = Tensor::new(vec![v], g.value(y).row(tokens.len() - 1).to_vec())?;
            let next = argmax(last.data());
            step_logits.push(last);
            tokens.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(Generation { tokens, step_logits })
    }

    pub fn scenegraph_forward(
        &self,
        visual: &Tensor,
        semantic: &Tensor,
        spatial: &Tensor,
        edges: &[(usize, usize)],
        kernel: Option<&LoGKernel>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.input(visual.clone());
        let input = GraphInput { visual: v, semantic: semantic.clone(), spatial: spatial.clone(), edges: edges.to_vec() };
        let y = self.graph_logits(&mut g, &input, kernel)?;
        Ok(g.value(y).clone())
    }

    /// Evaluation pass over one frame: greedy caption and sigmoid edge scores.
    pub fn predict(&self, frame: &FramePrep, kernel: Option<&LoGKernel>) -> Result<(Vec<usize>, Tensor)> {
        let feats = self.extract_features(&frame.crops, kernel)?;
        let caption = self.caption_generate(&feats, self.config.max_caption_len, kernel)?.tokens;
        let logits = self.scenegraph_forward(&feats, &frame.semantic, &frame.spatial, &frame.edges, kernel)?;
        Ok((caption, logits.map(crate::losses::sigmoid)))
    }

    pub fn expand_classifier_head(&mut self, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(Error::invalid("n_new must be at least 1"));
        }
        let d = self.config.feature_dim();
        let k = self.config.k_cls;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.01).expect("finite std");
        let mut w = self.store.value(self.classifier.w).data().to_vec();
        w.extend((0..n_new * d).map(|_| dist.sample(&mut rng)));
        let mut b = self.store.value(self.classifier.b).data().to_vec();
        b.extend((0..n_new).map(|_| dist.sample(&mut rng)));
        self.store.replace(self.classifier.w, Tensor::new(vec![k + n_new, d], w)?);
        self.store.replace(self.classifier.b, Tensor::new(vec![k + n_new], b)?);
        self.config.k_cls = k + n_new;
        Ok(())
    }

    /// Rebuild a model with this configuration and copy parameter values in id order.
    fn with_values(config: ModelConfig, values: Vec<Tensor>) -> Result<Self> {
        let mut m = MtlModel::new(config, 0)?;
        if values.len() != m.store.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
        for (id, v) in ids.into_iter().zip(values) {
            if v.shape() != m.store.value(id).shape() {
                return Err(Error::shape(format!("parameter {} has shape {:?}", m.store.get(id).name, v.shape())));
            }
            m.store.replace(id, v);
        }
        Ok(m)
    }
}

/// Cloned model with `n_new` extra classifier rows.
pub fn expand_classifier_head(model: &MtlModel, n_new: usize, seed: u64) -> Result<MtlModel> {
    let mut m = model.clone();
    m.expand_classifier_head(n_new, seed)?;
    Ok(m)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Everything a frame contributes to the model, computed once from the raw scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrep {
    pub id: usize,
    /// `[N, 3, S, S]`, one crop per node in node order.
    pub crops: Tensor,
    pub classes: Vec<usize>,
    /// `[N, semantic_dim]`.
    pub semantic: Tensor,
    /// `(tissue_node, instrument_node)`.
    pub edges: Vec<(usize, usize)>,
    /// `[E, 12]`.
    pub spatial: Tensor,
    /// `[E, K_int]` multi-hot.
    pub labels: Tensor,
    pub caption: Vec<usize>,
}

impl FramePrep {
    pub fn n_nodes(&self) -> usize {
        self.classes.len()
    }
}

pub fn prepare_frame(frame: &SceneInstance, cfg: &ModelConfig) -> Result<FramePrep> {
    let (h, w) = frame.image_hw();
    let s = cfg.crop_size;
    let mut crops = Vec::with_capacity(frame.nodes.len() * 3 * s * s);
    let mut semantic = Vec::with_capacity(frame.nodes.len() * cfg.semantic_dim);
    for n in &frame.nodes {
        crops.extend_from_slice(crop_resize(&frame.image, &n.bbox, s)?.data());
        semantic.extend(semantic_embedding(n.class_id, cfg.semantic_dim));
    }
    let mut spatial = Vec::with_capacity(frame.edges.len() * SPATIAL_DIM);
    let mut labels = Vec::with_capacity(frame.edges.len() * cfg.k_int);
    for e in &frame.edges {
        spatial.extend(encode_spatial_feature(&frame.nodes[e.instrument].bbox, &frame.nodes[e.tissue].bbox, w, h)?);
        if e.interactions.len() != cfg.k_int {
            return Err(Error::shape(format!("edge with {} interaction bits, model has {}", e.interactions.len(), cfg.k_int)));
        }
        labels.extend(e.labels());
    }
    let n = frame.nodes.len();
    let ne = frame.edges.len();
    Ok(FramePrep {
        id: frame.id,
        crops: Tensor::new(vec![n, 3, s, s], crops)?,
        classes: frame.nodes.iter().map(|n| n.class_id).collect(),
        semantic: Tensor::new(vec![n, cfg.semantic_dim], semantic)?,
        edges: frame.edges.iter().map(|e| (e.tissue, e.instrument)).collect(),
        spatial: Tensor::new(vec![ne, SPATIAL_DIM], spatial)?,
        labels: Tensor::new(vec![ne, cfg.k_int], labels)?,
        caption: frame.caption.clone(),
    })
}

#[cfg(test)]
mod tests;
