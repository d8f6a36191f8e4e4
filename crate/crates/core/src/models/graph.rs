//! Single-layer graph attention over the tissue–instrument graph, followed by an
//! edge classifier on `[h_tissue ‖ h_instrument ‖ spatial]`.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{curriculum_rows, Linear};
use super::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::curriculum::LoGKernel;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::synthdata::SPATIAL_DIM;
use crate::tensor::Tensor;

const G: ParamGroup = ParamGroup::SceneGraph;

/// How attention scores on the directed edges are normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// Softmax over all edges entering a node; nodes aggregate every neighbour.
    PerDestination,
    /// Independent sigmoid gate per directed edge; each edge sees only its own endpoints.
    PerEdgePair,
}

impl AttentionNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionNorm::PerDestination => "per_destination",
            AttentionNorm::PerEdgePair => "per_edge_pair",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_destination" => Some(AttentionNorm::PerDestination),
            "per_edge_pair" => Some(AttentionNorm::PerEdgePair),
            _ => None,
        }
    }
}

/// One frame's graph. `edges` are `(tissue_node, instrument_node)`; message passing
/// runs along both directions of every edge and nowhere else.
#[derive(Clone, Debug)]
pub struct GraphInput {
    /// `[N, D]` visual node features.
    pub visual: Var,
    /// `[N, semantic_dim]`.
    pub semantic: Tensor,
    /// `[E, 12]`, row `k` belongs to `edges[k]`.
    pub spatial: Tensor,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct GraphHead {
    proj: Linear,
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
    e1: Linear,
    e2: Linear,
}

impl GraphHead {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let h = cfg.graph_hidden;
        Self {
            proj: Linear::new(store, "graph.proj", G, cfg.feature_dim() + cfg.semantic_dim, h, rng),
            w: store.add_normal("graph.gat.w", G, &[h, h], (1.0 / h as f64).sqrt(), rng),
            a_src: store.add_normal("graph.gat.a_src", G, &[h, 1], (1.0 / h as f64).sqrt(), rng),
            a_dst: store.add_normal("graph.gat.a_dst", G, &[h, 1], (1.0 / h as f64).sqrt(), rng),
            e1: Linear::new(store, "graph.edge1", G, 2 * h + SPATIAL_DIM, cfg.edge_hidden, rng),
            e2: Linear::new(store, "graph.edge2", G, cfg.edge_hidden, cfg.k_int, rng),
        }
    }

    fn check(g: &Graph, cfg: &ModelConfig, input: &GraphInput) -> Result<usize> {
        let vs = g.shape(input.visual);
        if vs.len() != 2 || vs[1] != cfg.feature_dim() {
            return Err(Error::shape(format!("graph visual features {vs:?}")));
        }
        let n = vs[0];
        if n < 2 {
            return Err(Error::invalid("graph needs at least two nodes"));
        }
        if input.semantic.shape() != [n, cfg.semantic_dim] {
            return Err(Error::shape(format!("semantic features {:?}", input.semantic.shape())));
        }
        if input.edges.is_empty() {
            return Err(Error::invalid("graph has no edges"));
        }
        if input.spatial.shape() != [input.edges.len(), SPATIAL_DIM] {
            return Err(Error::shape(format!("spatial features {:?}", input.spatial.shape())));
        }
        let mut seen = BTreeSet::new();
        for &(t, i) in &input.edges {
            if t >= n || i >= n || t == i || !seen.insert((t.min(i), t.max(i))) {
                return Err(Error::invalid(format!("bad edge ({t}, {i}) for {n} nodes")));
            }
        }
        Ok(n)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        input: &GraphInput,
        kernel: Option<&LoGKernel>,
        norm: AttentionNorm,
    ) -> Result<Var> {
        let n = Self::check(g, cfg, input)?;
        let e = input.edges.len();
        let sem = g.input(input.semantic.clone());
        let x = g.concat(&[input.visual, sem], 1)?;
        let h = self.proj.forward(g, store, x)?;
        let h = curriculum_rows(g, h, kernel)?;
        let h = g.relu(h);
        let w = g.param(store, self.w);
        let hp = g.matmul(h, w)?;

        // Directed edges: first instrument → tissue, then tissue → instrument.
        let tissue: Vec<usize> = input.edges.iter().map(|p| p.0).collect();
        let inst: Vec<usize> = input.edges.iter().map(|p| p.1).collect();
        let src: Vec<usize> = inst.iter().chain(&tissue).copied().collect();
        let dst: Vec<usize> = tissue.iter().chain(&inst).copied().collect();

        let a_dst = g.param(store, self.a_dst);
        let a_src = g.param(store, self.a_src);
        let sd = g.matmul(hp, a_dst)?;
        let ss = g.matmul(hp, a_src)?;
        let sd = g.gather_rows(sd, &dst)?;
        let ss = g.gather_rows(ss, &src)?;
        let score = g.add(sd, ss)?;
        let score = g.leaky_relu(score, 0.2);
        let msg_src = g.gather_rows(hp, &src)?;

        let (h_t, h_i) = match norm {
            AttentionNorm::PerDestination => {
                let alpha = g.segment_softmax(score, &dst)?;
                let msg = g.scale_rows(msg_src, alpha)?;
                let agg = g.scatter_add_rows(msg, &dst, n)?;
                let hn = g.add(hp, agg)?;
                let hn = g.relu(hn);
                (g.gather_rows(hn, &tissue)?, g.gather_rows(hn, &inst)?)
            }
            AttentionNorm::PerEdgePair => {
                let alpha = g.sigmoid(score);
                let msg = g.scale_rows(msg_src, alpha)?;
                let own = g.gather_rows(hp, &dst)?;
                let upd = g.add(own, msg)?;
                let upd = g.relu(upd);
                let first: Vec<usize> = (0..e).collect();
                let second: Vec<usize> = (e..2 * e).collect();
                (g.gather_rows(upd, &first)?, g.gather_rows(upd, &second)?)
            }
        };
        let sp = g.input(input.spatial.clone());
        let xe = g.concat(&[h_t, h_i, sp], 1)?;
        let z = self.e1.forward(g, store, xe)?;
        let z = g.relu(z);
        self.e2.forward(g, store, z)
    }
}
