//! Memory-augmented encoder with meshed decoder cross-attention.

use rand::Rng;

use super::layers::{causal_mask, curriculum_rows, positional_encoding, Attention, FeedForward, Linear, Norm};
use super::ModelConfig;
use crate::autograd::{Graph, Var};
use crate::curriculum::LoGKernel;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const G: ParamGroup = ParamGroup::Caption;

#[derive(Clone, Debug, PartialEq)]
struct EncoderBlock {
    att: Attention,
    mem_k: ParamId,
    mem_v: ParamId,
    n1: Norm,
    ff: FeedForward,
    n2: Norm,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderBlock {
    self_att: Attention,
    n1: Norm,
    cross: Attention,
    gates: Vec<Linear>,
    n2: Norm,
    ff: FeedForward,
    n3: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct CaptionHead {
    input: Linear,
    enc: Vec<EncoderBlock>,
    embed: ParamId,
    dec: Vec<DecoderBlock>,
    out: Linear,
}

impl CaptionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let input = Linear::new(store, "caption.input", G, cfg.feature_dim(), d, rng);
        let enc = (0..cfg.n_enc)
            .map(|i| {
                let p = format!("caption.enc{i}");
                EncoderBlock {
                    att: Attention::new(store, &format!("{p}.att"), G, d, cfg.n_heads, rng),
                    mem_k: store.add_normal(format!("{p}.mem_k"), G, &[cfg.n_memory, d], (1.0 / d as f64).sqrt(), rng),
                    mem_v: store.add_normal(format!("{p}.mem_v"), G, &[cfg.n_memory, d], (1.0 / d as f64).sqrt(), rng),
                    n1: Norm::new(store, &format!("{p}.n1"), G, d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), G, d, cfg.ffn_dim, rng),
                    n2: Norm::new(store, &format!("{p}.n2"), G, d),
                }
            })
            .collect();
        let embed = store.add_normal("caption.embed", G, &[cfg.vocab_size, d], 0.3, rng);
        let dec = (0..cfg.n_dec)
            .map(|i| {
                let p = format!("caption.dec{i}");
                DecoderBlock {
                    self_att: Attention::new(store, &format!("{p}.self"), G, d, cfg.n_heads, rng),
                    n1: Norm::new(store, &format!("{p}.n1"), G, d),
                    cross: Attention::new(store, &format!("{p}.cross"), G, d, cfg.n_heads, rng),
                    gates: (0..cfg.n_enc)
                        .map(|j| Linear::new(store, &format!("{p}.gate{j}"), G, 2 * d, d, rng))
                        .collect(),
                    n2: Norm::new(store, &format!("{p}.n2"), G, d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), G, d, cfg.ffn_dim, rng),
                    n3: Norm::new(store, &format!("{p}.n3"), G, d),
                }
            })
            .collect();
        let out = Linear::new(store, "caption.out", G, d, cfg.vocab_size, rng);
        Self { input, enc, embed, dec, out }
    }

    /// Region features `[R, D]` to the output of every encoder block.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        regions: Var,
        kernel: Option<&LoGKernel>,
    ) -> Result<Vec<Var>> {
        let s = g.shape(regions).to_vec();
        if s.len() != 2 || s[0] == 0 || s[1] != cfg.feature_dim() {
            return Err(Error::shape(format!("caption regions {s:?}")));
        }
        let h = self.input.forward(g, store, regions)?;
        let mut h = curriculum_rows(g, h, kernel)?;
        if cfg.region_pos_enc {
            let pe = g.input(positional_encoding(s[0], cfg.d_model));
            h = g.add(h, pe)?;
        }
        let mut outs = Vec::with_capacity(self.enc.len());
        for b in &self.enc {
            let mk = g.param(store, b.mem_k);
            let mv = g.param(store, b.mem_v);
            let a = b.att.forward(g, store, h, h, Some((mk, mv)), None)?;
            let r = g.add(h, a)?;
            let r = b.n1.forward(g, store, r)?;
            let f = b.ff.forward(g, store, r)?;
            let r2 = g.add(r, f)?;
            h = b.n2.forward(g, store, r2)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Teacher-forced logits `[L, V]` for `tokens` given encoder outputs.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, enc: &[Var], tokens: &[usize]) -> Result<Var> {
        let l = tokens.len();
        if l == 0 || l > cfg.max_caption_len {
            return Err(Error::invalid(format!("token sequence of length {l} (max {})", cfg.max_caption_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        let e = g.param(store, self.embed);
        let x = g.gather_rows(e, tokens)?;
        let pe = g.input(positional_encoding(l, cfg.d_model));
        let mut x = g.add(x, pe)?;
        let mask = g.input(causal_mask(cfg.n_heads, l));
        let mesh_scale = 1.0 / (enc.len() as f64).sqrt();
        for b in &self.dec {
            let a = b.self_att.forward(g, store, x, x, None, Some(mask))?;
            let s = g.add(x, a)?;
            let s = b.n1.forward(g, store, s)?;
            let mut mesh: Option<Var> = None;
            for (e_i, gate) in enc.iter().zip(&b.gates) {
                let c = b.cross.forward(g, store, s, *e_i, None, None)?;
                let sc = g.concat(&[s, c], 1)?;
                let alpha = gate.forward(g, store, sc)?;
                let alpha = g.sigmoid(alpha);
                let term = g.mul(alpha, c)?;
                mesh = Some(match mesh {
                    Some(m) => g.add(m, term)?,
                    None => term,
                });
            }
            let m = g.scale(mesh.expect("at least one encoder block"), mesh_scale);
            let s2 = g.add(s, m)?;
            let s2 = b.n2.forward(g, store, s2)?;
            let f = b.ff.forward(g, store, s2)?;
            let s3 = g.add(s2, f)?;
            x = b.n3.forward(g, store, s3)?;
        }
        self.out.forward(g, store, x)
    }
}

/// Greedy decoding result with the logits used to pick every generated token.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub step_logits: Vec<Tensor>,
}
