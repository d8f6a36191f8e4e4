use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::curriculum::LoGKernel;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = store.add_normal(format!("{name}.w"), group, &[din, dout], (1.0 / din as f64).sqrt(), rng);
        let b = store.add_const(format!("{name}.b"), group, &[dout], 0.0);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), group, &[d], 1.0),
            beta: store.add_const(format!("{name}.beta"), group, &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), group, d, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), group, hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention over `[L, d]` row sets.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            heads,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (l, d) = (g.shape(x)[0], g.shape(x)[1]);
        let x = g.reshape(x, &[l, self.heads, d / self.heads])?;
        g.permute(x, &[1, 0, 2])
    }

    /// `memory` rows (learned keys, values) are appended after the projected context.
    /// `mask` is added to the `[heads, Lq, Lk]` scores before the softmax.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
        memory: Option<(Var, Var)>,
        mask: Option<Var>,
    ) -> Result<Var> {
        let (lq, d) = (g.shape(query)[0], g.shape(query)[1]);
        let q = self.q.forward(g, store, query)?;
        let mut k = self.k.forward(g, store, context)?;
        let mut v = self.v.forward(g, store, context)?;
        if let Some((mk, mv)) = memory {
            k = g.concat(&[k, mk], 0)?;
            v = g.concat(&[v, mv], 0)?;
        }
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let scores = g.bmm(q, k, true)?;
        let mut scores = g.scale(scores, 1.0 / ((d / self.heads) as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let att = g.softmax_last(scores);
        let out = g.bmm(att, v, false)?;
        let out = g.permute(out, &[1, 0, 2])?;
        let out = g.reshape(out, &[lq, d])?;
        self.o.forward(g, store, out)
    }
}

/// Additive causal mask `[heads, l, l]`: `-1e30` above the diagonal.
pub(crate) fn causal_mask(heads: usize, l: usize) -> Tensor {
    let mut data = vec![0.0; heads * l * l];
    for h in 0..heads {
        for i in 0..l {
            for j in (i + 1)..l {
                data[(h * l + i) * l + j] = -1e30;
            }
        }
    }
    Tensor::new(vec![heads, l, l], data).expect("mask shape")
}

/// Sinusoidal position codes for positions `0..l`.
pub(crate) fn positional_encoding(l: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; l * d];
    for p in 0..l {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * rate;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![l, d], data).expect("pe shape")
}

/// Curriculum filtering of `[n, d]` row features viewed as `n` single-channel `s×s` maps.
pub(crate) fn curriculum_rows(g: &mut Graph, x: Var, kernel: Option<&LoGKernel>) -> Result<Var> {
    let Some(k) = kernel else {
        return Ok(x);
    };
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let side = square_side(d).ok_or_else(|| Error::shape(format!("feature width {d} is not a square")))?;
    let m = g.reshape(x, &[n, 1, side, side])?;
    let m = g.curriculum(m, Some(k))?;
    g.reshape(m, &[n, d])
}

/// Rescales each sample of `[N, ...]` to unit root-mean-square. All-zero samples stay zero.
pub(crate) fn rms_rescale(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let m: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[shape[0], m])?;
    let unit = g.l2_normalize_rows(flat);
    let y = g.scale(unit, (m as f64).sqrt());
    g.reshape(y, &shape)
}

pub(crate) fn square_side(d: usize) -> Option<usize> {
    let s = (d as f64).sqrt().round() as usize;
    (s * s == d).then_some(s)
}
