//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`]; frozen parameters and plain inputs do not require
//! gradients, and nothing downstream of them alone is differentiated.

use crate::curriculum::{apply_curriculum, apply_curriculum_backward, LoGKernel};
use crate::error::{Error, Result};
use crate::params::{Accumulators, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AddChannelBias(Var, Var),
    Curriculum { x: Var, kernel: LoGKernel },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { src: Var, index: Vec<usize> },
    ScatterAddRows { src: Var, index: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    SegmentSoftmax { x: Var, segment: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Fused { inputs: Vec<Var>, grads: Vec<Tensor> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds `weight * dL/dW` into the accumulator of every parameter that received a gradient.
    pub fn accumulate(&self, acc: &mut Accumulators, weight: f64) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                acc.add(id, g, weight);
            }
        }
    }

    /// Total gradient of every parameter that received one, summed over all the
    /// places it entered the graph, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: std::collections::BTreeMap<ParamId, Tensor> = std::collections::BTreeMap::new();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                match out.get_mut(&id) {
                    Some(t) => t.add_assign(g),
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        out.into_iter().collect()
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf, used by gradient checks on raw inputs.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `a[.., n] + b[n]`, broadcasting `b` over every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(b).numel() != n {
            return Err(Error::shape(format!(
                "bias of {} for rows of {n}",
                self.value(b).numel()
            )));
        }
        let mut v = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(n) {
            for (x, bb) in row.iter_mut().zip(&bias) {
                *x += bb;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddBias(a, b), rg))
    }

    /// `a[.., k] · b[k, n]` with all leading axes of `a` flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.ndim() != 2 || va.last_dim() != vb.shape()[0] || va.ndim() == 0 {
            return Err(Error::shape(format!("matmul {:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.rows(), va.last_dim(), vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3 || vb.ndim() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::shape(format!("bmm {:?} x {:?}", va.shape(), vb.shape())));
        }
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, n) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if kb != k {
            return Err(Error::shape(format!("bmm inner {k} vs {kb}")));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::losses::sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.last_dim();
        let mut v = va.clone();
        for row in v.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxLast(a), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer norm affine size"));
        }
        let vx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vx.clone();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// 2-D convolution, `x[N, C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeom::new(vx.shape(), vw.shape(), stride, pad)?;
        let mut out = vec![0.0; geo.n * geo.o * geo.ho * geo.wo];
        let mut col = vec![0.0; geo.ckk() * geo.ho * geo.wo];
        let plane = geo.ho * geo.wo;
        for i in 0..geo.n {
            geo.im2col(&vx.data()[i * geo.in_size()..(i + 1) * geo.in_size()], &mut col);
            gemm(
                geo.o,
                geo.ckk(),
                plane,
                vw.data(),
                false,
                &col,
                false,
                &mut out[i * geo.o * plane..(i + 1) * geo.o * plane],
                0.0,
            );
        }
        let shape = vec![geo.n, geo.o, geo.ho, geo.wo];
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// `x[N, C, H, W] + b[C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.value(b).numel() != s[1] {
            return Err(Error::shape("channel bias"));
        }
        let plane = s[2] * s[3];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let bb = bias[i % s[1]];
            chunk.iter_mut().for_each(|z| *z += bb);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(v, Op::AddChannelBias(x, b), rg))
    }

    /// Depthwise LoG filtering; `None` returns `x` itself.
    pub fn curriculum(&mut self, x: Var, kernel: Option<&LoGKernel>) -> Result<Var> {
        let Some(kernel) = kernel else {
            return Ok(x);
        };
        let v = apply_curriculum(self.value(x), Some(kernel))?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Curriculum { x, kernel: kernel.clone() }, rg))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global average pool expects 4-d input"));
        }
        let plane = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], data)?, Op::GlobalAvgPool(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        let outer: usize = base[..axis].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(format!("concat {:?} with {:?}", base, s)));
            }
            total += s[axis];
        }
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows `src[index[i], ..]` stacked into `[index.len(), d]`.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let vs = self.value(src);
        let d = vs.last_dim();
        let n = vs.rows();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(Error::shape(format!("gather row {i} of {n}")));
            }
            out.extend_from_slice(vs.row(i));
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![index.len(), d], out)?,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Sums row `i` of `src` into output row `index[i]` of an `[n, d]` result.
    pub fn scatter_add_rows(&mut self, src: Var, index: &[usize], n: usize) -> Result<Var> {
        let vs = self.value(src);
        let d = vs.last_dim();
        if vs.rows() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter index"));
        }
        let mut out = vec![0.0; n * d];
        for (r, &i) in index.iter().enumerate() {
            for (o, x) in out[i * d..(i + 1) * d].iter_mut().zip(vs.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::ScatterAddRows {
                src,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// `x[n, d] * s[n]` row-wise.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.numel() != vx.rows() {
            return Err(Error::shape("scale_rows"));
        }
        let d = vx.last_dim();
        let mut v = vx.clone();
        for (row, &k) in v.data_mut().chunks_mut(d).zip(vs.data()) {
            row.iter_mut().for_each(|z| *z *= k);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::ScaleRows { x, s }, rg))
    }

    /// Softmax of a score vector within each segment (`segment[i]` names the group of entry `i`).
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != segment.len() {
            return Err(Error::shape("segment ids"));
        }
        let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (&v, &s) in vx.data().iter().zip(segment) {
            max[s] = max[s].max(v);
        }
        let mut out: Vec<f64> = vx.data().iter().zip(segment).map(|(&v, &s)| (v - max[s]).exp()).collect();
        let mut sum = vec![0.0; n_seg];
        for (&e, &s) in out.iter().zip(segment) {
            sum[s] += e;
        }
        for (e, &s) in out.iter_mut().zip(segment) {
            *e /= sum[s];
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                x,
                segment: segment.to_vec(),
            },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut v = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in v.data_mut().chunks_mut(d) {
            let n = row.iter().map(|z| z * z).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|z| *z /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// A scalar computed outside the graph whose local gradients are already known.
    pub fn fused_scalar(&mut self, value: f64, inputs: &[Var], grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::shape("fused inputs/grads"));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.value(v).numel() != g.numel() {
                return Err(Error::shape("fused gradient size"));
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if node.requires_grad {
                    params.push((id, Var(i)));
                }
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads { grads, params });
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if needs(*b) {
                    accum(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accum(grads, *a, mul_t(g, self.value(*b)));
                }
                if needs(*b) {
                    accum(grads, *b, mul_t(g, self.value(*a)));
                }
            }
            Op::Scale(a, s) => accum(grads, *a, g.map(|x| x * s)),
            Op::AddBias(a, b) => {
                if needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if needs(*b) {
                    let n = g.last_dim();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.last_dim(), vb.shape()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                    accum(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                    accum(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = g.shape()[2];
                if needs(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        // ga = g · bᵀ (b is k×n) or g · b (b is n×k)
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    accum(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &va.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // b is n×k: gb = gᵀ · a
                            gemm(n, m, k, gi, true, ai, false, out, 0.0);
                        } else {
                            // b is k×n: gb = aᵀ · g
                            gemm(k, m, n, ai, true, gi, false, out, 0.0);
                        }
                    }
                    accum(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Reshape(a) => accum(grads, *a, g.clone().reshape(self.shape(*a))?),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accum(grads, *a, g.permute(&inv)?);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let data = g.data().iter().zip(va.data()).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect();
                accum(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gi, &x)| if x > 0.0 { gi } else { slope * gi })
                    .collect();
                accum(grads, *a, Tensor::new(va.shape().to_vec(), data)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(&gi, &s)| gi * s * (1.0 - s)).collect();
                accum(grads, *a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *a, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if needs(*x) {
                    let mut gx = vec![0.0; g.numel()];
                    for (r, (gr, out)) in g.data().chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let s1: f64 = gxh.iter().sum();
                        let s2: f64 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            out[j] = k * (d as f64 * gxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    accum(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
                if needs(*gamma) || needs(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (r, gr) in g.data().chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                            gb[j] += gr[j];
                        }
                    }
                    if needs(*gamma) {
                        accum(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), gg)?);
                    }
                    if needs(*beta) {
                        accum(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), gb)?);
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let geo = ConvGeom::new(vx.shape(), vw.shape(), *stride, *pad)?;
                let plane = geo.ho * geo.wo;
                let mut col = vec![0.0; geo.ckk() * plane];
                let mut gw = vec![0.0; vw.numel()];
                let mut gx = if needs(*x) { vec![0.0; vx.numel()] } else { Vec::new() };
                let mut gcol = vec![0.0; geo.ckk() * plane];
                for i in 0..geo.n {
                    let gi = &g.data()[i * geo.o * plane..(i + 1) * geo.o * plane];
                    if needs(*w) {
                        geo.im2col(&vx.data()[i * geo.in_size()..(i + 1) * geo.in_size()], &mut col);
                        gemm(geo.o, plane, geo.ckk(), gi, false, &col, true, &mut gw, 1.0);
                    }
                    if needs(*x) {
                        gemm(geo.ckk(), geo.o, plane, vw.data(), true, gi, false, &mut gcol, 0.0);
                        geo.col2im(&gcol, &mut gx[i * geo.in_size()..(i + 1) * geo.in_size()]);
                    }
                }
                if needs(*w) {
                    accum(grads, *w, Tensor::new(vw.shape().to_vec(), gw)?);
                }
                if needs(*x) {
                    accum(grads, *x, Tensor::new(vx.shape().to_vec(), gx)?);
                }
            }
            Op::AddChannelBias(x, b) => {
                if needs(*x) {
                    accum(grads, *x, g.clone());
                }
                if needs(*b) {
                    let s = g.shape();
                    let plane = s[2] * s[3];
                    let mut gb = vec![0.0; s[1]];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        gb[i % s[1]] += chunk.iter().sum::<f64>();
                    }
                    accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
            }
            Op::Curriculum { x, kernel } => {
                accum(grads, *x, apply_curriculum_backward(g, Some(kernel))?);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let mut gx = Vec::with_capacity(s.iter().product());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi / plane as f64, plane));
                }
                accum(grads, *x, Tensor::new(s.to_vec(), gx)?);
            }
            Op::Concat { parts, axis } => {
                let out_shape = g.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[o * total + offset..o * total + offset + len]);
                        }
                        accum(grads, p, Tensor::new(self.shape(p).to_vec(), gp)?);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { src, index } => {
                let vs = self.value(*src);
                let d = vs.last_dim();
                let mut gs = vec![0.0; vs.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, x) in gs[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accum(grads, *src, Tensor::new(vs.shape().to_vec(), gs)?);
            }
            Op::ScatterAddRows { src, index } => {
                let vs = self.value(*src);
                let d = vs.last_dim();
                let mut gs = Vec::with_capacity(vs.numel());
                for &i in index {
                    gs.extend_from_slice(&g.data()[i * d..(i + 1) * d]);
                }
                accum(grads, *src, Tensor::new(vs.shape().to_vec(), gs)?);
            }
            Op::ScaleRows { x, s } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let d = vx.last_dim();
                if needs(*x) {
                    let mut gx = g.clone();
                    for (row, &k) in gx.data_mut().chunks_mut(d).zip(vs.data()) {
                        row.iter_mut().for_each(|z| *z *= k);
                    }
                    accum(grads, *x, gx);
                }
                if needs(*s) {
                    let gs = g
                        .data()
                        .chunks(d)
                        .zip(vx.data().chunks(d))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    accum(grads, *s, Tensor::new(vs.shape().to_vec(), gs)?);
                }
            }
            Op::SegmentSoftmax { x, segment } => {
                let y = node.value.data();
                let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&gi, &yi), &s) in g.data().iter().zip(y).zip(segment) {
                    dot[s] += gi * yi;
                }
                let gx = g
                    .data()
                    .iter()
                    .zip(y)
                    .zip(segment)
                    .map(|((&gi, &yi), &s)| yi * (gi - dot[s]))
                    .collect();
                accum(grads, *x, Tensor::new(node.value.shape().to_vec(), gx)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for (r, ((gr, yr), out)) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                accum(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Fused { inputs, grads: local } => {
                let s = g.item();
                for (&v, lg) in inputs.iter().zip(local) {
                    if needs(v) {
                        let t = lg.map(|x| x * s).reshape(self.shape(v))?;
                        accum(grads, v, t);
                    }
                }
            }
            Op::Sum(x) => accum(grads, *x, Tensor::full(self.shape(*x), g.item())),
        }
        Ok(())
    }
}

fn mul_t(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || stride == 0 {
            return Err(Error::shape(format!("conv2d input {x:?} with weight {w:?}")));
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k,
            stride,
            pad,
            ho: (x[2] + 2 * pad - k) / stride + 1,
            wo: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let plane = self.ho * self.wo;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * plane;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            col[row + oy * self.wo + ox] = if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                0.0
                            } else {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let plane = self.ho * self.wo;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * plane;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            x[(c * self.h + iy as usize) * self.w + ix as usize] += col[row + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::log_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(out ⊙ probe))/d(inputs) against central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let objective = |ins: &[Tensor], probe: Option<&Tensor>| -> (f64, Tensor, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            let p = probe.cloned().unwrap_or_else(|| Tensor::full(g.shape(out), 1.0));
            let pv = g.input(p.clone());
            let prod = g.mul(out, pv).unwrap();
            let s = g.sum(prod);
            let grads = g.backward(s).unwrap();
            let gs = vars.iter().map(|&v| grads.get(v).cloned()).collect();
            (g.value(s).item(), p, gs)
        };
        let (_, shape_probe, _) = objective(&inputs, None);
        let probe = rand_t(&mut rng, shape_probe.shape());
        let (_, _, analytic) = objective(&inputs, Some(&probe));
        let h = 1e-6;
        for (ii, inp) in inputs.iter().enumerate() {
            let an = analytic[ii].clone().unwrap_or_else(|| Tensor::zeros(inp.shape()));
            for j in 0..inp.numel() {
                let mut plus = inputs.clone();
                plus[ii].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ii].data_mut()[j] -= h;
                let fd = (objective(&plus, Some(&probe)).0 - objective(&minus, Some(&probe)).0) / (2.0 * h);
                let a = an.data()[j];
                let err = (fd - a).abs() / (fd.abs().max(a.abs()).max(1e-4));
                assert!(err < 1e-5, "input {ii} elem {j}: fd {fd} vs analytic {a}");
            }
        }
    }

    #[test]
    fn grad_elementwise_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[3, 4]);
        let c = rand_t(&mut rng, &[4]);
        check(vec![a, b, c], |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            let s = g.sub(m, v[1]).unwrap();
            let t = g.add(s, v[0]).unwrap();
            let u = g.scale(t, 0.7);
            g.add_bias(u, v[2]).unwrap()
        });
    }

    #[test]
    fn grad_matmul_bmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[4, 5])], |g, v| g.matmul(v[0], v[1]).unwrap());
        check(vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 4, 5])], |g, v| g.bmm(v[0], v[1], false).unwrap());
        check(vec![rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[2, 5, 4])], |g, v| g.bmm(v[0], v[1], true).unwrap());
    }

    #[test]
    fn grad_activations_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[3, 5]);
        check(vec![x.clone()], |g, v| g.relu(v[0]));
        check(vec![x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
        check(vec![x.clone()], |g, v| g.sigmoid(v[0]));
        check(vec![x.clone()], |g, v| g.softmax_last(v[0]));
        check(vec![x.clone()], |g, v| g.l2_normalize_rows(v[0]));
        check(vec![x], |g, v| {
            let p = g.permute(v[0], &[1, 0]).unwrap();
            g.reshape(p, &[15]).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![rand_t(&mut rng, &[3, 6]), rand_t(&mut rng, &[6]), rand_t(&mut rng, &[6])],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
    }

    #[test]
    fn grad_conv_pool_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(
            vec![rand_t(&mut rng, &[2, 2, 5, 5]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])],
            |g, v| {
                let c = g.conv2d(v[0], v[1], 2, 1).unwrap();
                let b = g.add_channel_bias(c, v[2]).unwrap();
                g.global_avg_pool(b).unwrap()
            },
        );
    }

    #[test]
    fn grad_curriculum_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = log_kernel(1.0, 2).unwrap();
        check(vec![rand_t(&mut rng, &[1, 2, 6, 7])], move |g, v| g.curriculum(v[0], Some(&k)).unwrap());
    }

    #[test]
    fn grad_gather_scatter_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check(vec![rand_t(&mut rng, &[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap());
        check(vec![rand_t(&mut rng, &[4, 3])], |g, v| g.scatter_add_rows(v[0], &[1, 1, 0, 2], 3).unwrap());
        check(vec![rand_t(&mut rng, &[5])], |g, v| g.segment_softmax(v[0], &[0, 1, 0, 1, 1]).unwrap());
        check(vec![rand_t(&mut rng, &[3, 2]), rand_t(&mut rng, &[3])], |g, v| g.scale_rows(v[0], v[1]).unwrap());
        check(vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 2])], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
        check(vec![rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[1, 3])], |g, v| g.concat(&[v[0], v[1]], 0).unwrap());
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[2], 1.0));
        let b = g.leaf(Tensor::full(&[2], 2.0));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.gather_rows(a, &[5]).is_err());
        assert!(g.backward(a).is_err());
    }
}
