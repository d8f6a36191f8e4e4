//! Named parameters, trainability flags, gradient accumulators and Adam.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The parameter groups of the multi-task model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared convolutional feature extractor.
    Shared,
    /// Caption transformer.
    Caption,
    /// Scene-graph interaction head.
    SceneGraph,
    /// Instrument classifier used for contrastive pretraining.
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Shared,
        ParamGroup::Caption,
        ParamGroup::SceneGraph,
        ParamGroup::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Shared => "shared",
            ParamGroup::Caption => "caption",
            ParamGroup::SceneGraph => "scene_graph",
            ParamGroup::Classifier => "classifier",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialisation.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("sized from shape");
        self.add(name, group, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], v: f64) -> ParamId {
        self.add(name, group, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.set_frozen(group, true);
    }

    pub fn unfreeze(&mut self, group: ParamGroup) {
        self.set_frozen(group, false);
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.params.iter().filter(|p| p.group == group).all(|p| p.frozen)
    }

    /// Concatenated values of one group, in registration order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Sum of absolute element-wise differences of one group against `other`.
    pub fn group_abs_delta(&self, other: &ParamStore, group: ParamGroup) -> f64 {
        self.group_values(group)
            .iter()
            .zip(other.group_values(group))
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn group_bitwise_eq(&self, other: &ParamStore, group: ParamGroup) -> bool {
        let a = self.group_values(group);
        let b = other.group_values(group);
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Per-parameter gradient accumulators (`dW_sh`, `dW_c`, `dW_sg`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulators {
    grads: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl Accumulators {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            groups: store.params.iter().map(|p| p.group).collect(),
        }
    }

    /// Whether these buffers have the layout of `store`.
    pub fn fits(&self, store: &ParamStore) -> bool {
        self.grads.len() == store.params.len()
            && self.grads.iter().zip(&store.params).all(|(g, p)| g.shape() == p.value.shape())
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor, weight: f64) {
        self.grads[id.0].add_scaled(grad, weight);
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.grads
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == group)
            .map(|(t, _)| t.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-parameter step counts; frozen parameters are skipped entirely,
/// including their moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            slots: store
                .params
                .iter()
                .map(|p| AdamSlot {
                    m: vec![0.0; p.value.numel()],
                    v: vec![0.0; p.value.numel()],
                    t: 0,
                })
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Accumulators, lr: f64) -> Result<()> {
        if self.slots.len() != store.len() || grads.grads.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameter store"));
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for ((param, slot), g) in store.params.iter_mut().zip(&mut self.slots).zip(&grads.grads) {
            if param.frozen {
                continue;
            }
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            for (((w, m), v), &gi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(&mut slot.m)
                .zip(&mut slot.v)
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Step count and first-moment vector of one parameter.
    pub fn state_of(&self, id: ParamId) -> (u64, &[f64]) {
        let s = &self.slots[id.0];
        (s.t, &s.m)
    }
}

/// Learning-rate schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// `scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)` with 1-based steps.
    InverseSqrtWarmup { d_model: usize, warmup: usize, scale: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrtWarmup { d_model, warmup, scale } => {
                let s = (step + 1) as f64;
                let w = warmup.max(1) as f64;
                scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_normal("a", ParamGroup::Shared, &[2, 3], 1.0, &mut rng);
        s.add_normal("b", ParamGroup::Caption, &[4], 1.0, &mut rng);
        s
    }

    #[test]
    fn frozen_params_and_state_untouched() {
        let mut s = store();
        s.freeze(ParamGroup::Shared);
        let before = s.clone();
        let mut acc = Accumulators::for_store(&s);
        for (id, p) in s.iter() {
            acc.add(id, &Tensor::full(p.value.shape(), 1.0), 1.0);
        }
        let mut opt = Adam::new(&s, AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut s, &acc, 0.1).unwrap();
        }
        assert!(s.group_bitwise_eq(&before, ParamGroup::Shared));
        assert!(!s.group_bitwise_eq(&before, ParamGroup::Caption));
        let (t, m) = opt.state_of(ParamId(0));
        assert_eq!(t, 0);
        assert!(m.iter().all(|&x| x == 0.0));
        assert_eq!(opt.state_of(ParamId(1)).0, 5);
    }

    #[test]
    fn unfreeze_restores_flag() {
        let mut s = store();
        s.freeze(ParamGroup::Caption);
        assert!(s.is_frozen(ParamGroup::Caption));
        s.unfreeze(ParamGroup::Caption);
        assert!(!s.is_frozen(ParamGroup::Caption));
        assert!(!s.get(ParamId(1)).frozen);
    }

    #[test]
    fn warmup_schedule_peaks_at_warmup() {
        let s = LrSchedule::InverseSqrtWarmup { d_model: 64, warmup: 100, scale: 1.0 };
        assert!(s.at(10) < s.at(98));
        assert!(s.at(99) > s.at(500));
        assert!((s.at(99) - 0.125 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn accumulators_zero_and_norm() {
        let s = store();
        let mut acc = Accumulators::for_store(&s);
        acc.add(ParamId(1), &Tensor::full(&[4], 0.5), 2.0);
        assert!((acc.group_norm(ParamGroup::Caption) - 2.0).abs() < 1e-12);
        assert_eq!(acc.group_norm(ParamGroup::Shared), 0.0);
        acc.zero();
        assert_eq!(acc.global_norm(), 0.0);
    }
}
