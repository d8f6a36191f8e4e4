//! Class-incremental contrastive pretraining of the shared extractor and the
//! instrument classifier.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{apply_step, epoch_order, frozen_delta, kernel_for, log_epoch, mix, nonfinite, set_trainable, trainable_groups, CurriculumSource};
use super::{EpochStats, Phase, PhaseRecord, StepRecord, StopReason, TrainContext};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::losses::{caption_ce_loss_grad, cicl_total_loss, incremental_kd_loss_grad, supcon_loss_grad, ContrastiveBatch};
use crate::models::{argmax, MtlModel};
use crate::params::{Adam, AdamConfig, LrSchedule};
use crate::synthdata::{augment_view, DatasetConfig, SceneDataset};
use crate::tensor::Tensor;

/// Classifier row of every class id: base classes first, then novel ones, each in
/// increasing id order. A head of `n_base` rows covers the source domain; expanding
/// it by `n_novel` rows appends the novel classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassIndex {
    order: Vec<usize>,
    n_base: usize,
}

impl ClassIndex {
    pub fn new(config: &DatasetConfig, novel: &BTreeSet<usize>) -> Self {
        let mut order: Vec<usize> = (0..config.k_cls()).filter(|c| !novel.contains(c)).collect();
        let n_base = order.len();
        order.extend(novel.iter().copied().filter(|&c| c < config.k_cls()));
        Self { order, n_base }
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_novel(&self) -> usize {
        self.order.len() - self.n_base
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn row_of(&self, class_id: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == class_id)
    }
}

/// Batches of `b` items, never leaving a single item on its own so every anchor
/// has a partner besides its second view.
fn batches(order: &[usize], b: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(b.max(2)).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let n = order.len();
        let last_two = out.len() - 2;
        let start = last_two * b.max(2);
        out.truncate(last_two);
        out.push(&order[start..n]);
    }
    out
}

/// Trains the shared extractor and classifier on node crops of the training frames.
/// Each crop contributes two augmented views; the step loss is the classification
/// cross-entropy plus the contrastive/incremental total. With `old` set, the frozen
/// previous model distils its old-class logits into the first rows of the head.
pub fn pretrain_cicl(
    model: &mut MtlModel,
    data: &SceneDataset,
    classes: &ClassIndex,
    old: Option<&MtlModel>,
    ctx: &mut TrainContext,
) -> Result<PhaseRecord> {
    let phase = Phase::PretrainCicl;
    let pc = ctx.cfg.regime.pretrain.clone();
    let k = model.k_cls();
    if let Some(o) = old {
        if o.k_cls() > k {
            return Err(Error::invalid(format!("old head has {} classes, new head {k}", o.k_cls())));
        }
    }
    let mut items = Vec::new();
    for &fi in &data.train {
        let f = &data.frames[fi];
        for (ni, n) in f.nodes.iter().enumerate() {
            let row = classes
                .row_of(n.class_id)
                .filter(|&r| r < k)
                .ok_or_else(|| Error::invalid(format!("class {} has no row in a {k}-class head", n.class_id)))?;
            items.push((fi, ni, row));
        }
    }
    if items.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two crops"));
    }

    let groups = trainable_groups(phase);
    set_trainable(&mut model.store, groups);
    let snapshot = model.store.clone();
    let (mut acc, before, zeroed) = ctx.enter_phase(phase, &model.store);
    let mut opt = Adam::new(&model.store, AdamConfig::default());
    let lr = LrSchedule::Constant(pc.lr);
    let s = model.config.crop_size;
    let mut rec = PhaseRecord {
        phase,
        trainable: groups.to_vec(),
        epochs_run: 0,
        stop: StopReason::EpochCap,
        sigma_start: None,
        sigma_end: None,
        steps: Vec::new(),
        epochs: Vec::new(),
        val: Vec::new(),
        frozen_delta: Vec::new(),
        acc_norm_before_entry: before,
        acc_zeroed_at_entry: zeroed,
    };
    let mut step_no = 0;
    for epoch in 0..pc.epochs {
        let kernel = kernel_for(&ctx.cfg, CurriculumSource::Schedule, epoch)?;
        let sigma = kernel.as_ref().map(|k| k.sigma());
        if epoch == 0 {
            rec.sigma_start = sigma;
        }
        rec.sigma_end = sigma;
        let order = epoch_order(items.len(), ctx.cfg.regime.seed, phase, epoch);
        let mut sum = StepRecord::default();
        let mut correct = 0usize;
        for (bi, chunk) in batches(&order, pc.batch_size).into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(ctx.cfg.regime.seed, epoch as u64, bi as u64 + 1));
            let n = chunk.len();
            let mut views = Vec::with_capacity(2 * n * 3 * s * s);
            for _ in 0..2 {
                for &it in chunk {
                    let (fi, ni, _) = items[it];
                    let f = &data.frames[fi];
                    views.extend_from_slice(augment_view(&f.image, &f.nodes[ni].bbox, s, &mut rng)?.data());
                }
            }
            let views = Tensor::new(vec![2 * n, 3, s, s], views)?;
            let labels: Vec<usize> = (0..2).flat_map(|_| chunk.iter().map(|&it| items[it].2)).collect();

            let mut g = Graph::new();
            let x = g.input(views.clone());
            let f = model.extract(&mut g, x, kernel.as_ref())?;
            let z = g.l2_normalize_rows(f);
            let logits = model.classify(&mut g, f)?;
            let batch = ContrastiveBatch::new(g.value(z).clone(), labels.clone(), ctx.cfg.loss.supcon_tau)?;
            let (contra, gz) = supcon_loss_grad(&batch);
            let (ce, mut gl) = caption_ce_loss_grad(g.value(logits), &labels, &vec![true; labels.len()])?;
            let incre = match old {
                Some(o) => {
                    let old_logits = o.classify_features(&o.extract_features(&views, kernel.as_ref())?)?;
                    let (v, gi) = incremental_kd_loss_grad(&old_logits, g.value(logits), ctx.cfg.loss.incre_temperature)?;
                    gl.add_assign(&gi);
                    v
                }
                None => 0.0,
            };
            let total = ce + cicl_total_loss(contra, incre);
            for (r, &l) in labels.iter().enumerate() {
                correct += (argmax(g.value(logits).row(r)) == l) as usize;
            }
            let root = g.fused_scalar(total, &[z, logits], vec![gz, gl])?;
            let grads = g.backward(root)?;
            acc.zero();
            grads.accumulate(&mut acc, 1.0);
            let mut step = StepRecord {
                contra: Some(contra),
                incre: Some(incre),
                class_ce: Some(ce),
                loss: total,
                lr: lr.at(step_no),
                ..Default::default()
            };
            apply_step(model, &mut acc, &mut opt, &ctx.cfg, &mut step).map_err(|e| nonfinite(e, phase, epoch))?;
            sum.add_scaled(&step, n as f64 / items.len() as f64);
            rec.steps.push(step);
            step_no += 1;
        }
        let stats = EpochStats::from_sum(epoch, sigma, &sum, Some(correct as f64 / (2 * items.len()) as f64));
        log_epoch(&mut ctx.log, phase, epoch, &stats)?;
        rec.epochs.push(stats);
        rec.epochs_run = epoch + 1;
        let delta = frozen_delta(&model.store, &snapshot);
        rec.frozen_delta.push(delta);
        if delta != 0.0 {
            return Err(Error::Invariant(format!("{phase}: frozen parameters moved by {delta:e} in epoch {epoch}")));
        }
    }
    model.store.set_all_frozen(false);
    ctx.exit_phase(acc, &rec);
    ctx.log.flush()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_leave_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 5]);
        let order: Vec<usize> = (0..8).collect();
        assert_eq!(batches(&order, 4).len(), 2);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn class_index_puts_novel_rows_last() {
        let cfg = DatasetConfig::default();
        let novel: BTreeSet<usize> = [3, 8].into_iter().collect();
        let ci = ClassIndex::new(&cfg, &novel);
        assert_eq!(ci.n_base(), cfg.k_cls() - 2);
        assert_eq!(ci.row_of(3), Some(cfg.k_cls() - 2));
        assert_eq!(ci.row_of(8), Some(cfg.k_cls() - 1));
        assert_eq!(ci.row_of(4), Some(3));
    }
}
