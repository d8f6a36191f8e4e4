//! The mini-batch loop shared by every head-training phase.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::MetricsLog;
use super::{check_convergence, evaluate_frames, ConvergencePolicy, MetricMode, Phase, TrainConfig};
use crate::autograd::{Grads, Graph};
use crate::curriculum::{log_kernel, LoGKernel};
use crate::error::{Error, Result};
use crate::losses::{caption_ce_loss_grad, interaction_ml_loss_grad, kl_logits_grad, KlKind, LossConfig};
use crate::metrics::{MetricsReport, Split};
use crate::models::{save_checkpoint, CheckpointMeta, FramePrep, GraphInput, MtlModel};
use crate::params::{Accumulators, Adam, AdamConfig, LrSchedule, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// A frozen single-task model and the curriculum kernel it finished training with.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: MtlModel,
    pub kernel: Option<LoGKernel>,
}

#[derive(Clone, Debug)]
pub struct Teachers {
    pub caption: Teacher,
    pub graph: Teacher,
}

impl Teachers {
    /// Teachers must produce logits of the student's shapes.
    pub fn check_compatible(&self, student: &MtlModel) -> Result<()> {
        let s = &student.config;
        for t in [&self.caption.model, &self.graph.model] {
            let c = &t.config;
            if c.vocab_size != s.vocab_size || c.k_int != s.k_int || c.max_caption_len < s.max_caption_len {
                return Err(Error::ArchitectureMismatch {
                    expected: format!("vocab {} / k_int {} / len {}", s.vocab_size, s.k_int, s.max_caption_len),
                    found: format!("teacher {} (vocab {} / k_int {} / len {})", t.arch_hash(), c.vocab_size, c.k_int, c.max_caption_len),
                });
            }
        }
        Ok(())
    }
}

/// Per-frame objective of a phase.
#[derive(Clone, Copy)]
pub(crate) enum Objective<'a> {
    Caption,
    SceneGraph,
    Finetune,
    Vanilla,
    Kd(&'a Teachers),
}

impl Objective<'_> {
    fn needs_caption(&self) -> bool {
        !matches!(self, Objective::SceneGraph)
    }

    fn needs_graph(&self) -> bool {
        !matches!(self, Objective::Caption)
    }
}

/// Loss components of one frame or, summed with the `δ_i`, of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub caption: Option<f64>,
    pub graph: Option<f64>,
    pub kl_caption: Option<f64>,
    pub kl_graph: Option<f64>,
    /// Pretraining terms: supervised contrastive, incremental distillation and
    /// classification cross-entropy.
    pub contra: Option<f64>,
    pub incre: Option<f64>,
    pub class_ce: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    /// Accumulator norms per group, in `ParamGroup::ALL` order, before clipping.
    pub grad_norms: [f64; 4],
}

impl StepRecord {
    pub fn grad_norm(&self, group: ParamGroup) -> f64 {
        self.grad_norms[group_slot(group)]
    }

    pub(crate) fn add_scaled(&mut self, o: &StepRecord, w: f64) {
        fn acc(a: &mut Option<f64>, b: Option<f64>, w: f64) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + w * b);
            }
        }
        acc(&mut self.caption, o.caption, w);
        acc(&mut self.graph, o.graph, w);
        acc(&mut self.kl_caption, o.kl_caption, w);
        acc(&mut self.kl_graph, o.kl_graph, w);
        acc(&mut self.contra, o.contra, w);
        acc(&mut self.incre, o.incre, w);
        acc(&mut self.class_ce, o.class_ce, w);
        self.loss += w * o.loss;
    }
}

fn group_slot(group: ParamGroup) -> usize {
    ParamGroup::ALL.iter().position(|&g| g == group).expect("every group is listed")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sigma: Option<f64>,
    /// Frame-weighted means over the epoch.
    pub caption: Option<f64>,
    pub graph: Option<f64>,
    pub kl_caption: Option<f64>,
    pub kl_graph: Option<f64>,
    pub contra: Option<f64>,
    pub incre: Option<f64>,
    pub class_ce: Option<f64>,
    pub loss: f64,
    /// Pretraining only: classification accuracy over both views.
    pub train_acc: Option<f64>,
}

impl EpochStats {
    pub(crate) fn from_sum(epoch: usize, sigma: Option<f64>, s: &StepRecord, train_acc: Option<f64>) -> Self {
        Self {
            epoch,
            sigma,
            caption: s.caption,
            graph: s.graph,
            kl_caption: s.kl_caption,
            kl_graph: s.kl_graph,
            contra: s.contra,
            incre: s.incre,
            class_ce: s.class_ce,
            loss: s.loss,
            train_acc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    EpochCap,
    Converged { metric: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub trainable: Vec<ParamGroup>,
    pub epochs_run: usize,
    pub stop: StopReason,
    /// σ of the first and last epoch; `None` when filtering was off.
    pub sigma_start: Option<f64>,
    pub sigma_end: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochStats>,
    pub val: Vec<MetricsReport>,
    /// `Σ|Δw|` over the frozen groups since phase entry, after every epoch.
    pub frozen_delta: Vec<f64>,
    /// Accumulator norm carried in from the previous phase, before zeroing.
    pub acc_norm_before_entry: f64,
    pub acc_zeroed_at_entry: bool,
}

/// A best-so-far model under one selection metric.
#[derive(Clone, Debug)]
pub struct Selected {
    pub model: MtlModel,
    pub meta: CheckpointMeta,
    pub value: f64,
    pub report: MetricsReport,
}

/// Best-graph (validation Acc) and best-caption (validation BLEU-4) models.
#[derive(Clone, Debug, Default)]
pub struct Selection {
    pub bg: Option<Selected>,
    pub bc: Option<Selected>,
}

/// Shared state of one run: configuration, metrics log, checkpoint location and
/// the accumulators that persist across phase boundaries.
#[derive(Debug)]
pub struct TrainContext {
    pub cfg: TrainConfig,
    /// Prefix of checkpoint names, normally the regime slug.
    pub label: String,
    pub checkpoint_dir: Option<PathBuf>,
    pub log: MetricsLog,
    /// Phases entered so far, in order.
    pub phase_log: Vec<Phase>,
    epoch_offset: usize,
    acc: Option<Accumulators>,
    sigma: Option<f64>,
}

impl TrainContext {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let label = cfg.regime.regime.slug();
        Ok(Self { cfg, label, checkpoint_dir: None, log: MetricsLog::in_memory(), phase_log: Vec::new(), epoch_offset: 0, acc: None, sigma: None })
    }

    pub fn with_checkpoints(mut self, dir: PathBuf) -> Self {
        self.checkpoint_dir = Some(dir);
        self
    }

    pub fn with_log(mut self, log: MetricsLog) -> Self {
        self.log = log;
        self
    }

    /// Continues from weights that finished training at `sigma` (`None`: filtering off),
    /// so inheriting phases pick it up.
    pub fn with_sigma(mut self, sigma: Option<f64>) -> Self {
        self.sigma = sigma;
        self
    }

    /// Total epochs run over all phases so far.
    pub fn epochs_done(&self) -> usize {
        self.epoch_offset
    }

    /// Curriculum σ of the last epoch trained; `None` when filtering was off.
    pub fn current_sigma(&self) -> Option<f64> {
        self.sigma
    }

    /// Takes the persistent accumulators, zeroing them for a new phase.
    pub(crate) fn enter_phase(&mut self, phase: Phase, store: &ParamStore) -> (Accumulators, f64, bool) {
        let mut acc = match self.acc.take() {
            Some(a) if a.fits(store) => a,
            _ => Accumulators::for_store(store),
        };
        let before = acc.global_norm();
        acc.zero();
        let zeroed = acc.global_norm() == 0.0;
        self.phase_log.push(phase);
        (acc, before, zeroed)
    }

    pub(crate) fn exit_phase(&mut self, acc: Accumulators, rec: &PhaseRecord) {
        self.acc = Some(acc);
        self.epoch_offset += rec.epochs_run;
        if rec.epochs_run > 0 {
            self.sigma = rec.sigma_end;
        }
    }
}

pub(crate) fn trainable_groups(phase: Phase) -> &'static [ParamGroup] {
    use ParamGroup::*;
    match phase {
        Phase::PretrainCicl => &[Shared, Classifier],
        Phase::Caption => &[Caption],
        Phase::SceneGraph => &[SceneGraph],
        Phase::StlCaption => &[Shared, Caption],
        Phase::StlSceneGraph => &[Shared, SceneGraph],
        Phase::Finetune | Phase::Joint | Phase::Kd | Phase::Adapt => &[Shared, Caption, SceneGraph],
    }
}

pub(crate) fn set_trainable(store: &mut ParamStore, groups: &[ParamGroup]) {
    store.set_all_frozen(true);
    for &g in groups {
        store.unfreeze(g);
    }
}

pub(crate) fn frozen_delta(store: &ParamStore, snapshot: &ParamStore) -> f64 {
    ParamGroup::ALL.iter().filter(|&&g| store.is_frozen(g)).map(|&g| store.group_abs_delta(snapshot, g)).sum()
}

/// Order of the training frames for one epoch; a pure function of its arguments.
pub(crate) fn epoch_order(n: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, phase.code(), epoch as u64));
    order.shuffle(&mut rng);
    order
}

pub(crate) fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.rotate_left(21) ^ c.rotate_left(42) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loss components and parameter gradients of one frame.
pub(crate) fn frame_loss(
    model: &MtlModel,
    fr: &FramePrep,
    kernel: Option<&LoGKernel>,
    obj: Objective<'_>,
    loss: &LossConfig,
) -> Result<(StepRecord, Grads)> {
    let l = fr.caption.len();
    if l < 2 {
        return Err(Error::invalid(format!("frame {} has a caption of {l} tokens", fr.id)));
    }
    let (inputs, targets) = (&fr.caption[..l - 1], &fr.caption[1..]);
    let mut g = Graph::new();
    let crops = g.input(fr.crops.clone());
    let f = model.extract(&mut g, crops, kernel)?;
    let mut rec = StepRecord::default();
    let mut vars = Vec::new();
    let mut grads: Vec<Tensor> = Vec::new();

    let mut cap = None;
    if obj.needs_caption() {
        let y = model.caption_logits(&mut g, f, inputs, kernel)?;
        let (v, gr) = caption_ce_loss_grad(g.value(y), targets, &vec![true; targets.len()])?;
        rec.caption = Some(v);
        cap = Some((y, gr));
    }
    let mut gra = None;
    if obj.needs_graph() {
        let input = GraphInput { visual: f, semantic: fr.semantic.clone(), spatial: fr.spatial.clone(), edges: fr.edges.clone() };
        let z = model.graph_logits(&mut g, &input, kernel)?;
        let (v, gr) = interaction_ml_loss_grad(g.value(z), &fr.labels)?;
        rec.graph = Some(v);
        gra = Some((z, gr));
    }

    let w = &loss.weights;
    match obj {
        Objective::Caption => {
            let (y, gr) = cap.expect("caption computed");
            rec.loss = rec.caption.expect("caption computed");
            vars.push(y);
            grads.push(gr);
        }
        Objective::SceneGraph => {
            let (z, gr) = gra.expect("graph computed");
            rec.loss = rec.graph.expect("graph computed");
            vars.push(z);
            grads.push(gr);
        }
        Objective::Finetune | Objective::Vanilla => {
            let (lc, lg) = (rec.caption.expect("caption computed"), rec.graph.expect("graph computed"));
            rec.loss = if matches!(obj, Objective::Finetune) { w.finetune(lc, lg) } else { w.vanilla(lc, lg) };
            for (v, gr) in [cap.expect("caption computed"), gra.expect("graph computed")] {
                vars.push(v);
                grads.push(gr.map(|x| w.finetune_w * x));
            }
        }
        Objective::Kd(teachers) => {
            let t = loss.kd_temperature;
            let tc = &teachers.caption;
            let tf = tc.model.extract_features(&fr.crops, tc.kernel.as_ref())?;
            let t_cap = tc.model.caption_forward(&tf, inputs, tc.kernel.as_ref())?;
            let tg = &teachers.graph;
            let tf = tg.model.extract_features(&fr.crops, tg.kernel.as_ref())?;
            let t_gr = tg.model.scenegraph_forward(&tf, &fr.semantic, &fr.spatial, &fr.edges, tg.kernel.as_ref())?;
            let (y, gc) = cap.expect("caption computed");
            let (z, gg) = gra.expect("graph computed");
            let (klc, gklc) = kl_logits_grad(g.value(y), &t_cap, t, KlKind::Softmax)?;
            let (klg, gklg) = kl_logits_grad(g.value(z), &t_gr, t, KlKind::Bernoulli)?;
            rec.kl_caption = Some(klc);
            rec.kl_graph = Some(klg);
            rec.loss = w.kd(rec.caption.expect("caption computed"), rec.graph.expect("graph computed"), klc, klg);
            for (v, task, kl) in [(y, gc, gklc), (z, gg, gklg)] {
                let mut total = task.map(|x| w.kd_task_w * x);
                total.add_scaled(&kl, w.kd_distill_w);
                vars.push(v);
                grads.push(total);
            }
        }
    }
    let root = g.fused_scalar(rec.loss, &vars, grads)?;
    let grads = g.backward(root)?;
    Ok((rec, grads))
}

/// One optimizer step over `batch`; returns the `δ`-weighted step record.
pub(crate) fn train_step(
    model: &mut MtlModel,
    batch: &[&FramePrep],
    kernel: Option<&LoGKernel>,
    obj: Objective<'_>,
    cfg: &TrainConfig,
    acc: &mut Accumulators,
    opt: &mut Adam,
    lr: f64,
) -> Result<StepRecord> {
    acc.zero();
    let deltas = cfg.regime.delta_weights.weights(batch.len());
    let mut step = StepRecord { lr, ..Default::default() };
    for (fr, &d) in batch.iter().zip(&deltas) {
        let (rec, grads) = frame_loss(model, fr, kernel, obj, &cfg.loss)?;
        grads.accumulate(acc, d);
        step.add_scaled(&rec, d);
    }
    apply_step(model, acc, opt, cfg, &mut step)?;
    Ok(step)
}

/// Records group norms, clips, checks finiteness and steps the optimizer.
pub(crate) fn apply_step(model: &mut MtlModel, acc: &mut Accumulators, opt: &mut Adam, cfg: &TrainConfig, step: &mut StepRecord) -> Result<()> {
    for (i, &g) in ParamGroup::ALL.iter().enumerate() {
        step.grad_norms[i] = acc.group_norm(g);
    }
    if !step.loss.is_finite() || !acc.all_finite() {
        return Err(Error::invalid("non-finite loss or gradient"));
    }
    if let Some(max) = cfg.regime.grad_clip {
        let n = acc.global_norm();
        if n > max {
            acc.scale(max / n);
        }
    }
    opt.step(&mut model.store, acc, step.lr)
}

/// Where a phase takes its curriculum kernel from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum CurriculumSource {
    /// The schedule, with the epoch counter restarted at 0.
    Schedule,
    /// A fixed σ carried over from the previous phase (`None`: filtering off).
    Inherit(Option<f64>),
}

pub(crate) fn kernel_for(cfg: &TrainConfig, src: CurriculumSource, epoch: usize) -> Result<Option<LoGKernel>> {
    match src {
        CurriculumSource::Schedule => cfg.curriculum.kernel_at(epoch),
        CurriculumSource::Inherit(s) => s.map(|s| log_kernel(s, cfg.curriculum.radius)).transpose(),
    }
}

pub(crate) struct PhaseSpec<'a> {
    pub phase: Phase,
    pub objective: Objective<'a>,
    pub curriculum: CurriculumSource,
    pub val_split: Split,
    /// Update BG/BC after every evaluation.
    pub select: bool,
}

fn tracked(obj: &Objective<'_>) -> &'static [(&'static str, MetricMode)] {
    match obj {
        Objective::Caption => &[("bleu4", MetricMode::Max)],
        Objective::SceneGraph => &[("acc", MetricMode::Max)],
        _ => &[("bleu4", MetricMode::Max), ("acc", MetricMode::Max)],
    }
}

fn metric_of(r: &MetricsReport, name: &str) -> f64 {
    r.named().iter().find(|(n, _)| *n == name).map(|p| p.1).expect("tracked metric exists")
}

pub(crate) fn nonfinite(e: Error, phase: Phase, epoch: usize) -> Error {
    match e {
        Error::InvalidArgument(m) if m.starts_with("non-finite") => Error::NonFinite { phase: phase.as_str().into(), epoch },
        e => e,
    }
}

pub(crate) fn run_phase(
    model: &mut MtlModel,
    train: &[FramePrep],
    val: &[FramePrep],
    spec: PhaseSpec<'_>,
    ctx: &mut TrainContext,
    selection: &mut Selection,
) -> Result<PhaseRecord> {
    let phase = spec.phase;
    let pc = ctx.cfg.regime.phase(phase).clone();
    if train.is_empty() && pc.epochs > 0 {
        return Err(Error::invalid(format!("{phase}: no training frames")));
    }
    let groups = trainable_groups(phase);
    set_trainable(&mut model.store, groups);
    let snapshot = model.store.clone();
    let (mut acc, before, zeroed) = ctx.enter_phase(phase, &model.store);
    let mut opt = Adam::new(&model.store, AdamConfig::default());
    let schedule = match phase {
        Phase::Caption | Phase::StlCaption => {
            LrSchedule::InverseSqrtWarmup { d_model: model.config.d_model, warmup: ctx.cfg.regime.warmup_steps, scale: pc.lr }
        }
        _ => LrSchedule::Constant(pc.lr),
    };
    let policies: Vec<ConvergencePolicy> = tracked(&spec.objective)
        .iter()
        .map(|&(m, mode)| ConvergencePolicy::new(m, mode, ctx.cfg.regime.patience, ctx.cfg.regime.min_delta))
        .collect::<Result<_>>()?;
    let mut histories = vec![Vec::new(); policies.len()];

    let mut rec = PhaseRecord {
        phase,
        trainable: groups.to_vec(),
        epochs_run: 0,
        stop: StopReason::EpochCap,
        sigma_start: None,
        sigma_end: match spec.curriculum {
            CurriculumSource::Inherit(s) => s,
            CurriculumSource::Schedule => None,
        },
        steps: Vec::new(),
        epochs: Vec::new(),
        val: Vec::new(),
        frozen_delta: Vec::new(),
        acc_norm_before_entry: before,
        acc_zeroed_at_entry: zeroed,
    };
    let mut step_no = 0usize;
    for epoch in 0..pc.epochs {
        let kernel = kernel_for(&ctx.cfg, spec.curriculum, epoch)?;
        let sigma = kernel.as_ref().map(LoGKernel::sigma);
        if epoch == 0 {
            rec.sigma_start = sigma;
        }
        rec.sigma_end = sigma;
        let order = epoch_order(train.len(), ctx.cfg.regime.seed, phase, epoch);
        let mut sum = StepRecord::default();
        for chunk in order.chunks(pc.batch_size) {
            let batch: Vec<&FramePrep> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = schedule.at(step_no);
            let step = train_step(model, &batch, kernel.as_ref(), spec.objective, &ctx.cfg, &mut acc, &mut opt, lr)
                .map_err(|e| nonfinite(e, phase, epoch))?;
            sum.add_scaled(&step, chunk.len() as f64 / train.len() as f64);
            rec.steps.push(step);
            step_no += 1;
        }
        let stats = EpochStats::from_sum(epoch, sigma, &sum, None);
        log_epoch(&mut ctx.log, phase, epoch, &stats)?;
        rec.epochs.push(stats);
        rec.epochs_run = epoch + 1;

        let delta = frozen_delta(&model.store, &snapshot);
        rec.frozen_delta.push(delta);
        if delta != 0.0 {
            return Err(Error::Invariant(format!("{phase}: frozen parameters moved by {delta:e} in epoch {epoch}")));
        }

        if !val.is_empty() {
            let report = evaluate_frames(model, val, kernel.as_ref(), spec.val_split, &ctx.cfg.eval)?;
            for (name, v) in report.named() {
                ctx.log.record(phase.as_str(), epoch, report.split.as_str(), name, v, sigma)?;
            }
            if spec.select {
                update_selection(model, &report, phase, ctx, sigma, epoch, selection)?;
            }
            let mut stop = None;
            for (p, h) in policies.iter().zip(&mut histories) {
                h.push(metric_of(&report, &p.metric));
                if stop.is_none() && check_convergence(h, p) {
                    stop = Some(p.metric.clone());
                }
            }
            rec.val.push(report);
            if let Some(metric) = stop {
                rec.stop = StopReason::Converged { metric };
                break;
            }
        }
    }
    model.store.set_all_frozen(false);
    ctx.exit_phase(acc, &rec);
    ctx.log.flush()?;
    Ok(rec)
}

pub(crate) fn log_epoch(log: &mut MetricsLog, phase: Phase, epoch: usize, s: &EpochStats) -> Result<()> {
    let items = [
        ("loss", Some(s.loss)),
        ("caption_loss", s.caption),
        ("graph_loss", s.graph),
        ("kl_caption", s.kl_caption),
        ("kl_graph", s.kl_graph),
        ("contra_loss", s.contra),
        ("incre_loss", s.incre),
        ("class_ce", s.class_ce),
        ("train_acc", s.train_acc),
    ];
    for (name, v) in items {
        if let Some(v) = v {
            log.record(phase.as_str(), epoch, "train", name, v, s.sigma)?;
        }
    }
    Ok(())
}

fn update_selection(
    model: &MtlModel,
    report: &MetricsReport,
    phase: Phase,
    ctx: &TrainContext,
    sigma: Option<f64>,
    epoch: usize,
    selection: &mut Selection,
) -> Result<()> {
    let global = ctx.epoch_offset + epoch;
    for (kind, value, slot) in [("bg", report.acc, &mut selection.bg), ("bc", report.bleu4, &mut selection.bc)] {
        if slot.as_ref().is_some_and(|s| value <= s.value) {
            continue;
        }
        let meta = CheckpointMeta {
            label: format!("{}-{kind}-{global}", ctx.label),
            regime: ctx.label.clone(),
            phase: phase.as_str().to_string(),
            epoch: global,
            sigma,
            radius: ctx.cfg.curriculum.radius,
        };
        if let Some(dir) = &ctx.checkpoint_dir {
            save_checkpoint(model, &meta, &dir.join(&meta.label))?;
        }
        *slot = Some(Selected { model: model.clone(), meta, value, report: report.clone() });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Step loss before every update, plus one after the last.
    pub losses: Vec<f64>,
    /// Share of updates after which the loss on the same batch went down.
    pub decreasing_fraction: f64,
}

/// Repeatedly steps on one fixed batch with the objective and trainable groups of
/// `phase`. Distillation phases are not supported since they need teachers.
pub fn overfit_probe(
    model: &mut MtlModel,
    batch: &[FramePrep],
    phase: Phase,
    cfg: &TrainConfig,
    lr: f64,
    steps: usize,
    kernel: Option<&LoGKernel>,
) -> Result<ProbeReport> {
    let obj = match phase {
        Phase::Caption | Phase::StlCaption => Objective::Caption,
        Phase::SceneGraph | Phase::StlSceneGraph => Objective::SceneGraph,
        Phase::Finetune | Phase::Adapt => Objective::Finetune,
        Phase::Joint => Objective::Vanilla,
        Phase::Kd | Phase::PretrainCicl => return Err(Error::invalid(format!("overfit probe does not support {phase}"))),
    };
    if batch.is_empty() || steps == 0 {
        return Err(Error::invalid("overfit probe needs a batch and at least one step"));
    }
    set_trainable(&mut model.store, trainable_groups(phase));
    let mut acc = Accumulators::for_store(&model.store);
    let mut opt = Adam::new(&model.store, AdamConfig::default());
    let refs: Vec<&FramePrep> = batch.iter().collect();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        losses.push(train_step(model, &refs, kernel, obj, cfg, &mut acc, &mut opt, lr)?.loss);
    }
    let deltas = cfg.regime.delta_weights.weights(refs.len());
    let mut last = 0.0;
    for (fr, d) in refs.iter().zip(deltas) {
        last += d * frame_loss(model, fr, kernel, obj, &cfg.loss)?.0.loss;
    }
    losses.push(last);
    model.store.set_all_frozen(false);
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(ProbeReport { decreasing_fraction: down as f64 / steps as f64, losses })
}
