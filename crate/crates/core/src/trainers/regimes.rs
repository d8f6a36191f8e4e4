//! Regime drivers built from the phase engine.

use super::engine::{run_phase, CurriculumSource, Objective, PhaseSpec};
use super::{Phase, PhaseRecord, Regime, Selection};
use crate::error::{Error, Result};
use crate::metrics::Split;
use crate::models::{prepare_frame, FramePrep, MtlModel};
use crate::synthdata::{Domain, SceneDataset};

pub use super::engine::{Teacher, Teachers, TrainContext};

/// Phase records in execution order and the best-graph / best-caption models seen
/// across them.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub history: Vec<PhaseRecord>,
    pub selection: Selection,
}

impl TrainOutput {
    pub fn phases(&self) -> Vec<Phase> {
        self.history.iter().map(|r| r.phase).collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.history.iter().map(|r| r.epochs_run).sum()
    }
}

struct Prepared {
    train: Vec<FramePrep>,
    val: Vec<FramePrep>,
    split: Split,
}

fn prepare(model: &MtlModel, data: &SceneDataset) -> Result<Prepared> {
    let prep = |ids: &[usize]| ids.iter().map(|&i| prepare_frame(&data.frames[i], &model.config)).collect::<Result<Vec<_>>>();
    Ok(Prepared {
        train: prep(&data.train)?,
        val: prep(&data.val)?,
        split: if data.domain == Domain::Target { Split::Td } else { Split::Sd },
    })
}

fn phase(
    model: &mut MtlModel,
    data: &Prepared,
    phase: Phase,
    objective: Objective<'_>,
    curriculum: CurriculumSource,
    ctx: &mut TrainContext,
    out: &mut TrainOutput,
) -> Result<()> {
    let spec = PhaseSpec { phase, objective, curriculum, val_split: data.split, select: true };
    let rec = run_phase(model, &data.train, &data.val, spec, ctx, &mut out.selection)?;
    out.history.push(rec);
    Ok(())
}

fn task_aware(model: &mut MtlModel, data: &Prepared, ctx: &mut TrainContext, out: &mut TrainOutput) -> Result<()> {
    phase(model, data, Phase::Caption, Objective::Caption, CurriculumSource::Schedule, ctx, out)?;
    phase(model, data, Phase::SceneGraph, Objective::SceneGraph, CurriculumSource::Schedule, ctx, out)
}

fn finetune(model: &mut MtlModel, data: &Prepared, ctx: &mut TrainContext, out: &mut TrainOutput) -> Result<()> {
    let inherit = CurriculumSource::Inherit(ctx.current_sigma());
    phase(model, data, Phase::Finetune, Objective::Finetune, inherit, ctx, out)
}

fn kd(model: &mut MtlModel, teachers: &Teachers, data: &Prepared, ctx: &mut TrainContext, out: &mut TrainOutput) -> Result<()> {
    teachers.check_compatible(model)?;
    phase(model, data, Phase::Kd, Objective::Kd(teachers), CurriculumSource::Schedule, ctx, out)
}

/// Caption head alone with everything else frozen, then the scene-graph head alone.
pub fn train_task_aware(model: &mut MtlModel, data: &SceneDataset, ctx: &mut TrainContext) -> Result<TrainOutput> {
    let p = prepare(model, data)?;
    let mut out = TrainOutput::default();
    task_aware(model, &p, ctx, &mut out)?;
    Ok(out)
}

/// All heads and the extractor on the fine-tuning objective, at the σ the previous
/// phase ended with.
pub fn finetune_joint(model: &mut MtlModel, data: &SceneDataset, ctx: &mut TrainContext) -> Result<TrainOutput> {
    let p = prepare(model, data)?;
    let mut out = TrainOutput::default();
    finetune(model, &p, ctx, &mut out)?;
    Ok(out)
}

/// Joint training on the vanilla objective from the pretrained weights.
pub fn train_vanilla(model: &mut MtlModel, data: &SceneDataset, ctx: &mut TrainContext) -> Result<TrainOutput> {
    let p = prepare(model, data)?;
    let mut out = TrainOutput::default();
    phase(model, &p, Phase::Joint, Objective::Vanilla, CurriculumSource::Schedule, ctx, &mut out)?;
    Ok(out)
}

/// Joint training against frozen single-task teachers.
pub fn train_kd(model: &mut MtlModel, teachers: &Teachers, data: &SceneDataset, ctx: &mut TrainContext) -> Result<TrainOutput> {
    let p = prepare(model, data)?;
    let mut out = TrainOutput::default();
    kd(model, teachers, &p, ctx, &mut out)?;
    Ok(out)
}

/// Distillation followed by joint fine-tuning; the teachers are not used in the
/// second phase.
pub fn train_kd_ft(model: &mut MtlModel, teachers: &Teachers, data: &SceneDataset, ctx: &mut TrainContext) -> Result<TrainOutput> {
    let p = prepare(model, data)?;
    let mut out = TrainOutput::default();
    kd(model, teachers, &p, ctx, &mut out)?;
    finetune(model, &p, ctx, &mut out)?;
    Ok(out)
}

/// Trains a copy of `base` on one task (`StlCaption` or `StlSceneGraph`) with the
/// extractor unfrozen and returns it as a teacher.
pub fn train_teacher(base: &MtlModel, data: &SceneDataset, task: Phase, ctx: &mut TrainContext) -> Result<(Teacher, PhaseRecord)> {
    let objective = match task {
        Phase::StlCaption => Objective::Caption,
        Phase::StlSceneGraph => Objective::SceneGraph,
        p => return Err(Error::invalid(format!("{p} is not a single-task phase"))),
    };
    let mut model = base.clone();
    let p = prepare(&model, data)?;
    let spec = PhaseSpec { phase: task, objective, curriculum: CurriculumSource::Schedule, val_split: p.split, select: false };
    let rec = run_phase(&mut model, &p.train, &p.val, spec, ctx, &mut Selection::default())?;
    let kernel = rec.sigma_end.map(|s| crate::curriculum::log_kernel(s, ctx.cfg.curriculum.radius)).transpose()?;
    Ok((Teacher { model, kernel }, rec))
}

/// Runs the regime selected in `ctx` on source-domain data.
pub fn train_regime(model: &mut MtlModel, data: &SceneDataset, teachers: Option<&Teachers>, ctx: &mut TrainContext) -> Result<TrainOutput> {
    let regime = ctx.cfg.regime.regime;
    let need = || teachers.ok_or_else(|| Error::invalid(format!("{regime} needs single-task teachers")));
    let p = prepare(model, data)?;
    let mut out = TrainOutput::default();
    match regime {
        Regime::MtlFt => {
            task_aware(model, &p, ctx, &mut out)?;
            finetune(model, &p, ctx, &mut out)?;
        }
        Regime::MtlV => phase(model, &p, Phase::Joint, Objective::Vanilla, CurriculumSource::Schedule, ctx, &mut out)?,
        Regime::MtlKd => kd(model, need()?, &p, ctx, &mut out)?,
        Regime::MtlKdFt => {
            kd(model, need()?, &p, ctx, &mut out)?;
            finetune(model, &p, ctx, &mut out)?;
        }
    }
    Ok(out)
}

/// Continues training on the target-domain training split with the objective that
/// ends the regime: fine-tuning for MTL-FT and MTL-KD-FT, the vanilla objective for
/// MTL-V, distillation for MTL-KD. σ is inherited from the previous phase and model
/// selection uses the target validation split.
pub fn adapt_few_shot(model: &mut MtlModel, td: &SceneDataset, teachers: Option<&Teachers>, ctx: &mut TrainContext) -> Result<TrainOutput> {
    if td.domain != Domain::Target {
        return Err(Error::invalid("few-shot adaptation expects a target-domain dataset"));
    }
    let regime = ctx.cfg.regime.regime;
    let objective = match regime {
        Regime::MtlFt | Regime::MtlKdFt => Objective::Finetune,
        Regime::MtlV => Objective::Vanilla,
        Regime::MtlKd => {
            let t = teachers.ok_or_else(|| Error::invalid("MTL_KD adaptation needs single-task teachers"))?;
            t.check_compatible(model)?;
            Objective::Kd(t)
        }
    };
    let p = prepare(model, td)?;
    let mut out = TrainOutput::default();
    let inherit = CurriculumSource::Inherit(ctx.current_sigma());
    phase(model, &p, Phase::Adapt, objective, inherit, ctx, &mut out)?;
    Ok(out)
}
