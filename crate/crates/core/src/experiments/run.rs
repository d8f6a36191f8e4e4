use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{ExperimentConfig, Protocol};
use super::manifest::{CheckpointKind, PhaseSummary, ReportEntry, RunLock, RunManifest, RunStatus, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::fsio;
use crate::metrics::{MetricsReport, Split};
use crate::models::{expand_classifier_head, load_checkpoint, save_checkpoint, CheckpointMeta, MtlModel};
use crate::synthdata::{generate_domains, load_dataset, save_dataset, Domain, SceneDataset};
use crate::trainers::{
    adapt_few_shot, evaluate_split, pretrain_cicl, train_regime, train_teacher, ClassIndex, MetricsLog, Phase, PhaseRecord, Selection,
    Teacher, Teachers, TrainContext, TrainOutput,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
const TEACHER_CAPTION: &str = "teacher-caption";
const TEACHER_GRAPH: &str = "teacher-graph";

/// How far a run goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Data generation and contrastive pretraining (plus the incremental pass under FEW).
    Pretrain,
    /// Pretraining, the regime, adaptation under FEW, and BG/BC evaluation.
    Full,
}

/// Source and target data of `cfg`: generated from its seed and saved under
/// `<output_dir>/data`.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(SceneDataset, SceneDataset)> {
    generate_domains(&cfg.dataset.generator(), &cfg.shift, cfg.seed, cfg.dataset.sd_frames, cfg.dataset.td_frames)
}

pub fn write_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(SceneDataset, SceneDataset)> {
    let (sd, td) = generate_data(cfg)?;
    save_dataset(&sd, &dir.join("sd"))?;
    save_dataset(&td, &dir.join("td"))?;
    Ok((sd, td))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn ckpt_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    fn context(&self, label: Option<&str>) -> Result<TrainContext> {
        let mut ctx = TrainContext::new(self.cfg.train_config())?
            .with_checkpoints(self.ckpt_dir())
            .with_log(MetricsLog::to_file(&self.out.join(METRICS_FILE))?);
        if let Some(l) = label {
            ctx.label = l.to_string();
        }
        Ok(ctx)
    }

    fn push(&mut self, recs: &[PhaseRecord]) {
        self.manifest.phases.extend(recs.iter().map(PhaseSummary::from));
    }

    fn new_model(&self, sd: &SceneDataset, classes: &ClassIndex) -> Result<MtlModel> {
        MtlModel::new(self.cfg.model.model_config(&sd.config, classes.n_base()), self.cfg.seed)
    }

    /// Pretraining on the source domain; under FEW the head then grows by the novel
    /// classes and a second pass on the target training split distils the old head.
    fn pretrain(&mut self, model: &mut MtlModel, sd: &SceneDataset, td: &SceneDataset, ctx: &mut TrainContext) -> Result<()> {
        let classes = class_index(self.cfg, sd);
        let rec = pretrain_cicl(model, sd, &classes, None, ctx)?;
        self.push(&[rec]);
        if self.cfg.protocol == Protocol::Few {
            self.incremental(model, td, ctx)?;
        }
        Ok(())
    }

    fn incremental(&mut self, model: &mut MtlModel, td: &SceneDataset, ctx: &mut TrainContext) -> Result<()> {
        let classes = class_index(self.cfg, td);
        let old = model.clone();
        *model = expand_classifier_head(&old, classes.n_novel(), self.cfg.seed ^ 0x5eed)?;
        let rec = pretrain_cicl(model, td, &classes, Some(&old), ctx)?;
        self.push(&[rec]);
        Ok(())
    }

    fn teachers(&mut self, base: &MtlModel, sd: &SceneDataset) -> Result<Option<Teachers>> {
        if !self.cfg.regime.regime.uses_teachers() {
            return Ok(None);
        }
        let mut ctx = self.context(Some("teacher"))?;
        let (caption, rc) = train_teacher(base, sd, Phase::StlCaption, &mut ctx)?;
        let (graph, rg) = train_teacher(base, sd, Phase::StlSceneGraph, &mut ctx)?;
        self.push(&[rc, rg]);
        for (t, name) in [(&caption, TEACHER_CAPTION), (&graph, TEACHER_GRAPH)] {
            let meta = self.meta(name, "teacher", t.kernel.as_ref().map(|k| k.sigma()), ctx.epochs_done());
            save_checkpoint(&t.model, &meta, &self.ckpt_dir().join(name))?;
        }
        Ok(Some(Teachers { caption, graph }))
    }

    fn meta(&self, label: &str, phase: &str, sigma: Option<f64>, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            label: label.to_string(),
            regime: self.cfg.regime.regime.slug(),
            phase: phase.to_string(),
            epoch,
            sigma,
            radius: self.cfg.curriculum.radius,
        }
    }

    /// Evaluates BG and BC on both validation splits, falling back to the final
    /// weights when nothing was selected.
    fn report(&mut self, model: &MtlModel, sel: &Selection, ctx: &TrainContext, sd: &SceneDataset, td: &SceneDataset) -> Result<()> {
        let final_meta = self.meta(&format!("{}-final", ctx.label), "final", ctx.current_sigma(), ctx.epochs_done());
        save_checkpoint(model, &final_meta, &self.ckpt_dir().join(&final_meta.label))?;
        for (kind, slot) in [(CheckpointKind::Bg, &sel.bg), (CheckpointKind::Bc, &sel.bc)] {
            let (m, meta, selected) = match slot {
                Some(s) => (&s.model, &s.meta, true),
                None => (model, &final_meta, false),
            };
            for ds in [sd, td] {
                let report = evaluate_split(m, &ds.val_frames(), meta.kernel()?.as_ref(), split_of(ds), &self.cfg.eval)?;
                self.manifest.reports.push(ReportEntry { checkpoint: kind, label: meta.label.clone(), selected, report });
            }
        }
        Ok(())
    }

    fn full(&mut self) -> Result<()> {
        let (sd, td) = write_data(self.cfg, &self.out.join("data"))?;
        let mut ctx = self.context(None)?;
        let mut model = self.new_model(&sd, &class_index(self.cfg, &sd))?;
        self.pretrain(&mut model, &sd, &td, &mut ctx)?;
        let teachers = self.teachers(&model, &sd)?;
        let out = train_regime(&mut model, &sd, teachers.as_ref(), &mut ctx)?;
        self.push(&out.history);
        let selection = match self.cfg.protocol {
            Protocol::Uda => out.selection,
            Protocol::Few => {
                let a = adapt_few_shot(&mut model, &td, teachers.as_ref(), &mut ctx)?;
                self.push(&a.history);
                a.selection
            }
        };
        self.report(&model, &selection, &ctx, &sd, &td)
    }

    fn pretrain_stage(&mut self) -> Result<()> {
        let (sd, td) = write_data(self.cfg, &self.out.join("data"))?;
        let mut ctx = self.context(None)?;
        let mut model = self.new_model(&sd, &class_index(self.cfg, &sd))?;
        self.pretrain(&mut model, &sd, &td, &mut ctx)?;
        let meta = self.meta("pretrained", Phase::PretrainCicl.as_str(), None, ctx.epochs_done());
        save_checkpoint(&model, &meta, &self.ckpt_dir().join("pretrained"))?;
        self.report(&model, &Selection::default(), &ctx, &sd, &td)
    }

    fn adapt_stage(&mut self, checkpoint: &Path, teachers: Option<&Path>) -> Result<()> {
        let (sd, td) = write_data(self.cfg, &self.out.join("data"))?;
        let (mut model, meta) = load_checkpoint(checkpoint)?;
        let mut ctx = self.context(None)?.with_sigma(meta.sigma);
        let classes = class_index(self.cfg, &td);
        if model.k_cls() < classes.len() {
            self.incremental(&mut model, &td, &mut ctx)?;
            ctx = ctx.with_sigma(meta.sigma);
        }
        let teachers = match teachers {
            Some(dir) => Some(load_teachers(dir)?),
            None => None,
        };
        let out: TrainOutput = adapt_few_shot(&mut model, &td, teachers.as_ref(), &mut ctx)?;
        self.push(&out.history);
        self.report(&model, &out.selection, &ctx, &sd, &td)
    }
}

fn class_index(cfg: &ExperimentConfig, ds: &SceneDataset) -> ClassIndex {
    ClassIndex::new(&ds.config, &cfg.shift.novel_class_ids)
}

fn split_of(ds: &SceneDataset) -> Split {
    if ds.domain == Domain::Target {
        Split::Td
    } else {
        Split::Sd
    }
}

/// Loads the two teachers a distillation run saved under `dir`.
pub fn load_teachers(dir: &Path) -> Result<Teachers> {
    let load = |name: &str| -> Result<Teacher> {
        let (model, meta) = load_checkpoint(&dir.join(name))?;
        Ok(Teacher { model, kernel: meta.kernel()? })
    };
    Ok(Teachers { caption: load(TEACHER_CAPTION)?, graph: load(TEACHER_GRAPH)? })
}

enum Job<'a> {
    Stage(Stage),
    Adapt { checkpoint: &'a Path, teachers: Option<&'a Path> },
}

fn execute(cfg: &ExperimentConfig, job: Job<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let _lock = RunLock::acquire(&out)?;
    let stage = match job {
        Job::Stage(Stage::Pretrain) => "pretrain",
        Job::Stage(Stage::Full) => "full",
        Job::Adapt { .. } => "adapt",
    };
    let mut r = Runner { cfg, out: out.clone(), manifest: RunManifest::new(cfg, stage) };
    fsio::write_atomic(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let metrics = out.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    r.manifest.write(&out)?;
    let start = Instant::now();
    let res = match job {
        Job::Stage(Stage::Pretrain) => r.pretrain_stage(),
        Job::Stage(Stage::Full) => r.full(),
        Job::Adapt { checkpoint, teachers } => r.adapt_stage(checkpoint, teachers),
    };
    r.manifest.wallclock_seconds = start.elapsed().as_secs_f64();
    r.manifest.status = match &res {
        Ok(()) => RunStatus::Success,
        Err(e) => RunStatus::Failed { error: e.to_string() },
    };
    r.manifest.write(&out)?;
    res.map(|()| r.manifest)
}

/// Runs `cfg` end to end in `cfg.output_dir`: data, pretraining, the regime,
/// few-shot adaptation under FEW, then BG/BC evaluation on both validation splits.
/// A failure still leaves a manifest, marked failed, before the error is returned.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    execute(cfg, Job::Stage(Stage::Full))
}

pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<RunManifest> {
    execute(cfg, Job::Stage(stage))
}

/// Few-shot adaptation of a saved checkpoint on the target data of `cfg`. A head
/// without the novel classes is expanded and incrementally pretrained first.
pub fn run_adapt(cfg: &ExperimentConfig, checkpoint: &Path, teachers: Option<&Path>) -> Result<RunManifest> {
    execute(cfg, Job::Adapt { checkpoint, teachers })
}

/// Scores a saved checkpoint on the validation split of a saved dataset.
pub fn evaluate(checkpoint: &Path, dataset: &Path, cfg: &crate::trainers::EvalConfig) -> Result<MetricsReport> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if ds.config.n_interactions != model.config.k_int || ds.vocabulary().len() != model.config.vocab_size {
        return Err(Error::ArchitectureMismatch {
            expected: format!("k_int {} / vocab {}", model.config.k_int, model.config.vocab_size),
            found: format!("dataset k_int {} / vocab {}", ds.config.n_interactions, ds.vocabulary().len()),
        });
    }
    evaluate_split(&model, &ds.val_frames(), meta.kernel()?.as_ref(), split_of(&ds), cfg)
}
