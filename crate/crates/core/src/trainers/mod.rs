//! Optimisation regimes over [`MtlModel`](crate::models::MtlModel): contrastive
//! class-incremental pretraining, task-aware asynchronous training with joint
//! fine-tuning, vanilla joint training, distillation from single-task teachers and
//! few-shot adaptation.
//!
//! Every regime steps once per mini-batch. Per-parameter accumulators are filled
//! with `δ_i · ∇L_i` for each frame of the batch (`δ_i = 1/B`), optionally clipped
//! by global norm, and consumed by Adam.

mod engine;
mod eval;
mod log;
mod pretrain;
mod regimes;

use serde::{Deserialize, Serialize};

pub use engine::{overfit_probe, EpochStats, PhaseRecord, ProbeReport, Selected, Selection, StepRecord, StopReason};
pub use eval::{evaluate_frames, evaluate_split, EvalConfig};
pub use log::{MetricRecord, MetricsLog};
pub use pretrain::{pretrain_cicl, ClassIndex};
pub use regimes::{
    adapt_few_shot, finetune_joint, train_kd, train_kd_ft, train_regime, train_task_aware, train_teacher, train_vanilla,
    Teacher, Teachers, TrainContext, TrainOutput,
};

use crate::curriculum::CurriculumSchedule;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "MTL_FT")]
    MtlFt,
    #[serde(rename = "MTL_V")]
    MtlV,
    #[serde(rename = "MTL_KD")]
    MtlKd,
    #[serde(rename = "MTL_KD_FT")]
    MtlKdFt,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::MtlFt, Regime::MtlV, Regime::MtlKd, Regime::MtlKdFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::MtlFt => "MTL_FT",
            Regime::MtlV => "MTL_V",
            Regime::MtlKd => "MTL_KD",
            Regime::MtlKdFt => "MTL_KD_FT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str().eq_ignore_ascii_case(s))
    }

    /// Lower-case form used in checkpoint names.
    pub fn slug(self) -> String {
        self.as_str().to_ascii_lowercase()
    }

    pub fn uses_teachers(self) -> bool {
        matches!(self, Regime::MtlKd | Regime::MtlKdFt)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    PretrainCicl,
    Caption,
    #[serde(rename = "SCENEGRAPH")]
    SceneGraph,
    Finetune,
    Joint,
    Kd,
    Adapt,
    /// Single-task caption teacher for distillation.
    StlCaption,
    /// Single-task scene-graph teacher for distillation.
    #[serde(rename = "STL_SCENEGRAPH")]
    StlSceneGraph,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainCicl => "PRETRAIN_CICL",
            Phase::Caption => "CAPTION",
            Phase::SceneGraph => "SCENEGRAPH",
            Phase::Finetune => "FINETUNE",
            Phase::Joint => "JOINT",
            Phase::Kd => "KD",
            Phase::Adapt => "ADAPT",
            Phase::StlCaption => "STL_CAPTION",
            Phase::StlSceneGraph => "STL_SCENEGRAPH",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant Adam step size; for the caption phases, the scale of the
    /// inverse-square-root warmup schedule.
    pub lr: f64,
}

impl PhaseConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self { epochs, batch_size, lr }
    }

    fn validate(&self, key: &str, allow_zero_epochs: bool) -> Result<()> {
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::config(format!("regime.{key}.epochs"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("regime.{key}.batch_size"), "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("regime.{key}.lr"), "must be positive"));
        }
        Ok(())
    }
}

/// Per-sample weights inside a mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaWeights {
    /// `δ_i = 1/B`.
    Uniform,
}

impl DeltaWeights {
    pub fn as_str(self) -> &'static str {
        "uniform"
    }

    pub fn parse(s: &str) -> Option<Self> {
        (s == "uniform").then_some(DeltaWeights::Uniform)
    }

    pub fn weights(self, batch: usize) -> Vec<f64> {
        vec![1.0 / batch as f64; batch]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub pretrain: PhaseConfig,
    pub caption: PhaseConfig,
    pub scenegraph: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Joint phases of the vanilla and distillation regimes.
    pub joint: PhaseConfig,
    pub adapt: PhaseConfig,
    pub warmup_steps: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub delta_weights: DeltaWeights,
    /// Global gradient-norm cap applied before every optimizer step.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl RegimeConfig {
    /// Small budgets for single-core runs on the 64/32-frame synthetic profile.
    pub fn desk(regime: Regime) -> Self {
        Self {
            regime,
            pretrain: PhaseConfig::new(20, 16, 3e-3),
            caption: PhaseConfig::new(30, 8, 0.3),
            scenegraph: PhaseConfig::new(30, 8, 1e-3),
            finetune: PhaseConfig::new(10, 4, 1e-4),
            joint: PhaseConfig::new(30, 4, 3e-4),
            adapt: PhaseConfig::new(15, 4, 1e-4),
            warmup_steps: 200,
            patience: 10,
            min_delta: 1e-4,
            delta_weights: DeltaWeights::Uniform,
            grad_clip: None,
            seed: 0,
        }
    }

    /// Published budgets: caption 50 epochs at batch 50 with a 10000-step warmup,
    /// scene graph 250 epochs at batch 32 and LR 1e-5, joint training 100 epochs at
    /// batch 4 and LR 7.5e-6.
    pub fn paper(regime: Regime) -> Self {
        let joint = PhaseConfig::new(100, 4, 7.5e-6);
        Self {
            regime,
            pretrain: PhaseConfig::new(30, 32, 1e-4),
            caption: PhaseConfig::new(50, 50, 1.0),
            scenegraph: PhaseConfig::new(250, 32, 1e-5),
            finetune: joint.clone(),
            joint: joint.clone(),
            adapt: joint,
            warmup_steps: 10000,
            patience: 10,
            min_delta: 1e-4,
            delta_weights: DeltaWeights::Uniform,
            grad_clip: None,
            seed: 0,
        }
    }

    /// Task-aware phases may be given zero epochs, which reduces MTL-FT to joint
    /// fine-tuning from the pretrained weights.
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate("pretrain", false)?;
        self.caption.validate("caption", true)?;
        self.scenegraph.validate("scenegraph", true)?;
        self.finetune.validate("finetune", false)?;
        self.joint.validate("joint", false)?;
        self.adapt.validate("adapt", false)?;
        if self.warmup_steps == 0 {
            return Err(Error::config("regime.warmup_steps", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("regime.patience", "must be >= 1"));
        }
        if !(self.min_delta >= 0.0) || !self.min_delta.is_finite() {
            return Err(Error::config("regime.min_delta", "must be finite and >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config("regime.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::PretrainCicl => &self.pretrain,
            Phase::Caption | Phase::StlCaption => &self.caption,
            Phase::SceneGraph | Phase::StlSceneGraph => &self.scenegraph,
            Phase::Finetune => &self.finetune,
            Phase::Joint | Phase::Kd => &self.joint,
            Phase::Adapt => &self.adapt,
        }
    }
}

/// Everything the trainers read besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: RegimeConfig,
    pub curriculum: CurriculumSchedule,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn desk(regime: Regime) -> Self {
        Self {
            regime: RegimeConfig::desk(regime),
            curriculum: CurriculumSchedule::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper(regime: Regime) -> Self {
        Self { regime: RegimeConfig::paper(regime), ..Self::desk(regime) }
    }

    pub fn validate(&self) -> Result<()> {
        self.regime.validate()?;
        self.curriculum.validate()?;
        self.loss.validate()?;
        self.eval.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePolicy {
    pub metric: String,
    pub mode: MetricMode,
    pub patience: usize,
    pub min_delta: f64,
}

impl ConvergencePolicy {
    pub fn new(metric: impl Into<String>, mode: MetricMode, patience: usize, min_delta: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        Ok(Self { metric: metric.into(), mode, patience, min_delta })
    }
}

/// True once the last `patience` evaluations all failed to beat the best earlier
/// value by at least `min_delta`.
pub fn check_convergence(history: &[f64], policy: &ConvergencePolicy) -> bool {
    let p = policy.patience.max(1);
    if history.len() <= p {
        return false;
    }
    let (before, recent) = history.split_at(history.len() - p);
    let best = match policy.mode {
        MetricMode::Max => before.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        MetricMode::Min => before.iter().copied().fold(f64::INFINITY, f64::min),
    };
    !recent.iter().any(|&v| match policy.mode {
        MetricMode::Max => v >= best + policy.min_delta,
        MetricMode::Min => v <= best - policy.min_delta,
    })
}
