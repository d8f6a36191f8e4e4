use serde::{Deserialize, Serialize};

use crate::curriculum::LoGKernel;
use crate::error::{Error, Result};
use crate::metrics::{bleu, cider, interaction_metrics, MetricsReport, Split};
use crate::models::{prepare_frame, FramePrep, MtlModel};
use crate::synthdata::{SceneInstance, BOS, EOS, PAD, UNK};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Sigmoid score at which an interaction counts as predicted.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("eval.threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Greedy captions and thresholded interactions over `frames`. A generation with
/// no content tokens is scored as a lone UNK so it earns nothing but still counts
/// towards the candidate length.
pub fn evaluate_frames(
    model: &MtlModel,
    frames: &[FramePrep],
    kernel: Option<&LoGKernel>,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if frames.is_empty() {
        return Err(Error::invalid(format!("no {} frames to evaluate", split.as_str())));
    }
    let mut cands = Vec::with_capacity(frames.len());
    let mut refs = Vec::with_capacity(frames.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let k = model.config.k_int;
    for fr in frames {
        let (mut caption, s) = model.predict(fr, kernel)?;
        if caption.iter().all(|&t| t == PAD || t == BOS || t == EOS) {
            caption = vec![UNK];
        }
        cands.push(caption);
        refs.push(fr.caption.clone());
        scores.extend_from_slice(s.data());
        labels.extend_from_slice(fr.labels.data());
    }
    let e = scores.len() / k;
    let im = interaction_metrics(&Tensor::new(vec![e, k], scores)?, &Tensor::new(vec![e, k], labels)?, cfg.threshold)?;
    Ok(MetricsReport {
        split,
        n_samples: frames.len(),
        bleu4: bleu(&cands, &refs, 4)?,
        cider: cider(&cands, &refs)?,
        acc: im.acc,
        map: im.map,
        recall: im.recall,
    })
}

/// Prepares `frames` for `model` and evaluates them.
pub fn evaluate_split(
    model: &MtlModel,
    frames: &[&SceneInstance],
    kernel: Option<&LoGKernel>,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let prepped = frames.iter().map(|f| prepare_frame(f, &model.config)).collect::<Result<Vec<_>>>()?;
    evaluate_frames(model, &prepped, kernel, split, cfg)
}
