use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Protocol};
use crate::error::{Error, Result};
use crate::fsio;
use crate::metrics::{MetricsReport, Split};
use crate::trainers::{Phase, PhaseRecord, Regime, StopReason};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
const FORMAT: &str = "scene-mtl-run/1";

/// Which weights a report was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckpointKind {
    /// Best validation interaction accuracy.
    #[serde(rename = "BG")]
    Bg,
    /// Best validation BLEU-4.
    #[serde(rename = "BC")]
    Bc,
    /// Weights at the end of the last phase.
    #[serde(rename = "FINAL")]
    Final,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Bg => "BG",
            CheckpointKind::Bc => "BC",
            CheckpointKind::Final => "FINAL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub epochs_run: usize,
    pub stop: StopReason,
    pub sigma_start: Option<f64>,
    pub sigma_end: Option<f64>,
    /// Training loss of the last epoch.
    pub final_loss: Option<f64>,
}

impl From<&PhaseRecord> for PhaseSummary {
    fn from(r: &PhaseRecord) -> Self {
        Self {
            phase: r.phase,
            epochs_run: r.epochs_run,
            stop: r.stop.clone(),
            sigma_start: r.sigma_start,
            sigma_end: r.sigma_end,
            final_loss: r.epochs.last().map(|e| e.loss),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub checkpoint: CheckpointKind,
    /// Checkpoint directory name under `checkpoints/`.
    pub label: String,
    /// False when no validation event selected a model and the final weights stand in.
    pub selected: bool,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub status: RunStatus,
    /// `full`, `pretrain` or `adapt`.
    pub stage: String,
    pub regime: Regime,
    pub protocol: Protocol,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub platform: String,
    /// Modelling choices the configuration does not expose.
    pub design: BTreeMap<String, String>,
    pub phases: Vec<PhaseSummary>,
    pub reports: Vec<ReportEntry>,
    pub wallclock_seconds: f64,
}

pub fn code_version() -> String {
    concat!("scene-mtl ", env!("CARGO_PKG_VERSION")).to_string()
}

pub fn platform() -> String {
    let endian = if cfg!(target_endian = "little") { "le" } else { "be" };
    format!("{}-{}-{}bit-{endian}", std::env::consts::OS, std::env::consts::ARCH, usize::BITS)
}

fn design_notes() -> BTreeMap<String, String> {
    [
        ("curriculum_placement", "after every extractor stage (followed by a per-sample RMS rescale) and after the input projection of each head"),
        ("region_features", "per-box crops through the shared extractor, one region per node"),
        ("finetune_sigma", "joint phases inherit the last sigma of the preceding phase"),
        ("optimizer_steps", "one Adam step per mini-batch; accumulators are per-step buffers zeroed at phase entry"),
        ("sample_weights", "uniform 1/B inside each mini-batch"),
        ("target_shift", "one fixed intensity shift for the whole target domain"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, stage: &str) -> Self {
        Self {
            format: FORMAT.to_string(),
            status: RunStatus::Failed { error: "run did not finish".to_string() },
            stage: stage.to_string(),
            regime: cfg.regime.regime,
            protocol: cfg.protocol,
            config_hash: cfg.hash(),
            code_version: code_version(),
            seed: cfg.seed,
            platform: platform(),
            design: design_notes(),
            phases: Vec::new(),
            reports: Vec::new(),
            wallclock_seconds: 0.0,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == RunStatus::Success
    }

    pub fn report(&self, checkpoint: CheckpointKind, split: Split) -> Option<&MetricsReport> {
        self.reports.iter().find(|e| e.checkpoint == checkpoint && e.report.split == split).map(|e| &e.report)
    }

    pub fn phase_log(&self) -> Vec<Phase> {
        self.phases.iter().map(|p| p.phase).collect()
    }

    /// Largest metric difference over matching reports; infinite if the report sets differ.
    pub fn max_report_diff(&self, o: &RunManifest) -> f64 {
        if self.reports.len() != o.reports.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.reports.iter().zip(&o.reports) {
            if a.checkpoint != b.checkpoint || a.report.split != b.report.split {
                return f64::INFINITY;
            }
            worst = worst.max(a.report.max_abs_diff(&b.report));
        }
        worst
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fsio::write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }

    /// Reads a run directory's manifest and checks it against the stored config.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let m: RunManifest = serde_json::from_slice(&fsio::read(&path)?)?;
        let corrupt = |message: String| Error::Corrupt { path: path.clone(), message };
        if m.format != FORMAT {
            return Err(corrupt(format!("unknown run format `{}`", m.format)));
        }
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE), None)?;
        if cfg.hash() != m.config_hash {
            return Err(corrupt("config hash does not match the stored config".to_string()));
        }
        Ok(m)
    }
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fsio::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
