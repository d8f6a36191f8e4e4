use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Protocol};
use super::manifest::{CheckpointKind, RunManifest, MANIFEST_FILE};
use super::run::run;
use crate::error::Result;
use crate::fsio;
use crate::metrics::{MetricsReport, Split};
use crate::trainers::Regime;

/// One row per (regime, protocol, checkpoint). `None` reports mean the run is
/// missing or failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub regime: Regime,
    pub protocol: Protocol,
    pub checkpoint: CheckpointKind,
    pub sd: Option<MetricsReport>,
    pub td: Option<MetricsReport>,
}

impl GridRow {
    pub fn is_absent(&self) -> bool {
        self.sd.is_none() && self.td.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

pub fn run_dir_name(regime: Regime, protocol: Protocol) -> String {
    format!("{}-{}", regime.slug(), protocol.as_str().to_lowercase())
}

const COLUMNS: [&str; 5] = ["BLEU-4", "CIDEr", "Acc", "mAP", "Recall"];

fn cells(r: Option<&MetricsReport>) -> Vec<String> {
    match r {
        Some(r) => [r.bleu4, r.cider, r.acc, r.map, r.recall].iter().map(|v| format!("{v:.4}")).collect(),
        None => vec!["absent".to_string(); COLUMNS.len()],
    }
}

impl GridTable {
    pub fn row(&self, regime: Regime, protocol: Protocol, checkpoint: CheckpointKind) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.regime == regime && r.protocol == protocol && r.checkpoint == checkpoint)
    }

    /// Largest cell difference between two tables of the same shape.
    pub fn max_diff(&self, o: &GridTable) -> f64 {
        if self.rows.len() != o.rows.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.rows.iter().zip(&o.rows) {
            for (x, y) in [(&a.sd, &b.sd), (&a.td, &b.td)] {
                match (x, y) {
                    (Some(x), Some(y)) => worst = worst.max(x.max_abs_diff(y)),
                    (None, None) => {}
                    _ => return f64::INFINITY,
                }
            }
        }
        worst
    }

    pub fn to_markdown(&self) -> String {
        let mut head = vec!["Regime".to_string(), "Protocol".to_string(), "Weights".to_string()];
        for split in ["SD", "TD"] {
            head.extend(COLUMNS.iter().map(|c| format!("{split} {c}")));
        }
        let mut out = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
        for r in &self.rows {
            let mut row = vec![r.regime.to_string(), r.protocol.to_string(), r.checkpoint.as_str().to_string()];
            row.extend(cells(r.sd.as_ref()));
            row.extend(cells(r.td.as_ref()));
            let _ = writeln!(out, "| {} |", row.join(" | "));
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("regime\tprotocol\tweights");
        for split in ["sd", "td"] {
            for c in ["bleu4", "cider", "acc", "map", "recall"] {
                let _ = write!(out, "\t{split}_{c}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            let mut row = vec![r.regime.to_string(), r.protocol.to_string(), r.checkpoint.as_str().to_string()];
            // Full precision so the file reproduces manifest values exactly.
            for rep in [&r.sd, &r.td] {
                match rep {
                    Some(m) => row.extend([m.bleu4, m.cider, m.acc, m.map, m.recall].iter().map(|v| format!("{v:?}"))),
                    None => row.extend(std::iter::repeat_n("absent".to_string(), COLUMNS.len())),
                }
            }
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Collects the 4 regimes × 2 protocols × {BG, BC} rows from the run directories
/// under `dir`. Missing or failed runs give absent rows.
pub fn grid_summary(dir: &Path) -> GridTable {
    let mut rows = Vec::with_capacity(16);
    for regime in Regime::ALL {
        for protocol in Protocol::ALL {
            let run_dir = dir.join(run_dir_name(regime, protocol));
            let manifest = if run_dir.join(MANIFEST_FILE).exists() { RunManifest::read(&run_dir).ok() } else { None };
            let manifest = manifest.filter(RunManifest::is_success);
            for checkpoint in [CheckpointKind::Bg, CheckpointKind::Bc] {
                let get = |s| manifest.as_ref().and_then(|m| m.report(checkpoint, s)).cloned();
                rows.push(GridRow { regime, protocol, checkpoint, sd: get(Split::Sd), td: get(Split::Td) });
            }
        }
    }
    GridTable { rows }
}

/// Outcome of one grid cell.
#[derive(Clone, Debug)]
pub struct GridRun {
    pub regime: Regime,
    pub protocol: Protocol,
    pub dir: PathBuf,
    pub result: std::result::Result<RunManifest, String>,
}

/// Runs every regime under both protocols from `base` into `dir/<regime>-<protocol>`,
/// then writes `grid.md` and `grid.tsv` there. A failed run does not stop the grid;
/// its rows come out absent.
pub fn run_grid(base: &ExperimentConfig, dir: &Path) -> Result<(GridTable, Vec<GridRun>)> {
    fsio::create_dir_all(dir)?;
    let mut runs = Vec::new();
    for regime in Regime::ALL {
        for protocol in Protocol::ALL {
            let mut cfg = base.clone();
            cfg.regime.regime = regime;
            cfg.protocol = protocol;
            cfg.output_dir = dir.join(run_dir_name(regime, protocol));
            let result = run(&cfg).map_err(|e| e.to_string());
            runs.push(GridRun { regime, protocol, dir: cfg.output_dir, result });
        }
    }
    let table = grid_summary(dir);
    fsio::write_atomic(&dir.join("grid.md"), table.to_markdown().as_bytes())?;
    fsio::write_atomic(&dir.join("grid.tsv"), table.to_tsv().as_bytes())?;
    Ok((table, runs))
}
