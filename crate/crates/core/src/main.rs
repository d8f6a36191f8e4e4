use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scene_mtl::error::{Error, Result};
use scene_mtl::experiments::{
    evaluate, grid_summary, run, run_adapt, run_grid, run_stage, write_data, ExperimentConfig, Profile, Protocol, RunManifest, Stage,
};
use scene_mtl::metrics::MetricsReport;
use scene_mtl::trainers::Regime;

#[derive(Parser)]
#[command(name = "scene-mtl", version, about = "Multi-task surgical scene captioning and interaction detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets into `<out>/sd` and `<out>/td`.
    GenData(Common),
    /// Contrastive pretraining only; saves the `pretrained` checkpoint.
    Pretrain(Common),
    /// Full run: pretraining, the regime, adaptation under FEW, BG/BC evaluation.
    Train(Common),
    /// Few-shot adaptation of a saved checkpoint on the target data.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `teacher-caption` and `teacher-graph` (KD regimes).
        #[arg(long)]
        teachers: Option<PathBuf>,
    },
    /// Score a checkpoint on a saved dataset's validation split. A directory with
    /// `sd/` and `td/` subdirectories is scored on both.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Every regime under both protocols, then `grid.md` and `grid.tsv` in `<out>`.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Only rebuild the table from existing run directories.
        #[arg(long)]
        summary_only: bool,
    },
}

#[derive(Args)]
struct Common {
    /// `key=value` file; missing keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    profile: Option<String>,
    /// Overrides `regime.regime` (MTL_FT, MTL_V, MTL_KD, MTL_KD_FT).
    #[arg(long)]
    regime: Option<String>,
    /// Overrides `protocol` (UDA or FEW).
    #[arg(long)]
    protocol: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let profile = self.profile.as_deref().map(str::parse::<Profile>).transpose()?;
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, profile)?,
            None => ExperimentConfig::parse("", profile)?,
        };
        if let Some(r) = &self.regime {
            cfg.regime.regime = Regime::parse(r).ok_or_else(|| Error::Config {
                key: "regime.regime".into(),
                message: format!("`{r}` is not a regime"),
            })?;
        }
        if let Some(p) = &self.protocol {
            cfg.protocol = Protocol::parse(p).ok_or_else(|| Error::Config {
                key: "protocol".into(),
                message: format!("`{p}` is not UDA or FEW"),
            })?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(r: &MetricsReport) {
    let cells: Vec<String> = r.named().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{} n={} {}", r.split.as_str(), r.n_samples, cells.join(" "));
}

fn print_manifest(m: &RunManifest, dir: &Path) {
    println!("run {} {} {} -> {}", m.regime, m.protocol, m.stage, dir.display());
    for p in &m.phases {
        let loss = p.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        println!("  {:<16} epochs={:<4} loss={loss}", p.phase.to_string(), p.epochs_run);
    }
    for e in &m.reports {
        print!("  {:<5} {:<22} ", e.checkpoint.as_str(), e.label);
        print_report(&e.report);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let (sd, td) = write_data(&cfg, &cfg.output_dir)?;
            println!("sd: {} frames -> {}", sd.frames.len(), cfg.output_dir.join("sd").display());
            println!("td: {} frames -> {}", td.frames.len(), cfg.output_dir.join("td").display());
        }
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            print_manifest(&run_stage(&cfg, Stage::Pretrain)?, &cfg.output_dir);
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            print_manifest(&run(&cfg)?, &cfg.output_dir);
        }
        Command::Adapt { common, checkpoint, teachers } => {
            let cfg = common.load()?;
            print_manifest(&run_adapt(&cfg, &checkpoint, teachers.as_deref())?, &cfg.output_dir);
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = common.load()?;
            let dirs = if data.join("sd").is_dir() && data.join("td").is_dir() { vec![data.join("sd"), data.join("td")] } else { vec![data] };
            for d in dirs {
                print_report(&evaluate(&checkpoint, &d, &cfg.eval)?);
            }
        }
        Command::Grid { common, summary_only } => {
            let cfg = common.load()?;
            let dir = cfg.output_dir.clone();
            if summary_only {
                print!("{}", grid_summary(&dir).to_markdown());
                return Ok(true);
            }
            let (table, runs) = run_grid(&cfg, &dir)?;
            print!("{}", table.to_markdown());
            let mut ok = true;
            for r in runs.iter().filter(|r| r.result.is_err()) {
                ok = false;
                eprintln!("failed: {} {}: {}", r.regime, r.protocol, r.result.as_ref().unwrap_err());
            }
            return Ok(ok);
        }
    }
    Ok(true)
}
