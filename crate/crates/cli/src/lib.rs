//! Persistence and command-line driver for the low-rank compression
//! pipeline: generate toy models, calibrate, compress, evaluate.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod store;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lowrank_core::harness::{Component, CompressionPlan};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::store::{io_at, TensorStore};

#[derive(Debug, Parser)]
#[command(name = "lowrank", version, about = "Calibration-aware low-rank compression of toy transformer layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set compression.ratio=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long)]
    pub qk_method: Option<String>,
    #[arg(long)]
    pub ov_method: Option<String>,
    #[arg(long)]
    pub mlp_method: Option<String>,
    #[arg(long)]
    pub ov_variant: Option<String>,
    #[arg(long)]
    pub scale_mode: Option<String>,
}

impl ConfigArgs {
    /// Explicit flags are applied after `--set`, so they win.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        let quoted = |s: &String| format!("\"{s}\"");
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("compression.ratio", self.ratio.map(|v| format!("{v:?}"))),
            ("compression.damping", self.damping.map(|v| format!("{v:?}"))),
            ("compression.qk_method", self.qk_method.as_ref().map(quoted)),
            ("compression.ov_method", self.ov_method.as_ref().map(quoted)),
            ("compression.mlp_method", self.mlp_method.as_ref().map(quoted)),
            ("compression.ov_variant", self.ov_variant.as_ref().map(quoted)),
            ("compression.scale_mode", self.scale_mode.as_ref().map(quoted)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                all.push(format!("{k}={v}"));
            }
        }
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComponentArg {
    Qk,
    Ov,
    Mlp,
}

impl From<ComponentArg> for Component {
    fn from(c: ComponentArg) -> Self {
        match c {
            ComponentArg::Qk => Component::Qk,
            ComponentArg::Ov => Component::Ov,
            ComponentArg::Mlp => Component::Mlp,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded random layer weights.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the autocorrelation statistics of every layer.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress every layer; also writes `plan.toml` into the output store.
    Compress {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Plan file as written by `allocate`; overrides the configured ratio.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Functional errors and accounting of a compressed model.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Objective and held-out errors of one component across all ranks.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, value_enum)]
        component: ComponentArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy mixed-rank plan at the configured parameter budget.
    Allocate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_at(path, e))
}

fn read_plan(path: &Path) -> Result<CompressionPlan> {
    let text = fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<pipeline::Model> {
    pipeline::model_from_store(&TensorStore::load(path)?)
}

fn load_stats(path: &Path) -> Result<pipeline::Stats> {
    pipeline::stats_from_store(&TensorStore::load(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let cfg = cfg.resolve()?;
            let model = pipeline::generate(&cfg)?;
            pipeline::model_to_store(&model, cfg.model.weight_dtype)?.save(&out)
        }
        Command::Calibrate { cfg, model, out } => {
            let cfg = cfg.resolve()?;
            let stats = pipeline::calibrate(&cfg, &load_model(&model)?)?;
            pipeline::stats_to_store(&stats)?.save(&out)
        }
        Command::Compress { cfg, model, stats, plan, out } => {
            let cfg = cfg.resolve()?;
            let plan = match plan {
                Some(p) => read_plan(&p)?,
                None => cfg.plan()?,
            };
            let c = pipeline::compress(&cfg, &load_model(&model)?, &load_stats(&stats)?, &plan)?;
            pipeline::compressed_to_store(&c)?.save(&out)?;
            write(&out.join("plan.toml"), &toml::to_string(&c.plan).expect("plan serializes"))
        }
        Command::Evaluate { cfg, model, compressed, out, csv } => {
            let cfg = cfg.resolve()?;
            let c = pipeline::compressed_from_store(&TensorStore::load(&compressed)?)?;
            let report = pipeline::evaluate(&cfg, &load_model(&model)?, &c)?;
            write(&out, &report.to_toml())?;
            if let Some(p) = csv {
                write(&p, &report.to_csv()?)?;
            }
            Ok(())
        }
        Command::Sweep { cfg, model, stats, component, out } => {
            let cfg = cfg.resolve()?;
            let text = pipeline::sweep(&cfg, &load_model(&model)?, &load_stats(&stats)?, component.into())?;
            write(&out, &text)
        }
        Command::Allocate { cfg, model, stats, out } => {
            let cfg = cfg.resolve()?;
            let plan = pipeline::allocate(&cfg, &load_model(&model)?, &load_stats(&stats)?)?;
            write(&out, &toml::to_string(&plan).expect("plan serializes"))
        }
    }
}
