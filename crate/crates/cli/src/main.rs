use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attnprop_candle::{DiffusionBackend, SamFactory};
use attnprop_core::backend::SyntheticBackend;
use attnprop_core::config::{BackendKind, RefinementMode, RunConfig, SegmenterKind};
use attnprop_core::eval::{load_manifest, write_json, DatasetManifest, Layout, ManifestOptions};
use attnprop_core::run::{
    cmd_ablate, cmd_adapt, cmd_eval, cmd_track, OracleSegmenterFactory, SegmenterFactory, Sweep, SweepKind,
};
use attnprop_core::toy::ToyVideo;

mod overrides;

/// Zero-shot video object tracking by propagating first-frame masks through
/// diffusion self-attention.
#[derive(Parser)]
#[command(name = "attnprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track every sequence of a dataset and write indexed PNG masks.
    Track {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Also score the masks, writing summaries to <output_dir>/eval.
        #[arg(long)]
        eval: bool,
    },
    /// Score predicted masks against the dataset annotations.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Directory with <sequence>/<frame>.png predictions.
        #[arg(long)]
        predictions: PathBuf,
        /// Where to write summary.json, curve.json and per-sequence CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a standard sweep, one track + eval per grid point.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// timestep, prompt, heads, refinement or points.
        #[arg(long)]
        sweep: SweepKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a prompt per (sequence, object) missing from the prompt store.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a synthetic translating-square video in DAVIS layout.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        /// 32x32 video whose pixels match a 32x32 lattice.
        #[arg(long)]
        aligned: bool,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; defaults apply to anything it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set propagation.timestep=81`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set run.output_dir=...`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Shorthand for `--set run.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set run.workers=...`.
    #[arg(long)]
    workers: Option<usize>,
    /// Shorthand for `--set backend.kind=...` (synthetic or diffusion).
    #[arg(long)]
    backend: Option<String>,
    /// Shorthand for `--set propagation.timestep=...`.
    #[arg(long)]
    timestep: Option<usize>,
    /// Shorthand for `--set propagation.noise=...`.
    #[arg(long)]
    noise: Option<String>,
    /// Shorthand for `--set prompt.mode=...`.
    #[arg(long)]
    prompt: Option<String>,
    /// Shorthand for `--set refinement.mode=...`.
    #[arg(long)]
    refinement: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut doc: toml::Table = toml::from_str(&text).context("parsing config")?;
        let quoted = |v: &str| toml::Value::String(v.to_string()).to_string();
        let mut sets = Vec::new();
        let shorthands = [
            ("run.output_dir", self.output.as_ref().map(|p| quoted(&p.to_string_lossy()))),
            ("run.seed", self.seed.map(|v| v.to_string())),
            ("run.workers", self.workers.map(|v| v.to_string())),
            ("backend.kind", self.backend.as_deref().map(quoted)),
            ("propagation.timestep", self.timestep.map(|v| v.to_string())),
            ("propagation.noise", self.noise.as_deref().map(quoted)),
            ("prompt.mode", self.prompt.as_deref().map(quoted)),
            ("refinement.mode", self.refinement.as_deref().map(quoted)),
        ];
        for (key, value) in shorthands {
            if let Some(v) = value {
                sets.push(format!("{key}={v}"));
            }
        }
        sets.extend(self.sets.iter().cloned());
        for s in &sets {
            overrides::apply(&mut doc, s)?;
        }
        let text = toml::to_string(&doc)?;
        let source = self.config.as_deref().map(Path::display);
        RunConfig::from_toml(&text).with_context(|| match source {
            Some(p) => format!("invalid configuration {p}"),
            None => "invalid configuration".into(),
        })
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// davis, ytvos or longvideos.
    #[arg(long, default_value = "davis")]
    layout: Layout,
    /// File listing the sequences to use, one per line.
    #[arg(long)]
    sequences: Option<PathBuf>,
    /// File tagging unseen objects, `sequence [object]` per line.
    #[arg(long)]
    unseen: Option<PathBuf>,
}

impl DataArgs {
    fn manifest(&self) -> Result<DatasetManifest> {
        let options = ManifestOptions {
            sequence_list: self.sequences.clone(),
            unseen_list: self.unseen.clone(),
        };
        Ok(load_manifest(&self.data, self.layout, &options)?)
    }
}

enum Loaded {
    Synthetic(SyntheticBackend),
    Diffusion(Box<DiffusionBackend>),
}

/// Runs `$body` with `$b` bound to the concrete backend.
macro_rules! with_backend {
    ($loaded:expr, $b:ident => $body:expr) => {
        match $loaded {
            Loaded::Synthetic($b) => $body,
            Loaded::Diffusion($b) => {
                let $b = &**$b;
                $body
            }
        }
    };
}

fn load_backend(config: &RunConfig) -> Result<Loaded> {
    Ok(match config.backend.kind {
        BackendKind::Synthetic => Loaded::Synthetic(SyntheticBackend::new(config.backend.synthetic.clone())?),
        BackendKind::Diffusion => {
            Loaded::Diffusion(Box::new(DiffusionBackend::load(&config.backend.diffusion).context("loading diffusion model")?))
        }
    })
}

fn load_segmenters(config: &RunConfig, needed: bool) -> Result<Option<Box<dyn SegmenterFactory>>> {
    if !needed {
        return Ok(None);
    }
    let r = &config.refinement;
    Ok(Some(match r.segmenter {
        SegmenterKind::Oracle => Box::new(OracleSegmenterFactory),
        SegmenterKind::Sam => {
            let Some(ckpt) = &r.sam_checkpoint else {
                bail!("segmenter refinement needs refinement.sam_checkpoint");
            };
            Box::new(SamFactory::load(ckpt, r.sam_variant, config.backend.diffusion.cpu).context("loading segmenter")?)
        }
    }))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Track { config, data, eval } => {
            let config = config.load()?;
            let manifest = data.manifest()?;
            let backend = load_backend(&config)?;
            let segmenters = load_segmenters(&config, config.refinement.mode == RefinementMode::Segmenter)?;
            let mut record = with_backend!(&backend, b => cmd_track(b, &config, &manifest, segmenters.as_deref()))?;
            if eval {
                let out = &config.run.output_dir;
                let result = cmd_eval(out, &manifest, &out.join("eval"))?;
                record.metrics = Some(result.summary);
                record.write(&out.join("run_record.json"))?;
            }
            print_json(&serde_json::json!({
                "output_dir": config.run.output_dir,
                "backend": record.backend,
                "wall_seconds": record.wall_seconds,
                "stages": record.stages,
                "metrics": record.metrics,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { data, predictions, out } => {
            let manifest = data.manifest()?;
            let out = out.unwrap_or_else(|| predictions.join("eval"));
            let result = cmd_eval(&predictions, &manifest, &out)?;
            print_json(&result.summary)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            config,
            data,
            sweep,
            out,
        } => {
            let config = config.load()?;
            let manifest = data.manifest()?;
            let sweep = Sweep::standard(sweep, &config);
            let needed = sweep
                .points
                .iter()
                .any(|p| p.config.refinement.mode == RefinementMode::Segmenter);
            let backend = load_backend(&config)?;
            let segmenters = load_segmenters(&config, needed)?;
            let table = with_backend!(&backend, b => cmd_ablate(b, &manifest, &sweep, segmenters.as_deref(), &out))?;
            print_json(&table)?;
            Ok(if table.failures() == 0 {
                ExitCode::SUCCESS
            } else {
                log::error!("{} of {} sweep points failed", table.failures(), table.rows.len());
                ExitCode::from(2)
            })
        }
        Command::Adapt { config, data } => {
            let config = config.load()?;
            let manifest = data.manifest()?;
            let backend = load_backend(&config)?;
            let report = with_backend!(&backend, b => cmd_adapt(b, &config, &manifest))?;
            write_json(&report.store.join("report.json"), &report)?;
            print_json(&report)?;
            Ok(if report.failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                log::error!("{} instances failed to adapt", report.failed.len());
                ExitCode::from(2)
            })
        }
        Command::Toy { out, frames, aligned } => {
            let video = if aligned {
                ToyVideo::lattice_aligned(frames)
            } else {
                ToyVideo::translating_square(frames)
            };
            video.write(&out)?;
            println!("{}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Config { config } => {
            print!("{}", config.load()?.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
