//! Operator commands behind the `defog2refog` binary.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use commands::{
    cmd_defog, cmd_eval, cmd_make_toy_data, cmd_synth, cmd_train, read_eval_csv, write_eval_csv, DepthSource, EvalRow, EvalSource,
    Skipped,
};
pub use config::{load_run_config, DataPaths, OutputPaths, RunConfig, TrainOverrides, CHECKPOINT_DIR_ENV};

use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::fogmodel::AtmosphericLight;
use crate::trainer::{DefogModel, TrainOutputs};

/// Exit status when `--strict` is set and some inputs were skipped.
pub const EXIT_SKIPPED: i32 = 3;
pub const EXIT_ERROR: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "defog2refog", version, about = "Unpaired single-image fog removal")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all networks from a TOML config.
    Train(TrainArgs),
    /// Remove fog from every PNG in a directory.
    Defog(DefogArgs),
    /// Add synthetic fog to every PNG in a directory.
    Synth(SynthArgs),
    /// Score defogging results.
    Eval(EvalArgs),
    /// Generate a synthetic foggy/clear dataset.
    MakeToyData(ToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint, appending to the loss log.
    #[arg(long, conflicts_with = "resume_latest")]
    pub resume: Option<PathBuf>,
    /// Continue from the newest checkpoint in the checkpoint directory.
    #[arg(long)]
    pub resume_latest: bool,
}

#[derive(Debug, Args)]
pub struct Parallel {
    /// Images processed concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub workers: u16,
    /// Exit with status 3 when any input was skipped.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct DefogArgs {
    /// Defaults to the newest checkpoint in the checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub parallel: Parallel,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clear: PathBuf,
    /// Directory of `<stem>.dpth` grids or single-channel `<stem>.png` depth maps; a linear ramp otherwise.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// One gray value or three comma-separated channel values in [0, 1].
    #[arg(long, default_value = "0.8")]
    pub airlight: String,
    /// Ramp depth at the bottom row.
    #[arg(long, default_value_t = 0.0)]
    pub near: f64,
    /// Ramp depth at the top row.
    #[arg(long, default_value_t = 1.0)]
    pub far: f64,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub parallel: Parallel,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "after", conflicts_with = "mrfid")]
    pub before: Option<PathBuf>,
    #[arg(long, requires = "before")]
    pub after: Option<PathBuf>,
    /// Root of a multi-level fog dataset.
    #[arg(long, required_unless_present = "before")]
    pub mrfid: Option<PathBuf>,
    /// Defog model for the multi-level mode.
    #[arg(long, requires = "mrfid")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub parallel: Parallel,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything needed to rerun a command, written before it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub skipped: Option<usize>,
}

impl RunManifest {
    pub const FILE: &'static str = "run_manifest.json";

    fn new(command: &str, args: &[String], seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            args: args.to_vec(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
            skipped: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self).expect("manifest serialises"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    fn finish(mut self, path: &Path, skipped: Option<usize>) -> Result<()> {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.skipped = skipped;
        self.write(path)
    }
}

pub fn parse_airlight(s: &str) -> Result<AtmosphericLight> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(vec![format!("airlight {s:?}: {e}")]))?;
    let rgb = match vals.as_slice() {
        [v] => [*v; 3],
        [r, g, b] => [*r, *g, *b],
        _ => return Err(Error::Config(vec![format!("airlight {s:?}: expected 1 or 3 values")])),
    };
    AtmosphericLight::new(rgb)
}

fn env_checkpoint_dir() -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serialises")
}

/// Runs a parsed command. Returns the number of skipped inputs.
pub fn run(cli: &Cli, args: &[String]) -> Result<usize> {
    match &cli.command {
        Command::Train(a) => {
            let overrides = TrainOverrides {
                iterations: a.iterations,
                seed: a.seed,
                learning_rate: a.learning_rate,
                image_size: a.image_size,
                checkpoint_every: a.checkpoint_every,
                output_dir: a.output.clone(),
                checkpoint_dir: a.checkpoint_dir.clone(),
            };
            let cfg = load_run_config(&a.config, &overrides, env_checkpoint_dir())?;
            let resume = match (&a.resume, a.resume_latest) {
                (Some(p), _) => Some(p.clone()),
                (None, true) => Some(
                    TrainOutputs {
                        checkpoint_dir: cfg.checkpoint_dir(),
                        loss_log: PathBuf::new(),
                    }
                    .latest_checkpoint()?,
                ),
                (None, false) => None,
            };
            let mpath = cfg.output.dir.join(RunManifest::FILE);
            let manifest = RunManifest::new("train", args, Some(cfg.train.seed), to_json(&cfg));
            manifest.write(&mpath)?;
            let t = cmd_train(&cfg, resume.as_deref())?;
            log::info!("finished at iteration {}", t.state.iteration);
            manifest.finish(&mpath, None)?;
            Ok(0)
        }
        Command::Defog(a) => {
            let ckpt = match &a.checkpoint {
                Some(p) => p.clone(),
                None => {
                    let dir = env_checkpoint_dir().ok_or_else(|| {
                        Error::Config(vec![format!("--checkpoint not given and {CHECKPOINT_DIR_ENV} is unset")])
                    })?;
                    TrainOutputs {
                        checkpoint_dir: dir,
                        loss_log: PathBuf::new(),
                    }
                    .latest_checkpoint()?
                }
            };
            let mpath = a.output.join(RunManifest::FILE);
            let manifest = RunManifest::new("defog", args, None, serde_json::json!({ "checkpoint": ckpt, "input": a.input }));
            manifest.write(&mpath)?;
            let model = DefogModel::load(&ckpt)?;
            let (written, skipped) = cmd_defog(&model, &a.input, &a.output, a.parallel.workers as usize)?;
            println!("defogged {} images, skipped {}", written.len(), skipped.len());
            manifest.finish(&mpath, Some(skipped.len()))?;
            Ok(skipped.len())
        }
        Command::Synth(a) => {
            let airlight = parse_airlight(&a.airlight)?;
            let depth = match &a.depth {
                Some(d) => DepthSource::Directory(d.clone()),
                None => DepthSource::Ramp { near: a.near, far: a.far },
            };
            let mpath = a.output.join(RunManifest::FILE);
            let manifest = RunManifest::new(
                "synth",
                args,
                None,
                serde_json::json!({ "clear": a.clear, "depth": depth, "beta": a.beta, "airlight": airlight.rgb }),
            );
            manifest.write(&mpath)?;
            let (written, skipped) = cmd_synth(&a.clear, &depth, a.beta, &airlight, &a.output, a.parallel.workers as usize)?;
            println!("synthesized {} images, skipped {}", written.len(), skipped.len());
            manifest.finish(&mpath, Some(skipped.len()))?;
            Ok(skipped.len())
        }
        Command::Eval(a) => {
            let source = match (&a.before, &a.after, &a.mrfid) {
                (Some(b), Some(af), None) => EvalSource::Directories {
                    before: b.clone(),
                    after: af.clone(),
                },
                (None, None, Some(root)) => EvalSource::Mrfid {
                    root: root.clone(),
                    checkpoint: a.checkpoint.clone(),
                },
                _ => return Err(Error::Config(vec!["give either --before and --after, or --mrfid".into()])),
            };
            let mpath = a.report.with_extension("manifest.json");
            let manifest = RunManifest::new("eval", args, None, to_json(&source));
            manifest.write(&mpath)?;
            let (rows, skipped) = cmd_eval(&source, &a.report, a.parallel.workers as usize)?;
            if let Some(m) = rows.iter().rev().find(|r| r.image == EvalRow::MEAN) {
                println!(
                    "mean e {:.4}, r_bar {:.4}, delta {:.4}, fog {:.4} -> {:.4}",
                    m.e, m.r_bar, m.delta, m.fog_before, m.fog_after
                );
            }
            println!("skipped {}", skipped.len());
            manifest.finish(&mpath, Some(skipped.len()))?;
            Ok(skipped.len())
        }
        Command::MakeToyData(a) => {
            let mpath = a.output.join(RunManifest::FILE);
            let manifest = RunManifest::new(
                "make-toy-data",
                args,
                Some(a.seed),
                serde_json::json!({ "scenes": a.scenes, "size": a.size }),
            );
            manifest.write(&mpath)?;
            let ds = cmd_make_toy_data(&a.output, a.scenes, a.size, a.seed)?;
            println!("wrote {} scenes to {}", ds.scenes.len(), a.output.display());
            manifest.finish(&mpath, None)?;
            Ok(0)
        }
    }
}

fn strict(cli: &Cli) -> bool {
    match &cli.command {
        Command::Defog(a) => a.parallel.strict,
        Command::Synth(a) => a.parallel.strict,
        Command::Eval(a) => a.parallel.strict,
        Command::Train(_) | Command::MakeToyData(_) => false,
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let text: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &text) {
        Ok(skipped) if skipped > 0 && strict(&cli) => EXIT_SKIPPED,
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests;
