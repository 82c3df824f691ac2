use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use asdkit::metrics::MetricKind;
use asdkit::simgen::DegradeMode;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "asdkit", version, about = "Active speaker detection fusion and evaluation toolkit")]
pub struct Cli {
    /// Worker threads for per-clip parallelism.
    #[arg(long, global = true, env = "ASDKIT_THREADS")]
    pub threads: Option<usize>,

    /// Accept unknown keys in manifest records.
    #[arg(long, global = true)]
    pub lenient: bool,

    /// Flat TOML file of flag values; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a bundle directory, validate it and write it out normalised.
    Ingest(IngestArgs),
    /// Validate a bundle and optional score streams against it.
    Validate(ValidateArgs),
    /// Generate a synthetic bundle and synthetic sync scores.
    Simulate(SimulateArgs),
    /// Train the face-voice association head.
    FvaTrain(TrainArgs),
    /// Score every utterance against the identities visible in its clip.
    FvaScore(ScoreArgs),
    /// Project utterance match probabilities onto per-frame track streams.
    Project(ProjectArgs),
    /// Fuse sync and association streams with a fixed weight.
    Fuse(FuseArgs),
    /// Evaluate the fusion weight over a grid.
    Sweep(SweepArgs),
    /// Evaluate one set of score streams against the labels.
    Eval(EvalArgs),
    /// Evaluate methods per bin of track-level face quality.
    Stratify(StratifyArgs),
    /// Randomised utterance masking sweep.
    MaskSweep(MaskArgs),
    /// Collect evaluation reports into a summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory holding the JSONL manifests.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Store embeddings as binary sidecars instead of JSONL.
    #[arg(long)]
    pub sidecar: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Score stream files to check against the bundle's tracks and labels.
    #[arg(long, value_delimiter = ',')]
    pub scores: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Simulator settings as TOML; individual flags below override them.
    #[arg(long, value_name = "FILE")]
    pub sim_config: Option<PathBuf>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    #[arg(long)]
    pub n_clips: Option<usize>,
    #[arg(long)]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output parameter file.
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds initialisation and batch order.
    #[arg(long)]
    pub seed: u64,
    /// Start from existing parameters instead of a fresh initialisation.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 5)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub ff_mult: usize,
    /// Cap on frames per identity (strided subsample).
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub freeze_projections: bool,
    /// Keep the encoder feed-forward sublayer at its initial values.
    #[arg(long)]
    pub freeze_feed_forward: bool,
    /// Per-epoch loss and accuracy as JSON.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Output match file (JSONL).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub sync: PathBuf,
    #[arg(long)]
    pub assoc: PathBuf,
    /// Weight of the sync stream, in [0,1].
    #[arg(long, value_parser = unit_interval)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub sync: PathBuf,
    #[arg(long)]
    pub assoc: PathBuf,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.05")]
    pub grid: String,
    #[arg(long, default_value = "map")]
    pub metric: MetricKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "map")]
    pub metric: MetricKind,
    /// Name recorded in the report.
    #[arg(long)]
    pub model: Option<String>,
    /// Mark the scores as an ensemble output.
    #[arg(long)]
    pub ensemble: bool,
    /// Fusion weight recorded in the report.
    #[arg(long, value_parser = unit_interval)]
    pub alpha: Option<f64>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StratifyArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub sync: PathBuf,
    #[arg(long)]
    pub assoc: PathBuf,
    /// Also evaluate the ensemble at this weight.
    #[arg(long, value_parser = unit_interval)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    #[arg(long, default_value = "ap")]
    pub metric: MetricKind,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the strata as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub sync: PathBuf,
    /// Match probabilities from `fva-score`.
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long, value_parser = unit_interval)]
    pub alpha: f64,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub grid: String,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "silence")]
    pub degrade_mode: DegradeMode,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub degrade_strength: f64,
    #[arg(long, default_value = "ap")]
    pub metric: MetricKind,
    /// Output CSV of per-grid-point means.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every trial as JSON.
    #[arg(long, value_name = "FILE")]
    pub trials_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation reports from `eval`, in table order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub reports: Vec<PathBuf>,
    /// Output summary CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0,1]"))
    }
}

/// Appends `--key value` for every entry of the `--config` file whose flag is
/// not already on the command line.
pub fn merge_config(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_owned)
        }
    });
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {path}"))?;

    let present = |flag: &str| {
        args.iter()
            .any(|a| a == flag || a.strip_prefix(flag).is_some_and(|rest| rest.starts_with('=')))
    };
    let mut out = argv;
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        if present(&flag) {
            continue;
        }
        let scalar = |v: &toml::Value| -> anyhow::Result<String> {
            Ok(match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                other => bail!("config key `{key}`: unsupported value {other}"),
            })
        };
        match &value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<anyhow::Result<Vec<_>>>()?.join(",");
                out.push(flag.into());
                out.push(joined.into());
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}
