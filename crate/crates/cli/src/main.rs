//! `solalt` — operator surface for the solar-altitude conditioning
//! pipeline: label metadata, render a synthetic corpus, train the base
//! model, structure tokens, and context network, then sample and evaluate.
//!
//! Every command resolves its settings as flags > config file > defaults
//! and echoes the result to `run.json`; `replay` re-runs a recorded
//! command and reproduces its artifacts byte for byte. Exit codes: 0 ok,
//! 1 data, 2 I/O, 3 missing pipeline stage, 4 numeric failure.

mod commands;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use solalt::dataprep::SceneConfig;
use solalt::diffusion::{DEFAULT_GUIDANCE, DEFAULT_STEPS, DEFAULT_SWITCH_STEP};
use solalt::encoder::DEFAULT_RBF_CENTERS;
use solalt::metrics::DEFAULT_N_PER_CONDITION;
use solalt::training::OptimConfig;
use solalt::{Error, Result};

use settings::{def, opt, req, resolve, ConfigFile, KeySpec, RunConfig, Settings};

#[derive(Parser)]
#[command(
    name = "solalt",
    version,
    about = "Solar-altitude illumination priors for a toy diffusion pipeline"
)]
struct Cli {
    /// Sectioned `key = value` config file, consulted between flags and
    /// built-in defaults (section name = subcommand name).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute solar altitudes for JSONL records of (lat, lon, utc).
    Label(LabelArgs),
    /// Render a bin-balanced synthetic corpus.
    Prep(PrepArgs),
    /// Train the base denoiser and its bin-word prompt table.
    TrainBase(TrainBaseArgs),
    /// Learn structure tokens (S*) against the frozen base.
    TrainStructure(TrainStructureArgs),
    /// Grid-search structure-token lr and count; keep the best set.
    Sweep(SweepArgs),
    /// Train the RBF/SALN context network (D*) against the frozen base.
    TrainContext(TrainContextArgs),
    /// Draw images with context-then-structure partial sampling.
    Sample(SampleArgs),
    /// Sweep altitudes; report luminance, noise, and Fréchet statistics.
    Eval(EvalArgs),
    /// Re-run a recorded command from its run.json.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct LabelArgs {
    /// Input JSONL of records with lat, lon, utc.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL path (settings echoed to <output>.run.json).
    #[arg(long)]
    output: PathBuf,
    /// Keep records tagged "rain" instead of dropping them.
    #[arg(long)]
    keep_rain: bool,
    /// Report bad records to stderr and continue instead of aborting.
    #[arg(long)]
    lenient: bool,
    /// Bin edges such as "a_min,-6,-4,-2,a_max"; appends normalized and
    /// bin fields. Keywords default to the data extremes.
    #[arg(long, allow_hyphen_values = true)]
    bins: Option<String>,
    /// Value for the a_min keyword in --bins.
    #[arg(long, allow_hyphen_values = true)]
    a_min: Option<f64>,
    /// Value for the a_max keyword in --bins.
    #[arg(long, allow_hyphen_values = true)]
    a_max: Option<f64>,
}

#[derive(Args)]
struct OptimArgs {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate (cosine-decayed over the run).
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Stage seed; required, there is no wall-clock default.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrepArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Bin edges in degrees, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    bins: Option<String>,
    /// Scenes rendered per bin.
    #[arg(long)]
    per_bin: Option<usize>,
    /// Corpus seed; required, there is no wall-clock default.
    #[arg(long)]
    seed: Option<u64>,
    /// Scene width in pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Scene height in pixels.
    #[arg(long)]
    height: Option<usize>,
    /// Fully-day base luminance.
    #[arg(long)]
    l_day: Option<f64>,
    /// Fully-night base luminance.
    #[arg(long)]
    l_night: Option<f64>,
    /// Twilight logistic slope, per degree of altitude.
    #[arg(long)]
    twilight_k: Option<f64>,
    /// Sensor noise sigma in full daylight.
    #[arg(long)]
    sigma_min: Option<f64>,
    /// Sensor noise sigma at night.
    #[arg(long)]
    sigma_max: Option<f64>,
    /// Extra seed mixed into scene layout draws.
    #[arg(long)]
    geometry_seed: Option<u64>,
}

#[derive(Args)]
struct TrainBaseArgs {
    /// Output directory for base_model.bin and train_report.json.
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory from `prep`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct TrainStructureArgs {
    /// Output directory for structure_tokens.bin and train_report.json.
    #[arg(long)]
    out: PathBuf,
    /// base_model.bin from `train-base`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Corpus directory from `prep`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of S* embedding rows to learn.
    #[arg(long)]
    token_count: Option<usize>,
    /// Fraction of the daytime subset to train on, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Output directory for sweep.csv and the winning token set.
    #[arg(long)]
    out: PathBuf,
    /// base_model.bin from `train-base`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Corpus directory from `prep`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Fraction of daytime images held out for ranking, in (0, 1).
    #[arg(long)]
    heldout_fraction: Option<f64>,
    /// Images sampled per candidate for the Fréchet ranking.
    #[arg(long)]
    rank_samples: Option<usize>,
    /// Training epochs per grid cell.
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sweep seed; required, there is no wall-clock default.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainContextArgs {
    /// Output directory for context_net.bin and train_report.json.
    #[arg(long)]
    out: PathBuf,
    /// base_model.bin from `train-base`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Corpus directory from `prep`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// structure_tokens.bin from `train-structure` or `sweep`; the D*
    /// token count and warm start come from it unless overridden.
    #[arg(long)]
    structure: Option<PathBuf>,
    /// RBF centers over the normalized altitude axis.
    #[arg(long)]
    rbf_centers: Option<usize>,
    /// D* token count; defaults to the structure set's count.
    #[arg(long)]
    token_count: Option<usize>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct SampleArgs {
    /// Output directory for sample_NNN.pgm images.
    #[arg(long)]
    out: PathBuf,
    /// base_model.bin from `train-base`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// context_net.bin from `train-context`.
    #[arg(long)]
    context: Option<PathBuf>,
    /// structure_tokens.bin from `train-structure` or `sweep`.
    #[arg(long)]
    structure: Option<PathBuf>,
    /// Corpus directory from `prep` (source of the bin scheme).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Solar altitude: degrees (e.g. "12.5") or "norm:<x>" in [0, 1].
    #[arg(long, allow_hyphen_values = true)]
    altitude: Option<String>,
    /// Number of images to draw.
    #[arg(long)]
    count: Option<usize>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Steps conditioned on D* before switching to S*.
    #[arg(long)]
    switch_step: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
    /// Sampling seed; required, there is no wall-clock default.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory for eval_report.json, eval_table.txt, and
    /// per-condition contact sheets.
    #[arg(long)]
    out: PathBuf,
    /// base_model.bin from `train-base`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// context_net.bin from `train-context`.
    #[arg(long)]
    context: Option<PathBuf>,
    /// structure_tokens.bin from `train-structure` or `sweep`.
    #[arg(long)]
    structure: Option<PathBuf>,
    /// Corpus directory from `prep` (bin scheme and scene config).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated normalized altitudes to sweep.
    #[arg(long, allow_hyphen_values = true)]
    altitudes: Option<String>,
    /// Images sampled per condition.
    #[arg(long)]
    n_per_condition: Option<usize>,
    /// Evaluation seed; required, there is no wall-clock default.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    /// run.json recorded by a previous command.
    #[arg(long)]
    run: PathBuf,
    /// Fresh output location (directory, or file path for label runs).
    #[arg(long)]
    out: PathBuf,
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn ps(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn flag(given: bool) -> Option<String> {
    given.then(|| "true".to_owned())
}

fn optim_keys(o: &OptimArgs) -> Vec<KeySpec> {
    let d = OptimConfig::default();
    vec![
        def("epochs", s(&o.epochs), d.epochs),
        def("batch_size", s(&o.batch_size), d.batch_size),
        def("lr", s(&o.lr), d.lr),
        def("weight_decay", s(&o.weight_decay), d.weight_decay),
        def("beta1", None, d.beta1),
        def("beta2", None, d.beta2),
        def("eps", None, d.eps),
        req("seed", s(&o.seed)),
    ]
}

/// Resolve, execute, and record one command: artifacts first, then the
/// run.json echo, so a present run.json marks a completed run.
fn finish(command: &str, file: &ConfigFile, keys: Vec<KeySpec>, out: &Path) -> Result<()> {
    let resolved = resolve(command, file, keys)?;
    let rc = RunConfig::new(command, resolved);
    commands::exec(command, &Settings(rc.settings.clone()), out)?;
    rc.save(&commands::run_json_path(command, out))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Label(a) => {
            let keys = vec![
                req("input", ps(&a.input)),
                def("keep_rain", flag(a.keep_rain), false),
                def("lenient", flag(a.lenient), false),
                opt("bins", a.bins.clone()),
                opt("a_min", s(&a.a_min)),
                opt("a_max", s(&a.a_max)),
            ];
            finish("label", &file, keys, &a.output)
        }
        Command::Prep(a) => {
            let sc = SceneConfig::default();
            let keys = vec![
                def("bins", a.bins.clone(), "-18,-6,-4,-2,60"),
                def("per_bin", s(&a.per_bin), 500),
                req("seed", s(&a.seed)),
                def("width", s(&a.width), sc.width),
                def("height", s(&a.height), sc.height),
                def("l_day", s(&a.l_day), sc.l_day),
                def("l_night", s(&a.l_night), sc.l_night),
                def("twilight_k", s(&a.twilight_k), sc.k),
                def("sigma_min", s(&a.sigma_min), sc.sigma_min),
                def("sigma_max", s(&a.sigma_max), sc.sigma_max),
                def("geometry_seed", s(&a.geometry_seed), sc.geometry_seed),
            ];
            finish("prep", &file, keys, &a.out)
        }
        Command::TrainBase(a) => {
            let mut keys = vec![req("corpus", ps(&a.corpus))];
            keys.extend(optim_keys(&a.optim));
            finish("train-base", &file, keys, &a.out)
        }
        Command::TrainStructure(a) => {
            let mut keys = vec![
                req("base", ps(&a.base)),
                req("corpus", ps(&a.corpus)),
                def("token_count", s(&a.token_count), 3),
                def("fraction", s(&a.fraction), 1.0),
            ];
            keys.extend(optim_keys(&a.optim));
            finish("train-structure", &file, keys, &a.out)
        }
        Command::Sweep(a) => {
            let d = OptimConfig::default();
            let keys = vec![
                req("base", ps(&a.base)),
                req("corpus", ps(&a.corpus)),
                def("heldout_fraction", s(&a.heldout_fraction), 0.2),
                def("rank_samples", s(&a.rank_samples), 16),
                def("epochs", s(&a.epochs), d.epochs),
                def("batch_size", s(&a.batch_size), d.batch_size),
                def("weight_decay", None, d.weight_decay),
                def("beta1", None, d.beta1),
                def("beta2", None, d.beta2),
                def("eps", None, d.eps),
                req("seed", s(&a.seed)),
            ];
            finish("sweep", &file, keys, &a.out)
        }
        Command::TrainContext(a) => {
            let mut keys = vec![
                req("base", ps(&a.base)),
                req("corpus", ps(&a.corpus)),
                req("structure", ps(&a.structure)),
                def("rbf_centers", s(&a.rbf_centers), DEFAULT_RBF_CENTERS),
                opt("token_count", s(&a.token_count)),
            ];
            keys.extend(optim_keys(&a.optim));
            finish("train-context", &file, keys, &a.out)
        }
        Command::Sample(a) => {
            let keys = vec![
                req("base", ps(&a.base)),
                req("context", ps(&a.context)),
                req("structure", ps(&a.structure)),
                req("corpus", ps(&a.corpus)),
                req("altitude", a.altitude.clone()),
                def("count", s(&a.count), 1),
                def("steps", s(&a.steps), DEFAULT_STEPS),
                def("switch_step", s(&a.switch_step), DEFAULT_SWITCH_STEP),
                def("guidance", s(&a.guidance), DEFAULT_GUIDANCE),
                req("seed", s(&a.seed)),
            ];
            finish("sample", &file, keys, &a.out)
        }
        Command::Eval(a) => {
            let keys = vec![
                req("base", ps(&a.base)),
                req("context", ps(&a.context)),
                req("structure", ps(&a.structure)),
                req("corpus", ps(&a.corpus)),
                def("altitudes", a.altitudes.clone(), "0,0.33,0.66,1"),
                def("n_per_condition", s(&a.n_per_condition), DEFAULT_N_PER_CONDITION),
                req("seed", s(&a.seed)),
            ];
            finish("eval", &file, keys, &a.out)
        }
        Command::Replay(a) => {
            let rc = RunConfig::load(&a.run)?;
            commands::exec(&rc.command, &Settings(rc.settings.clone()), &a.out)?;
            rc.save(&commands::run_json_path(&rc.command, &a.out))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Contract(_) | Error::Parse { .. } | Error::Record { .. } => 1,
        Error::Io(_) => 2,
        Error::MissingStage(_) => 3,
        Error::Numeric(_) | Error::Training(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
