//! `tiger`: separation, training, mixing, evaluation, and profiling from
//! the command line.
//!
//! Exit codes: 0 success, 2 for usage problems (bad flags, missing input
//! files, invalid configuration), 1 for failures after the inputs were
//! accepted (diverged training, write errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tiger::dsp::wav::{read_wav, write_wav, SampleFormat};
use tiger::dsp::{StftConfig, Waveform};
use tiger::metrics::MetricReport;
use tiger::mixgen::MixSpec;
use tiger::model::{TigerConfig, TigerModel};
use tiger::profiler;
use tiger::training::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tiger",
    about = "Band-split time-frequency source separation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separate a mixture WAV into one WAV per source.
    Separate(SeparateArgs),
    /// Train a model on a manifest of mixtures and references.
    Train(TrainArgs),
    /// Generate a synthetic mixture dataset.
    Mix(MixArgs),
    /// Score a checkpoint against a manifest of labeled mixtures.
    Eval(EvalArgs),
    /// Report parameter counts, MACs, and optional wall-clock timings.
    Profile(ProfileArgs),
    /// Dump a WAV's spectrogram as CSV or PGM.
    Spectrogram(SpectrogramArgs),
}

/// Where the model comes from: a named preset or a config file, with
/// dotted overrides on top.
#[derive(Args)]
struct ModelSource {
    /// Preset name: small, large, tiny, or dnr.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file (sectioned key: value text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set separator.b=8 or --set train.lr=0.01.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SeparateArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Trained checkpoint; omitting it separates with freshly seeded
    /// weights (only useful for plumbing checks).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input mixture WAV.
    #[arg(long = "in", value_name = "WAV")]
    input: PathBuf,
    /// Output directory (defaults to the input's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Segment length in seconds; enables chunked long-form inference.
    #[arg(long)]
    segment: Option<f64>,
    /// Overlap fraction between segments (with --segment).
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Manifest of training examples (mixture TAB references).
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest; the training manifest is reused when absent.
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    /// Output directory for model.ckpt and history.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MixArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    /// Fixed overlap ratio in [0,1]; drawn per example when absent.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of labeled mixtures to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Write the per-utterance CSV here (stdout prints the summary).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Clip length the MAC count is computed for.
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    /// Also time forward and forward+backward over this many runs
    /// (first 10 are warmup).
    #[arg(long)]
    bench: Option<usize>,
    /// Emit CSV with per-layer rows instead of the text summary.
    #[arg(long)]
    csv: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DumpFormat {
    Csv,
    Pgm,
}

#[derive(Args)]
struct SpectrogramArgs {
    /// Input WAV.
    #[arg(long = "in", value_name = "WAV")]
    input: PathBuf,
    /// Output file; CSV defaults to stdout, PGM requires a path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DumpFormat::Csv)]
    format: DumpFormat,
    #[arg(long, default_value_t = 640)]
    window: usize,
    #[arg(long, default_value_t = 160)]
    hop: usize,
}

enum Failure {
    /// Rejected before any real work: exit 2.
    Usage(String),
    /// Failed while doing the work: exit 1.
    Runtime(String),
}

impl From<tiger::Error> for Failure {
    fn from(e: tiger::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Preflight wrapper: library errors at validation time are the caller's
/// fault, not the run's.
fn preflight<T>(r: tiger::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| usage(e.to_string()))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Separate(a) => cmd_separate(a),
        Command::Train(a) => cmd_train(a),
        Command::Mix(a) => cmd_mix(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Spectrogram(a) => cmd_spectrogram(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn split_set(entry: &str) -> Result<(&str, &str), Failure> {
    entry
        .split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| usage(format!("--set needs KEY=VALUE, got {entry:?}")))
}

/// Model config from --preset/--config plus the model-side --set keys.
/// train.* keys are left for the train config to claim.
fn resolve_config(source: &ModelSource) -> Result<TigerConfig, Failure> {
    let mut cfg = match (&source.preset, &source.config) {
        (Some(name), None) => preflight(TigerConfig::preset(name))?,
        (None, Some(path)) => {
            require_file(path, "config file")?;
            let text = std::fs::read_to_string(path).map_err(|e| usage(e.to_string()))?;
            preflight(TigerConfig::from_text(&text))?
        }
        (None, None) => return Err(usage("pass --preset NAME or --config FILE")),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    for entry in &source.sets {
        let (k, v) = split_set(entry)?;
        if k.starts_with("train.") {
            continue;
        }
        preflight(cfg.set(k, v))?;
    }
    preflight(cfg.validate())?;
    Ok(cfg)
}

/// Train config from the config file's [train] section (when given) plus
/// train.* --set keys; --seed feeds it unless train.seed overrides.
fn resolve_train_config(source: &ModelSource, seed: u64) -> Result<TrainConfig, Failure> {
    let mut cfg = match &source.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(e.to_string()))?;
            preflight(TrainConfig::from_text(&text))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    for entry in &source.sets {
        let (k, v) = split_set(entry)?;
        if k.starts_with("train.") {
            preflight(cfg.set(k, v))?;
        }
    }
    preflight(cfg.validate())?;
    Ok(cfg)
}

fn load_or_build(
    source: &ModelSource,
    checkpoint: &Option<PathBuf>,
    seed: u64,
) -> Result<TigerModel<f32>, Failure> {
    match checkpoint {
        Some(path) => {
            if source.preset.is_some() || source.config.is_some() || !source.sets.is_empty() {
                return Err(usage(
                    "a checkpoint carries its own config; drop --preset/--config/--set",
                ));
            }
            require_file(path, "checkpoint")?;
            preflight(TigerModel::load(path))
        }
        None => {
            let cfg = resolve_config(source)?;
            preflight(TigerModel::build(cfg, seed))
        }
    }
}

fn cmd_separate(a: SeparateArgs) -> Result<(), Failure> {
    require_file(&a.input, "input WAV")?;
    let model = load_or_build(&a.source, &a.checkpoint, a.seed)?;
    let mixture = preflight(read_wav::<f32>(&a.input))?;
    if let Some(seg) = a.segment {
        if !(seg > 0.0) {
            return Err(usage("--segment must be positive"));
        }
        if !(0.0..1.0).contains(&a.overlap) {
            return Err(usage("--overlap must be in [0, 1)"));
        }
    }

    let sources = match a.segment {
        Some(seg) => model.infer_long(&mixture, seg, a.overlap)?,
        None => model.forward(&mixture)?,
    };

    let out_dir = match &a.out {
        Some(d) => d.clone(),
        None => a.input.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    std::fs::create_dir_all(&out_dir)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("mixture");
    for (k, wave) in sources.iter().enumerate() {
        let path = out_dir.join(format!("{stem}_s{}.wav", k + 1));
        write_wav(&path, wave, SampleFormat::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    require_file(&a.manifest, "manifest")?;
    if let Some(v) = &a.valid_manifest {
        require_file(v, "validation manifest")?;
    }
    let cfg = resolve_config(&a.source)?;
    let train_cfg = resolve_train_config(&a.source, a.seed)?;
    let train_set = preflight(training::load_manifest::<f32>(&a.manifest))?;
    let valid_set = match &a.valid_manifest {
        Some(v) => preflight(training::load_manifest::<f32>(v))?,
        None => train_set.clone(),
    };

    let mut model = preflight(TigerModel::build(cfg, a.seed))?;
    let result = training::fit(&mut model, &train_set, &valid_set, &train_cfg)?;

    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    model.save(&ckpt)?;
    std::fs::write(a.out.join("history.csv"), training::history_csv(&result.history))?;
    let last = result.history.last().expect("at least one epoch");
    println!(
        "stopped after epoch {} ({:?}), train {:.4}, best valid {:.4}",
        last.epoch, result.stopped, last.train_loss, result.best_valid
    );
    println!("{}", ckpt.display());
    Ok(())
}

fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("TIGER_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| usage(format!("TIGER_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn cmd_mix(a: MixArgs) -> Result<(), Failure> {
    let spec = MixSpec {
        overlap_ratio: a.overlap,
        duration_seconds: a.duration,
        seed: a.seed,
        ..MixSpec::default()
    };
    preflight(spec.validate())?;
    if a.speakers < 2 {
        return Err(usage("--speakers must be at least 2"));
    }
    let threads = threads_from_env()?;
    let manifest =
        tiger::mixgen::write_dataset::<f32>(&a.out, a.count, a.speakers, a.sample_rate, &spec, threads)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.manifest, "manifest")?;
    let model: TigerModel<f32> = preflight(TigerModel::load(&a.checkpoint))?;
    let examples = preflight(training::load_manifest::<f32>(&a.manifest))?;
    if examples.is_empty() {
        return Err(usage("manifest names no examples"));
    }

    let mut report = MetricReport::new();
    for (i, ex) in examples.iter().enumerate() {
        let estimates = model.forward(&ex.mixture)?;
        let est: Vec<Vec<f32>> = estimates.into_iter().map(|w| w.samples).collect();
        let refs: Vec<Vec<f32>> = ex.references.iter().map(|r| r.samples.clone()).collect();
        report.add_utterance(&format!("utt{i:04}"), &est, &refs, &ex.mixture.samples)?;
    }
    if let Some(path) = &a.out {
        std::fs::write(path, report.to_csv())?;
    } else {
        print!("{}", report.to_csv());
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&a.source)?;
    if !(a.seconds > 0.0) {
        return Err(usage("--seconds must be positive"));
    }
    if let Some(runs) = a.bench {
        if runs <= 10 {
            return Err(usage("--bench needs more than 10 runs (10 are warmup)"));
        }
    }
    let model = preflight(TigerModel::<f32>::build(cfg, a.seed))?;
    let report = profiler::profile(&model, a.seconds, a.bench)?;
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_spectrogram(a: SpectrogramArgs) -> Result<(), Failure> {
    require_file(&a.input, "input WAV")?;
    let cfg = preflight(StftConfig::new(a.window, a.hop))?;
    let wave: Waveform<f32> = preflight(read_wav(&a.input))?;
    if wave.len() < a.window {
        return Err(usage(format!(
            "input has {} samples, shorter than one {}-sample window",
            wave.len(),
            a.window
        )));
    }
    let spec = tiger::dsp::stft(&wave, &cfg)?;
    match (a.format, &a.out) {
        (DumpFormat::Csv, Some(path)) => {
            let mut f = std::fs::File::create(path)?;
            tiger::dsp::dump::spectrogram_csv(&spec, &mut f)?;
        }
        (DumpFormat::Csv, None) => {
            let mut out = std::io::stdout().lock();
            tiger::dsp::dump::spectrogram_csv(&spec, &mut out)?;
        }
        (DumpFormat::Pgm, Some(path)) => {
            let mut f = std::fs::File::create(path)?;
            tiger::dsp::dump::spectrogram_pgm(&spec, &mut f)?;
        }
        (DumpFormat::Pgm, None) => {
            return Err(usage("--format pgm needs --out FILE"));
        }
    }
    Ok(())
}
