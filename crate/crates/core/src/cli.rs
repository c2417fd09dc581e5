//! Command-line front end: dataset checks and fixtures, mixture
//! materialization, training, single-file separation and evaluation.
//!
//! Data and output paths go to stdout; diagnostics go to stderr as a
//! single `error: <kind>: <message>` line. Exit code 2 marks usage errors,
//! 1 runtime failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audionet::{separate, Model, ModelConfig};
use crate::datasetio::{build_chunk_index, generate_fixtures, Dataset, FixtureSpec, Split};
use crate::dsp::{self, read_wav, write_wav, WavEncoding, Waveform, CHUNK_SAMPLES, CHUNK_VIDEO_FRAMES, SAMPLE_RATE};
use crate::evaluation::{frozen_test_items, volume_sweep, ExperimentReport, ModelSeparator, Setup, DEFAULT_FILTER_LEN};
use crate::mixer::EVAL_ALPHAS;
use crate::training::{plan_epoch, train, DataPool, TrainConfig};
use crate::visualnet::{read_landmarks, write_landmarks, LandmarkSequence};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const THREADS_ENV: &str = "AVSS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "avss", version, about = "Audio-visual singing voice separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manifest checks and synthetic fixtures.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Materialize curriculum mixtures with their specs.
    Mix(MixArgs),
    /// Train a U-Net or Y-Net-g.
    Train(TrainArgs),
    /// Separate the target voice of one recording.
    Separate(SeparateArgs),
    /// Volume sweep of a checkpoint on a test split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Validate a manifest, its media and its chunk tiling.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Accompaniment manifest; defaults to `accompaniment.jsonl` beside the manifest.
        #[arg(long)]
        accomp: Option<PathBuf>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        chunk_n: u64,
    },
    /// Write a synthetic miniature dataset.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(6..))]
        singers: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    TestSeenHeard,
    TestUnseenUnheard,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::TestSeenHeard => Split::TestSeenHeard,
            SplitArg::TestUnseenUnheard => Split::TestUnseenUnheard,
        }
    }
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = unit_interval)]
    pub remix_pct: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Mixtures to write; defaults to one per voice chunk.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visual {
    Graph,
    None,
}

fn parse_visual(s: &str) -> Result<Visual, String> {
    match s {
        "graph" => Ok(Visual::Graph),
        "none" => Ok(Visual::None),
        "frames" | "rgb" | "video" | "resnet" => Err(format!(
            "'{s}': video-frame visual networks are not supported; use 'graph' (landmark ST-GCN) or 'none'"
        )),
        other => Err(format!("'{other}' is not one of: graph, none")),
    }
}

fn parse_blocks(s: &str) -> Result<usize, String> {
    match s {
        "4" => Ok(4),
        "6" => Ok(6),
        _ => Err(format!("'{s}': blocks must be 4 or 6")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("'{s}': {e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("'{s}': {e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML or JSON file with training and model fields; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_blocks)]
    pub blocks: Option<usize>,
    #[arg(long, value_parser = parse_visual)]
    pub visual: Option<Visual>,
    #[arg(long, value_parser = unit_interval)]
    pub remix_pct: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = positive)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

/// Optional fields read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub blocks: Option<usize>,
    pub visual: Option<Visual>,
    pub remix_pct: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub base_channels: Option<usize>,
    pub max_steps: Option<u64>,
    pub alpha_training: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetupArg {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    Language,
    Split,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub setup: SetupArg,
    #[arg(long, value_parser = positive, value_delimiter = ',', default_value = "0.25,0.5,1,1.25")]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub report: PathBuf,
    /// Test split; both test splits when omitted.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, value_enum, default_value = "language")]
    pub group_by: GroupBy,
    #[arg(long, default_value_t = DEFAULT_FILTER_LEN)]
    pub filter_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Row label; derived from the model configuration when omitted.
    #[arg(long)]
    pub model_id: Option<String>,
}

/// A failure with its error kind for the stderr line.
#[derive(Debug, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

macro_rules! cli_from {
    ($($t:ty => $kind:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($kind, e)
            }
        })*
    };
}

cli_from! {
    crate::datasetio::DatasetError => "dataset",
    crate::training::TrainError => "train",
    crate::evaluation::EvalError => "evaluate",
    crate::audionet::AudioError => "model",
    crate::dsp::DspError => "audio",
    crate::visualnet::VisualError => "landmarks",
    crate::mixer::MixError => "mix",
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    fs::write(path, text + "\n").map_err(io(path))
}

/// Caps rayon's pool from `AVSS_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::new("usage", format!("{THREADS_ENV}='{v}' is not a positive integer")))?;
        // A pool configured earlier in the process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.message.replace('\n', " "));
            if e.kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Dataset(DatasetCommand::Validate {
            manifest,
            accomp,
            chunk_n,
        }) => dataset_validate(&manifest, accomp.as_deref(), chunk_n as usize),
        Command::Dataset(DatasetCommand::Fixtures { out, seed, singers }) => dataset_fixtures(&out, seed, singers as usize),
        Command::Mix(a) => mix(a),
        Command::Train(a) => train_cmd(a),
        Command::Separate(a) => separate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn dataset_validate(manifest: &Path, accomp: Option<&Path>, n: usize) -> Result<(), CliError> {
    let ds = Dataset::open(manifest, accomp)?;
    let index = build_chunk_index(&ds.records, &ds.root, n)?;
    let mut chunks: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &index.entries {
        let split = ds.record(&e.sample_id)?.split.as_str();
        *chunks.entry(split).or_default() += 1;
    }
    let report = json!({
        "manifest": manifest,
        "valid": true,
        "summary": ds.summary(),
        "chunk_n": n,
        "chunks_per_split": chunks,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn dataset_fixtures(out: &Path, seed: u64, singers: usize) -> Result<(), CliError> {
    let spec = FixtureSpec {
        singers,
        ..FixtureSpec::default()
    };
    let manifest = generate_fixtures(&spec, out, seed)?;
    write_json(
        &out.join(RESOLVED_CONFIG),
        &json!({ "command": "dataset fixtures", "out": out, "seed": seed, "spec": spec }),
    )?;
    println!("{}", manifest.display());
    Ok(())
}

fn mix(a: MixArgs) -> Result<(), CliError> {
    let ds = Dataset::open(&a.manifest, None)?;
    let split: Split = a.split.into();
    let pool = DataPool::load(&ds, &ds.split(split), 1)?;
    let config = TrainConfig {
        remix_pct: a.remix_pct,
        seed: a.seed,
        alpha_training: a.alpha,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let entries = pool.voice_entries();
    let count = a.count.unwrap_or(entries.len());
    let mut specs = Vec::with_capacity(count);
    while specs.len() < count {
        specs.extend(plan_epoch(&entries, pool.accomp_pool(), &config, &mut rng)?);
    }
    specs.truncate(count);
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let mut lines = String::new();
    for (i, spec) in specs.iter().enumerate() {
        let (sources, mixture) = pool.mix_sources(spec)?;
        let names = [format!("mix_{i:04}.wav"), format!("target_{i:04}.wav"), format!("target_{i:04}.almk")];
        write_wav(&a.out.join(&names[0]), &mixture, WavEncoding::Float32)?;
        write_wav(&a.out.join(&names[1]), &sources[spec.target_index], WavEncoding::Float32)?;
        write_landmarks(&a.out.join(&names[2]), &pool.voice(spec.target_id())?.landmarks)?;
        let line = json!({ "index": i, "spec": spec, "mix": names[0], "target": names[1], "landmarks": names[2] });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let specs_path = a.out.join("mixtures.jsonl");
    fs::write(&specs_path, lines).map_err(io(&specs_path))?;
    write_json(
        &a.out.join(RESOLVED_CONFIG),
        &json!({
            "command": "mix", "manifest": a.manifest, "split": split.as_str(), "remix_pct": a.remix_pct,
            "alpha": a.alpha, "seed": a.seed, "count": count, "out": a.out,
        }),
    )?;
    println!("{}", specs_path.display());
    Ok(())
}

fn read_train_file(path: &Path) -> Result<TrainFile, CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::new("usage", format!("{}: {e}", path.display())))
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve_train(a: &TrainArgs, file: &TrainFile) -> Result<ResolvedTrain, CliError> {
    let d = TrainConfig::default();
    let blocks = a.blocks.or(file.blocks).unwrap_or(6);
    if blocks != 4 && blocks != 6 {
        return Err(CliError::new("usage", format!("blocks must be 4 or 6, got {blocks}")));
    }
    let visual = a.visual.or(file.visual).unwrap_or(Visual::Graph);
    let base = a.base_channels.or(file.base_channels).unwrap_or(32);
    let train = TrainConfig {
        learning_rate: a.lr.or(file.learning_rate).unwrap_or(d.learning_rate),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        max_epochs: a.epochs.or(file.epochs).unwrap_or(d.max_epochs),
        remix_pct: a.remix_pct.or(file.remix_pct).unwrap_or(d.remix_pct),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        alpha_training: file.alpha_training.unwrap_or(d.alpha_training),
        max_steps: a.max_steps.or(file.max_steps),
    };
    train.validate().map_err(|e| CliError::new("usage", e))?;
    let model = ModelConfig::with_base(blocks, base, visual == Visual::Graph);
    model.validate().map_err(|e| CliError::new("usage", e))?;
    Ok(ResolvedTrain {
        manifest: a.manifest.clone(),
        out: a.out.clone(),
        model,
        train,
    })
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => read_train_file(p)?,
        None => TrainFile::default(),
    };
    let r = resolve_train(&a, &file)?;
    let ds = Dataset::open(&r.manifest, None)?;
    let train_pool = DataPool::load(&ds, &ds.split(Split::Train), 1)?;
    let val_pool = DataPool::load(&ds, &ds.split(Split::Val), 1)?;
    fs::create_dir_all(&r.out).map_err(io(&r.out))?;
    write_json(&r.out.join(RESOLVED_CONFIG), &r)?;
    let mut model = Model::new(r.model.clone(), r.train.seed)?;
    let summary = train(&mut model, &train_pool, &val_pool, &r.train, &r.out)?;
    write_json(&r.out.join("train_summary.json"), &summary)?;
    println!("{}", summary.checkpoint.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Repeats the last frame or truncates so the clip spans `frames`.
fn fit_frames(seq: &LandmarkSequence, frames: usize) -> Result<LandmarkSequence, CliError> {
    let w = seq.n_nodes() * 2;
    if seq.frames() == 0 {
        return Err(CliError::new("landmarks", "landmark clip has no frames"));
    }
    let mut coords = seq.coords()[..seq.frames().min(frames) * w].to_vec();
    while coords.len() < frames * w {
        let last = coords[coords.len() - w..].to_vec();
        coords.extend(last);
    }
    Ok(LandmarkSequence::with_nodes(frames, seq.n_nodes(), coords)?)
}

/// Separates a recording of any length in 4 s chunks; the last chunk is
/// zero-padded and the output trimmed to the input duration.
pub fn separate_file(model: &Model, audio: &Waveform, landmarks: Option<&LandmarkSequence>) -> Result<Waveform, CliError> {
    let wave = if audio.sample_rate == SAMPLE_RATE {
        audio.clone()
    } else {
        dsp::resample(audio, SAMPLE_RATE)?
    };
    let chunks = wave.len().div_ceil(CHUNK_SAMPLES).max(1);
    let mut padded = wave.samples.clone();
    padded.resize(chunks * CHUNK_SAMPLES, 0.0);
    let lm = match (model.config().use_visual, landmarks) {
        (true, Some(l)) => Some(fit_frames(l, chunks * CHUNK_VIDEO_FRAMES)?),
        (true, None) => return Err(CliError::new("usage", "this model needs --landmarks")),
        (false, _) => None,
    };
    let mut out = Vec::with_capacity(padded.len());
    for c in 0..chunks {
        let seg = Waveform::new(padded[c * CHUNK_SAMPLES..(c + 1) * CHUNK_SAMPLES].to_vec(), SAMPLE_RATE)?;
        let clip = match &lm {
            Some(l) => Some(l.slice_frames(c * CHUNK_VIDEO_FRAMES, CHUNK_VIDEO_FRAMES)?),
            None => None,
        };
        out.extend(separate(&seg, clip.as_ref(), model)?.samples);
    }
    out.truncate(wave.len());
    let est = Waveform::new(out, SAMPLE_RATE)?;
    if audio.sample_rate == SAMPLE_RATE {
        Ok(est)
    } else {
        let mut back = dsp::resample(&est, audio.sample_rate)?;
        back.samples.resize(audio.len(), 0.0);
        Ok(back)
    }
}

fn separate_cmd(a: SeparateArgs) -> Result<(), CliError> {
    let (model, _) = Model::load(&a.model)?;
    let audio = read_wav(&a.audio)?;
    let landmarks = a.landmarks.as_deref().map(read_landmarks).transpose()?;
    let est = separate_file(&model, &audio, landmarks.as_ref())?;
    write_wav(&a.out, &est, WavEncoding::Float32)?;
    write_json(
        &sibling(&a.out, ".config.json"),
        &json!({ "command": "separate", "model": a.model, "audio": a.audio, "landmarks": a.landmarks, "out": a.out }),
    )?;
    println!("{}", a.out.display());
    Ok(())
}

fn model_label(c: &ModelConfig) -> String {
    let kind = if c.use_visual { "ynet_g" } else { "unet" };
    format!("{kind}{}_c{}", c.num_blocks, c.base_channels)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), CliError> {
    if a.filter_len == 0 {
        return Err(CliError::new("usage", "--filter-len must be positive"));
    }
    let (model, _) = Model::load(&a.model)?;
    let ds = Dataset::open(&a.manifest, None)?;
    let splits: Vec<Split> = match a.split {
        Some(s) => vec![s.into()],
        None => vec![Split::TestSeenHeard, Split::TestUnseenUnheard],
    };
    let records: Vec<_> = ds.records.iter().filter(|r| splits.contains(&r.split)).collect();
    let pool = DataPool::load(&ds, &records, 1)?;
    let group_of = |v: &crate::mixer::VoiceEntry| {
        let r = ds.record(&v.sample_id).expect("pool built from the manifest");
        match a.group_by {
            GroupBy::Language => r.language.as_str().to_string(),
            GroupBy::Split => r.split.as_str().to_string(),
        }
    };
    let setup = match a.setup {
        SetupArg::One => Setup::OneVoice,
        SetupArg::Two => Setup::TwoVoices,
    };
    let items = frozen_test_items(&pool, setup, a.seed, group_of)?;
    let id = a.model_id.clone().unwrap_or_else(|| model_label(model.config()));
    let report: ExperimentReport =
        volume_sweep(&ModelSeparator(&model), &id, &pool, &items, &a.alphas, setup, a.filter_len)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    report.write(&a.report)?;
    write_json(
        &sibling(&a.report, ".config.json"),
        &json!({
            "command": "evaluate", "model": a.model, "manifest": a.manifest, "setup": setup,
            "alphas": a.alphas, "splits": splits.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            "group_by": format!("{:?}", a.group_by).to_lowercase(), "filter_len": a.filter_len,
            "seed": a.seed, "model_id": id, "report": a.report,
        }),
    )?;
    println!("{}", a.report.display());
    Ok(())
}

/// The α grid used when `--alphas` is omitted.
pub fn default_alphas() -> Vec<f64> {
    EVAL_ALPHAS.to_vec()
}
