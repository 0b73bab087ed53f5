//! Command-line surface binding the pipeline modules: simulation,
//! transmission estimation, training, inference, evaluation, and gradient
//! verification.
//!
//! Flags override config-file keys, which override defaults, and every run
//! prints the fully resolved configuration it executes under. Exit codes
//! are a stable scripting contract: 0 success, 2 usage or validation,
//! 3 I/O failure, 4 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::imagio::{load_image, save_image, Image, ImageError};
use crate::metrics::{MetricError, MetricReport};
use crate::model::{model_forward, ModelConfig, ModelError};
use crate::physics::{
    degrade, estimate_rmt, make_depth, transmission_from_depth, DepthKind, WaterParams,
};
use crate::rng::SeedStream;
use crate::train::{
    load_checkpoint, synth_clean, train, validate_model_structure, DatasetSpec, PairedDataset,
    SynthRanges, TrainConfig, TrainError,
};
use crate::verify::{run_suite, Precision, VerifyError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
        TrainError::Io(_)
        | TrainError::Image(_)
        | TrainError::ChecksumMismatch
        | TrainError::Corrupt(_) => CliError::Io(e.to_string()),
        TrainError::DatasetEmpty
        | TrainError::InvalidRange(_)
        | TrainError::InvalidConfig(_)
        | TrainError::VersionUnsupported(_)
        | TrainError::ConfigMismatch(_) => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

fn metric_err(e: MetricError) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "atdcnet", version, about = "Underwater image enhancement toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Degrade clean scenes through the underwater scattering model
    Simulate(SimulateArgs),
    /// Estimate the reverse-medium-transmission map of one image
    Rmt(RmtArgs),
    /// Train the enhancement network
    Train(TrainArgs),
    /// Enhance images with a trained checkpoint
    Enhance(EnhanceArgs),
    /// Score images, with or without reference images
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

/// Per-channel value triple parsed from `r,g,b`.
#[derive(Clone, Copy, Debug)]
pub struct Rgb(pub [f32; 3]);

impl FromStr for Rgb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("{s:?}: expected three comma-separated values r,g,b"));
        }
        let mut out = [0f32; 3];
        for (slot, part) in out.iter_mut().zip(&parts) {
            *slot = part.trim().parse::<f32>().map_err(|e| format!("{part:?}: {e}"))?;
        }
        Ok(Rgb(out))
    }
}

impl Display for Rgb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Flat `key = value` configuration file; `#` starts a comment line.
#[derive(Debug, Default)]
struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<ConfigFile, CliError> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config {} line {}: expected key = value",
                    path.display(),
                    idx + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { entries })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key {key} = {raw:?}: {e}"))),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T, CliError>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn resolve_opt<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => file.get(key)?,
    })
}

fn resolve_switch(flag: bool, file: &ConfigFile, key: &str) -> Result<bool, CliError> {
    Ok(flag || file.get::<bool>(key)?.unwrap_or(false))
}

fn require<T>(v: Option<T>, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("{key} is required (flag or config key)")))
}

fn or_word<T: Display>(v: &Option<T>, word: &str) -> String {
    match v {
        Some(x) => x.to_string(),
        None => format!("({word})"),
    }
}

fn print_config(command: &str, lines: &[(&str, String)]) {
    println!("resolved config:");
    println!("  command = {command}");
    for (key, value) in lines {
        println!("  {key} = {value}");
    }
}

/// Image files (png/ppm) in one directory as sorted (stem, path) pairs.
fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm"))
        })
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (stem, p)
        })
        .collect())
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Rmt(args) => cmd_rmt(args),
        Command::Train(args) => cmd_train(args),
        Command::Enhance(args) => cmd_enhance(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Directory of clean input images
    #[arg(long, conflicts_with = "procedural")]
    pub input: Option<PathBuf>,
    /// Generate this many procedural clean scenes instead
    #[arg(long)]
    pub procedural: Option<usize>,
    /// Output directory; receives clean/, degraded/, and manifest.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fixed attenuation r,g,b; sampled per image when absent
    #[arg(long)]
    pub beta: Option<Rgb>,
    /// Fixed airlight r,g,b; sampled per image when absent
    #[arg(long)]
    pub airlight: Option<Rgb>,
    /// Depth field kind (ramp|radial|noise); sampled per image when absent
    #[arg(long)]
    pub depth: Option<DepthKind>,
    /// Maximum scene depth
    #[arg(long)]
    pub d_max: Option<f32>,
    /// Procedural scene side length in pixels
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key=value file supplying values for absent flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Water and depth parameters of one simulated image, enough to rebuild
/// its transmission map exactly.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub beta: [f32; 3],
    pub airlight: [f32; 3],
    pub depth: String,
    pub depth_seed: u64,
    pub d_max: f32,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let input = resolve_opt(args.input, &file, "input")?;
    let procedural = resolve_opt(args.procedural, &file, "procedural")?;
    let out: PathBuf = require(resolve_opt(args.out, &file, "out")?, "out")?;
    let beta = resolve_opt(args.beta, &file, "beta")?;
    let airlight = resolve_opt(args.airlight, &file, "airlight")?;
    let depth = resolve_opt(args.depth, &file, "depth")?;
    let d_max = resolve(args.d_max, &file, "d_max", 3.0f32)?;
    let size = resolve(args.size, &file, "size", 64usize)?;
    let seed = resolve(args.seed, &file, "seed", 0u64)?;

    match (&input, &procedural) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("input and procedural are mutually exclusive".into()))
        }
        (None, None) => {
            return Err(CliError::Usage("one of input or procedural is required".into()))
        }
        _ => {}
    }
    print_config(
        "simulate",
        &[
            ("input", or_word(&input.as_deref().map(Path::display), "none")),
            ("procedural", or_word(&procedural, "none")),
            ("out", out.display().to_string()),
            ("beta", or_word(&beta, "sampled per image")),
            ("airlight", or_word(&airlight, "sampled per image")),
            ("depth", or_word(&depth, "sampled per image")),
            ("d_max", d_max.to_string()),
            ("size", size.to_string()),
            ("seed", seed.to_string()),
        ],
    );

    let ranges = SynthRanges::default();
    // Vet user-supplied physics early, before touching the file system; a
    // sampled value never violates these checks because the default
    // ranges are themselves validated.
    WaterParams::new(
        beta.map_or([1.0; 3], |r| r.0),
        airlight.map_or([0.5; 3], |r| r.0),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    make_depth(DepthKind::Ramp, 2, 2, d_max, 0).map_err(|e| CliError::Usage(e.to_string()))?;

    let root = SeedStream::new(seed);
    let scene_stream = root.child(1);
    let water_stream = root.child(2);

    let sources: Vec<(String, Image)> = match (&input, procedural) {
        (Some(dir), _) => {
            let listed = list_images(dir)?;
            if listed.is_empty() {
                return Err(CliError::Usage(format!("no png/ppm images in {}", dir.display())));
            }
            listed
                .into_iter()
                .map(|(name, path)| Ok((name, load_image(&path)?)))
                .collect::<Result<_, CliError>>()?
        }
        (None, Some(count)) => {
            if count == 0 {
                return Err(CliError::Usage("procedural count must be at least 1".into()));
            }
            (0..count)
                .map(|i| {
                    let mut rng = scene_stream.child(i as u64);
                    let img = synth_clean(&mut rng, size).map_err(train_err)?;
                    Ok((format!("sim_{i:03}"), img))
                })
                .collect::<Result<_, CliError>>()?
        }
        (None, None) => unreachable!("validated above"),
    };

    fs::create_dir_all(out.join("clean"))?;
    fs::create_dir_all(out.join("degraded"))?;
    let mut entries = Vec::with_capacity(sources.len());
    for (i, (name, clean)) in sources.iter().enumerate() {
        let mut rng = water_stream.child(i as u64);
        let mut b = [0f32; 3];
        let mut a = [0f32; 3];
        for c in 0..3 {
            b[c] = rng.range_f32(ranges.beta_lo[c], ranges.beta_hi[c]);
            a[c] = rng.range_f32(ranges.airlight_lo[c], ranges.airlight_hi[c]);
        }
        let b = beta.map_or(b, |r| r.0);
        let a = airlight.map_or(a, |r| r.0);
        let kind = depth.unwrap_or(match rng.below(3) {
            0 => DepthKind::Ramp,
            1 => DepthKind::Radial,
            _ => DepthKind::Noise,
        });
        let depth_seed = rng.next_u64();
        let water = WaterParams::new(b, a).map_err(|e| CliError::Usage(e.to_string()))?;
        let field = make_depth(kind, clean.height(), clean.width(), d_max, depth_seed)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let t = transmission_from_depth(&water, &field);
        let degraded = degrade(clean, &water, &t).map_err(|e| CliError::Numeric(e.to_string()))?;
        save_image(clean, out.join("clean").join(format!("{name}.png")))?;
        save_image(&degraded, out.join("degraded").join(format!("{name}.png")))?;
        entries.push(ManifestEntry {
            name: name.clone(),
            beta: b,
            airlight: a,
            depth: kind.to_string(),
            depth_seed,
            d_max,
        });
    }
    let manifest = Manifest { seed, entries };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join("manifest.json"), json + "\n")?;
    println!("wrote {} image pairs and manifest.json to {}", sources.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct RmtArgs {
    /// Input image (png or ppm)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output grayscale image
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dark-channel window side length (odd)
    #[arg(long)]
    pub patch: Option<usize>,
    /// Flat key=value file supplying values for absent flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn cmd_rmt(args: RmtArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let input: PathBuf = require(resolve_opt(args.input, &file, "input")?, "input")?;
    let out: PathBuf = require(resolve_opt(args.out, &file, "out")?, "out")?;
    let patch = resolve(args.patch, &file, "patch", 15usize)?;
    print_config(
        "rmt",
        &[
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
            ("patch", patch.to_string()),
        ],
    );

    let img = load_image(&input)?;
    let map = estimate_rmt(&img, patch).map_err(|e| CliError::Usage(e.to_string()))?;
    save_image(&map.to_image(), &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Paired data directory containing degraded/ and clean/
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many generated synthetic pairs instead
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Synthetic scene side length in pixels
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub ca_reduction: Option<usize>,
    /// Disable channel attention
    #[arg(long)]
    pub no_ca: bool,
    /// Disable multi-stage feature fusion
    #[arg(long)]
    pub no_fusion: bool,
    /// Disable the transmission-guidance branch
    #[arg(long)]
    pub no_atm: bool,
    /// Disable the color-coefficient branch
    #[arg(long)]
    pub no_dcm: bool,
    /// Output directory; receives latest.ckpt, final.ckpt, train_log.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from a saved checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Flat key=value file supplying values for absent flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let (data, synthetic) = if args.data.is_some() || args.synthetic.is_some() {
        (args.data, args.synthetic)
    } else {
        let d: Option<PathBuf> = file.get("data")?;
        let s: Option<usize> = file.get("synthetic")?;
        if d.is_some() && s.is_some() {
            return Err(CliError::Usage("config sets both data and synthetic".into()));
        }
        (d, s)
    };
    let size = resolve(args.size, &file, "size", 64usize)?;
    let epochs = resolve(args.epochs, &file, "epochs", 50usize)?;
    let batch_size = resolve(args.batch_size, &file, "batch_size", 4usize)?;
    let lr = resolve(args.lr, &file, "lr", 2e-4f64)?;
    let crop_size = resolve(args.crop_size, &file, "crop_size", 64usize)?;
    let seed = resolve(args.seed, &file, "seed", 0u64)?;
    let defaults = ModelConfig::default();
    let base_channels = resolve(args.base_channels, &file, "base_channels", defaults.base_channels)?;
    let ca_reduction = resolve(args.ca_reduction, &file, "ca_reduction", defaults.ca_reduction)?;
    let no_ca = resolve_switch(args.no_ca, &file, "no_ca")?;
    let no_fusion = resolve_switch(args.no_fusion, &file, "no_fusion")?;
    let no_atm = resolve_switch(args.no_atm, &file, "no_atm")?;
    let no_dcm = resolve_switch(args.no_dcm, &file, "no_dcm")?;
    let out: PathBuf = require(resolve_opt(args.out, &file, "out")?, "out")?;
    let resume = resolve_opt(args.resume, &file, "resume")?;

    let dataset = match (&data, synthetic) {
        (Some(dir), _) => DatasetSpec::Dirs {
            degraded: dir.join("degraded"),
            reference: dir.join("clean"),
        },
        (None, Some(count)) => {
            DatasetSpec::Synthetic { count, size, ranges: SynthRanges::default() }
        }
        (None, None) => DatasetSpec::Synthetic { count: 200, size, ranges: SynthRanges::default() },
    };
    let config = TrainConfig {
        seed,
        epochs,
        batch_size,
        learning_rate: lr,
        crop_size,
        model: ModelConfig {
            base_channels,
            ca_reduction,
            use_ca: !no_ca,
            use_fusion: !no_fusion,
            use_atm: !no_atm,
            use_dcm: !no_dcm,
            ..defaults
        },
        ..TrainConfig::default()
    };
    let config = TrainConfig { dataset, ..config };

    let dataset_line = match &config.dataset {
        DatasetSpec::Dirs { degraded, .. } => {
            let dir = degraded.parent().unwrap_or(Path::new(""));
            format!("dirs {}", dir.display())
        }
        DatasetSpec::Synthetic { count, size, .. } => format!("synthetic {count} @ {size}px"),
    };
    print_config(
        "train",
        &[
            ("dataset", dataset_line),
            ("epochs", epochs.to_string()),
            ("batch_size", batch_size.to_string()),
            ("lr", lr.to_string()),
            ("crop_size", crop_size.to_string()),
            ("seed", seed.to_string()),
            ("base_channels", base_channels.to_string()),
            ("ca_reduction", ca_reduction.to_string()),
            ("use_ca", (!no_ca).to_string()),
            ("use_fusion", (!no_fusion).to_string()),
            ("use_atm", (!no_atm).to_string()),
            ("use_dcm", (!no_dcm).to_string()),
            ("out", out.display().to_string()),
            ("resume", or_word(&resume.as_deref().map(Path::display), "none")),
        ],
    );

    let log = train(&config, &out, resume.as_deref()).map_err(train_err)?;
    for rec in &log.epochs {
        println!(
            "epoch {:>3}: total {:.5}  l2 {:.5}  perceptual {:.5}  ssim {:.5}  ({} batches)",
            rec.epoch, rec.mean_total, rec.mean_l2, rec.mean_perceptual, rec.mean_ssim, rec.batches
        );
    }
    log.write_jsonl(&out.join("train_log.jsonl")).map_err(train_err)?;
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Directory of degraded input images
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output directory; file names mirror the inputs
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key=value file supplying values for absent flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn cmd_enhance(args: EnhanceArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let input: PathBuf = require(resolve_opt(args.input, &file, "input")?, "input")?;
    let ckpt_path: PathBuf = require(resolve_opt(args.ckpt, &file, "ckpt")?, "ckpt")?;
    let out: PathBuf = require(resolve_opt(args.out, &file, "out")?, "out")?;
    print_config(
        "enhance",
        &[
            ("input", input.display().to_string()),
            ("ckpt", ckpt_path.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );

    let mut ckpt = load_checkpoint(&ckpt_path).map_err(train_err)?;
    validate_model_structure(&ckpt.store, &ckpt.meta.model).map_err(train_err)?;
    let listed = list_images(&input)?;
    if listed.is_empty() {
        return Err(CliError::Usage(format!("no png/ppm images in {}", input.display())));
    }
    fs::create_dir_all(&out)?;
    for (_, path) in &listed {
        let img = load_image(path)?;
        let trace = model_forward(&mut ckpt.store, &ckpt.meta.model, &img).map_err(model_err)?;
        let name = path.file_name().expect("listed files have names");
        save_image(&trace.output, out.join(name))?;
    }
    println!("enhanced {} images into {}", listed.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of images to score
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of reference images with matching file names
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Comma-separated subset of mse,psnr,ssim,uiqm,uciqe
    #[arg(long)]
    pub metrics: Option<String>,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Flat key=value file supplying values for absent flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const METRIC_NAMES: [&str; 5] = ["mse", "psnr", "ssim", "uiqm", "uciqe"];

fn parse_metrics(raw: &str) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let name = part.trim().to_ascii_lowercase();
        if name.is_empty() {
            continue;
        }
        if !METRIC_NAMES.contains(&name.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown metric {name:?}, expected any of {}",
                METRIC_NAMES.join(", ")
            )));
        }
        if !out.contains(&name) {
            out.push(name);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("metric list is empty".into()));
    }
    Ok(out)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let pred: PathBuf = require(resolve_opt(args.pred, &file, "pred")?, "pred")?;
    let reference = resolve_opt(args.reference, &file, "ref")?;
    let metrics_raw = resolve_opt(args.metrics, &file, "metrics")?;
    let report_path = resolve_opt(args.report, &file, "report")?;

    let metrics = match &metrics_raw {
        Some(raw) => parse_metrics(raw)?,
        None if reference.is_some() => METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
        None => vec!["uiqm".to_string(), "uciqe".to_string()],
    };
    print_config(
        "evaluate",
        &[
            ("pred", pred.display().to_string()),
            ("ref", or_word(&reference.as_deref().map(Path::display), "none")),
            ("metrics", metrics.join(",")),
            ("report", or_word(&report_path.as_deref().map(Path::display), "stdout")),
        ],
    );

    let wants = |m: &str| metrics.iter().any(|x| x == m);
    let needed_ref: Vec<&str> =
        ["mse", "psnr", "ssim"].into_iter().filter(|m| wants(m)).collect();
    if !needed_ref.is_empty() && reference.is_none() {
        return Err(CliError::Usage(format!(
            "metrics {} require --ref",
            needed_ref.join(", ")
        )));
    }

    let entries: Vec<(String, Image, Option<Image>)> = match &reference {
        Some(rdir) if !needed_ref.is_empty() => PairedDataset::from_dirs(&pred, rdir)
            .map_err(train_err)?
            .iter()
            .map(|(name, p, r)| (name.clone(), p.clone(), Some(r.clone())))
            .collect(),
        _ => list_images(&pred)?
            .into_iter()
            .map(|(name, path)| Ok((name, load_image(&path)?, None)))
            .collect::<Result<_, CliError>>()?,
    };
    if entries.is_empty() {
        return Err(CliError::Usage(format!("no png/ppm images in {}", pred.display())));
    }

    let mut report = MetricReport::build(&entries).map_err(metric_err)?;
    if !wants("mse") {
        report.aggregate.mse = None;
        for im in &mut report.images {
            im.mse = None;
        }
    }
    if !wants("psnr") {
        report.aggregate.psnr = None;
        for im in &mut report.images {
            im.psnr = None;
        }
    }
    if !wants("ssim") {
        report.aggregate.ssim = None;
        for im in &mut report.images {
            im.ssim = None;
        }
    }

    let mut summary = String::from("aggregate:");
    for m in &metrics {
        let v = match m.as_str() {
            "mse" => report.aggregate.mse,
            "psnr" => report.aggregate.psnr,
            "ssim" => report.aggregate.ssim,
            "uiqm" => Some(report.aggregate.uiqm),
            _ => Some(report.aggregate.uciqe),
        };
        if let Some(v) = v {
            summary.push_str(&format!("  {m} {v}"));
        }
    }
    let json = report.to_json();
    match &report_path {
        Some(path) => {
            fs::write(path, json + "\n")?;
            println!("{summary}");
            println!("wrote {}", path.display());
        }
        None => {
            println!("{json}");
            println!("{summary}");
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// single or double
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Corrupt one operation's analytic gradient (negative-control hook)
    #[arg(long, hide = true)]
    pub fault: Option<String>,
    /// Flat key=value file supplying values for absent flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let seed = resolve(args.seed, &file, "seed", 0u64)?;
    let precision = resolve(args.precision, &file, "precision", Precision::Double)?;
    print_config(
        "gradcheck",
        &[
            ("seed", seed.to_string()),
            ("precision", precision.label().to_string()),
            ("fault", or_word(&args.fault, "none")),
        ],
    );

    let report = run_suite(seed, precision, args.fault.as_deref()).map_err(|e| match e {
        VerifyError::UnknownOp(_) => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    })?;
    println!(
        "gradient check: {} precision, tolerance {:e}",
        report.precision.label(),
        report.tolerance
    );
    for entry in &report.entries {
        let verdict = if entry.max_rel < report.tolerance { "ok" } else { "FAIL" };
        println!(
            "  {:<22} max rel {:>10.3e}  {:>3} probes  {}",
            entry.name, entry.max_rel, entry.probes, verdict
        );
    }
    if report.passed() {
        println!("all {} operations within tolerance", report.entries.len());
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {}",
            report.failed_ops().join(", ")
        )))
    }
}
