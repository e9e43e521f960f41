//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, config file or value
//! ranges), 2 runtime failure. Verbosity follows the `TNET_LOG` environment
//! variable (`error`, `warn`, `info`, `debug`; default `info`). Every
//! command logs its fully resolved configuration and seed first.
//!
//! # Config file
//!
//! `train --config run.toml` reads a flat TOML document. Unknown keys are
//! rejected. Keys, grouped by what they configure:
//!
//! * `preset`: `full`, `desk` (default) or `micro`, applied first
//! * network: `m`, `n`, `base_channels`, `rdb_growth`, `rdb_layers`
//! * stacking: `stages`, `share_parameters`
//! * training: `batch_size`, `epochs`, `lr0`, `halve_every`,
//!   `lr_floor_epoch`, `lr_floor`, `adam_beta1`, `adam_beta2`, `adam_eps`,
//!   `crop`, `flip`, `seed`, `holdout_percent`
//! * loss: `lambda`, `extractor` (`random` or `vgg16`), `extractor_seed`,
//!   `vgg_weights`
//!
//! Command-line flags override file values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::haze::{build_dataset, list_pngs, write_scenes, DepthKind, Manifest, SynthConfig};
use crate::image::ImageBuffer;
use crate::losses::FeatureExtractorSpec;
use crate::metrics::MetricReport;
use crate::train::{train, Preset, RunConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};

#[derive(Debug, Parser)]
#[command(name = "tnet", version, about = "T-Net / Stack T-Net single-image dehazing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render procedural clean scenes to use as synthesis sources.
    Scenes(ScenesArgs),
    /// Build a paired hazy/clean dataset from clean PNG images.
    Synthesize(SynthesizeArgs),
    /// Train a Stack T-Net on a synthesized dataset.
    Train(TrainArgs),
    /// Dehaze PNG images with a trained checkpoint.
    Dehaze(DehazeArgs),
    /// Compute PSNR/SSIM between prediction and ground-truth directories.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Directory of clean PNG images.
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scattering coefficient range `low,high`.
    #[arg(long, default_value = "0.4,1.6", value_parser = parse_range)]
    pub beta_range: (f64, f64),
    /// Airlight range `low,high`.
    #[arg(long, default_value = "0.7,1.0", value_parser = parse_range)]
    pub airlight_range: (f64, f64),
    /// Comma-separated depth kinds.
    #[arg(long, default_value = "ramp,radial,smooth-noise", value_delimiter = ',')]
    pub depth_kinds: Vec<DepthKind>,
    /// Square crop side taken from each source image.
    #[arg(long, default_value_t = 64, conflicts_with = "full_size")]
    pub crop: usize,
    /// Keep whole source images instead of cropping.
    #[arg(long)]
    pub full_size: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Frozen seeded random conv pyramid.
    Random,
    /// Pretrained VGG-16 from a safetensors file.
    Vgg16,
}

/// Flat configuration document; every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub base_channels: Option<usize>,
    pub rdb_growth: Option<usize>,
    pub rdb_layers: Option<usize>,
    pub stages: Option<usize>,
    pub share_parameters: Option<bool>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr0: Option<f64>,
    pub halve_every: Option<usize>,
    pub lr_floor_epoch: Option<usize>,
    pub lr_floor: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub crop: Option<usize>,
    pub flip: Option<bool>,
    pub seed: Option<u64>,
    pub holdout_percent: Option<u32>,
    pub lambda: Option<f64>,
    pub extractor: Option<ExtractorKind>,
    pub extractor_seed: Option<u64>,
    pub vgg_weights: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `other`'s set keys win.
    pub fn merged(mut self, other: &ConfigFile) -> Self {
        overlay!(self, other; preset, m, n, base_channels, rdb_growth, rdb_layers, stages,
            share_parameters, batch_size, epochs, lr0, halve_every, lr_floor_epoch, lr_floor,
            adam_beta1, adam_beta2, adam_eps, crop, flip, seed, holdout_percent, lambda,
            extractor, extractor_seed, vgg_weights);
        self
    }

    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::preset(self.preset.unwrap_or(Preset::Desk));
        let (model, stack, tr, loss) = (&mut cfg.model, &mut cfg.stack, &mut cfg.train, &mut cfg.loss);
        macro_rules! set {
            ($dst:expr, $($field:ident),*) => { $( if let Some(v) = self.$field.clone() { $dst.$field = v; } )* };
        }
        set!(model, m, n, base_channels, rdb_growth, rdb_layers);
        set!(stack, share_parameters);
        set!(tr, batch_size, epochs, lr0, halve_every, lr_floor_epoch, lr_floor, adam_beta1,
            adam_beta2, adam_eps, crop, flip, seed, holdout_percent);
        set!(loss, lambda);
        let kind = self.extractor.or(match &loss.extractor {
            FeatureExtractorSpec::FixedRandomPyramid { .. } => None,
            FeatureExtractorSpec::PretrainedVgg16 { .. } => Some(ExtractorKind::Vgg16),
        });
        loss.extractor = match kind.unwrap_or(ExtractorKind::Random) {
            ExtractorKind::Random => match (self.extractor_seed, &loss.extractor) {
                (Some(seed), _) => FeatureExtractorSpec::FixedRandomPyramid { seed },
                (None, FeatureExtractorSpec::FixedRandomPyramid { seed }) => {
                    FeatureExtractorSpec::FixedRandomPyramid { seed: *seed }
                }
                (None, _) => FeatureExtractorSpec::default(),
            },
            ExtractorKind::Vgg16 => {
                let weights = match (&self.vgg_weights, &loss.extractor) {
                    (Some(p), _) => p.clone(),
                    (None, FeatureExtractorSpec::PretrainedVgg16 { weights }) => weights.clone(),
                    (None, _) => {
                        return Err(Error::Config("the vgg16 extractor needs `vgg_weights`".into()))
                    }
                };
                FeatureExtractorSpec::PretrainedVgg16 { weights }
            }
        };
        if let Some(k) = self.stages {
            cfg.set_stages(k);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or its manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint (only `--epochs` may change).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    /// Give every stage its own parameters.
    #[arg(long)]
    pub unshared: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub holdout_percent: Option<u32>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorKind>,
    #[arg(long)]
    pub vgg_weights: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Full,
    Desk,
    Micro,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Micro => Preset::Micro,
        }
    }
}

impl TrainArgs {
    fn overrides(&self) -> ConfigFile {
        ConfigFile {
            preset: self.preset.map(Preset::from),
            m: self.m,
            n: self.n,
            base_channels: self.base_channels,
            stages: self.stages,
            share_parameters: self.unshared.then_some(false),
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr0: self.lr0,
            crop: self.crop,
            seed: self.seed,
            holdout_percent: self.holdout_percent,
            lambda: self.lambda,
            extractor: self.extractor,
            vgg_weights: self.vgg_weights.clone(),
            ..ConfigFile::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every stage output as `<name>_stage<k>.png`.
    #[arg(long)]
    pub save_stages: bool,
    /// Unroll a different number of stages than the checkpoint was trained
    /// with (shared-parameter models only).
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory for `metrics.txt` and `metrics.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate the pairs that exist instead of failing on unpaired files.
    #[arg(long)]
    pub allow_partial: bool,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `low,high`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn log_resolved<T: Serialize>(command: &str, config: &T, seed: Option<u64>) {
    let json = serde_json::to_string(config).unwrap_or_default();
    match seed {
        Some(s) => log::info!("{command}: resolved config {json} seed {s}"),
        None => log::info!("{command}: resolved config {json} seed none"),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Scenes(a) => cmd_scenes(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Train(a) => cmd_train(a),
        Command::Dehaze(a) => cmd_dehaze(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn cmd_scenes(a: ScenesArgs) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        out: &'a Path,
        count: usize,
        size: usize,
    }
    log_resolved("scenes", &Resolved { out: &a.out, count: a.count, size: a.size }, Some(a.seed));
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    let files = write_scenes(&a.out, a.count, a.size, a.seed)?;
    println!("wrote {} scenes to {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_synthesize(a: SynthesizeArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        count: a.count,
        beta_range: a.beta_range,
        airlight_range: a.airlight_range,
        depth_kinds: a.depth_kinds.clone(),
        crop: (!a.full_size).then_some(a.crop),
        seed: a.seed,
    };
    log_resolved("synthesize", &cfg, Some(cfg.seed));
    cfg.validate().map_err(usage)?;
    if !a.clean.is_dir() {
        return Err(usage(format!("--clean {} is not a directory", a.clean.display())));
    }
    let manifest = build_dataset(&a.clean, &a.out, &cfg)?;
    let mut per_kind = std::collections::BTreeMap::new();
    for r in &manifest.records {
        *per_kind.entry(r.depth_kind.as_str()).or_insert(0usize) += 1;
    }
    println!("wrote {} pairs and {}", manifest.len(), a.out.join(crate::haze::MANIFEST_FILE).display());
    for (k, n) in per_kind {
        println!("  {k}: {n}");
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let overrides = a.overrides();
    let (cfg, resume) = match &a.resume {
        Some(path) => {
            let only_epochs = ConfigFile {
                epochs: overrides.epochs,
                ..ConfigFile::default()
            };
            if a.config.is_some() || overrides != only_epochs {
                return Err(usage("only --epochs may be combined with --resume"));
            }
            let ck = Checkpoint::load(path)?;
            let mut cfg = ck.config.clone();
            if let Some(e) = overrides.epochs {
                cfg.train.epochs = e;
            }
            (cfg, Some(ck))
        }
        None => {
            let file = match &a.config {
                Some(p) => ConfigFile::load(p).map_err(usage)?,
                None => ConfigFile::default(),
            };
            (file.merged(&overrides).resolve().map_err(usage)?, None)
        }
    };
    log_resolved("train", &cfg, Some(cfg.train.seed));
    if let Some(ck) = &resume {
        log::info!("resuming at epoch {} (step {})", ck.epoch, ck.step);
    }
    let manifest = Manifest::load(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cfg_path = a.out.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).map_err(Error::from)?)
        .map_err(|e| Error::io(&cfg_path, e))?;
    let outcome = train(&manifest, &cfg, &a.out, resume)?;
    println!(
        "trained {} epochs ({} steps); log {}, checkpoints {} and {}",
        outcome.epochs_completed,
        outcome.steps,
        a.out.join(LOG_FILE).display(),
        a.out.join(BEST_CHECKPOINT).display(),
        a.out.join(LAST_CHECKPOINT).display()
    );
    if let Some(e) = outcome.last_eval {
        println!(
            "held-out PSNR {:.3} dB (hazy input {:.3} dB), SSIM {:.4}",
            e.psnr_db, e.hazy_psnr_db, e.ssim
        );
    }
    Ok(())
}

fn input_images(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_dir() {
        let files = list_pngs(input)?;
        if files.is_empty() {
            return Err(usage(format!("no PNG files in {}", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(usage(format!("--input {} does not exist", input.display())))
    }
}

fn cmd_dehaze(a: DehazeArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let trained = ck.config.stack.stages;
    let stages = a.stages.unwrap_or(trained);
    #[derive(Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        model: &'a crate::tnet::TNetConfig,
        stack: &'a crate::stack::StackConfig,
        stages: usize,
        save_stages: bool,
    }
    log_resolved(
        "dehaze",
        &Resolved {
            checkpoint: &a.checkpoint,
            model: &ck.config.model,
            stack: &ck.config.stack,
            stages,
            save_stages: a.save_stages,
        },
        Some(ck.config.train.seed),
    );
    if stages == 0 {
        return Err(usage("--stages must be positive"));
    }
    if stages != trained {
        log::warn!("running {stages} stages on a model trained with {trained}");
    }
    let model = ck.model()?;
    let files = input_images(&a.input)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for path in &files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let hazy = ImageBuffer::load_png(path)?;
        let outs = model.dehaze(&hazy, stages)?;
        outs.last().expect("at least one stage").save_png(&a.out.join(format!("{stem}.png")))?;
        if a.save_stages {
            for (k, img) in outs.iter().enumerate() {
                img.save_png(&a.out.join(format!("{stem}_stage{}.png", k + 1)))?;
            }
        }
    }
    println!("dehazed {} image(s) into {}", files.len(), a.out.display());
    Ok(())
}

fn file_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    Ok(list_pngs(dir)?
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        pred: &'a Path,
        gt: &'a Path,
        out: &'a Path,
        allow_partial: bool,
    }
    log_resolved(
        "eval",
        &Resolved { pred: &a.pred, gt: &a.gt, out: &a.out, allow_partial: a.allow_partial },
        None,
    );
    let pred = file_names(&a.pred)?;
    let gt = file_names(&a.gt)?;
    let unpaired: Vec<String> = pred
        .symmetric_difference(&gt)
        .map(|n| {
            let side = if pred.contains(n) { "pred" } else { "gt" };
            format!("{n} (only in {side})")
        })
        .collect();
    if !unpaired.is_empty() {
        for u in &unpaired {
            log::warn!("unpaired file: {u}");
        }
        if !a.allow_partial {
            return Err(CliError::Runtime(Error::Config(format!(
                "{} unpaired file(s): {}",
                unpaired.len(),
                unpaired.join(", ")
            ))));
        }
    }
    let mut report = MetricReport::default();
    for name in pred.intersection(&gt) {
        let p = ImageBuffer::load_png(&a.pred.join(name))?;
        let g = ImageBuffer::load_png(&a.gt.join(name))?;
        report.push(name.clone(), &p, &g)?;
    }
    if report.per_image.is_empty() {
        return Err(CliError::Runtime(Error::Config("no image pairs to evaluate".into())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.write(&a.out.join("metrics.txt"), &a.out.join("metrics.jsonl"))?;
    print!("{}", report.to_table());
    let agg = report.aggregate();
    println!(
        "mean PSNR {:.3} dB, mean SSIM {:.4} over {} image(s)",
        agg.mean_psnr_db, agg.mean_ssim, agg.count
    );
    Ok(())
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Logger writing `[LEVEL] message` lines to stderr, filtered by `TNET_LOG`.
pub fn init_logging() {
    use std::io::Write as _;
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("TNET_LOG", "info"))
        .format(|buf, rec| writeln!(buf, "[{}] {}", rec.level(), rec.args()))
        .try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range("0.4,1.6").unwrap(), (0.4, 1.6));
        assert!(parse_range("0.4").is_err());
        assert!(parse_range("a,1").is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let err = toml::from_str::<ConfigFile>("m = 2\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn flags_override_file_values() {
        let file: ConfigFile = toml::from_str("preset = \"micro\"\nepochs = 5\nstages = 2\n").unwrap();
        let flags = ConfigFile { epochs: Some(7), ..ConfigFile::default() };
        let cfg = file.merged(&flags).resolve().unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!((cfg.stack.stages, cfg.loss.stages, cfg.train.stages), (2, 2, 2));
        assert_eq!(cfg.model.m, 2);
    }

    #[test]
    fn extractor_selection() {
        let vgg = ConfigFile { extractor: Some(ExtractorKind::Vgg16), ..ConfigFile::default() };
        assert!(vgg.resolve().is_err());
        let full = ConfigFile { preset: Some(Preset::Full), ..ConfigFile::default() };
        assert!(matches!(
            full.resolve().unwrap().loss.extractor,
            FeatureExtractorSpec::PretrainedVgg16 { .. }
        ));
        let fallback = ConfigFile { extractor: Some(ExtractorKind::Random), ..full };
        assert_eq!(fallback.resolve().unwrap().loss.extractor, FeatureExtractorSpec::default());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
