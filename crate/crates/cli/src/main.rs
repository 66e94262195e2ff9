use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use neurovit::archive::{
    params_from_archive, read_archive, save_checkpoint, write_archive, ArchiveError, WeightArchive,
};
use neurovit::experiment::{
    initial_params, pretrain_for_seed, run_bench, seed_data, train_model, ExperimentConfig, ExperimentError,
};
use neurovit::groundtruth::{rasterize_labels, GroundTruthError, LabelMode};
use neurovit::io::write_atomic;
use neurovit::metrics::{predict_volume, score, BinaryMask, MetricsError};
use neurovit::numerics::NumericsError;
use neurovit::swc::{parse_swc, write_swc, SwcError};
use neurovit::train::TrainError;
use neurovit::transfer::{transfer_weights_with_provenance, TransferError, TransferStrategy};
use neurovit::vit::{VitConfig, VitError};
use neurovit::volume::{load_raw, save_raw, Volume3D, VolumeError};

#[derive(Parser)]
#[command(
    name = "neurovit",
    version,
    about = "2D-to-3D ViT transfer for volumetric neuron segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (TOML); every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image volumes, label volumes and SWC trees.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of volumes (default: bench train + test volumes).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Rasterize an SWC file into a label volume.
    Labelgen {
        #[arg(long)]
        swc: PathBuf,
        /// Volume size as WxHxD.
        #[arg(long)]
        dims: Dims,
        #[arg(long, default_value = "binary")]
        mode: Mode,
        /// Output raw file; metadata goes next to it as .json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a 2D model on synthetic slices and export it as an archive.
    Pretrain2d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a 3D model from a 2D archive.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// 2D source archive.
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        strategy: Option<TransferStrategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 3D model; prints one JSON object per epoch.
    Train3d {
        #[command(flatten)]
        common: Common,
        /// `scratch`, or `archive:<path>` for a 2D archive or 3D checkpoint.
        #[arg(long, default_value = "scratch")]
        init: Init,
        #[arg(long)]
        strategy: Option<TransferStrategy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a probability volume with a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input raw volume (metadata in the sibling .json).
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice and Hd95 between a prediction and a ground-truth volume.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Run the 2D/3D scratch/transfer comparison over several seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds (default: from config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for bench.json and bench.md.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the tensors of an archive.
    Inspect { archive: PathBuf },
}

#[derive(Clone, Copy)]
struct Dims([usize; 3]);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [w, h, d] if w > 0 && h > 0 && d > 0 => Ok(Dims([w, h, d])),
            _ => Err(format!("expected WxHxD with positive sizes, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy)]
struct Mode(LabelMode);

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(Mode(LabelMode::Binary)),
            "soft" => Ok(Mode(LabelMode::Soft)),
            _ => Err(format!("expected binary or soft, got {s:?}")),
        }
    }
}

#[derive(Clone)]
enum Init {
    Scratch,
    Archive(PathBuf),
}

impl FromStr for Init {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "scratch" => Ok(Init::Scratch),
            Some(("archive", p)) if !p.is_empty() => Ok(Init::Archive(PathBuf::from(p))),
            _ => Err(format!("expected scratch or archive:<path>, got {s:?}")),
        }
    }
}

struct CliError {
    code: &'static str,
    exit: u8,
    message: String,
}

impl CliError {
    fn usage(code: &'static str, message: impl Display) -> Self {
        Self {
            code,
            exit: 2,
            message: message.to_string(),
        }
    }

    fn data(code: &'static str, message: impl Display) -> Self {
        Self {
            code,
            exit: 3,
            message: message.to_string(),
        }
    }

    fn numeric(code: &'static str, message: impl Display) -> Self {
        Self {
            code,
            exit: 4,
            message: message.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data("io", e)
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::NonFinite(_) => CliError::numeric("volume.non_finite", e),
            VolumeError::Io(_) => CliError::data("io", e),
            _ => CliError::data("volume", e),
        }
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        let code = match e {
            ArchiveError::BadMagic(_) => "archive.bad_magic",
            ArchiveError::UnsupportedVersion(_) => "archive.unsupported_version",
            ArchiveError::Truncated(_) => "archive.truncated",
            ArchiveError::DuplicateName(_) => "archive.duplicate_name",
            ArchiveError::MissingTensor(_) => "archive.missing_tensor",
            ArchiveError::ShapeMismatch { .. } => "archive.shape_mismatch",
            ArchiveError::Io(_) => "io",
            _ => "archive.invalid",
        };
        CliError::data(code, e)
    }
}

impl From<SwcError> for CliError {
    fn from(e: SwcError) -> Self {
        CliError::data("swc", e)
    }
}

impl From<GroundTruthError> for CliError {
    fn from(e: GroundTruthError) -> Self {
        CliError::data("groundtruth", e)
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        let code = match e {
            TransferError::MissingTensor(_) => "transfer.missing_tensor",
            TransferError::DimMismatch(_) => "transfer.dim_mismatch",
            TransferError::BadDepth(_) => "transfer.bad_depth",
            TransferError::BadChannels(_) => "transfer.bad_channels",
        };
        CliError::data(code, e)
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        match e {
            VitError::Numerics(NumericsError::NonFinite(_)) => CliError::numeric("model.non_finite", e),
            VitError::Config(_) => CliError::usage("config", e),
            _ => CliError::data("model.shape", e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::numeric("train.non_finite_loss", e),
            TrainError::BadConfig(_) => CliError::usage("config", e),
            TrainError::Model(m) => m.into(),
            TrainError::Volume(v) => v.into(),
            _ => CliError::data("train", e),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::Volume(v) => v.into(),
            _ => CliError::data("metrics", e),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::usage("config", e),
            ExperimentError::Data(d) => d.into(),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Transfer(t) => t.into(),
            ExperimentError::Metrics(m) => m.into(),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::usage("config", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn meta_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

fn load_volume(data: &Path) -> Result<Volume3D, CliError> {
    Ok(load_raw(data, meta_path(data))?)
}

fn save_volume(v: &Volume3D, data: &Path) -> Result<(), CliError> {
    Ok(save_raw(v, data, meta_path(data))?)
}

/// 2D archives carry a rank-4 embedding kernel, 3D ones rank 5.
fn is_3d_archive(arch: &WeightArchive) -> bool {
    arch.get("patch_embed.w").is_some_and(|t| t.ndim() == 5)
}

fn model_for(arch: &WeightArchive, cfg: &ExperimentConfig) -> VitConfig {
    if is_3d_archive(arch) {
        cfg.model_3d()
    } else {
        cfg.model_2d()
    }
}

fn cmd_synth(common: &Common, out: &Path, count: Option<usize>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let n = count.unwrap_or(cfg.bench.train_volumes + cfg.bench.test_volumes);
    fs::create_dir_all(out)?;
    for i in 0..n {
        let s = neurovit::groundtruth::synthesize(&cfg.synth, i as u64)?;
        save_volume(&s.image, &out.join(format!("image_{i:03}.raw")))?;
        save_volume(&s.label, &out.join(format!("label_{i:03}.raw")))?;
        write_atomic(
            &out.join(format!("tree_{i:03}.swc")),
            write_swc(&s.morphology).as_bytes(),
        )?;
    }
    println!("wrote {n} volumes to {}", out.display());
    Ok(())
}

fn cmd_labelgen(swc: &Path, dims: Dims, mode: Mode, out: &Path) -> Result<(), CliError> {
    let m = parse_swc(&fs::read_to_string(swc)?)?;
    let label = rasterize_labels(&m, dims.0, mode.0)?;
    save_volume(&label, out)
}

fn cmd_pretrain2d(common: &Common, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let data = seed_data(&cfg, seed)?;
    let archive = pretrain_for_seed(&cfg, &data, seed)?;
    write_archive(&archive, out)?;
    println!("wrote {} tensors to {}", archive.len(), out.display());
    Ok(())
}

fn cmd_transfer(common: &Common, src: &Path, strategy: Option<TransferStrategy>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let strategy = strategy.unwrap_or(cfg.strategy);
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let source = read_archive(src)?;
    let mut rng = neurovit::numerics::Rng::derive(seed, 0x494E_4954);
    let outcome = transfer_weights_with_provenance(&source, &cfg.model_3d(), strategy, &mut rng)?;
    save_checkpoint(&outcome.params, out)?;
    let width = outcome.provenance.iter().map(|(n, _)| n.len()).max().unwrap_or(4);
    println!("{:width$}  {:14}  shape", "tensor", "provenance");
    for ((name, how), t) in outcome.provenance.iter().zip(outcome.params.tensors()) {
        println!("{name:width$}  {:14}  {:?}", how.to_string(), t.shape());
    }
    Ok(())
}

fn cmd_train3d(common: &Common, init: &Init, strategy: Option<TransferStrategy>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let strategy = strategy.unwrap_or(cfg.strategy);
    let seed = cfg.train.seed;
    let model = cfg.model_3d();
    let start = match init {
        Init::Scratch => initial_params(&model, None, strategy, seed)?,
        Init::Archive(p) => {
            let arch = read_archive(p)?;
            if is_3d_archive(&arch) {
                params_from_archive(&arch, &model)?
            } else {
                initial_params(&model, Some(&arch), strategy, seed)?
            }
        }
    };
    let data = seed_data(&cfg, seed)?;
    let (params, _) = train_model(&cfg, &model, start, &data.train, seed, |stats, _| {
        println!("{}", serde_json::to_string(stats).expect("plain struct"));
    })?;
    save_checkpoint(&params, out)?;
    Ok(())
}

fn cmd_infer(common: &Common, checkpoint: &Path, volume: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let arch = read_archive(checkpoint)?;
    let model = model_for(&arch, &cfg);
    let params = params_from_archive(&arch, &model)?;
    let prob = predict_volume(&params, &model, &load_volume(volume)?)?;
    save_volume(&prob, out)
}

fn cmd_eval(pred: &Path, gt: &Path, threshold: f32) -> Result<(), CliError> {
    let pred = BinaryMask::from_volume(&load_volume(pred)?, threshold);
    let gt = BinaryMask::from_volume(&load_volume(gt)?, 0.5);
    let s = score(&pred, &gt)?;
    println!("{}", serde_json::to_string(&s).expect("plain struct"));
    Ok(())
}

fn cmd_bench(common: &Common, seeds: Option<Vec<u64>>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let seeds = seeds
        .or_else(|| common.seed.map(|s| vec![s]))
        .unwrap_or_else(|| cfg.bench.seeds.clone());
    let report = run_bench(&cfg, &seeds, |m| eprintln!("{m}"))?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.out_dir.as_ref().map(PathBuf::from));
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("bench.json"), report.to_json().as_bytes())?;
        write_atomic(&dir.join("bench.md"), report.to_markdown().as_bytes())?;
    }
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let arch = read_archive(path)?;
    let mut total = 0usize;
    for (name, t) in arch.iter() {
        let d = t.data();
        let (lo, hi) = d
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        println!("{name}\t{:?}\tf32\tmin={lo:.6}\tmax={hi:.6}\tmean={mean:.6}", t.shape());
        total += t.len();
    }
    println!("{} tensors, {total} values", arch.len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, out, count } => cmd_synth(&common, &out, count),
        Command::Labelgen { swc, dims, mode, out } => cmd_labelgen(&swc, dims, mode, &out),
        Command::Pretrain2d { common, out } => cmd_pretrain2d(&common, &out),
        Command::Transfer {
            common,
            src,
            strategy,
            out,
        } => cmd_transfer(&common, &src, strategy, &out),
        Command::Train3d {
            common,
            init,
            strategy,
            out,
        } => cmd_train3d(&common, &init, strategy, &out),
        Command::Infer {
            common,
            checkpoint,
            volume,
            out,
        } => cmd_infer(&common, &checkpoint, &volume, &out),
        Command::Eval { pred, gt, threshold } => cmd_eval(&pred, &gt, threshold),
        Command::Bench { common, seeds, out } => cmd_bench(&common, seeds, out.as_deref()),
        Command::Inspect { archive } => cmd_inspect(&archive),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", e.code);
            ExitCode::from(e.exit)
        }
    }
}
