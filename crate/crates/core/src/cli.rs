//! The `qpgan` command line: `train`, `stylize`, `reconstruct` and `check`.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, missing inputs,
//! invalid sizes), 2 for runtime failures (non-finite losses, IO errors,
//! failed checks).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{denormalize, load_rgb, prepare_inference_image, Style, UnpairedDataset};
use crate::diagnostics::run_check_suite;
use crate::divergence::l1_distance;
use crate::error::Error;
use crate::losses::IdentityMode;
use crate::models::{CriticSpec, GeneratorSpec, Norm, UpsampleMode};
use crate::tensor::to_vec_f64;
use crate::trainer::{defaults, default_iterations, fit_with, load_checkpoint, FitOptions, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable holding the default dataset root.
pub const DATA_ROOT_ENV: &str = "QPGAN_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "qpgan", version, about = "Photo <-> painting translation with a QP-divergence CycleGAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both generators and critics on <data-root>/<style>/{trainA,trainB}.
    Train(TrainArgs),
    /// Translate one image with a trained generator.
    Stylize(StylizeArgs),
    /// Translate an image to the other domain and back, reporting the mean L1 error.
    Reconstruct(ReconstructArgs),
    /// Run the divergence, checkerboard and gradient self-checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub style: Style,
    #[arg(long, env = DATA_ROOT_ENV, default_value = "datasets")]
    pub data_root: PathBuf,
    /// Defaults to runs/<style>.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Defaults to 15000 (12000 for ukiyoe).
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, default_value_t = defaults::BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = defaults::LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = defaults::ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = defaults::BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = defaults::LEARNING_RATE)]
    pub lr: f64,
    #[arg(long, default_value_t = defaults::ADAM_BETA1)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = defaults::ADAM_BETA2)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = defaults::CHECKPOINT_EVERY)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = defaults::CRITIC_STEPS_PER_GEN_STEP)]
    pub critic_steps: usize,
    #[arg(long, default_value_t = defaults::CROP_SIZE)]
    pub crop_size: usize,
    #[arg(long, value_enum, default_value_t = IdentityMode::Paper)]
    pub identity_mode: IdentityMode,
    #[arg(long, default_value_t = 64)]
    pub base_width: usize,
    #[arg(long, default_value_t = 9)]
    pub residual_blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub n_down: usize,
    #[arg(long, value_enum, default_value_t = UpsampleMode::NearestNeighborConv)]
    pub upsample_mode: UpsampleMode,
    #[arg(long, default_value_t = 64)]
    pub critic_width: usize,
    #[arg(long, default_value_t = 4)]
    pub critic_layers: usize,
    #[arg(long, value_enum, default_value_t = Norm::Instance)]
    pub norm: Norm,
    /// Suppress the per-iteration loss lines.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            learning_rate: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            batch_size: self.batch_size,
            total_iterations: self.iterations.unwrap_or_else(|| default_iterations(self.style)),
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            data_root: self.data_root.clone(),
            out_dir: self
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(self.style.dir_name())),
            critic_steps_per_gen_step: self.critic_steps,
            identity_mode: self.identity_mode,
            crop_size: self.crop_size,
            generator: GeneratorSpec {
                base_width: self.base_width,
                n_residual_blocks: self.residual_blocks,
                n_down: self.n_down,
                upsample_mode: self.upsample_mode,
                norm: self.norm,
            },
            critic: CriticSpec {
                base_width: self.critic_width,
                n_layers: self.critic_layers,
                norm: self.norm,
            },
            ..TrainConfig::for_style(self.style)
        }
    }
}

/// Translation direction: `rs` is photo to painting, `sr` painting to photo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Rs,
    Sr,
}

impl Direction {
    fn photo_to_painting(self) -> bool {
        self == Direction::Rs
    }
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output image; the format follows the extension (png by default).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::Rs)]
    pub direction: Direction,
    /// Output side length. The input's short side is resized to this, then
    /// center-cropped; must be a multiple of 2^n_down (4 for the default generator).
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Directory receiving translated.png and reconstructed.png.
    #[arg(long)]
    pub output: PathBuf,
    /// Direction of the first translation.
    #[arg(long, value_enum, default_value_t = Direction::Rs)]
    pub direction: Direction,
    /// Working resolution; same rule as for `stylize`.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Stylize(args) => cmd_stylize(&args),
        Command::Reconstruct(args) => cmd_reconstruct(&args).map(|_| ()),
        Command::Check(args) => cmd_check(&args),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult {
    let cfg = args.to_config();
    let style_dir = cfg.data_root.join(cfg.style.dir_name());
    for sub in ["trainA", "trainB"] {
        let dir = style_dir.join(sub);
        if !dir.is_dir() {
            return Err(CliError::usage(format!("data directory {} does not exist", dir.display())));
        }
    }
    cfg.validate()?;
    let ds = UnpairedDataset::from_style_root(&cfg.data_root, cfg.style, cfg.crop_size, cfg.flip_probability)?;
    let total = cfg.total_iterations;
    let quiet = args.quiet;
    let opts = FitOptions {
        resume: args.resume,
        stop_after: None,
        on_report: Some(Box::new(move |r| {
            if !quiet {
                println!(
                    "iter {}/{total} gen_total={:.5} adv_rs={:.5} adv_sr={:.5} cyc_r={:.5} cyc_s={:.5} \
                     id_r={:.5} id_s={:.5} critic_s={:.5} critic_r={:.5}",
                    r.iteration, r.gen_total, r.adv_rs, r.adv_sr, r.cyc_r, r.cyc_s, r.id_r, r.id_s, r.critic_s, r.critic_r
                );
            }
        })),
    };
    let outcome = fit_with(cfg, &ds, opts)?;
    if let Some(path) = &outcome.final_checkpoint {
        println!("final checkpoint: {}", path.display());
    }
    Ok(())
}

fn load_inputs(
    checkpoint: &Path,
    input: &Path,
    size: usize,
) -> CliResult<(crate::trainer::TrainState, candle_core::Tensor)> {
    if !checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    if !input.is_file() {
        return Err(CliError::usage(format!("input image {} does not exist", input.display())));
    }
    let state = load_checkpoint(checkpoint)?;
    state
        .config()
        .generator
        .check_size(size, size)
        .map_err(|e| CliError::usage(format!("--size {size}: {e}")))?;
    let image = load_rgb(input).map_err(|e| CliError::usage(e.to_string()))?;
    let x = prepare_inference_image(&image, size, &candle_core::Device::Cpu)?;
    Ok((state, x))
}

fn save_image(image: &image::RgbImage, path: &Path) -> CliResult {
    let result = if path.extension().is_some() {
        image.save(path)
    } else {
        image.save_with_format(path, image::ImageFormat::Png)
    };
    result.map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn first_image(batch: &candle_core::Tensor) -> CliResult<image::RgbImage> {
    denormalize(batch)?
        .into_iter()
        .next()
        .ok_or_else(|| CliError::runtime("generator produced an empty batch"))
}

pub fn cmd_stylize(args: &StylizeArgs) -> CliResult {
    let (state, x) = load_inputs(&args.checkpoint, &args.input, args.size)?;
    let y = state.generator(args.direction.photo_to_painting()).infer(&x)?;
    save_image(&first_image(&y)?, &args.output)?;
    println!("wrote {} ({}x{})", args.output.display(), args.size, args.size);
    Ok(())
}

/// Runs the round trip and returns the mean-L1 reconstruction error.
pub fn cmd_reconstruct(args: &ReconstructArgs) -> CliResult<f64> {
    let (state, x) = load_inputs(&args.checkpoint, &args.input, args.size)?;
    let forward = args.direction.photo_to_painting();
    let translated = state.generator(forward).infer(&x)?;
    let reconstructed = state.generator(!forward).infer(&translated)?;
    let error = to_vec_f64(&l1_distance(&x, &reconstructed)?)?[0];

    std::fs::create_dir_all(&args.output)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.output.display())))?;
    save_image(&first_image(&translated)?, &args.output.join("translated.png"))?;
    save_image(&first_image(&reconstructed)?, &args.output.join("reconstructed.png"))?;
    println!("reconstruction mean L1 error: {error:.6}");
    Ok(error)
}

pub fn cmd_check(args: &CheckArgs) -> CliResult {
    let report = run_check_suite(args.seed)?;
    for outcome in &report.outcomes {
        println!("{outcome}");
    }
    if report.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::runtime("one or more checks failed"))
    }
}
