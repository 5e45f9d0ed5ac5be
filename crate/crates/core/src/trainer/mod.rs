//! Alternating critic / generator optimization with logging and checkpoints.
//!
//! One iteration: translate both batches, take a single ascent step on each
//! critic's divergence with the generated images held constant, then take
//! one joint descent step on the generator objective with the critics held
//! constant.

mod adam;
mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    latest_checkpoint, load_checkpoint, load_checkpoint_with, save_checkpoint, CHECKPOINT_FORMAT_VERSION,
};

use crate::data::{BatchLoader, Style, UnpairedDataset};
use crate::divergence::{QpConfig, ScorePair};
use crate::error::{Error, Result};
use crate::losses::{critic_terms, generator_total, IdentityMode, LossReport, LossWeights, TranslationStep};
use crate::models::{Critic, CriticSpec, Generator, GeneratorSpec};
use crate::tensor::{scalar_f64, to_vec_f64};

/// Hyperparameter defaults.
pub mod defaults {
    pub const LAMBDA: f64 = 10.0;
    pub const ALPHA: f64 = 10.0;
    pub const BETA: f64 = 0.5;
    pub const LEARNING_RATE: f64 = 2e-4;
    pub const ADAM_BETA1: f64 = 0.5;
    pub const ADAM_BETA2: f64 = 0.999;
    pub const ADAM_EPS: f64 = 1e-8;
    pub const BATCH_SIZE: usize = 4;
    pub const ITERATIONS: u64 = 15_000;
    pub const UKIYOE_ITERATIONS: u64 = 12_000;
    pub const CHECKPOINT_EVERY: u64 = 1_000;
    pub const CROP_SIZE: usize = 256;
    pub const FLIP_PROBABILITY: f64 = 0.5;
    pub const CRITIC_STEPS_PER_GEN_STEP: usize = 1;
}

pub const LOG_FILE: &str = "train_log.jsonl";

/// Default iteration budget for a painting style.
pub fn default_iterations(style: Style) -> u64 {
    match style {
        Style::Ukiyoe => defaults::UKIYOE_ITERATIONS,
        _ => defaults::ITERATIONS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub style: Style,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub critic_steps_per_gen_step: usize,
    pub identity_mode: IdentityMode,
    pub crop_size: usize,
    pub flip_probability: f64,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_style(Style::Vangogh)
    }
}

impl TrainConfig {
    pub fn for_style(style: Style) -> Self {
        Self {
            lambda: defaults::LAMBDA,
            epsilon: QpConfig::default().epsilon,
            alpha: defaults::ALPHA,
            beta: defaults::BETA,
            learning_rate: defaults::LEARNING_RATE,
            adam_beta1: defaults::ADAM_BETA1,
            adam_beta2: defaults::ADAM_BETA2,
            adam_eps: defaults::ADAM_EPS,
            batch_size: defaults::BATCH_SIZE,
            total_iterations: default_iterations(style),
            checkpoint_every: defaults::CHECKPOINT_EVERY,
            seed: 0,
            style,
            data_root: PathBuf::from("datasets"),
            out_dir: PathBuf::from("runs").join(style.dir_name()),
            critic_steps_per_gen_step: defaults::CRITIC_STEPS_PER_GEN_STEP,
            identity_mode: IdentityMode::Paper,
            crop_size: defaults::CROP_SIZE,
            flip_probability: defaults::FLIP_PROBABILITY,
            generator: GeneratorSpec::default(),
            critic: CriticSpec::default(),
        }
    }

    pub fn qp(&self) -> Result<QpConfig> {
        QpConfig::new(self.lambda, self.epsilon)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.qp()?;
        self.weights()?;
        self.generator.validate()?;
        self.critic.validate()?;
        for (name, v) in [("learning_rate", self.learning_rate), ("adam_eps", self.adam_eps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid(format!(
                "flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.critic_steps_per_gen_step == 0 {
            return Err(Error::invalid(
                "batch_size, checkpoint_every and critic_steps_per_gen_step must be positive",
            ));
        }
        self.generator.check_size(self.crop_size, self.crop_size)?;
        if self.crop_size < self.critic.min_size() {
            return Err(Error::invalid(format!(
                "crop size {} is below the critic's receptive minimum {}",
                self.crop_size,
                self.critic.min_size()
            )));
        }
        Ok(())
    }
}

/// Critic-phase values recorded in the loss report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticValues {
    pub critic_s: f64,
    pub critic_r: f64,
    pub dist_s: f64,
    pub dist_r: f64,
}

/// Both generators, both critics, their optimizers and the iteration counter.
#[derive(Debug)]
pub struct TrainState {
    config: TrainConfig,
    pub g_rs: Generator,
    pub g_sr: Generator,
    pub f_s: Critic,
    pub f_r: Critic,
    opt_gen: Adam,
    opt_f_s: Adam,
    opt_f_r: Adam,
    iteration: u64,
}

fn prefixed(prefix: &str, params: &crate::models::ParameterSet) -> Vec<(String, Var)> {
    params
        .iter()
        .map(|(name, var)| (format!("{prefix}/{name}"), var.clone()))
        .collect()
}

impl TrainState {
    /// Fresh networks initialized from seeds derived from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let device = Device::Cpu;
        let dtype = candle_core::DType::F32;
        let g_rs = Generator::build(&config.generator, seeds.random(), dtype, &device)?;
        let g_sr = Generator::build(&config.generator, seeds.random(), dtype, &device)?;
        let f_s = Critic::build(&config.critic, seeds.random(), dtype, &device)?;
        let f_r = Critic::build(&config.critic, seeds.random(), dtype, &device)?;

        let mut gen_params = prefixed("g_rs", g_rs.params());
        gen_params.extend(prefixed("g_sr", g_sr.params()));
        let opt_gen = Adam::new(gen_params, config.adam())?;
        let opt_f_s = Adam::new(prefixed("f_s", f_s.params()), config.adam())?;
        let opt_f_r = Adam::new(prefixed("f_r", f_r.params()), config.adam())?;
        Ok(Self {
            config,
            g_rs,
            g_sr,
            f_s,
            f_r,
            opt_gen,
            opt_f_s,
            opt_f_r,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed training iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn generator_optimizer(&self) -> &Adam {
        &self.opt_gen
    }

    pub fn critic_optimizers(&self) -> (&Adam, &Adam) {
        (&self.opt_f_s, &self.opt_f_r)
    }

    /// Every parameter of the four networks, named `<network>/<layer>.<kind>`.
    pub fn named_parameters(&self) -> Vec<(String, Var)> {
        let mut all = prefixed("g_rs", self.g_rs.params());
        all.extend(prefixed("g_sr", self.g_sr.params()));
        all.extend(prefixed("f_s", self.f_s.params()));
        all.extend(prefixed("f_r", self.f_r.params()));
        all
    }

    /// Generator for a direction: `true` selects photo to painting.
    pub fn generator(&self, photo_to_painting: bool) -> &Generator {
        if photo_to_painting {
            &self.g_rs
        } else {
            &self.g_sr
        }
    }

    /// Forward pass of both generators, with gradients attached.
    pub fn translate(&self, x_r: &Tensor, x_s: &Tensor) -> Result<TranslationStep> {
        TranslationStep::forward(
            x_r,
            x_s,
            self.config.identity_mode,
            |x| self.g_rs.forward(x),
            |x| self.g_sr.forward(x),
        )
    }

    /// Gradients of the negated critic objectives; generated images are detached.
    pub fn critic_gradients(&self, step: &TranslationStep) -> Result<(GradStore, CriticValues)> {
        let scores_s = ScorePair::new(self.f_s.forward(&step.x_s)?, self.f_s.forward(&step.fake_s.detach())?)?;
        let scores_r = ScorePair::new(self.f_r.forward(&step.x_r)?, self.f_r.forward(&step.fake_r.detach())?)?;
        let terms = critic_terms(step, &scores_s, &scores_r, &self.config.qp()?)?;
        let values = CriticValues {
            critic_s: scalar_f64(&terms.objective_s)?,
            critic_r: scalar_f64(&terms.objective_r)?,
            dist_s: mean(&terms.distance_s)?,
            dist_r: mean(&terms.distance_r)?,
        };
        let ascent = (terms.objective_s + terms.objective_r)?.neg()?;
        Ok((ascent.backward()?, values))
    }

    /// Gradients of the joint generator objective under the current critics.
    pub fn generator_gradients(&self, step: &TranslationStep) -> Result<(GradStore, LossReport)> {
        let scores_s = ScorePair::new(self.f_s.forward(&step.x_s)?, self.f_s.forward(&step.fake_s)?)?;
        let scores_r = ScorePair::new(self.f_r.forward(&step.x_r)?, self.f_r.forward(&step.fake_r)?)?;
        let (total, report) = generator_total(step, &scores_s, &scores_r, &self.config.weights()?)?;
        Ok((total.backward()?, report))
    }

    /// One full iteration on a photo batch and a painting batch.
    pub fn train_step(&mut self, x_r: &Tensor, x_s: &Tensor) -> Result<LossReport> {
        let k = self.iteration + 1;
        let step = self.translate(x_r, x_s).map_err(|e| e.at_iteration(k))?;

        let mut recorded = None;
        for _ in 0..self.config.critic_steps_per_gen_step {
            let (grads, values) = self.critic_gradients(&step).map_err(|e| e.at_iteration(k))?;
            self.opt_f_s.step(&grads)?;
            self.opt_f_r.step(&grads)?;
            recorded.get_or_insert(values);
        }
        let critic = recorded.expect("at least one critic step");

        let (grads, report) = self.generator_gradients(&step).map_err(|e| e.at_iteration(k))?;
        let report = LossReport {
            iteration: k,
            critic_s: critic.critic_s,
            critic_r: critic.critic_r,
            dist_s: critic.dist_s,
            dist_r: critic.dist_r,
            ..report
        };
        report.ensure_finite()?;
        self.opt_gen.step(&grads)?;
        self.iteration = k;
        Ok(report)
    }
}

fn mean(t: &Tensor) -> Result<f64> {
    let v = to_vec_f64(t)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(flatten)]
    pub report: LossReport,
    pub wall_time_s: f64,
}

/// Parses every record of a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| Ok(serde_json::from_str(&line.map_err(|e| Error::io(path, e))?)?))
        .collect()
}

/// Keeps only records with `iteration <= keep_through`.
fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LogRecord> = read_log(path)?
        .into_iter()
        .filter(|r| r.report.iteration <= keep_through)
        .collect();
    let mut out = String::new();
    for r in &kept {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Called with each iteration's report.
pub type ReportCallback<'a> = Box<dyn FnMut(&LossReport) + 'a>;

/// Knobs for [`fit_with`].
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Continue from the newest checkpoint in the output directory, if any.
    pub resume: bool,
    /// Stop (without a final checkpoint) once this many iterations are done.
    pub stop_after: Option<u64>,
    /// Called after every iteration.
    pub on_report: Option<ReportCallback<'a>>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log_path: PathBuf,
    /// `None` when stopped early through [`FitOptions::stop_after`].
    pub final_checkpoint: Option<PathBuf>,
}

/// Checkpoint file name for an iteration count.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.safetensors")
}

/// Trains for `cfg.total_iterations`, checkpointing into `cfg.out_dir`.
pub fn fit(cfg: TrainConfig, ds: &UnpairedDataset) -> Result<FitOutcome> {
    fit_with(cfg, ds, FitOptions::default())
}

pub fn fit_with(cfg: TrainConfig, ds: &UnpairedDataset, mut opts: FitOptions<'_>) -> Result<FitOutcome> {
    cfg.validate()?;
    if ds.crop_size != cfg.crop_size {
        return Err(Error::invalid(format!(
            "dataset crop size {} differs from config crop size {}",
            ds.crop_size, cfg.crop_size
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join(LOG_FILE);

    let resume_from = if opts.resume {
        latest_checkpoint(&cfg.out_dir)?
    } else {
        None
    };
    let mut state = match resume_from {
        Some(path) => {
            let mut state = load_checkpoint_with(&path, &cfg)?;
            log::info!("resuming from {} at iteration {}", path.display(), state.iteration());
            // Later settings (e.g. a longer budget) win; architecture was checked on load.
            state.config = cfg.clone();
            truncate_log(&log_path, state.iteration())?;
            state
        }
        None => {
            std::fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
            TrainState::new(cfg.clone())?
        }
    };

    let end = opts.stop_after.map_or(cfg.total_iterations, |s| s.min(cfg.total_iterations));
    let mut log = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let started = Instant::now();
    let device = Device::Cpu;
    // batch k (0-based) feeds iteration k + 1
    let mut loader = BatchLoader::spawn(ds.clone(), cfg.batch_size, cfg.seed, state.iteration()..end, 2);
    while state.iteration() < end {
        let (k, batch) = loader
            .next_batch()
            .ok_or_else(|| Error::invalid("batch loader stopped early"))?;
        debug_assert_eq!(k, state.iteration());
        let (x_r, x_s) = batch?.to_tensors(&device)?;
        let report = state.train_step(&x_r, &x_s)?;
        let record = LogRecord {
            report,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        if let Some(cb) = opts.on_report.as_mut() {
            cb(&report);
        }
        if state.iteration() % cfg.checkpoint_every == 0 && state.iteration() < cfg.total_iterations {
            save_checkpoint(&state, &cfg.out_dir.join(checkpoint_name(state.iteration())))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let final_checkpoint = if state.iteration() >= cfg.total_iterations {
        let path = cfg.out_dir.join(checkpoint_name(state.iteration()));
        save_checkpoint(&state, &path)?;
        Some(path)
    } else {
        None
    };
    Ok(FitOutcome {
        state,
        log_path,
        final_checkpoint,
    })
}
