//! Desk-scale verification: closed-form checks of the divergence, the
//! constant-input checkerboard probe, and finite-difference gradient checks.

use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::divergence::{qp_elementwise, QpConfig};
use crate::error::{Error, Result};
use crate::models::{Upsample, UpsampleMode};
use crate::tensor::{ensure_image_batch, scalar_f64, to_vec_f64};

/// Finite-difference step for `f32` checks.
pub const FD_STEP_F32: f64 = 1e-4;
/// Finite-difference step for `f64` checks.
pub const FD_STEP_F64: f64 = 1e-6;

/// Vectorized `Q(a, d)` over a grid of gaps for a fixed `(lambda, d)`.
pub type QpObjective<'a> = dyn Fn(&[f64], f64, f64) -> Result<Vec<f64>> + 'a;

/// The library's divergence, evaluated elementwise in double precision.
pub fn library_qp_objective(a: &[f64], lambda: f64, d: f64) -> Result<Vec<f64>> {
    let cfg = QpConfig::with_lambda(lambda)?;
    let a = Tensor::from_slice(a, a.len(), &Device::Cpu)?;
    let d = Tensor::full(d, a.dims(), &Device::Cpu)?;
    to_vec_f64(&qp_elementwise(&a, &d, &cfg)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct QpTrial {
    pub lambda: f64,
    pub d: f64,
    pub grid_argmax: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub closed_argmax: f64,
    pub closed_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QpCheckReport {
    pub trials: Vec<QpTrial>,
    pub failures: Vec<String>,
}

impl QpCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const GRID_POINTS: usize = 2001;
const GRID_HALF_WIDTH: f64 = 1e4;
const MAX_VALUE_ERROR: f64 = 1e-6;

/// Zooming grid search for the maximum of `Q(., lambda, d)` that also checks
/// midpoint concavity on every consecutive grid triple.
fn grid_maximize(objective: &QpObjective<'_>, lambda: f64, d: f64) -> Result<(f64, f64, f64, Option<f64>)> {
    let (mut lo, mut hi) = (-GRID_HALF_WIDTH, GRID_HALF_WIDTH);
    let mut concavity_violation = None;
    loop {
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
        let values = objective(&grid, lambda, d)?;
        if values.len() != grid.len() {
            return Err(Error::invalid("objective returned a grid of the wrong length"));
        }
        for i in 1..grid.len() - 1 {
            let chord = 0.5 * (values[i - 1] + values[i + 1]);
            let tol = 1e-12 * (values[i - 1].abs() + values[i + 1].abs()) + 1e-12;
            if (values[i] < chord - tol || values[i].is_nan()) && concavity_violation.is_none() {
                concavity_violation = Some(grid[i]);
            }
        }
        let (best, _) = values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        // near the peak Q moves by step^2 / (2 lambda d), so the argmax is only
        // resolvable to about sqrt(f64::EPSILON) * lambda * d, so the reported
        // resolution is floored above that
        let scale = grid[best].abs().max(1.0);
        if step <= 1e-7 * scale {
            let resolution = step.max(1e-7 * scale);
            return Ok((grid[best], values[best], resolution, concavity_violation));
        }
        lo = grid[best.saturating_sub(2)];
        hi = grid[(best + 2).min(grid.len() - 1)];
    }
}

/// Checks the closed-form optimum `a* = lambda d`, `max = lambda d / 2` and
/// concavity for `trials` random `(lambda, d)` with `lambda` in `[0.1, 100]`
/// and `d` in `[0.01, 10]` (log-uniform), plus the distance floor.
pub fn check_qp_analytics<R: Rng + ?Sized>(cfg: &QpConfig, trials: usize, rng: &mut R) -> Result<QpCheckReport> {
    check_qp_analytics_with(&library_qp_objective, cfg, trials, rng)
}

pub fn check_qp_analytics_with<R: Rng + ?Sized>(
    objective: &QpObjective<'_>,
    cfg: &QpConfig,
    trials: usize,
    rng: &mut R,
) -> Result<QpCheckReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    cfg.validate()?;
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let mut report = QpCheckReport {
        trials: Vec::with_capacity(trials + 1),
        failures: Vec::new(),
    };
    let mut pairs = vec![(cfg.lambda, 1.0)];
    pairs.extend((0..trials).map(|_| (log_uniform(rng, 0.1, 100.0), log_uniform(rng, 0.01, 10.0))));
    for (lambda, d) in pairs {
        let (a_grid, q_grid, step, violation) = grid_maximize(objective, lambda, d)?;
        let (a_star, q_star) = crate::divergence::qp_optimum(lambda, d);
        if (a_grid - a_star).abs() > 2.0 * step {
            report.failures.push(format!(
                "argmax mismatch at lambda={lambda}, d={d}: grid a={a_grid}, closed form a={a_star}"
            ));
        }
        let value_error = (q_grid - q_star).abs();
        if value_error > MAX_VALUE_ERROR || value_error.is_nan() {
            report.failures.push(format!(
                "maximum mismatch at lambda={lambda}, d={d}, a={a_grid}: grid {q_grid}, closed form {q_star}"
            ));
        }
        if let Some(a) = violation {
            report
                .failures
                .push(format!("concavity violated at lambda={lambda}, d={d}, a={a}"));
        }
        report.trials.push(QpTrial {
            lambda,
            d,
            grid_argmax: a_grid,
            grid_max: q_grid,
            grid_step: step,
            closed_argmax: a_star,
            closed_max: q_star,
        });
    }

    // zero distance must hit the floor, not divide by zero
    let floored = objective(&[1.0], cfg.lambda, 0.0)?;
    match floored.first() {
        Some(q) if q.is_finite() && *q < 0.0 => {}
        other => report.failures.push(format!(
            "distance floor: Q(a=1, d=0) should be finite and negative, got {other:?}"
        )),
    }
    Ok(report)
}

/// Mean over samples and channels of the spatial variance inside a frame of
/// `border` pixels. Zero means no periodic pattern on a constant probe.
pub fn checkerboard_score(output: &Tensor, border: usize) -> Result<f64> {
    let (n, c, h, w) = ensure_image_batch(output, "checkerboard_score")?;
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::invalid(format!(
            "border {border} leaves no interior in a {h}x{w} image"
        )));
    }
    let interior = output
        .to_dtype(DType::F64)?
        .narrow(2, border, h - 2 * border)?
        .narrow(3, border, w - 2 * border)?
        .reshape((n * c, (h - 2 * border) * (w - 2 * border)))?;
    let mean = interior.mean_keepdim(1)?;
    let var = interior.broadcast_sub(&mean)?.sqr()?.mean(1)?;
    scalar_f64(&var.mean_all()?)
}

/// A stack of 2x upsampling stages used by the checkerboard probe.
#[derive(Debug)]
pub struct DecoderProbe {
    stages: Vec<Upsample>,
    channels: usize,
}

impl DecoderProbe {
    /// `n_stages` upsampling stages of `channels` channels with Glorot weights
    /// drawn from `seed`. Biases start at zero.
    pub fn new(mode: UpsampleMode, channels: usize, n_stages: usize, seed: u64) -> Result<Self> {
        let mut b = crate::models::params::ParamBuilder::new(seed, DType::F32, &Device::Cpu);
        let stages = (0..n_stages)
            .map(|i| Upsample::build(&mut b, &format!("probe{i}"), mode, channels, channels))
            .collect::<Result<Vec<_>>>()?;
        let params = b.finish();
        // nonzero biases so the probe does not rely on them vanishing
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for (name, var) in params.iter().filter(|(n, _)| n.ends_with(".bias")) {
            let values: Vec<f32> = (0..var.elem_count()).map(|_| rng.random_range(-0.1..0.1)).collect();
            params.assign(name, &Tensor::from_vec(values, var.dims(), &Device::Cpu)?)?;
        }
        Ok(Self { stages, channels })
    }

    /// The same stack with every weight and bias set to zero.
    pub fn zeroed(mode: UpsampleMode, channels: usize, n_stages: usize) -> Result<Self> {
        let mut b = crate::models::params::ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let stages = (0..n_stages)
            .map(|i| Upsample::build(&mut b, &format!("probe{i}"), mode, channels, channels))
            .collect::<Result<Vec<_>>>()?;
        for (name, var) in b.finish().iter() {
            let zeros = var.zeros_like()?;
            var.set(&zeros).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        }
        Ok(Self { stages, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for stage in &self.stages {
            y = stage.forward(&y)?;
        }
        Ok(y)
    }

    /// Output for a spatially constant `size x size` input of value `value`.
    pub fn constant_response(&self, size: usize, value: f32) -> Result<Tensor> {
        let x = Tensor::full(value, (1, self.channels, size, size), &Device::Cpu)?;
        self.forward(&x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckerboardComparison {
    pub seed: u64,
    pub nearest_score: f64,
    pub transpose_score: f64,
}

/// Maximum interior variance tolerated for the resize-convolution decoder.
pub const NEAREST_MAX_SCORE: f64 = 1e-10;

impl CheckerboardComparison {
    pub fn passed(&self) -> bool {
        self.nearest_score <= NEAREST_MAX_SCORE && self.transpose_score > 0.0
    }
}

const PROBE_CHANNELS: usize = 8;
const PROBE_STAGES: usize = 2;
const PROBE_SIZE: usize = 8;
const PROBE_BORDER: usize = 2;

/// Feeds a constant image through a two-stage decoder in both upsampling modes
/// built from the same seed.
pub fn compare_upsampling(seed: u64) -> Result<CheckerboardComparison> {
    let score = |mode| -> Result<f64> {
        let probe = DecoderProbe::new(mode, PROBE_CHANNELS, PROBE_STAGES, seed)?;
        checkerboard_score(&probe.constant_response(PROBE_SIZE, 0.5)?, PROBE_BORDER)
    };
    Ok(CheckerboardComparison {
        seed,
        nearest_score: score(UpsampleMode::NearestNeighborConv)?,
        transpose_score: score(UpsampleMode::TransposeConv)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coordinates: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Precision of the finite-difference evaluations.
    pub reference_dtype: String,
    /// Denominator floor of the relative error.
    pub scale_floor: f64,
    /// Set when the loss was NaN or infinite at any probe.
    pub non_finite: bool,
    /// Coordinates redrawn because the loss is not differentiable within one step.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_relative_error <= self.tolerance
    }
}

/// Settings of one finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub n_coords: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, scale_floor)` as denominator.
    pub scale_floor: f64,
}

impl GradCheckConfig {
    pub fn double(n_coords: usize) -> Self {
        Self {
            n_coords,
            step: FD_STEP_F64,
            tolerance: 1e-6,
            scale_floor: 1e-8,
        }
    }

    /// The `1e-2` floor equals an absolute tolerance of `1e-5` on gradients that
    /// nearly cancel, where single-precision backprop cannot do better.
    pub fn single(n_coords: usize) -> Self {
        Self {
            n_coords,
            step: FD_STEP_F32,
            tolerance: 1e-3,
            scale_floor: 1e-2,
        }
    }
}

/// Compares the backpropagated gradient of `loss_fn` at `params` with central
/// differences at `cfg.n_coords` random coordinates.
pub fn finite_difference_gradcheck<F, R>(
    loss_fn: F,
    params: &Tensor,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    gradcheck_against_reference(&loss_fn, &loss_fn, params.dtype(), params, cfg, rng)
}

/// Like [`finite_difference_gradcheck`], but the central differences are taken
/// on `reference_fn` evaluated in `reference_dtype`.
///
/// A single-precision network cannot resolve its own gradient by differencing
/// in single precision: forward rounding divided by `2 * step` is of the order
/// of the gradient itself. Evaluating the same weights in double precision
/// keeps the oracle independent of that noise.
pub fn gradcheck_against_reference<F, G, R>(
    loss_fn: &F,
    reference_fn: &G,
    reference_dtype: DType,
    params: &Tensor,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + ?Sized,
    G: Fn(&Tensor) -> Result<Tensor> + ?Sized,
    R: Rng + ?Sized,
{
    let n = params.elem_count();
    if n == 0 || cfg.n_coords == 0 {
        return Err(Error::invalid("gradcheck needs at least one parameter and one coordinate"));
    }
    let shape = params.dims().to_vec();
    let var = Var::from_tensor(params)?;
    let loss = loss_fn(var.as_tensor())?;
    let base = scalar_f64(&loss)?;
    let grad = match loss.backward()?.get(var.as_tensor()) {
        Some(g) => to_vec_f64(g)?,
        None => vec![0.0; n],
    };

    let values = to_vec_f64(params)?;
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut v = values.clone();
        v[i] += delta;
        let t = Tensor::from_vec(v, shape.as_slice(), params.device())?.to_dtype(reference_dtype)?;
        scalar_f64(&reference_fn(&t)?)
    };

    let mut report = GradCheckReport {
        coordinates: Vec::with_capacity(cfg.n_coords),
        analytic: Vec::with_capacity(cfg.n_coords),
        numeric: Vec::with_capacity(cfg.n_coords),
        relative_errors: Vec::with_capacity(cfg.n_coords),
        max_relative_error: 0.0,
        step: cfg.step,
        tolerance: cfg.tolerance,
        reference_dtype: format!("{reference_dtype:?}").to_lowercase(),
        scale_floor: cfg.scale_floor,
        non_finite: !base.is_finite(),
        kinks_skipped: 0,
    };
    let central = |i: usize, h: f64| -> Result<(f64, bool)> {
        let (plus, minus) = (eval(i, h)?, eval(i, -h)?);
        Ok(((plus - minus) / (2.0 * h), plus.is_finite() && minus.is_finite()))
    };
    let max_draws = 10 * cfg.n_coords;
    let mut draws = 0;
    while report.coordinates.len() < cfg.n_coords && draws < max_draws {
        draws += 1;
        let i = rng.random_range(0..n);
        let (numeric, finite) = central(i, cfg.step)?;
        report.non_finite |= !finite;
        let analytic = grad[i];
        let rel_error = |numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(cfg.scale_floor);
            (analytic - numeric).abs() / denom
        };
        let rel = rel_error(numeric);
        if rel > cfg.tolerance && finite {
            // a kink inside [x - h, x + h] makes the two steps disagree; the
            // difference quotient is no oracle there, so draw another coordinate
            let (fine, _) = central(i, cfg.step / 10.0)?;
            let spread = (fine - numeric).abs() / numeric.abs().max(fine.abs()).max(cfg.scale_floor);
            if spread > cfg.tolerance {
                report.kinks_skipped += 1;
                continue;
            }
        }
        report.max_relative_error = report.max_relative_error.max(if rel.is_nan() { f64::INFINITY } else { rel });
        report.coordinates.push(i);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
        report.relative_errors.push(rel);
    }
    if report.coordinates.len() < cfg.n_coords {
        report.max_relative_error = f64::INFINITY;
    }
    Ok(report)
}

/// Outcome of one named check in [`run_check_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckSuiteReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckSuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

/// Everything `qpgan check` runs, with the library divergence.
pub fn run_check_suite(seed: u64) -> Result<CheckSuiteReport> {
    run_check_suite_with(&library_qp_objective, seed)
}

/// The check suite with a substitute divergence for the analytic check.
pub fn run_check_suite_with(objective: &QpObjective<'_>, seed: u64) -> Result<CheckSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();

    let qp = check_qp_analytics_with(objective, &QpConfig::default(), 50, &mut rng)?;
    outcomes.push(CheckOutcome {
        name: "qp_analytics".into(),
        passed: qp.passed(),
        detail: if qp.passed() {
            format!("{} (lambda, d) pairs match the closed-form optimum", qp.trials.len())
        } else {
            qp.failures.join("; ")
        },
    });

    let comparisons = (0..10).map(|s| compare_upsampling(seed + s)).collect::<Result<Vec<_>>>()?;
    let worst_nearest = comparisons.iter().map(|c| c.nearest_score).fold(0.0, f64::max);
    let least_transpose = comparisons.iter().map(|c| c.transpose_score).fold(f64::INFINITY, f64::min);
    outcomes.push(CheckOutcome {
        name: "checkerboard_contrast".into(),
        passed: comparisons.iter().all(CheckerboardComparison::passed),
        detail: format!(
            "nearest-neighbor max interior variance {worst_nearest:.3e} (limit {NEAREST_MAX_SCORE:.0e}), \
             transpose min interior variance {least_transpose:.3e} (must be > 0)"
        ),
    });

    for (name, report) in gradient_suite(&mut rng)? {
        outcomes.push(CheckOutcome {
            detail: format!(
                "max relative error {:.3e} over {} coordinates (tolerance {:.0e}, step {:.0e}, differences in {}, {} kinks redrawn)",
                report.max_relative_error,
                report.coordinates.len(),
                report.tolerance,
                report.step,
                report.reference_dtype,
                report.kinks_skipped
            ),
            passed: report.passed(),
            name,
        });
    }
    Ok(CheckSuiteReport { outcomes })
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Gradient checks of the divergence, the reconstruction losses, the joint
/// generator objective (double precision) and a micro generator (single precision).
pub fn gradient_suite<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::divergence::{qp_divergence, ScorePair};
    use crate::losses::{cycle_loss, generator_total, identity_loss, LossWeights, TranslationStep};

    let shape = [2, 3, 4, 4];
    let dtype = DType::F64;
    let mut out = Vec::new();
    let cfg = QpConfig::default();

    // scores (2, batch): row 0 real, row 1 fake
    let x_real = random_tensor(rng, &shape, dtype)?;
    let x_fake = random_tensor(rng, &shape, dtype)?;
    let scores = random_tensor(rng, &[2, 2], dtype)?;
    let report = finite_difference_gradcheck(
        |s| {
            let pair = ScorePair::new(s.get(0)?, s.get(1)?)?;
            qp_divergence(&pair, &x_real, &x_fake, &cfg)
        },
        &scores,
        GradCheckConfig::double(50),
        rng,
    )?;
    out.push(("grad_qp_divergence".to_string(), report));

    let original = random_tensor(rng, &shape, dtype)?;
    let report = finite_difference_gradcheck(
        |r| cycle_loss(&original, r),
        &random_tensor(rng, &shape, dtype)?,
        GradCheckConfig::double(50),
        rng,
    )?;
    out.push(("grad_cycle_loss".to_string(), report));

    let target = random_tensor(rng, &shape, dtype)?;
    let report = finite_difference_gradcheck(
        |t| identity_loss(&target, t),
        &random_tensor(rng, &shape, dtype)?,
        GradCheckConfig::double(50),
        rng,
    )?;
    out.push(("grad_identity_loss".to_string(), report));

    // all six generated arrays plus four score vectors packed in one parameter
    let x_r = random_tensor(rng, &shape, dtype)?;
    let x_s = random_tensor(rng, &shape, dtype)?;
    let per_image: usize = shape.iter().product();
    let batch = shape[0];
    let packed = random_tensor(rng, &[6 * per_image + 4 * batch], dtype)?;
    let weights = LossWeights::default();
    let report = finite_difference_gradcheck(
        |p| {
            let image = |k: usize| -> Result<Tensor> { Ok(p.narrow(0, k * per_image, per_image)?.reshape(&shape)?) };
            let score = |k: usize| -> Result<Tensor> { Ok(p.narrow(0, 6 * per_image + k * batch, batch)?) };
            let step = TranslationStep::new(
                x_r.clone(),
                x_s.clone(),
                image(0)?,
                image(1)?,
                image(2)?,
                image(3)?,
                image(4)?,
                image(5)?,
            )?;
            let s = ScorePair::new(score(0)?, score(1)?)?;
            let r = ScorePair::new(score(2)?, score(3)?)?;
            Ok(generator_total(&step, &s, &r, &weights)?.0)
        },
        &packed,
        GradCheckConfig::double(50),
        rng,
    )?;
    out.push(("grad_generator_total".to_string(), report));

    out.push(("grad_generator_micro_net_f32".to_string(), micro_generator_gradcheck(rng)?));
    Ok(out)
}

/// Input-gradient check of a small single-precision generator on an 8x8 image.
///
/// The analytic gradient is backpropagated in `f32`; the differences use a
/// double-precision copy carrying the identical `f32` weights.
pub fn micro_generator_gradcheck<R: Rng + ?Sized>(rng: &mut R) -> Result<GradCheckReport> {
    use crate::models::{Generator, GeneratorSpec};

    let spec = GeneratorSpec {
        base_width: 4,
        n_residual_blocks: 1,
        // two halvings would leave instance norm a 2x2 map, which is too
        // ill-conditioned for a single-precision check
        n_down: 1,
        ..GeneratorSpec::default()
    };
    let seed = rng.random();
    let g = Generator::build(&spec, seed, DType::F32, &Device::Cpu)?;
    let reference = Generator::build(&spec, seed, DType::F64, &Device::Cpu)?;
    for (name, var) in g.params().iter() {
        reference.params().assign(name, var.as_tensor())?;
    }
    let shape = [1, 3, 8, 8];
    let probe = random_tensor(rng, &shape, DType::F32)?;
    let probe64 = probe.to_dtype(DType::F64)?;
    let input = random_tensor(rng, &shape, DType::F32)?;
    gradcheck_against_reference(
        &|x: &Tensor| Ok((g.forward(x)? * &probe)?.sum_all()?),
        &|x: &Tensor| Ok((reference.forward(x)? * &probe64)?.sum_all()?),
        DType::F64,
        &input,
        GradCheckConfig::single(20),
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let report = check_qp_analytics(&QpConfig::default(), 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        // the first trial is always (lambda, 1)
        let t = &report.trials[0];
        assert!((t.grid_argmax - 10.0).abs() <= 2.0 * t.grid_step);
        assert!((t.grid_max - 5.0).abs() < 1e-6);
        let (a, q, step, violation) = grid_maximize(&library_qp_objective, 1.0, 2.0).unwrap();
        assert!((a - 2.0).abs() <= 2.0 * step && (q - 1.0).abs() < 1e-6 && violation.is_none());
    }

    #[test]
    fn tampered_sign_fails() {
        let flipped = |a: &[f64], lambda: f64, d: f64| -> Result<Vec<f64>> {
            Ok(a.iter().map(|a| -a - a * a / (2.0 * lambda * d)).collect())
        };
        let report =
            check_qp_analytics_with(&flipped, &QpConfig::default(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn convex_objective_fails_concavity() {
        let convex = |a: &[f64], lambda: f64, d: f64| -> Result<Vec<f64>> {
            Ok(a.iter().map(|a| a + a * a / (2.0 * lambda * d)).collect())
        };
        let report =
            check_qp_analytics_with(&convex, &QpConfig::default(), 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(report.failures.iter().any(|f| f.contains("concavity")));
    }

    #[test]
    fn checkerboard_score_of_constant_is_zero() {
        let x = Tensor::full(0.3f32, (2, 3, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(checkerboard_score(&x, 1).unwrap(), 0.0);
        assert!(checkerboard_score(&x, 4).is_err());
    }

    #[test]
    fn checkerboard_score_of_stripes() {
        // alternating columns of 0 and 1: variance 0.25
        let row: Vec<f32> = (0..8).map(|i| (i % 2) as f32).collect();
        let x = Tensor::from_vec(row, (1, 1, 1, 8), &Device::Cpu)
            .unwrap()
            .repeat((1, 1, 8, 1))
            .unwrap();
        assert!((checkerboard_score(&x, 0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_decoders_score_zero() {
        for mode in [UpsampleMode::NearestNeighborConv, UpsampleMode::TransposeConv] {
            let probe = DecoderProbe::zeroed(mode, 4, 2).unwrap();
            let out = probe.constant_response(8, 0.7).unwrap();
            assert_eq!(checkerboard_score(&out, 2).unwrap(), 0.0);
        }
    }

    #[test]
    fn upsampling_contrast() {
        let c = compare_upsampling(7).unwrap();
        assert!(c.nearest_score <= NEAREST_MAX_SCORE, "{c:?}");
        assert!(c.transpose_score > 0.0, "{c:?}");
    }

    #[test]
    fn quadratic_gradcheck_is_exact() {
        let p = Tensor::new(&[0.3f64, -1.2, 2.5, 0.7], &Device::Cpu).unwrap();
        let report = finite_difference_gradcheck(
            |p| Ok((p.sqr()?.sum_all()? * 0.5)?),
            &p,
            GradCheckConfig {
                tolerance: 1e-8,
                ..GradCheckConfig::double(10)
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        for (&i, a) in report.coordinates.iter().zip(&report.analytic) {
            assert_eq!(*a, to_vec_f64(&p).unwrap()[i]);
        }
    }

    #[test]
    fn qp_gradient_wrt_real_score() {
        // a = 3, lambda = 10, d = 1 -> dQ/d score_real = 0.7
        let x_real = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        let x_fake = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).unwrap();
        let scores = Tensor::new(&[[3.0f64], [0.0]], &Device::Cpu).unwrap();
        let cfg = QpConfig::default();
        let report = finite_difference_gradcheck(
            |s| {
                let pair = crate::divergence::ScorePair::new(s.get(0)?, s.get(1)?)?;
                crate::divergence::qp_divergence(&pair, &x_real, &x_fake, &cfg)
            },
            &scores,
            GradCheckConfig::double(4),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        for (&i, a) in report.coordinates.iter().zip(&report.analytic) {
            let expected = if i == 0 { 0.7 } else { -0.7 };
            assert!((a - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_fails() {
        let p = Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let report = finite_difference_gradcheck(
            |p| Ok((p.sum_all()? * f64::NAN)?),
            &p,
            GradCheckConfig::double(2),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
