//! Quadratic potential (QP) divergence.
//!
//! For a critic score gap `a = f(x_real) - f(x_fake)` and a sample distance
//! `d = mean |x_real - x_fake|`, the divergence is
//!
//! ```text
//! Q(a, d) = a - a^2 / (2 * lambda * d)
//! ```
//!
//! The critic maximizes `E[Q]`; the generator minimizes `E[a]`. `Q` is concave
//! in `a` with its maximum `lambda * d / 2` reached at `a = lambda * d`.
//!
//! The critic is a single-input score network, so the two-argument critic
//! `C(u, v)` is realized as `f(u)`. All scalars are batch means.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, ensure_same_shape};

/// Weight and numerical floor of the quadratic term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpConfig {
    pub lambda: f64,
    /// Lower clamp applied to the distance before division.
    pub epsilon: f64,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            epsilon: 1e-8,
        }
    }
}

impl QpConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { lambda, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, Self::default().epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be a finite positive number, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::invalid(format!(
                "epsilon must lie in (0, 1e-6], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Critic scores on the real and generated sample of each batch element.
#[derive(Debug, Clone)]
pub struct ScorePair {
    /// Shape `(batch,)`.
    pub real: Tensor,
    /// Shape `(batch,)`.
    pub fake: Tensor,
}

impl ScorePair {
    pub fn new(real: Tensor, fake: Tensor) -> Result<Self> {
        ensure_same_shape(&real, &fake, "score pair")?;
        if real.rank() != 1 || real.dims()[0] == 0 {
            return Err(Error::invalid(format!(
                "scores must be non-empty vectors, got shape {:?}",
                real.dims()
            )));
        }
        Ok(Self { real, fake })
    }

    pub fn batch_size(&self) -> usize {
        self.real.dims()[0]
    }

    /// Per-element score gap `a = real - fake`.
    pub fn gap(&self) -> Result<Tensor> {
        Ok((&self.real - &self.fake)?)
    }

    /// The same scores with the gradient graph cut.
    pub fn detach(&self) -> Self {
        Self {
            real: self.real.detach(),
            fake: self.fake.detach(),
        }
    }

    fn ensure_finite(&self) -> Result<()> {
        ensure_finite(&self.real, "score_real")?;
        ensure_finite(&self.fake, "score_fake")
    }
}

/// Mean absolute difference per batch element, shape `(batch,)`.
///
/// Inputs need a leading batch dimension and at least one further dimension.
pub fn l1_distance(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x, y, "l1_distance")?;
    if x.rank() < 2 || x.dims()[0] == 0 {
        return Err(Error::invalid(format!(
            "l1_distance needs shape (batch >= 1, ...), got {:?}",
            x.dims()
        )));
    }
    Ok((x - y)?.abs()?.flatten_from(1)?.mean(1)?)
}

/// Batch mean of `a - a^2 / (2 lambda max(d, epsilon))` given precomputed distances.
pub fn qp_divergence_with_distance(
    scores: &ScorePair,
    distance: &Tensor,
    cfg: &QpConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    ensure_same_shape(&scores.real, distance, "qp_divergence distance")?;
    scores.ensure_finite()?;
    ensure_finite(distance, "distance")?;
    let q = qp_elementwise(&scores.gap()?, distance, cfg)?.mean_all()?;
    ensure_finite(&q, "qp_divergence")?;
    Ok(q)
}

/// Elementwise `a - a^2 / (2 lambda max(d, epsilon))` for same-shaped `a` and `d`.
pub fn qp_elementwise(a: &Tensor, distance: &Tensor, cfg: &QpConfig) -> Result<Tensor> {
    ensure_same_shape(a, distance, "qp_elementwise")?;
    let denom = (distance.maximum(cfg.epsilon)? * (2.0 * cfg.lambda))?;
    Ok((a - (a.sqr()? / denom)?)?)
}

/// QP divergence of a critic on a real/generated batch pair (scalar tensor).
pub fn qp_divergence(
    scores: &ScorePair,
    x_real: &Tensor,
    x_fake: &Tensor,
    cfg: &QpConfig,
) -> Result<Tensor> {
    check_batch(scores, x_real)?;
    let d = l1_distance(x_real, x_fake)?;
    qp_divergence_with_distance(scores, &d, cfg)
}

/// Critic objective for one translation direction. Larger is better for the
/// critic; a descent-based optimizer must negate it.
pub fn critic_direction_objective(
    scores: &ScorePair,
    x_real: &Tensor,
    x_fake: &Tensor,
    cfg: &QpConfig,
) -> Result<Tensor> {
    qp_divergence(scores, x_real, x_fake, cfg)
}

/// Generator adversarial term `mean(score_real - score_fake)`, to be minimized.
pub fn generator_adversarial_scalar(scores: &ScorePair) -> Result<Tensor> {
    scores.ensure_finite()?;
    Ok(scores.gap()?.mean_all()?)
}

fn check_batch(scores: &ScorePair, x: &Tensor) -> Result<()> {
    let n = x.dims().first().copied().unwrap_or(0);
    if n != scores.batch_size() {
        return Err(Error::invalid(format!(
            "batch mismatch: {} scores vs images of shape {:?}",
            scores.batch_size(),
            x.dims()
        )));
    }
    Ok(())
}

/// Scalar form of the divergence for a single `(a, d)`.
pub fn qp_value(a: f64, lambda: f64, d: f64) -> f64 {
    a - a * a / (2.0 * lambda * d)
}

/// `dQ/da = 1 - a / (lambda d)`.
pub fn qp_gradient(a: f64, lambda: f64, d: f64) -> f64 {
    1.0 - a / (lambda * d)
}

/// Closed-form maximizer and maximum: `(lambda d, lambda d / 2)`.
pub fn qp_optimum(lambda: f64, d: f64) -> (f64, f64) {
    (lambda * d, lambda * d / 2.0)
}
