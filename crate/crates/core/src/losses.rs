//! Generator and critic objectives of the two-domain translation model.
//!
//! Domain `r` holds photos, domain `s` holds paintings. `G_rs` maps photos to
//! paintings, `G_sr` maps back. Critic `f_s` scores paintings and `f_r` scores
//! photos.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::divergence::{
    generator_adversarial_scalar, l1_distance, qp_divergence_with_distance, QpConfig, ScorePair,
};
use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, ensure_image_batch, ensure_same_shape, scalar_f64};

/// Weights of the cycle-consistency (`alpha`) and identity (`beta`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which pair of images the identity terms compare.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    /// `|G_sr(x_s) - x_r|` and `|G_rs(x_r) - x_s|` over the randomly paired batch.
    #[default]
    Paper,
    /// `|G_sr(x_r) - x_r|` and `|G_rs(x_s) - x_s|`.
    SameDomain,
}

/// Every image produced by one forward pass through both generators.
#[derive(Debug, Clone)]
pub struct TranslationStep {
    pub x_r: Tensor,
    pub x_s: Tensor,
    /// `G_rs(x_r)`.
    pub fake_s: Tensor,
    /// `G_sr(x_s)`.
    pub fake_r: Tensor,
    /// `G_sr(G_rs(x_r))`.
    pub rec_r: Tensor,
    /// `G_rs(G_sr(x_s))`.
    pub rec_s: Tensor,
    /// Compared against `x_r` by the identity term.
    pub id_r: Tensor,
    /// Compared against `x_s` by the identity term.
    pub id_s: Tensor,
}

impl TranslationStep {
    /// Runs both generators on a photo batch and a painting batch.
    pub fn forward<Rs, Sr>(
        x_r: &Tensor,
        x_s: &Tensor,
        mode: IdentityMode,
        g_rs: Rs,
        g_sr: Sr,
    ) -> Result<Self>
    where
        Rs: Fn(&Tensor) -> Result<Tensor>,
        Sr: Fn(&Tensor) -> Result<Tensor>,
    {
        ensure_image_batch(x_r, "photo batch")?;
        ensure_same_shape(x_r, x_s, "photo/painting batches")?;
        let fake_s = g_rs(x_r)?;
        let fake_r = g_sr(x_s)?;
        let rec_r = g_sr(&fake_s)?;
        let rec_s = g_rs(&fake_r)?;
        let (id_r, id_s) = match mode {
            IdentityMode::Paper => (fake_r.clone(), fake_s.clone()),
            IdentityMode::SameDomain => (g_sr(x_r)?, g_rs(x_s)?),
        };
        Self::new(x_r.clone(), x_s.clone(), fake_s, fake_r, rec_r, rec_s, id_r, id_s)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_r: Tensor,
        x_s: Tensor,
        fake_s: Tensor,
        fake_r: Tensor,
        rec_r: Tensor,
        rec_s: Tensor,
        id_r: Tensor,
        id_s: Tensor,
    ) -> Result<Self> {
        ensure_image_batch(&x_r, "translation step")?;
        for (name, t) in [
            ("x_s", &x_s),
            ("fake_s", &fake_s),
            ("fake_r", &fake_r),
            ("rec_r", &rec_r),
            ("rec_s", &rec_s),
            ("id_r", &id_r),
            ("id_s", &id_s),
        ] {
            ensure_same_shape(&x_r, t, name)?;
        }
        Ok(Self {
            x_r,
            x_s,
            fake_s,
            fake_r,
            rec_r,
            rec_s,
            id_r,
            id_s,
        })
    }
}

/// One iteration's loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub adv_rs: f64,
    pub adv_sr: f64,
    pub cyc_r: f64,
    pub cyc_s: f64,
    pub id_r: f64,
    pub id_s: f64,
    pub gen_total: f64,
    pub critic_s: f64,
    pub critic_r: f64,
    /// Batch-mean distance between real and generated paintings seen by `f_s`.
    pub dist_s: f64,
    /// Batch-mean distance between real and generated photos seen by `f_r`.
    pub dist_r: f64,
}

impl LossReport {
    pub const FIELD_NAMES: [&'static str; 9] = [
        "adv_rs", "adv_sr", "cyc_r", "cyc_s", "id_r", "id_s", "gen_total", "critic_s", "critic_r",
    ];

    /// The nine loss fields in [`Self::FIELD_NAMES`] order.
    pub fn loss_fields(&self) -> [f64; 9] {
        [
            self.adv_rs,
            self.adv_sr,
            self.cyc_r,
            self.cyc_s,
            self.id_r,
            self.id_s,
            self.gen_total,
            self.critic_s,
            self.critic_r,
        ]
    }

    /// `adv_rs + adv_sr + alpha (cyc_r + cyc_s) + beta (id_r + id_s)` from the stored terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.adv_rs
            + self.adv_sr
            + w.alpha * (self.cyc_r + self.cyc_s)
            + w.beta * (self.id_r + self.id_s)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, v) in Self::FIELD_NAMES.iter().zip(self.loss_fields()) {
            if !v.is_finite() {
                return Err(Error::non_finite(*name).at_iteration(self.iteration));
            }
        }
        Ok(())
    }
}

/// Mean absolute reconstruction error over the whole batch.
pub fn cycle_loss(original: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    Ok(l1_distance(original, reconstructed)?.mean_all()?)
}

/// Mean absolute difference between a target-domain sample and a translated sample.
pub fn identity_loss(target_domain_sample: &Tensor, translated: &Tensor) -> Result<Tensor> {
    Ok(l1_distance(target_domain_sample, translated)?.mean_all()?)
}

fn checked(term: &str, t: Tensor) -> Result<(Tensor, f64)> {
    let v = scalar_f64(&t)?;
    if !v.is_finite() {
        return Err(Error::non_finite(term));
    }
    Ok((t, v))
}

/// Joint generator objective (to be minimized) and its term breakdown.
///
/// `critic_s_scores` are `(f_s(x_s), f_s(G_rs(x_r)))`, `critic_r_scores` are
/// `(f_r(x_r), f_r(G_sr(x_s)))`. The report's critic fields are left at zero.
pub fn generator_total(
    step: &TranslationStep,
    critic_s_scores: &ScorePair,
    critic_r_scores: &ScorePair,
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    w.validate()?;
    let adv = |term: &str, s: &ScorePair| {
        generator_adversarial_scalar(s)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::non_finite(term),
                other => other,
            })
            .and_then(|t| checked(term, t))
    };
    let (adv_rs, adv_rs_v) = adv("adv_rs", critic_s_scores)?;
    let (adv_sr, adv_sr_v) = adv("adv_sr", critic_r_scores)?;
    let (cyc_r, cyc_r_v) = checked("cyc_r", cycle_loss(&step.x_r, &step.rec_r)?)?;
    let (cyc_s, cyc_s_v) = checked("cyc_s", cycle_loss(&step.x_s, &step.rec_s)?)?;
    let (id_r, id_r_v) = checked("id_r", identity_loss(&step.x_r, &step.id_r)?)?;
    let (id_s, id_s_v) = checked("id_s", identity_loss(&step.x_s, &step.id_s)?)?;

    let total = ((adv_rs + adv_sr)?
        + ((cyc_r + cyc_s)? * w.alpha)?
        + ((id_r + id_s)? * w.beta)?)?;
    let (total, total_v) = checked("gen_total", total)?;

    let report = LossReport {
        adv_rs: adv_rs_v,
        adv_sr: adv_sr_v,
        cyc_r: cyc_r_v,
        cyc_s: cyc_s_v,
        id_r: id_r_v,
        id_s: id_s_v,
        gen_total: total_v,
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Per-direction critic objectives together with the distances they used.
#[derive(Debug, Clone)]
pub struct CriticTerms {
    /// Objective of the painting critic `f_s` (to be maximized).
    pub objective_s: Tensor,
    /// Objective of the photo critic `f_r` (to be maximized).
    pub objective_r: Tensor,
    /// Per-sample `|x_s - G_rs(x_r)|`, shape `(batch,)`.
    pub distance_s: Tensor,
    /// Per-sample `|x_r - G_sr(x_s)|`, shape `(batch,)`.
    pub distance_r: Tensor,
}

pub fn critic_terms(
    step: &TranslationStep,
    critic_s_scores: &ScorePair,
    critic_r_scores: &ScorePair,
    cfg: &QpConfig,
) -> Result<CriticTerms> {
    // Generated images are constants for the critics.
    let distance_s = l1_distance(&step.x_s, &step.fake_s.detach())?;
    let distance_r = l1_distance(&step.x_r, &step.fake_r.detach())?;
    ensure_finite(&distance_s, "dist_s")?;
    ensure_finite(&distance_r, "dist_r")?;
    let objective_s = qp_divergence_with_distance(critic_s_scores, &distance_s, cfg)
        .map_err(|e| rename_non_finite(e, "critic_s"))?;
    let objective_r = qp_divergence_with_distance(critic_r_scores, &distance_r, cfg)
        .map_err(|e| rename_non_finite(e, "critic_r"))?;
    Ok(CriticTerms {
        objective_s,
        objective_r,
        distance_s,
        distance_r,
    })
}

/// `(critic_s objective, critic_r objective)`, both to be maximized.
pub fn critic_total(
    step: &TranslationStep,
    critic_s_scores: &ScorePair,
    critic_r_scores: &ScorePair,
    cfg: &QpConfig,
) -> Result<(Tensor, Tensor)> {
    let terms = critic_terms(step, critic_s_scores, critic_r_scores, cfg)?;
    Ok((terms.objective_s, terms.objective_r))
}

fn rename_non_finite(e: Error, term: &str) -> Error {
    match e {
        Error::NonFinite { term: inner, iteration } => Error::NonFinite {
            term: format!("{term} ({inner})"),
            iteration,
        },
        other => other,
    }
}
