//! View generation cycle and the GAN losses.
//!
//! Sign convention for the adversarial term: the discriminator objective is
//! written as a maximization of `log D(x) + log(1 - D(g))`; we minimize its
//! negation, so `disc_loss` is a sum of binary cross-entropies that is
//! non-negative and tends to zero for a perfectly confident discriminator.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::layers::softplus;
use crate::nets::NetworkBundle;
use crate::world::{Dataset, StructureMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossConfig {
    pub lambda_img: f64,
    pub lambda_feat: f64,
    /// How many times the real-image term enters the discriminator loss.
    /// Three matches one real term per generated image.
    pub real_term_repeats: u32,
}

impl Default for GanLossConfig {
    fn default() -> Self {
        GanLossConfig {
            lambda_img: 5.0,
            lambda_feat: 5.0,
            real_term_repeats: 3,
        }
    }
}

impl GanLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_img >= 0.0 && self.lambda_feat >= 0.0) {
            return Err(Error::Config("GAN loss weights must be nonnegative".into()));
        }
        if self.real_term_repeats == 0 {
            return Err(Error::Config("real_term_repeats must be positive".into()));
        }
        Ok(())
    }

    /// `lambda_img * img + lambda_feat * feat + adv`.
    pub fn combine(&self, img: f64, feat: f64, adv: f64) -> f64 {
        self.lambda_img * img + self.lambda_feat * feat + adv
    }

    pub fn combine_tensors(&self, img: &Tensor, feat: &Tensor, adv: &Tensor) -> Result<Tensor> {
        Ok(((img * self.lambda_img)? + (feat * self.lambda_feat)?)?.add(adv)?)
    }
}

/// Everything the generative and contrastive losses read from one pass.
#[derive(Clone, Debug)]
pub struct CycleOutputs {
    /// `G(f_id(x), s_ori)`.
    pub x_ori1: Tensor,
    /// `G(f_id(x), s_new)`.
    pub x_new1: Tensor,
    /// `G(f_id(x_new1), s_ori)`.
    pub x_ori2: Tensor,
    pub f: Tensor,
    pub f_id: Tensor,
    pub f_new: Tensor,
    pub f_id_new: Tensor,
    pub f_id_ori2: Tensor,
}

/// Picks a rotation offset uniformly from {45, ..., 315}.
pub fn draw_rotation<R: Rng + ?Sized>(rng: &mut R) -> u32 {
    45 * rng.random_range(1..8u32)
}

/// New structure for sample `index`: its recovered body rotated by a
/// random nonzero offset. Returns the map and the absolute azimuth.
pub fn make_new_structure<R: Rng + ?Sized>(
    dataset: &Dataset,
    index: usize,
    rng: &mut R,
) -> Result<(StructureMap, u32)> {
    let azimuth = (dataset.samples[index].azimuth_deg + draw_rotation(rng)) % 360;
    Ok((dataset.structure(index, azimuth)?, azimuth))
}

pub fn synth_cycle(bundle: &NetworkBundle, x: &Tensor, s_ori: &Tensor, s_new: &Tensor) -> Result<CycleOutputs> {
    if s_ori.dims() != s_new.dims() || s_ori.dim(0)? != x.dim(0)? {
        return Err(Error::invalid(format!(
            "cycle inputs disagree: x {:?}, s_ori {:?}, s_new {:?}",
            x.dims(),
            s_ori.dims(),
            s_new.dims()
        )));
    }
    let id = bundle.encode_identity(x)?;
    let str_ori = bundle.encode_structure(s_ori)?;
    let str_new = bundle.encode_structure(s_new)?;
    let x_ori1 = bundle.decode(&id.f_id, &str_ori)?;
    let x_new1 = bundle.decode(&id.f_id, &str_new)?;
    let id_new = bundle.encode_identity(&x_new1)?;
    let x_ori2 = bundle.decode(&id_new.f_id, &str_ori)?;
    let id_ori2 = bundle.encode_identity(&x_ori2)?;
    Ok(CycleOutputs {
        x_ori1,
        x_new1,
        x_ori2,
        f: id.f,
        f_id: id.f_id,
        f_new: id_new.f,
        f_id_new: id_new.f_id,
        f_id_ori2: id_ori2.f_id,
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean absolute reconstruction error of both cycle outputs.
pub fn loss_img(x: &Tensor, x_ori1: &Tensor, x_ori2: &Tensor) -> Result<Tensor> {
    Ok((mean_abs_diff(x, x_ori1)? + mean_abs_diff(x, x_ori2)?)?)
}

/// Mean absolute error between `f_id` and the identity maps re-encoded from
/// the generated images. Both sides receive gradient.
pub fn loss_feat(f_id: &Tensor, f_id_new: &Tensor, f_id_ori2: &Tensor) -> Result<Tensor> {
    Ok((mean_abs_diff(f_id, f_id_new)? + mean_abs_diff(f_id, f_id_ori2)?)?)
}

/// Average over scales of the per-patch mean of `softplus(sign * logit)`.
fn patch_bce(logits: &[Tensor], target_real: bool) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for l in logits {
        let l = if target_real { l.neg()? } else { l.clone() };
        let term = softplus(&l)?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no discriminator scales"))?;
    Ok((total / logits.len() as f64)?)
}

/// Discriminator loss from raw logits: `repeats` real terms plus one fake
/// term per generated image.
pub fn disc_loss_from_logits(real: &[Tensor], fakes: &[Vec<Tensor>], repeats: u32) -> Result<Tensor> {
    let mut loss = (patch_bce(real, true)? * repeats as f64)?;
    for fake in fakes {
        loss = (loss + patch_bce(fake, false)?)?;
    }
    Ok(loss)
}

/// Non-saturating generator loss: `-log D(g)` summed over generated images.
pub fn gen_adv_loss_from_logits(fakes: &[Vec<Tensor>]) -> Result<Tensor> {
    let mut loss: Option<Tensor> = None;
    for fake in fakes {
        let term = patch_bce(fake, true)?;
        loss = Some(match loss {
            None => term,
            Some(l) => (l + term)?,
        });
    }
    loss.ok_or_else(|| Error::invalid("no generated images"))
}

/// Discriminator loss; generated images are detached so only D learns.
pub fn disc_loss(bundle: &NetworkBundle, cfg: &GanLossConfig, x: &Tensor, generated: &[&Tensor]) -> Result<Tensor> {
    let real = bundle.discriminate(x)?;
    let fakes = generated
        .iter()
        .map(|g| bundle.discriminate(&g.detach()))
        .collect::<Result<Vec<_>>>()?;
    disc_loss_from_logits(&real, &fakes, cfg.real_term_repeats)
}

/// Generator-side adversarial loss through the current discriminator.
pub fn gen_adv_loss(bundle: &NetworkBundle, generated: &[&Tensor]) -> Result<Tensor> {
    let fakes = generated
        .iter()
        .map(|g| bundle.discriminate(g))
        .collect::<Result<Vec<_>>>()?;
    gen_adv_loss_from_logits(&fakes)
}

/// Both adversarial scalars for the three cycle images:
/// `(discriminator loss, generator loss)`.
pub fn loss_adv(
    bundle: &NetworkBundle,
    cfg: &GanLossConfig,
    x: &Tensor,
    x_ori1: &Tensor,
    x_new1: &Tensor,
    x_ori2: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let generated = [x_ori1, x_new1, x_ori2];
    Ok((
        disc_loss(bundle, cfg, x, &generated)?,
        gen_adv_loss(bundle, &generated)?,
    ))
}

/// The weighted generator objective and its parts.
#[derive(Clone, Debug)]
pub struct GanTerms {
    pub img: Tensor,
    pub feat: Tensor,
    pub adv: Tensor,
    pub total: Tensor,
}

pub fn loss_gan(cfg: &GanLossConfig, img: Tensor, feat: Tensor, adv: Tensor) -> Result<GanTerms> {
    let total = cfg.combine_tensors(&img, &feat, &adv)?;
    Ok(GanTerms { img, feat, adv, total })
}
