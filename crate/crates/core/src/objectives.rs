//! Scalar losses.
//!
//! Every loss exists twice: a plain `f64` form over slices, and a tensor form
//! used inside training so that gradients flow through candle's autograd.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mis-ranking hinge `max(|a - n| - |a - p| + m, 0)`.
///
/// Minimizing it pulls the anchor towards the negative and pushes it away from
/// the positive, the reverse of a metric-learning triplet loss.
pub fn adv_triplet_loss(anchor: &[f64], negative: &[f64], positive: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != negative.len() || anchor.len() != positive.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("three vectors of length {}", anchor.len()),
            got: format!("lengths {}, {}", negative.len(), positive.len()),
        });
    }
    Ok((l2(anchor, negative) - l2(anchor, positive) + margin).max(0.0))
}

/// Mean of [`adv_triplet_loss`] over `(anchor, negative, positive)` triples.
pub fn adv_triplet_loss_mean(triplets: &[(&[f64], &[f64], &[f64])], margin: f64) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("no triplets".into()));
    }
    let mut total = 0.0;
    for (a, n, p) in triplets {
        total += adv_triplet_loss(a, n, p, margin)?;
    }
    Ok(total / triplets.len() as f64)
}

/// Per-entry label flips for the discriminator targets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlipMask {
    pub real: Vec<bool>,
    pub fake: Vec<bool>,
}

impl FlipMask {
    pub fn none(real: usize, fake: usize) -> Self {
        Self {
            real: vec![false; real],
            fake: vec![false; fake],
        }
    }

    fn targets(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.real.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect(),
            self.fake.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Binary cross-entropy with logits, targets real=1 / fake=0 except where
/// flipped, averaged over all entries.
pub fn discriminator_loss(real: &[f64], fake: &[f64], flips: &FlipMask) -> Result<f64> {
    if flips.real.len() != real.len() || flips.fake.len() != fake.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("flip mask for {} real / {} fake", real.len(), fake.len()),
            got: format!("{} / {}", flips.real.len(), flips.fake.len()),
        });
    }
    let n = real.len() + fake.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty logit batch".into()));
    }
    let (tr, tf) = flips.targets();
    let sum: f64 = real
        .iter()
        .zip(&tr)
        .chain(fake.iter().zip(&tf))
        .map(|(&z, &t)| softplus(z) - t * z)
        .sum();
    Ok(sum / n as f64)
}

/// Saturating generator loss: mean of `ln(1 - sigmoid(z))`.
pub fn generator_gan_loss(logits_fake: &[f64]) -> Result<f64> {
    if logits_fake.is_empty() {
        return Err(Error::InvalidArgument("empty logit batch".into()));
    }
    Ok(-logits_fake.iter().map(|&z| softplus(z)).sum::<f64>() / logits_fake.len() as f64)
}

/// Non-saturating alternative: mean of `-ln(sigmoid(z))`.
pub fn generator_gan_loss_non_saturating(logits_fake: &[f64]) -> Result<f64> {
    if logits_fake.is_empty() {
        return Err(Error::InvalidArgument("empty logit batch".into()));
    }
    Ok(logits_fake.iter().map(|&z| softplus(-z)).sum::<f64>() / logits_fake.len() as f64)
}

/// A loss value with its named parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

/// `gan + lambda * trip`.
pub fn combined_generator_objective(gan: f64, trip: f64, lambda: f64) -> Result<LossValue> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = lambda * trip;
    let components = BTreeMap::from([
        ("gan".to_string(), gan),
        ("trip".to_string(), trip),
        ("lambda".to_string(), lambda),
        ("weighted_trip".to_string(), weighted),
    ]);
    Ok(LossValue {
        value: gan + weighted,
        components,
    })
}

// ---------------------------------------------------------------------------
// Tensor forms
// ---------------------------------------------------------------------------

/// Elementwise `ln(1 + e^z)`.
pub fn softplus_t(z: &Tensor) -> Result<Tensor> {
    let tail = z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((z.relu()? + tail)?)
}

/// `max(x, 0)` with subgradient 0 at the kink.
pub fn hinge_t(x: &Tensor) -> Result<Tensor> {
    let active = x.gt(0.0)?.to_dtype(x.dtype())?;
    Ok(x.mul(&active)?)
}

/// Row-wise Euclidean distance. Exactly coincident rows get distance ~1e-12
/// and zero gradient instead of NaN.
pub fn row_distance_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sq = (a - b)?.sqr()?.sum(1)?;
    Ok(sq.maximum(1e-24)?.sqrt()?)
}

/// Mean mis-ranking hinge over rows of `N x d` embeddings.
pub fn adv_triplet_loss_t(anchor: &Tensor, negative: &Tensor, positive: &Tensor, margin: f64) -> Result<Tensor> {
    if anchor.dims() != negative.dims() || anchor.dims() != positive.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", anchor.dims()),
            got: format!("{:?} / {:?}", negative.dims(), positive.dims()),
        });
    }
    let d_an = row_distance_t(anchor, negative)?;
    let d_ap = row_distance_t(anchor, positive)?;
    let raw = (d_an - d_ap)?.affine(1.0, margin)?;
    Ok(hinge_t(&raw)?.mean_all()?)
}

/// Tensor form of [`discriminator_loss`].
pub fn discriminator_loss_t(real: &Tensor, fake: &Tensor, flips: &FlipMask) -> Result<Tensor> {
    let (tr, tf) = flips.targets();
    if tr.len() != real.elem_count() || tf.len() != fake.elem_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("flip mask for {} real / {} fake", real.elem_count(), fake.elem_count()),
            got: format!("{} / {}", tr.len(), tf.len()),
        });
    }
    let logits = Tensor::cat(&[real.flatten_all()?, fake.flatten_all()?], 0)?;
    let targets = Tensor::from_vec([tr, tf].concat(), logits.elem_count(), logits.device())?
        .to_dtype(logits.dtype())?;
    let per = (softplus_t(&logits)? - logits.mul(&targets)?)?;
    Ok(per.mean_all()?)
}

/// Tensor form of [`generator_gan_loss`].
pub fn generator_gan_loss_t(logits_fake: &Tensor) -> Result<Tensor> {
    Ok(softplus_t(logits_fake)?.mean_all()?.neg()?)
}

/// Tensor form of [`generator_gan_loss_non_saturating`].
pub fn generator_gan_loss_non_saturating_t(logits_fake: &Tensor) -> Result<Tensor> {
    Ok(softplus_t(&logits_fake.neg()?)?.mean_all()?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
