//! l-infinity projection, perturbation extraction and the inference-time attack.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::nets::{Embedder, Generator};
use crate::saliency_mask::{apply_mask_t, batch_masks};

/// Perturbation budget, given on the 0-255 pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    epsilon_255: f64,
}

impl AttackBudget {
    pub fn new(epsilon_255: f64) -> Result<Self> {
        if !(epsilon_255 > 0.0 && epsilon_255 <= 255.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be in (0, 255], got {epsilon_255}"
            )));
        }
        Ok(Self { epsilon_255 })
    }

    pub fn epsilon_255(&self) -> f64 {
        self.epsilon_255
    }

    /// Radius on the internal `[0, 1]` scale.
    pub fn epsilon(&self) -> f64 {
        self.epsilon_255 / 255.0
    }

    /// The radius used by all `f32` image arithmetic.
    pub fn epsilon_f32(&self) -> f32 {
        self.epsilon() as f32
    }
}

/// Clamp bounds for one pixel, nudged by one ulp where rounding of `x -+ eps`
/// would otherwise let `|out - x|` exceed `eps` in `f32` arithmetic.
#[inline]
fn bounds(x: f32, eps: f32) -> (f32, f32) {
    let mut lo = (x - eps).max(0.0);
    while x - lo > eps {
        lo = lo.next_up();
    }
    let mut hi = (x + eps).min(1.0);
    while hi - x > eps {
        hi = hi.next_down();
    }
    (lo, hi)
}

/// `clamp(raw, max(x - eps, 0), min(x + eps, 1))`, elementwise. NaN maps to
/// the lower bound.
pub fn project_linf_slice(raw: &[f32], x: &[f32], eps: f32) -> Result<Vec<f32>> {
    if raw.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", x.len()),
            got: format!("{} values", raw.len()),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {eps}")));
    }
    Ok(raw
        .iter()
        .zip(x)
        .map(|(&r, &c)| {
            let (lo, hi) = bounds(c, eps);
            r.max(lo).min(hi)
        })
        .collect())
}

pub fn project_linf(raw: &Image, x: &Image, eps: f32) -> Result<Image> {
    if raw.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", raw.shape()),
        });
    }
    let (c, h, w) = x.shape();
    Image::new(c, h, w, project_linf_slice(raw.data(), x.data(), eps)?)
}

fn values(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Tensor projection. The forward value is exactly [`project_linf_slice`];
/// the gradient with respect to `raw` is the identity (straight-through).
pub fn project_linf_t(raw: &Tensor, x: &Tensor, eps: f32) -> Result<Tensor> {
    if raw.dims() != x.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?}", raw.dims()),
        });
    }
    let projected = project_linf_slice(&values(raw)?, &values(x)?, eps)?;
    let exact = Tensor::from_vec(projected, raw.dims(), raw.device())?.to_dtype(raw.dtype())?;
    straight_through(&exact, raw)
}

/// Value of `value`, gradient of `carrier`.
pub(crate) fn straight_through(value: &Tensor, carrier: &Tensor) -> Result<Tensor> {
    // carrier - carrier is exactly zero in value but keeps the graph edge
    let zero = (carrier - carrier.detach())?;
    Ok((value + zero)?)
}

/// `delta = x - x_adv`; the adversarial image is `x - delta`.
pub fn extract_perturbation(x: &Image, x_adv: &Image) -> Result<Image> {
    if x.shape() != x_adv.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", x_adv.shape()),
        });
    }
    let (c, h, w) = x.shape();
    let data = x.data().iter().zip(x_adv.data()).map(|(a, b)| a - b).collect();
    Image::new(c, h, w, data)
}

pub fn extract_perturbation_t(x: &Tensor, x_adv: &Tensor) -> Result<Tensor> {
    Ok((x - x_adv)?)
}

/// Largest `|x_adv - x|` and whether every element is within `eps` and `[0, 1]`,
/// evaluated in `f32` exactly as stored.
pub fn budget_report(x_adv: &[f32], x: &[f32], eps: f32) -> (f32, bool) {
    let mut worst = 0.0f32;
    let mut ok = x_adv.len() == x.len();
    for (&a, &c) in x_adv.iter().zip(x) {
        let d = (a - c).abs();
        worst = worst.max(d);
        ok &= d <= eps && (0.0..=1.0).contains(&a);
    }
    (worst, ok)
}

pub(crate) fn assert_budget(x_adv: &Tensor, x: &Tensor, eps: f32) -> Result<f32> {
    let (worst, ok) = budget_report(&values(x_adv)?, &values(x)?, eps);
    if !ok {
        return Err(Error::BudgetViolation(format!(
            "max |x_adv - x| = {worst:e} against eps {eps:e}, or pixel outside [0,1]"
        )));
    }
    Ok(worst)
}

/// Saliency-mask inputs for inference-time masking.
pub struct MaskSource<'a> {
    pub embedder: &'a dyn Embedder,
    pub margin: f64,
    pub seed: u64,
}

/// `Pi(G(x'))` with `x' = x` or its masked version. Deterministic.
pub fn attack(
    generator: &Generator,
    x: &Tensor,
    budget: &AttackBudget,
    mask: Option<&MaskSource<'_>>,
) -> Result<Tensor> {
    let x = x.detach().to_dtype(DType::F32)?;
    let input = match mask {
        None => x.clone(),
        Some(src) => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(src.seed);
            let m = batch_masks(src.embedder, &x, src.margin, &mut rng)?;
            apply_mask_t(&x, &m)?
        }
    };
    let raw = generator.forward(&input)?.detach();
    let out = project_linf_t(&raw, &x, budget.epsilon_f32())?.detach();
    assert_budget(&out, &x, budget.epsilon_f32())?;
    Ok(out)
}
