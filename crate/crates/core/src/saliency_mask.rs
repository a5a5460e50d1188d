//! Input-gradient transferability mask.
//!
//! For a clean anchor `x`, its augmented copy `x_p` and the batch member `x_n`
//! farthest from it in embedding space, the mask is
//! `M = sigmoid(|d/dx L_adv(f(x), f(x_n), f(x_p))|)`, and the generator sees
//! `x * (1 - M)`. Pixels with large gradients are suppressed the most.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::dataset::{augment, euclidean, Image};
use crate::error::{Error, Result};
use crate::nets::{embed_images, Embedder};
use crate::objectives::{hinge_t, row_distance_t};

/// Per-pixel mask with values in `[0.5, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Image,
    pub source_model: String,
    pub anchor_id: usize,
}

/// Index of the batch member farthest from `anchor` (lowest index on ties).
pub fn farthest_negative(embeddings: &[Vec<f32>], anchor: usize) -> Result<usize> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument(
            "mask triplets need a batch of at least 2".into(),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, e) in embeddings.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let d = euclidean(&embeddings[anchor], e);
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((j, d));
        }
    }
    Ok(best.expect("at least one candidate").0)
}

/// The clean triplet used for the mask of `batch[anchor]`.
#[derive(Debug, Clone)]
pub struct MaskTriplet {
    pub anchor: usize,
    pub negative: usize,
    pub positive: Image,
}

pub fn mask_triplet_for<R: Rng + ?Sized>(
    anchor: usize,
    batch: &[Image],
    f: &dyn Embedder,
    rng: &mut R,
) -> Result<MaskTriplet> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "mask triplets need a batch of at least 2".into(),
        ));
    }
    let refs: Vec<&Image> = batch.iter().collect();
    let emb = embed_images(f, &refs, 64)?;
    let negative = farthest_negative(&emb, anchor)?;
    Ok(MaskTriplet {
        anchor,
        negative,
        positive: augment(&batch[anchor], rng),
    })
}

/// Largest representable value below one for the dtype.
fn below_one(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1.0 - f64::EPSILON / 2.0,
        _ => (1.0 - f32::EPSILON / 2.0) as f64,
    }
}

/// Masks for a whole batch of anchors with matching negatives and positives.
///
/// Each anchor row only influences its own loss term, so one backward pass of
/// the summed losses yields every per-sample gradient.
pub fn compute_masks_t(
    f: &dyn Embedder,
    x: &Tensor,
    x_n: &Tensor,
    x_p: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    if x.dims() != x_n.dims() || x.dims() != x_p.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?} / {:?}", x_n.dims(), x_p.dims()),
        });
    }
    let anchor = Var::from_tensor(&x.detach())?;
    let ea = f.forward(anchor.as_tensor())?;
    let en = f.forward(&x_n.detach())?.detach();
    let ep = f.forward(&x_p.detach())?.detach();
    let raw = (row_distance_t(&ea, &en)? - row_distance_t(&ea, &ep)?)?.affine(1.0, margin)?;
    let loss = hinge_t(&raw)?.sum_all()?;
    let grads = loss.backward()?;
    let g = match grads.get(anchor.as_tensor()) {
        Some(g) => g.clone(),
        None => anchor.as_tensor().zeros_like()?,
    };
    let m = g
        .abs()?
        .neg()?
        .exp()?
        .affine(1.0, 1.0)?
        .recip()?
        .minimum(below_one(g.dtype()))?;
    Ok(m.to_dtype(x.dtype())?)
}

/// Mask for a single clean image.
pub fn compute_mask(
    f: &dyn Embedder,
    x: &Image,
    x_n: &Image,
    x_p: &Image,
    margin: f64,
    anchor_id: usize,
) -> Result<Mask> {
    let dev = Device::Cpu;
    let m = compute_masks_t(f, &x.to_tensor(&dev)?, &x_n.to_tensor(&dev)?, &x_p.to_tensor(&dev)?, margin)?;
    Ok(Mask {
        values: Image::unstack(&m)?.remove(0),
        source_model: f.name().to_string(),
        anchor_id,
    })
}

/// Mine mask triplets for every batch member and return the stacked masks.
pub fn batch_masks<R: Rng + ?Sized>(
    f: &dyn Embedder,
    x: &Tensor,
    margin: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let images = Image::unstack(x)?;
    if images.len() < 2 {
        return Err(Error::InvalidArgument(
            "mask triplets need a batch of at least 2".into(),
        ));
    }
    let refs: Vec<&Image> = images.iter().collect();
    let emb = embed_images(f, &refs, 64)?;
    let mut negatives = Vec::with_capacity(images.len());
    let mut positives = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        negatives.push(farthest_negative(&emb, i)? as u32);
        positives.push(augment(img, rng));
    }
    let idx = Tensor::new(negatives.as_slice(), x.device())?;
    let x_n = x.index_select(&idx, 0)?;
    let pos_refs: Vec<&Image> = positives.iter().collect();
    let x_p = Image::stack(&pos_refs, x.device())?.to_dtype(x.dtype())?;
    compute_masks_t(f, x, &x_n, &x_p, margin)
}

/// `x * (1 - M)`.
pub fn apply_mask(x: &Image, mask: &Mask) -> Result<Image> {
    if x.shape() != mask.values.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", mask.values.shape()),
        });
    }
    let (c, h, w) = x.shape();
    let data = x
        .data()
        .iter()
        .zip(mask.values.data())
        .map(|(v, m)| v * (1.0 - m))
        .collect();
    Image::new(c, h, w, data)
}

pub fn apply_mask_t(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?}", mask.dims()),
        });
    }
    Ok(x.mul(&mask.affine(-1.0, 1.0)?)?)
}

/// Grayscale `(1 - M)` averaged over channels, rescaled from `(0, 0.5]` to
/// the full 8-bit range.
pub fn save_mask_image(mask: &Mask, path: &Path) -> Result<()> {
    let (c, h, w) = mask.values.shape();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let mean: f32 = (0..c)
            .map(|ch| 1.0 - mask.values.get(ch, y as usize, x as usize))
            .sum::<f32>()
            / c as f32;
        image::Luma([((mean * 2.0) * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::LinearEmbedder;

    #[test]
    fn farthest_unique() {
        let e = vec![vec![0.0], vec![1.0], vec![7.0], vec![3.0]];
        assert_eq!(farthest_negative(&e, 0).unwrap(), 2);
    }

    #[test]
    fn farthest_tie_goes_to_lowest() {
        let e = vec![vec![0.0], vec![-5.0], vec![5.0]];
        assert_eq!(farthest_negative(&e, 0).unwrap(), 1);
    }

    #[test]
    fn singleton_batch_is_fatal() {
        assert!(farthest_negative(&[vec![0.0]], 0).is_err());
    }

    #[test]
    fn inactive_hinge_gives_half_mask() {
        // f is the identity on two pixels; the hinge is inactive because the
        // positive is farther than the negative by more than the margin
        let w = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let f = LinearEmbedder::new(w, (1, 1, 2)).unwrap();
        let x = Image::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let xn = Image::new(1, 1, 2, vec![0.1, 0.0]).unwrap();
        let xp = Image::new(1, 1, 2, vec![0.0, 0.9]).unwrap();
        let m = compute_mask(&f, &x, &xn, &xp, 0.1, 0).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.5));
        let masked = apply_mask(&Image::new(1, 1, 2, vec![0.8, 0.3]).unwrap(), &m).unwrap();
        assert_eq!(masked.data(), &[0.4, 0.15]);
    }

    #[test]
    fn zero_image_stays_zero() {
        let m = Mask {
            values: Image::filled(3, 2, 2, 0.77),
            source_model: "x".into(),
            anchor_id: 0,
        };
        let out = apply_mask(&Image::filled(3, 2, 2, 0.0), &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_fatal() {
        let m = Mask {
            values: Image::filled(3, 2, 2, 0.5),
            source_model: "x".into(),
            anchor_id: 0,
        };
        assert!(apply_mask(&Image::filled(3, 2, 3, 0.1), &m).is_err());
    }

    #[test]
    fn huge_gradients_stay_below_one() {
        let w = Tensor::new(&[[1e6f64, 0.0], [0.0, 1e6]], &Device::Cpu).unwrap();
        let f = LinearEmbedder::new(w, (1, 1, 2)).unwrap();
        let x = Image::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let xn = Image::new(1, 1, 2, vec![0.9, 0.5]).unwrap();
        let xp = Image::new(1, 1, 2, vec![0.5, 0.5001]).unwrap();
        let m = compute_mask(&f, &x, &xn, &xp, 1.0, 0).unwrap();
        assert!(m.values.data().iter().all(|&v| (0.5..1.0).contains(&v)));
    }
}
