//! Identity-preserving stochastic image transforms.

use rand::Rng;

use super::Image;

/// One draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Fraction of the image area kept by the crop, in `[0.8, 1]`.
    pub crop_area: f32,
    /// Crop origin as a fraction of the slack on each axis, in `[0, 1]`.
    pub crop_x: f32,
    pub crop_y: f32,
    /// Additive brightness shift in `[-0.2, 0.2]`.
    pub brightness: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        crop_area: 1.0,
        crop_x: 0.0,
        crop_y: 0.0,
        brightness: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            crop_area: rng.random_range(0.8..=1.0),
            crop_x: rng.random(),
            crop_y: rng.random(),
            brightness: rng.random_range(-0.2..=0.2),
        }
    }
}

fn bilinear(img: &Image, c: usize, y: f32, x: f32) -> f32 {
    let (_, h, w) = img.shape();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Apply a fixed draw: horizontal flip, crop-and-resize, brightness, clamp.
pub fn augment_with(x: &Image, params: &AugmentParams) -> Image {
    let (ch, h, w) = x.shape();
    let side = params.crop_area.clamp(0.0, 1.0).sqrt();
    let (crop_h, crop_w) = (side * h as f32, side * w as f32);
    let y0 = params.crop_y * (h as f32 - crop_h);
    let x0 = params.crop_x * (w as f32 - crop_w);
    let resized = crop_h < h as f32 || crop_w < w as f32;
    let mut out = Image::filled(ch, h, w, 0.0);
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                let sj = if params.flip { w - 1 - j } else { j };
                let v = if resized {
                    let sy = y0 + (i as f32 + 0.5) * crop_h / h as f32 - 0.5;
                    let sx = x0 + (sj as f32 + 0.5) * crop_w / w as f32 - 0.5;
                    bilinear(x, c, sy, sx)
                } else {
                    x.get(c, i, sj)
                };
                out.set(c, i, j, (v + params.brightness).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Draw parameters from `rng` and apply them.
pub fn augment<R: Rng + ?Sized>(x: &Image, rng: &mut R) -> Image {
    augment_with(x, &AugmentParams::sample(rng))
}
