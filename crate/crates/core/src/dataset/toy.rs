//! Procedural "pedestrian" images for desk-scale experiments.
//!
//! Each identity gets a fixed outfit (torso color, torso pattern, leg color,
//! head tone). Every rendering of that identity varies position, brightness
//! and background, so identity is recoverable from appearance but not from
//! raw pixel positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Image, Sample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Plain,
    Horizontal(usize),
    Vertical(usize),
    Checker(usize),
}

#[derive(Debug, Clone)]
struct Outfit {
    torso: [f32; 3],
    legs: [f32; 3],
    head: [f32; 3],
    pattern: Pattern,
    torso_width: f32,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32;
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw_outfit(rng: &mut ChaCha8Rng, index: usize, num_ids: usize) -> Outfit {
    let hue = (index as f32 + rng.random_range(-0.3..0.3)) / num_ids as f32;
    let torso = hsv_to_rgb(hue, rng.random_range(0.55..1.0), rng.random_range(0.55..1.0));
    let legs = hsv_to_rgb(
        rng.random::<f32>(),
        rng.random_range(0.2..0.9),
        rng.random_range(0.25..0.9),
    );
    let tone = rng.random_range(0.55..0.9);
    let head = [tone, tone * 0.8, tone * 0.65];
    let period = rng.random_range(2..5);
    let pattern = match rng.random_range(0..4) {
        0 => Pattern::Plain,
        1 => Pattern::Horizontal(period),
        2 => Pattern::Vertical(period),
        _ => Pattern::Checker(period),
    };
    Outfit {
        torso,
        legs,
        head,
        pattern,
        torso_width: rng.random_range(0.32..0.46),
    }
}

fn render(outfit: &Outfit, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f32;
    let dx = rng.random_range(-0.08..0.08) * s;
    let dy = rng.random_range(-0.06..0.06) * s;
    let brightness = rng.random_range(0.85..1.15f32);
    let bg_base = rng.random_range(0.25..0.75f32);
    let bg_tint = [
        rng.random_range(-0.05..0.05f32),
        rng.random_range(-0.05..0.05f32),
        rng.random_range(-0.05..0.05f32),
    ];
    let bg_slope = rng.random_range(-0.15..0.15f32);

    let cx = s * 0.5 + dx;
    let head_cy = s * 0.16 + dy;
    let head_r = s * 0.09;
    let torso_top = s * 0.27 + dy;
    let torso_bottom = s * 0.60 + dy;
    let torso_half = s * outfit.torso_width * 0.5;
    let legs_bottom = s * 0.95 + dy;
    let legs_half = s * 0.15;

    let mut img = Image::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let noise: f32 = rng.random_range(-0.03..0.03);
            let mut rgb = [0.0f32; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = bg_base + bg_tint[c] + bg_slope * (fy / s - 0.5);
            }
            let in_head = (fx - cx).powi(2) + (fy - head_cy).powi(2) <= head_r * head_r;
            let in_torso =
                (fx - cx).abs() <= torso_half && fy >= torso_top && fy < torso_bottom;
            let in_legs = (fx - cx).abs() <= legs_half && fy >= torso_bottom && fy < legs_bottom;
            if in_head {
                rgb = outfit.head;
            } else if in_torso {
                let lx = (fx - (cx - torso_half)).max(0.0) as usize;
                let ly = (fy - torso_top).max(0.0) as usize;
                let dark = match outfit.pattern {
                    Pattern::Plain => false,
                    Pattern::Horizontal(p) => (ly / p) % 2 == 1,
                    Pattern::Vertical(p) => (lx / p) % 2 == 1,
                    Pattern::Checker(p) => (lx / p + ly / p) % 2 == 1,
                };
                rgb = outfit.torso;
                if dark {
                    rgb.iter_mut().for_each(|v| *v *= 0.45);
                }
            } else if in_legs {
                rgb = outfit.legs;
                // gap between the legs
                if (fx - cx).abs() < s * 0.025 && fy > torso_bottom + s * 0.06 {
                    rgb = [
                        bg_base + bg_tint[0],
                        bg_base + bg_tint[1],
                        bg_base + bg_tint[2],
                    ];
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, y, x, (v * brightness + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Deterministic synthetic re-ID dataset.
///
/// Per identity, the first `imgs_per_id / 2` renderings go to the gallery,
/// the next one is the query, and the rest form the `meta_train` split.
pub fn generate_toy_dataset(
    num_ids: usize,
    imgs_per_id: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_ids < 2 {
        return Err(Error::InvalidArgument(format!(
            "num_ids must be >= 2, got {num_ids}"
        )));
    }
    if imgs_per_id < 2 {
        return Err(Error::InvalidArgument(format!(
            "imgs_per_id must be >= 2, got {imgs_per_id}"
        )));
    }
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be >= 16, got {image_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outfits: Vec<Outfit> = (0..num_ids)
        .map(|i| draw_outfit(&mut rng, i, num_ids))
        .collect();
    let gallery_count = imgs_per_id / 2;
    let mut samples = Vec::with_capacity(num_ids * imgs_per_id);
    for (id, outfit) in outfits.iter().enumerate() {
        for j in 0..imgs_per_id {
            let split = if j < gallery_count {
                Split::Gallery
            } else if j == gallery_count {
                Split::Query
            } else {
                Split::MetaTrain
            };
            samples.push(Sample {
                path: None,
                image: render(outfit, image_size, &mut rng),
                identity: Some(id),
                camera: None,
                split,
            });
        }
    }
    Ok(Dataset::new(format!("toy-s{seed}"), samples)?)
}
