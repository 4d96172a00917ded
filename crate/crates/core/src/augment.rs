//! Traditional data augmentation: flip, padded crop, color jitter, erase.

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_pad: usize,
    pub jitter: f32,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_pad: 8,
            jitter: 0.1,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
        }
    }
}

pub fn hflip(image: &Array3<f32>) -> Array3<f32> {
    image.slice(s![.., .., ..;-1]).to_owned()
}

/// Zero-pads by `pad` on every side and crops back to the original size at
/// offset `(dy, dx)` in the padded frame.
pub fn pad_crop(image: &Array3<f32>, pad: usize, dy: usize, dx: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut padded = Array3::<f32>::zeros((c, h + 2 * pad, w + 2 * pad));
    padded.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(image);
    padded.slice(s![.., dy..dy + h, dx..dx + w]).to_owned()
}

pub fn augment<R: Rng + ?Sized>(image: &Array3<f32>, cfg: &AugmentConfig, rng: &mut R) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = if rng.random_bool(cfg.flip_prob) {
        hflip(image)
    } else {
        image.clone()
    };
    if cfg.crop_pad > 0 {
        let dy = rng.random_range(0..=2 * cfg.crop_pad);
        let dx = rng.random_range(0..=2 * cfg.crop_pad);
        out = pad_crop(&out, cfg.crop_pad, dy, dx);
    }
    if cfg.jitter > 0.0 {
        for ch in 0..c {
            let shift = rng.random_range(-cfg.jitter..=cfg.jitter);
            out.slice_mut(s![ch, .., ..])
                .mapv_inplace(|v| (v + shift).clamp(0.0, 1.0));
        }
    }
    if rng.random_bool(cfg.erase_prob) {
        let area = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * (h * w) as f64;
        let aspect: f64 = rng.random_range(0.3f64..3.3);
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let y = rng.random_range(0..=h - eh);
        let x = rng.random_range(0..=w - ew);
        for ch in 0..c {
            let fill = rng.random_range(0.0f32..1.0);
            out.slice_mut(s![ch, y..y + eh, x..x + ew]).fill(fill);
        }
    }
    out
}
