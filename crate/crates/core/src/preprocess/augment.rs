//! Positive-pair generation: color jitter, translation and random resized crop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{luma, CanvasImage, WordImage, CANVAS_HEIGHT, CANVAS_WIDTH, CHANNELS, WHITE};
use crate::seed::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Jitter factors are drawn from `[1 - m, 1 + m]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum shift as a fraction of each dimension.
    pub translate: f64,
    /// Area fraction of the random crop before resizing back to 64x128.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            translate: 0.1,
            crop_scale_min: 0.8,
            crop_scale_max: 1.0,
        }
    }
}

impl AugmentConfig {
    /// All magnitudes zero: both views equal the normalized input.
    pub fn identity() -> Self {
        AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            translate: 0.0,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
        }
    }

    /// Every magnitude scaled by `f` (crop scale moves toward 1).
    pub fn scaled(&self, f: f64) -> Self {
        AugmentConfig {
            brightness: self.brightness * f,
            contrast: self.contrast * f,
            saturation: self.saturation * f,
            translate: self.translate * f,
            crop_scale_min: 1.0 - (1.0 - self.crop_scale_min) * f,
            crop_scale_max: 1.0 - (1.0 - self.crop_scale_max) * f,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

fn clamp_all(img: &mut WordImage) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 255.0);
    }
}

fn color_jitter<R: Rng>(img: &mut WordImage, cfg: &AugmentConfig, rng: &mut R) {
    let b = uniform(rng, (1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness) as f32;
    let c = uniform(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast) as f32;
    let s = uniform(rng, (1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation) as f32;
    if b != 1.0 {
        for v in &mut img.data {
            *v *= b;
        }
        clamp_all(img);
    }
    if c != 1.0 {
        let n = (img.height * img.width) as f32;
        let mean = img
            .data
            .chunks_exact(CHANNELS)
            .map(|p| luma(p[0], p[1], p[2]))
            .sum::<f32>()
            / n;
        for v in &mut img.data {
            *v = mean + c * (*v - mean);
        }
        clamp_all(img);
    }
    if s != 1.0 {
        for p in img.data.chunks_exact_mut(CHANNELS) {
            let g = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = g + s * (*v - g);
            }
        }
        clamp_all(img);
    }
}

/// Integer-pixel shift, exposed area filled with white.
fn translate<R: Rng>(img: &WordImage, cfg: &AugmentConfig, rng: &mut R) -> WordImage {
    let max_dy = cfg.translate * img.height as f64;
    let max_dx = cfg.translate * img.width as f64;
    let dy = uniform(rng, -max_dy, max_dy).round() as isize;
    let dx = uniform(rng, -max_dx, max_dx).round() as isize;
    if dy == 0 && dx == 0 {
        return img.clone();
    }
    let mut out = WordImage::filled(img.height, img.width, WHITE);
    for y in 0..img.height {
        let sy = y as isize - dy;
        if sy < 0 || sy >= img.height as isize {
            continue;
        }
        for x in 0..img.width {
            let sx = x as isize - dx;
            if sx < 0 || sx >= img.width as isize {
                continue;
            }
            let (s, d) = (img.idx(sy as usize, sx as usize), out.idx(y, x));
            out.data[d..d + CHANNELS].copy_from_slice(&img.data[s..s + CHANNELS]);
        }
    }
    out
}

/// Bilinear resize with pixel-center alignment.
pub fn resize_bilinear(img: &WordImage, out_h: usize, out_w: usize) -> WordImage {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    let mut out = WordImage::filled(out_h, out_w, 0.0);
    let sy = img.height as f32 / out_h as f32;
    let sx = img.width as f32 / out_w as f32;
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f32;
            let d = out.idx(y, x);
            for c in 0..CHANNELS {
                let p = |yy: usize, xx: usize| img.data[img.idx(yy, xx) + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.data[d + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn random_resized_crop<R: Rng>(img: &WordImage, cfg: &AugmentConfig, rng: &mut R) -> WordImage {
    let scale = uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max).clamp(0.0, 1.0);
    let side = scale.sqrt();
    let h = ((img.height as f64 * side).round() as usize).clamp(1, img.height);
    let w = ((img.width as f64 * side).round() as usize).clamp(1, img.width);
    let top = rng.random_range(0..=img.height - h);
    let left = rng.random_range(0..=img.width - w);
    resize_bilinear(&img.crop(top, left, h, w), CANVAS_HEIGHT, CANVAS_WIDTH)
}

fn augment_one<R: Rng>(canvas: &CanvasImage, cfg: &AugmentConfig, rng: &mut R) -> CanvasImage {
    let mut img = canvas.image.clone();
    color_jitter(&mut img, cfg, rng);
    let img = translate(&img, cfg, rng);
    let img = random_resized_crop(&img, cfg, rng);
    CanvasImage {
        image: img,
        normalized: false,
    }
    .normalize()
}

/// Two independently augmented, normalized views of an unnormalized canvas.
/// The result is a pure function of `(canvas, cfg, seed)`.
pub fn augment_pair(canvas: &CanvasImage, cfg: &AugmentConfig, seed: u64) -> (CanvasImage, CanvasImage) {
    assert!(!canvas.normalized, "augmentation expects [0, 255] intensities");
    let mut rng = seed::stream(seed, streams::AUGMENT, 0);
    let v1 = augment_one(canvas, cfg, &mut rng);
    let v2 = augment_one(canvas, cfg, &mut rng);
    (v1, v2)
}

/// A single augmented, normalized view (used for light probe-time augmentation).
pub fn augment_view(canvas: &CanvasImage, cfg: &AugmentConfig, seed: u64) -> CanvasImage {
    let mut rng = seed::stream(seed, streams::AUGMENT, 1);
    augment_one(canvas, cfg, &mut rng)
}
