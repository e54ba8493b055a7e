use super::image::{CanvasImage, Mask, WordImage, CANVAS_HEIGHT, CANVAS_WIDTH, CHANNELS, WHITE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image: WordImage,
    pub top: usize,
    pub left: usize,
    /// Ink center of mass `(row, col)` in source coordinates (diagnostic only).
    pub center_of_mass: (f64, f64),
}

/// Minimal axis-aligned bounding box of all foreground pixels.
pub fn tight_crop(image: &WordImage, mask: &Mask) -> Result<Crop> {
    if mask.height != image.height || mask.width != image.width {
        return Err(Error::shape(
            format!("{}x{} mask", image.height, image.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("mask has no foreground pixels".into()));
    }
    Ok(Crop {
        image: image.crop(y0, x0, y1 - y0 + 1, x1 - x0 + 1),
        top: y0,
        left: x0,
        center_of_mass: (sy / n as f64, sx / n as f64),
    })
}

/// Center-crop dimensions above 64x128, pad those below symmetrically with
/// white (the odd pixel, if any, goes to the bottom/right).
pub fn fit_to_canvas(image: &WordImage) -> CanvasImage {
    let mut out = WordImage::filled(CANVAS_HEIGHT, CANVAS_WIDTH, WHITE);
    // (source start, destination start, length) along one axis.
    let place = |size: usize, target: usize| {
        if size >= target {
            ((size - target) / 2, 0, target)
        } else {
            (0, (target - size) / 2, size)
        }
    };
    let (sy, dy, h) = place(image.height, CANVAS_HEIGHT);
    let (sx, dx, w) = place(image.width, CANVAS_WIDTH);
    for row in 0..h {
        let src = image.idx(sy + row, sx);
        let dst = out.idx(dy + row, dx);
        out.data[dst..dst + w * CHANNELS].copy_from_slice(&image.data[src..src + w * CHANNELS]);
    }
    CanvasImage {
        image: out,
        normalized: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn mask_from(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Mask {
        Mask {
            height: h,
            width: w,
            data: (0..h * w).map(|i| on(i / w, i % w)).collect(),
        }
    }

    #[test]
    fn single_pixel() {
        let img = WordImage::filled(30, 40, 255.0);
        let c = tight_crop(&img, &mask_from(30, 40, |y, x| y == 10 && x == 20)).unwrap();
        assert_eq!((c.image.height, c.image.width, c.top, c.left), (1, 1, 10, 20));
        assert_eq!(c.center_of_mass, (10.0, 20.0));
    }

    #[test]
    fn block_of_ink() {
        let img = WordImage::filled(30, 50, 255.0);
        let c = tight_crop(
            &img,
            &mask_from(30, 50, |y, x| (5..=15).contains(&y) && (8..=40).contains(&x)),
        )
        .unwrap();
        assert_eq!((c.image.height, c.image.width), (11, 33));
    }

    #[test]
    fn empty_mask_errors() {
        let img = WordImage::filled(3, 3, 255.0);
        assert!(tight_crop(&img, &mask_from(3, 3, |_, _| false)).is_err());
    }

    #[test]
    fn random_sparse_masks_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..40), rng.random_range(1..60));
            let mut m = mask_from(h, w, |_, _| false);
            for v in &mut m.data {
                *v = rng.random_bool(0.05);
            }
            if m.count() == 0 {
                m.data[0] = true;
            }
            let coords: Vec<(usize, usize)> = (0..h * w).filter(|&i| m.data[i]).map(|i| (i / w, i % w)).collect();
            let ymin = coords.iter().map(|c| c.0).min().unwrap();
            let ymax = coords.iter().map(|c| c.0).max().unwrap();
            let xmin = coords.iter().map(|c| c.1).min().unwrap();
            let xmax = coords.iter().map(|c| c.1).max().unwrap();
            let img = WordImage::filled(h, w, 0.0);
            let c = tight_crop(&img, &m).unwrap();
            assert_eq!((c.top, c.left), (ymin, xmin));
            assert_eq!((c.image.height, c.image.width), (ymax - ymin + 1, xmax - xmin + 1));
        }
    }

    fn ramp(h: usize, w: usize) -> WordImage {
        let data = (0..h * w * CHANNELS).map(|i| (i % 251) as f32).collect();
        WordImage::new(h, w, data).unwrap()
    }

    #[test]
    fn exact_size_is_identity() {
        let img = ramp(64, 128);
        assert_eq!(fit_to_canvas(&img).image, img);
    }

    #[test]
    fn small_image_padded_symmetrically() {
        let img = WordImage::filled(32, 60, 0.0);
        let c = fit_to_canvas(&img).image;
        let ink_rows: Vec<usize> = (0..64).filter(|&y| c.pixel(y, 64)[0] == 0.0).collect();
        let ink_cols: Vec<usize> = (0..128).filter(|&x| c.pixel(32, x)[0] == 0.0).collect();
        assert_eq!((ink_rows[0], *ink_rows.last().unwrap()), (16, 47));
        // 68 columns of padding: 34 on each side.
        assert_eq!((ink_cols[0], *ink_cols.last().unwrap()), (34, 93));
        assert_eq!(c.pixel(0, 0), [WHITE; 3]);
    }

    #[test]
    fn large_image_center_cropped() {
        let img = ramp(100, 200);
        let c = fit_to_canvas(&img).image;
        assert_eq!(c, img.crop(18, 36, 64, 128));
    }

    #[test]
    fn fit_is_idempotent() {
        for (h, w) in [(10, 10), (80, 90), (64, 300), (1, 1)] {
            let once = fit_to_canvas(&ramp(h, w)).image;
            assert_eq!(fit_to_canvas(&once).image, once);
        }
    }
}
