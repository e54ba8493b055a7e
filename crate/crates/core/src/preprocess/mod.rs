//! Word image preparation: Otsu binarization, tight crop, 64x128 canvas
//! fitting, positive-pair augmentation and 32x32 patch tiling.

mod augment;
mod crop;
mod image;
mod otsu;
mod patch;

use std::path::Path;

pub use self::augment::{augment_pair, augment_view, resize_bilinear, AugmentConfig};
pub use self::crop::{fit_to_canvas, tight_crop, Crop};
pub use self::image::{
    load_word_image, luma, CanvasImage, GrayImage, Mask, WordImage, CANVAS_HEIGHT, CANVAS_WIDTH, CHANNELS, WHITE,
};
pub use self::otsu::{between_class_variance, histogram, otsu_threshold, OtsuResult};
pub use self::patch::{patchify, PatchBatch, PATCHES_PER_IMAGE, PATCH_COLS, PATCH_ROWS, PATCH_SIZE};

use crate::error::{Error, Result};

/// Otsu -> tight crop -> canvas. Images without two intensity levels carry
/// no ink to crop around and are fitted whole.
pub fn prepare_canvas(word: &WordImage) -> CanvasImage {
    match otsu_threshold(&word.to_gray()) {
        Ok(otsu) => match tight_crop(word, &otsu.mask) {
            Ok(crop) => fit_to_canvas(&crop.image),
            Err(_) => fit_to_canvas(word),
        },
        Err(Error::DegenerateInput(_)) => fit_to_canvas(word),
        Err(e) => unreachable!("otsu only fails on degenerate input: {e}"),
    }
}

pub fn load_canvas(path: &Path) -> Result<CanvasImage> {
    Ok(prepare_canvas(&load_word_image(path)?))
}
