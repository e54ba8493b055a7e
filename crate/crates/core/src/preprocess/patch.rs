use super::image::{CanvasImage, WordImage, CANVAS_HEIGHT, CANVAS_WIDTH, CHANNELS};
use crate::error::{Error, Result};

pub const PATCH_SIZE: usize = 32;
pub const PATCH_ROWS: usize = CANVAS_HEIGHT / PATCH_SIZE;
pub const PATCH_COLS: usize = CANVAS_WIDTH / PATCH_SIZE;
pub const PATCHES_PER_IMAGE: usize = PATCH_ROWS * PATCH_COLS;
const PATCH_LEN: usize = CHANNELS * PATCH_SIZE * PATCH_SIZE;

/// `(N*8) x 3 x 32 x 32` patches, channel-major within each patch.
/// Patch `p` of image `n` sits at index `n*8 + p`; tiles are numbered
/// row-major over the 2x4 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub data: Vec<f32>,
    pub n_images: usize,
}

impl PatchBatch {
    pub fn n_patches(&self) -> usize {
        self.n_images * PATCHES_PER_IMAGE
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n_patches(), CHANNELS, PATCH_SIZE, PATCH_SIZE]
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * PATCH_LEN..(index + 1) * PATCH_LEN]
    }

    /// Append another batch after this one (e.g. the second view).
    pub fn concat(mut self, other: &PatchBatch) -> PatchBatch {
        self.data.extend_from_slice(&other.data);
        self.n_images += other.n_images;
        self
    }

    /// Inverse of `patchify`.
    pub fn reassemble(&self, normalized: bool) -> Vec<CanvasImage> {
        (0..self.n_images)
            .map(|n| {
                let mut img = WordImage::filled(CANVAS_HEIGHT, CANVAS_WIDTH, 0.0);
                for p in 0..PATCHES_PER_IMAGE {
                    let tile = self.patch(n * PATCHES_PER_IMAGE + p);
                    let (ty, tx) = (p / PATCH_COLS * PATCH_SIZE, p % PATCH_COLS * PATCH_SIZE);
                    for c in 0..CHANNELS {
                        for y in 0..PATCH_SIZE {
                            for x in 0..PATCH_SIZE {
                                let i = img.idx(ty + y, tx + x) + c;
                                img.data[i] = tile[(c * PATCH_SIZE + y) * PATCH_SIZE + x];
                            }
                        }
                    }
                }
                CanvasImage { image: img, normalized }
            })
            .collect()
    }
}

pub fn patchify(batch: &[CanvasImage]) -> Result<PatchBatch> {
    let mut data = Vec::with_capacity(batch.len() * PATCHES_PER_IMAGE * PATCH_LEN);
    for canvas in batch {
        let img = &canvas.image;
        if img.height != CANVAS_HEIGHT
            || img.width != CANVAS_WIDTH
            || img.data.len() != CANVAS_HEIGHT * CANVAS_WIDTH * CHANNELS
        {
            return Err(Error::shape(
                format!("{CANVAS_HEIGHT}x{CANVAS_WIDTH}x{CHANNELS} canvas"),
                format!("{}x{} ({} values)", img.height, img.width, img.data.len()),
            ));
        }
        for p in 0..PATCHES_PER_IMAGE {
            let (ty, tx) = (p / PATCH_COLS * PATCH_SIZE, p % PATCH_COLS * PATCH_SIZE);
            for c in 0..CHANNELS {
                for y in 0..PATCH_SIZE {
                    let row = img.idx(ty + y, tx);
                    data.extend((0..PATCH_SIZE).map(|x| img.data[row + x * CHANNELS + c]));
                }
            }
        }
    }
    Ok(PatchBatch {
        data,
        n_images: batch.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile_indexed() -> CanvasImage {
        let mut img = WordImage::filled(CANVAS_HEIGHT, CANVAS_WIDTH, 0.0);
        for y in 0..CANVAS_HEIGHT {
            for x in 0..CANVAS_WIDTH {
                let p = (y / PATCH_SIZE) * PATCH_COLS + x / PATCH_SIZE;
                let i = img.idx(y, x);
                img.data[i..i + 3].fill(p as f32);
            }
        }
        CanvasImage::from_image(img).unwrap()
    }

    #[test]
    fn tiles_in_row_major_order() {
        let b = patchify(&[tile_indexed()]).unwrap();
        assert_eq!(b.shape(), [8, 3, 32, 32]);
        for p in 0..8 {
            assert!(b.patch(p).iter().all(|&v| v == p as f32), "patch {p}");
        }
    }

    #[test]
    fn batch_dimension_is_eight_per_image() {
        let b = patchify(&vec![tile_indexed(); 3]).unwrap();
        assert_eq!(b.shape()[0], 24);
    }

    #[test]
    fn reassembly_is_lossless() {
        let data = (0..CANVAS_HEIGHT * CANVAS_WIDTH * CHANNELS)
            .map(|i| (i % 97) as f32)
            .collect();
        let c = CanvasImage::from_image(WordImage::new(CANVAS_HEIGHT, CANVAS_WIDTH, data).unwrap()).unwrap();
        let back = patchify(std::slice::from_ref(&c)).unwrap().reassemble(false);
        assert_eq!(back, vec![c]);
    }

    #[test]
    fn wrong_shape_rejected() {
        let bad = CanvasImage {
            image: WordImage::filled(32, 128, 0.0),
            normalized: false,
        };
        assert!(patchify(&[bad]).is_err());
    }
}
