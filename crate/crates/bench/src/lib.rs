//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use writer_ssl::loss::{matrix_from_rows, Matrix};
use writer_ssl::preprocess::{CanvasImage, WordImage, CANVAS_HEIGHT, CANVAS_WIDTH};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    matrix_from_rows(rows, cols, &data)
}

pub fn random_canvases(n: usize, seed: u64) -> Vec<CanvasImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..CANVAS_HEIGHT * CANVAS_WIDTH * 3)
                .map(|_| rng.random_range(0.0..255.0))
                .collect();
            CanvasImage::from_image(WordImage::new(CANVAS_HEIGHT, CANVAS_WIDTH, data).unwrap())
                .unwrap()
                .normalize()
        })
        .collect()
}
