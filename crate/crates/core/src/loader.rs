//! Lazily prepared word canvases with an optional 8-bit in-memory cache.

use std::path::PathBuf;

use crate::data::{DatasetManifest, SampleRecord};
use crate::error::Result;
use crate::preprocess::{load_canvas, CanvasImage, CANVAS_HEIGHT, CANVAS_WIDTH, CHANNELS};

const CANVAS_BYTES: usize = CANVAS_HEIGHT * CANVAS_WIDTH * CHANNELS;

/// Canvases for a fixed list of images. Each image is decoded and prepared
/// on first use and kept (as bytes) while the cache budget lasts.
#[derive(Debug)]
pub struct CanvasStore {
    paths: Vec<PathBuf>,
    cache: Vec<Option<Vec<u8>>>,
    budget: usize,
}

impl CanvasStore {
    pub fn new(paths: Vec<PathBuf>, cache_limit_bytes: usize) -> Self {
        let n = paths.len();
        CanvasStore {
            paths,
            cache: vec![None; n],
            budget: cache_limit_bytes / CANVAS_BYTES,
        }
    }

    pub fn from_records<'a>(
        manifest: &DatasetManifest,
        records: impl IntoIterator<Item = &'a SampleRecord>,
        cache_limit_bytes: usize,
    ) -> Self {
        CanvasStore::new(
            records.into_iter().map(|r| manifest.resolve(r)).collect(),
            cache_limit_bytes,
        )
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn path(&self, i: usize) -> &PathBuf {
        &self.paths[i]
    }

    /// Unnormalized canvas of image `i`.
    pub fn get(&mut self, i: usize) -> Result<CanvasImage> {
        if let Some(bytes) = &self.cache[i] {
            return CanvasImage::from_bytes(bytes);
        }
        let canvas = load_canvas(&self.paths[i])?;
        if self.budget > 0 {
            self.budget -= 1;
            self.cache[i] = Some(canvas.to_bytes());
            // Round-trip so cached and uncached reads agree exactly.
            return CanvasImage::from_bytes(self.cache[i].as_ref().expect("just cached"));
        }
        Ok(canvas)
    }
}
