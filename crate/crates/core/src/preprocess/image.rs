use std::path::Path;

use crate::error::{Error, Result};

pub const CANVAS_HEIGHT: usize = 64;
pub const CANVAS_WIDTH: usize = 128;
pub const CHANNELS: usize = 3;
pub const WHITE: f32 = 255.0;

/// RGB image, row-major HWC, intensities in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct WordImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl WordImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("non-empty image", format!("{height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                format!("{height}x{width}x{CHANNELS} = {} values", height * width * CHANNELS),
                data.len(),
            ));
        }
        Ok(WordImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        WordImage {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    /// Grayscale replicated into all three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self> {
        let data = gray.iter().flat_map(|&g| [g, g, g]).collect();
        WordImage::new(height, width, data)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * CHANNELS
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luminance (ITU-R BT.601 weights) rounded to 8 bits.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .map(|p| luma(p[0], p[1], p[2]).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Sub-image `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> WordImage {
        assert!(top + h <= self.height && left + w <= self.width);
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in top..top + h {
            let start = self.idx(y, left);
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        WordImage {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let buf = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        WordImage {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn load_word_image(path: &Path) -> Result<WordImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = WordImage::from_rgb8(&img.to_rgb8());
    if img.height == 0 || img.width == 0 {
        return Err(Error::DegenerateInput(format!("{} has zero size", path.display())));
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Row-major binary mask; `true` marks ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// A 64x128 word canvas. Intensities are in [0, 255] until `normalize`
/// maps them to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CanvasImage {
    pub image: WordImage,
    pub normalized: bool,
}

impl CanvasImage {
    pub fn from_image(image: WordImage) -> Result<Self> {
        if image.height != CANVAS_HEIGHT || image.width != CANVAS_WIDTH {
            return Err(Error::shape(
                format!("{CANVAS_HEIGHT}x{CANVAS_WIDTH} canvas"),
                format!("{}x{}", image.height, image.width),
            ));
        }
        Ok(CanvasImage {
            image,
            normalized: false,
        })
    }

    pub fn normalize(mut self) -> Self {
        if !self.normalized {
            for v in &mut self.image.data {
                *v = *v / 127.5 - 1.0;
            }
            self.normalized = true;
        }
        self
    }

    /// 8-bit copy of an unnormalized canvas, for compact caching.
    pub fn to_bytes(&self) -> Vec<u8> {
        debug_assert!(!self.normalized);
        self.image
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b)).collect();
        CanvasImage::from_image(WordImage::new(CANVAS_HEIGHT, CANVAS_WIDTH, data)?)
    }
}
