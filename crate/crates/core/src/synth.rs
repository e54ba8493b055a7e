//! Synthetic handwriting: words drawn as anti-aliased polylines from a shared
//! glyph alphabet, distorted by a per-writer style. Used for desk-scale
//! experiments and tests.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::preprocess::WordImage;
use crate::seed::{self, streams};

const ALPHABET: usize = 26;
/// Pixel height of the x-height band before style scaling.
const X_HEIGHT: f32 = 18.0;

type Stroke = Vec<(f32, f32)>;

/// Letter shapes in a unit box (x right, y down; 0 = top of ascender
/// band, 1 = baseline).
fn glyphs() -> Vec<Vec<Stroke>> {
    let mut rng = seed::stream(0x9_1f5, "glyphs", 0);
    (0..ALPHABET)
        .map(|_| {
            let strokes = rng.random_range(1..=3);
            (0..strokes)
                .map(|_| {
                    let pts = rng.random_range(3..=6);
                    let tall = rng.random_bool(0.3);
                    (0..pts)
                        .map(|_| {
                            let y = if tall {
                                rng.random_range(0.0..1.0)
                            } else {
                                rng.random_range(0.45..1.0)
                            };
                            (rng.random_range(0.0..1.0), y)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    /// Horizontal shear per unit of height.
    pub slant: f32,
    /// Pen width in pixels.
    pub thickness: f32,
    pub width_scale: f32,
    pub height_scale: f32,
    /// Gap between letters as a fraction of letter width.
    pub spacing: f32,
    /// Per-word random displacement of control points (unit-box units).
    pub jitter: f32,
    /// Peak ink darkness in `(0, 1]`.
    pub darkness: f32,
    /// Baseline drift amplitude in pixels across a word.
    pub baseline_wave: f32,
    /// Fixed per-writer displacement of each glyph's control points.
    pub allograph: Vec<Vec<Stroke>>,
}

impl WriterStyle {
    /// Style of writer `index` out of `count`. Slant and pen width are spread
    /// evenly over their ranges (in different orders) so that any two writers
    /// differ visibly; the rest is drawn from the writer's own substream.
    pub fn for_writer(seed: u64, index: usize, count: usize) -> Self {
        let mut rng = seed::stream(seed, streams::SYNTH, index as u64);
        let frac = |k: usize| if count <= 1 { 0.5 } else { k as f32 / (count - 1) as f32 };
        let t = frac(index);
        let t2 = frac((index * 2 + 1) % count.max(1));
        let base = glyphs();
        let allograph = base
            .iter()
            .map(|strokes| {
                strokes
                    .iter()
                    .map(|s| {
                        s.iter()
                            .map(|_| (rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        WriterStyle {
            slant: -0.45 + 0.9 * t + rng.random_range(-0.05..0.05),
            thickness: 1.2 + 2.4 * t2,
            width_scale: rng.random_range(0.75..1.3),
            height_scale: rng.random_range(0.8..1.25),
            spacing: rng.random_range(0.05..0.45),
            jitter: 0.03,
            darkness: rng.random_range(0.75..1.0),
            baseline_wave: rng.random_range(0.0..3.0),
            allograph,
        }
    }
}

fn draw_segment(canvas: &mut [f32], h: usize, w: usize, a: (f32, f32), b: (f32, f32), width: f32, darkness: f32) {
    let r = width / 2.0;
    let x0 = (a.0.min(b.0) - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + r + 1.0).ceil() as usize).min(w);
    let y0 = (a.1.min(b.1) - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + r + 1.0).ceil() as usize).min(h);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-6);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let d = (cx * cx + cy * cy).sqrt();
            let ink = (r + 0.5 - d).clamp(0.0, 1.0) * darkness;
            let v = 255.0 * (1.0 - ink);
            let p = &mut canvas[y * w + x];
            if v < *p {
                *p = v;
            }
        }
    }
}

/// Two rounds of Chaikin corner cutting, keeping the end points.
fn smooth(stroke: &[(f32, f32)]) -> Stroke {
    let mut pts = stroke.to_vec();
    for _ in 0..2 {
        if pts.len() < 3 {
            return pts;
        }
        let mut out = vec![pts[0]];
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            out.push((0.75 * a.0 + 0.25 * b.0, 0.75 * a.1 + 0.25 * b.1));
            out.push((0.25 * a.0 + 0.75 * b.0, 0.25 * a.1 + 0.75 * b.1));
        }
        out.push(pts[pts.len() - 1]);
        pts = out;
    }
    pts
}

/// Render the letter sequence `word` (indices into the alphabet).
pub fn render_word<R: Rng>(style: &WriterStyle, word: &[usize], rng: &mut R) -> WordImage {
    let base = glyphs();
    let noise = Normal::new(0.0f32, style.jitter.max(1e-6)).expect("valid jitter");
    let box_h = 2.0 * X_HEIGHT * style.height_scale;
    let box_w = X_HEIGHT * style.width_scale;
    let mut strokes: Vec<Stroke> = Vec::new();
    let mut cursor = 0.0f32;
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    for &letter in word {
        let g = letter % ALPHABET;
        for (s, offs) in base[g].iter().zip(&style.allograph[g]) {
            let pts: Stroke = s
                .iter()
                .zip(offs)
                .map(|(&(x, y), &(ox, oy))| {
                    let ux = x + ox + noise.sample(rng);
                    let uy = y + oy + noise.sample(rng);
                    let py = uy * box_h;
                    let px = cursor + ux * box_w + style.slant * (box_h - py);
                    let wave = style.baseline_wave * (phase + px / 40.0).sin();
                    (px, py + wave)
                })
                .collect();
            strokes.push(smooth(&pts));
        }
        cursor += box_w * (1.0 + style.spacing);
    }
    let margin = 4.0 + style.thickness;
    let (mut minx, mut miny, mut maxx, mut maxy) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    for p in strokes.iter().flatten() {
        minx = minx.min(p.0);
        miny = miny.min(p.1);
        maxx = maxx.max(p.0);
        maxy = maxy.max(p.1);
    }
    let w = (maxx - minx + 2.0 * margin).ceil().max(8.0) as usize;
    let h = (maxy - miny + 2.0 * margin).ceil().max(8.0) as usize;
    let mut gray = vec![255.0f32; h * w];
    for s in &strokes {
        let shift = |p: &(f32, f32)| (p.0 - minx + margin, p.1 - miny + margin);
        if s.len() == 1 {
            let p = shift(&s[0]);
            draw_segment(&mut gray, h, w, p, p, style.thickness, style.darkness);
        }
        for pair in s.windows(2) {
            draw_segment(
                &mut gray,
                h,
                w,
                shift(&pair[0]),
                shift(&pair[1]),
                style.thickness,
                style.darkness,
            );
        }
    }
    WordImage::from_gray(h, w, &gray).expect("consistent buffer")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub writers: usize,
    pub words_per_writer: usize,
    /// Words of a writer are split evenly over this many pages.
    pub pages_per_writer: usize,
    /// Trailing pages of each writer assigned to the test split; 0 leaves
    /// the manifest unsplit.
    pub test_pages: usize,
    pub min_letters: usize,
    pub max_letters: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            writers: 5,
            words_per_writer: 100,
            pages_per_writer: 5,
            test_pages: 1,
            min_letters: 3,
            max_letters: 6,
            seed: 0,
        }
    }
}

/// Render a dataset into `dir` (one PNG per word) and return its manifest
/// with paths relative to `dir`.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.writers == 0 || cfg.words_per_writer == 0 || cfg.pages_per_writer == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs writers, words and pages".into(),
        ));
    }
    if cfg.test_pages >= cfg.pages_per_writer && cfg.test_pages > 0 {
        return Err(Error::InvalidArgument(
            "test_pages must leave at least one training page".into(),
        ));
    }
    if cfg.min_letters == 0 || cfg.min_letters > cfg.max_letters {
        return Err(Error::InvalidArgument("invalid letter count range".into()));
    }
    fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::new();
    for wi in 0..cfg.writers {
        let style = WriterStyle::for_writer(cfg.seed, wi, cfg.writers);
        let writer_id = format!("w{wi:03}");
        let mut rng = seed::stream(cfg.seed, streams::SYNTH, 1_000_000 + wi as u64);
        for k in 0..cfg.words_per_writer {
            let len = rng.random_range(cfg.min_letters..=cfg.max_letters);
            let word: Vec<usize> = (0..len).map(|_| rng.random_range(0..ALPHABET)).collect();
            let img = render_word(&style, &word, &mut rng);
            let rel = format!("images/{writer_id}_{k:04}.png");
            img.to_rgb8().save(dir.join(&rel)).map_err(|e| Error::Image {
                path: dir.join(&rel),
                source: e,
            })?;
            let page = k * cfg.pages_per_writer / cfg.words_per_writer;
            let split = if cfg.test_pages == 0 {
                Split::Unassigned
            } else if page >= cfg.pages_per_writer - cfg.test_pages {
                Split::Test
            } else {
                Split::Train
            };
            records.push(SampleRecord {
                image_path: rel,
                writer_id: writer_id.clone(),
                page_id: format!("{writer_id}-p{page}"),
                text_index: page as u32 + 1,
                split,
            });
        }
    }
    let manifest = DatasetManifest::new(DatasetKind::Custom, records, dir.to_path_buf());
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
