use std::path::PathBuf;

use writer_ssl::preprocess::{load_canvas, CANVAS_HEIGHT, CANVAS_WIDTH};
use writer_ssl::synth::{generate_dataset, SynthConfig};

// Renders a small synthetic dataset and tiles preprocessed canvases of each
// writer into one sheet.
fn main() -> writer_ssl::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-preview".into()));
    let cfg = SynthConfig {
        writers: 5,
        words_per_writer: 6,
        ..Default::default()
    };
    let m = generate_dataset(&out, &cfg)?;
    let cols = cfg.words_per_writer;
    let mut sheet = image::RgbImage::from_pixel(
        (cols * CANVAS_WIDTH) as u32,
        (cfg.writers * CANVAS_HEIGHT) as u32,
        image::Rgb([200, 0, 0]),
    );
    for (i, r) in m.records.iter().enumerate() {
        let c = load_canvas(&m.resolve(r))?.image.to_rgb8();
        image::imageops::replace(
            &mut sheet,
            &c,
            ((i % cols) * CANVAS_WIDTH) as i64,
            ((i / cols) * CANVAS_HEIGHT) as i64,
        );
    }
    sheet
        .save(out.join("sheet.png"))
        .map_err(|e| writer_ssl::Error::Image {
            path: out.join("sheet.png"),
            source: e,
        })?;
    Ok(())
}
