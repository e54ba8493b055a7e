use std::collections::BTreeSet;

use serde::Serialize;

use super::manifest::{DatasetManifest, Split};

/// Pretraining refuses to start above this fraction of missing files.
pub const MAX_MISSING_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub total: usize,
    pub missing: Vec<String>,
    pub unreadable: Vec<String>,
    pub unassigned: usize,
    pub writers_without_train: Vec<String>,
    pub writers_without_test: Vec<String>,
}

impl ValidationReport {
    pub fn missing_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.missing.len() as f64 / self.total as f64
    }

    pub fn exceeds_missing_threshold(&self) -> bool {
        self.missing_fraction() > MAX_MISSING_FRACTION
    }
}

/// Check that every image exists and decodes (header only), and that each
/// writer appears in both splits.
pub fn validate_dataset(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport {
        total: manifest.records.len(),
        ..Default::default()
    };
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for r in &manifest.records {
        let path = manifest.resolve(r);
        if !path.is_file() {
            report.missing.push(r.image_path.clone());
        } else if image::image_dimensions(&path).is_err() {
            report.unreadable.push(r.image_path.clone());
        }
        match r.split {
            Split::Train => {
                train.insert(r.writer_id.as_str());
            }
            Split::Test => {
                test.insert(r.writer_id.as_str());
            }
            Split::Unassigned => report.unassigned += 1,
        }
    }
    if report.unassigned < report.total {
        for w in manifest.writers() {
            if !train.contains(w.as_str()) {
                report.writers_without_train.push(w.clone());
            }
            if !test.contains(w.as_str()) {
                report.writers_without_test.push(w);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{DatasetKind, SampleRecord};

    fn write_png(path: &std::path::Path) {
        image::RgbImage::from_pixel(4, 4, image::Rgb([255, 255, 255]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn reports_missing_and_split_gaps() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png"] {
            write_png(&dir.path().join(name));
        }
        std::fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
        let rec = |p: &str, w: &str, s: Split| SampleRecord {
            image_path: p.into(),
            writer_id: w.into(),
            page_id: "1".into(),
            text_index: 0,
            split: s,
        };
        let mut m = DatasetManifest::new(
            DatasetKind::Custom,
            vec![
                rec("a.png", "w1", Split::Train),
                rec("b.png", "w1", Split::Test),
                rec("c.png", "w2", Split::Test),
            ],
            dir.path().to_path_buf(),
        );
        let ok = validate_dataset(&m);
        assert!(ok.missing.is_empty());
        assert_eq!(ok.writers_without_train, vec!["w2".to_string()]);
        assert!(ok.writers_without_test.is_empty());

        std::fs::remove_file(dir.path().join("b.png")).unwrap();
        m.records.push(rec("bad.png", "w1", Split::Train));
        let r = validate_dataset(&m);
        assert_eq!(r.missing, vec!["b.png".to_string()]);
        assert_eq!(r.unreadable, vec!["bad.png".to_string()]);
        assert!(r.exceeds_missing_threshold());
    }
}
