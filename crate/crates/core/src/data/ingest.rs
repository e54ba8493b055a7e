//! Manifest generators for the on-disk layouts of the supported datasets.
//!
//! - IAM: `words/<a01>/<a01-000u>/<a01-000u-00-00>.png` plus the `forms.txt`
//!   metadata file mapping form ids to writer ids. A form is a page.
//! - CVL: word images named `<writer>-<text>-<line>-<word>[-<label>].<ext>`
//!   anywhere below the root. A page is one `(writer, text)` pair.
//! - Directory layout (Firemaker and custom data):
//!   `<root>/<writer>/<page>/<word image>`. Numeric page directory names
//!   also fill the text index.
//!
//! Image paths are stored absolute.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::manifest::{DatasetKind, DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "tif", "tiff", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files below `root`, sorted for a stable manifest order.
fn image_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() && is_image(entry.path()) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

fn canonical_dir(root: &Path) -> Result<PathBuf> {
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    Ok(root.canonicalize()?)
}

fn record(path: &Path, writer: &str, page: &str, text_index: u32) -> SampleRecord {
    SampleRecord {
        image_path: path.to_string_lossy().into_owned(),
        writer_id: writer.to_string(),
        page_id: page.to_string(),
        text_index,
        split: Split::Unassigned,
    }
}

fn finish(dataset: DatasetKind, records: Vec<SampleRecord>, root: &Path) -> Result<DatasetManifest> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no word images found under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest::new(dataset, records, PathBuf::from(".")))
}

/// Form id to writer id from IAM `forms.txt` (`#` lines are comments; the
/// writer is the second field).
pub fn parse_iam_forms(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        match (fields.next(), fields.next()) {
            (Some(form), Some(writer)) => {
                map.insert(form.to_string(), writer.to_string());
            }
            _ => {
                return Err(Error::Parse {
                    path: PathBuf::from("forms.txt"),
                    line: i + 1,
                    message: "expected `<form id> <writer id> ...`".into(),
                })
            }
        }
    }
    Ok(map)
}

pub fn scan_iam(words_dir: &Path, forms_file: &Path) -> Result<DatasetManifest> {
    let forms = parse_iam_forms(&fs::read_to_string(forms_file)?)?;
    let words_dir = &canonical_dir(words_dir)?;
    let mut records = Vec::new();
    let mut unknown = BTreeSet::new();
    for path in image_files(words_dir)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let form: String = stem.splitn(3, '-').take(2).collect::<Vec<_>>().join("-");
        match forms.get(&form) {
            Some(writer) => records.push(record(&path, writer, &form, 0)),
            None => {
                unknown.insert(form);
            }
        }
    }
    if !unknown.is_empty() {
        log::warn!(
            "{} forms missing from {}; their words were skipped",
            unknown.len(),
            forms_file.display()
        );
    }
    finish(DatasetKind::Iam, records, words_dir)
}

/// `(writer, text)` from a CVL word file stem.
pub fn parse_cvl_name(stem: &str) -> Option<(String, u32)> {
    let mut parts = stem.split('-');
    let writer = parts.next().filter(|w| !w.is_empty())?;
    let text = parts.next()?.parse().ok()?;
    Some((writer.to_string(), text))
}

pub fn scan_cvl(root: &Path) -> Result<DatasetManifest> {
    let root = &canonical_dir(root)?;
    let mut records = Vec::new();
    for path in image_files(root)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        match parse_cvl_name(stem) {
            Some((writer, text)) => records.push(record(&path, &writer, &format!("{writer}-{text}"), text)),
            None => log::warn!("skipping {}: not a CVL word file name", path.display()),
        }
    }
    finish(DatasetKind::Cvl, records, root)
}

/// `<root>/<writer>/<page>/<image>`.
pub fn scan_writer_dirs(root: &Path, dataset: DatasetKind) -> Result<DatasetManifest> {
    let root = &canonical_dir(root)?;
    let mut records = Vec::new();
    for path in image_files(root)? {
        let rel = path.strip_prefix(root).expect("walk stays below root");
        let parts: Vec<&str> = rel.iter().filter_map(|c| c.to_str()).collect();
        if parts.len() != 3 {
            log::warn!("skipping {}: expected <writer>/<page>/<image>", path.display());
            continue;
        }
        let text_index = parts[1].parse().unwrap_or(0);
        records.push(record(&path, parts[0], parts[1], text_index));
    }
    finish(dataset, records, root)
}
