//! Tab-separated dataset manifests.
//!
//! The on-disk format is a UTF-8 text file with LF line endings and a header
//! line `image_path<TAB>writer_id<TAB>page_id<TAB>text_index`. Once splits
//! have been materialized a fifth `split` column is appended.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "image_path\twriter_id\tpage_id\ttext_index";
pub const HEADER_WITH_SPLIT: &str = "image_path\twriter_id\tpage_id\ttext_index\tsplit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Iam,
    Cvl,
    Firemaker,
    #[default]
    Custom,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iam" => Ok(DatasetKind::Iam),
            "cvl" => Ok(DatasetKind::Cvl),
            "firemaker" => Ok(DatasetKind::Firemaker),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Iam => "IAM",
            DatasetKind::Cvl => "CVL",
            DatasetKind::Firemaker => "Firemaker",
            DatasetKind::Custom => "custom",
        })
    }
}

/// One word image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub writer_id: String,
    pub page_id: String,
    /// CVL text number; 0 for datasets without one.
    pub text_index: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset: DatasetKind,
    pub records: Vec<SampleRecord>,
    pub num_writers: usize,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(dataset: DatasetKind, records: Vec<SampleRecord>, base_dir: PathBuf) -> Self {
        let num_writers = count_writers(&records);
        DatasetManifest {
            dataset,
            records,
            num_writers,
            base_dir,
        }
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Sorted distinct writer ids.
    pub fn writers(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.writer_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// A copy holding only the records of `split`.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        let records = self.split(split).cloned().collect();
        DatasetManifest::new(self.dataset, records, self.base_dir.clone())
    }

    pub fn has_splits(&self) -> bool {
        self.records.iter().any(|r| r.split != Split::Unassigned)
    }

    pub fn with_dataset(mut self, dataset: DatasetKind) -> Self {
        self.dataset = dataset;
        self
    }

    /// Serialize in the manifest format. The split column is written only
    /// when at least one record has been assigned.
    pub fn to_tsv(&self) -> String {
        let with_split = self.has_splits();
        let mut out = String::new();
        out.push_str(if with_split { HEADER_WITH_SPLIT } else { HEADER });
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}",
                r.image_path, r.writer_id, r.page_id, r.text_index
            ));
            if with_split {
                out.push('\t');
                out.push_str(r.split.as_str());
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }
}

fn count_writers(records: &[SampleRecord]) -> usize {
    records
        .iter()
        .map(|r| r.writer_id.as_str())
        .collect::<HashSet<_>>()
        .len()
}

/// Parse a manifest file. Relative image paths resolve against the file's
/// directory. Records keep whatever split the file carries (none for the
/// 4-column form).
pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest_str(&text, path, base_dir)
}

pub fn parse_manifest_str(text: &str, path: &Path, base_dir: PathBuf) -> Result<DatasetManifest> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text.split('\n').enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::EmptyManifest(path.to_path_buf())),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l.trim_end_matches('\r')),
        }
    };
    if header.1 != HEADER && header.1 != HEADER_WITH_SPLIT {
        return Err(err(
            header.0,
            format!("expected header `{HEADER}`, found `{}`", header.1),
        ));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(err(
                lineno,
                format!("expected at least 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let image_path = fields[0].to_string();
        if image_path.is_empty() {
            return Err(err(lineno, "empty image_path".into()));
        }
        let writer_id = fields[1].to_string();
        if writer_id.is_empty() {
            return Err(err(lineno, "empty writer_id".into()));
        }
        let text_index = fields[3]
            .trim()
            .parse::<u32>()
            .map_err(|e| err(lineno, format!("bad text_index `{}`: {e}", fields[3])))?;
        let split = match fields.get(4) {
            Some(s) => s.trim().parse::<Split>().map_err(|m| err(lineno, m))?,
            None => Split::Unassigned,
        };
        if !seen.insert(image_path.clone()) {
            return Err(Error::DuplicateImage(image_path));
        }
        records.push(SampleRecord {
            image_path,
            writer_id,
            page_id: fields[2].to_string(),
            text_index,
            split,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    Ok(DatasetManifest::new(DatasetKind::Custom, records, base_dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest_str(text, Path::new("m.tsv"), PathBuf::from("."))
    }

    #[test]
    fn three_records_two_writers() {
        let m = parse(&format!(
            "{HEADER}\na.png\tw1\tp1\t0\nb.png\tw1\tp1\t0\nc.png\tw2\tp2\t0\n"
        ))
        .unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.num_writers, 2);
        assert!(m.records.iter().all(|r| r.split == Split::Unassigned));
    }

    #[test]
    fn duplicate_path_is_named() {
        let e = parse(&format!("{HEADER}\na.png\tw1\tp1\t0\na.png\tw2\tp2\t0\n")).unwrap_err();
        match e {
            Error::DuplicateImage(p) => assert_eq!(p, "a.png"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_line_reports_line_number() {
        let e = parse(&format!("{HEADER}\na.png\tw1\tp1\t0\nb.png\tw1\tp1\n")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(parse(""), Err(Error::EmptyManifest(_))));
        assert!(matches!(parse(&format!("{HEADER}\n")), Err(Error::EmptyManifest(_))));
    }

    #[test]
    fn serialization_is_bit_exact() {
        let text = format!("{HEADER}\na.png\tw1\tp1\t3\n");
        assert_eq!(parse(&text).unwrap().to_tsv(), text);
        let split = format!("{HEADER_WITH_SPLIT}\na.png\tw1\tp1\t3\ttest\n");
        assert_eq!(parse(&split).unwrap().to_tsv(), split);
    }
}
