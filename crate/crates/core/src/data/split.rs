//! Train/test split rules for IAM, CVL and Firemaker.
//!
//! * IAM: writers with several pages get one page drawn at random as test,
//!   the remaining pages train. Single-page writers have their word records
//!   partitioned at random.
//! * CVL: texts 1-3 train, all later texts test.
//! * Firemaker: page 1 trains, page 4 tests, pages 2 and 3 are dropped.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::{DatasetKind, DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::seed::{keyed_stream, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub seed: u64,
    /// Fraction of a single-page IAM writer's words assigned to test.
    pub iam_single_page_test_fraction: f64,
}

impl SplitOptions {
    pub fn new(seed: u64) -> Self {
        SplitOptions {
            seed,
            iam_single_page_test_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitWarning {
    /// A CVL writer lacks some of texts 1-3; kept with what is available.
    CvlMissingTrainTexts { writer_id: String, missing: Vec<u32> },
    /// A single-word IAM writer cannot appear in both splits.
    IamSingleRecord { writer_id: String },
}

pub fn make_fragnet_splits(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    make_fragnet_splits_with(manifest, &SplitOptions::new(seed)).map(|(m, _)| m)
}

pub fn make_fragnet_splits_with(
    manifest: &DatasetManifest,
    opts: &SplitOptions,
) -> Result<(DatasetManifest, Vec<SplitWarning>)> {
    if manifest.has_splits() {
        return Err(Error::InvalidArgument(
            "manifest already carries split assignments".into(),
        ));
    }
    if !(0.0..=1.0).contains(&opts.iam_single_page_test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "IAM test fraction {} outside [0, 1]",
            opts.iam_single_page_test_fraction
        )));
    }
    let (records, warnings) = match manifest.dataset {
        DatasetKind::Iam => split_iam(&manifest.records, opts),
        DatasetKind::Cvl => split_cvl(&manifest.records),
        DatasetKind::Firemaker => (split_firemaker(&manifest.records), Vec::new()),
        DatasetKind::Custom => return Err(Error::UnknownDataset("custom".into())),
    };
    for w in &warnings {
        log::warn!("{w:?}");
    }
    Ok((
        DatasetManifest::new(manifest.dataset, records, manifest.base_dir.clone()),
        warnings,
    ))
}

fn by_writer(records: &[SampleRecord]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        map.entry(r.writer_id.as_str()).or_default().push(i);
    }
    map
}

fn split_iam(records: &[SampleRecord], opts: &SplitOptions) -> (Vec<SampleRecord>, Vec<SplitWarning>) {
    let mut out = records.to_vec();
    let mut warnings = Vec::new();
    for (writer, idx) in by_writer(records) {
        let mut rng = keyed_stream(opts.seed, streams::SPLIT, writer);
        let pages: Vec<&str> = idx
            .iter()
            .map(|&i| records[i].page_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if pages.len() > 1 {
            let test_page = pages[rng.random_range(0..pages.len())];
            for &i in &idx {
                out[i].split = if records[i].page_id == test_page {
                    Split::Test
                } else {
                    Split::Train
                };
            }
        } else {
            let mut order = idx.clone();
            order.shuffle(&mut rng);
            let n = order.len();
            if n == 1 {
                warnings.push(SplitWarning::IamSingleRecord {
                    writer_id: writer.to_string(),
                });
                out[order[0]].split = Split::Train;
                continue;
            }
            let n_test = ((n as f64) * opts.iam_single_page_test_fraction).round() as usize;
            let n_test = n_test.clamp(1, n - 1);
            for (rank, &i) in order.iter().enumerate() {
                out[i].split = if rank < n_test { Split::Test } else { Split::Train };
            }
        }
    }
    (out, warnings)
}

fn split_cvl(records: &[SampleRecord]) -> (Vec<SampleRecord>, Vec<SplitWarning>) {
    let mut out = records.to_vec();
    for r in &mut out {
        r.split = if (1..=3).contains(&r.text_index) {
            Split::Train
        } else {
            Split::Test
        };
    }
    let mut warnings = Vec::new();
    for (writer, idx) in by_writer(records) {
        let texts: BTreeSet<u32> = idx.iter().map(|&i| records[i].text_index).collect();
        let missing: Vec<u32> = (1..=3).filter(|t| !texts.contains(t)).collect();
        if !missing.is_empty() {
            warnings.push(SplitWarning::CvlMissingTrainTexts {
                writer_id: writer.to_string(),
                missing,
            });
        }
    }
    (out, warnings)
}

fn page_number(page_id: &str) -> Option<u32> {
    page_id.trim().parse().ok()
}

fn split_firemaker(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records
        .iter()
        .filter_map(|r| {
            let split = match page_number(&r.page_id) {
                Some(1) => Split::Train,
                Some(4) => Split::Test,
                _ => return None,
            };
            Some(SampleRecord { split, ..r.clone() })
        })
        .collect()
}
