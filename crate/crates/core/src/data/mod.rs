//! Dataset manifests, split materialization and integrity checks.

mod ingest;
mod manifest;
mod split;
mod validate;

pub use ingest::{parse_cvl_name, parse_iam_forms, scan_cvl, scan_iam, scan_writer_dirs};
pub use manifest::{
    parse_manifest, parse_manifest_str, DatasetKind, DatasetManifest, SampleRecord, Split, HEADER, HEADER_WITH_SPLIT,
};
pub use split::{make_fragnet_splits, make_fragnet_splits_with, SplitOptions, SplitWarning};
pub use validate::{validate_dataset, ValidationReport, MAX_MISSING_FRACTION};
