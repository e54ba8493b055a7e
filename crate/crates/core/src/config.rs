//! Experiment configuration: one TOML document with a section per stage.
//! Unknown keys are rejected with their full dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitOptions;
use crate::downstream::ProbeConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::preprocess::AugmentConfig;
use crate::pretrain::PretrainConfig;
use crate::stats::Bandwidth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest used when a command is given none on the command line.
    pub manifest: Option<PathBuf>,
    pub iam_single_page_test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            iam_single_page_test_fraction: SplitOptions::new(0).iam_single_page_test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub rho0: f64,
    pub alpha: f64,
    pub bandwidth: Bandwidth,
    pub kde_points: usize,
    /// Cap on analyzed images; 0 analyzes all.
    pub max_images: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            rho0: 0.8,
            alpha: 0.05,
            bandwidth: Bandwidth::Silverman,
            kde_points: 512,
            max_images: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Augmentation magnitudes for positive pairs.
    pub preprocess: AugmentConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub downstream: ProbeConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<document>".into(),
            message: e.to_string(),
        })?;
        Self::from_table(table)
    }

    /// Read `path` (defaults when `None`), apply `key=value` overrides and
    /// validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse()
                .map_err(|e: toml::de::Error| Error::Config {
                    key: p.display().to_string(),
                    message: e.to_string(),
                })?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let mut unknown = Vec::new();
        let cfg: ExperimentConfig =
            serde_ignored::deserialize(toml::Value::Table(table), |path| unknown.push(path.to_string())).map_err(
                |e| Error::Config {
                    key: "<document>".into(),
                    message: e.to_string(),
                },
            )?;
        if let Some(key) = unknown.into_iter().next() {
            return Err(Error::Config {
                key,
                message: "unknown key".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.downstream.validate()?;
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if !(0.0..=1.0).contains(&self.data.iam_single_page_test_fraction) {
            return bad("data.iam_single_page_test_fraction", "must be in [0, 1]".into());
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return bad("analysis.alpha", format!("{} must be in (0, 1)", self.analysis.alpha));
        }
        if self.analysis.kde_points < 2 {
            return bad("analysis.kde_points", "must be at least 2".into());
        }
        if !(self.loss.eps >= 0.0) {
            return bad("loss.eps", "must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            key: "<document>".into(),
            message: e.to_string(),
        })
    }
}

/// Set `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.to_string(),
        message: "override must look like section.key=value".into(),
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.to_string(),
            message: "empty key segment".into(),
        });
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: key.to_string(),
            message: format!("`{part}` is not a section"),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
