//! On-disk layout of datasets and pipeline artifacts.
//!
//! ```text
//! <dataset_dir>/manifest.json
//! <dataset_dir>/<split>/<NNNN>/{coarse,truth,deterministic,ensemble}.cgf
//! <output_dir>/quantiles/<split>/<NNNN>/
//! <output_dir>/offsets/<method>/
//! <output_dir>/intervals/<method>/<NNNN>/
//! <output_dir>/report/<method>/
//! <output_dir>/coverage/
//! ```
//!
//! `ensemble.cgf` is a stream of member grids. `deterministic.cgf` and
//! `coarse.cgf` are optional for external datasets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Method;
use crate::cgf;
use crate::error::{Error, Result};
use crate::grid::{EnsembleBatch, GridField, Record, SplitTag};
use crate::synth::SynthConfig;

pub const MANIFEST: &str = "manifest.json";

/// Split sizes and provenance of a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_calibration: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub member_count: Option<usize>,
    /// Calibration records are indexed before test records in synthetic time.
    pub time_order: Vec<SplitTag>,
    pub synth: Option<SynthConfig>,
}

impl DatasetManifest {
    pub fn count(&self, split: SplitTag) -> usize {
        match split {
            SplitTag::Calibration => self.n_calibration,
            SplitTag::Test => self.n_test,
            SplitTag::TrainSurrogate => 0,
        }
    }
}

pub fn manifest_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join(MANIFEST)
}

pub fn load_manifest(dataset_dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dataset_dir);
    if !path.is_file() {
        return Err(Error::MissingArtifacts(vec![path]));
    }
    read_json(&path)
}

pub fn save_manifest(dataset_dir: &Path, m: &DatasetManifest) -> Result<()> {
    write_json(&manifest_path(dataset_dir), m)
}

pub fn record_dir(root: &Path, split: SplitTag, index: usize) -> PathBuf {
    root.join(split.as_str()).join(format!("{index:04}"))
}

pub fn save_record(dataset_dir: &Path, split: SplitTag, index: usize, r: &Record) -> Result<()> {
    let dir = record_dir(dataset_dir, split, index);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cgf::save_coarse(&dir.join("coarse.cgf"), &r.coarse)?;
    cgf::save(&dir.join("truth.cgf"), &r.truth)?;
    if let Some(d) = &r.deterministic {
        cgf::save(&dir.join("deterministic.cgf"), d)?;
    }
    cgf::save_all(&dir.join("ensemble.cgf"), r.ensemble.members())
}

pub fn load_truth(dataset_dir: &Path, split: SplitTag, index: usize) -> Result<GridField> {
    cgf::load(&required(record_dir(dataset_dir, split, index).join("truth.cgf"))?)
}

pub fn load_deterministic(dataset_dir: &Path, split: SplitTag, index: usize) -> Result<GridField> {
    cgf::load(&required(record_dir(dataset_dir, split, index).join("deterministic.cgf"))?)
}

pub fn load_ensemble(dataset_dir: &Path, split: SplitTag, index: usize) -> Result<EnsembleBatch> {
    let members = cgf::load_all(&required(record_dir(dataset_dir, split, index).join("ensemble.cgf"))?)?;
    EnsembleBatch::new(members)
}

pub fn quantile_dir(output_dir: &Path, split: SplitTag, index: usize) -> PathBuf {
    record_dir(&output_dir.join("quantiles"), split, index)
}

pub fn offsets_dir(output_dir: &Path, method: Method) -> PathBuf {
    output_dir.join("offsets").join(method.as_str())
}

pub fn intervals_dir(output_dir: &Path, method: Method, index: usize) -> PathBuf {
    output_dir
        .join("intervals")
        .join(method.as_str())
        .join(format!("{index:04}"))
}

pub fn report_dir(output_dir: &Path, method: Method) -> PathBuf {
    output_dir.join("report").join(method.as_str())
}

fn required(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifacts(vec![path]))
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
