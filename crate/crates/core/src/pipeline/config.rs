use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::Provenance;
use crate::error::{Error, Result};
use crate::grid::{default_levels, LevelScheme};
use crate::synth::SynthConfig;

/// Interval construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Uncalibrated ensemble quantiles.
    Raw,
    /// Symmetric split conformal around the deterministic prediction.
    SplitCp,
    /// Asymmetric conformalized quantile regression.
    Cqr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Raw, Method::SplitCp, Method::Cqr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::SplitCp => "split-cp",
            Method::Cqr => "cqr",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            Method::Raw => Provenance::RawQuantile,
            Method::SplitCp => Provenance::SplitCp,
            Method::Cqr => Provenance::Cqr,
        }
    }

    /// Whether the method reads ensemble quantiles (as opposed to the
    /// deterministic prediction).
    pub fn uses_quantiles(self) -> bool {
        !matches!(self, Method::SplitCp)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected raw, split-cp or cqr)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a pipeline stage needs. Read from a TOML file; every field
/// has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub method: Method,
    pub levels: LevelScheme,
    pub n_calibration: usize,
    pub n_test: usize,
    /// Trials run by the coverage study.
    pub trial_count: usize,
    /// Worker threads; `0` uses every available core.
    pub jobs: usize,
    pub synth: Option<SynthConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            method: Method::Cqr,
            levels: default_levels(),
            n_calibration: 730,
            n_test: 730,
            trial_count: 200,
            jobs: 1,
            synth: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_calibration == 0 {
            return Err(Error::Config("n_calibration must be at least 1".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        if self.trial_count == 0 {
            return Err(Error::Config("trial_count must be at least 1".into()));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn synth_config(&self) -> Result<&SynthConfig> {
        self.synth
            .as_ref()
            .ok_or_else(|| Error::Config("no [synth] section in the configuration".into()))
    }

    /// The configuration with directories removed, echoed into output manifests.
    pub fn provenance_echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("dataset_dir");
            obj.remove("output_dir");
            obj.remove("jobs");
        }
        v
    }
}
