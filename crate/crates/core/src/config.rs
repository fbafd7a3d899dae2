//! Run configuration: one TOML document with a section per stage, plus
//! `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disagg::DisaggConfig;
use crate::error::{Error, Result};
use crate::extraction::ExtractionConfig;
use crate::forecast::TrainConfig;
use crate::ingest::CsvSchema;
use crate::metrics::DEFAULT_MAPE_FLOOR;
use crate::model::DEFAULT_RECONSTRUCTION_THRESHOLD;
use crate::synth::ScenarioConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seed of every randomized stage.
    pub seed: u64,
    pub input: InputConfig,
    pub synth: ScenarioConfig,
    pub extraction: ExtractionConfig,
    pub disaggregation: DisaggConfig,
    pub forecast: ForecastConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Measurement CSV; when absent, `ingest` reads the `synth-gen` output.
    pub path: Option<PathBuf>,
    pub schema: CsvSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub train: TrainConfig,
    pub past_seconds: usize,
    pub past_bins: usize,
    pub week_seconds: usize,
    pub week_bins: usize,
    pub output_steps: usize,
    /// Spacing of training windows (s).
    pub stride: usize,
    pub workdays_only: bool,
    /// Trailing days held out for evaluation.
    pub test_days: usize,
    /// Magnitude at or below which predicted state changes are ignored.
    pub reconstruction_threshold: f64,
    /// Forecast start for `predict` (UNIX seconds); defaults to the first
    /// evaluation window.
    pub predict_at: Option<i64>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            past_seconds: 3600,
            past_bins: 60,
            week_seconds: 900,
            week_bins: 15,
            output_steps: 60,
            stride: 60,
            workdays_only: true,
            test_days: 2,
            reconstruction_threshold: DEFAULT_RECONSTRUCTION_THRESHOLD,
            predict_at: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "persistence-15min")]
    Persistence15min,
    #[serde(rename = "persistence-7d")]
    Persistence7d,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Persistence15min => "persistence-15min",
            Baseline::Persistence7d => "persistence-7d",
        }
    }

    pub fn parse(s: &str) -> Option<Baseline> {
        match s {
            "persistence-15min" => Some(Baseline::Persistence15min),
            "persistence-7d" => Some(Baseline::Persistence7d),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub mape_floor: f64,
    pub baselines: Vec<Baseline>,
    /// Spacing of evaluation windows (s).
    pub window_stride: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            mape_floor: DEFAULT_MAPE_FLOOR,
            baselines: vec![Baseline::Persistence15min, Baseline::Persistence7d],
            window_stride: 900,
        }
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Sets `dotted.key` in `table` to `raw`, parsed as a TOML value when
/// possible and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(assignment, "override must look like section.key=value"))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "empty key segment"));
    }
    let mut node = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(parts[..=i].join("."), "is not a section"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Parses TOML text, applies overrides and validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Config> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("<document>", e.to_string().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = serde_path_to_error::deserialize(table).map_err(|e| {
            let path = e.path().to_string();
            config_error(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_error(p.display().to_string(), e.to_string()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Argument(m) => config_error(section, m),
                other => other,
            })
        };
        if i64::try_from(self.seed).is_err() {
            return Err(config_error("seed", format!("must not exceed {}", i64::MAX)));
        }
        wrap("disaggregation", self.disaggregation.validate())?;
        wrap("forecast.train", self.forecast.train.validate())?;
        if self.synth.days == 0 {
            return Err(config_error("synth.days", "must be positive"));
        }
        if self.forecast.stride == 0 {
            return Err(config_error("forecast.stride", "must be positive"));
        }
        if self.evaluation.window_stride == 0 {
            return Err(config_error("evaluation.window_stride", "must be positive"));
        }
        if self.extraction.k_max < 2 {
            return Err(config_error("extraction.k_max", "must be at least 2"));
        }
        Ok(())
    }

    /// Canonical TOML rendering (all defaults expanded).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
