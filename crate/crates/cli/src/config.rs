use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use dcrmta_core::attribution::AttributionConfig;
use dcrmta_core::datahub::{ColumnMap, FilterConfig, GeneratorConfig, JourneyFormat};
use dcrmta_core::fusion_model::ModelConfig;
use dcrmta_core::replay::ReplayConfig;
use serde::{Deserialize, Serialize};

/// Bad flags, unreadable or malformed config. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportSettings {
    /// Raw event log.
    pub input: Option<PathBuf>,
    pub column_map: Option<ColumnMap>,
    pub filter: FilterConfig,
}

/// Everything a command needs; one file drives every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Journey file read by train/eval/attribute/replay. Defaults to the file `gen` or
    /// `import` writes into `out_dir`.
    pub dataset: Option<PathBuf>,
    pub format: JourneyFormat,
    /// train / validation / test.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub data_seed: u64,
    pub generator: GeneratorConfig,
    pub import: ImportSettings,
    pub model: ModelConfig,
    pub attribution: AttributionConfig,
    pub replay: ReplayConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            format: JourneyFormat::Jsonl,
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
            data_seed: 0,
            generator: GeneratorConfig::default(),
            import: ImportSettings::default(),
            model: ModelConfig::default(),
            attribution: AttributionConfig::default(),
            replay: ReplayConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn dataset_path(&self) -> PathBuf {
        match &self.dataset {
            Some(p) => p.clone(),
            None => self.out_dir.join(default_journey_file(self.format)),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError(format!("split ratios must be non-negative and sum to 1, got {:?}", self.split)));
        }
        self.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.attribution.validate().map_err(|e| ConfigError(e.to_string()))?;
        let f = &self.replay.fractions;
        if f.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || f.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(ConfigError(format!("replay fractions must be strictly descending in (0, 1], got {f:?}")));
        }
        Ok(())
    }

    /// Writes the resolved config next to the command's outputs.
    pub fn echo(&self, dir: &Path, label: &str) -> anyhow::Result<()> {
        let path = dir.join(format!("{label}.config.json"));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }
}

pub fn default_journey_file(format: JourneyFormat) -> &'static str {
    match format {
        JourneyFormat::Jsonl => "journeys.jsonl",
        JourneyFormat::Csv => "journeys.csv",
    }
}
