//! Per-command settings read from a TOML or JSON file and overridden by flags.

use std::path::{Path, PathBuf};

use css_core::sim::SimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub simulate: SimulateConfig,
    pub train: TrainSection,
    pub separate: SeparateConfig,
    pub evaluate: EvaluateConfig,
}

impl ConfigFile {
    /// Reads `path` as JSON when it ends in `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub sim: SimConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("data"),
            count: 200,
            seed: 0,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Tiny,
    Base,
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Manifest file, or the directory holding `manifest.jsonl`.
    pub manifest: PathBuf,
    /// Final weights file.
    pub out: PathBuf,
    pub model: ModelSize,
    /// Microphones fed to the model.
    pub mics: usize,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f64,
    pub seed: u64,
    pub micro_batch: usize,
    pub checkpoint_every: u64,
    pub noisy_targets: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let toy = css_core::train::TrainConfig::toy(css_core::train::TOY_MICS);
        Self {
            manifest: PathBuf::from("data"),
            out: PathBuf::from("model.cssw"),
            model: ModelSize::Tiny,
            mics: css_core::train::TOY_MICS,
            steps: toy.schedule.total_steps,
            warmup: toy.schedule.warmup_steps,
            lr: toy.peak_lr,
            seed: toy.seed,
            micro_batch: toy.micro_batch,
            checkpoint_every: toy.checkpoint_every,
            noisy_targets: toy.noisy_targets,
            checkpoint_dir: None,
            log: None,
            resume: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    /// Every microphone in the input.
    Auto,
    #[value(name = "1")]
    #[serde(rename = "1")]
    One,
    #[value(name = "7")]
    #[serde(rename = "7")]
    Seven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparateConfig {
    pub weights: PathBuf,
    pub out_dir: PathBuf,
    pub channels: Channels,
    pub merge: Switch,
    /// Previous chunks attended to; the weights file value when absent.
    pub cache: Option<usize>,
}

impl Default for SeparateConfig {
    fn default() -> Self {
        Self {
            weights: PathBuf::from("model.cssw"),
            out_dir: PathBuf::from("."),
            channels: Channels::Auto,
            merge: Switch::Off,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub manifest: PathBuf,
    pub weights: Option<PathBuf>,
    /// Score the reference images themselves instead of model outputs.
    pub oracle: bool,
    pub json: Option<PathBuf>,
    pub merge: Switch,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data"),
            weights: None,
            oracle: false,
            json: None,
            merge: Switch::Off,
        }
    }
}

/// Prints `value` as a TOML table named `section`, so it can be pasted
/// back into a config file.
pub fn echo<T: Serialize>(section: &str, value: &T) -> Result<(), CliError> {
    let doc = std::collections::BTreeMap::from([(section, value)]);
    let text = toml::to_string(&doc).map_err(|e| CliError::Internal(format!("cannot echo config: {e}")))?;
    println!("# effective configuration\n{text}");
    Ok(())
}
