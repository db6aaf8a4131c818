//! Optional TOML configuration. Every field has a default; command-line
//! flags override what the file sets.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cotmed::client::ClientConfig;
use cotmed::effects::{DEFAULT_RESAMPLES, DEFAULT_SEED};
use cotmed::intervene::SwapConfig;
use cotmed::scores::{ObjectiveWeights, Reduction, DEFAULT_BETA};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Base URL of the OpenAI-compatible endpoint, e.g. `http://127.0.0.1:8000/v1`.
    pub endpoint: String,
    pub cache_dir: PathBuf,
    pub max_tokens: u32,
    pub client: ClientConfig,
    pub intervene: InterveneConfig,
    pub chains: ChainsConfig,
    pub evaluate: EvaluateConfig,
    pub effects: EffectsConfig,
    pub scores: ScoresConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            cache_dir: "cache".into(),
            max_tokens: 512,
            client: ClientConfig::default(),
            intervene: InterveneConfig::default(),
            chains: ChainsConfig::default(),
            evaluate: EvaluateConfig::default(),
            effects: EffectsConfig::default(),
            scores: ScoresConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterveneConfig {
    pub seed: u64,
    pub temperature: f64,
    pub swap: SwapConfig,
}

impl Default for InterveneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            temperature: 0.0,
            swap: SwapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainsConfig {
    pub factual_temperature: f64,
    pub counterfactual_temperature: f64,
    pub factual_k: u32,
    pub counterfactual_k: u32,
    pub seed: u64,
}

impl Default for ChainsConfig {
    fn default() -> Self {
        Self {
            factual_temperature: 0.0,
            counterfactual_temperature: 0.5,
            factual_k: 1,
            counterfactual_k: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub temperature: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectsConfig {
    pub resamples: u64,
    pub seed: u64,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoresConfig {
    pub beta: f64,
    pub weights: ObjectiveWeights,
    /// How continuation token log-probabilities become a sequence score.
    pub reduction: Reduction,
}

impl Default for ScoresConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            weights: ObjectiveWeights::default(),
            reduction: Reduction::Sum,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
