//! TOML experiment configuration. Every section is optional and unknown keys
//! are rejected; models are referenced by path, never inlined.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Activation;
use crate::training::DatasetKind;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub gradcheck: Option<GradcheckConfig>,
    pub regime: Option<RegimeConfig>,
    pub bounds: Option<BoundsConfig>,
    pub train: Option<TrainSection>,
    pub levelset: Option<LevelsetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub models: usize,
    pub points: usize,
    pub h: f64,
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { models: 200, points: 5, h: 1e-5, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConfig {
    pub model: Option<PathBuf>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub search: bool,
    /// Search lattice points per axis; defaults by dimension.
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Euler,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub kind: BoundKind,
    /// Random specs (euler) or models (mlp) per sweep.
    pub instances: usize,
    /// Depths swept by the euler check.
    pub depths: Vec<usize>,
    /// Skip parameters swept by the mlp check.
    pub eps: Vec<f64>,
    pub resolution: usize,
    pub activation: Activation,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            kind: BoundKind::Euler,
            instances: 10,
            depths: vec![5, 10, 20, 40],
            eps: vec![0.1, 0.05, 0.01],
            resolution: 201,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dataset: DatasetKind,
    pub n_points: Option<usize>,
    pub data_seed: u64,
    pub eps: f64,
    pub delta: f64,
    pub depth: usize,
    pub n_hid: usize,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_norm: bool,
    pub resolution: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            dataset: DatasetKind::Circle2D,
            n_points: None,
            data_seed: 0,
            eps: 1.0,
            delta: 0.1,
            depth: 20,
            n_hid: 2,
            seeds: (0..10).collect(),
            lr: 0.01,
            batch_size: None,
            epochs: None,
            batch_norm: false,
            resolution: 201,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelsetConfig {
    pub model: Option<PathBuf>,
    pub level: Option<f64>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub resolution: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok((ExperimentConfig::parse(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("serialising config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c = ExperimentConfig::parse("seed = 3\n[bounds]\nkind = \"mlp\"\neps = [0.1]\n").unwrap();
        assert_eq!(c.seed, Some(3));
        let b = c.bounds.unwrap();
        assert_eq!(b.kind, BoundKind::Mlp);
        assert_eq!(b.resolution, 201);
        assert!(ExperimentConfig::parse("[bounds]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::parse("colour = 1\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig { train: Some(TrainSection::default()), ..Default::default() };
        let back = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
