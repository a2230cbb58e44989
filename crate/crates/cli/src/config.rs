//! Run configurations read from JSON. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use distvad::arraysim::SceneSpec;
use distvad::beamform::SrpConfig;
use distvad::pipeline::{FrontendConfig, FrontendKind, ModelConfig};
use distvad::segeval::SlidingConfig;
use distvad::seqmodel::TcnConfig;
use distvad::trainer::{InvariantConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_optional<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

/// Source of labelled training segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Generated toy scenes.
    Toy {
        template: SceneSpec,
        n_segments: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Directory of `name.wav` files with `name.rttm` references.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Adds the channel-number invariant objective when present.
    #[serde(default)]
    pub invariant: Option<InvariantConfig>,
    pub data: DataSpec,
    #[serde(default)]
    pub validation: Option<DataSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub tcn: TcnConfig,
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig::new(self.frontend.clone(), self.tcn.clone())
    }
}

/// `features` configuration: a front end and the seed of its untrained
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            frontend: FrontendConfig::new(FrontendKind::Stft),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrpRunConfig {
    #[serde(default)]
    pub geometry: Option<distvad::beamform::ArrayGeometry>,
    #[serde(default)]
    pub srp: SrpConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRunConfig {
    #[serde(default)]
    pub sliding: SlidingConfig,
}
