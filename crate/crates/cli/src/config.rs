use std::path::Path;

use hahog::cluster::ClusterConfig;
use hahog::depth::Calibration;
use hahog::detector::DetectorConfig;
use hahog::eval::EvalConfig;
use hahog::synth::SceneConfig;
use hahog::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable of a run. Loaded from a TOML file, then overridden by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Seeds scene synthesis, sample extraction, training and the review
    /// order.
    pub seed: u64,
    /// Worker threads for parallel sections; 0 uses every core.
    pub threads: usize,
    pub synth: SceneConfig,
    pub training: TrainingConfig,
    /// Detection settings, shared by `detect`, `bench`, `serve` and the
    /// mining rounds of `train`.
    pub detector: DetectorConfig,
    pub cluster: ClusterConfig,
    pub eval: EvalConfig,
    /// Used by `eval` when frames (and their sidecars) are not given.
    pub calibration: Calibration,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 1,
            threads: 0,
            synth: SceneConfig::default(),
            training: TrainingConfig::default(),
            detector: DetectorConfig::default(),
            cluster: ClusterConfig::default(),
            eval: EvalConfig::default(),
            calibration: Calibration::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(AppConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Makes derived sections agree with the top-level settings.
    pub fn resolve(&mut self) {
        self.training.seed = self.seed;
        self.training.optimizer.seed = self.seed;
        self.training.detector = self.detector;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.training.features.validate()?;
        self.training.optimizer.validate()?;
        self.training.negatives.validate()?;
        self.detector.validate()?;
        self.cluster.validate()?;
        self.eval.validate()?;
        self.calibration.validate()?;
        Ok(())
    }
}
