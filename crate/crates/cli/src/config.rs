use std::path::Path;

use anyhow::{Context, Result};
use laoc::learning::TrainConfig;
use laoc::model::SystemParams;
use laoc::priors::PriorConfig;
use laoc::safeset::ReservationConstants;
use laoc::traces::TraceProfile;
use serde::{Deserialize, Serialize};

/// Settings read from `--config`. Command-line flags override these.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub system: SystemParams,
    pub safety: ReservationConstants,
    pub train: TrainConfig,
    pub profile: TraceProfile,
    pub prior: Option<PriorConfig>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text).with_context(|| format!("bad config {}", path.display()))?;
        config.system.validate().with_context(|| format!("bad system parameters in {}", path.display()))?;
        config.train.validate().with_context(|| format!("bad training settings in {}", path.display()))?;
        config.profile.validate().with_context(|| format!("bad trace profile in {}", path.display()))?;
        Ok(config)
    }
}

/// Single-line JSON for the `# config:` header of an output file.
pub fn echo<T: Serialize>(value: &T) -> String {
    format!("config: {}", serde_json::to_string(value).expect("config serialises"))
}
