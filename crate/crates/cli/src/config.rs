use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::{Deserialize, Serialize};
use snapshot_core::benchmark::BenchmarkConfig;
use snapshot_core::features::FeatureConfig;
use snapshot_core::model::Hyperparams;
use snapshot_core::scene::GeneratorConfig;
use snapshot_core::training::TrainConfig;

use crate::CliError;

/// Resolved settings of one run: the optional TOML file with command-line
/// flags applied on top.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the synthetic generator.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub benchmark: BenchmarkConfig,
    pub features: FeatureConfig,
    pub model: Hyperparams,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config to `path`.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, self.to_toml())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// True when `id` was given on the command line or through the environment
/// rather than falling back to its default.
fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

/// Overwrites `dst` with the value of `id` if it was given explicitly.
pub fn apply<T: Clone + Send + Sync + 'static>(m: &ArgMatches, id: &str, dst: &mut T) {
    if explicit(m, id) {
        *dst = m.get_one::<T>(id).expect("typed argument").clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_defaults() {
        let c: RunConfig =
            toml::from_str("[train]\nbatch_size = 32\n[model]\nmap_rows = 50\n").unwrap();
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert_eq!(c.model.map_rows, 50);
        assert_eq!(c.benchmark, BenchmarkConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[features.risk]\nbogus = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.train.noise_std = 0.05;
        c.features.selection = snapshot_core::features::Selection::Risk;
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
