use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gridtwin_core::dataset::BaselineConfig;
use gridtwin_core::pinn::TrainConfig;
use gridtwin_core::rl::PpoConfig;
use gridtwin_core::terminal::GbtParams;
use serde::{Deserialize, Serialize};

/// Everything an experiment can be configured with. Missing tables and keys
/// take library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network description; the built-in 6-bus network when absent.
    pub network: Option<PathBuf>,
    pub surrogate: SurrogateConfig,
    pub datasets: DatasetConfig,
    pub baselines: BaselineConfig,
    pub ppo: PpoConfig,
    pub sweep: SweepConfig,
    pub episodic: EpisodicConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub gen: TrainConfig,
    pub des: TrainConfig,
    pub pb: TrainConfig,
    /// Balanced rows for the terminal classifier.
    pub terminal_rows: usize,
    pub terminal_horizon: usize,
    pub terminal_test_frac: f64,
    pub gbt: GbtParams,
    /// Held-out points for the fidelity report.
    pub eval_points: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            gen: TrainConfig::default(),
            des: TrainConfig::default(),
            pb: TrainConfig::default(),
            terminal_rows: 4000,
            terminal_horizon: 288,
            terminal_test_frac: 0.2,
            gbt: GbtParams::default(),
            eval_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub rows: usize,
    pub horizon: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            rows: 100_000,
            horizon: 288,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_envs: Vec<usize>,
    pub buffer_sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_envs: vec![50, 100, 150],
            buffer_sizes: vec![10, 30, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodicConfig {
    pub len: usize,
}

impl Default for EpisodicConfig {
    fn default() -> Self {
        EpisodicConfig { len: 288 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { n: 1000 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Relative network paths are taken from the config's directory.
        if let (Some(net), Some(dir)) = (&cfg.network, path.parent()) {
            if net.is_relative() {
                cfg.network = Some(dir.join(net));
            }
        }
        Ok(cfg)
    }

    /// Derive every stage seed from one run seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.surrogate.gen.seed = seed;
        self.surrogate.des.seed = seed.wrapping_add(1);
        self.surrogate.pb.seed = seed.wrapping_add(2);
        self.surrogate.gbt.seed = seed.wrapping_add(3);
        self.baselines.seed = seed.wrapping_add(4);
        self.ppo.seed = seed.wrapping_add(5);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[ppo]\nn_envs = 4\n[surrogate.gen]\nlr = 0.001\n").unwrap();
        assert_eq!(cfg.ppo.n_envs, 4);
        assert_eq!(cfg.ppo.buffer_size, PpoConfig::default().buffer_size);
        assert_eq!(cfg.surrogate.gen.lr, 1e-3);
        assert_eq!(cfg.surrogate.gen.batch, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[ppo]\nn_env = 4\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[bench]\nsamples = 4\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_seed(7);
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
