//! Declarative experiment configuration (TOML).
//!
//! ```toml
//! seed = 1
//!
//! [market]
//! horizon = 10
//! stock = 10.0
//! discount = 0.99
//! arrivals = { family = "truncated-poisson", lambda = 10.0, max_arrivals = 30 }
//! quantity = { family = "uniform", upper = 2.0 }
//! value = { family = "exponential" }
//!
//! [mc]
//! nodes = 50
//! degree = 4
//! episodes = 10000
//!
//! [ddpg]
//! episodes = 10000
//! hidden = [64, 64, 64]
//! ```
//!
//! Every section is optional; missing sections take the defaults shown by
//! [`ExperimentConfig::default`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::AuditConfig;
use crate::ddpg::DdpgConfig;
use crate::harness::FullInfoMode;
use crate::market::{MarketConfig, MarketSpec};
use crate::mechanism::MechanismConfig;
use crate::value_approx::FitConfig;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub nodes: usize,
    pub degree: usize,
    pub episodes: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            nodes: 50,
            degree: 4,
            episodes: 10_000,
        }
    }
}

impl McSection {
    pub fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            nodes: self.nodes,
            degree: self.degree,
            episodes: self.episodes,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub test_episodes: usize,
    pub full_info: FullInfoMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_episodes: 20,
            full_info: FullInfoMode::Offline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub market: MarketConfig,
    pub mc: McSection,
    pub ddpg: DdpgConfig,
    pub mechanism: MechanismConfig,
    pub audit: AuditConfig,
    pub evaluation: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            market: MarketConfig::table1(10, 10.0),
            mc: McSection::default(),
            ddpg: DdpgConfig::default(),
            mechanism: MechanismConfig::default(),
            audit: AuditConfig::default(),
            evaluation: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn market_spec(&self) -> Result<MarketSpec> {
        MarketSpec::new(self.market.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"
seed = 7
[market]
horizon = 30
stock = 30.0
discount = 0.99
arrivals = { family = "truncated-poisson", lambda = 10.0, max_arrivals = 30 }
quantity = { family = "uniform", upper = 2.0 }
value = { family = "exponential" }
[mc]
nodes = 20
[ddpg]
episodes = 500
hidden = [32, 32]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.market, MarketConfig::table1(30, 30.0));
        assert_eq!(cfg.mc.nodes, 20);
        assert_eq!(cfg.mc.degree, 4);
        assert_eq!(cfg.ddpg.hidden, vec![32, 32]);
        assert_eq!(cfg.ddpg.actor_lr, 1e-4);
        assert!(cfg.market_spec().is_ok());
    }

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("[mc]\nnodez = 3").is_err());
    }
}
