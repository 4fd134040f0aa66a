use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use segnas::data::DatasetConfig;
use segnas::derived::{Combine, TrainConfig};
use segnas::search::SearchRunConfig;
use segnas::search_space::SearchConfig;

use crate::UsageError;

/// Shape of the search space; the class count comes from `[dataset]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "B")]
    pub blocks: usize,
    #[serde(rename = "F")]
    pub multiplier: usize,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection {
            layers: 10,
            blocks: 5,
            multiplier: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub dim: usize,
    /// Overrides the genotype's multiplier when set.
    #[serde(rename = "F")]
    pub multiplier: Option<usize>,
    pub combine: Combine,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            dim: 64,
            multiplier: None,
            combine: Combine::default(),
        }
    }
}

/// One TOML file per run. Every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub dataset: DatasetConfig,
    pub space: SpaceSection,
    pub search: SearchRunConfig,
    pub train: TrainConfig,
    pub network: NetworkSection,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunFile::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let file: RunFile = toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        file.dataset.validate().context("[dataset]")?;
        Ok(file)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig::new(
            self.space.layers,
            self.space.blocks,
            self.space.multiplier,
            self.dataset.num_classes,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let f: RunFile = toml::from_str("").unwrap();
        assert_eq!(f, RunFile::default());
    }

    #[test]
    fn sections_override_defaults() {
        let f: RunFile = toml::from_str(
            "[space]\nL = 6\nB = 3\nF = 4\n[search]\nepochs = 8\narch_start_epoch = 4\n[network]\ndim = 32\ncombine = \"add\"\n",
        )
        .unwrap();
        assert_eq!(f.search_config(), SearchConfig::new(6, 3, 4, 7));
        assert_eq!(f.search.epochs, 8);
        assert_eq!(f.search.crop, SearchRunConfig::default().crop);
        assert_eq!(f.network.combine, Combine::Add);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunFile>("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(toml::from_str::<RunFile>("[extra]\n").is_err());
    }
}
