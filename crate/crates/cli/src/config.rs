//! The single human-readable configuration file.

use std::path::Path;

use anyhow::Context;
use lfsa_core::heads::validate_levels;
use lfsa_core::toy::ToyConfig;
use lfsa_core::{Error, HeadSpec, HeadVariant, LevelSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub hidden: usize,
    pub convs_per_branch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub n_anchors: usize,
    pub n_classes: usize,
    pub dh: BranchConfig,
    pub edh: BranchConfig,
    pub levels: Vec<LevelSpec>,
    pub lambda: f64,
    pub report_format: ReportFormat,
    pub seed: u64,
    pub toy: ToyConfig,
}

impl Default for Config {
    fn default() -> Self {
        let dh = HeadSpec::dh_default(3, 80);
        let edh = HeadSpec::edh_default(3, 80);
        Self {
            n_anchors: 3,
            n_classes: 80,
            dh: BranchConfig { hidden: dh.hidden_channels, convs_per_branch: dh.convs_per_branch },
            edh: BranchConfig { hidden: edh.hidden_channels, convs_per_branch: edh.convs_per_branch },
            levels: LevelSpec::yolov5l(),
            lambda: lfsa_core::abota::DEFAULT_LAMBDA,
            report_format: ReportFormat::Json,
            seed: 7,
            toy: ToyConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let config: Config = match path {
            None => Config::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn head_spec(&self, variant: HeadVariant) -> HeadSpec {
        let b = match variant {
            HeadVariant::Dh => self.dh,
            HeadVariant::Edh => self.edh,
        };
        HeadSpec {
            variant,
            hidden_channels: b.hidden,
            convs_per_branch: b.convs_per_branch,
            n_anchors: self.n_anchors,
            n_classes: self.n_classes,
        }
    }

    /// Collects every offending field before failing.
    pub fn validate(&self) -> Result<(), Error> {
        let mut problems = Vec::new();
        for (field, variant) in [("dh", HeadVariant::Dh), ("edh", HeadVariant::Edh)] {
            if let Err(e) = self.head_spec(variant).validate() {
                problems.push(format!("{field}: {e}"));
            }
        }
        if let Err(e) = validate_levels(&self.levels) {
            problems.push(format!("levels: {e}"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda: must be finite and >= 0, got {}", self.lambda));
        }
        if let Err(e) = self.toy.validate() {
            problems.push(format!("toy: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let text = toml::to_string(&Config::default()).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, Config::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(toml::from_str::<Config>("lamda = 2.0").is_err());
        assert!(toml::from_str::<Config>("[toy]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn validation_lists_every_field() {
        let c = Config { lambda: -1.0, n_classes: 0, ..Config::default() };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("lambda") && msg.contains("dh") && msg.contains("edh"), "{msg}");
    }
}
