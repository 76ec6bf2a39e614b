//! The run configuration: one TOML file whose sections mirror the pipeline
//! stages. Missing keys fall back to their defaults; command-line flags are
//! applied on top by the caller.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::CostModel;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, TrainConfig};
use crate::objectives::DistillConfig;
use crate::priors::{BiasGroup, PriorSpec, TeacherSetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        synth: SynthSpec,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_q")]
        horizon_q: usize,
    },
}

fn default_q() -> usize {
    5
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Bias families to train; all four by default.
    pub groups: Vec<BiasGroup>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            groups: BiasGroup::ALL.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSetting {
    Preset(String),
    Custom(CostModel),
}

impl CostSetting {
    pub fn model(&self) -> Result<CostModel> {
        match self {
            CostSetting::Preset(name) => CostModel::preset(name),
            CostSetting::Custom(m) => {
                m.validate()?;
                Ok(*m)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub k: usize,
    pub window: usize,
    pub costs: CostSetting,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            k: 5,
            window: 5,
            costs: CostSetting::Preset("none".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub quantile: f64,
    /// Repetitions when timing student and ensemble inference.
    pub timing_repeats: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            quantile: 0.3,
            timing_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    pub teachers: TeacherConfig,
    pub distill: DistillConfig,
    pub backtest: BacktestConfig,
    pub analyze: AnalyzeConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Worker threads; `None` lets rayon decide.
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Defaults, with five seeds and output under `runs/`.
    pub fn standard() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let std = Self::standard();
        if cfg.seeds.is_empty() {
            cfg.seeds = std.seeds;
        }
        if cfg.out_dir.as_os_str().is_empty() {
            cfg.out_dir = std.out_dir;
        }
        Ok(cfg)
    }

    /// The file at `path`, or the standard configuration.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_toml(&text)
            }
            None => Ok(Self::standard()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic { synth } => synth.validate()?,
            DataSource::Csv { path, horizon_q } => {
                if !path.exists() {
                    return Err(Error::config(format!(
                        "data file {} does not exist",
                        path.display()
                    )));
                }
                if *horizon_q == 0 {
                    return Err(Error::config("horizon_q must be positive"));
                }
            }
        }
        self.backbone.validate()?;
        self.teachers.train.validate()?;
        self.distill.validate()?;
        if self.teacher_specs().is_empty() {
            return Err(Error::config("teacher subset selects no teachers"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds configured"));
        }
        if self.backtest.k == 0 || self.backtest.window == 0 {
            return Err(Error::config("backtest k and window must be positive"));
        }
        self.backtest.costs.model()?;
        if !(self.analyze.quantile > 0.0 && self.analyze.quantile <= 0.5) {
            return Err(Error::config("regime quantile must lie in (0, 0.5]"));
        }
        Ok(())
    }

    pub fn teacher_specs(&self) -> Vec<PriorSpec> {
        TeacherSetSpec::standard(self.backbone.heads).subset(&self.teachers.groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::standard();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.teacher_specs().len(), 7);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml(
            "seeds = [3]\n[backtest]\nk = 3\ncosts = \"csi\"\n[teachers]\ngroups = [\"causality\"]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.backtest.k, 3);
        assert_eq!(cfg.backtest.window, 5);
        assert_eq!(cfg.teachers.train.epochs, 2);
        assert_eq!(cfg.backtest.costs.model().unwrap(), CostModel::csi());
        let kinds: Vec<_> = cfg.teacher_specs().iter().map(|s| s.kind()).collect();
        assert_eq!(kinds.len(), 2);
    }

    #[test]
    fn invalid_configs() {
        assert!(RunConfig::from_toml("[backtest]\nk = \"five\"").is_err());
        let mut cfg = RunConfig::standard();
        cfg.teachers.groups.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::standard();
        cfg.data = DataSource::Csv {
            path: "/definitely/not/here.csv".into(),
            horizon_q: 5,
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("does not exist"));
    }
}
