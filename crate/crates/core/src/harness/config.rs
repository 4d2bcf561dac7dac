//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::method::{MethodName, MethodSettings, MethodSpec, TentConfig};
use crate::feedback_adapt::{PostAdaptConfig, PresentPolicy};
use crate::oracle::CorrectionPolicy;
use crate::pre_adapt::PreAdaptConfig;
use crate::backbone::ArchConfig;
use crate::datagen::{DatasetConfig, SourceTrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub methods: Vec<MethodName>,
    /// Target domains in stream order; empty means all of them.
    pub domains: Vec<String>,
    /// Shuffle samples within each domain with a seed derived from `seed`.
    pub shuffle: bool,
    /// Restart from the source model at every domain boundary.
    pub reset_per_domain: bool,
    pub data: DatasetConfig,
    pub arch: ArchConfig,
    pub train: SourceTrainConfig,
    pub pre: PreAdaptConfig,
    pub post: PostAdaptConfig,
    pub tent: TentConfig,
    pub correction: CorrectionPolicy,
    pub present: Option<PresentPolicy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("runs/source.json"),
            out_dir: PathBuf::from("runs/matrix"),
            methods: MethodName::ALL.to_vec(),
            domains: Vec::new(),
            shuffle: true,
            reset_per_domain: false,
            data: DatasetConfig::default(),
            arch: ArchConfig::default(),
            train: SourceTrainConfig::default(),
            pre: PreAdaptConfig::default(),
            post: PostAdaptConfig::default(),
            tent: TentConfig::default(),
            correction: CorrectionPolicy::default(),
            present: None,
        }
    }
}

impl RunConfig {
    /// 32 px images, a three-level network of base width 8 and 30 source
    /// epochs: the full method matrix runs in minutes on one CPU core.
    pub fn compact() -> Self {
        Self {
            data: DatasetConfig::with_size(32),
            arch: ArchConfig {
                levels: 3,
                base_width: 8,
                ..ArchConfig::default()
            },
            train: SourceTrainConfig {
                epochs: 30,
                ..SourceTrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if !self.data.size.is_multiple_of(self.arch.downsampling()) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the network downsampling {}",
                self.data.size,
                self.arch.downsampling()
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        for m in &self.methods {
            self.spec(*m)?;
        }
        for d in &self.domains {
            if !self.data.targets.iter().any(|t| &t.name == d) {
                return Err(Error::Config(format!("unknown target domain {d}")));
            }
        }
        Ok(())
    }

    pub fn spec(&self, name: MethodName) -> Result<MethodSpec> {
        MethodSpec::resolve(name, &self.settings())
    }

    pub fn settings(&self) -> MethodSettings {
        MethodSettings {
            pre: self.pre.clone(),
            post: self.post.clone(),
            tent: self.tent.clone(),
            correction: self.correction,
            present: self.present,
        }
    }

    pub fn target_domains(&self) -> Vec<String> {
        if self.domains.is_empty() {
            self.data.targets.iter().map(|t| t.name.clone()).collect()
        } else {
            self.domains.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback_adapt::WeightMode;

    #[test]
    fn compact_profile_is_valid_and_round_trips() {
        let cfg = RunConfig::compact();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 9
            methods = ["no_tta", "hitta"]
            [pre]
            steps = 5
            [post]
            weight_mode = "none"
            [arch]
            levels = 3
            base_width = 8
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pre.steps, 5);
        assert_eq!(cfg.pre.copies, 6);
        assert_eq!(cfg.post.weight_mode, WeightMode::None);
        assert_eq!(cfg.arch.in_channels, 3);
    }

    #[test]
    fn invalid_files_are_rejected() {
        assert!(RunConfig::from_toml_str("bogus_key = 1").is_err());
        assert!(RunConfig::from_toml_str("[post]\nlr_backbone = 0.5").is_err());
        assert!(RunConfig::from_toml_str("methods = [\"magic\"]").is_err());
        assert!(RunConfig::from_toml_str("domains = [\"nowhere\"]").is_err());
    }
}
