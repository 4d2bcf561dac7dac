//! Registry of evaluated methods and their per-method settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback_adapt::{PostAdaptConfig, PresentPolicy, WeightMode};
use crate::oracle::CorrectionPolicy;
use crate::pre_adapt::PreAdaptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    NoTta,
    Tbn,
    Tent,
    Hitta,
    HittaNoDiv,
    HittaNoHf,
    HittaEntropyWeight,
}

impl MethodName {
    pub const ALL: [MethodName; 7] = [
        MethodName::NoTta,
        MethodName::Tbn,
        MethodName::Tent,
        MethodName::Hitta,
        MethodName::HittaNoDiv,
        MethodName::HittaNoHf,
        MethodName::HittaEntropyWeight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::NoTta => "no_tta",
            MethodName::Tbn => "tbn",
            MethodName::Tent => "tent",
            MethodName::Hitta => "hitta",
            MethodName::HittaNoDiv => "hitta_no_div",
            MethodName::HittaNoHf => "hitta_no_hf",
            MethodName::HittaEntropyWeight => "hitta_entropy_weight",
        }
    }

    pub fn uses_pre_stage(self) -> bool {
        matches!(
            self,
            MethodName::Hitta | MethodName::HittaNoHf | MethodName::HittaEntropyWeight
        )
    }

    pub fn uses_feedback(self) -> bool {
        matches!(
            self,
            MethodName::Hitta | MethodName::HittaNoDiv | MethodName::HittaEntropyWeight
        )
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Entropy minimization on BN scale/bias with single-image statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TentConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            lr: 0.001,
            momentum: 0.9,
        }
    }
}

impl TentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("invalid entropy-minimization optimizer settings".into()));
        }
        Ok(())
    }
}

/// Settings shared by all methods; [`MethodSpec::resolve`] derives each
/// method's effective configuration from them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSettings {
    pub pre: PreAdaptConfig,
    pub post: PostAdaptConfig,
    pub tent: TentConfig,
    pub correction: CorrectionPolicy,
    pub present: Option<PresentPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: MethodName,
    pub pre: Option<PreAdaptConfig>,
    pub post: Option<PostAdaptConfig>,
    pub tent: Option<TentConfig>,
    pub correction: CorrectionPolicy,
    pub present: PresentPolicy,
}

impl MethodSpec {
    pub fn resolve(name: MethodName, settings: &MethodSettings) -> Result<Self> {
        let pre = name.uses_pre_stage().then(|| settings.pre.clone());
        let post = name.uses_feedback().then(|| {
            let mut post = settings.post.clone();
            if name == MethodName::HittaEntropyWeight {
                post.weight_mode = WeightMode::Entropy;
            }
            post
        });
        let spec = Self {
            name,
            pre,
            post,
            tent: (name == MethodName::Tent).then(|| settings.tent.clone()),
            correction: settings.correction,
            present: if name.uses_feedback() {
                settings.present.unwrap_or(PresentPolicy::OracleDsc)
            } else {
                PresentPolicy::MainHead
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.name;
        if n.uses_pre_stage() != self.pre.is_some()
            || n.uses_feedback() != self.post.is_some()
            || (n == MethodName::Tent) != self.tent.is_some()
        {
            return Err(Error::Config(format!("configuration blocks do not match method {n}")));
        }
        if let Some(p) = &self.pre {
            p.validate()?;
            if p.copies < 2 {
                return Err(Error::Config("test-batch statistics need at least two augmented copies".into()));
            }
        }
        if let Some(p) = &self.post {
            p.validate()?;
        }
        if let Some(t) = &self.tent {
            t.validate()?;
        }
        self.correction.validate()
    }

    pub fn has_head(&self) -> bool {
        self.post.is_some()
    }
}
