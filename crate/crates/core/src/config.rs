//! Run configuration, read from TOML. Every table is optional and falls back
//! to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::gss::GssConfig;
use crate::loss::LossConfig;
use crate::optim::LearningRates;
use crate::train::StagePlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Default seed; `--seed` overrides it.
    pub seed: u64,
    /// Dataset manifest, relative to the config file.
    pub manifest: Option<PathBuf>,
    pub field: FieldConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub lr: LearningRates,
    pub gss: GssConfig,
    pub init: InitConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub fixture: FixtureConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: None,
            field: FieldConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            lr: LearningRates::default(),
            gss: GssConfig::default(),
            init: InitConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            fixture: FixtureConfig::default(),
        }
    }
}

/// Random initialization of the coarse Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub count: usize,
    /// Positions are uniform in `[-extent, extent]^3`.
    pub extent: f64,
    pub scale: f64,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            count: 100,
            extent: 1.0,
            scale: 0.1,
            opacity: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub iterations: usize,
    pub densify: bool,
    pub densify_interval: usize,
    /// Fraction of the stage after which densification stops.
    pub densify_until: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 2000,
            densify: true,
            densify_interval: 100,
            densify_until: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub iterations: usize,
    pub gss_interval: usize,
    /// Fraction of the stage after which splitting stops.
    pub gss_until: f64,
    pub coarse_finetune_lr_scale: f64,
    /// Start the stage with fresh optimizer moments.
    pub reset_optimizer: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iterations: 2000,
            gss_interval: 100,
            gss_until: 0.6,
            coarse_finetune_lr_scale: 0.1,
            reset_optimizer: true,
        }
    }
}

/// Synthetic scene written by `make-fixture`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub gaussians: usize,
    pub views: usize,
    /// Azimuth span of the camera arc; 360 places the views on a full ring.
    pub arc_degrees: f64,
    pub lr_width: usize,
    pub lr_height: usize,
    pub sr_factor: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            gaussians: 20,
            views: 10,
            arc_degrees: 60.0,
            lr_width: 32,
            lr_height: 32,
            sr_factor: 2,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `manifest` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        self.lr.validate()?;
        self.gss.validate()?;
        if self.decoder.in_channels != crate::field::FEATURE_DIM || self.decoder.out_channels != 3 {
            return Err(Error::BadConfig("decoder must map 16 feature channels to RGB".into()));
        }
        if self.init.count == 0 || !(self.init.scale > 0.0) || !(0.0 < self.init.opacity && self.init.opacity < 1.0) {
            return Err(Error::BadConfig("init needs count > 0, scale > 0, opacity in (0, 1)".into()));
        }
        if !(self.fixture.arc_degrees > 0.0 && self.fixture.arc_degrees <= 360.0) {
            return Err(Error::BadConfig("fixture.arc_degrees must be in (0, 360]".into()));
        }
        if self.fixture.sr_factor == 0 || self.fixture.views == 0 {
            return Err(Error::BadConfig("fixture needs views > 0 and sr_factor > 0".into()));
        }
        self.stage1_plan().validate()?;
        self.stage2_plan().validate()
    }

    pub fn stage1_plan(&self) -> StagePlan {
        StagePlan {
            gss_interval: self.stage1.densify_interval,
            densify_until: self.stage1.densify_until,
            densify: self.stage1.densify,
            ..StagePlan::coarse(self.stage1.iterations)
        }
    }

    pub fn stage2_plan(&self) -> StagePlan {
        StagePlan {
            gss_interval: self.stage2.gss_interval,
            densify_until: self.stage2.gss_until,
            coarse_finetune_lr_scale: self.stage2.coarse_finetune_lr_scale,
            ..StagePlan::fine(self.stage2.iterations)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = Config::default();
        c.seed = 7;
        c.field.log2_table_size = 15;
        c.gss.tau_p = f64::INFINITY;
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(Config::from_toml_str("sed = 1"), Err(Error::BadConfig(_))));
        assert!(matches!(
            Config::from_toml_str("[stage1]\niters = 3"),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[loss]\nlambda_reg = 2.0").is_err());
        assert!(Config::from_toml_str("[gss]\nn_split = 1").is_err());
        assert!(Config::from_toml_str("[stage2]\ngss_interval = 0").is_err());
    }
}
