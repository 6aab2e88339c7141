//! Run configuration files.
//!
//! TOML with a `[model]` table (keys of [`ModelConfig`]), a `[train]` table
//! (keys of [`TrainConfig`]) and an optional `[stage2]` table that replaces
//! `[train]` for the context stage. Missing keys take their defaults; unknown
//! keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::train::TrainConfig;
use crate::transformer::{HanMode, ModelConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage2: Option<TrainConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        if let Some(s) = &cfg.stage2 {
            s.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Training settings for `stage`.
    pub fn stage(&self, stage: u8) -> TrainConfig {
        let base = if stage == 2 { self.stage2.clone().unwrap_or_else(|| self.train.clone()) } else { self.train.clone() };
        TrainConfig { stage, ..base }
    }

    /// Both stages, with `model.han_mode` as the stage-2 target (joint when none).
    pub fn experiment(&self, beam_size: usize) -> ExperimentConfig {
        let target_mode = if self.model.han_mode == HanMode::None { HanMode::Joint } else { self.model.han_mode };
        ExperimentConfig {
            model: self.model.clone(),
            stage1: self.stage(1),
            stage2: self.stage(2),
            target_mode,
            beam_size,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let c = RunConfig::from_toml("[model]\nd_model = 32\nhan_mode = \"decoder_source\"\n[train]\nmax_steps = 7\n[stage2]\nlr_scale = 0.5\n").unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.han_mode, HanMode::DecoderSource);
        assert_eq!(c.model.n_heads, ModelConfig::default().n_heads);
        assert_eq!(c.stage(1).max_steps, 7);
        assert_eq!(c.stage(2).lr_scale, 0.5);
        assert_eq!(c.stage(2).stage, 2);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_model = 30\nn_heads = 4\n").is_err());
        assert!(RunConfig::from_toml("[train]\nwarmup_steps = 0\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig { stage2: Some(TrainConfig { stage: 2, ..Default::default() }), ..Default::default() };
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
