//! JSON run configuration for `pdconv train` and `pdconv gen`.

use std::path::Path;

use pdconv::network::train::TrainConfig;
use pdconv::network::{GenConfig, NetConfig, Variant};
use pdconv::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaModeName {
    #[default]
    Learnable,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    /// Encoder stages; only 3 is supported.
    pub stages: usize,
    pub alpha_mode: AlphaModeName,
    /// Required when `alpha_mode` is `fixed`, forbidden otherwise.
    pub fixed_alpha: Option<f64>,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64],
            stages: 3,
            alpha_mode: AlphaModeName::Learnable,
            fixed_alpha: None,
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Scenes taken from the end of the dataset as the held-out split when no
    /// separate test set is given.
    pub holdout: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingConfig {
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch: t.batch,
            holdout: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub generator: GenConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.stages != 3 {
            return Err(Error::Config(format!("model.stages must be 3, got {}", m.stages)));
        }
        match (m.alpha_mode, m.fixed_alpha) {
            (AlphaModeName::Fixed, None) => {
                return Err(Error::Config("model.alpha_mode \"fixed\" needs model.fixed_alpha".into()))
            }
            (AlphaModeName::Fixed, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return Err(Error::Config(format!("model.fixed_alpha must be in [0, 1], got {a}")))
            }
            (AlphaModeName::Learnable, Some(_)) => {
                return Err(Error::Config("model.fixed_alpha is only valid with alpha_mode \"fixed\"".into()))
            }
            _ => {}
        }
        self.generator.validate()?;
        self.train_config().validate()?;
        self.net_config(self.generator.classes, m.variant).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch: t.batch,
            seed: self.seed,
        }
    }

    pub fn net_config(&self, classes: usize, variant: Variant) -> NetConfig {
        NetConfig {
            channels: self.model.channels,
            classes,
            variant,
            fixed_alpha: self.model.fixed_alpha,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.training.lr0, 8e-3);
        assert_eq!(c.training.batch, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"sed": 1}"#,
            r#"{"model": {"kernel": 5}}"#,
            r#"{"training": {"lr": 0.1}}"#,
            r#"{"generator": {"colors": 3}}"#,
        ] {
            let e = RunConfig::from_json(text).unwrap_err();
            assert!(e.to_string().contains("unknown field"), "{text}: {e}");
        }
    }

    #[test]
    fn ranges_are_validated() {
        for text in [
            r#"{"model": {"stages": 4}}"#,
            r#"{"model": {"alpha_mode": "fixed"}}"#,
            r#"{"model": {"alpha_mode": "fixed", "fixed_alpha": 1.5}}"#,
            r#"{"model": {"fixed_alpha": 0.5}}"#,
            r#"{"model": {"variant": "best"}}"#,
            r#"{"training": {"lr0": -1}}"#,
            r#"{"training": {"batch": 0}}"#,
            r#"{"training": {"momentum": 1.0}}"#,
            r#"{"generator": {"classes": 2}}"#,
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
        let c = RunConfig::from_json(r#"{"model": {"alpha_mode": "fixed", "fixed_alpha": 0.8, "variant": "swap"}}"#)
            .unwrap();
        assert_eq!(c.model.variant, Variant::Swap);
        assert_eq!(c.net_config(5, c.model.variant).fixed_alpha, Some(0.8));
    }
}
