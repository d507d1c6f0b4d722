//! Pipeline configuration: TOML-backed, with paper-scale defaults and a
//! minute-scale toy preset used by tests and probes.

use serde::{Deserialize, Serialize};

use crate::dgrpn::DgrpnParams;
use crate::error::{Error, Result};
use crate::heads::StripeConfig;
use crate::sfan::SfanConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenes: usize,
    pub identities: u32,
    pub persons_min: usize,
    pub persons_max: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 200,
            identities: 20,
            persons_min: 1,
            persons_max: 3,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MsfrnSettings {
    pub width: usize,
}

impl Default for MsfrnSettings {
    fn default() -> Self {
        MsfrnSettings { width: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OimSettings {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
}

impl Default for OimSettings {
    fn default() -> Self {
        OimSettings {
            temperature: 1.0 / 30.0,
            momentum: 0.5,
            queue_size: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Warm-up start; the rate rises linearly to `lr_peak` over epoch 1.
    pub lr_start: f64,
    pub lr_peak: f64,
    /// Step-decay factor applied at 60% and 85% of the epoch budget.
    pub decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 5,
            lr_start: 1e-7,
            lr_peak: 1e-4,
            decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Diffusion timestep at which features are extracted.
    pub timestep: usize,
    pub data: DataConfig,
    pub dgrpn: DgrpnParams,
    pub msfrn: MsfrnSettings,
    pub sfan: SfanConfig,
    pub stripe: StripeConfig,
    pub oim: OimSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            timestep: 0,
            data: DataConfig::default(),
            dgrpn: DgrpnParams::default(),
            msfrn: MsfrnSettings::default(),
            sfan: SfanConfig::default(),
            stripe: StripeConfig::default(),
            oim: OimSettings::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Minute-scale preset: small widths, few epochs, a hot learning rate.
    pub fn toy() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.msfrn.width = 8;
        cfg.stripe = StripeConfig {
            stripes: 4,
            embed_dim: 16,
            roi_size: (8, 8),
        };
        cfg.oim.queue_size = 50;
        cfg.train = TrainConfig {
            epochs: 5,
            batch_size: 4,
            lr_start: 1e-5,
            lr_peak: 1e-3,
            decay: 0.1,
        };
        cfg
    }

    /// Preset for probe and ablation sweeps: fewer identities but crowded
    /// scenes, so multi-scale refinement has something to win.
    pub fn probe() -> Self {
        let mut cfg = PipelineConfig::toy();
        cfg.data.scenes = 96;
        cfg.data.identities = 10;
        cfg.data.persons_min = 2;
        cfg.data.persons_max = 4;
        cfg.train.epochs = 6;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dgrpn.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sfan.validate()?;
        self.stripe.validate()?;
        if self.data.identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.data.persons_min == 0 || self.data.persons_min > self.data.persons_max {
            return Err(Error::Config("invalid persons-per-scene range".into()));
        }
        if self.data.image_size != 64 {
            return Err(Error::Config(
                "the synthetic backbone catalog is contracted to 64x64 input".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::Config("iou threshold outside [0,1]".into()));
        }
        if self.oim.momentum < 0.0 || self.oim.momentum > 1.0 {
            return Err(Error::Config("oim momentum outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.batch_size, 5);
        assert_eq!(cfg.train.lr_start, 1e-7);
        assert_eq!(cfg.train.lr_peak, 1e-4);
        assert_eq!(cfg.oim.queue_size, 500);
        assert!((cfg.oim.temperature - 1.0 / 30.0).abs() < 1e-15);
        assert_eq!(cfg.oim.momentum, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_preserves_the_config() {
        let cfg = PipelineConfig::toy();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.to_toml(), back.to_toml());
    }

    #[test]
    fn partial_toml_fills_in_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 11\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PipelineConfig::from_toml("this is not toml ][").is_err());
        let mut cfg = PipelineConfig::default();
        cfg.data.identities = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.dgrpn.tau = 1.4;
        assert!(cfg.validate().is_err());
    }
}
