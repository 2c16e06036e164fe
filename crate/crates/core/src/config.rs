//! JSON run configuration and built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::evg::{HeadConfig, DEFAULT_LAMBDA};
use crate::model::{ModelConfig, Variant};
use crate::synth::{Mixture, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub variant: Variant,
    pub init_seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Shuffling seed.
    pub seed: u64,
    /// Training samples generated for the stage.
    pub samples: usize,
    pub mixture: Mixture,
    /// Add the alignment term to the loss.
    #[serde(default = "default_true")]
    pub align: bool,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfigs {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl StageConfigs {
    pub fn get(&self, stage: u8) -> Result<&TrainConfig> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            s => Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub grid: usize,
    pub cell_px: usize,
    pub frames: usize,
    pub expert_seed: u64,
    /// Base seed of the training sets; stage 2 and held-out sets derive
    /// their own seeds from it.
    pub seed: u64,
    pub heldout_samples: usize,
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            grid: self.grid,
            cell_px: self.cell_px,
            frames: self.frames,
            expert_seed: self.expert_seed,
        }
    }

    /// Seed of a named split: stage 1/2 training or held-out.
    pub fn split_seed(&self, split: Split) -> u64 {
        crate::synth::mix_seed(self.seed, 1000 + split as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Stage1,
    Stage2,
    Heldout1,
    Heldout2,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub out: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub heads: HeadConfig,
    pub train: StageConfigs,
    pub data: DataConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.model.backbone.clone(),
            heads: self.heads.clone(),
            variant: self.model.variant,
            init_seed: self.model.init_seed,
        }
    }

    /// Checks every section and the agreements between them.
    pub fn validate(&self) -> Result<()> {
        let b = &self.model.backbone;
        b.validate()?;
        let synth = self.data.synth();
        synth.validate()?;
        self.train.stage1.validate()?;
        self.train.stage2.validate()?;
        if self.heads.visual_queries == 0 || self.heads.expert_dim == 0 {
            return Err(Error::Config("heads.visual_queries and heads.expert_dim must be positive".into()));
        }
        if self.heads.heads == 0 || b.width % self.heads.heads != 0 {
            return Err(Error::Config("heads.heads must divide model width".into()));
        }
        if b.patches_per_frame != synth.patches() {
            return Err(Error::Config(format!(
                "patches_per_frame {} does not match grid {}",
                b.patches_per_frame, synth.grid
            )));
        }
        if b.patch_dim != synth.patch_dim() {
            return Err(Error::Config(format!(
                "patch_dim {} does not match cell_px {}",
                b.patch_dim, synth.cell_px
            )));
        }
        let vocab = synth.vocab().size();
        if b.vocab < vocab {
            return Err(Error::Config(format!("vocab {} smaller than the task vocabulary {vocab}", b.vocab)));
        }
        let longest = synth.frames * synth.patches() + 2 * b.queries + 3 + 1;
        if b.max_len < longest {
            return Err(Error::Config(format!("max_len {} below required {longest}", b.max_len)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "large" => Ok(Self::large()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::Config(format!("unknown preset {name}; expected toy, large or micro"))),
        }
    }

    /// Desk-scale model over a 4×4 grid with two 16×16 frames.
    pub fn toy() -> Self {
        let data = DataConfig {
            grid: 4,
            cell_px: 4,
            frames: 2,
            expert_seed: 1234,
            seed: 7,
            heldout_samples: 500,
        };
        let synth = data.synth();
        let stage = |mixture, epochs, seed| TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            lambda: DEFAULT_LAMBDA,
            seed,
            samples: 2000,
            mixture,
            align: true,
        };
        Self {
            model: ModelSection {
                backbone: BackboneConfig {
                    width: 64,
                    heads: 4,
                    layers: 2,
                    patches_per_frame: synth.patches(),
                    patch_dim: synth.patch_dim(),
                    vocab: synth.vocab().size(),
                    max_len: 48,
                    queries: 4,
                },
                variant: Variant::FULL,
                init_seed: 42,
                precision: Precision::F32,
            },
            heads: HeadConfig {
                visual_queries: 4,
                expert_dim: 16,
                heads: 4,
                joint_negatives: false,
            },
            train: StageConfigs {
                stage1: stage(Mixture::Perception, 20, 11),
                stage2: stage(Mixture::Balanced, 20, 12),
            },
            data,
            paths: PathsConfig::default(),
        }
    }

    /// The toy data and model shape with large-scale optimization settings
    /// (K=40, batch 64, stage learning rates 8e-6 and 4e-6).
    pub fn large() -> Self {
        let mut c = Self::toy();
        c.model.backbone.queries = 40;
        c.model.backbone.max_len = 128;
        for (s, lr) in [(&mut c.train.stage1, 8e-6), (&mut c.train.stage2, 4e-6)] {
            s.batch_size = 64;
            s.learning_rate = lr;
        }
        c
    }

    /// Smallest sensible configuration, for smoke tests.
    pub fn micro() -> Self {
        let mut c = Self::toy();
        c.data.grid = 2;
        c.data.cell_px = 2;
        c.data.heldout_samples = 20;
        let synth = c.data.synth();
        c.model.backbone = BackboneConfig {
            width: 16,
            heads: 2,
            layers: 1,
            patches_per_frame: synth.patches(),
            patch_dim: synth.patch_dim(),
            vocab: synth.vocab().size(),
            max_len: 24,
            queries: 2,
        };
        c.heads = HeadConfig {
            visual_queries: 2,
            expert_dim: 4,
            heads: 2,
            joint_negatives: false,
        };
        for s in [&mut c.train.stage1, &mut c.train.stage2] {
            s.epochs = 1;
            s.samples = 24;
            s.batch_size = 8;
            s.learning_rate = 1e-3;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["toy", "large", "micro"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        v["train"]["stage1"]["warmup"] = serde_json::json!(10);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn cross_section_mismatches_are_rejected() {
        let mut c = RunConfig::toy();
        c.data.grid = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.train.stage2.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.model.backbone.max_len = 40;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
