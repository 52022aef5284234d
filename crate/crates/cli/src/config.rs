//! Run configuration: a TOML file with `model`, `data`, `train` and `eval`
//! sections. Every key is optional; missing keys take the defaults noted below.
//! Command-line flags override file values.

use std::path::Path;

use anseg::dataset::{CATEGORIES, NOVEL_CATEGORIES};
use anseg::eval::{Adaptation, EvalConfig};
use anseg::modulator::{Mode, ModelConfig};
use anseg::train::{json_hash, TrainConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for data generation, initialization and training. Default 0.
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 64-point clouds, C = 12.
    Tiny,
    /// 512-point clouds, C = 64, three decoder layers.
    Desk,
    /// 2048-point clouds, C = 128, six decoder layers.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Architecture preset. Default "desk".
    pub preset: Preset,
    /// "analogical", "detr3d" or "re_detr3d". Default "analogical".
    pub mode: Mode,
    /// Memories per forward pass (K). Default 1; must stay 1 in detr3d mode.
    pub memories: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            mode: Mode::Analogical,
            memories: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Categories to generate. Default: all eight.
    pub categories: Vec<String>,
    /// Scenes per category. Default 120.
    pub per_category: usize,
    /// Points per scene. Default 512.
    pub points: usize,
    /// Minimum points per leaf part. Default 8.
    pub min_points_per_part: usize,
    /// Categories held out as the novel pool. Default ["bed", "stool"].
    pub novel_categories: Vec<String>,
    /// Fraction of each base category used for training. Default 0.8.
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            per_category: 120,
            points: 512,
            min_points_per_part: 8,
            novel_categories: NOVEL_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Use the long schedules (100 / 60 / 90 epochs). Default false.
    pub long_schedule: bool,
    /// Within-scene pre-training epochs. Default 30.
    pub within_epochs: Option<usize>,
    /// Cross-scene training epochs. Default 20.
    pub cross_epochs: Option<usize>,
    /// Few-shot fine-tuning epochs. Default 30.
    pub finetune_epochs: Option<usize>,
    /// Learning rate for pre-training and cross-scene training. Default 2e-4.
    pub learning_rate: Option<f64>,
    /// Learning rate for few-shot fine-tuning. Default 3e-5.
    pub finetune_learning_rate: Option<f64>,
    /// Batch size for every stage. Defaults 16 (pre-training, cross-scene) and 8 (fine-tuning).
    pub batch_size: Option<usize>,
    /// Optimizer step cap per stage. Default none.
    pub max_steps: Option<usize>,
    /// Rotation and deformation augmentation. Default true.
    pub augment: bool,
    /// Interleave within-scene batches during cross-scene training. Default true.
    pub within_co_training: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            long_schedule: false,
            within_epochs: None,
            cross_epochs: None,
            finetune_epochs: None,
            learning_rate: None,
            finetune_learning_rate: None,
            batch_size: None,
            max_steps: None,
            augment: true,
            within_co_training: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Adapt {
    /// Support scenes become the memory repository; weights stay untouched.
    None,
    /// Fine-tune on the support scenes, then expand memory.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Support scenes per few-shot episode. Default 1.
    pub shots: usize,
    /// Episodes per novel category. Default 10.
    pub episodes: usize,
    /// Few-shot adaptation. Default "none".
    pub adapt: Adapt,
    /// Restrict retrieval to the query's category. Default false.
    pub category_constrained: bool,
    /// IoU threshold for part mAP. Default 0.5.
    pub iou_threshold: f64,
    /// Ranked results printed by `retrieve`. Default 4.
    pub top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            shots: 1,
            episodes: 10,
            adapt: Adapt::None,
            category_constrained: false,
            iou_threshold: 0.5,
            top_k: 4,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    /// Hash of the inputs that determine generated data.
    pub fn data_hash(&self) -> String {
        json_hash(&(self.seed, &self.data))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.memories == 0 {
            bail!("model.memories must be at least 1");
        }
        if self.model.mode == Mode::Detr3d && self.model.memories != 1 {
            bail!("detr3d mode uses no memories; model.memories must stay 1");
        }
        if self.data.categories.is_empty() || self.data.per_category == 0 {
            bail!("data needs at least one category and one scene per category");
        }
        for c in self.data.categories.iter().chain(&self.data.novel_categories) {
            if !CATEGORIES.contains(&c.as_str()) {
                bail!("unknown category {c:?} (known: {})", CATEGORIES.join(", "));
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            bail!("data.train_fraction must lie in (0, 1]");
        }
        if self.eval.shots == 0 || self.eval.episodes == 0 {
            bail!("eval.shots and eval.episodes must be positive");
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            bail!("eval.iou_threshold must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut mc = match self.model.preset {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::default(),
        };
        mc.modulator.mode = self.model.mode;
        mc.modulator.memories_per_forward = self.model.memories;
        mc.seed = self.seed;
        mc
    }

    fn stage_config(&self, mut tc: TrainConfig, epochs: Option<usize>, lr: Option<f64>) -> TrainConfig {
        if self.train.long_schedule {
            tc = tc.with_long_schedule();
        }
        if self.model.memories > 1 {
            tc = tc.for_multi_memory();
        }
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        if let Some(lr) = lr {
            tc.learning_rate = lr;
        }
        if let Some(b) = self.train.batch_size {
            tc.batch_size = b;
        }
        tc.max_steps = self.train.max_steps;
        tc.augment = self.train.augment;
        tc.seed = self.seed;
        tc
    }

    pub fn within_config(&self) -> TrainConfig {
        self.stage_config(TrainConfig::within_scene(), self.train.within_epochs, self.train.learning_rate)
    }

    pub fn cross_config(&self) -> TrainConfig {
        let mut tc = self.stage_config(TrainConfig::cross_scene(), self.train.cross_epochs, self.train.learning_rate);
        if !self.train.within_co_training {
            tc.within_every = 0;
        }
        if self.model.mode == Mode::Detr3d {
            tc.loss.semantic = true;
        }
        tc
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let mut tc = self.stage_config(TrainConfig::finetune(), self.train.finetune_epochs, self.train.finetune_learning_rate);
        if self.model.mode == Mode::Detr3d {
            tc.loss.semantic = true;
        }
        tc
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            category_constrained: self.eval.category_constrained,
            iou_threshold: self.eval.iou_threshold,
            ..EvalConfig::default()
        }
    }

    pub fn adaptation(&self) -> Adaptation {
        match self.eval.adapt {
            Adapt::None => Adaptation::MemoryExpansion,
            Adapt::Finetune => Adaptation::Finetune {
                config: self.finetune_config(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("colour = 1").is_err());
        assert!(RunConfig::parse("[model]\nlayers = 3").is_err());
        assert!(RunConfig::parse("[bogus]").is_err());
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::parse(
            "seed = 7\n[model]\nmode = \"detr3d\"\npreset = \"tiny\"\n[data]\nper_category = 3\n[eval]\nadapt = \"finetune\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.mode, Mode::Detr3d);
        assert_eq!(cfg.model.preset, Preset::Tiny);
        assert_eq!(cfg.data.per_category, 3);
        assert_eq!(cfg.eval.adapt, Adapt::Finetune);
        assert!(cfg.validate().is_ok());
        assert!(cfg.cross_config().loss.semantic);
    }

    #[test]
    fn detr3d_with_several_memories_is_invalid() {
        let mut cfg = RunConfig::default();
        cfg.model.mode = Mode::Detr3d;
        cfg.model.memories = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn data_hash_ignores_training_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.cross_epochs = Some(3);
        assert_eq!(a.data_hash(), b.data_hash());
        assert_ne!(a.hash(), b.hash());
        b.data.per_category = 4;
        assert_ne!(a.data_hash(), b.data_hash());
    }
}
