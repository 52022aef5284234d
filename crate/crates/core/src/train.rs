//! Within-scene pre-training, cross-scene training with retrieval, few-shot
//! adaptation and checkpoints.
//!
//! Checkpoint container (little endian):
//!
//! ```text
//! "ANCK" | version u32 | metadata (JSON str) | blob count u32 | blobs...
//! blob: name str | rows u32 | cols u32 | values f64s
//! ```
//! Frozen retriever-encoder blobs carry the `frozen:` name prefix.

use std::path::Path;

use log::{info, warn};
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat};
use crate::binio::{Reader, Writer};
use crate::dataset::LabeledScene;
use crate::encoder::ENCODER_PREFIX;
use crate::error::{Error, Result};
use crate::geom::{DeformConfig, PointCloud, RotationConfig};
use crate::losses::{total_loss, LossBreakdown, LossConfig, Supervision, Targets};
use crate::modulator::{ForwardInput, Mode, Model, ModelConfig};
use crate::params::{AdamW, Gradients, ParamSet};
use crate::retriever::{build_repository, FrozenEncoder, MemoryEntry, MemoryRepository, RetrievalOptions};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ANCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const FROZEN_PREFIX: &str = "frozen:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Within,
    Cross,
    Finetune,
}

/// Learning-rate decay over the planned number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the initial rate down to `final_fraction` of it.
    Cosine { final_fraction: f64 },
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { final_fraction } => {
                let t = if total <= 1 { 0.0 } else { (step as f64 / (total - 1) as f64).min(1.0) };
                final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    /// Memories are drawn uniformly from this many top retrievals.
    pub top_k: usize,
    /// Every n-th cross-scene batch is a within-scene batch; 0 disables co-training.
    pub within_every: usize,
    pub grad_clip: f64,
    pub schedule: LrSchedule,
    pub level_constrained: bool,
    pub augment: bool,
    pub rotation: RotationConfig,
    pub deform: DeformConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    fn base(stage: Stage, learning_rate: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            stage,
            learning_rate,
            batch_size,
            epochs,
            max_steps: None,
            weight_decay: 1e-4,
            seed: 0,
            top_k: 10,
            within_every: if stage == Stage::Cross { 4 } else { 0 },
            grad_clip: 1.0,
            schedule: LrSchedule::Cosine { final_fraction: 0.1 },
            level_constrained: true,
            augment: true,
            rotation: RotationConfig::default(),
            deform: DeformConfig::default(),
            loss: LossConfig::default(),
        }
    }

    /// Desk-scale within-scene defaults (lr 2e-4, batch 16, 30 epochs).
    pub fn within_scene() -> Self {
        Self::base(Stage::Within, 2e-4, 16, 30)
    }

    /// Desk-scale cross-scene defaults (lr 2e-4, batch 16, 20 epochs).
    pub fn cross_scene() -> Self {
        Self::base(Stage::Cross, 2e-4, 16, 20)
    }

    /// Desk-scale fine-tuning defaults (lr 3e-5, batch 8, 30 epochs).
    pub fn finetune() -> Self {
        Self::base(Stage::Finetune, 3e-5, 8, 30)
    }

    /// Full-length schedules: 100 within-scene, 60 cross-scene, 90 fine-tuning epochs.
    pub fn with_long_schedule(mut self) -> Self {
        self.epochs = match self.stage {
            Stage::Within => 100,
            Stage::Cross => 60,
            Stage::Finetune => 90,
            Stage::Init => 0,
        };
        self
    }

    /// Multi-memory training uses batch 8 and lr 1e-4.
    pub fn for_multi_memory(mut self) -> Self {
        if self.stage != Stage::Finetune {
            self.batch_size = 8;
            self.learning_rate = 1e-4;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.top_k == 0 || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Configuration("learning rate, batch size, top_k and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Sorted semantic labels; class ids are positions in this list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary(pub Vec<String>);

impl Vocabulary {
    pub fn from_scenes(scenes: &[LabeledScene]) -> Self {
        let mut labels: Vec<String> = scenes.iter().flat_map(|s| s.levels.iter().flat_map(|l| l.parts.iter().map(|p| p.semantic.clone()))).collect();
        labels.sort();
        labels.dedup();
        Self(labels)
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.0
            .binary_search_by(|l| l.as_str().cmp(label))
            .map_err(|_| Error::InvalidInput(format!("semantic label {label:?} is not in the vocabulary")))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the dataset manifest the weights were trained against.
    #[serde(default)]
    pub data_hash: Option<String>,
    pub encoder_fingerprint: String,
    pub frozen_fingerprint: Option<String>,
    pub vocabulary: Vocabulary,
    pub episode: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    /// Frozen retriever encoder weights (full layout; only encoder entries are stored).
    pub frozen: Option<ParamSet>,
}

/// Hex SHA-256 of a value's JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("serializable");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    /// Freshly initialized model.
    pub fn init(model: &ModelConfig) -> Result<(Model, Self)> {
        let (m, params) = Model::new(model)?;
        let meta = CheckpointMeta {
            model: model.clone(),
            train: None,
            stage: Stage::Init,
            seed: model.seed,
            config_hash: json_hash(model),
            data_hash: None,
            encoder_fingerprint: params.fingerprint(ENCODER_PREFIX),
            frozen_fingerprint: None,
            vocabulary: Vocabulary::default(),
            episode: None,
        };
        Ok((
            m,
            Self {
                meta,
                params,
                frozen: None,
            },
        ))
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::new(&self.meta.model)?.0)
    }

    pub fn frozen_encoder(&self) -> Result<Option<FrozenEncoder>> {
        let Some(frozen) = &self.frozen else { return Ok(None) };
        Ok(Some(FrozenEncoder::new(&self.model()?.encoder, frozen)))
    }

    fn with_params(&self, params: ParamSet, stage: Stage, train: &TrainConfig) -> Self {
        let mut meta = self.meta.clone();
        meta.stage = stage;
        meta.train = Some(train.clone());
        meta.seed = train.seed;
        meta.encoder_fingerprint = params.fingerprint(ENCODER_PREFIX);
        meta.config_hash = json_hash(&(&meta.model, train));
        Self {
            meta,
            params,
            frozen: self.frozen.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format {
            context: "checkpoint metadata".into(),
            message: e.to_string(),
        })?;
        let mut blobs: Vec<(String, &Mat)> = self.params.iter().map(|(_, n, m)| (n.to_string(), m)).collect();
        if let Some(f) = &self.frozen {
            blobs.extend(f.iter().filter(|(_, n, _)| n.starts_with(ENCODER_PREFIX)).map(|(_, n, m)| (format!("{FROZEN_PREFIX}{n}"), m)));
        }
        let mut w = Writer::new(Vec::new());
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.string(&meta)?;
        w.len(blobs.len())?;
        for (name, m) in blobs {
            w.string(&name)?;
            w.len(m.nrows())?;
            w.len(m.ncols())?;
            w.f64s(m.as_standard_layout().as_slice().expect("contiguous"))?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader::new(data, context);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let meta_text = r.string()?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text).map_err(|e| r.error(format!("metadata: {e}")))?;
        let (_, mut params) = Model::new(&meta.model)?;
        // non-encoder entries of the frozen set keep their initial values
        let initial = params.clone();
        let mut frozen: Option<ParamSet> = None;
        let mut seen = vec![false; params.len()];
        let n = r.len()?;
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.len()?;
            let cols = r.len()?;
            let values = r.f64s()?;
            if values.len() != rows * cols {
                return Err(r.error(format!("blob {name}: {} values for shape {rows}×{cols}", values.len())));
            }
            let value = Mat::from_shape_vec((rows, cols), values).expect("checked shape");
            let (target, key) = match name.strip_prefix(FROZEN_PREFIX) {
                Some(rest) => (frozen.get_or_insert_with(|| initial.clone()), rest.to_string()),
                None => (&mut params, name.clone()),
            };
            let id = target.id_of(&key).ok_or_else(|| r.error(format!("unknown parameter {name}")))?;
            if target.get(id).dim() != (rows, cols) {
                return Err(r.error(format!("parameter {name} has shape {rows}×{cols}, expected {:?}", target.get(id).dim())));
            }
            *target.get_mut(id) = value;
            if !name.starts_with(FROZEN_PREFIX) {
                seen[id.index()] = true;
            }
        }
        r.expect_end()?;
        if let Some(missing) = params.ids().find(|id| !seen[id.index()]) {
            return Err(Error::Format {
                context: context.to_string(),
                message: format!("missing parameter {}", params.name(missing)),
            });
        }
        Ok(Self { meta, params, frozen })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Self::from_bytes(&data, &path.display().to_string())
    }
}

/// Deformation then rotation; point order is preserved.
pub fn augment<R: Rng>(cloud: &PointCloud, config: &TrainConfig, rng: &mut R) -> Result<PointCloud> {
    if !config.augment {
        return Ok(cloud.clone());
    }
    crate::geom::augment(cloud, &config.rotation, &config.deform, rng)
}

pub fn targets_for(scene: &LabeledScene, level: u8, vocabulary: Option<&Vocabulary>) -> Result<Targets> {
    let ann = scene
        .level(level)
        .ok_or_else(|| Error::InvalidArgument(format!("scene {} has no level {level}", scene.scene_id)))?;
    let t = Targets::from_part_ids(&ann.part_ids, ann.num_parts())?;
    match vocabulary {
        Some(v) => t.with_classes(ann.parts.iter().map(|p| v.id(&p.semantic)).collect::<Result<_>>()?),
        None => Ok(t),
    }
}

/// Uses the model's encoder weights as the retriever's frozen encoder.
///
/// A checkpoint that already carries a frozen encoder keeps it.
pub fn freeze_retriever_encoder(ckpt: &Checkpoint) -> Result<FrozenEncoder> {
    match ckpt.frozen_encoder()? {
        Some(f) => Ok(f),
        None => Ok(FrozenEncoder::new(&ckpt.model()?.encoder, &ckpt.params)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Within,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub kind: BatchKind,
    /// Mean per-sample loss summed over layers.
    pub loss: f64,
    pub grad_norm: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean loss of each epoch's steps.
    pub epoch_losses: Vec<f64>,
    pub skipped_samples: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Memories available during cross-scene sampling.
struct CrossContext<'a> {
    repo: &'a MemoryRepository,
    /// Frozen embedding per training scene.
    embeddings: Vec<Vec<f64>>,
}

enum MemoryPlan {
    None,
    SelfMemory,
    Retrieved(Vec<usize>),
}

struct SamplePlan {
    scene: usize,
    level: u8,
    memories: MemoryPlan,
    seed: u64,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

struct Trainer<'a> {
    model: &'a Model,
    scenes: &'a [LabeledScene],
    config: &'a TrainConfig,
    vocabulary: Option<&'a Vocabulary>,
    cross: Option<CrossContext<'a>>,
}

impl Trainer<'_> {
    fn plan(&self, kind: BatchKind, scene: usize, seed: u64) -> Option<SamplePlan> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &self.scenes[scene];
        let level = *s.level_numbers().choose(&mut rng).expect("validated scene has levels");
        let mode = self.model.mode();
        let memories = match (kind, mode.uses_memories(), &self.cross) {
            (_, false, _) => MemoryPlan::None,
            (BatchKind::Within, true, _) | (BatchKind::Cross, true, None) => MemoryPlan::SelfMemory,
            (BatchKind::Cross, true, Some(ctx)) => {
                let opts = RetrievalOptions {
                    exclude_scene_id: Some(s.scene_id.clone()),
                    category_constraint: None,
                    level_constraint: self.config.level_constrained.then_some(level),
                };
                match ctx.repo.retrieve_by_embedding(&ctx.embeddings[scene], self.config.top_k, &opts) {
                    Ok(pool) => {
                        let want = self.model.config.modulator.memories_per_forward.min(pool.len());
                        let mut picked = pool.iter().map(|r| r.index).choose_multiple(&mut rng, want);
                        picked.sort_by_key(|i| pool.iter().position(|r| r.index == *i));
                        MemoryPlan::Retrieved(picked)
                    }
                    Err(Error::RetrievalEmpty(msg)) => {
                        warn!("skipping {}: {msg}", s.scene_id);
                        return None;
                    }
                    Err(e) => {
                        warn!("skipping {}: {e}", s.scene_id);
                        return None;
                    }
                }
            }
        };
        Some(SamplePlan {
            scene,
            level,
            memories,
            seed: rng.gen(),
        })
    }

    fn run_sample(&self, params: &ParamSet, plan: &SamplePlan) -> Result<(Gradients, LossBreakdown)> {
        let scene = &self.scenes[plan.scene];
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let input = augment(&scene.cloud, self.config, &mut rng)?;
        let loss_cfg = self.config.loss;
        let targets = targets_for(scene, plan.level, if loss_cfg.semantic { self.vocabulary } else { None })?;
        let self_memory;
        let mems: Vec<&MemoryEntry> = match &plan.memories {
            MemoryPlan::None => Vec::new(),
            MemoryPlan::SelfMemory => {
                self_memory = MemoryEntry::from_scene(scene, plan.level)?;
                vec![&self_memory]
            }
            MemoryPlan::Retrieved(idx) => {
                let repo = self.cross.as_ref().expect("retrieval needs a repository").repo;
                idx.iter().map(|&i| repo.entry(i)).collect()
            }
        };
        let supervision = match plan.memories {
            MemoryPlan::SelfMemory if self.model.mode() == Mode::Analogical => Supervision::Identity,
            _ => Supervision::Hungarian,
        };
        let mut g = Graph::new();
        let fg = self.model.forward(
            &mut g,
            params,
            &ForwardInput {
                cloud: &input,
                memories: &mems,
                level: plan.level,
            },
        )?;
        let out = total_loss(&mut g, &fg, &targets, &supervision, &loss_cfg)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss on scene {}", scene.scene_id)));
        }
        Ok((g.backward(out.loss, params), out.breakdown))
    }

    fn batch_kind(&self, batch_index: usize) -> BatchKind {
        match &self.cross {
            Some(_) if self.config.within_every > 0 && (batch_index + 1) % self.config.within_every == 0 => BatchKind::Within,
            Some(_) => BatchKind::Cross,
            None => BatchKind::Within,
        }
    }

    fn run(&self, params: &mut ParamSet, observer: &mut dyn FnMut(&StepLog)) -> Result<TrainReport> {
        self.config.validate()?;
        if self.scenes.is_empty() {
            return Err(Error::InvalidInput("training needs at least one scene".into()));
        }
        let mut opt = AdamW::new(params, self.config.learning_rate, self.config.weight_decay);
        let mut report = TrainReport::default();
        let mut batch_index = 0;
        let per_epoch = self.scenes.len().div_ceil(self.config.batch_size);
        let planned = per_epoch.saturating_mul(self.config.epochs).min(self.config.max_steps.unwrap_or(usize::MAX));
        'epochs: for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..self.scenes.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch as u64)));
            let mut epoch_loss = Vec::new();
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps.is_some_and(|m| report.steps.len() >= m) {
                    break 'epochs;
                }
                let kind = self.batch_kind(batch_index);
                let batch_seed = mix_seed(self.config.seed ^ 0x5eed, batch_index as u64);
                batch_index += 1;
                let plans: Vec<SamplePlan> = chunk
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &s)| self.plan(kind, s, mix_seed(batch_seed, i as u64)))
                    .collect();
                report.skipped_samples += chunk.len() - plans.len();
                if plans.is_empty() {
                    continue;
                }
                let snapshot: &ParamSet = params;
                let results: Vec<Result<(Gradients, LossBreakdown)>> = plans.par_iter().map(|p| self.run_sample(snapshot, p)).collect();
                let mut grads = Gradients::zeros_like(params);
                let mut loss = 0.0;
                for r in results {
                    let (g, b) = r?;
                    grads.add_assign(&g);
                    loss += b.total;
                }
                let n = plans.len() as f64;
                grads.scale(1.0 / n);
                loss /= n;
                if !grads.is_finite() {
                    return Err(Error::Divergence(format!("non-finite gradient at step {}", report.steps.len())));
                }
                let grad_norm = grads.clip_global_norm(self.config.grad_clip);
                opt.lr = self.config.learning_rate * self.config.schedule.factor(report.steps.len(), planned);
                opt.step(params, &grads);
                let log = StepLog {
                    step: report.steps.len(),
                    epoch,
                    kind,
                    loss,
                    grad_norm,
                    samples: plans.len(),
                };
                observer(&log);
                epoch_loss.push(loss);
                report.steps.push(log);
            }
            if !epoch_loss.is_empty() {
                let mean = epoch_loss.iter().sum::<f64>() / epoch_loss.len() as f64;
                info!("epoch {epoch}: mean loss {mean:.4}");
                report.epoch_losses.push(mean);
            }
        }
        Ok(report)
    }
}

fn loss_vocabulary<'a>(ckpt: &'a Checkpoint, config: &TrainConfig) -> Result<Option<&'a Vocabulary>> {
    if !config.loss.semantic {
        return Ok(None);
    }
    if ckpt.meta.vocabulary.is_empty() || ckpt.meta.model.modulator.semantic_classes != ckpt.meta.vocabulary.len() {
        return Err(Error::Configuration("semantic loss needs a model whose semantic head matches the checkpoint vocabulary".into()));
    }
    Ok(Some(&ckpt.meta.vocabulary))
}

/// Parses an augmented copy of each scene with the raw scene as its memory.
pub fn pretrain_within_scene(scenes: &[LabeledScene], ckpt: &Checkpoint, config: &TrainConfig, observer: &mut dyn FnMut(&StepLog)) -> Result<(Checkpoint, TrainReport)> {
    let model = ckpt.model()?;
    let mut params = ckpt.params.clone();
    let trainer = Trainer {
        model: &model,
        scenes,
        config,
        vocabulary: loss_vocabulary(ckpt, config)?,
        cross: None,
    };
    let report = trainer.run(&mut params, observer)?;
    Ok((ckpt.with_params(params, Stage::Within, config), report))
}

/// Hungarian-matched training with memories sampled from the top retrievals.
///
/// `repo` must be built with the checkpoint's frozen encoder; detr3d mode ignores it.
pub fn train_cross_scene(
    scenes: &[LabeledScene],
    ckpt: &Checkpoint,
    repo: Option<&MemoryRepository>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepLog),
) -> Result<(Checkpoint, TrainReport)> {
    let model = ckpt.model()?;
    let frozen = freeze_retriever_encoder(ckpt)?;
    let cross = if model.mode().uses_memories() {
        let repo = repo.ok_or_else(|| Error::InvalidArgument(format!("{} mode needs a memory repository", model.mode())))?;
        repo.check_encoder(&frozen)?;
        let embeddings = scenes
            .iter()
            .map(|s| match repo.entries().iter().find(|e| e.scene_id == s.scene_id) {
                Some(e) => Ok(e.embedding.clone()),
                None => frozen.embed(&s.cloud),
            })
            .collect::<Result<Vec<_>>>()?;
        Some(CrossContext { repo, embeddings })
    } else {
        None
    };
    let mut params = ckpt.params.clone();
    let trainer = Trainer {
        model: &model,
        scenes,
        config,
        vocabulary: loss_vocabulary(ckpt, config)?,
        cross,
    };
    // detr3d has no memories, so every batch is an ordinary supervised batch
    let report = trainer.run(&mut params, observer)?;
    let mut out = ckpt.with_params(params, Stage::Cross, config);
    if model.mode().uses_memories() {
        let (_, mut fp) = Model::new(&ckpt.meta.model)?;
        copy_encoder(&mut fp, frozen_params(ckpt));
        out.meta.frozen_fingerprint = Some(fp.fingerprint(ENCODER_PREFIX));
        out.frozen = Some(fp);
    }
    Ok((out, report))
}

fn frozen_params(ckpt: &Checkpoint) -> &ParamSet {
    ckpt.frozen.as_ref().unwrap_or(&ckpt.params)
}

fn copy_encoder(dst: &mut ParamSet, src: &ParamSet) {
    for (_, name, m) in src.iter().filter(|(_, n, _)| n.starts_with(ENCODER_PREFIX)) {
        let id = dst.id_of(name).expect("same layout");
        *dst.get_mut(id) = m.clone();
    }
}

/// Few-shot adaptation without weight updates: a fresh repository holding only the support scenes.
pub fn adapt_by_memory_expansion(frozen: &FrozenEncoder, support: &[LabeledScene]) -> Result<MemoryRepository> {
    if support.is_empty() {
        return Err(Error::InvalidInput("memory expansion needs at least one support scene".into()));
    }
    let (repo, skipped) = build_repository(support, frozen);
    if skipped > 0 {
        return Err(Error::InvalidInput(format!("{skipped} support scenes could not be encoded")));
    }
    Ok(repo)
}

/// Fine-tunes on the support set of one episode.
///
/// With K > 1 each support scene uses the other support scenes as memories;
/// with K = 1 the single scene is its own (augmented) memory.
pub fn finetune_fewshot(
    ckpt: &Checkpoint,
    support: &[LabeledScene],
    episode_id: &str,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepLog),
) -> Result<(Checkpoint, TrainReport)> {
    if support.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one support scene".into()));
    }
    let model = ckpt.model()?;
    let frozen = freeze_retriever_encoder(ckpt)?;
    let repo;
    let cross = if model.mode().uses_memories() && support.len() > 1 {
        repo = adapt_by_memory_expansion(&frozen, support)?;
        let embeddings = support.iter().map(|s| frozen.embed(&s.cloud)).collect::<Result<Vec<_>>>()?;
        Some(CrossContext { repo: &repo, embeddings })
    } else {
        None
    };
    let mut cfg = config.clone();
    cfg.within_every = 0;
    let mut params = ckpt.params.clone();
    let trainer = Trainer {
        model: &model,
        scenes: support,
        config: &cfg,
        vocabulary: loss_vocabulary(ckpt, &cfg)?,
        cross,
    };
    let report = trainer.run(&mut params, observer)?;
    let mut out = ckpt.with_params(params, Stage::Finetune, &cfg);
    out.meta.episode = Some(episode_id.to_string());
    Ok((out, report))
}
