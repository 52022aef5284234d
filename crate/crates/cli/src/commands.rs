use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anseg::dataset::{
    build_splits, generate_scene, read_manifest, read_scene, sample_episode, write_manifest, write_scene, GeneratorConfig, LabeledScene,
    Manifest, Split, SplitConfig,
};
use anseg::eval::{run_episodes, Episode, Evaluator, MemorySource, MetricReport, ReportFile};
use anseg::modulator::{ForwardInput, Mode, ModelConfig, QuerySource};
use anseg::retriever::{build_repository, MemoryEntry, RetrievalOptions};
use anseg::train::{
    freeze_retriever_encoder, json_hash, pretrain_within_scene, train_cross_scene, Checkpoint, StepLog, TrainReport, Vocabulary,
};
use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::ply::{self, Rgb};
use crate::{resolve, Command, ModelFlags, TrainFlags};

pub const MANIFEST_FILE: &str = "manifest.json";
const SCENE_DIR: &str = "scenes";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            categories,
            per_category,
            points,
            common,
        } => {
            let mut cfg = resolve(&common, None)?;
            if let Some(c) = categories {
                cfg.data.categories = c;
            }
            if let Some(n) = per_category {
                cfg.data.per_category = n;
            }
            if let Some(p) = points {
                cfg.data.points = p;
            }
            gen_data(&cfg, &out)
        }
        Command::Pretrain {
            data,
            out,
            model,
            train,
            common,
        } => {
            let mut cfg = resolve(&common, Some(&model))?;
            apply_train_flags(&mut cfg, &train, Stage::Within);
            pretrain(&cfg, &data, &out)
        }
        Command::Train {
            data,
            ckpt,
            out,
            no_within,
            model,
            train,
            common,
        } => {
            let mut cfg = resolve(&common, Some(&model))?;
            apply_train_flags(&mut cfg, &train, Stage::Cross);
            if no_within {
                cfg.train.within_co_training = false;
            }
            train_cmd(&cfg, &data, ckpt.as_deref(), &out, &model)
        }
        Command::Fewshot {
            data,
            ckpt,
            shots,
            episodes,
            adapt,
            report,
            model,
            train,
            common,
        } => {
            let mut cfg = resolve(&common, Some(&model))?;
            apply_train_flags(&mut cfg, &train, Stage::Finetune);
            if let Some(s) = shots {
                cfg.eval.shots = s;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            if let Some(a) = adapt {
                cfg.eval.adapt = a;
            }
            fewshot(&cfg, &data, &ckpt, report.as_deref(), &model)
        }
        Command::Eval {
            data,
            ckpt,
            report,
            split,
            self_memory,
            category_constrained,
            model,
            common,
        } => {
            let mut cfg = resolve(&common, Some(&model))?;
            if category_constrained {
                cfg.eval.category_constrained = true;
            }
            let split = match split.as_str() {
                "base-train" => Split::BaseTrain,
                "base-test" => Split::BaseTest,
                "novel-pool" => Split::NovelPool,
                other => bail!("unknown split {other:?} (expected base-train, base-test or novel-pool)"),
            };
            eval_cmd(&cfg, &data, &ckpt, report.as_deref(), split, self_memory, &model)
        }
        Command::Retrieve {
            ckpt,
            data,
            scene,
            topk,
            level,
            exclude_self,
            common,
        } => {
            let mut cfg = resolve(&common, None)?;
            if let Some(k) = topk {
                cfg.eval.top_k = k;
            }
            retrieve(&cfg, &ckpt, &data, &scene, level, exclude_self)
        }
        Command::Viz {
            ckpt,
            scene,
            memory,
            level,
            out,
            common,
        } => {
            let cfg = resolve(&common, None)?;
            viz(&cfg, &ckpt, &scene, memory.as_deref(), level, &out)
        }
        Command::PrintConfig { model, common } => {
            let cfg = resolve(&common, Some(&model))?;
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Within,
    Cross,
    Finetune,
}

fn apply_train_flags(cfg: &mut RunConfig, flags: &TrainFlags, stage: Stage) {
    let t = &mut cfg.train;
    if flags.long_schedule {
        t.long_schedule = true;
    }
    if flags.no_augment {
        t.augment = false;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = Some(b);
    }
    if let Some(m) = flags.max_steps {
        t.max_steps = Some(m);
    }
    let (epochs, lr) = match stage {
        Stage::Within => (&mut t.within_epochs, &mut t.learning_rate),
        Stage::Cross => (&mut t.cross_epochs, &mut t.learning_rate),
        Stage::Finetune => (&mut t.finetune_epochs, &mut t.finetune_learning_rate),
    };
    if let Some(e) = flags.epochs {
        *epochs = Some(e);
    }
    if let Some(l) = flags.lr {
        *lr = Some(l);
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let gen = GeneratorConfig {
        points: cfg.data.points,
        min_points_per_part: cfg.data.min_points_per_part,
    };
    let jobs: Vec<(&str, u64)> = cfg
        .data
        .categories
        .iter()
        .flat_map(|c| (0..cfg.data.per_category as u64).map(move |i| (c.as_str(), scene_seed(cfg.seed, i))))
        .collect();
    let scenes: Vec<LabeledScene> = jobs
        .par_iter()
        .map(|&(c, s)| generate_scene(c, s, &gen).with_context(|| format!("generating {c} seed {s}")))
        .collect::<Result<_>>()?;

    let dir = out.join(SCENE_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let expected: Vec<PathBuf> = scenes.iter().map(|s| dir.join(format!("{}.json", s.scene_id))).collect();
    // stale scenes from another run would leak into the splits
    for entry in std::fs::read_dir(&dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "json") && !expected.contains(&p) {
            bail!("{} holds scene files from a different run ({}); use an empty output directory", dir.display(), p.display());
        }
    }
    for (scene, path) in scenes.iter().zip(&expected) {
        write_scene(scene, path)?;
    }
    let split_cfg = SplitConfig {
        novel_categories: cfg.data.novel_categories.clone(),
        train_fraction: cfg.data.train_fraction,
        seed: cfg.seed,
    };
    let mut manifest = build_splits(out, &split_cfg)?;
    manifest.config_hash = Some(cfg.data_hash());
    write_manifest(&manifest, &out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} scenes ({} categories) to {}; data hash {}",
        scenes.len(),
        cfg.data.categories.len(),
        out.display(),
        cfg.data_hash()
    );
    Ok(())
}

fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(index)
}

struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest = read_manifest(&path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn split(&self, split: Split) -> Result<Vec<LabeledScene>> {
        let scenes = self.manifest.load_split(&self.root, split)?;
        ensure!(!scenes.is_empty(), "the {split:?} split of {} is empty", self.root.display());
        Ok(scenes)
    }

    fn hash(&self) -> Option<String> {
        self.manifest.config_hash.clone()
    }

    /// Rejects checkpoints trained against another dataset.
    fn check(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.meta.data_hash != self.hash() {
            bail!(
                "checkpoint was trained on data {} but {} has data hash {}",
                ckpt.meta.data_hash.as_deref().unwrap_or("<none>"),
                self.root.display(),
                self.hash().as_deref().unwrap_or("<none>")
            );
        }
        Ok(())
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_ckpt(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path).with_context(|| format!("writing checkpoint {}", path.display()))?;
    println!("wrote {} (config hash {})", path.display(), ckpt.meta.config_hash);
    Ok(())
}

/// Rejects explicit model flags that disagree with a loaded checkpoint.
fn check_flags(ckpt: &Checkpoint, flags: &ModelFlags) -> Result<()> {
    let m = &ckpt.meta.model.modulator;
    if let Some(mode) = flags.mode {
        ensure!(mode == m.mode, "--mode {mode} does not match the checkpoint's {} mode", m.mode);
    }
    if let Some(k) = flags.k {
        ensure!(k == m.memories_per_forward, "--k {k} does not match the checkpoint's {}", m.memories_per_forward);
    }
    Ok(())
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    let mut mc = cfg.model_config();
    if mc.modulator.mode == Mode::Detr3d {
        mc.modulator.semantic_classes = vocab.len();
    }
    mc
}

fn progress(label: &'static str) -> impl FnMut(&StepLog) {
    move |s: &StepLog| {
        if s.step % 50 == 0 {
            eprintln!("{label} step {} epoch {} loss {:.4} grad norm {:.3}", s.step, s.epoch, s.loss, s.grad_norm);
        }
    }
}

fn report_training(label: &str, r: &TrainReport) {
    eprintln!(
        "{label}: {} steps, loss {:.4} -> {:.4}, {} samples skipped",
        r.steps.len(),
        r.initial_loss().unwrap_or(f64::NAN),
        r.final_loss().unwrap_or(f64::NAN),
        r.skipped_samples
    );
}

fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    if !cfg.model.mode.uses_memories() {
        bail!("detr3d mode has no memory queries to pre-train; run `train` directly");
    }
    let ds = Dataset::open(data)?;
    let scenes = ds.split(Split::BaseTrain)?;
    let vocab = Vocabulary::from_scenes(&scenes);
    let (_, mut ckpt) = Checkpoint::init(&model_config(cfg, &vocab))?;
    ckpt.meta.vocabulary = vocab;
    ckpt.meta.data_hash = ds.hash();
    let (ckpt, report) = pretrain_within_scene(&scenes, &ckpt, &cfg.within_config(), &mut progress("within"))?;
    report_training("within-scene pre-training", &report);
    save_ckpt(&ckpt, out)
}

fn train_cmd(cfg: &RunConfig, data: &Path, init: Option<&Path>, out: &Path, flags: &ModelFlags) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let scenes = ds.split(Split::BaseTrain)?;
    let ckpt = match init {
        Some(p) => {
            let c = load_ckpt(p)?;
            ds.check(&c)?;
            check_flags(&c, flags)?;
            c
        }
        None => {
            let vocab = Vocabulary::from_scenes(&scenes);
            let (_, mut c) = Checkpoint::init(&model_config(cfg, &vocab))?;
            c.meta.vocabulary = vocab;
            c.meta.data_hash = ds.hash();
            c
        }
    };
    let mut tc = cfg.cross_config();
    // the stored model decides the loss, not the run config
    tc.loss.semantic = ckpt.meta.model.modulator.mode == Mode::Detr3d;
    let repo = if ckpt.meta.model.modulator.mode.uses_memories() {
        let frozen = freeze_retriever_encoder(&ckpt)?;
        let (repo, skipped) = build_repository(&scenes, &frozen);
        if skipped > 0 {
            eprintln!("warning: {skipped} scenes could not be added to the memory repository");
        }
        Some(repo)
    } else {
        None
    };
    let (ckpt, report) = train_cross_scene(&scenes, &ckpt, repo.as_ref(), &tc, &mut progress("cross"))?;
    report_training("cross-scene training", &report);
    save_ckpt(&ckpt, out)
}

fn report_hash(ckpt: &Checkpoint, cfg: &RunConfig) -> String {
    json_hash(&(&ckpt.meta.config_hash, &ckpt.meta.data_hash, &cfg.eval, cfg.seed))
}

fn print_metrics(title: &str, r: &MetricReport) {
    println!("{title}: {} samples", r.samples);
    match &r.episodes {
        Some(e) => {
            println!("  episodes {}", e.count);
            println!("  ARI x100 {:.2} ± {:.2}", e.ari_x100.mean, e.ari_x100.std);
            println!("  mIoU %   {:.2} ± {:.2}", e.miou_percent.mean, e.miou_percent.std);
            println!("  mAP %    {:.2} ± {:.2}", e.map_percent.mean, e.map_percent.std);
            println!(
                "  memory-query decode ratio {:.3} ± {:.3}",
                e.memory_query_decode_ratio.mean, e.memory_query_decode_ratio.std
            );
        }
        None => {
            println!("  ARI x100 {:.2}", r.ari_x100);
            println!("  mIoU %   {:.2}", r.miou_percent);
            println!("  mAP %    {:.2}", r.map_percent);
            println!("  memory-query decode ratio {:.3}", r.memory_query_decode_ratio);
        }
    }
    for (cat, m) in &r.per_category {
        println!("  {cat}: ARI x100 {:.2}, mIoU {:.2}, mAP {:.2}", m.ari_x100, m.miou_percent, m.map_percent);
    }
}

fn write_report(path: Option<&Path>, report: &ReportFile) -> Result<()> {
    if let Some(p) = path {
        report.save(p).with_context(|| format!("writing report {}", p.display()))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn fewshot(cfg: &RunConfig, data: &Path, ckpt_path: &Path, report: Option<&Path>, flags: &ModelFlags) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let ckpt = load_ckpt(ckpt_path)?;
    ds.check(&ckpt)?;
    check_flags(&ckpt, flags)?;
    let pool: BTreeMap<String, LabeledScene> = ds.split(Split::NovelPool)?.into_iter().map(|s| (s.scene_id.clone(), s)).collect();
    let pick = |ids: &[String]| -> Vec<LabeledScene> { ids.iter().map(|id| pool[id].clone()).collect() };
    let mut episodes = Vec::new();
    for cat in ds.manifest.categories(Split::NovelPool) {
        for e in 0..cfg.eval.episodes as u64 {
            let spec = sample_episode(&ds.manifest, &cat, cfg.eval.shots, cfg.seed.wrapping_add(e))?;
            episodes.push(Episode {
                support: pick(&spec.support_ids),
                queries: pick(&spec.query_ids),
                spec,
            });
        }
    }
    let mut adaptation = cfg.adaptation();
    if let anseg::eval::Adaptation::Finetune { config } = &mut adaptation {
        config.loss.semantic = ckpt.meta.model.modulator.mode == Mode::Detr3d;
    }
    let run = run_episodes(&ckpt, &episodes, &adaptation, &cfg.eval_config())?;
    print_metrics(
        &format!("{}-shot novel episodes, adaptation {}", cfg.eval.shots, adaptation.as_str()),
        &run.report,
    );
    let file = ReportFile::new(
        &report_hash(&ckpt, cfg),
        cfg.seed,
        ckpt.meta.model.modulator.mode.as_str(),
        adaptation.as_str(),
        Some(cfg.eval.shots),
        run.report,
    );
    write_report(report, &file)
}

fn eval_cmd(cfg: &RunConfig, data: &Path, ckpt_path: &Path, report: Option<&Path>, split: Split, self_memory: bool, flags: &ModelFlags) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let ckpt = load_ckpt(ckpt_path)?;
    ds.check(&ckpt)?;
    check_flags(&ckpt, flags)?;
    let scenes = ds.split(split)?;
    let model = ckpt.model()?;
    let ec = cfg.eval_config();
    let evaluator = Evaluator {
        model: &model,
        params: &ckpt.params,
        vocabulary: Some(&ckpt.meta.vocabulary),
        config: &ec,
    };
    let frozen = freeze_retriever_encoder(&ckpt)?;
    let repo;
    let source = if !model.mode().uses_memories() {
        MemorySource::None
    } else if self_memory {
        MemorySource::SelfMemory
    } else {
        let train = ds.split(Split::BaseTrain)?;
        repo = build_repository(&train, &frozen).0;
        MemorySource::Repository { repo: &repo, frozen: &frozen }
    };
    let result = evaluator.evaluate(&scenes, source)?;
    print_metrics(&format!("{split:?} evaluation"), &result.report);
    let adaptation = if self_memory { "self_memory" } else { "none" };
    let file = ReportFile::new(&report_hash(&ckpt, cfg), cfg.seed, model.mode().as_str(), adaptation, None, result.report);
    write_report(report, &file)
}

fn retrieve(cfg: &RunConfig, ckpt_path: &Path, data: &Path, scene: &str, level: Option<u8>, exclude_self: bool) -> Result<()> {
    ensure!(cfg.eval.top_k > 0, "--topk must be positive");
    let ds = Dataset::open(data)?;
    let ckpt = load_ckpt(ckpt_path)?;
    ds.check(&ckpt)?;
    let query = if Path::new(scene).is_file() {
        read_scene(Path::new(scene))?
    } else {
        let entry = ds.manifest.find(scene).with_context(|| format!("{scene:?} is neither a scene file nor a scene id in the manifest"))?;
        read_scene(&ds.root.join(&entry.path))?
    };
    let frozen = freeze_retriever_encoder(&ckpt)?;
    let (repo, _) = build_repository(&ds.split(Split::BaseTrain)?, &frozen);
    let opts = RetrievalOptions {
        exclude_scene_id: exclude_self.then(|| query.scene_id.clone()),
        category_constraint: None,
        level_constraint: level,
    };
    let hits = repo.retrieve_topk(&frozen, &query.cloud, cfg.eval.top_k, &opts)?;
    for (rank, h) in hits.iter().enumerate() {
        let e = repo.entry(h.index);
        println!("{}\t{}\t{}\t{:.6}", rank + 1, e.scene_id, e.level, h.score);
    }
    Ok(())
}

/// Colors of a memory's points and the palette offset of each memory.
fn memory_colors(memories: &[MemoryEntry]) -> (Vec<Vec<Rgb>>, Vec<usize>) {
    let mut offsets = Vec::with_capacity(memories.len());
    let mut next = 0;
    let colors = memories
        .iter()
        .map(|m| {
            offsets.push(next);
            let c = m.point_parts().iter().map(|p| p.map_or(ply::GRAY, |i| ply::palette(next + i))).collect();
            next += m.num_parts();
            c
        })
        .collect();
    (colors, offsets)
}

fn viz(cfg: &RunConfig, ckpt_path: &Path, scene_path: &Path, memory_path: Option<&Path>, level: Option<u8>, out: &Path) -> Result<()> {
    let ckpt = load_ckpt(ckpt_path)?;
    let model = ckpt.model()?;
    let scene = read_scene(scene_path).with_context(|| format!("reading scene {}", scene_path.display()))?;
    let level = match level {
        Some(l) => l,
        None => scene.level_numbers()[0],
    };
    let ann = scene.level(level).with_context(|| format!("scene {} has no level {level}", scene.scene_id))?;
    let memories = if model.mode().uses_memories() {
        let m = match memory_path {
            Some(p) => read_scene(p).with_context(|| format!("reading memory {}", p.display()))?,
            None => scene.clone(),
        };
        vec![MemoryEntry::from_scene(&m, level)?]
    } else {
        Vec::new()
    };
    let refs: Vec<&MemoryEntry> = memories.iter().collect();
    let pred = model.predict(
        &ckpt.params,
        &ForwardInput {
            cloud: &scene.cloud,
            memories: &refs,
            level,
        },
    )?;
    let assignment = anseg::eval::assign_points(pred.final_layer(), &pred.decodable);
    let (mem_colors, offsets) = memory_colors(&memories);
    let decoded: Vec<Rgb> = assignment
        .iter()
        .map(|&q| match &pred.sources[q] {
            QuerySource::Memory { memory, part, .. } => ply::palette(offsets[*memory] + part),
            QuerySource::Parametric { .. } => ply::BLACK,
        })
        .collect();
    let truth: Vec<Rgb> = ann
        .part_ids
        .iter()
        .map(|&id| ann.parts.iter().position(|p| p.id as i32 == id).map_or(ply::GRAY, ply::palette))
        .collect();

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let comments = vec![
        format!("config_hash {}", ckpt.meta.config_hash),
        format!("scene {} level {level}", scene.scene_id),
        format!("seed {}", cfg.seed),
    ];
    let mut written = vec![out.join("input.ply"), out.join("correspondence.ply")];
    ply::write(&written[0], scene.cloud.points(), &truth, &comments)?;
    ply::write(&written[1], scene.cloud.points(), &decoded, &comments)?;
    if let (Some(m), Some(colors)) = (memories.first(), mem_colors.first()) {
        let mut c = comments.clone();
        c.push(format!("memory {}", m.scene_id));
        written.push(out.join("memory.ply"));
        ply::write(&written[2], m.cloud.points(), colors, &c)?;
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
