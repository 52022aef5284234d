//! Test-time point assignment, segmentation metrics, label propagation and
//! episode aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EpisodeSpec, LabeledScene};
use crate::error::{Error, Result};
use crate::geom::{DeformConfig, RotationConfig};
use crate::modulator::{ForwardInput, LayerPrediction, Model, QuerySource, SegmentationPrediction};
use crate::params::ParamSet;
use crate::retriever::{FrozenEncoder, MemoryEntry, MemoryRepository, RetrievalOptions};
use crate::train::{adapt_by_memory_expansion, finetune_fewshot, freeze_retriever_encoder, Checkpoint, TrainConfig, Vocabulary};

/// Label given to points decoded by a query without a semantic source.
pub const UNLABELED: &str = "unlabeled";

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-point argmax of `sigmoid(logit) × confidence` over decodable queries; ties go to the lower index.
pub fn assign_points(layer: &LayerPrediction, decodable: &[bool]) -> Vec<usize> {
    let eligible: Vec<usize> = (0..layer.confidences.len()).filter(|&q| decodable.get(q).copied().unwrap_or(true)).collect();
    let eligible = if eligible.is_empty() { (0..layer.confidences.len()).collect() } else { eligible };
    layer
        .logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = eligible[0];
            let mut best_score = f64::NEG_INFINITY;
            for &q in &eligible {
                let s = sigmoid(row[q]) * layer.confidences[q];
                if s > best_score {
                    best = q;
                    best_score = s;
                }
            }
            best
        })
        .collect()
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index of two partitions of the same points, in [−1, 1].
///
/// Two identical trivial partitions (single cluster or all singletons) score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("ARI needs at least two points".into()));
    }
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index = cells.values().map(|&n| pairs(n)).sum::<u64>() as f64;
    let sa = rows.values().map(|&n| pairs(n)).sum::<u64>() as f64;
    let sb = cols.values().map(|&n| pairs(n)).sum::<u64>() as f64;
    let total = pairs(a.len() as u64) as f64;
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// ARI between predicted query ids and ground-truth part ids; points with id −1 are skipped.
pub fn ari(pred: &[usize], gt: &[i32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!("label lengths differ: {} vs {}", pred.len(), gt.len())));
    }
    let (p, g): (Vec<usize>, Vec<usize>) = pred.iter().zip(gt).filter(|(_, &g)| g >= 0).map(|(&p, &g)| (p, g as usize)).unzip();
    adjusted_rand_index(&p, &g)
}

/// Semantic label each query passes to the points it decodes.
pub fn query_labels(sources: &[QuerySource], decodable: &[bool]) -> Vec<String> {
    sources
        .iter()
        .enumerate()
        .map(|(q, s)| match s.semantic() {
            Some(l) if decodable.get(q).copied().unwrap_or(true) => l.to_string(),
            _ => UNLABELED.to_string(),
        })
        .collect()
}

/// Points inherit the semantic label of the memory part whose query decoded them.
pub fn propagate_labels(assignment: &[usize], sources: &[QuerySource], decodable: &[bool]) -> Vec<String> {
    let labels = query_labels(sources, decodable);
    assignment.iter().map(|&q| labels[q].clone()).collect()
}

/// Query labels from the semantic classification head (parametric decoding in detr3d mode).
pub fn semantic_head_labels(prediction: &SegmentationPrediction, vocabulary: &Vocabulary) -> Vec<String> {
    let layer = prediction.final_layer();
    let Some(logits) = &layer.semantic_logits else {
        return query_labels(&prediction.sources, &prediction.decodable);
    };
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            vocabulary.0.get(best).cloned().unwrap_or_else(|| UNLABELED.to_string())
        })
        .collect()
}

/// Mean over ground-truth classes of point IoU, as a percentage. `None` ground truth is skipped.
pub fn miou(pred: &[&str], gt: &[Option<&str>]) -> f64 {
    let mut inter: BTreeMap<&str, usize> = BTreeMap::new();
    let mut union: BTreeMap<&str, usize> = BTreeMap::new();
    let classes: BTreeSet<&str> = gt.iter().flatten().copied().collect();
    for (&p, g) in pred.iter().zip(gt) {
        let Some(g) = *g else { continue };
        if p == g {
            *inter.entry(g).or_default() += 1;
            *union.entry(g).or_default() += 1;
        } else {
            *union.entry(g).or_default() += 1;
            if p != UNLABELED && classes.contains(p) {
                *union.entry(p).or_default() += 1;
            }
        }
    }
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes.iter().map(|c| inter.get(c).copied().unwrap_or(0) as f64 / union[c] as f64).sum();
    100.0 * sum / classes.len() as f64
}

/// A point set with a semantic label; `group` separates scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub group: usize,
    pub label: String,
    pub confidence: f64,
    /// Sorted point indices.
    pub points: Vec<usize>,
}

fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// All-point interpolated average precision from a ranked TP/FP sequence.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        rec.push(tp as f64 / positives as f64);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// Mean over ground-truth classes of average precision at the given IoU threshold, as a percentage.
///
/// Predictions are ranked by confidence and greedily matched to the best unmatched
/// ground-truth instance of the same class and group.
pub fn map_per_part(preds: &[Instance], gts: &[Instance], iou_threshold: f64) -> f64 {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in &classes {
        let class_gts: Vec<&Instance> = gts.iter().filter(|g| g.label == *class).collect();
        let mut ranked: Vec<&Instance> = preds.iter().filter(|p| p.label == *class).collect();
        ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; class_gts.len()];
        let hits: Vec<bool> = ranked
            .iter()
            .map(|p| {
                let best = class_gts
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| !used[*j] && g.group == p.group)
                    .map(|(j, g)| (j, iou(&p.points, &g.points)))
                    .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((j, v)),
                    });
                match best {
                    Some((j, v)) if v >= iou_threshold => {
                        used[j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        total += average_precision(&hits, class_gts.len());
    }
    100.0 * total / classes.len() as f64
}

/// Ground-truth parts whose majority-assigned query is a memory query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartUsage {
    pub memory: usize,
    pub total: usize,
}

pub fn part_usage(assignment: &[usize], sources: &[QuerySource], part_ids: &[i32]) -> PartUsage {
    let mut votes: BTreeMap<i32, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&q, &p) in assignment.iter().zip(part_ids) {
        if p >= 0 {
            *votes.entry(p).or_default().entry(q).or_default() += 1;
        }
    }
    let mut usage = PartUsage::default();
    for counts in votes.values() {
        // BTreeMap order makes the lowest query index win ties
        let (q, _) = counts.iter().fold((usize::MAX, 0), |(bq, bn), (&q, &n)| if n > bn { (q, n) } else { (bq, bn) });
        usage.total += 1;
        usage.memory += sources[q].is_memory() as usize;
    }
    usage
}

pub fn memory_query_decode_ratio(usage: &[PartUsage]) -> f64 {
    let total: usize = usage.iter().map(|u| u.total).sum();
    if total == 0 {
        return 0.0;
    }
    usage.iter().map(|u| u.memory).sum::<usize>() as f64 / total as f64
}

/// Fraction of annotated points decoded by the memory query of their own part id.
pub fn identity_accuracy(assignment: &[usize], sources: &[QuerySource], part_ids: &[i32]) -> f64 {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (&q, &p) in assignment.iter().zip(part_ids) {
        if p < 0 {
            continue;
        }
        n += 1;
        if let QuerySource::Memory { part_id, .. } = &sources[q] {
            hit += (*part_id as i32 == p) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryMetrics {
    pub ari_x100: f64,
    pub miou_percent: f64,
    pub map_percent: f64,
    pub memory_query_decode_ratio: f64,
    /// Evaluated (scene, level) samples.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSummary {
    pub count: usize,
    pub ari_x100: MeanStd,
    pub miou_percent: MeanStd,
    pub map_percent: MeanStd,
    pub memory_query_decode_ratio: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub ari_x100: f64,
    pub miou_percent: f64,
    pub map_percent: f64,
    pub memory_query_decode_ratio: f64,
    /// Fraction of annotated points whose propagated label is correct.
    pub label_accuracy: f64,
    pub samples: usize,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub episodes: Option<EpisodeSummary>,
}

/// Where each evaluated scene gets its memories.
#[derive(Clone, Copy)]
pub enum MemorySource<'a> {
    /// Parametric queries only.
    None,
    /// The scene's own un-augmented annotation at the evaluated level.
    SelfMemory,
    Repository { repo: &'a MemoryRepository, frozen: &'a FrozenEncoder },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub rotation: RotationConfig,
    pub deform: DeformConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Levels to evaluate; `None` evaluates every annotated level.
    pub levels: Option<Vec<u8>>,
    /// Oracle retriever: only memories of the query's category.
    pub category_constrained: bool,
    pub exclude_self: bool,
    pub level_constrained: bool,
    pub iou_threshold: f64,
    pub augmentation: Option<Augmentation>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            levels: None,
            category_constrained: false,
            exclude_self: true,
            level_constrained: true,
            iou_threshold: 0.5,
            augmentation: None,
        }
    }
}

/// Per (scene, level) outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub category: String,
    pub level: u8,
    pub ari_x100: f64,
    pub label_accuracy: f64,
    pub identity_accuracy: f64,
    pub usage: PartUsage,
    pub memory_scene_ids: Vec<String>,
    #[serde(skip)]
    pub assignment: Vec<usize>,
    #[serde(skip)]
    labels: Vec<String>,
    #[serde(skip)]
    gt_labels: Vec<Option<String>>,
    #[serde(skip)]
    instances: Vec<Instance>,
    #[serde(skip)]
    gt_instances: Vec<Instance>,
}

impl SceneEval {
    /// Propagated label of every point.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub report: MetricReport,
    pub scenes: Vec<SceneEval>,
}

pub struct Evaluator<'a> {
    pub model: &'a Model,
    pub params: &'a ParamSet,
    /// Needed for semantic-head labels in detr3d mode.
    pub vocabulary: Option<&'a Vocabulary>,
    pub config: &'a EvalConfig,
}

fn seed_for(base: u64, scene: usize, level: u8) -> u64 {
    base ^ (scene as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((level as u64) << 56)
}

impl Evaluator<'_> {
    fn memories(&self, source: MemorySource, scene: &LabeledScene, level: u8) -> Result<(Vec<MemoryEntry>, Vec<String>)> {
        match source {
            MemorySource::None => Ok((Vec::new(), Vec::new())),
            MemorySource::SelfMemory => Ok((vec![MemoryEntry::from_scene(scene, level)?], vec![scene.scene_id.clone()])),
            MemorySource::Repository { repo, frozen } => {
                let opts = RetrievalOptions {
                    exclude_scene_id: self.config.exclude_self.then(|| scene.scene_id.clone()),
                    category_constraint: self.config.category_constrained.then(|| scene.category.clone()),
                    level_constraint: self.config.level_constrained.then_some(level),
                };
                let m = self.model.config.modulator.memories_per_forward;
                let hits = repo.retrieve_topk(frozen, &scene.cloud, m, &opts)?;
                let entries: Vec<MemoryEntry> = hits.iter().map(|h| repo.entry(h.index).clone()).collect();
                let ids = entries.iter().map(|e| e.scene_id.clone()).collect();
                Ok((entries, ids))
            }
        }
    }

    fn scene(&self, source: MemorySource, index: usize, scene: &LabeledScene, level: u8) -> Result<SceneEval> {
        let ann = scene
            .level(level)
            .ok_or_else(|| Error::InvalidArgument(format!("scene {} has no level {level}", scene.scene_id)))?;
        let memories = if self.model.mode().uses_memories() { self.memories(source, scene, level)? } else { (Vec::new(), Vec::new()) };
        let refs: Vec<&MemoryEntry> = memories.0.iter().collect();
        let cloud = match &self.config.augmentation {
            Some(a) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_for(a.seed, index, level));
                crate::geom::augment(&scene.cloud, &a.rotation, &a.deform, &mut rng)?
            }
            None => scene.cloud.clone(),
        };
        let pred = self.model.predict(
            self.params,
            &ForwardInput {
                cloud: &cloud,
                memories: &refs,
                level,
            },
        )?;
        let layer = pred.final_layer();
        let assignment = assign_points(layer, &pred.decodable);
        let qlabels = match (self.vocabulary, self.model.has_semantic_head()) {
            (Some(v), true) => semantic_head_labels(&pred, v),
            _ => query_labels(&pred.sources, &pred.decodable),
        };
        let labels: Vec<String> = assignment.iter().map(|&q| qlabels[q].clone()).collect();
        let gt_labels: Vec<Option<String>> = ann.part_ids.iter().map(|&p| (p >= 0).then(|| ann.parts[p as usize].semantic.clone())).collect();
        let annotated = gt_labels.iter().filter(|g| g.is_some()).count();
        let correct = labels.iter().zip(&gt_labels).filter(|(l, g)| g.as_deref() == Some(l.as_str())).count();

        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (&q, &p)) in assignment.iter().zip(&ann.part_ids).enumerate() {
            if p >= 0 {
                members.entry(q).or_default().push(i);
            }
        }
        let instances = members
            .into_iter()
            .filter(|(q, _)| qlabels[*q] != UNLABELED)
            .map(|(q, points)| Instance {
                group: 0,
                label: qlabels[q].clone(),
                confidence: layer.confidences[q],
                points,
            })
            .collect();
        let gt_instances = ann
            .part_members()
            .into_iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(p, points)| Instance {
                group: 0,
                label: ann.parts[p].semantic.clone(),
                confidence: 1.0,
                points,
            })
            .collect();
        Ok(SceneEval {
            scene_id: scene.scene_id.clone(),
            category: scene.category.clone(),
            level,
            ari_x100: 100.0 * ari(&assignment, &ann.part_ids)?,
            label_accuracy: if annotated == 0 { 0.0 } else { correct as f64 / annotated as f64 },
            identity_accuracy: identity_accuracy(&assignment, &pred.sources, &ann.part_ids),
            usage: part_usage(&assignment, &pred.sources, &ann.part_ids),
            memory_scene_ids: memories.1,
            assignment,
            labels,
            gt_labels,
            instances,
            gt_instances,
        })
    }

    /// Evaluates every requested level of every scene.
    pub fn evaluate(&self, scenes: &[LabeledScene], source: MemorySource) -> Result<EvalResult> {
        let jobs: Vec<(usize, u8)> = scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.level_numbers()
                    .into_iter()
                    .filter(|l| self.config.levels.as_ref().is_none_or(|ls| ls.contains(l)))
                    .map(move |l| (i, l))
            })
            .collect();
        if jobs.is_empty() {
            return Err(Error::InvalidInput("nothing to evaluate".into()));
        }
        let results: Vec<SceneEval> = jobs.par_iter().map(|&(i, l)| self.scene(source, i, &scenes[i], l)).collect::<Result<_>>()?;
        let report = summarize(&results, self.config.iou_threshold);
        Ok(EvalResult { report, scenes: results })
    }
}

fn category_metrics(results: &[&SceneEval], iou_threshold: f64) -> CategoryMetrics {
    let n = results.len().max(1) as f64;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut pl: Vec<&str> = Vec::new();
    let mut gl: Vec<Option<&str>> = Vec::new();
    for (group, r) in results.iter().enumerate() {
        preds.extend(r.instances.iter().map(|i| Instance { group, ..i.clone() }));
        gts.extend(r.gt_instances.iter().map(|i| Instance { group, ..i.clone() }));
        pl.extend(r.labels.iter().map(String::as_str));
        gl.extend(r.gt_labels.iter().map(Option::as_deref));
    }
    let usage: Vec<PartUsage> = results.iter().map(|r| r.usage).collect();
    CategoryMetrics {
        ari_x100: results.iter().map(|r| r.ari_x100).sum::<f64>() / n,
        miou_percent: miou(&pl, &gl),
        map_percent: map_per_part(&preds, &gts, iou_threshold),
        memory_query_decode_ratio: memory_query_decode_ratio(&usage),
        samples: results.len(),
    }
}

/// Dataset-level report from per-scene outcomes.
pub fn summarize(results: &[SceneEval], iou_threshold: f64) -> MetricReport {
    let all: Vec<&SceneEval> = results.iter().collect();
    let overall = category_metrics(&all, iou_threshold);
    let mut by_cat: BTreeMap<String, Vec<&SceneEval>> = BTreeMap::new();
    for r in results {
        by_cat.entry(r.category.clone()).or_default().push(r);
    }
    let annotated: usize = results.iter().map(|r| r.gt_labels.iter().filter(|g| g.is_some()).count()).sum();
    let correct: usize = results.iter().map(|r| r.labels.iter().zip(&r.gt_labels).filter(|(l, g)| g.as_deref() == Some(l.as_str())).count()).sum();
    MetricReport {
        ari_x100: overall.ari_x100,
        miou_percent: overall.miou_percent,
        map_percent: overall.map_percent,
        memory_query_decode_ratio: overall.memory_query_decode_ratio,
        label_accuracy: if annotated == 0 { 0.0 } else { correct as f64 / annotated as f64 },
        samples: overall.samples,
        per_category: by_cat.into_iter().map(|(c, rs)| (c, category_metrics(&rs, iou_threshold))).collect(),
        episodes: None,
    }
}

/// Mean over episode reports with population standard deviations.
pub fn aggregate_episodes(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no episodes to aggregate".into()));
    }
    let field = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let summary = EpisodeSummary {
        count: reports.len(),
        ari_x100: field(|r| r.ari_x100),
        miou_percent: field(|r| r.miou_percent),
        map_percent: field(|r| r.map_percent),
        memory_query_decode_ratio: field(|r| r.memory_query_decode_ratio),
    };
    let mut per_category: BTreeMap<String, Vec<&CategoryMetrics>> = BTreeMap::new();
    for r in reports {
        for (c, m) in &r.per_category {
            per_category.entry(c.clone()).or_default().push(m);
        }
    }
    let per_category = per_category
        .into_iter()
        .map(|(c, ms)| {
            let mean = |f: fn(&CategoryMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64;
            let m = CategoryMetrics {
                ari_x100: mean(|m| m.ari_x100),
                miou_percent: mean(|m| m.miou_percent),
                map_percent: mean(|m| m.map_percent),
                memory_query_decode_ratio: mean(|m| m.memory_query_decode_ratio),
                samples: ms.iter().map(|m| m.samples).sum(),
            };
            (c, m)
        })
        .collect();
    Ok(MetricReport {
        ari_x100: summary.ari_x100.mean,
        miou_percent: summary.miou_percent.mean,
        map_percent: summary.map_percent.mean,
        memory_query_decode_ratio: summary.memory_query_decode_ratio.mean,
        label_accuracy: field(|r| r.label_accuracy).mean,
        samples: reports.iter().map(|r| r.samples).sum(),
        per_category,
        episodes: Some(summary),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Adaptation {
    /// Support scenes become the whole memory repository; weights are untouched.
    MemoryExpansion,
    Finetune { config: TrainConfig },
}

impl Adaptation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Adaptation::MemoryExpansion => "none",
            Adaptation::Finetune { .. } => "finetune",
        }
    }
}

pub struct Episode {
    pub spec: EpisodeSpec,
    pub support: Vec<LabeledScene>,
    pub queries: Vec<LabeledScene>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub report: MetricReport,
    pub per_episode: Vec<MetricReport>,
}

/// Adapts to each episode's support set and evaluates its query scenes.
pub fn run_episodes(ckpt: &Checkpoint, episodes: &[Episode], adaptation: &Adaptation, config: &EvalConfig) -> Result<EpisodeRun> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("at least one episode is required".into()));
    }
    let model = ckpt.model()?;
    let frozen = freeze_retriever_encoder(ckpt)?;
    let mut per_episode = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let tuned;
        let params = match adaptation {
            Adaptation::MemoryExpansion => &ckpt.params,
            Adaptation::Finetune { config: tc } => {
                tuned = finetune_fewshot(ckpt, &ep.support, &ep.spec.id(), tc, &mut |_| {})?.0;
                &tuned.params
            }
        };
        let repo = if model.mode().uses_memories() { Some(adapt_by_memory_expansion(&frozen, &ep.support)?) } else { None };
        let source = match &repo {
            Some(repo) => MemorySource::Repository { repo, frozen: &frozen },
            None => MemorySource::None,
        };
        let evaluator = Evaluator {
            model: &model,
            params,
            vocabulary: Some(&ckpt.meta.vocabulary),
            config,
        };
        per_episode.push(evaluator.evaluate(&ep.queries, source)?.report);
    }
    Ok(EpisodeRun {
        report: aggregate_episodes(&per_episode)?,
        per_episode,
    })
}

pub const REPORT_SCHEMA: &str = "anseg-report/1";

/// Serialized evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub mode: String,
    pub adaptation: String,
    pub shots: Option<usize>,
    pub metrics: MetricReport,
}

impl ReportFile {
    pub fn new(config_hash: &str, seed: u64, mode: &str, adaptation: &str, shots: Option<usize>, metrics: MetricReport) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            git_describe: git_describe().to_string(),
            mode: mode.to_string(),
            adaptation: adaptation.to_string(),
            shots,
            metrics,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            context: "report".into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// `git describe` of the source tree at build time.
pub fn git_describe() -> &'static str {
    env!("ANSEG_GIT_DESCRIBE")
}
