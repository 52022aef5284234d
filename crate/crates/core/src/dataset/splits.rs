//! Base/novel splits, the manifest file and few-shot episode sampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{json_error, read_scene};
use super::{LabeledScene, NOVEL_CATEGORIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "base-train")]
    BaseTrain,
    #[serde(rename = "base-test")]
    BaseTest,
    #[serde(rename = "novel-pool")]
    NovelPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub category: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    /// Hash of the configuration that produced the data, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn categories(&self, split: Split) -> Vec<String> {
        let mut cats: Vec<String> = self.with_split(split).map(|e| e.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }

    pub fn find(&self, scene_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.scene_id == scene_id)
    }

    /// Reads every scene of `split`; entry paths resolve against `root`.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<LabeledScene>> {
        self.with_split(split).map(|e| read_scene(&root.join(&e.path))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub novel_categories: Vec<String>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            novel_categories: NOVEL_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_scene = path.extension().is_some_and(|e| e == "json") && path.file_name().is_some_and(|n| n != "manifest.json");
        if is_scene {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Assigns every scene file under `data_dir` (or `data_dir/scenes`) to a split.
///
/// Base categories are split per category into train/test by a seeded shuffle;
/// novel categories go entirely to the novel pool.
pub fn build_splits(data_dir: &Path, config: &SplitConfig) -> Result<Manifest> {
    let scenes_dir = if data_dir.join("scenes").is_dir() {
        data_dir.join("scenes")
    } else {
        data_dir.to_path_buf()
    };
    let files = scene_files(&scenes_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no scene files in {}", scenes_dir.display())));
    }
    let mut scenes: Vec<(String, String, String)> = Vec::with_capacity(files.len());
    for f in &files {
        let s = read_scene(f)?;
        let rel = f.strip_prefix(data_dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
        scenes.push((s.scene_id, s.category, rel));
    }
    scenes.sort();

    let mut categories: Vec<String> = scenes.iter().map(|s| s.1.clone()).collect();
    categories.sort();
    categories.dedup();

    let mut entries = Vec::with_capacity(scenes.len());
    for cat in &categories {
        let mut members: Vec<&(String, String, String)> = scenes.iter().filter(|s| &s.1 == cat).collect();
        if config.novel_categories.contains(cat) {
            entries.extend(members.iter().map(|(id, c, p)| ManifestEntry {
                scene_id: id.clone(),
                path: p.clone(),
                category: c.clone(),
                split: Split::NovelPool,
            }));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ salt(cat));
        members.shuffle(&mut rng);
        let n_train = (config.train_fraction * members.len() as f64).round() as usize;
        for (i, (id, c, p)) in members.into_iter().enumerate() {
            entries.push(ManifestEntry {
                scene_id: id.clone(),
                path: p.clone(),
                category: c.clone(),
                split: if i < n_train { Split::BaseTrain } else { Split::BaseTest },
            });
        }
    }
    entries.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(Manifest {
        seed: config.seed,
        config_hash: None,
        entries,
    })
}

fn salt(s: &str) -> u64 {
    s.bytes().fold(0x84222325cbf29ce4u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| json_error(&path.display().to_string(), &text, e))
}

/// A K-shot task over one novel category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub category: String,
    pub k: usize,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
    pub episode_seed: u64,
}

impl EpisodeSpec {
    pub fn id(&self) -> String {
        format!("{}-k{}-s{}", self.category, self.k, self.episode_seed)
    }
}

pub fn sample_episode(manifest: &Manifest, category: &str, k: usize, episode_seed: u64) -> Result<EpisodeSpec> {
    if k == 0 {
        return Err(Error::InvalidArgument("episodes need at least one support scene".into()));
    }
    let mut pool: Vec<String> = manifest
        .with_split(Split::NovelPool)
        .filter(|e| e.category == category)
        .map(|e| e.scene_id.clone())
        .collect();
    if pool.len() < k + 1 {
        return Err(Error::InsufficientData(format!(
            "category {category} has {} novel scenes; {k}-shot episodes need at least {}",
            pool.len(),
            k + 1
        )));
    }
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ salt(category));
    pool.shuffle(&mut rng);
    let query_ids = pool.split_off(k);
    Ok(EpisodeSpec {
        category: category.to_string(),
        k,
        support_ids: pool,
        query_ids,
        episode_seed,
    })
}
