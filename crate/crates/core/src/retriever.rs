//! Memory repository over encoded labeled scenes and cosine top-k retrieval.
//!
//! Every (scene, level) pair is a separate memory. Entries are embedded by a
//! frozen copy of the encoder; the repository records that encoder's
//! fingerprint and refuses entries produced by any other.
//!
//! Binary container (little endian):
//!
//! ```text
//! "ANRP" | version u32 | fingerprint str | entry count u32 | entries...
//! entry: scene_id str | category str | level u32 | embedding f64s |
//!        points f64s (xyz flattened) | part count u32 | parts...
//! part:  part_id u32 | semantic str | centroid f64s(3) | feature f64s | mask u32s
//! ```
//! Strings and sequences carry a u32 length prefix.

use std::path::Path;

use log::warn;

use crate::binio::{Reader, Writer};
use crate::dataset::LabeledScene;
use crate::encoder::{global_embed, part_pool, Encoder, PointFeatures, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::geom::{centroid, normalize_cloud, Point3, PointCloud};
use crate::params::ParamSet;

pub const REPOSITORY_MAGIC: &[u8; 4] = b"ANRP";
pub const REPOSITORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPart {
    pub part_id: usize,
    pub semantic: String,
    pub centroid: Point3,
    /// Pooled frozen-encoder feature.
    pub feature: Vec<f64>,
    /// Full-resolution point indices.
    pub mask: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub scene_id: String,
    pub level: u8,
    pub category: String,
    pub embedding: Vec<f64>,
    pub cloud: PointCloud,
    pub parts: Vec<MemoryPart>,
}

impl MemoryEntry {
    /// Memory built straight from an annotation, without embedding or pooled features.
    pub fn from_scene(scene: &LabeledScene, level: u8) -> Result<Self> {
        let ann = scene
            .level(level)
            .ok_or_else(|| Error::InvalidArgument(format!("scene {} has no level {level}", scene.scene_id)))?;
        let parts: Vec<MemoryPart> = ann
            .parts
            .iter()
            .zip(ann.part_members())
            .map(|(info, mask)| MemoryPart {
                part_id: info.id,
                semantic: info.semantic.clone(),
                centroid: centroid(&mask.iter().map(|&i| scene.cloud.points()[i]).collect::<Vec<_>>()),
                feature: Vec::new(),
                mask,
            })
            .collect();
        if parts.is_empty() {
            return Err(Error::InvalidMemory(format!("scene {} level {level} has no parts", scene.scene_id)));
        }
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            level,
            category: scene.category.clone(),
            embedding: Vec::new(),
            cloud: scene.cloud.clone(),
            parts,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Per-point index into `parts`, or `None` for unannotated points.
    pub fn point_parts(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.cloud.len()];
        for (i, p) in self.parts.iter().enumerate() {
            for &j in &p.mask {
                out[j] = Some(i);
            }
        }
        out
    }
}

/// Encoder copy whose parameters no longer change, with the fingerprint of its weights.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    encoder: Encoder,
    params: ParamSet,
    fingerprint: String,
}

impl FrozenEncoder {
    pub fn new(encoder: &Encoder, params: &ParamSet) -> Self {
        Self {
            encoder: encoder.clone(),
            params: params.clone(),
            fingerprint: params.fingerprint(ENCODER_PREFIX),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Encodes the normalized cloud and returns its features and unit embedding.
    pub fn encode(&self, cloud: &PointCloud) -> Result<(PointFeatures, Vec<f64>)> {
        let (norm, _) = normalize_cloud(cloud)?;
        let feats = self.encoder.encode_points(&self.params, &norm)?;
        let emb = global_embed(&feats.features)?;
        Ok((feats, emb))
    }

    pub fn embed(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.encode(cloud)?.1)
    }

    fn entries_for(&self, scene: &LabeledScene, levels: &[u8]) -> Result<Vec<MemoryEntry>> {
        let (feats, emb) = self.encode(&scene.cloud)?;
        let (norm, _) = normalize_cloud(&scene.cloud)?;
        let mut out = Vec::with_capacity(levels.len());
        for &level in levels {
            let ann = scene
                .level(level)
                .ok_or_else(|| Error::InvalidArgument(format!("scene {} has no level {level}", scene.scene_id)))?;
            let members = ann.part_members();
            let mut parts = Vec::with_capacity(members.len());
            for (info, mask) in ann.parts.iter().zip(members) {
                let pts: Vec<Point3> = mask.iter().map(|&i| scene.cloud.points()[i]).collect();
                parts.push(MemoryPart {
                    part_id: info.id,
                    semantic: info.semantic.clone(),
                    centroid: centroid(&pts),
                    feature: part_pool(&feats, &norm, &mask)?,
                    mask,
                });
            }
            if parts.is_empty() {
                return Err(Error::InvalidMemory(format!("scene {} level {level} has no parts", scene.scene_id)));
            }
            out.push(MemoryEntry {
                scene_id: scene.scene_id.clone(),
                level,
                category: scene.category.clone(),
                embedding: emb.clone(),
                cloud: scene.cloud.clone(),
                parts,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRepository {
    fingerprint: String,
    entries: Vec<MemoryEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalOptions {
    pub exclude_scene_id: Option<String>,
    pub category_constraint: Option<String>,
    pub level_constraint: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved {
    /// Index into the repository's entries.
    pub index: usize,
    pub score: f64,
}

impl MemoryRepository {
    pub fn empty(frozen: &FrozenEncoder) -> Self {
        Self {
            fingerprint: frozen.fingerprint.clone(),
            entries: Vec::new(),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &MemoryEntry {
        &self.entries[index]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, scene_id: &str, level: u8) -> Option<usize> {
        self.entries.iter().position(|e| e.scene_id == scene_id && e.level == level)
    }

    pub fn check_encoder(&self, frozen: &FrozenEncoder) -> Result<()> {
        if frozen.fingerprint != self.fingerprint {
            return Err(Error::Configuration(format!(
                "repository was built with encoder {} but the frozen encoder is {}",
                short(&self.fingerprint),
                short(&frozen.fingerprint)
            )));
        }
        Ok(())
    }

    /// Adds (or replaces) the entry for `(scene, level)`.
    pub fn add_memory(&mut self, scene: &LabeledScene, level: u8, frozen: &FrozenEncoder) -> Result<()> {
        self.check_encoder(frozen)?;
        let entry = frozen.entries_for(scene, &[level])?.pop().expect("one level");
        self.upsert(entry);
        Ok(())
    }

    fn upsert(&mut self, entry: MemoryEntry) {
        match self.find(&entry.scene_id, entry.level) {
            Some(i) => self.entries[i] = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn retrieve_topk(&self, frozen: &FrozenEncoder, query: &PointCloud, k: usize, options: &RetrievalOptions) -> Result<Vec<Retrieved>> {
        self.check_encoder(frozen)?;
        let q = frozen.embed(query)?;
        self.retrieve_by_embedding(&q, k, options)
    }

    /// Top-k by cosine score; ties keep insertion order.
    pub fn retrieve_by_embedding(&self, query: &[f64], k: usize, options: &RetrievalOptions) -> Result<Vec<Retrieved>> {
        let mut scored: Vec<Retrieved> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                options.exclude_scene_id.as_deref() != Some(e.scene_id.as_str())
                    && options.category_constraint.as_ref().is_none_or(|c| *c == e.category)
                    && options.level_constraint.is_none_or(|l| l == e.level)
            })
            .map(|(index, e)| Retrieved {
                index,
                score: cosine(query, &e.embedding),
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::RetrievalEmpty(describe(options)));
        }
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(REPOSITORY_MAGIC)?;
        w.u32(REPOSITORY_VERSION)?;
        w.string(&self.fingerprint)?;
        w.len(self.entries.len())?;
        for e in &self.entries {
            w.string(&e.scene_id)?;
            w.string(&e.category)?;
            w.u32(e.level as u32)?;
            w.f64s(&e.embedding)?;
            let flat: Vec<f64> = e.cloud.points().iter().flatten().copied().collect();
            w.f64s(&flat)?;
            w.len(e.parts.len())?;
            for p in &e.parts {
                w.len(p.part_id)?;
                w.string(&p.semantic)?;
                w.f64s(&p.centroid)?;
                w.f64s(&p.feature)?;
                w.usizes(&p.mask)?;
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader::new(data, context);
        if r.take(4)? != REPOSITORY_MAGIC {
            return Err(r.error("not a memory repository (bad magic)"));
        }
        let version = r.u32()?;
        if version != REPOSITORY_VERSION {
            return Err(r.error(format!("unsupported repository version {version}")));
        }
        let fingerprint = r.string()?;
        let n = r.len()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let scene_id = r.string()?;
            let category = r.string()?;
            let level = u8::try_from(r.u32()?).map_err(|_| r.error("level out of range"))?;
            let embedding = r.f64s()?;
            let flat = r.f64s()?;
            if flat.len() % 3 != 0 {
                return Err(r.error("point array length is not a multiple of 3"));
            }
            let cloud = PointCloud::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).map_err(|e| r.error(e.to_string()))?;
            let n_parts = r.len()?;
            let mut parts = Vec::new();
            for _ in 0..n_parts {
                let part_id = r.len()?;
                let semantic = r.string()?;
                let c = r.f64s()?;
                let centroid: Point3 = c.as_slice().try_into().map_err(|_| r.error("centroid must have 3 coordinates"))?;
                let feature = r.f64s()?;
                let mask = r.usizes()?;
                if mask.iter().any(|&i| i >= cloud.len()) {
                    return Err(r.error("part mask index outside the cloud"));
                }
                parts.push(MemoryPart {
                    part_id,
                    semantic,
                    centroid,
                    feature,
                    mask,
                });
            }
            entries.push(MemoryEntry {
                scene_id,
                level,
                category,
                embedding,
                cloud,
                parts,
            });
        }
        r.expect_end()?;
        Ok(Self { fingerprint, entries })
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

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn describe(o: &RetrievalOptions) -> String {
    let mut s = String::from("no eligible memories");
    if let Some(c) = &o.category_constraint {
        s.push_str(&format!(" in category {c}"));
    }
    if let Some(l) = o.level_constraint {
        s.push_str(&format!(" at level {l}"));
    }
    if let Some(x) = &o.exclude_scene_id {
        s.push_str(&format!(" excluding {x}"));
    }
    s
}

/// Cosine of two (nearly) unit vectors, clamped to [−1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (d / (na * nb)).clamp(-1.0, 1.0)
}

/// One entry per (scene, level). Scenes that fail to encode are skipped and counted.
pub fn build_repository(scenes: &[LabeledScene], frozen: &FrozenEncoder) -> (MemoryRepository, usize) {
    use rayon::prelude::*;
    let built: Vec<Result<Vec<MemoryEntry>>> = scenes.par_iter().map(|s| frozen.entries_for(s, &s.level_numbers())).collect();
    let mut repo = MemoryRepository::empty(frozen);
    let mut skipped = 0;
    for (scene, r) in scenes.iter().zip(built) {
        match r {
            Ok(entries) => entries.into_iter().for_each(|e| repo.upsert(e)),
            Err(e) => {
                warn!("skipping scene {}: {e}", scene.scene_id);
                skipped += 1;
            }
        }
    }
    (repo, skipped)
}
