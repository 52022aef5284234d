//! Multi-granularity part-annotated scenes: in-memory types, the procedural
//! generator, the on-disk scene format, splits and few-shot episodes.

mod format;
mod generator;
mod splits;

pub use format::{read_scene, scene_from_str, scene_to_string, write_scene, SCENE_FORMAT_VERSION};
pub use generator::{generate_scene, GeneratorConfig, BASE_CATEGORIES, CATEGORIES, NOVEL_CATEGORIES};
pub use splits::{
    build_splits, read_manifest, sample_episode, write_manifest, EpisodeSpec, Manifest, ManifestEntry, Split, SplitConfig,
};

use crate::error::{Error, Result};
use crate::geom::{centroid, Point3, PointCloud};

/// Part id marking an unannotated point.
pub const UNANNOTATED: i32 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartInfo {
    pub id: usize,
    /// Category-scoped label such as `chair/leg`.
    pub semantic: String,
}

/// Part annotation of one granularity level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnnotation {
    pub level: u8,
    /// One entry per point; `-1` is unannotated.
    pub part_ids: Vec<i32>,
    pub parts: Vec<PartInfo>,
}

impl LevelAnnotation {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Point indices of every part, indexed by part id.
    pub fn part_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.parts.len()];
        for (i, &p) in self.part_ids.iter().enumerate() {
            if p >= 0 {
                members[p as usize].push(i);
            }
        }
        members
    }

    pub fn annotated_count(&self) -> usize {
        self.part_ids.iter().filter(|&&p| p >= 0).count()
    }
}

/// A labeled object point cloud with up to three nested granularity levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub scene_id: String,
    pub category: String,
    pub cloud: PointCloud,
    /// Sorted by level, coarse to fine.
    pub levels: Vec<LevelAnnotation>,
}

impl LabeledScene {
    pub fn level(&self, level: u8) -> Option<&LevelAnnotation> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn level_numbers(&self) -> Vec<u8> {
        self.levels.iter().map(|l| l.level).collect()
    }

    /// Centroid of every part of a level, indexed by part id.
    pub fn part_centroids(&self, level: u8) -> Option<Vec<Point3>> {
        let ann = self.level(level)?;
        Some(
            ann.part_members()
                .iter()
                .map(|m| centroid(&m.iter().map(|&i| self.cloud.points()[i]).collect::<Vec<_>>()))
                .collect(),
        )
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.cloud.len();
        if self.levels.is_empty() {
            return Err(Error::Validation(format!("scene {} has no annotation levels", self.scene_id)));
        }
        let mut prev: Option<&LevelAnnotation> = None;
        for ann in &self.levels {
            if !(1..=3).contains(&ann.level) {
                return Err(Error::Validation(format!("level {} outside 1..=3", ann.level)));
            }
            if let Some(p) = prev {
                if ann.level <= p.level {
                    return Err(Error::Validation("levels must be strictly increasing".into()));
                }
            }
            if ann.part_ids.len() != n {
                return Err(Error::Validation(format!(
                    "level {} has {} part ids for {} points",
                    ann.level,
                    ann.part_ids.len(),
                    n
                )));
            }
            if ann.parts.is_empty() {
                return Err(Error::Validation(format!("level {} has no parts", ann.level)));
            }
            for (i, p) in ann.parts.iter().enumerate() {
                if p.id != i {
                    return Err(Error::Validation(format!(
                        "level {} part ids are not contiguous from 0 (found {} at position {i})",
                        ann.level, p.id
                    )));
                }
            }
            let np = ann.parts.len() as i32;
            if let Some(bad) = ann.part_ids.iter().find(|&&p| p < UNANNOTATED || p >= np) {
                return Err(Error::Validation(format!("level {} references unknown part {bad}", ann.level)));
            }
            if let Some(empty) = ann.part_members().iter().position(|m| m.is_empty()) {
                return Err(Error::Validation(format!("level {} part {empty} has no points", ann.level)));
            }
            if let Some(p) = prev {
                check_refinement(p, ann)?;
            }
            prev = Some(ann);
        }
        Ok(())
    }
}

/// Verifies that every part of `fine` lies inside exactly one part of `coarse`.
pub fn check_refinement(coarse: &LevelAnnotation, fine: &LevelAnnotation) -> Result<()> {
    let mut parent: Vec<Option<i32>> = vec![None; fine.parts.len()];
    for (i, (&f, &c)) in fine.part_ids.iter().zip(&coarse.part_ids).enumerate() {
        if f < 0 {
            continue;
        }
        if c < 0 {
            return Err(Error::Validation(format!(
                "point {i} is annotated at level {} but not at level {}",
                fine.level, coarse.level
            )));
        }
        match parent[f as usize] {
            None => parent[f as usize] = Some(c),
            Some(pc) if pc != c => {
                return Err(Error::Validation(format!(
                    "level {} part {f} spans level {} parts {pc} and {c}",
                    fine.level, coarse.level
                )))
            }
            _ => {}
        }
    }
    Ok(())
}
