//! JSON scene files.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "scene_id": "chair_00003",
//!   "category": "chair",
//!   "num_points": 4,
//!   "points": [[x, y, z], ...],            // single precision, shortest roundtrip digits
//!   "levels": [
//!     {"level": 1, "part_ids": [0, 0, -1, 1, ...], "parts": [{"id": 0, "semantic": "chair/back"}, ...]}
//!   ]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledScene, LevelAnnotation, PartInfo};
use crate::error::{Error, Result};
use crate::geom::PointCloud;

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    format_version: u32,
    scene_id: String,
    category: String,
    num_points: usize,
    points: Vec<[f32; 3]>,
    levels: Vec<LevelFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelFile {
    level: u8,
    part_ids: Vec<i32>,
    parts: Vec<PartFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartFile {
    id: usize,
    semantic: String,
}

/// Byte offset of a 1-based (line, column) position.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

pub(crate) fn json_error(context: &str, text: &str, err: serde_json::Error) -> Error {
    Error::Parse {
        context: context.to_string(),
        offset: byte_offset(text, err.line(), err.column()),
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    }
}

pub fn scene_to_string(scene: &LabeledScene) -> Result<String> {
    scene.validate()?;
    let file = SceneFile {
        format_version: SCENE_FORMAT_VERSION,
        scene_id: scene.scene_id.clone(),
        category: scene.category.clone(),
        num_points: scene.cloud.len(),
        points: scene.cloud.points().iter().map(|p| p.map(|c| c as f32)).collect(),
        levels: scene
            .levels
            .iter()
            .map(|l| LevelFile {
                level: l.level,
                part_ids: l.part_ids.clone(),
                parts: l
                    .parts
                    .iter()
                    .map(|p| PartFile {
                        id: p.id,
                        semantic: p.semantic.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&file).map_err(|e| Error::Format {
        context: scene.scene_id.clone(),
        message: e.to_string(),
    })?;
    text.push('\n');
    Ok(text)
}

pub fn scene_from_str(text: &str, context: &str) -> Result<LabeledScene> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| json_error(context, text, e))?;
    if file.format_version != SCENE_FORMAT_VERSION {
        return Err(Error::Format {
            context: context.to_string(),
            message: format!("field format_version: unsupported value {}", file.format_version),
        });
    }
    if file.points.len() != file.num_points {
        return Err(Error::Format {
            context: context.to_string(),
            message: format!(
                "field points: {} points but num_points = {}",
                file.points.len(),
                file.num_points
            ),
        });
    }
    let cloud = PointCloud::new(file.points.iter().map(|p| p.map(|c| c as f64)).collect()).map_err(|e| Error::Format {
        context: context.to_string(),
        message: format!("field points: {e}"),
    })?;
    let scene = LabeledScene {
        scene_id: file.scene_id,
        category: file.category,
        cloud,
        levels: file
            .levels
            .into_iter()
            .map(|l| LevelAnnotation {
                level: l.level,
                part_ids: l.part_ids,
                parts: l
                    .parts
                    .into_iter()
                    .map(|p| PartInfo {
                        id: p.id,
                        semantic: p.semantic,
                    })
                    .collect(),
            })
            .collect(),
    };
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(scene: &LabeledScene, path: &Path) -> Result<()> {
    let text = scene_to_string(scene)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<LabeledScene> {
    let text = std::fs::read_to_string(path)?;
    scene_from_str(&text, &path.display().to_string())
}
