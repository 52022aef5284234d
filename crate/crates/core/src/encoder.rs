//! Hierarchical set-abstraction encoder, inverse-distance feature upsampler,
//! global embedding and part pooling.
//!
//! Each stage samples centers by farthest-point sampling, groups neighbors by
//! radius, runs a shared MLP on `(offset / radius) ⊕ carried feature` and
//! max-pools per group. Only relative offsets enter the network, so features
//! are translation invariant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, RowMix, Var};
use crate::error::{Error, Result};
use crate::geom::{centroid, dist2, fps_indices, interp_weights_points, radius_group_points, Point3, PointCloud};
use crate::nn::{Linear, Mlp};
use crate::params::{Initializer, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub sample_fraction: f64,
    pub radius: f64,
    pub max_neighbors: usize,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    /// Neighbors used by the inverse-distance upsampler.
    pub upsample_neighbors: usize,
    /// Full-resolution local geometry features concatenated into the upsampler.
    #[serde(default)]
    pub local: Option<LocalConfig>,
}

/// Per-point neighborhood encoder run at full resolution (no subsampling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub radius: f64,
    pub max_neighbors: usize,
    pub width: usize,
}

impl Default for EncoderConfig {
    /// Two stages, 2048 → 512 → 256 points, 128 output channels.
    fn default() -> Self {
        Self {
            stages: vec![
                StageConfig {
                    sample_fraction: 0.25,
                    radius: 0.2,
                    max_neighbors: 32,
                    widths: vec![64, 64, 128],
                },
                StageConfig {
                    sample_fraction: 0.5,
                    radius: 0.4,
                    max_neighbors: 32,
                    widths: vec![128, 128, 128],
                },
            ],
            upsample_neighbors: 3,
            local: Some(LocalConfig {
                radius: 0.08,
                max_neighbors: 16,
                width: 32,
            }),
        }
    }
}

impl EncoderConfig {
    pub fn channels(&self) -> usize {
        self.stages.last().and_then(|s| s.widths.last().copied()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Configuration("encoder needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.sample_fraction > 0.0 && s.sample_fraction <= 1.0) {
                return Err(Error::Configuration(format!("stage {i}: sample fraction must lie in (0, 1]")));
            }
            if !(s.radius > 0.0) || s.max_neighbors == 0 {
                return Err(Error::Configuration(format!("stage {i}: radius and max_neighbors must be positive")));
            }
            if s.widths.is_empty() || s.widths.contains(&0) {
                return Err(Error::Configuration(format!("stage {i}: widths must be nonempty and ≥ 1")));
            }
        }
        if self.upsample_neighbors == 0 {
            return Err(Error::Configuration("upsample_neighbors must be ≥ 1".into()));
        }
        if let Some(l) = &self.local {
            if !(l.radius > 0.0) || l.max_neighbors == 0 || l.width == 0 {
                return Err(Error::Configuration("local radius, max_neighbors and width must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of points left after every stage for an input of `n` points.
    pub fn stage_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.stages.len());
        let mut cur = n;
        for s in &self.stages {
            cur = ((cur as f64 * s.sample_fraction).ceil() as usize).clamp(1, cur.max(1));
            sizes.push(cur);
        }
        sizes
    }

    /// Smallest cloud for which every stage keeps at least one point per unit of its fraction.
    pub fn min_input_points(&self) -> usize {
        let prod: f64 = self.stages.iter().map(|s| s.sample_fraction).product();
        (1.0 / prod).ceil() as usize
    }
}

/// Neighborhood member lists flattened with segment offsets, plus member offsets
/// relative to their center scaled by `1 / radius`.
fn group_offsets(g: &mut Graph, positions: &[Point3], centers: &[usize], radius: f64, max_neighbors: usize) -> (Vec<usize>, Vec<usize>, Var) {
    let groups = radius_group_points(positions, centers, radius, max_neighbors);
    let mut offsets = Vec::with_capacity(groups.len() + 1);
    offsets.push(0);
    let mut flat = Vec::new();
    let mut rel = Vec::new();
    let inv_r = 1.0 / radius;
    for (c, grp) in centers.iter().zip(&groups) {
        let cp = positions[*c];
        for &j in grp {
            flat.push(j);
            let p = positions[j];
            rel.extend_from_slice(&[(p[0] - cp[0]) * inv_r, (p[1] - cp[1]) * inv_r, (p[2] - cp[2]) * inv_r]);
        }
        offsets.push(flat.len());
    }
    let rel = g.constant(Mat::from_shape_vec((flat.len(), 3), rel).expect("offset shape"));
    (flat, offsets, rel)
}

/// Subsampled point features with positions and provenance into the original cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub positions: Vec<Point3>,
    pub features: Mat,
    pub provenance: Vec<usize>,
}

/// Graph-side encoder output.
#[derive(Debug, Clone)]
pub struct EncodedPoints {
    pub positions: Vec<Point3>,
    pub provenance: Vec<usize>,
    pub features: Var,
}

impl EncodedPoints {
    pub fn to_values(&self, g: &Graph) -> PointFeatures {
        PointFeatures {
            positions: self.positions.clone(),
            features: g.value(self.features).clone(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Mlp>,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl Encoder {
    pub fn new(config: &EncoderConfig, params: &mut ParamSet, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut carried = 0;
        for (i, s) in config.stages.iter().enumerate() {
            stages.push(Mlp::new(params, init, &format!("{ENCODER_PREFIX}stage{i}"), 3 + carried, &s.widths, true));
            carried = *s.widths.last().unwrap();
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    pub fn encode(&self, g: &mut Graph, params: &ParamSet, points: &[Point3]) -> Result<EncodedPoints> {
        let min = self.config.min_input_points();
        if points.len() < min {
            return Err(Error::InvalidInput(format!(
                "cloud of {} points is too small for the encoder (needs {min})",
                points.len()
            )));
        }
        let mut positions: Vec<Point3> = points.to_vec();
        let mut provenance: Vec<usize> = (0..points.len()).collect();
        let mut feats: Option<Var> = None;
        for (stage, mlp) in self.config.stages.iter().zip(&self.stages) {
            let k = ((positions.len() as f64 * stage.sample_fraction).ceil() as usize).clamp(1, positions.len());
            let centers = fps_indices(&positions, k)?;
            let (flat, offsets, rel) = group_offsets(g, &positions, &centers, stage.radius, stage.max_neighbors);
            let input = match feats {
                Some(f) => {
                    let gathered = g.gather_rows(f, Arc::new(flat));
                    g.concat_cols(&[rel, gathered])
                }
                None => rel,
            };
            let h = mlp.forward(g, params, input);
            feats = Some(g.segment_max(h, &offsets));
            positions = centers.iter().map(|&c| positions[c]).collect();
            provenance = centers.iter().map(|&c| provenance[c]).collect();
        }
        Ok(EncodedPoints {
            positions,
            provenance,
            features: feats.expect("at least one stage"),
        })
    }

    /// Value-only encoding.
    pub fn encode_points(&self, params: &ParamSet, cloud: &PointCloud) -> Result<PointFeatures> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, params, cloud.points())?;
        Ok(enc.to_values(&g))
    }
}

/// Interpolates coarse features back to every original point, then applies a
/// residual pointwise MLP `h + W₂·relu(W₁·h + b₁) + b₂`.
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub neighbors: usize,
    pub local: Option<(LocalConfig, Mlp)>,
    pub hidden: Linear,
    pub out: Linear,
}

impl Upsampler {
    pub fn new(config: &EncoderConfig, params: &mut ParamSet, init: &mut Initializer) -> Self {
        let channels = config.channels();
        let local = config
            .local
            .clone()
            .map(|l| {
                let mlp = Mlp::new(params, init, "upsampler.local", 3, &[l.width, l.width], true);
                (l, mlp)
            });
        let extra = local.as_ref().map_or(0, |(l, _)| l.width);
        Self {
            neighbors: config.upsample_neighbors,
            hidden: Linear::new(params, init, "upsampler.hidden", channels + extra, channels, true),
            out: Linear::new(params, init, "upsampler.out", channels, channels, false),
            local,
        }
    }

    /// Max-pooled MLP over each point's neighborhood offsets, one row per full-resolution point.
    pub fn local_features(&self, g: &mut Graph, params: &ParamSet, full: &[Point3]) -> Option<Var> {
        let (cfg, mlp) = self.local.as_ref()?;
        let centers: Vec<usize> = (0..full.len()).collect();
        let (_, offsets, rel) = group_offsets(g, full, &centers, cfg.radius, cfg.max_neighbors);
        let h = mlp.forward(g, params, rel);
        Some(g.segment_max(h, &offsets))
    }

    /// Interpolation stencil from coarse positions to the full cloud.
    pub fn stencil(&self, coarse_positions: &[Point3], provenance: &[usize], full: &[Point3]) -> Result<Arc<RowMix>> {
        check_coarse(coarse_positions, provenance, full)?;
        let k = self.neighbors.min(coarse_positions.len());
        let st = interp_weights_points(full, coarse_positions, k)?;
        Ok(Arc::new(RowMix::from_rows(
            st.into_iter().map(|s| s.sources.into_iter().zip(s.weights).collect()),
        )))
    }

    /// `local` must come from [`Upsampler::local_features`] on the same full cloud.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, coarse: Var, stencil: Arc<RowMix>, local: Option<Var>) -> Var {
        let h = g.mix_rows(coarse, stencil);
        let input = match local {
            Some(l) => g.concat_cols(&[h, l]),
            None => h,
        };
        let a = self.hidden.forward(g, params, input);
        let a = g.relu(a);
        let b = self.out.forward(g, params, a);
        g.add(h, b)
    }

    /// Value-only upsampling of `coarse` onto `full_cloud`.
    pub fn upsample_features(&self, params: &ParamSet, coarse: &PointFeatures, full_cloud: &PointCloud) -> Result<Mat> {
        let stencil = self.stencil(&coarse.positions, &coarse.provenance, full_cloud.points())?;
        let mut g = Graph::new();
        let c = g.constant(coarse.features.clone());
        let local = self.local_features(&mut g, params, full_cloud.points());
        let out = self.forward(&mut g, params, c, stencil, local);
        Ok(g.value(out).clone())
    }
}

fn check_coarse(positions: &[Point3], provenance: &[usize], full: &[Point3]) -> Result<()> {
    if positions.is_empty() || positions.len() != provenance.len() {
        return Err(Error::InvalidInput("coarse features have inconsistent provenance".into()));
    }
    for (p, &i) in positions.iter().zip(provenance) {
        if i >= full.len() || full[i] != *p {
            return Err(Error::InvalidInput("coarse features were not produced from this cloud".into()));
        }
    }
    Ok(())
}

/// Mean feature, L2-normalized with a `1e-12` guard.
pub fn global_embed(features: &Mat) -> Result<Vec<f64>> {
    if features.nrows() == 0 {
        return Err(Error::InvalidInput("no point features to embed".into()));
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let n = mean.dot(&mean).sqrt();
    Ok(mean.iter().map(|v| v / (n + 1e-12)).collect())
}

/// Coarse rows pooled for each part mask.
///
/// A coarse point belongs to a part when its provenance index is in the mask;
/// parts with no such coarse point fall back to the coarse point nearest the
/// part centroid.
pub fn part_groups(feats_positions: &[Point3], provenance: &[usize], full: &[Point3], masks: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let mut owner: Vec<Option<usize>> = vec![None; full.len()];
    for (p, mask) in masks.iter().enumerate() {
        if mask.is_empty() {
            return Err(Error::InvalidInput(format!("part mask {p} is empty")));
        }
        for &i in mask {
            if i >= full.len() {
                return Err(Error::InvalidInput(format!("part mask {p} references point {i} outside the cloud")));
            }
            owner[i] = Some(p);
        }
    }
    let mut groups = vec![Vec::new(); masks.len()];
    for (j, &src) in provenance.iter().enumerate() {
        if let Some(p) = owner[src] {
            groups[p].push(j);
        }
    }
    for (p, grp) in groups.iter_mut().enumerate() {
        if grp.is_empty() {
            let c = centroid(&masks[p].iter().map(|&i| full[i]).collect::<Vec<_>>());
            let nearest = (0..feats_positions.len())
                .min_by(|&a, &b| dist2(feats_positions[a], c).total_cmp(&dist2(feats_positions[b], c)))
                .expect("nonempty coarse set");
            grp.push(nearest);
        }
    }
    Ok(groups)
}

/// Mean coarse feature of one part given as full-resolution point indices.
pub fn part_pool(feats: &PointFeatures, full_cloud: &PointCloud, mask: &[usize]) -> Result<Vec<f64>> {
    let groups = part_groups(&feats.positions, &feats.provenance, full_cloud.points(), &[mask.to_vec()])?;
    let pooled = RowMix::means(&groups).apply(&feats.features);
    Ok(pooled.row(0).to_vec())
}
