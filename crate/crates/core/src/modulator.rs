//! Memory-modulated set-prediction decoder.
//!
//! Queries are the pooled features of every memory part (anchored at the part
//! centroid) followed by `Q` learned parametric queries (anchored at the input
//! center). Each decoder layer runs, in order, points←queries cross-attention,
//! queries←points cross-attention, point self-attention, query self-attention
//! and a query feedforward; every sublayer is pre-normalized and residual.
//! Attention keys and queries carry 3D rotary encodings of their anchors, so
//! attention scores depend only on relative positions.
//!
//! After every layer the point features are upsampled to full resolution and
//! decoded against the queries into temperature-scaled cosine logits.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, RotaryTable, RowMix, Var};
use crate::encoder::{part_groups, EncodedPoints, Encoder, EncoderConfig, LocalConfig, StageConfig, Upsampler};
use crate::error::{Error, Result};
use crate::geom::{centroid, normalize_cloud, Point3, PointCloud};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Initializer, ParamId, ParamSet};
use crate::retriever::MemoryEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Analogical,
    Detr3d,
    ReDetr3d,
}

impl Mode {
    pub fn uses_memories(self) -> bool {
        self != Mode::Detr3d
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Analogical => "analogical",
            Mode::Detr3d => "detr3d",
            Mode::ReDetr3d => "re_detr3d",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analogical" => Ok(Mode::Analogical),
            "detr3d" => Ok(Mode::Detr3d),
            "re_detr3d" | "re-detr3d" => Ok(Mode::ReDetr3d),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected analogical, detr3d or re_detr3d)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulatorConfig {
    pub layers: usize,
    pub heads: usize,
    pub parametric_queries: usize,
    pub ffn_multiplier: usize,
    pub rotary_base: f64,
    pub temperature_init: f64,
    pub mode: Mode,
    pub memories_per_forward: usize,
    /// Size of the level-embedding table (detr3d mode).
    pub levels: usize,
    /// Semantic classifier width; 0 disables the head.
    pub semantic_classes: usize,
}

impl Default for ModulatorConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            parametric_queries: 32,
            ffn_multiplier: 2,
            rotary_base: 100.0,
            temperature_init: 10.0,
            mode: Mode::Analogical,
            memories_per_forward: 1,
            levels: 3,
            semantic_classes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub modulator: ModulatorConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            modulator: ModulatorConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest useful model: 64-point clouds, C = 12, two layers, four parametric queries.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                stages: vec![
                    StageConfig {
                        sample_fraction: 0.25,
                        radius: 0.6,
                        max_neighbors: 6,
                        widths: vec![12, 12],
                    },
                    StageConfig {
                        sample_fraction: 0.5,
                        radius: 1.0,
                        max_neighbors: 6,
                        widths: vec![12, 12],
                    },
                ],
                upsample_neighbors: 3,
                local: Some(LocalConfig {
                    radius: 0.5,
                    max_neighbors: 6,
                    width: 6,
                }),
            },
            modulator: ModulatorConfig {
                layers: 2,
                heads: 2,
                parametric_queries: 4,
                ..ModulatorConfig::default()
            },
            seed: 0,
        }
    }

    /// Reduced model for 512-point clouds: C = 64, three layers, 16 parametric queries.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                stages: vec![
                    StageConfig {
                        sample_fraction: 0.25,
                        radius: 0.25,
                        max_neighbors: 16,
                        widths: vec![32, 64],
                    },
                    StageConfig {
                        sample_fraction: 0.5,
                        radius: 0.5,
                        max_neighbors: 16,
                        widths: vec![64, 64],
                    },
                ],
                upsample_neighbors: 3,
                local: Some(LocalConfig {
                    radius: 0.15,
                    max_neighbors: 16,
                    width: 24,
                }),
            },
            modulator: ModulatorConfig {
                layers: 3,
                heads: 4,
                parametric_queries: 16,
                ..ModulatorConfig::default()
            },
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let m = &self.modulator;
        let c = self.channels();
        if m.layers == 0 || m.parametric_queries == 0 || m.heads == 0 || m.ffn_multiplier == 0 {
            return Err(Error::Configuration("layers, heads, parametric_queries and ffn_multiplier must be ≥ 1".into()));
        }
        if c % m.heads != 0 || (c / m.heads) % 2 != 0 {
            return Err(Error::Configuration(format!(
                "channel width {c} must split into {} heads of even width for rotary encoding",
                m.heads
            )));
        }
        if !(m.rotary_base > 1.0) || !m.temperature_init.is_finite() {
            return Err(Error::Configuration("rotary_base must exceed 1 and temperature_init must be finite".into()));
        }
        if m.memories_per_forward == 0 || m.levels == 0 {
            return Err(Error::Configuration("memories_per_forward and levels must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Rotation table for features of width `channels` split into `heads` heads.
///
/// Within each head, column pair `(2p, 2p+1)` encodes axis `p mod 3` at
/// frequency `base^(b / n_bands)`, `b = ⌊p / 3⌋`, `n_bands = ⌈pairs / 3⌉`.
pub fn rotary_table(positions: &[Point3], channels: usize, heads: usize, base: f64) -> Result<Arc<RotaryTable>> {
    if heads == 0 || channels % heads != 0 || (channels / heads) % 2 != 0 {
        return Err(Error::Configuration(format!(
            "rotary encoding needs {channels} channels to split into {heads} heads of even width"
        )));
    }
    let d = channels / heads;
    let per_head = d / 2;
    let n_bands = per_head.div_ceil(3).max(1);
    let mut pairs = Vec::with_capacity(heads * per_head);
    let mut axis_freq = Vec::with_capacity(heads * per_head);
    for h in 0..heads {
        for p in 0..per_head {
            pairs.push((h * d + 2 * p, h * d + 2 * p + 1));
            axis_freq.push((p % 3, base.powf((p / 3) as f64 / n_bands as f64)));
        }
    }
    let mut cos = Mat::zeros((positions.len(), pairs.len()));
    let mut sin = Mat::zeros((positions.len(), pairs.len()));
    for (m, pos) in positions.iter().enumerate() {
        for (p, &(axis, freq)) in axis_freq.iter().enumerate() {
            let angle = pos[axis] * freq;
            cos[[m, p]] = angle.cos();
            sin[[m, p]] = angle.sin();
        }
    }
    Ok(Arc::new(RotaryTable { cos, sin, pairs }))
}

/// Rotates each row of `features` by the rotary encoding of its position.
pub fn rope3d_encode(positions: &[Point3], features: &Mat, heads: usize, base: f64) -> Result<Mat> {
    if positions.len() != features.nrows() {
        return Err(Error::InvalidInput("one position per feature row is required".into()));
    }
    let table = rotary_table(positions, features.ncols(), heads, base)?;
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = g.rotary(x, table);
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    norm_q: LayerNorm,
    norm_kv: Option<LayerNorm>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(params: &mut ParamSet, init: &mut Initializer, name: &str, c: usize, cross: bool) -> Self {
        Self {
            norm_q: LayerNorm::new(params, &format!("{name}.norm_q"), c),
            norm_kv: cross.then(|| LayerNorm::new(params, &format!("{name}.norm_kv"), c)),
            q: Linear::new(params, init, &format!("{name}.q"), c, c, false),
            k: Linear::new(params, init, &format!("{name}.k"), c, c, false),
            v: Linear::new(params, init, &format!("{name}.v"), c, c, false),
            o: Linear::new(params, init, &format!("{name}.o"), c, c, false),
        }
    }

    /// `x + Attn(LN(x), LN(ctx))`; self-attention when `ctx` is `None`.
    fn forward(&self, g: &mut Graph, params: &ParamSet, heads: usize, x: Var, x_rot: &Arc<RotaryTable>, ctx: Option<(Var, &Arc<RotaryTable>)>) -> Var {
        let xn = self.norm_q.forward(g, params, x);
        let (cn, c_rot) = match (ctx, self.norm_kv) {
            (Some((c, r)), Some(norm)) => (norm.forward(g, params, c), r),
            _ => (xn, x_rot),
        };
        let q = self.q.forward(g, params, xn);
        let q = g.rotary(q, x_rot.clone());
        let k = self.k.forward(g, params, cn);
        let k = g.rotary(k, c_rot.clone());
        let v = self.v.forward(g, params, cn);
        let c = g.shape(q).1;
        let d = c / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * d, (h + 1) * d), g.slice_cols(k, h * d, (h + 1) * d), g.slice_cols(v, h * d, (h + 1) * d))
            };
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, 1.0 / (d as f64).sqrt());
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh));
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let o = self.o.forward(g, params, o);
        g.add(x, o)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    points_from_queries: Attention,
    queries_from_points: Attention,
    points_self: Attention,
    queries_self: Attention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

impl DecoderLayer {
    fn new(params: &mut ParamSet, init: &mut Initializer, name: &str, c: usize, ffn_width: usize) -> Self {
        Self {
            points_from_queries: Attention::new(params, init, &format!("{name}.cross_points"), c, true),
            queries_from_points: Attention::new(params, init, &format!("{name}.cross_queries"), c, true),
            points_self: Attention::new(params, init, &format!("{name}.self_points"), c, false),
            queries_self: Attention::new(params, init, &format!("{name}.self_queries"), c, false),
            ffn_norm: LayerNorm::new(params, &format!("{name}.ffn_norm"), c),
            ffn: Mlp::new(params, init, &format!("{name}.ffn"), c, &[ffn_width, c], false),
        }
    }

    fn forward(&self, g: &mut Graph, params: &ParamSet, heads: usize, x: Var, x_rot: &Arc<RotaryTable>, y: Var, y_rot: &Arc<RotaryTable>) -> (Var, Var) {
        let x = self.points_from_queries.forward(g, params, heads, x, x_rot, Some((y, y_rot)));
        let y = self.queries_from_points.forward(g, params, heads, y, y_rot, Some((x, x_rot)));
        let x = self.points_self.forward(g, params, heads, x, x_rot, None);
        let y = self.queries_self.forward(g, params, heads, y, y_rot, None);
        let yn = self.ffn_norm.forward(g, params, y);
        let f = self.ffn.forward(g, params, yn);
        (x, g.add(y, f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuerySource {
    Memory {
        /// Index into the memories passed to the forward pass.
        memory: usize,
        scene_id: String,
        level: u8,
        /// Index into that memory's part list.
        part: usize,
        part_id: usize,
        semantic: String,
    },
    Parametric {
        slot: usize,
    },
}

impl QuerySource {
    pub fn is_memory(&self) -> bool {
        matches!(self, QuerySource::Memory { .. })
    }

    pub fn semantic(&self) -> Option<&str> {
        match self {
            QuerySource::Memory { semantic, .. } => Some(semantic),
            QuerySource::Parametric { .. } => None,
        }
    }
}

/// Decoding slots inside a graph.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub features: Var,
    pub sources: Vec<QuerySource>,
    pub anchors: Vec<Point3>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn memory_count(&self) -> usize {
        self.sources.iter().filter(|s| s.is_memory()).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// N_p × N_q.
    pub logits: Var,
    /// N_q × 1, before the sigmoid.
    pub confidence_logits: Var,
    /// N_q × classes when the semantic head exists.
    pub semantic_logits: Option<Var>,
}

/// Graph-side result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub layers: Vec<LayerVars>,
    pub sources: Vec<QuerySource>,
    pub decodable: Vec<bool>,
    pub num_points: usize,
}

impl ForwardGraph {
    pub fn to_prediction(&self, g: &Graph) -> SegmentationPrediction {
        SegmentationPrediction {
            layers: self
                .layers
                .iter()
                .map(|l| LayerPrediction {
                    logits: g.value(l.logits).clone(),
                    confidences: g.value(l.confidence_logits).iter().map(|&z| crate::autograd::sigmoid(z)).collect(),
                    semantic_logits: l.semantic_logits.map(|s| g.value(s).clone()),
                })
                .collect(),
            sources: self.sources.clone(),
            decodable: self.decodable.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    pub logits: Mat,
    pub confidences: Vec<f64>,
    pub semantic_logits: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPrediction {
    /// One record per decoder layer.
    pub layers: Vec<LayerPrediction>,
    pub sources: Vec<QuerySource>,
    /// False for memory columns in re_detr3d mode.
    pub decodable: Vec<bool>,
}

impl SegmentationPrediction {
    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("at least one layer")
    }

    pub fn num_queries(&self) -> usize {
        self.sources.len()
    }
}

/// One forward request.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    pub cloud: &'a PointCloud,
    pub memories: &'a [&'a MemoryEntry],
    /// Target granularity; consumed by the level embedding in detr3d mode.
    pub level: u8,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub upsampler: Upsampler,
    layers: Vec<DecoderLayer>,
    parametric: ParamId,
    level_embedding: Option<ParamId>,
    pub temperature: ParamId,
    query_norm: LayerNorm,
    confidence: Linear,
    semantic: Option<Linear>,
}

pub const NORMALIZE_EPS: f64 = 1e-8;

impl Model {
    pub fn new(config: &ModelConfig) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Initializer::new(config.seed);
        let c = config.channels();
        let m = &config.modulator;
        let encoder = Encoder::new(&config.encoder, &mut params, &mut init)?;
        let upsampler = Upsampler::new(&config.encoder, &mut params, &mut init);
        let layers = (0..m.layers)
            .map(|l| DecoderLayer::new(&mut params, &mut init, &format!("decoder.{l}"), c, m.ffn_multiplier * c))
            .collect();
        let parametric = params.add("queries.parametric", init.uniform(m.parametric_queries, c, 1.0));
        let level_embedding = (m.mode == Mode::Detr3d).then(|| params.add("queries.level_embedding", init.uniform(m.levels, c, 0.5)));
        let temperature = params.add("head.temperature", Mat::from_elem((1, 1), m.temperature_init));
        let query_norm = LayerNorm::new(&mut params, "head.query_norm", c);
        let confidence = Linear::new(&mut params, &mut init, "head.confidence", c, 1, false);
        let semantic = (m.semantic_classes > 0).then(|| Linear::new(&mut params, &mut init, "head.semantic", c, m.semantic_classes, false));
        Ok((
            Self {
                config: config.clone(),
                encoder,
                upsampler,
                layers,
                parametric,
                level_embedding,
                temperature,
                query_norm,
                confidence,
                semantic,
            },
            params,
        ))
    }

    pub fn mode(&self) -> Mode {
        self.config.modulator.mode
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    pub fn has_semantic_head(&self) -> bool {
        self.semantic.is_some()
    }

    /// Memory-part queries of every memory followed by the parametric queries.
    pub fn init_queries(&self, g: &mut Graph, params: &ParamSet, memories: &[&MemoryEntry], level: u8) -> Result<QuerySet> {
        let mode = self.mode();
        if mode.uses_memories() && memories.is_empty() {
            return Err(Error::InvalidArgument(format!("{mode} mode needs at least one memory")));
        }
        if !mode.uses_memories() && !memories.is_empty() {
            return Err(Error::InvalidArgument("detr3d mode takes no memories".into()));
        }
        let mut blocks = Vec::with_capacity(memories.len() + 1);
        let mut sources = Vec::new();
        let mut anchors = Vec::new();
        for (mi, mem) in memories.iter().enumerate() {
            if mem.parts.is_empty() {
                return Err(Error::InvalidMemory(format!("memory {} level {} has no parts", mem.scene_id, mem.level)));
            }
            let (norm, _) = normalize_cloud(&mem.cloud)?;
            let enc: EncodedPoints = self.encoder.encode(g, params, norm.points())?;
            let masks: Vec<Vec<usize>> = mem.parts.iter().map(|p| p.mask.clone()).collect();
            let groups = part_groups(&enc.positions, &enc.provenance, norm.points(), &masks)?;
            blocks.push(g.mix_rows(enc.features, Arc::new(RowMix::means(&groups))));
            for (pi, part) in mem.parts.iter().enumerate() {
                anchors.push(centroid(&part.mask.iter().map(|&i| norm.points()[i]).collect::<Vec<_>>()));
                sources.push(QuerySource::Memory {
                    memory: mi,
                    scene_id: mem.scene_id.clone(),
                    level: mem.level,
                    part: pi,
                    part_id: part.part_id,
                    semantic: part.semantic.clone(),
                });
            }
        }
        let mut parametric = g.param(params, self.parametric);
        if let Some(table) = self.level_embedding {
            let levels = self.config.modulator.levels;
            if level == 0 || level as usize > levels {
                return Err(Error::InvalidArgument(format!("level {level} outside 1..={levels}")));
            }
            let t = g.param(params, table);
            let row = g.gather_rows(t, Arc::new(vec![level as usize - 1]));
            parametric = g.add_row(parametric, row);
        }
        blocks.push(parametric);
        for slot in 0..self.config.modulator.parametric_queries {
            sources.push(QuerySource::Parametric { slot });
            anchors.push([0.0; 3]);
        }
        let features = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks) };
        Ok(QuerySet { features, sources, anchors })
    }

    /// Temperature-scaled cosine logits and confidence logits for one layer.
    pub fn decode_masks(&self, g: &mut Graph, params: &ParamSet, points_full: Var, queries: Var) -> LayerVars {
        let pn = g.l2_normalize_rows(points_full, NORMALIZE_EPS);
        let qn = g.l2_normalize_rows(queries, NORMALIZE_EPS);
        let cos = g.matmul_nt(pn, qn);
        let t = g.param(params, self.temperature);
        let logits = g.scale_by(cos, t);
        let qh = self.query_norm.forward(g, params, queries);
        let confidence_logits = self.confidence.forward(g, params, qh);
        let semantic_logits = self.semantic.map(|s| s.forward(g, params, qh));
        LayerVars {
            logits,
            confidence_logits,
            semantic_logits,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, input: &ForwardInput) -> Result<ForwardGraph> {
        let m = &self.config.modulator;
        let c = self.channels();
        let (cloud, _) = normalize_cloud(input.cloud)?;
        let queries = self.init_queries(g, params, input.memories, input.level)?;
        let enc = self.encoder.encode(g, params, cloud.points())?;
        let stencil = self.upsampler.stencil(&enc.positions, &enc.provenance, cloud.points())?;
        let x_rot = rotary_table(&enc.positions, c, m.heads, m.rotary_base)?;
        let y_rot = rotary_table(&queries.anchors, c, m.heads, m.rotary_base)?;
        let local = self.upsampler.local_features(g, params, cloud.points());
        let (mut x, mut y) = (enc.features, queries.features);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            (x, y) = layer.forward(g, params, m.heads, x, &x_rot, y, &y_rot);
            let full = self.upsampler.forward(g, params, x, stencil.clone(), local);
            layers.push(self.decode_masks(g, params, full, y));
        }
        let decodable = queries.sources.iter().map(|s| !(m.mode == Mode::ReDetr3d && s.is_memory())).collect();
        Ok(ForwardGraph {
            layers,
            sources: queries.sources,
            decodable,
            num_points: cloud.len(),
        })
    }

    /// Value-only forward pass.
    pub fn predict(&self, params: &ParamSet, input: &ForwardInput) -> Result<SegmentationPrediction> {
        let mut g = Graph::new();
        let fg = self.forward(&mut g, params, input)?;
        Ok(fg.to_prediction(&g))
    }
}
