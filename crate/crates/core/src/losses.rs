//! Hungarian matching, segmentation / objectness / semantic losses and their
//! per-layer aggregation.
//!
//! Matching is a non-differentiable selection: it is computed from values and
//! then held fixed while the graph losses are differentiated.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::modulator::{ForwardGraph, LayerVars};

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, gt part)` pairs sorted by gt part.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost injection of the `G` columns (gt parts) into the `Q_n` rows (queries).
///
/// Shortest-augmenting-path Hungarian algorithm, O(G²·Q_n). Ties resolve by
/// the algorithm's fixed scan order, so results are deterministic.
pub fn hungarian_match(cost: &Mat) -> Result<MatchResult> {
    let (nq, ng) = cost.dim();
    if nq < ng {
        return Err(Error::Capacity { queries: nq, parts: ng });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matching costs must be finite".into()));
    }
    // rows of the working problem are gt parts (n ≤ m), columns are queries
    let (n, m) = (ng, nq);
    let a = |i: usize, j: usize| cost[[j - 1, i - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    let total = pairs.iter().map(|&(q, g)| cost[[q, g]]).sum();
    let mut matched = vec![false; nq];
    pairs.iter().for_each(|&(q, _)| matched[q] = true);
    Ok(MatchResult {
        pairs,
        unmatched: (0..nq).filter(|&q| !matched[q]).collect(),
        cost: total,
    })
}

/// Ground truth for one input cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Gt part index per point; `None` for unannotated points.
    pub point_parts: Vec<Option<usize>>,
    pub num_parts: usize,
    /// Semantic class id per gt part, required by the semantic loss.
    pub part_classes: Option<Vec<usize>>,
}

impl Targets {
    pub fn new(point_parts: Vec<Option<usize>>, num_parts: usize) -> Result<Self> {
        if num_parts == 0 {
            return Err(Error::InvalidInput("targets need at least one part".into()));
        }
        if point_parts.iter().flatten().any(|&p| p >= num_parts) {
            return Err(Error::InvalidInput("point part index out of range".into()));
        }
        Ok(Self {
            point_parts,
            num_parts,
            part_classes: None,
        })
    }

    pub fn from_part_ids(part_ids: &[i32], num_parts: usize) -> Result<Self> {
        Self::new(part_ids.iter().map(|&p| (p >= 0).then_some(p as usize)).collect(), num_parts)
    }

    pub fn with_classes(mut self, classes: Vec<usize>) -> Result<Self> {
        if classes.len() != self.num_parts {
            return Err(Error::InvalidInput("one semantic class per part is required".into()));
        }
        self.part_classes = Some(classes);
        Ok(self)
    }

    fn annotated(&self) -> Vec<(usize, usize)> {
        self.point_parts.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i, p))).collect()
    }
}

pub const COST_MASK_WEIGHT: f64 = 1.0;
pub const COST_CONFIDENCE_WEIGHT: f64 = 1.0;

/// `cost[q, g] = 1 − softIoU(σ(logits_q), mask_g) + (1 − confidence_q)` for the
/// listed query columns; unannotated points are ignored.
pub fn match_cost(logits: &Mat, confidences: &[f64], targets: &Targets, columns: &[usize]) -> Mat {
    let ann = targets.annotated();
    let g = targets.num_parts;
    let mut cost = Mat::zeros((columns.len(), g));
    let mut part_size = vec![0.0; g];
    for &(_, p) in &ann {
        part_size[p] += 1.0;
    }
    for (r, &q) in columns.iter().enumerate() {
        let mut inter = vec![0.0; g];
        let mut mass = 0.0;
        for &(i, p) in &ann {
            let s = sigmoid(logits[[i, q]]);
            mass += s;
            inter[p] += s;
        }
        for k in 0..g {
            let union = mass + part_size[k] - inter[k];
            let iou = if union > 0.0 { inter[k] / union } else { 0.0 };
            cost[[r, k]] = COST_MASK_WEIGHT * (1.0 - iou) + COST_CONFIDENCE_WEIGHT * (1.0 - confidences[q]);
        }
    }
    cost
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    /// Softmax cross-entropy over the matched query columns.
    CrossEntropy,
    /// Per-point binary cross-entropy on each matched column.
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub segmentation: SegLossKind,
    pub segmentation_weight: f64,
    pub objectness_weight: f64,
    pub semantic_weight: f64,
    pub semantic: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            segmentation: SegLossKind::CrossEntropy,
            segmentation_weight: 1.0,
            objectness_weight: 1.0,
            semantic_weight: 1.0,
            semantic: false,
        }
    }
}

/// How queries are paired with gt parts.
#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    /// Matching recomputed per layer.
    Hungarian,
    /// Memory query `i` decodes gt part `i`.
    Identity,
    /// Pairs supplied per layer.
    Fixed(Vec<Vec<(usize, usize)>>),
}

fn check_pairs(pairs: &[(usize, usize)], targets: &Targets, nq: usize) -> Result<()> {
    let mut seen_q = vec![false; nq];
    let mut seen_g = vec![false; targets.num_parts];
    for &(q, g) in pairs {
        if q >= nq || g >= targets.num_parts || seen_q[q] || seen_g[g] {
            return Err(Error::Internal(format!("pairs do not form an injection: ({q}, {g})")));
        }
        seen_q[q] = true;
        seen_g[g] = true;
    }
    if seen_g.iter().any(|s| !s) {
        return Err(Error::Internal("every gt part must be matched".into()));
    }
    Ok(())
}

/// Graph segmentation loss over annotated points.
pub fn segmentation_loss_graph(g: &mut Graph, logits: Var, pairs: &[(usize, usize)], targets: &Targets, kind: SegLossKind) -> Result<Var> {
    let nq = g.shape(logits).1;
    check_pairs(pairs, targets, nq)?;
    let ann = targets.annotated();
    if ann.is_empty() {
        return Err(Error::InvalidInput("no annotated points".into()));
    }
    let mut by_gt = pairs.to_vec();
    by_gt.sort_by_key(|&(_, p)| p);
    let cols: Vec<usize> = by_gt.iter().map(|&(q, _)| q).collect();
    let rows: Vec<usize> = ann.iter().map(|&(i, _)| i).collect();
    let sel = g.gather_rows(logits, Arc::new(rows));
    let sel = g.gather_cols(sel, Arc::new(cols));
    Ok(match kind {
        SegLossKind::CrossEntropy => {
            let ls = g.log_softmax(sel);
            let picks = ann.iter().enumerate().map(|(r, &(_, p))| (r, p)).collect();
            let m = g.pick_mean(ls, Arc::new(picks));
            g.scale(m, -1.0)
        }
        SegLossKind::Bce => {
            let t = Mat::from_shape_fn((ann.len(), targets.num_parts), |(r, c)| if ann[r].1 == c { 1.0 } else { 0.0 });
            g.bce_with_logits(sel, Arc::new(t))
        }
    })
}

/// Mean BCE of the confidence logits of `rows` against `1` (matched) / `0`.
pub fn objectness_loss_graph(g: &mut Graph, confidence_logits: Var, rows: &[usize], matched: &[usize]) -> Var {
    let t = Mat::from_shape_fn((rows.len(), 1), |(r, _)| if matched.contains(&rows[r]) { 1.0 } else { 0.0 });
    let z = g.gather_rows(confidence_logits, Arc::new(rows.to_vec()));
    g.bce_with_logits(z, Arc::new(t))
}

pub fn semantic_loss_graph(g: &mut Graph, class_logits: Var, pairs: &[(usize, usize)], part_classes: &[usize]) -> Result<Var> {
    let v = g.shape(class_logits).1;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("semantic loss needs matched queries".into()));
    }
    let mut picks = Vec::with_capacity(pairs.len());
    for (r, &(_, gt)) in pairs.iter().enumerate() {
        let c = *part_classes.get(gt).ok_or_else(|| Error::InvalidInput(format!("no class for part {gt}")))?;
        if c >= v {
            return Err(Error::InvalidInput(format!("class id {c} outside vocabulary of {v}")));
        }
        picks.push((r, c));
    }
    let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let sel = g.gather_rows(class_logits, Arc::new(rows));
    let ls = g.log_softmax(sel);
    let m = g.pick_mean(ls, Arc::new(picks));
    Ok(g.scale(m, -1.0))
}

/// Value-API segmentation loss.
pub fn segmentation_loss(logits: &Mat, pairs: &[(usize, usize)], targets: &Targets, kind: SegLossKind) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = segmentation_loss_graph(&mut g, l, pairs, targets, kind)?;
    Ok(g.scalar_value(v))
}

/// Value-API objectness loss on probabilities.
pub fn objectness_loss(confidences: &[f64], matched: &[usize]) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::InvalidInput("no confidences".into()));
    }
    let total: f64 = confidences
        .iter()
        .enumerate()
        .map(|(q, &c)| {
            let c = c.clamp(1e-12, 1.0 - 1e-12);
            if matched.contains(&q) {
                -c.ln()
            } else {
                -(1.0 - c).ln()
            }
        })
        .sum();
    Ok(total / confidences.len() as f64)
}

/// Value-API semantic loss; `class_logits` has one row per query.
pub fn semantic_loss(class_logits: &Mat, pairs: &[(usize, usize)], part_classes: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(class_logits.clone());
    let v = semantic_loss_graph(&mut g, l, pairs, part_classes)?;
    Ok(g.scalar_value(v))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub segmentation: f64,
    pub objectness: f64,
    pub semantic: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub segmentation: f64,
    pub objectness: f64,
    pub semantic: Option<f64>,
    pub total: f64,
    pub per_layer: Vec<LayerLoss>,
}

/// Graph loss plus its value breakdown and the pairs used per layer.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub matches: Vec<Vec<(usize, usize)>>,
}

fn layer_pairs(layer: &LayerVars, g: &Graph, fg: &ForwardGraph, targets: &Targets, supervision: &Supervision, index: usize) -> Result<Vec<(usize, usize)>> {
    match supervision {
        Supervision::Fixed(all) => all
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no fixed pairs for layer {index}"))),
        Supervision::Identity => {
            let memory: Vec<usize> = (0..fg.sources.len()).filter(|&q| fg.sources[q].is_memory() && fg.decodable[q]).collect();
            if memory.len() != targets.num_parts {
                return Err(Error::InvalidPairing(format!(
                    "memory has {} parts but the input has {}",
                    memory.len(),
                    targets.num_parts
                )));
            }
            Ok(memory.into_iter().enumerate().map(|(gt, q)| (q, gt)).collect())
        }
        Supervision::Hungarian => {
            let columns: Vec<usize> = (0..fg.sources.len()).filter(|&q| fg.decodable[q]).collect();
            let confidences: Vec<f64> = g.value(layer.confidence_logits).iter().map(|&z| sigmoid(z)).collect();
            let cost = match_cost(g.value(layer.logits), &confidences, targets, &columns);
            let m = hungarian_match(&cost)?;
            Ok(m.pairs.into_iter().map(|(r, gt)| (columns[r], gt)).collect())
        }
    }
}

/// Σ over layers of weighted segmentation + objectness (+ semantic) losses.
pub fn total_loss(g: &mut Graph, fg: &ForwardGraph, targets: &Targets, supervision: &Supervision, config: &LossConfig) -> Result<LossOutput> {
    if targets.point_parts.len() != fg.num_points {
        return Err(Error::InvalidInput(format!(
            "targets cover {} points but the prediction has {}",
            targets.point_parts.len(),
            fg.num_points
        )));
    }
    let decodable_rows: Vec<usize> = (0..fg.sources.len()).filter(|&q| fg.decodable[q]).collect();
    let mut terms = Vec::with_capacity(fg.layers.len());
    let mut breakdown = LossBreakdown::default();
    let mut matches = Vec::with_capacity(fg.layers.len());
    for (li, layer) in fg.layers.iter().enumerate() {
        let pairs = layer_pairs(layer, g, fg, targets, supervision, li)?;
        let seg = segmentation_loss_graph(g, layer.logits, &pairs, targets, config.segmentation)?;
        let matched: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let obj = objectness_loss_graph(g, layer.confidence_logits, &decodable_rows, &matched);
        let mut ll = LayerLoss {
            segmentation: g.scalar_value(seg),
            objectness: g.scalar_value(obj),
            semantic: None,
            total: 0.0,
        };
        let ws = g.scale(seg, config.segmentation_weight);
        let wo = g.scale(obj, config.objectness_weight);
        let mut layer_total = g.add(ws, wo);
        if config.semantic {
            let (Some(logits), Some(classes)) = (layer.semantic_logits, targets.part_classes.as_ref()) else {
                return Err(Error::Configuration("semantic loss needs a semantic head and class targets".into()));
            };
            let sem = semantic_loss_graph(g, logits, &pairs, classes)?;
            ll.semantic = Some(g.scalar_value(sem));
            let w = g.scale(sem, config.semantic_weight);
            layer_total = g.add(layer_total, w);
        }
        ll.total = g.scalar_value(layer_total);
        breakdown.segmentation += ll.segmentation;
        breakdown.objectness += ll.objectness;
        if let Some(s) = ll.semantic {
            *breakdown.semantic.get_or_insert(0.0) += s;
        }
        breakdown.total += ll.total;
        breakdown.per_layer.push(ll);
        terms.push(layer_total);
        matches.push(pairs);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t);
    }
    Ok(LossOutput { loss, breakdown, matches })
}

/// Within-scene supervision: identity correspondence, no matching.
pub fn within_scene_loss(g: &mut Graph, fg: &ForwardGraph, targets: &Targets, config: &LossConfig) -> Result<LossOutput> {
    total_loss(g, fg, targets, &Supervision::Identity, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulator::QuerySource;
    use itertools_free::permutations;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    mod itertools_free {
        /// All permutations of `0..n` choose `k` ordered selections.
        pub fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
            fn rec(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
                if cur.len() == k {
                    out.push(cur.clone());
                    return;
                }
                for i in 0..n {
                    if !used[i] {
                        used[i] = true;
                        cur.push(i);
                        rec(n, k, cur, used, out);
                        cur.pop();
                        used[i] = false;
                    }
                }
            }
            let mut out = Vec::new();
            rec(n, k, &mut Vec::new(), &mut vec![false; n], &mut out);
            out
        }
    }

    /// Exhaustive minimum over injections of gt parts into queries.
    fn brute_force(cost: &Mat) -> f64 {
        let (nq, ng) = cost.dim();
        permutations(nq, ng)
            .into_iter()
            .map(|sel| sel.iter().enumerate().map(|(gt, &q)| cost[[q, gt]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn hungarian_examples() {
        let diag = Mat::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let m = hungarian_match(&diag).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(m.cost, 0.0);
        let c = Mat::from_shape_vec((3, 3), vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]).unwrap();
        let m = hungarian_match(&c).unwrap();
        let mut pairs = m.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 2), (1, 1), (2, 0)]);
        assert_eq!(m.cost, 10.0);
        assert!(matches!(hungarian_match(&Mat::zeros((2, 3))), Err(Error::Capacity { queries: 2, parts: 3 })));
        let rect = Mat::from_shape_vec((3, 1), vec![0.5, 0.1, 0.7]).unwrap();
        let m = hungarian_match(&rect).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched, vec![0, 2]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let c = Mat::from_shape_fn((6, 6), |_| rng.gen_range(0..1024) as f64 / 1024.0);
            assert_eq!(hungarian_match(&c).unwrap().cost, brute_force(&c));
        }
        for _ in 0..300 {
            let g = rng.gen_range(1..=5);
            let q = rng.gen_range(g..=7);
            let c = Mat::from_shape_fn((q, g), |_| rng.gen_range(0.0..2.0));
            let m = hungarian_match(&c).unwrap();
            assert!((m.cost - brute_force(&c)).abs() < 1e-12);
            assert_eq!(m.pairs.len(), g);
            assert_eq!(m.unmatched.len(), q - g);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn matching_is_scale_consistent(vals in prop::collection::vec(0u32..1000, 25), s in 1u32..50) {
            let c = Mat::from_shape_vec((5, 5), vals.iter().map(|&v| v as f64).collect()).unwrap();
            let scaled = c.mapv(|v| v * s as f64);
            let a = hungarian_match(&c).unwrap();
            let b = hungarian_match(&scaled).unwrap();
            prop_assert_eq!(a.cost * s as f64, b.cost);
        }
    }

    fn targets4() -> Targets {
        Targets::new(vec![Some(0), Some(0), Some(1), None, Some(1)], 2).unwrap()
    }

    #[test]
    fn match_cost_cases() {
        let t = targets4();
        let big = 40.0;
        // query 0 covers part 0 exactly, query 1 covers nothing
        let logits = Mat::from_shape_fn((5, 2), |(i, q)| if q == 0 && i < 2 { big } else { -big });
        let cost = match_cost(&logits, &[1.0, 0.0], &t, &[0, 1]);
        assert!(cost[[0, 0]].abs() < 1e-12);
        assert!((cost[[1, 0]] - 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Mat::from_shape_fn((5, 3), |_| rng.gen_range(-3.0..3.0));
        let conf = [0.2, 0.9, 0.5];
        let cost = match_cost(&logits, &conf, &t, &[0, 1, 2]);
        for q in 0..3 {
            for gp in 0..2 {
                let pts = [0usize, 1, 2, 4];
                let p: Vec<f64> = pts.iter().map(|&i| sigmoid(logits[[i, q]])).collect();
                let m: Vec<f64> = pts.iter().map(|&i| if t.point_parts[i] == Some(gp) { 1.0 } else { 0.0 }).collect();
                let inter: f64 = p.iter().zip(&m).map(|(a, b)| a * b).sum();
                let union = p.iter().sum::<f64>() + m.iter().sum::<f64>() - inter;
                let expect = 1.0 - inter / union + 1.0 - conf[q];
                assert!((cost[[q, gp]] - expect).abs() < 1e-12);
                assert!((0.0..=2.0).contains(&cost[[q, gp]]));
            }
        }
    }

    #[test]
    fn segmentation_loss_cases() {
        let t = targets4();
        let pairs = [(2, 0), (0, 1)];
        let logits = Mat::from_shape_fn((5, 3), |(i, q)| {
            let correct = match t.point_parts[i] {
                Some(0) => 2,
                Some(1) => 0,
                _ => 1,
            };
            if q == correct {
                20.0
            } else {
                0.0
            }
        });
        assert!(segmentation_loss(&logits, &pairs, &t, SegLossKind::CrossEntropy).unwrap() < 1e-6);
        let flat = Mat::from_elem((5, 3), 0.3);
        let l = segmentation_loss(&flat, &pairs, &t, SegLossKind::CrossEntropy).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Mat::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
        let mut manual = 0.0;
        for (i, p) in [(0, 0), (1, 0), (2, 1), (4, 1)] {
            let cols = [2, 0];
            let lse = cols.iter().map(|&c| r[[i, c]].exp()).sum::<f64>().ln();
            manual += lse - r[[i, cols[p]]];
        }
        let got = segmentation_loss(&r, &pairs, &t, SegLossKind::CrossEntropy).unwrap();
        assert!((got - manual / 4.0).abs() < 1e-12);
        let bce = segmentation_loss(&r, &pairs, &t, SegLossKind::Bce).unwrap();
        let mut manual = 0.0;
        for (i, p) in [(0, 0), (1, 0), (2, 1), (4, 1)] {
            for (k, &c) in [2usize, 0].iter().enumerate() {
                let s = sigmoid(r[[i, c]]);
                manual -= if k == p { s.ln() } else { (1.0 - s).ln() };
            }
        }
        assert!((bce - manual / 8.0).abs() < 1e-12);
        assert!(matches!(segmentation_loss(&r, &[(2, 0)], &t, SegLossKind::CrossEntropy), Err(Error::Internal(_))));
    }

    #[test]
    fn objectness_and_semantic_cases() {
        let l = objectness_loss(&[1.0 - 1e-7, 1e-7, 1e-7], &[0]).unwrap();
        assert!(l < 1e-5);
        assert!((objectness_loss(&[0.5; 4], &[1, 2]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let conf = [0.3, 0.8, 0.6];
        let manual = -(0.3f64.ln() + 0.2f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((objectness_loss(&conf, &[0, 2]).unwrap() - manual).abs() < 1e-12);

        let classes = [1usize, 3];
        let mut one_hot = Mat::zeros((3, 4));
        one_hot[[2, 1]] = 30.0;
        one_hot[[0, 3]] = 30.0;
        assert!(semantic_loss(&one_hot, &[(2, 0), (0, 1)], &classes).unwrap() < 1e-6);
        let uniform = Mat::zeros((3, 4));
        assert!((semantic_loss(&uniform, &[(2, 0), (0, 1)], &classes).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = Mat::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0));
        let ce = |q: usize, c: usize| (0..4).map(|k| r[[q, k]].exp()).sum::<f64>().ln() - r[[q, c]];
        let manual = (ce(2, 1) + ce(0, 3)) / 2.0;
        assert!((semantic_loss(&r, &[(2, 0), (0, 1)], &classes).unwrap() - manual).abs() < 1e-12);
        assert!(matches!(semantic_loss(&r, &[(2, 0)], &[9]), Err(Error::InvalidInput(_))));
    }

    /// Hand-built forward graph with `layers` copies of the given logits.
    fn fake_forward(g: &mut Graph, logits: &Mat, conf: &Mat, memory: usize, layers: usize) -> ForwardGraph {
        let nq = logits.ncols();
        let lv: Vec<LayerVars> = (0..layers)
            .map(|_| LayerVars {
                logits: g.input(logits.clone()),
                confidence_logits: g.input(conf.clone()),
                semantic_logits: None,
            })
            .collect();
        let sources = (0..nq)
            .map(|q| {
                if q < memory {
                    QuerySource::Memory {
                        memory: 0,
                        scene_id: "m".into(),
                        level: 1,
                        part: q,
                        part_id: q,
                        semantic: format!("c/{q}"),
                    }
                } else {
                    QuerySource::Parametric { slot: q - memory }
                }
            })
            .collect();
        ForwardGraph {
            layers: lv,
            sources,
            decodable: vec![true; nq],
            num_points: logits.nrows(),
        }
    }

    #[test]
    fn within_scene_and_total_loss_recomposition() {
        let t = targets4();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Mat::from_shape_fn((5, 4), |_| rng.gen_range(-3.0..3.0));
        let conf = Mat::from_shape_fn((4, 1), |_| rng.gen_range(-2.0..2.0));
        let cfg = LossConfig::default();

        let mut g = Graph::new();
        let fg = fake_forward(&mut g, &logits, &conf, 2, 1);
        let out = within_scene_loss(&mut g, &fg, &t, &cfg).unwrap();
        let pairs = [(0, 0), (1, 1)];
        let probs: Vec<f64> = conf.iter().map(|&z| sigmoid(z)).collect();
        let expect = segmentation_loss(&logits, &pairs, &t, SegLossKind::CrossEntropy).unwrap() + objectness_loss(&probs, &[0, 1]).unwrap();
        assert!((g.scalar_value(out.loss) - expect).abs() < 1e-9);
        assert_eq!(out.matches, vec![pairs.to_vec()]);

        let mut g = Graph::new();
        let fg = fake_forward(&mut g, &logits, &conf, 3, 1);
        assert!(matches!(within_scene_loss(&mut g, &fg, &t, &cfg), Err(Error::InvalidPairing(_))));

        // perfect identity decoding
        let perfect = Mat::from_shape_fn((5, 4), |(i, q)| if t.point_parts[i] == Some(q) { 40.0 } else { -40.0 });
        let pc = Mat::from_shape_fn((4, 1), |(q, _)| if q < 2 { 40.0 } else { -40.0 });
        let mut g = Graph::new();
        let fg = fake_forward(&mut g, &perfect, &pc, 2, 1);
        let out = within_scene_loss(&mut g, &fg, &t, &cfg).unwrap();
        assert!(g.scalar_value(out.loss) < 1e-5);

        // total loss: one layer equals its composition, identical layers add up
        let mut g = Graph::new();
        let fg1 = fake_forward(&mut g, &logits, &conf, 2, 1);
        let one = total_loss(&mut g, &fg1, &t, &Supervision::Hungarian, &cfg).unwrap();
        let m = &one.matches[0];
        let matched: Vec<usize> = m.iter().map(|&(q, _)| q).collect();
        let expect = segmentation_loss(&logits, m, &t, SegLossKind::CrossEntropy).unwrap() + objectness_loss(&probs, &matched).unwrap();
        assert!((one.breakdown.total - expect).abs() < 1e-9);
        let fg3 = fake_forward(&mut g, &logits, &conf, 2, 3);
        let three = total_loss(&mut g, &fg3, &t, &Supervision::Hungarian, &cfg).unwrap();
        assert!((three.breakdown.total - 3.0 * one.breakdown.total).abs() < 1e-9);
        assert!((g.scalar_value(three.loss) - three.breakdown.total).abs() < 1e-9);
        let fg6 = fake_forward(&mut g, &logits, &conf, 2, 6);
        let six = total_loss(&mut g, &fg6, &t, &Supervision::Hungarian, &cfg).unwrap();
        assert!((six.breakdown.total - 2.0 * three.breakdown.total).abs() < 1e-9);
    }

    #[test]
    fn total_loss_gradients_wrt_logits_and_confidences() {
        let t = targets4();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Mat::from_shape_fn((5, 4), |_| rng.gen_range(-3.0..3.0));
        let conf = Mat::from_shape_fn((4, 1), |_| rng.gen_range(-2.0..2.0));
        for kind in [SegLossKind::CrossEntropy, SegLossKind::Bce] {
            let cfg = LossConfig {
                segmentation: kind,
                ..LossConfig::default()
            };
            let mut g = Graph::new();
            let fg = fake_forward(&mut g, &logits, &conf, 2, 1);
            let out = total_loss(&mut g, &fg, &t, &Supervision::Hungarian, &cfg).unwrap();
            let fixed = Supervision::Fixed(out.matches.clone());
            let eval = |l: &Mat, c: &Mat| {
                let mut g = Graph::new();
                let fg = fake_forward(&mut g, l, c, 2, 1);
                let out = total_loss(&mut g, &fg, &t, &fixed, &cfg).unwrap();
                g.scalar_value(out.loss)
            };
            for (var, is_logit) in [(fg.layers[0].logits, true), (fg.layers[0].confidence_logits, false)] {
                let an = g.grad_of(out.loss, var);
                let base = if is_logit { &logits } else { &conf };
                let mut fd = Mat::zeros(base.dim());
                for idx in 0..base.len() {
                    let shifted = |d: f64| {
                        let mut m = base.clone();
                        m.as_slice_mut().unwrap()[idx] += d;
                        if is_logit {
                            eval(&m, &conf)
                        } else {
                            eval(&logits, &m)
                        }
                    };
                    fd.as_slice_mut().unwrap()[idx] = (shifted(1e-6) - shifted(-1e-6)) / 2e-6;
                }
                let err = (&an - &fd).mapv(|x| x * x).sum().sqrt() / an.mapv(|x| x * x).sum().sqrt().max(1e-8);
                assert!(err < 1e-4, "{kind:?}: {err}");
            }
        }
    }
}
