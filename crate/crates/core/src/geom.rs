//! Point-cloud primitives: normalization, rigid and anchor-based augmentations,
//! farthest-point sampling, radius grouping and inverse-distance interpolation.
//!
//! Every function here is a pure function of its arguments; randomness is
//! always driven by an explicit seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalized(a: Point3) -> Point3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// Mean of a set of points. Returns the origin for an empty slice.
pub fn centroid(points: &[Point3]) -> Point3 {
    if points.is_empty() {
        return [0.0; 3];
    }
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len() as f64)
}

/// An object point cloud with at least one finite point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite coordinate at point {i}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    pub fn translated(&self, t: Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| add(*p, t)).collect(),
        }
    }

    /// Subset of points by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

/// Parameters of the canonical-frame transform: `normalized = (p - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub centroid: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: Point3) -> Point3 {
        scale(sub(p, self.centroid), 1.0 / self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        add(scale(p, self.scale), self.centroid)
    }
}

/// Centers the cloud at the origin and scales it so the farthest point has unit norm.
///
/// When all points coincide the scale is forced to 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let c = cloud.centroid();
    let centered: Vec<Point3> = cloud.points.iter().map(|p| sub(*p, c)).collect();
    let max_norm = centered.iter().map(|p| norm(*p)).fold(0.0, f64::max);
    let s = if max_norm > 0.0 { max_norm } else { 1.0 };
    let points = centered.into_iter().map(|p| scale(p, 1.0 / s)).collect();
    let out = PointCloud::new(points)?;
    Ok((out, Normalization { centroid: c, scale: s }))
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rodrigues rotation about a unit axis.
pub fn axis_angle(axis: Point3, angle: f64) -> Mat3 {
    let [x, y, z] = normalized(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Proper rotation matrix (orthogonal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidRotation {
    matrix: Mat3,
}

impl RigidRotation {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn identity() -> Self {
        Self { matrix: IDENTITY3 }
    }

    pub fn new(matrix: Mat3) -> Result<Self> {
        let r = Self { matrix };
        if r.orthogonality_error() >= Self::TOLERANCE || (det3(&matrix) - 1.0).abs() >= Self::TOLERANCE {
            return Err(Error::InvalidInput("matrix is not a proper rotation".into()));
        }
        Ok(r)
    }

    pub fn about_axis(axis: Point3, angle: f64) -> Self {
        Self { matrix: axis_angle(axis, angle) }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    /// max |RᵀR − I| over all entries.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose3(&self.matrix), &self.matrix);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                err = err.max((rtr[i][j] - IDENTITY3[i][j]).abs());
            }
        }
        err
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.matrix)
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        mat_vec(&self.matrix, p)
    }
}

pub fn apply_rotation(cloud: &PointCloud, r: &RigidRotation) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| r.apply(*p)).collect(),
    }
}

/// Augmentation rotation: yaw about the gravity axis (+z) then a small tilt.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationConfig {
    /// Yaw interval in radians.
    pub yaw_range: (f64, f64),
    /// Maximum tilt away from the gravity axis, radians.
    pub max_tilt: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            yaw_range: (0.0, std::f64::consts::TAU),
            max_tilt: 10f64.to_radians(),
        }
    }
}

pub fn sample_rotation(seed: u64, config: &RotationConfig) -> RigidRotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rotation_with(&mut rng, config)
}

pub fn sample_rotation_with<R: Rng>(rng: &mut R, config: &RotationConfig) -> RigidRotation {
    let (lo, hi) = config.yaw_range;
    let yaw = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let tilt = if config.max_tilt > 0.0 {
        rng.gen_range(0.0..config.max_tilt)
    } else {
        0.0
    };
    let tilt_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let yaw_m = axis_angle([0.0, 0.0, 1.0], yaw);
    let tilt_m = axis_angle([tilt_dir.cos(), tilt_dir.sin(), 0.0], tilt);
    RigidRotation {
        matrix: mat_mul(&tilt_m, &yaw_m),
    }
}

/// Local affine transform carried by one deformation anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTransform {
    pub rotation: Mat3,
    pub scale: Point3,
    pub translation: Point3,
}

impl AnchorTransform {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            scale: [1.0; 3],
            translation: [0.0; 3],
        }
    }

    /// The linear part minus identity, `R·S − I`.
    fn linear_delta(&self) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.rotation[i][j] * self.scale[j] - IDENTITY3[i][j];
            }
        }
        m
    }

    fn displacement(&self, delta: &Mat3, anchor: Point3, p: Point3) -> Point3 {
        add(mat_vec(delta, sub(p, anchor)), self.translation)
    }
}

/// Smooth anchor-based deformation: each anchor moves nearby points with its own
/// local affine transform, blended with normalized Gaussian weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    anchors: Vec<Point3>,
    transforms: Vec<AnchorTransform>,
    bandwidth: f64,
}

impl DeformationField {
    pub fn new(anchors: Vec<Point3>, transforms: Vec<AnchorTransform>, bandwidth: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidInput("deformation needs at least one anchor".into()));
        }
        if anchors.len() != transforms.len() {
            return Err(Error::InvalidInput("one transform per anchor is required".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidInput("bandwidth must be positive".into()));
        }
        Ok(Self {
            anchors,
            transforms,
            bandwidth,
        })
    }

    pub fn anchors(&self) -> &[Point3] {
        &self.anchors
    }

    pub fn transforms(&self) -> &[AnchorTransform] {
        &self.transforms
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Normalized anchor weights for a point.
    pub fn weights(&self, p: Point3) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let d2: Vec<f64> = self.anchors.iter().map(|a| dist2(p, *a)).collect();
        // shift by the minimum so distant points never underflow to all zeros
        let dmin = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = d2.iter().map(|d| (-(d - dmin) * inv).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    pub fn displacement(&self, p: Point3) -> Point3 {
        let w = self.weights(p);
        let mut d = [0.0; 3];
        for ((a, t), wa) in self.anchors.iter().zip(&self.transforms).zip(w) {
            let delta = t.linear_delta();
            d = add(d, scale(t.displacement(&delta, *a, p), wa));
        }
        d
    }
}

pub fn deform(cloud: &PointCloud, field: &DeformationField) -> PointCloud {
    let deltas: Vec<Mat3> = field.transforms.iter().map(|t| t.linear_delta()).collect();
    let points = cloud
        .points
        .iter()
        .map(|&p| {
            let w = field.weights(p);
            let mut d = [0.0; 3];
            for (((a, t), delta), wa) in field.anchors.iter().zip(&field.transforms).zip(&deltas).zip(w) {
                d = add(d, scale(t.displacement(delta, *a, p), wa));
            }
            add(p, d)
        })
        .collect();
    PointCloud { points }
}

/// Magnitudes for randomly sampled deformation fields.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformConfig {
    pub anchors: usize,
    /// Maximum local rotation angle, radians.
    pub max_angle: f64,
    /// Per-axis scale is drawn from `[1 - s, 1 + s]`.
    pub max_scale: f64,
    /// Maximum translation norm.
    pub max_translation: f64,
    pub bandwidth: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            anchors: 4,
            max_angle: 15f64.to_radians(),
            max_scale: 0.1,
            max_translation: 0.1,
            bandwidth: 0.5,
        }
    }
}

impl DeformConfig {
    /// Upper bound on the per-point displacement for a cloud whose points all lie
    /// within `diameter` of every anchor.
    ///
    /// `‖(R·S − I)v‖ ≤ (‖R − I‖ + ‖S − I‖)‖v‖ ≤ (2 sin(θ/2) + s)‖v‖`, plus the translation.
    pub fn displacement_bound(&self, diameter: f64) -> f64 {
        (2.0 * (self.max_angle / 2.0).sin() + self.max_scale) * diameter + self.max_translation
    }
}

/// Samples a deformation field whose anchors are farthest-point samples of the cloud.
pub fn sample_deformation<R: Rng>(cloud: &PointCloud, config: &DeformConfig, rng: &mut R) -> Result<DeformationField> {
    let k = config.anchors.clamp(1, cloud.len());
    let start = rng.gen_range(0..cloud.len());
    let anchors: Vec<Point3> = fps_from(cloud.points(), k, start)
        .into_iter()
        .map(|i| cloud.points[i])
        .collect();
    let transforms = anchors
        .iter()
        .map(|_| {
            let axis = random_unit(rng);
            let angle = if config.max_angle > 0.0 {
                rng.gen_range(-config.max_angle..=config.max_angle)
            } else {
                0.0
            };
            let mut s = [1.0; 3];
            if config.max_scale > 0.0 {
                for v in s.iter_mut() {
                    *v = rng.gen_range(1.0 - config.max_scale..=1.0 + config.max_scale);
                }
            }
            let t = if config.max_translation > 0.0 {
                scale(random_unit(rng), rng.gen_range(0.0..=config.max_translation))
            } else {
                [0.0; 3]
            };
            AnchorTransform {
                rotation: if angle == 0.0 { IDENTITY3 } else { axis_angle(axis, angle) },
                scale: s,
                translation: t,
            }
        })
        .collect();
    DeformationField::new(anchors, transforms, config.bandwidth)
}

/// Deformation followed by a random rotation; point order is preserved.
pub fn augment<R: Rng>(cloud: &PointCloud, rotation: &RotationConfig, deformation: &DeformConfig, rng: &mut R) -> Result<PointCloud> {
    let field = sample_deformation(cloud, deformation, rng)?;
    let deformed = deform(cloud, &field);
    let r = sample_rotation_with(rng, rotation);
    Ok(apply_rotation(&deformed, &r))
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Point3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Farthest-point sampling with a deterministic seed: the first pick is the point
/// farthest from the centroid, every later pick maximizes the distance to the
/// chosen set. Ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize) -> Result<Vec<usize>> {
    fps_indices(cloud.points(), k)
}

pub(crate) fn fps_indices(points: &[Point3], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "farthest-point sample size {k} outside 1..={}",
            points.len()
        )));
    }
    let c = centroid(points);
    let mut seed = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, c);
        if d > best {
            best = d;
            seed = i;
        }
    }
    Ok(fps_from(points, k, seed))
}

fn fps_from(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        let cp = points[current];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            // chosen points have min_d == 0 and lose against any unchosen point
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        if best <= 0.0 {
            // remaining points all coincide with chosen ones; take lowest unchosen index
            next = (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(next);
        }
        current = next;
    }
    chosen
}

/// Neighbors within `radius` of each center, nearest first (ties by index),
/// truncated to `max_neighbors`. The center is always the first entry.
pub fn radius_group(cloud: &PointCloud, centers: &[usize], radius: f64, max_neighbors: usize) -> Vec<Vec<usize>> {
    radius_group_points(cloud.points(), centers, radius, max_neighbors)
}

pub(crate) fn radius_group_points(points: &[Point3], centers: &[usize], radius: f64, max_neighbors: usize) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    let cap = max_neighbors.max(1);
    centers
        .iter()
        .map(|&c| {
            let cp = points[c];
            let mut near: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .filter_map(|(i, p)| {
                    let d = dist2(*p, cp);
                    (d <= r2).then_some((d, i))
                })
                .collect();
            let keep = cap - 1;
            if near.len() > keep {
                near.select_nth_unstable_by(keep, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(keep);
            }
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(c).chain(near.into_iter().map(|(_, i)| i)).collect()
        })
        .collect()
}

/// Inverse-distance interpolation stencil for one target point.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpStencil {
    pub sources: Vec<usize>,
    pub weights: Vec<f64>,
}

pub const INTERP_EPS: f64 = 1e-8;

/// For each target, the `k` nearest sources with weights ∝ 1/(d + ε), normalized.
pub fn interp_weights(targets: &PointCloud, sources: &PointCloud, k: usize) -> Result<Vec<InterpStencil>> {
    interp_weights_points(targets.points(), sources.points(), k)
}

pub(crate) fn interp_weights_points(targets: &[Point3], sources: &[Point3], k: usize) -> Result<Vec<InterpStencil>> {
    if k == 0 || k > sources.len() {
        return Err(Error::InvalidArgument(format!(
            "interpolation neighbor count {k} outside 1..={}",
            sources.len()
        )));
    }
    Ok(targets
        .iter()
        .map(|t| {
            let mut d: Vec<(f64, usize)> = sources.iter().enumerate().map(|(i, s)| (dist2(*t, *s), i)).collect();
            if d.len() > k {
                d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let raw: Vec<f64> = d.iter().map(|(d2, _)| 1.0 / (d2.sqrt() + INTERP_EPS)).collect();
            let total: f64 = raw.iter().sum();
            InterpStencil {
                sources: d.iter().map(|(_, i)| *i).collect(),
                weights: raw.into_iter().map(|w| w / total).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalize_fixed_point() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, -0.5, 0.0]]).unwrap();
        let (out, n) = normalize_cloud(&cloud).unwrap();
        assert_eq!(n.centroid, [0.0, 0.0, 0.0]);
        assert_eq!(n.scale, 1.0);
        assert_eq!(out, cloud);
    }

    #[test]
    fn normalize_single_point() {
        let cloud = PointCloud::new(vec![[3.0, 4.0, 0.0]]).unwrap();
        let (out, n) = normalize_cloud(&cloud).unwrap();
        assert_eq!(out.points(), &[[0.0, 0.0, 0.0]]);
        assert_eq!(n.centroid, [3.0, 4.0, 0.0]);
        assert_eq!(n.scale, 1.0);
    }

    #[test]
    fn normalize_random_recomputed() {
        let cloud = random_cloud(100, 3).translated([5.0, -2.0, 7.0]);
        let (out, n) = normalize_cloud(&cloud).unwrap();
        let c = out.centroid();
        assert!(norm(c) < 1e-6);
        let max = out.points().iter().map(|p| norm(*p)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-6);
        for (a, b) in cloud.points().iter().zip(out.points()) {
            assert!(norm(sub(n.invert(*b), *a)) < 1e-9);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]), Err(Error::InvalidInput(_))));
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn rotation_identity_and_half_turn() {
        let cloud = random_cloud(10, 1);
        assert_eq!(apply_rotation(&cloud, &RigidRotation::identity()), cloud);
        let r = RigidRotation::about_axis([0.0, 0.0, 1.0], std::f64::consts::PI);
        let p = r.apply([1.0, 0.0, 0.0]);
        assert!(norm(sub(p, [-1.0, 0.0, 0.0])) < 1e-12);
    }

    #[test]
    fn degenerate_rotation_range_is_identity() {
        let cfg = RotationConfig {
            yaw_range: (0.0, 0.0),
            max_tilt: 0.0,
        };
        assert_eq!(sample_rotation(17, &cfg).matrix(), &IDENTITY3);
    }

    #[test]
    fn rotation_sampling_deterministic_and_orthogonal() {
        let cfg = RotationConfig::default();
        assert_eq!(sample_rotation(9, &cfg), sample_rotation(9, &cfg));
        for seed in 0..1000 {
            let r = sample_rotation(seed, &cfg);
            assert!(r.orthogonality_error() < 1e-6);
            assert!((r.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_preserves_distances() {
        let cfg = RotationConfig {
            yaw_range: (0.0, std::f64::consts::TAU),
            max_tilt: std::f64::consts::PI,
        };
        for trial in 0..1000u64 {
            let cloud = random_cloud(6, trial + 10_000);
            let r = sample_rotation(trial, &cfg);
            let out = apply_rotation(&cloud, &r);
            for i in 0..6 {
                for j in 0..6 {
                    let a = dist2(cloud.points()[i], cloud.points()[j]).sqrt();
                    let b = dist2(out.points()[i], out.points()[j]).sqrt();
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotation_rejects_reflection() {
        let m = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidRotation::new(m).is_err());
        assert!(RigidRotation::new(IDENTITY3).is_ok());
    }

    #[test]
    fn identity_deformation_is_bit_exact() {
        let cloud = random_cloud(50, 2);
        let anchors = vec![cloud.points()[0], cloud.points()[7]];
        let field = DeformationField::new(anchors, vec![AnchorTransform::identity(); 2], 0.5).unwrap();
        assert_eq!(deform(&cloud, &field), cloud);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero = DeformConfig {
            max_angle: 0.0,
            max_scale: 0.0,
            max_translation: 0.0,
            ..DeformConfig::default()
        };
        let field = sample_deformation(&cloud, &zero, &mut rng).unwrap();
        assert_eq!(deform(&cloud, &field), cloud);
    }

    #[test]
    fn single_anchor_translation_moves_everything() {
        let cloud = random_cloud(30, 4);
        let tau = [0.05, -0.02, 0.03];
        let t = AnchorTransform {
            translation: tau,
            ..AnchorTransform::identity()
        };
        let field = DeformationField::new(vec![[0.2, 0.1, 0.0]], vec![t], 0.3).unwrap();
        let out = deform(&cloud, &field);
        for (a, b) in cloud.points().iter().zip(out.points()) {
            assert!(norm(sub(sub(*b, *a), tau)) < 1e-12);
        }
    }

    #[test]
    fn random_deformation_bounded_and_matches_manual_blend() {
        let (cloud, _) = normalize_cloud(&random_cloud(200, 8)).unwrap();
        let cfg = DeformConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let field = sample_deformation(&cloud, &cfg, &mut rng).unwrap();
        let out = deform(&cloud, &field);
        let bound = cfg.displacement_bound(2.0);
        for (a, b) in cloud.points().iter().zip(out.points()) {
            assert!(norm(sub(*b, *a)) <= bound + 1e-12);
        }
        // manual blend for 5 points
        for i in [0usize, 13, 57, 101, 199] {
            let p = cloud.points()[i];
            let raw: Vec<f64> = field
                .anchors()
                .iter()
                .map(|a| (-dist2(p, *a) / (2.0 * cfg.bandwidth * cfg.bandwidth)).exp())
                .collect();
            let total: f64 = raw.iter().sum();
            let mut expected = p;
            for ((a, t), w) in field.anchors().iter().zip(field.transforms()).zip(&raw) {
                let v = sub(p, *a);
                let rs: Point3 = mat_vec(&t.rotation, [v[0] * t.scale[0], v[1] * t.scale[1], v[2] * t.scale[2]]);
                let moved = add(add(rs, *a), t.translation);
                expected = add(expected, scale(sub(moved, p), w / total));
            }
            assert!(norm(sub(expected, out.points()[i])) < 1e-12);
        }
    }

    #[test]
    fn fps_exhaustion_and_seed() {
        let cloud = random_cloud(40, 5);
        let mut all = farthest_point_sample(&cloud, 40).unwrap();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        let c = cloud.centroid();
        let far = (0..40)
            .max_by(|&a, &b| {
                dist2(cloud.points()[a], c)
                    .total_cmp(&dist2(cloud.points()[b], c))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(farthest_point_sample(&cloud, 1).unwrap(), vec![far]);
        assert!(matches!(farthest_point_sample(&cloud, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(farthest_point_sample(&cloud, 41), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fps_cube_corners() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let picks = farthest_point_sample(&cloud, 2).unwrap();
        // brute force: maximize distance to first pick, lowest index among ties
        let first = picks[0];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(*p, pts[first]);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        assert_eq!(picks[1], best);
        let opposite = [1.0 - pts[first][0], 1.0 - pts[first][1], 1.0 - pts[first][2]];
        assert_eq!(pts[picks[1]], opposite);
    }

    #[test]
    fn fps_permutation_stable() {
        use rand::seq::SliceRandom;
        let cloud = random_cloud(120, 12);
        let picked: Vec<Point3> = farthest_point_sample(&cloud, 30)
            .unwrap()
            .into_iter()
            .map(|i| cloud.points()[i])
            .collect();
        let mut perm: Vec<usize> = (0..120).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let shuffled = cloud.select(&perm);
        let picked2: Vec<Point3> = farthest_point_sample(&shuffled, 30)
            .unwrap()
            .into_iter()
            .map(|i| shuffled.points()[i])
            .collect();
        assert_eq!(picked, picked2);
    }

    #[test]
    fn radius_group_isolation_and_saturation() {
        let cloud = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let centers = vec![0, 4, 9];
        let groups = radius_group(&cloud, &centers, 0.5, 8);
        assert_eq!(groups, vec![vec![0], vec![4], vec![9]]);
        let groups = radius_group(&cloud, &centers, f64::INFINITY, 10);
        for g in groups {
            let mut s = g.clone();
            s.sort();
            assert_eq!(s, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn radius_group_matches_brute_force() {
        let cloud = random_cloud(150, 7);
        let centers: Vec<usize> = (0..150).step_by(7).collect();
        let groups = radius_group(&cloud, &centers, 0.45, 12);
        for (c, g) in centers.iter().zip(&groups) {
            let mut all: Vec<(f64, usize)> = (0..150)
                .map(|i| (dist2(cloud.points()[i], cloud.points()[*c]), i))
                .filter(|(d, _)| *d <= 0.45 * 0.45)
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = all.into_iter().take(12).map(|(_, i)| i).collect();
            assert_eq!(g, &expected);
        }
    }

    #[test]
    fn interp_weights_cases() {
        let sources = random_cloud(20, 30);
        let targets = PointCloud::new(vec![sources.points()[3], [0.1, 0.2, 0.3]]).unwrap();
        let w = interp_weights(&targets, &sources, 3).unwrap();
        assert_eq!(w[0].sources[0], 3);
        assert!(w[0].weights[0] >= 1.0 - 1e-6);

        let w1 = interp_weights(&targets, &sources, 1).unwrap();
        assert_eq!(w1[1].weights, vec![1.0]);

        let targets = random_cloud(25, 31);
        let w = interp_weights(&targets, &sources, 4).unwrap();
        for (t, st) in targets.points().iter().zip(&w) {
            let mut d: Vec<(f64, usize)> = sources.points().iter().enumerate().map(|(i, s)| (dist2(*t, *s).sqrt(), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let raw: Vec<f64> = d[..4].iter().map(|(x, _)| 1.0 / (x + 1e-8)).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..4 {
                assert_eq!(st.sources[j], d[j].1);
                assert!((st.weights[j] - raw[j] / s).abs() < 1e-12);
            }
            assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(st.weights.iter().all(|w| *w >= 0.0));
        }
        assert!(interp_weights(&targets, &sources, 21).is_err());
    }
}
