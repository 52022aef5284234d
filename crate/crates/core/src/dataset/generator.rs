//! Procedural object generator built from boxes, cylinders and spheres.
//!
//! Every category describes its object as a list of leaf parts. Each leaf
//! carries an instance key and a semantic name per level; nesting of keys
//! across levels makes the refinement invariant hold by construction.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledScene, LevelAnnotation, PartInfo};
use crate::error::{Error, Result};
use crate::geom::{add, cross, normalize_cloud, normalized, scale, sub, Point3, PointCloud};

pub const BASE_CATEGORIES: [&str; 6] = ["chair", "table_lamp", "mug", "bottle", "clock", "cabinet"];
pub const NOVEL_CATEGORIES: [&str; 2] = ["bed", "stool"];
pub const CATEGORIES: [&str; 8] = ["chair", "table_lamp", "mug", "bottle", "clock", "cabinet", "bed", "stool"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub points: usize,
    /// Every leaf part receives at least this many points.
    pub min_points_per_part: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            points: 2048,
            min_points_per_part: 16,
        }
    }
}

#[derive(Debug, Clone)]
enum Primitive {
    Cuboid {
        center: Point3,
        half: Point3,
        /// Bit f set leaves face f unsampled (face index 2·axis + (0 for −, 1 for +)).
        open_faces: u8,
    },
    Cylinder {
        a: Point3,
        b: Point3,
        radius: f64,
        side: bool,
        cap_a: bool,
        cap_b: bool,
    },
    Sphere {
        center: Point3,
        radius: f64,
        upper_only: bool,
    },
}

impl Primitive {
    fn cuboid(center: Point3, size: Point3) -> Self {
        Primitive::Cuboid {
            center,
            half: scale(size, 0.5),
            open_faces: 0,
        }
    }

    fn open_cuboid(center: Point3, size: Point3, open_faces: &[usize]) -> Self {
        Primitive::Cuboid {
            center,
            half: scale(size, 0.5),
            open_faces: open_faces.iter().fold(0, |m, &f| m | 1 << f),
        }
    }

    fn face_areas(half: Point3, open_faces: u8) -> [f64; 6] {
        let [x, y, z] = half;
        let mut faces = [y * z, y * z, x * z, x * z, x * y, x * y].map(|a| 4.0 * a);
        for (f, area) in faces.iter_mut().enumerate() {
            if open_faces & (1 << f) != 0 {
                *area = 0.0;
            }
        }
        faces
    }

    fn rod(a: Point3, b: Point3, radius: f64) -> Self {
        Primitive::Cylinder {
            a,
            b,
            radius,
            side: true,
            cap_a: true,
            cap_b: true,
        }
    }

    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Cuboid { half, open_faces, .. } => Self::face_areas(half, open_faces).iter().sum(),
            Primitive::Cylinder {
                a,
                b,
                radius,
                side,
                cap_a,
                cap_b,
            } => {
                let len = crate::geom::norm(sub(b, a));
                let cap = PI * radius * radius;
                (if side { 2.0 * PI * radius * len } else { 0.0 })
                    + if cap_a { cap } else { 0.0 }
                    + if cap_b { cap } else { 0.0 }
            }
            Primitive::Sphere { radius, upper_only, .. } => {
                let full = 4.0 * PI * radius * radius;
                if upper_only {
                    full / 2.0
                } else {
                    full
                }
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Point3 {
        use std::f64::consts::TAU;
        match *self {
            Primitive::Cuboid { center, half, open_faces } => {
                let [x, y, z] = half;
                let f = pick_weighted(rng, &Self::face_areas(half, open_faces));
                let mut p = [rng.gen_range(-x..=x), rng.gen_range(-y..=y), rng.gen_range(-z..=z)];
                let axis = f / 2;
                p[axis] = if f % 2 == 0 { -half[axis] } else { half[axis] };
                add(center, p)
            }
            Primitive::Cylinder {
                a,
                b,
                radius,
                side,
                cap_a,
                cap_b,
            } => {
                let d = sub(b, a);
                let len = crate::geom::norm(d);
                let axis = normalized(d);
                let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
                let u = normalized(cross(axis, helper));
                let v = cross(axis, u);
                let cap = radius * radius * std::f64::consts::PI;
                let regions = [
                    if side { TAU * radius * len } else { 0.0 },
                    if cap_a { cap } else { 0.0 },
                    if cap_b { cap } else { 0.0 },
                ];
                let phi = rng.gen_range(0.0..TAU);
                match pick_weighted(rng, &regions) {
                    0 => {
                        let t = rng.gen_range(0.0..=1.0);
                        add(add(a, scale(d, t)), add(scale(u, radius * phi.cos()), scale(v, radius * phi.sin())))
                    }
                    region => {
                        let r = radius * rng.gen_range(0.0f64..=1.0).sqrt();
                        let base = if region == 1 { a } else { b };
                        add(base, add(scale(u, r * phi.cos()), scale(v, r * phi.sin())))
                    }
                }
            }
            Primitive::Sphere {
                center,
                radius,
                upper_only,
            } => {
                let mut dir = crate::geom::random_unit(rng);
                if upper_only {
                    dir[2] = dir[2].abs();
                }
                add(center, scale(dir, radius))
            }
        }
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// A leaf part: geometry plus (instance key, semantic name) for levels 1..=3.
struct Leaf {
    prims: Vec<Primitive>,
    keys: [(String, String); 3],
}

fn leaf(prims: Vec<Primitive>, keys: [(&str, &str); 3]) -> Leaf {
    Leaf {
        prims,
        keys: keys.map(|(k, s)| (k.to_string(), s.to_string())),
    }
}

fn u<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..=hi)
}

fn leg_layout(half_w: f64, half_d: f64, count: usize) -> Vec<(f64, f64)> {
    if count == 3 {
        vec![(-half_w, half_d), (half_w, half_d), (0.0, -half_d)]
    } else {
        vec![(-half_w, half_d), (half_w, half_d), (half_w, -half_d), (-half_w, -half_d)]
    }
}

fn ring_stretchers(feet: &[(f64, f64)], z: f64, radius: f64) -> Vec<Primitive> {
    (0..feet.len())
        .map(|i| {
            let (x0, y0) = feet[i];
            let (x1, y1) = feet[(i + 1) % feet.len()];
            Primitive::rod([x0, y0, z], [x1, y1, z], radius)
        })
        .collect()
}

const LEG_NAMES: [&str; 4] = ["leg_0", "leg_1", "leg_2", "leg_3"];

fn chair<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let w = u(rng, 0.40, 0.60);
    let d = u(rng, 0.40, 0.60);
    let seat_h = u(rng, 0.40, 0.55);
    let seat_t = u(rng, 0.04, 0.08);
    let back_h = u(rng, 0.35, 0.65);
    let back_t = u(rng, 0.03, 0.06);
    let post_r = u(rng, 0.015, 0.03);
    let leg_r = u(rng, 0.018, 0.035);
    let inset = u(rng, 0.02, 0.06);
    let legs = if rng.gen_bool(0.3) { 3 } else { 4 };
    let stretch_z = u(rng, 0.08, 0.2);

    let top = seat_h + seat_t;
    let back_y = -d / 2.0 + back_t / 2.0;
    // leaves a gap of one post radius between the panel and each post
    let panel_w = w - 6.0 * post_r;
    let mut out = vec![
        leaf(
            vec![Primitive::cuboid([0.0, back_y, top + back_h / 2.0], [panel_w, back_t, back_h])],
            [("back", "back"), ("back", "back"), ("back_panel", "back_panel")],
        ),
        leaf(
            vec![Primitive::rod([-w / 2.0 + post_r, back_y, top], [-w / 2.0 + post_r, back_y, top + back_h], post_r)],
            [("back", "back"), ("back", "back"), ("back_post_l", "back_post")],
        ),
        leaf(
            vec![Primitive::rod([w / 2.0 - post_r, back_y, top], [w / 2.0 - post_r, back_y, top + back_h], post_r)],
            [("back", "back"), ("back", "back"), ("back_post_r", "back_post")],
        ),
        leaf(
            vec![Primitive::cuboid([0.0, 0.0, seat_h + seat_t / 2.0], [w, d, seat_t])],
            [("seat", "seat"), ("seat", "seat"), ("seat", "seat")],
        ),
    ];
    let feet = leg_layout(w / 2.0 - inset, d / 2.0 - inset, legs);
    for (i, &(x, y)) in feet.iter().enumerate() {
        out.push(leaf(
            vec![Primitive::rod([x, y, 0.0], [x, y, seat_h], leg_r)],
            [("base", "base"), ("legs", "legs"), (LEG_NAMES[i], "leg")],
        ));
    }
    out.push(leaf(
        ring_stretchers(&feet, stretch_z, leg_r * 0.6),
        [("base", "base"), ("stretchers", "stretchers"), ("stretchers", "stretchers")],
    ));
    out
}

fn stool<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let seat_r = u(rng, 0.15, 0.25);
    let seat_t = u(rng, 0.03, 0.06);
    let h = u(rng, 0.45, 0.75);
    let legs = if rng.gen_bool(0.5) { 3 } else { 4 };
    let leg_r = u(rng, 0.015, 0.03);
    let splay = u(rng, 1.0, 1.3);
    let stretch_t = u(rng, 0.25, 0.45);
    let phase = u(rng, 0.0, std::f64::consts::TAU / legs as f64);

    let mut out = vec![leaf(
        vec![Primitive::Cylinder {
            a: [0.0, 0.0, h],
            b: [0.0, 0.0, h + seat_t],
            radius: seat_r,
            side: true,
            cap_a: true,
            cap_b: true,
        }],
        [("seat", "seat"), ("seat", "seat"), ("seat", "seat")],
    )];
    let mut rungs = Vec::new();
    for i in 0..legs {
        let ang = phase + std::f64::consts::TAU * i as f64 / legs as f64;
        let top = [0.75 * seat_r * ang.cos(), 0.75 * seat_r * ang.sin(), h];
        let bottom = [splay * seat_r * ang.cos(), splay * seat_r * ang.sin(), 0.0];
        rungs.push(add(bottom, scale(sub(top, bottom), stretch_t)));
        out.push(leaf(
            vec![Primitive::rod(bottom, top, leg_r)],
            [("base", "base"), ("legs", "legs"), (LEG_NAMES[i], "leg")],
        ));
    }
    let stretchers = (0..legs)
        .map(|i| Primitive::rod(rungs[i], rungs[(i + 1) % legs], leg_r * 0.6))
        .collect();
    out.push(leaf(
        stretchers,
        [("base", "base"), ("stretchers", "stretchers"), ("stretchers", "stretchers")],
    ));
    out
}

fn table_lamp<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let base_r = u(rng, 0.10, 0.18);
    let base_h = u(rng, 0.02, 0.05);
    let pole_r = u(rng, 0.01, 0.02);
    let pole_top = u(rng, 0.30, 0.50);
    let joint_r = u(rng, 0.025, 0.04);
    let reach = u(rng, 0.10, 0.25);
    let rise = u(rng, 0.05, 0.20);
    let shade_r = u(rng, 0.08, 0.14);
    let shade_h = u(rng, 0.10, 0.18);

    let joint = [0.0, 0.0, pole_top];
    let arm_end = [reach, 0.0, pole_top + rise];
    vec![
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, 0.0],
                b: [0.0, 0.0, base_h],
                radius: base_r,
                side: true,
                cap_a: true,
                cap_b: true,
            }],
            [("base", "base"), ("base", "base"), ("base", "base")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, base_h],
                b: joint,
                radius: pole_r,
                side: true,
                cap_a: false,
                cap_b: false,
            }],
            [("stand", "stand"), ("pole", "pole"), ("pole", "pole")],
        ),
        leaf(
            vec![Primitive::Sphere {
                center: joint,
                radius: joint_r,
                upper_only: false,
            }],
            [("stand", "stand"), ("arm", "arm"), ("joint", "joint")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: joint,
                b: arm_end,
                radius: pole_r * 0.8,
                side: true,
                cap_a: false,
                cap_b: false,
            }],
            [("stand", "stand"), ("arm", "arm"), ("arm", "arm_rod")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: [reach, 0.0, pole_top + rise - shade_h * 0.8],
                b: [reach, 0.0, pole_top + rise + shade_h * 0.2],
                radius: shade_r,
                side: true,
                cap_a: false,
                cap_b: false,
            }],
            [("shade", "shade"), ("shade", "shade"), ("shade", "shade")],
        ),
    ]
}

fn mug<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let r = u(rng, 0.08, 0.12);
    let h = u(rng, 0.15, 0.25);
    let reach = u(rng, 0.04, 0.07);
    let t = u(rng, 0.012, 0.02);
    let lo = h * u(rng, 0.2, 0.3);
    let hi = h * u(rng, 0.7, 0.8);
    let x0 = r;
    let x1 = r + reach;
    vec![
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, 0.0],
                b: [0.0, 0.0, h],
                radius: r,
                side: true,
                cap_a: false,
                cap_b: false,
            }],
            [("body", "body"), ("wall", "wall"), ("wall", "wall")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, 0.0],
                b: [0.0, 0.0, 0.001],
                radius: r,
                side: false,
                cap_a: true,
                cap_b: false,
            }],
            [("body", "body"), ("bottom", "bottom"), ("bottom", "bottom")],
        ),
        leaf(
            vec![Primitive::cuboid([(x0 + x1) / 2.0, 0.0, hi], [reach, t, t])],
            [("handle", "handle"), ("handle", "handle"), ("handle_top", "handle_top")],
        ),
        leaf(
            vec![Primitive::cuboid([x1, 0.0, (lo + hi) / 2.0], [t, t, hi - lo])],
            [("handle", "handle"), ("handle", "handle"), ("handle_side", "handle_side")],
        ),
        leaf(
            vec![Primitive::cuboid([(x0 + x1) / 2.0, 0.0, lo], [reach, t, t])],
            [("handle", "handle"), ("handle", "handle"), ("handle_bottom", "handle_bottom")],
        ),
    ]
}

fn bottle<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let r = u(rng, 0.06, 0.10);
    let h = u(rng, 0.20, 0.35);
    let neck_r = u(rng, 0.02, 0.035);
    let neck_h = u(rng, 0.05, 0.10);
    let cap_h = u(rng, 0.02, 0.04);
    let neck_base = h + (r * r - neck_r * neck_r).sqrt();
    vec![
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, 0.0],
                b: [0.0, 0.0, h],
                radius: r,
                side: true,
                cap_a: true,
                cap_b: false,
            }],
            [("body", "body"), ("body", "body"), ("lower_body", "lower_body")],
        ),
        leaf(
            vec![Primitive::Sphere {
                center: [0.0, 0.0, h],
                radius: r,
                upper_only: true,
            }],
            [("body", "body"), ("body", "body"), ("shoulder", "shoulder")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, neck_base],
                b: [0.0, 0.0, neck_base + neck_h],
                radius: neck_r,
                side: true,
                cap_a: false,
                cap_b: false,
            }],
            [("mouth", "mouth"), ("neck", "neck"), ("neck", "neck")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, neck_base + neck_h],
                b: [0.0, 0.0, neck_base + neck_h + cap_h],
                radius: neck_r * 1.2,
                side: true,
                cap_a: false,
                cap_b: true,
            }],
            [("mouth", "mouth"), ("cap", "cap"), ("cap", "cap")],
        ),
    ]
}

fn clock<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    use std::f64::consts::TAU;
    let radius = u(rng, 0.15, 0.25);
    let t = u(rng, 0.03, 0.06);
    let stand_h = u(rng, 0.03, 0.08);
    let stand_w = radius * u(rng, 0.6, 1.2);
    let stand_d = u(rng, 0.10, 0.20);
    let cz = stand_h + radius;
    let hand = |len: f64, width: f64, ang: f64| {
        let dir = [ang.cos(), 0.0, ang.sin()];
        let center = add([0.0, t + 0.02, cz], scale(dir, len / 2.0));
        // hands are thin rods held just in front of the dial
        Primitive::rod(
            sub(center, scale(dir, len / 2.0)),
            add(center, scale(dir, len / 2.0)),
            width / 2.0,
        )
    };
    let hour = hand(radius * 0.5, radius * 0.06, u(rng, 0.0, TAU));
    let minute = hand(radius * 0.8, radius * 0.04, u(rng, 0.0, TAU));
    vec![
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, cz],
                b: [0.0, t, cz],
                radius,
                side: true,
                cap_a: false,
                cap_b: false,
            }],
            [("frame", "frame"), ("rim", "rim"), ("rim", "rim")],
        ),
        leaf(
            // the stand reaches backwards, which fixes front and back
            vec![Primitive::cuboid([0.0, t - stand_d / 2.0, stand_h / 2.0], [stand_w, stand_d, stand_h])],
            [("frame", "frame"), ("stand", "stand"), ("stand", "stand")],
        ),
        leaf(
            vec![Primitive::Cylinder {
                a: [0.0, 0.0, cz],
                b: [0.0, t, cz],
                radius: radius * 0.98,
                side: false,
                cap_a: false,
                cap_b: true,
            }],
            [("face", "face"), ("dial", "dial"), ("dial", "dial")],
        ),
        leaf(
            vec![hour],
            [("face", "face"), ("hands", "hands"), ("hour_hand", "hour_hand")],
        ),
        leaf(
            vec![minute],
            [("face", "face"), ("hands", "hands"), ("minute_hand", "minute_hand")],
        ),
    ]
}

fn cabinet<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let w = u(rng, 0.40, 0.80);
    let d = u(rng, 0.30, 0.50);
    let h = u(rng, 0.50, 1.00);
    let foot_h = u(rng, 0.04, 0.10);
    let foot_r = u(rng, 0.02, 0.04);
    let drawers = if rng.gen_bool(0.5) { 2 } else { 3 };
    let margin = 0.03;
    // open front so drawer panels do not share a surface with the frame
    let mut out = vec![leaf(
        vec![Primitive::open_cuboid([0.0, 0.0, foot_h + h / 2.0], [w, d, h], &[3])],
        [("frame", "frame"), ("frame", "frame"), ("frame", "frame")],
    )];
    let slot = (h - margin) / drawers as f64;
    let mut handles = Vec::new();
    const DRAWER_NAMES: [&str; 3] = ["drawer_0", "drawer_1", "drawer_2"];
    for (i, name) in DRAWER_NAMES.iter().enumerate().take(drawers) {
        let zc = foot_h + margin / 2.0 + slot * (i as f64 + 0.5);
        out.push(leaf(
            vec![Primitive::cuboid([0.0, d / 2.0 + 0.02, zc], [w - 2.0 * margin, 0.02, slot - margin])],
            [("front", "front"), ("drawer_fronts", "drawer_fronts"), (name, "drawer_front")],
        ));
        handles.push(Primitive::cuboid([0.0, d / 2.0 + 0.045, zc], [w * 0.25, 0.03, 0.02]));
    }
    out.push(leaf(handles, [("front", "front"), ("handles", "handles"), ("handles", "handles")]));
    let feet = leg_layout(w / 2.0 - foot_r * 2.0, d / 2.0 - foot_r * 2.0, 4);
    for (i, &(x, y)) in feet.iter().enumerate() {
        out.push(leaf(
            vec![Primitive::rod([x, y, 0.0], [x, y, foot_h], foot_r)],
            [("base", "base"), ("feet", "feet"), (LEG_NAMES[i], "foot")],
        ));
    }
    out
}

fn bed<R: Rng>(rng: &mut R) -> Vec<Leaf> {
    let w = u(rng, 0.9, 1.6);
    let l = u(rng, 1.8, 2.2);
    let plat_t = u(rng, 0.10, 0.20);
    let leg_h = u(rng, 0.10, 0.25);
    let leg_r = u(rng, 0.03, 0.05);
    let mat_t = u(rng, 0.12, 0.25);
    let head_h = u(rng, 0.40, 0.80);
    let head_t = u(rng, 0.05, 0.08);
    let plat_top = leg_h + plat_t;
    let (mat_w, mat_l) = (w * 0.82, l - head_t - 0.2);
    let mat_y = head_t / 2.0 + 0.04;
    // the platform top is sampled only where the mattress leaves it exposed
    let (y0, y1) = (mat_y - mat_l / 2.0, mat_y + mat_l / 2.0);
    let side = (w - mat_w) / 2.0;
    let strip = |x0: f64, x1: f64, ya: f64, yb: f64| {
        Primitive::open_cuboid([(x0 + x1) / 2.0, (ya + yb) / 2.0, plat_top - 0.002], [x1 - x0, yb - ya, 0.004], &[4])
    };
    let mut platform = vec![Primitive::open_cuboid([0.0, 0.0, leg_h + plat_t / 2.0], [w, l, plat_t], &[2, 5])];
    platform.push(strip(-w / 2.0, -w / 2.0 + side, -l / 2.0, l / 2.0));
    platform.push(strip(w / 2.0 - side, w / 2.0, -l / 2.0, l / 2.0));
    platform.push(strip(-mat_w / 2.0, mat_w / 2.0, -l / 2.0, y0));
    platform.push(strip(-mat_w / 2.0, mat_w / 2.0, y1, l / 2.0));
    let mut out = vec![
        leaf(platform, [("frame", "frame"), ("platform", "platform"), ("platform", "platform")]),
        leaf(
            // the underside rests on the platform and is not sampled
            vec![Primitive::open_cuboid([0.0, mat_y, plat_top + mat_t / 2.0], [mat_w, mat_l, mat_t], &[4])],
            [("mattress", "mattress"), ("mattress", "mattress"), ("mattress", "mattress")],
        ),
        leaf(
            vec![Primitive::cuboid([0.0, -l / 2.0 - head_t / 2.0, leg_h + head_h / 2.0 + plat_t / 2.0], [w, head_t, head_h + plat_t])],
            [("headboard", "headboard"), ("headboard", "headboard"), ("headboard", "headboard")],
        ),
    ];
    let feet = leg_layout(w / 2.0 - leg_r * 2.0, l / 2.0 - leg_r * 2.0, 4);
    for (i, &(x, y)) in feet.iter().enumerate() {
        out.push(leaf(
            vec![Primitive::rod([x, y, 0.0], [x, y, leg_h], leg_r)],
            [("frame", "frame"), ("legs", "legs"), (LEG_NAMES[i], "leg")],
        ));
    }
    out
}

fn build_leaves<R: Rng>(category: &str, rng: &mut R) -> Result<Vec<Leaf>> {
    Ok(match category {
        "chair" => chair(rng),
        "table_lamp" => table_lamp(rng),
        "mug" => mug(rng),
        "bottle" => bottle(rng),
        "clock" => clock(rng),
        "cabinet" => cabinet(rng),
        "bed" => bed(rng),
        "stool" => stool(rng),
        other => return Err(Error::InvalidArgument(format!("unknown category {other:?}"))),
    })
}

/// Largest-remainder allocation of `total` items proportional to `weights`,
/// with a floor of `min_each` per weight.
fn allocate(total: usize, weights: &[f64], min_each: usize) -> Vec<usize> {
    let n = weights.len();
    let floor = min_each.min(total / n.max(1));
    let rest = total - floor * n;
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| rest as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut remaining = rest - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts.into_iter().map(|c| c + floor).collect()
}

fn category_salt(category: &str) -> u64 {
    // FNV-1a
    category.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Generates one labeled scene. Deterministic per `(category, seed)`.
pub fn generate_scene(category: &str, seed: u64, config: &GeneratorConfig) -> Result<LabeledScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ category_salt(category));
    let leaves = build_leaves(category, &mut rng)?;
    if config.points < leaves.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points cannot cover {} parts",
            config.points,
            leaves.len()
        )));
    }

    let leaf_areas: Vec<f64> = leaves.iter().map(|l| l.prims.iter().map(Primitive::area).sum()).collect();
    let counts = allocate(config.points, &leaf_areas, config.min_points_per_part);

    // (point, leaf index)
    let mut samples: Vec<(Point3, usize)> = Vec::with_capacity(config.points);
    for (li, (leaf, &count)) in leaves.iter().zip(&counts).enumerate() {
        let areas: Vec<f64> = leaf.prims.iter().map(Primitive::area).collect();
        let per_prim = allocate(count, &areas, 0);
        for (prim, &k) in leaf.prims.iter().zip(&per_prim) {
            for _ in 0..k {
                samples.push((prim.sample(&mut rng), li));
            }
        }
    }
    samples.shuffle(&mut rng);

    let raw = PointCloud::new(samples.iter().map(|(p, _)| *p).collect())?;
    let (norm_cloud, _) = normalize_cloud(&raw)?;
    // store single-precision-representable coordinates so files roundtrip exactly
    let points: Vec<Point3> = norm_cloud
        .points()
        .iter()
        .map(|p| p.map(|c| c as f32 as f64))
        .collect();
    let cloud = PointCloud::new(points)?;

    let mut levels = Vec::with_capacity(3);
    for level in 0..3 {
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let mut parts = Vec::new();
        let mut leaf_part = Vec::with_capacity(leaves.len());
        for leaf in &leaves {
            let (key, sem) = &leaf.keys[level];
            let id = *ids.entry(key.as_str()).or_insert_with(|| {
                parts.push(PartInfo {
                    id: parts.len(),
                    semantic: format!("{category}/{sem}"),
                });
                parts.len() - 1
            });
            leaf_part.push(id as i32);
        }
        levels.push(LevelAnnotation {
            level: level as u8 + 1,
            part_ids: samples.iter().map(|(_, li)| leaf_part[*li]).collect(),
            parts,
        });
    }

    let scene = LabeledScene {
        scene_id: format!("{category}_{seed:05}"),
        category: category.to_string(),
        cloud,
        levels,
    };
    scene.validate()?;
    Ok(scene)
}
