//! Oriented boxes, rigid transforms about the vertical axis, membership tests,
//! rotated 3D IoU and center distance.
//!
//! Boxes carry yaw only (rotation about +z). All arithmetic is `f64`.

use std::f64::consts::PI;
use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Clipped footprints below this area (m²) count as no intersection.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Rotates about the vertical axis.
    pub fn rotate_z(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    /// Keeps the points whose mask entry is set.
    pub fn select(&self, mask: &[bool]) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(p, _)| *p)
                .collect(),
        )
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| t.apply(*p)).collect())
    }
}

impl FromIterator<Vec3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Vec3>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Rotation about +z followed by translation: `p ↦ R(yaw)·p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub yaw: f64,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform { yaw: 0.0, translation: Vec3::ZERO };

    pub fn new(yaw: f64, translation: Vec3) -> Self {
        Self { yaw, translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        p.rotate_z(self.yaw) + self.translation
    }

    /// Rotates a direction (no translation).
    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        v.rotate_z(self.yaw)
    }

    pub fn inverse(&self) -> RigidTransform {
        RigidTransform { yaw: -self.yaw, translation: -self.translation.rotate_z(-self.yaw) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            yaw: self.yaw + other.yaw,
            translation: self.apply(other.translation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum BoxError {
    #[error("box size must be positive and finite, got ({0}, {1}, {2})")]
    BadSize(f64, f64, f64),
    #[error("box center or yaw is not finite")]
    NonFinite,
}

/// Oriented box `(x, y, z, l, w, h, θ)`: `l` runs along the heading, `w` across
/// it, `h` is vertical. `center` is the volumetric center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    /// (l, w, h)
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Validates the size and normalizes yaw into (−π, π].
    pub fn new(center: Vec3, size: [f64; 3], yaw: f64) -> Result<Self, BoxError> {
        let [l, w, h] = size;
        if !(l > 0.0 && w > 0.0 && h > 0.0 && l.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(BoxError::BadSize(l, w, h));
        }
        if !center.is_finite() || !yaw.is_finite() {
            return Err(BoxError::NonFinite);
        }
        Ok(Self { center, size, yaw: wrap_angle(yaw) })
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn is_valid(&self) -> bool {
        let [l, w, h] = self.size;
        l > 0.0 && w > 0.0 && h > 0.0 && self.center.is_finite() && self.yaw.is_finite()
    }

    /// Box-local → world.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.yaw, self.center)
    }

    /// World → box-local.
    pub fn world_to_local(&self) -> RigidTransform {
        self.pose().inverse()
    }

    /// This box expressed in the frame of `frame`.
    pub fn in_frame_of(&self, frame: &Box3D) -> Box3D {
        let t = frame.world_to_local();
        Box3D {
            center: t.apply(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw - frame.yaw),
        }
    }

    /// Inverse of [`Box3D::in_frame_of`]: a box given in `frame`'s local
    /// coordinates, mapped back to world.
    pub fn from_frame_of(&self, frame: &Box3D) -> Box3D {
        Box3D {
            center: frame.pose().apply(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw + frame.yaw),
        }
    }

    /// Same pose, extents grown by `margin` on every side.
    pub fn enlarged(&self, margin: f64) -> Box3D {
        Box3D {
            center: self.center,
            size: [self.size[0] + 2.0 * margin, self.size[1] + 2.0 * margin, self.size[2] + 2.0 * margin],
            yaw: self.yaw,
        }
    }

    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let q = (p - self.center).rotate_z(-self.yaw);
        q.x.abs() <= self.size[0] / 2.0 + margin
            && q.y.abs() <= self.size[1] / 2.0 + margin
            && q.z.abs() <= self.size[2] / 2.0 + margin
    }

    /// BEV footprint, counter-clockwise starting at the front-left corner.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [c * x - s * y + self.center.x, s * x + c * y + self.center.y])
    }

    fn z_range(&self) -> (f64, f64) {
        (self.center.z - self.size[2] / 2.0, self.center.z + self.size[2] / 2.0)
    }
}

/// `q = R(−θ)·(p − center)` for every point.
pub fn transform_to_box_frame(cloud: &PointCloud, bx: &Box3D) -> PointCloud {
    cloud.transformed(&bx.world_to_local())
}

/// Corner order: bottom face (−h/2) first, then top face, each
/// counter-clockwise seen from above starting at (+l/2, +w/2).
pub fn box_corners(bx: &Box3D) -> [Vec3; 8] {
    let (hl, hw, hh) = (bx.size[0] / 2.0, bx.size[1] / 2.0, bx.size[2] / 2.0);
    let pose = bx.pose();
    let signs = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut out = [Vec3::ZERO; 8];
    for (k, zs) in [-1.0, 1.0].into_iter().enumerate() {
        for (i, (sx, sy)) in signs.iter().enumerate() {
            out[k * 4 + i] = pose.apply(Vec3::new(sx * hl, sy * hw, zs * hh));
        }
    }
    out
}

pub fn points_in_box(cloud: &PointCloud, bx: &Box3D, margin: f64) -> Vec<bool> {
    cloud.points.iter().map(|p| bx.contains(*p, margin)).collect()
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    a.center.distance(b.center)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice.abs() / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` against a convex counter-clockwise
/// `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// BEV intersection area of two boxes' footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let clipped = clip_convex(&a.footprint(), &b.footprint());
    if clipped.len() < 3 {
        return 0.0;
    }
    let area = polygon_area(&clipped);
    if area < DEGENERATE_AREA {
        0.0
    } else {
        area
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    // Far-apart footprints cannot overlap; skip clipping.
    let ra = 0.5 * (a.size[0].hypot(a.size[1]));
    let rb = 0.5 * (b.size[0].hypot(b.size[1]));
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    if dx.hypot(dy) > ra + rb {
        return 0.0;
    }
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
