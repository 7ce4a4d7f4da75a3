//! Synthetic LiDAR-like tracklets for parametric shape categories, and the
//! template/search training pairs cut from them.
//!
//! Shapes are sampled on their surface with outward normals, posed along a
//! constant-velocity / constant-yaw-rate trajectory, filtered to the faces
//! visible from a static sensor, jittered with sensor noise and mixed with
//! uniform clutter plus a ground band around the target.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, DatasetManifest, DatasetWriter, Split};
use crate::geom::{points_in_box, transform_to_box_frame, Box3D, PointCloud, Vec3};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid category spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("tracklet needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame index {t} out of range 1..{frames}")]
    FrameOutOfRange { t: usize, frames: usize },
    #[error("search crop holds no points")]
    SearchEmpty,
    #[error("template holds no points")]
    TemplateEmpty,
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    CuboidShell,
    Capsule,
    CompositeFrame,
    LargeCuboidShell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub family: ShapeFamily,
    /// Nominal (l, w, h) in meters.
    pub size: [f64; 3],
    /// Relative per-instance size jitter (standard deviation of the scale factor).
    pub size_jitter: f64,
    /// Surface samples per square meter.
    pub density: f64,
}

impl CategorySpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| SynthError::InvalidSpec { name: self.name.clone(), reason: reason.into() };
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(bad("sizes must be positive"));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(bad("density must be positive"));
        }
        if !(self.size_jitter >= 0.0 && self.size_jitter < 0.5) {
            return Err(bad("size jitter must lie in [0, 0.5)"));
        }
        if self.family == ShapeFamily::Capsule && self.size[2] < self.size[0].min(self.size[1]) {
            return Err(bad("capsule height must cover both caps"));
        }
        Ok(())
    }

    pub fn carbox() -> Self {
        Self { name: "carbox".into(), family: ShapeFamily::CuboidShell, size: [3.9, 1.6, 1.5], size_jitter: 0.06, density: 24.0 }
    }

    pub fn pedcapsule() -> Self {
        Self { name: "pedcapsule".into(), family: ShapeFamily::Capsule, size: [0.6, 0.6, 1.7], size_jitter: 0.06, density: 40.0 }
    }

    pub fn bikeframe() -> Self {
        Self { name: "bikeframe".into(), family: ShapeFamily::CompositeFrame, size: [1.8, 0.6, 1.2], size_jitter: 0.06, density: 48.0 }
    }

    pub fn vanbox() -> Self {
        Self { name: "vanbox".into(), family: ShapeFamily::LargeCuboidShell, size: [5.0, 1.9, 2.2], size_jitter: 0.06, density: 16.0 }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::carbox(), Self::pedcapsule(), Self::bikeframe(), Self::vanbox()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    /// m/frame
    pub speed: [f64; 2],
    /// rad/frame
    pub yaw_rate: [f64; 2],
    /// Standard deviation of the per-frame position / heading noise.
    pub process_noise: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self { speed: [0.0, 0.3], yaw_rate: [-0.05, 0.05], process_noise: 0.01 }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(self.speed) || !ordered(self.yaw_rate) || !(self.process_noise >= 0.0) {
            return Err(SynthError::InvalidConfig("motion ranges must be ordered and noise nonnegative".into()));
        }
        Ok(())
    }
}

/// Sensor and clutter model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub sensor: Vec3,
    /// Initial target distance from the sensor, meters.
    pub range: [f64; 2],
    /// Gaussian noise added to every foreground point, meters.
    pub sensor_noise: f64,
    /// Uniform background points per frame (inclusive range).
    pub clutter: [usize; 2],
    /// Horizontal margin around the target box over which clutter is scattered.
    pub clutter_margin: f64,
    pub ground_points: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            sensor: Vec3::new(0.0, 0.0, 1.7),
            range: [6.0, 20.0],
            sensor_noise: 0.02,
            clutter: [20, 60],
            clutter_margin: 2.5,
            ground_points: 48,
        }
    }
}

/// Surface samples in the shape's local frame (box center at the origin).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub size: [f64; 3],
    pub points: PointCloud,
    pub normals: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt: Box3D,
    pub sensor: Vec3,
    /// Points inside `gt` (margin 0).
    pub fg_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Template points in the ground-truth box frame.
    pub template: PointCloud,
    /// Search points in the perturbed-box frame.
    pub search: PointCloud,
    /// Ground truth in the search frame.
    pub gt_box_local: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub sigma_center: f64,
    pub sigma_yaw: f64,
    /// Search crop margin around the perturbed box, meters.
    pub offset: f64,
    pub n_template: usize,
    pub n_search: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { sigma_center: 0.1, sigma_yaw: 0.05, offset: 2.0, n_template: 128, n_search: 256 }
    }
}

// Parts of the composite frame as (center, size) fractions of the bounding box.
const FRAME_PARTS: [([f64; 3], [f64; 3]); 5] = [
    ([-0.32, 0.0, -0.22], [0.36, 0.08, 0.56]),
    ([0.32, 0.0, -0.22], [0.36, 0.08, 0.56]),
    ([0.0, 0.0, -0.05], [0.6, 0.06, 0.06]),
    ([-0.05, 0.0, 0.25], [0.2, 0.6, 0.5]),
    ([0.25, 0.0, 0.05], [0.05, 0.9, 0.05]),
];

// (area, axis, sign) per face
fn cuboid_faces(size: [f64; 3]) -> [(f64, usize, f64); 6] {
    let [l, w, h] = size;
    [(w * h, 0, 1.0), (w * h, 0, -1.0), (l * h, 1, 1.0), (l * h, 1, -1.0), (l * w, 2, 1.0), (l * w, 2, -1.0)]
}

fn cuboid_area(size: [f64; 3]) -> f64 {
    2.0 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2])
}

fn capsule_dims(size: [f64; 3]) -> (f64, f64) {
    let radius = size[0].min(size[1]) / 2.0;
    let straight = (size[2] - 2.0 * radius).max(0.0);
    (radius, straight)
}

fn capsule_area(size: [f64; 3]) -> f64 {
    let (r, straight) = capsule_dims(size);
    2.0 * PI * r * straight + 4.0 * PI * r * r
}

fn frame_parts(size: [f64; 3]) -> Vec<(Vec3, [f64; 3])> {
    FRAME_PARTS
        .iter()
        .map(|(c, s)| {
            (
                Vec3::new(c[0] * size[0], c[1] * size[1], c[2] * size[2]),
                [s[0] * size[0], s[1] * size[1], s[2] * size[2]],
            )
        })
        .collect()
}

pub fn surface_area(family: ShapeFamily, size: [f64; 3]) -> f64 {
    match family {
        ShapeFamily::CuboidShell | ShapeFamily::LargeCuboidShell => cuboid_area(size),
        ShapeFamily::Capsule => capsule_area(size),
        ShapeFamily::CompositeFrame => frame_parts(size).iter().map(|(_, s)| cuboid_area(*s)).sum(),
    }
}

fn pick_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_cuboid(center: Vec3, size: [f64; 3], rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    let faces = cuboid_faces(size);
    let areas: Vec<f64> = faces.iter().map(|f| f.0).collect();
    let (_, axis, sign) = faces[pick_weighted(&areas, rng)];
    let mut p = [0.0; 3];
    let mut n = [0.0; 3];
    for (k, slot) in p.iter_mut().enumerate() {
        *slot = if k == axis { sign * size[k] / 2.0 } else { (rng.gen::<f64>() - 0.5) * size[k] };
    }
    n[axis] = sign;
    (center + Vec3::from(p), Vec3::from(n))
}

fn sample_capsule(size: [f64; 3], rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    let (r, straight) = capsule_dims(size);
    let side = 2.0 * PI * r * straight;
    let caps = 4.0 * PI * r * r;
    if pick_weighted(&[side, caps], rng) == 0 {
        let phi = rng.gen::<f64>() * 2.0 * PI;
        let z = (rng.gen::<f64>() - 0.5) * straight;
        let n = Vec3::new(phi.cos(), phi.sin(), 0.0);
        (n * r + Vec3::new(0.0, 0.0, z), n)
    } else {
        let mut d;
        loop {
            d = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            if d.norm() > 1e-9 {
                break;
            }
        }
        let n = d * (1.0 / d.norm());
        let cap_center = Vec3::new(0.0, 0.0, if n.z >= 0.0 { straight / 2.0 } else { -straight / 2.0 });
        (cap_center + n * r, n)
    }
}

/// Draws one instance size around the nominal size.
pub fn draw_size(spec: &CategorySpec, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let scale: f64 = if spec.size_jitter > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        (1.0 + spec.size_jitter * z).clamp(0.5, 1.5)
    } else {
        1.0
    };
    spec.size.map(|s| s * scale)
}

/// Uniform surface samples with outward normals for a given instance size.
pub fn sample_surface(
    family: ShapeFamily,
    size: [f64; 3],
    density: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ShapeSample, SynthError> {
    let area = surface_area(family, size);
    if !(area > 0.0) || !(density > 0.0) || !area.is_finite() {
        return Err(SynthError::InvalidSpec { name: format!("{family:?}"), reason: "zero surface area or density".into() });
    }
    let count = (density * area).round() as usize;
    let parts = frame_parts(size);
    let part_areas: Vec<f64> = parts.iter().map(|(_, s)| cuboid_area(*s)).collect();
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let (p, n) = match family {
            ShapeFamily::CuboidShell | ShapeFamily::LargeCuboidShell => sample_cuboid(Vec3::ZERO, size, rng),
            ShapeFamily::Capsule => sample_capsule(size, rng),
            ShapeFamily::CompositeFrame => {
                let (c, s) = parts[pick_weighted(&part_areas, rng)];
                sample_cuboid(c, s, rng)
            }
        };
        points.push(p);
        normals.push(n);
    }
    Ok(ShapeSample { size, points: PointCloud::new(points), normals })
}

/// Draws an instance size and samples its surface.
pub fn generate_shape(spec: &CategorySpec, rng: &mut ChaCha8Rng) -> Result<ShapeSample, SynthError> {
    spec.validate()?;
    let size = draw_size(spec, rng);
    sample_surface(spec.family, size, spec.density, rng)
}

/// Keeps points whose outward normal faces the sensor.
pub fn sensor_view_filter(cloud: &PointCloud, normals: &[Vec3], sensor: Vec3) -> PointCloud {
    assert_eq!(cloud.len(), normals.len(), "normals must pair with points");
    cloud
        .iter()
        .zip(normals)
        .filter(|(p, n)| n.dot(sensor - **p) > 0.0)
        .map(|(p, _)| *p)
        .collect()
}

fn quantize(p: Vec3) -> Vec3 {
    Vec3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn scatter_clutter(gt: &Box3D, scene: &SceneSpec, rng: &mut ChaCha8Rng, out: &mut Vec<Vec3>) {
    let region = Box3D {
        center: Vec3::new(gt.center.x, gt.center.y, gt.size[2] / 2.0 + 0.5),
        size: [gt.size[0] + 2.0 * scene.clutter_margin, gt.size[1] + 2.0 * scene.clutter_margin, gt.size[2] + 1.0],
        yaw: gt.yaw,
    };
    let pose = region.pose();
    let [lo, hi] = scene.clutter;
    let n = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut placed = 0;
    while placed < n {
        let local = Vec3::new(
            (rng.gen::<f64>() - 0.5) * region.size[0],
            (rng.gen::<f64>() - 0.5) * region.size[1],
            (rng.gen::<f64>() - 0.5) * region.size[2],
        );
        let p = quantize(pose.apply(local));
        if !gt.contains(p, 0.0) {
            out.push(p);
            placed += 1;
        }
    }
    let ground_z_top = gt.center.z - gt.size[2] / 2.0 - 0.02;
    for _ in 0..scene.ground_points {
        let local = Vec3::new((rng.gen::<f64>() - 0.5) * region.size[0], (rng.gen::<f64>() - 0.5) * region.size[1], 0.0);
        let mut p = pose.apply(local);
        p.z = ground_z_top - 0.13 * rng.gen::<f64>();
        out.push(quantize(p));
    }
}

/// One tracklet of `frames` frames following a constant-velocity,
/// constant-yaw-rate model with Gaussian process noise.
pub fn simulate_tracklet(
    cat: &CategorySpec,
    motion: &MotionSpec,
    scene: &SceneSpec,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tracklet, SynthError> {
    if frames < 2 {
        return Err(SynthError::TooFewFrames(frames));
    }
    motion.validate()?;
    let shape = generate_shape(cat, rng)?;
    let size = shape.size;

    let dist = rng.gen_range(scene.range[0]..=scene.range[1]);
    let bearing = rng.gen::<f64>() * 2.0 * PI;
    let mut yaw = rng.gen::<f64>() * 2.0 * PI - PI;
    let mut center = Vec3::new(scene.sensor.x + dist * bearing.cos(), scene.sensor.y + dist * bearing.sin(), size[2] / 2.0);
    let speed = sample_range(motion.speed, rng);
    let yaw_rate = sample_range(motion.yaw_rate, rng);

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            yaw += yaw_rate + gaussian(rng, motion.process_noise);
            center = center
                + Vec3::new(speed * yaw.cos(), speed * yaw.sin(), 0.0)
                + Vec3::new(gaussian(rng, motion.process_noise), gaussian(rng, motion.process_noise), 0.0);
        }
        let gt = Box3D::new(center, size, yaw).expect("validated size");
        let pose = gt.pose();
        let world = shape.points.transformed(&pose);
        let normals: Vec<Vec3> = shape.normals.iter().map(|n| pose.apply_vector(*n)).collect();
        let visible = sensor_view_filter(&world, &normals, scene.sensor);
        let mut points: Vec<Vec3> = visible
            .iter()
            .map(|p| {
                let jitter = Vec3::new(
                    gaussian(rng, scene.sensor_noise),
                    gaussian(rng, scene.sensor_noise),
                    gaussian(rng, scene.sensor_noise),
                );
                quantize(*p + jitter)
            })
            .collect();
        scatter_clutter(&gt, scene, rng, &mut points);
        let cloud = PointCloud::new(points);
        let fg_points = points_in_box(&cloud, &gt, 0.0).iter().filter(|m| **m).count();
        out.push(Frame { cloud, gt, sensor: scene.sensor, fg_points });
    }
    Ok(Tracklet { category: cat.name.clone(), frames: out })
}

fn sample_range(r: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Resamples to exactly `n` points: a random subset when long, every source
/// point plus draws with replacement when short.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let len = cloud.len();
    if len == 0 || n == 0 {
        return PointCloud::default();
    }
    if len >= n {
        index::sample(rng, len, n).into_iter().map(|i| cloud.points[i]).collect()
    } else {
        let mut pts = cloud.points.clone();
        pts.extend((0..n - len).map(|_| cloud.points[rng.gen_range(0..len)]));
        PointCloud::new(pts)
    }
}

/// Points of `cloud` inside `bx` enlarged by `margin`, in `bx`'s frame.
pub fn crop_local(cloud: &PointCloud, bx: &Box3D, margin: f64) -> PointCloud {
    transform_to_box_frame(&cloud.select(&points_in_box(cloud, bx, margin)), bx)
}

pub fn perturb_box(gt: &Box3D, cfg: &PairConfig, rng: &mut ChaCha8Rng) -> Box3D {
    let d = Vec3::new(gaussian(rng, cfg.sigma_center), gaussian(rng, cfg.sigma_center), gaussian(rng, cfg.sigma_center));
    let dyaw = gaussian(rng, cfg.sigma_yaw);
    Box3D::new(gt.center + d, gt.size, gt.yaw + dyaw).expect("perturbation keeps the box valid")
}

pub fn make_training_pair(
    trk: &Tracklet,
    t: usize,
    cfg: &PairConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair, SynthError> {
    if t == 0 || t >= trk.len() {
        return Err(SynthError::FrameOutOfRange { t, frames: trk.len() });
    }
    let frame = &trk.frames[t];
    let perturbed = perturb_box(&frame.gt, cfg, rng);
    let search_local = crop_local(&frame.cloud, &perturbed, cfg.offset);
    if search_local.is_empty() {
        return Err(SynthError::SearchEmpty);
    }
    let first = &trk.frames[0];
    let prev = &trk.frames[t - 1];
    let mut template_pts = crop_local(&first.cloud, &first.gt, 0.0).points;
    template_pts.extend(crop_local(&prev.cloud, &prev.gt, 0.0).points);
    if template_pts.is_empty() {
        return Err(SynthError::TemplateEmpty);
    }
    let search = resample(&search_local, cfg.n_search, rng);
    let template = resample(&PointCloud::new(template_pts), cfg.n_template, rng);
    Ok(TrainingPair { template, search, gt_box_local: frame.gt.in_frame_of(&perturbed) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub categories: Vec<CategorySpec>,
    pub observed: Vec<String>,
    pub unseen: String,
    /// Tracklets per category in each split.
    pub tracklets: usize,
    pub frames: usize,
    pub motion: MotionSpec,
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            categories: CategorySpec::defaults(),
            observed: vec!["pedcapsule".into(), "bikeframe".into(), "vanbox".into()],
            unseen: "carbox".into(),
            tracklets: 8,
            frames: 12,
            motion: MotionSpec::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let known = |n: &str| self.categories.iter().any(|c| c.name == n);
        if self.observed.is_empty() {
            return Err(SynthError::InvalidConfig("at least one observed category is required".into()));
        }
        if self.observed.iter().any(|o| o == &self.unseen) {
            return Err(SynthError::InvalidConfig(format!("unseen category `{}` is also listed as observed", self.unseen)));
        }
        for name in self.observed.iter().chain(std::iter::once(&self.unseen)) {
            if !known(name) {
                return Err(SynthError::InvalidConfig(format!("unknown category `{name}`")));
            }
        }
        let mut names: Vec<&str> = self.observed.iter().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.observed.len() {
            return Err(SynthError::InvalidConfig("duplicate observed category".into()));
        }
        if self.frames < 2 {
            return Err(SynthError::TooFewFrames(self.frames));
        }
        for c in &self.categories {
            c.validate()?;
        }
        self.motion.validate()
    }

    fn spec(&self, name: &str) -> &CategorySpec {
        self.categories.iter().find(|c| c.name == name).expect("validated category")
    }
}

/// Generates both splits and writes them under `root`.
///
/// Tracklet `k` of category `c` in split `s` draws from the stream
/// `(seed, s, c, k)`, so the output does not depend on the rayon pool size.
pub fn build_dataset(config: &DatasetConfig, seed: u64, root: &Path) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    let writer = DatasetWriter::create(root)?;
    let mut test_cats: Vec<(&String, bool)> = config.observed.iter().map(|n| (n, true)).collect();
    test_cats.push((&config.unseen, false));

    let mut jobs = Vec::new();
    for (split, cats) in [(Split::Train, &test_cats[..test_cats.len() - 1]), (Split::Test, &test_cats[..])] {
        for (name, observed) in cats {
            let cat_index = config.categories.iter().position(|c| &c.name == *name).expect("validated") as u64;
            for k in 0..config.tracklets {
                jobs.push((split, (*name).clone(), *observed, cat_index, k));
            }
        }
    }

    let records = jobs
        .par_iter()
        .map(|(split, name, observed, cat_index, k)| {
            let tag = match split {
                Split::Train => rng::tag::TRAIN_SPLIT,
                Split::Test => rng::tag::TEST_SPLIT,
            };
            let mut r = rng::stream(seed, &[tag, *cat_index, *k as u64]);
            let trk = simulate_tracklet(config.spec(name), &config.motion, &config.scene, config.frames, &mut r)?;
            let id = format!("{}_{}_{:04}", split.as_str(), name, k);
            Ok((*split, writer.write_tracklet(&id, &trk, *observed)?))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let manifest = DatasetManifest::assemble(seed, &config.observed, &config.unseen, records);
    writer.finish(&manifest)?;
    Ok(manifest)
}
