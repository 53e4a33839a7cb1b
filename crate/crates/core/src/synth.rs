//! Synthetic keypoint templates, object instances and the line-delimited
//! dataset format.
//!
//! Instances stand in for a keypoint detector: a template is posed in front
//! of the camera, projected, and then corrupted with pixel noise, gross
//! pixel outliers and object-frame coordinate noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{project, Camera, Pixel, Point3, Pose};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

const MAX_POSE_DRAWS: usize = 100;

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Box,
    CarLike,
}

impl TemplateKind {
    pub fn name(&self) -> &'static str {
        match self {
            TemplateKind::Box => "box",
            TemplateKind::CarLike => "car_like",
        }
    }
}

/// Object extents in meters: height (y), width (z), length (x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            h: 1.5,
            w: 1.6,
            l: 3.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub dims: Dims,
    /// Object-frame keypoints; the position in this list is the semantic index.
    pub keypoints: Vec<Point3>,
}

impl ObjectTemplate {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Axis-aligned rectangle on which surface keypoints are sampled. `axis`
/// is the fixed coordinate (0 = x, 1 = y, 2 = z).
#[derive(Debug, Clone, Copy)]
struct Face {
    axis: usize,
    at: f64,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Face {
    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn sample(&self, rng: &mut impl Rng) -> Point3 {
        let a = rng.random_range(self.lo[0]..=self.hi[0]);
        let b = rng.random_range(self.lo[1]..=self.hi[1]);
        match self.axis {
            0 => Point3::new(self.at, a, b),
            1 => Point3::new(a, self.at, b),
            _ => Point3::new(a, b, self.at),
        }
    }
}

/// The six faces of an axis-aligned box given by its min/max corners.
fn box_faces(min: [f64; 3], max: [f64; 3], skip_bottom: bool) -> Vec<Face> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for at in [min[axis], max[axis]] {
            // y points down, so the bottom face sits at max y
            if skip_bottom && axis == 1 && at == max[1] {
                continue;
            }
            faces.push(Face {
                axis,
                at,
                lo: [min[a], min[b]],
                hi: [max[a], max[b]],
            });
        }
    }
    faces
}

fn sample_faces(faces: &[Face], count: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let total: f64 = faces.iter().map(Face::area).sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut chosen = faces[faces.len() - 1];
            for f in faces {
                if pick < f.area() {
                    chosen = *f;
                    break;
                }
                pick -= f.area();
            }
            chosen.sample(rng)
        })
        .collect()
}

/// Builds a keypoint template: 8 box corners, top and bottom centers, then
/// `n_extra` surface samples. Deterministic in `seed`.
pub fn make_template(kind: TemplateKind, n_extra: usize, dims: Dims, seed: u64) -> Result<ObjectTemplate> {
    if !(dims.h > 0.0 && dims.w > 0.0 && dims.l > 0.0) {
        return Err(Error::InvalidConfig(format!("template dims must be positive, got {dims:?}")));
    }
    let (hl, hh, hw) = (dims.l / 2.0, dims.h / 2.0, dims.w / 2.0);
    let mut keypoints = Vec::with_capacity(10 + n_extra);
    for &x in &[-hl, hl] {
        for &y in &[-hh, hh] {
            for &z in &[-hw, hw] {
                keypoints.push(Point3::new(x, y, z));
            }
        }
    }
    keypoints.push(Point3::new(0.0, -hh, 0.0));
    keypoints.push(Point3::new(0.0, hh, 0.0));

    let faces = match kind {
        TemplateKind::Box => box_faces([-hl, -hh, -hw], [hl, hh, hw], false),
        TemplateKind::CarLike => {
            // lower body plus a narrower cabin on top
            let body_top = hh - 0.55 * dims.h;
            let mut f = box_faces([-hl, body_top, -hw], [hl, hh, hw], false);
            f.extend(box_faces(
                [-0.3 * dims.l, -hh, -0.9 * hw],
                [0.2 * dims.l, body_top, 0.9 * hw],
                true,
            ));
            f
        }
    };
    let mut rng = rng_from(seed);
    keypoints.extend(sample_faces(&faces, n_extra, &mut rng));

    Ok(ObjectTemplate {
        name: kind.name().to_string(),
        kind,
        dims,
        keypoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Gaussian pixel noise std (pixels).
    pub sigma_px: f64,
    /// Gaussian object-frame keypoint noise std (meters).
    pub sigma_3d: f64,
    /// Probability that a 2D keypoint is replaced by an outlier.
    pub p_outlier: f64,
    /// Half-width of the uniform outlier box around the true pixel.
    pub outlier_px: f64,
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            sigma_px: 0.0,
            sigma_3d: 0.0,
            p_outlier: 0.0,
            outlier_px: 50.0,
        }
    }

    pub fn pixel_only(sigma_px: f64) -> Self {
        Self {
            sigma_px,
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_px >= 0.0
            && self.sigma_3d >= 0.0
            && self.outlier_px >= 0.0
            && (0.0..=1.0).contains(&self.p_outlier);
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid noise model {self:?}")));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_px: 1.0,
            sigma_3d: 0.03,
            p_outlier: 0.1,
            outlier_px: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRanges {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            x: (-10.0, 10.0),
            y: (0.5, 1.5),
            z: (5.0, 60.0),
        }
    }
}

impl PoseRanges {
    fn sample(&self, rng: &mut impl Rng) -> Pose {
        let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let yaw = rng.random_range(-PI..PI);
        let x = draw(rng, self.x);
        let y = draw(rng, self.y);
        let z = draw(rng, self.z);
        Pose::new(yaw, Point3::new(x, y, z))
    }
}

/// One object: a posed template with clean and corrupted observations.
///
/// `indices[k]` is the semantic index of the k-th stored keypoint; the
/// storage order is otherwise free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub template: String,
    pub camera: Camera,
    pub pose: Pose,
    pub indices: Vec<usize>,
    pub kp3d_clean: Vec<Point3>,
    pub kp3d: Vec<Point3>,
    pub px_clean: Vec<Pixel>,
    pub px: Vec<Pixel>,
}

/// Borrowed keypoint observations of one instance, in storage order.
#[derive(Debug, Clone, Copy)]
pub struct KeypointView<'a> {
    pub camera: &'a Camera,
    pub yaw: f64,
    pub indices: &'a [usize],
    pub points: &'a [Point3],
    pub pixels: &'a [Pixel],
}

impl KeypointView<'_> {
    /// Storage positions sorted by semantic index.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.indices.len()).collect();
        order.sort_by_key(|&k| self.indices[k]);
        order
    }
}

impl ObjectInstance {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn z_star(&self) -> f64 {
        self.pose.depth()
    }

    /// Corrupted observations, as a detector would report them.
    pub fn observed(&self) -> KeypointView<'_> {
        KeypointView {
            camera: &self.camera,
            yaw: self.pose.yaw(),
            indices: &self.indices,
            points: &self.kp3d,
            pixels: &self.px,
        }
    }

    pub fn clean(&self) -> KeypointView<'_> {
        KeypointView {
            camera: &self.camera,
            yaw: self.pose.yaw(),
            indices: &self.indices,
            points: &self.kp3d_clean,
            pixels: &self.px_clean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.indices.len();
        if [self.kp3d_clean.len(), self.kp3d.len(), self.px_clean.len(), self.px.len()]
            .iter()
            .any(|&c| c != n)
        {
            return Err(Error::ShapeMismatch("keypoint counts differ across views".into()));
        }
        let mut seen = self.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::InvalidConfig("duplicate semantic keypoint index".into()));
        }
        if !(self.z_star() > 0.0) {
            return Err(Error::InvalidConfig(format!("z_c* must be positive, got {}", self.z_star())));
        }
        self.camera.validate()
    }
}

/// Poses `template` at random, projects it and applies `noise`.
pub fn sample_instance(
    template: &ObjectTemplate,
    ranges: &PoseRanges,
    camera: &Camera,
    noise: &NoiseModel,
    seed: u64,
) -> Result<ObjectInstance> {
    noise.validate()?;
    let mut rng = rng_from(seed);

    let mut projected = None;
    for _ in 0..MAX_POSE_DRAWS {
        let pose = ranges.sample(&mut rng);
        let px: Result<Vec<Pixel>> = template
            .keypoints
            .iter()
            .map(|&p| project(camera, &pose, p).map(|(px, _)| px))
            .collect();
        if let Ok(px) = px {
            projected = Some((pose, px));
            break;
        }
    }
    let (pose, px_clean) = projected.ok_or(Error::UnprojectableInstance(MAX_POSE_DRAWS))?;

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let px = px_clean
        .iter()
        .map(|p| {
            let mut q = Pixel::new(
                p.u + noise.sigma_px * unit.sample(&mut rng),
                p.v + noise.sigma_px * unit.sample(&mut rng),
            );
            if noise.p_outlier > 0.0 && rng.random::<f64>() < noise.p_outlier {
                let r = noise.outlier_px;
                q = Pixel::new(
                    p.u + rng.random_range(-r..=r),
                    p.v + rng.random_range(-r..=r),
                );
            }
            q
        })
        .collect();
    let kp3d = template
        .keypoints
        .iter()
        .map(|p| {
            Point3::new(
                p.x + noise.sigma_3d * unit.sample(&mut rng),
                p.y + noise.sigma_3d * unit.sample(&mut rng),
                p.z + noise.sigma_3d * unit.sample(&mut rng),
            )
        })
        .collect();

    Ok(ObjectInstance {
        template: template.name.clone(),
        camera: *camera,
        pose,
        indices: (0..template.len()).collect(),
        kp3d_clean: template.keypoints.clone(),
        kp3d,
        px_clean,
        px,
    })
}

/// `count` instances with per-instance seeds derived from `seed`.
pub fn generate_instances(
    template: &ObjectTemplate,
    ranges: &PoseRanges,
    camera: &Camera,
    noise: &NoiseModel,
    count: usize,
    seed: u64,
) -> Result<Vec<ObjectInstance>> {
    (0..count)
        .map(|k| sample_instance(template, ranges, camera, noise, derive_seed(seed, k as u64)))
        .collect()
}

#[derive(Serialize)]
struct RecordOut<'a> {
    schema_version: u32,
    instance: &'a ObjectInstance,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    schema_version: u32,
    instance: ObjectInstance,
}

/// Writes one JSON record per line. Floats use shortest round-trip decimal.
pub fn write_dataset(path: &Path, instances: &[ObjectInstance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in instances {
        let line = serde_json::to_string(&RecordOut {
            schema_version: DATASET_SCHEMA_VERSION,
            instance: inst,
        })
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ObjectInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut instances = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Parse {
                line: lineno,
                message: format!("unsupported schema_version {}", rec.schema_version),
            });
        }
        rec.instance.validate().map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        instances.push(rec.instance);
    }
    Ok(instances)
}
