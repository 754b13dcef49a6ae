//! Deterministic synthetic scenes standing in for sensor backbones.
//!
//! Boxes carry a feature signature. The LiDAR BEV is the signature splatted
//! over each box footprint in the ego frame; image features are the
//! signature splatted as a small Gaussian around each box center's
//! projection. Scenes round-trip through a JSON scene file.

use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{even_heights, project_point, BevFeature, BevSpec, CameraModel, EgoPose};
use crate::lgvt::ImageFeatureSet;
use crate::tda::{FrameSequence, TdaExample};
use crate::tensor::{seeded_rng, Tensor};

/// Gaussian splat width in pixels.
pub const SPLAT_SIGMA: f64 = 1.5;
/// Splat truncation radius in units of sigma.
pub const SPLAT_RADIUS_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    /// World position at frame 0, meters.
    pub center: [f64; 3],
    pub half_extent: [f64; 2],
    /// World displacement per frame, meters.
    pub velocity: [f64; 2],
    pub signature: Vec<f64>,
}

impl SceneBox {
    pub fn center_at(&self, t: usize) -> Vector3<f64> {
        Vector3::new(
            self.center[0] + t as f64 * self.velocity[0],
            self.center[1] + t as f64 * self.velocity[1],
            self.center[2],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub spec: BevSpec,
    /// `(H, W)` of every camera feature map.
    pub image_size: [usize; 2],
    /// Ego-to-camera models.
    pub rig: Vec<CameraModel>,
    pub ego: Vec<EgoPose>,
    pub boxes: Vec<SceneBox>,
    pub channels: usize,
}

impl Scene {
    pub fn new(
        seed: u64,
        spec: BevSpec,
        image_size: [usize; 2],
        rig: Vec<CameraModel>,
        ego: Vec<EgoPose>,
        boxes: Vec<SceneBox>,
        channels: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if ego.is_empty() {
            return Err(Error::InvalidArgument(
                "a scene needs at least one ego pose".into(),
            ));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "feature channels must be positive".into(),
            ));
        }
        for (k, b) in boxes.iter().enumerate() {
            if !(b.half_extent[0] > 0.0 && b.half_extent[1] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "box {k} has non-positive half extent"
                )));
            }
            if b.signature.len() != channels {
                return Err(Error::InvalidArgument(format!(
                    "box {k} signature has {} channels, scene has {channels}",
                    b.signature.len()
                )));
            }
            let finite = b
                .signature
                .iter()
                .chain(&b.center)
                .chain(&b.velocity)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidArgument(format!(
                    "box {k} has non-finite values"
                )));
            }
        }
        for (k, cam) in rig.iter().enumerate() {
            if [cam.height(), cam.width()] != image_size {
                return Err(Error::InvalidArgument(format!(
                    "camera {k} is {}x{}, scene images are {}x{}",
                    cam.height(),
                    cam.width(),
                    image_size[0],
                    image_size[1]
                )));
            }
        }
        Ok(Self {
            seed,
            spec,
            image_size,
            rig,
            ego,
            boxes,
            channels,
        })
    }

    pub fn frames(&self) -> usize {
        self.ego.len()
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.ego.len() {
            return Err(Error::OutOfRange(format!(
                "frame {t} of a {}-frame scene",
                self.ego.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_scene()
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile::from_scene(self);
        serde_json::to_string_pretty(&file).expect("scene serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 ego-to-camera transform.
    pub extrinsic: Vec<f64>,
}

/// On-disk scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub seed: u64,
    pub spec: BevSpec,
    pub image_size: [usize; 2],
    pub cameras: Vec<CameraEntry>,
    pub ego: Vec<EgoPose>,
    pub boxes: Vec<SceneBox>,
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene> {
        let [h, w] = self.image_size;
        let rig = self
            .cameras
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if c.extrinsic.len() != 16 {
                    return Err(Error::Parse(format!(
                        "camera {k} extrinsic has {} values, expected 16",
                        c.extrinsic.len()
                    )));
                }
                let ext = Matrix4::from_row_slice(&c.extrinsic);
                CameraModel::from_pinhole(c.fx, c.fy, c.cx, c.cy, ext, w, h)
                    .map_err(|e| Error::Parse(format!("camera {k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        // a scene without boxes has no signature to take the width from
        let channels = self
            .boxes
            .first()
            .map_or(DEFAULT_CHANNELS, |b| b.signature.len());
        let ego = self
            .ego
            .iter()
            .map(|p| EgoPose::new(p.x, p.y, p.yaw))
            .collect();
        Scene::new(
            self.seed,
            self.spec,
            self.image_size,
            rig,
            ego,
            self.boxes,
            channels,
        )
        .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_scene(scene: &Scene) -> Self {
        let cameras = scene
            .rig
            .iter()
            .map(|cam| {
                let k = cam.intrinsics();
                let e = cam.extrinsics();
                CameraEntry {
                    fx: k[(0, 0)],
                    fy: k[(1, 1)],
                    cx: k[(0, 2)],
                    cy: k[(1, 2)],
                    extrinsic: (0..4)
                        .flat_map(|r| (0..4).map(move |c| e[(r, c)]))
                        .collect(),
                }
            })
            .collect();
        Self {
            seed: scene.seed,
            spec: scene.spec.clone(),
            image_size: scene.image_size,
            cameras,
            ego: scene.ego.clone(),
            boxes: scene.boxes.clone(),
        }
    }
}

/// Signatures splatted over box footprints in the frame-`t` ego frame;
/// overlapping boxes combine by element-wise maximum.
pub fn render_lidar_bev(scene: &Scene, t: usize) -> Result<BevFeature> {
    scene.check_frame(t)?;
    let spec = &scene.spec;
    let c = scene.channels;
    let mut out = BevFeature::zeros(spec, c);
    let mut occupied = vec![false; spec.num_cells()];
    let to_ego = scene.ego[t].world_to_ego();
    for b in &scene.boxes {
        let w = b.center_at(t);
        let p = to_ego * Vector3::new(w.x, w.y, 1.0);
        let (ci, cj) = spec.world_to_cell(p.x, p.y);
        let (ri, rj) = (
            b.half_extent[0] / spec.cell_size,
            b.half_extent[1] / spec.cell_size,
        );
        let i_lo = (ci - ri - 1e-9).ceil().max(0.0);
        let i_hi = (ci + ri + 1e-9).floor().min(spec.cells_x as f64 - 1.0);
        let j_lo = (cj - rj - 1e-9).ceil().max(0.0);
        let j_hi = (cj + rj + 1e-9).floor().min(spec.cells_y as f64 - 1.0);
        if i_lo > i_hi || j_lo > j_hi {
            continue;
        }
        for i in i_lo as usize..=i_hi as usize {
            for j in j_lo as usize..=j_hi as usize {
                let n = i * spec.cells_y + j;
                let cell = out.cell_mut(i, j);
                if occupied[n] {
                    for (v, s) in cell.iter_mut().zip(&b.signature) {
                        *v = v.max(*s);
                    }
                } else {
                    cell.copy_from_slice(&b.signature);
                    occupied[n] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Evaluation target; the same rendering as [`render_lidar_bev`].
pub fn ground_truth_bev(scene: &Scene, t: usize) -> Result<BevFeature> {
    render_lidar_bev(scene, t)
}

/// Per-camera feature maps with each visible box center splatted as a
/// unit-mass Gaussian. The returned cameras map ego-frame points, matching
/// the ego-centric BEV grid.
pub fn render_image_features(scene: &Scene, t: usize) -> Result<ImageFeatureSet> {
    scene.check_frame(t)?;
    let [h, w] = scene.image_size;
    let c = scene.channels;
    let world_to_ego = scene.ego[t].world_to_ego_4();
    let radius = SPLAT_SIGMA * SPLAT_RADIUS_SIGMAS;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * SPLAT_SIGMA * SPLAT_SIGMA);
    let mut views = Vec::with_capacity(scene.rig.len());
    for cam in &scene.rig {
        let world_cam = cam.composed(&world_to_ego)?;
        let mut map = Tensor::zeros(&[c, h, w]);
        for b in &scene.boxes {
            let p = project_point(&world_cam, &b.center_at(t));
            if !p.valid {
                continue;
            }
            let r_lo = (p.v - radius).ceil().max(0.0) as usize;
            let r_hi = (p.v + radius).floor().min(h as f64 - 1.0) as usize;
            let c_lo = (p.u - radius).ceil().max(0.0) as usize;
            let c_hi = (p.u + radius).floor().min(w as f64 - 1.0) as usize;
            let data = map.data_mut();
            for row in r_lo..=r_hi {
                for col in c_lo..=c_hi {
                    let d2 = (col as f64 - p.u).powi(2) + (row as f64 - p.v).powi(2);
                    if d2 > radius * radius {
                        continue;
                    }
                    let g = norm * (-d2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
                    for (k, s) in b.signature.iter().enumerate() {
                        data[(k * h + row) * w + col] += g * s;
                    }
                }
            }
        }
        views.push(map);
    }
    ImageFeatureSet::new(views, scene.rig.clone())
}

/// Cell maximizing `|channel 0|`; ties go to the lowest `i`, then `j`.
pub fn peak_cell(feature: &BevFeature) -> (usize, usize) {
    let spec = feature.spec();
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..spec.cells_x {
        for j in 0..spec.cells_y {
            let v = feature.cell(i, j)[0].abs();
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    best
}

/// Euclidean distance in cells between the channel-0 peaks of `feature`
/// and `truth`.
pub fn peak_displacement_error(feature: &BevFeature, truth: &BevFeature) -> Result<f64> {
    if feature.spec() != truth.spec() {
        return Err(Error::Shape("feature and truth grids differ".into()));
    }
    let c = truth.channels();
    if truth.data().data().chunks(c).all(|cell| cell[0] == 0.0) {
        return Err(Error::InvalidArgument(
            "ground truth channel 0 is all zero".into(),
        ));
    }
    let (fi, fj) = peak_cell(feature);
    let (ti, tj) = peak_cell(truth);
    let di = fi as f64 - ti as f64;
    let dj = fj as f64 - tj as f64;
    Ok((di * di + dj * dj).sqrt())
}

/// Chebyshev distance in cells between two peaks.
pub fn peak_chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Extent in cells, along `axis`, of the cells whose `|channel 0|` exceeds
/// `threshold` (0 when none do).
pub fn support_extent(feature: &BevFeature, axis: Axis, threshold: f64) -> usize {
    let spec = feature.spec();
    let mut lo = usize::MAX;
    let mut hi = 0;
    for i in 0..spec.cells_x {
        for j in 0..spec.cells_y {
            if feature.cell(i, j)[0].abs() > threshold {
                let k = if axis == Axis::X { i } else { j };
                lo = lo.min(k);
                hi = hi.max(k);
            }
        }
    }
    if lo == usize::MAX {
        0
    } else {
        hi - lo + 1
    }
}

/// Desk-scale defaults.
pub const DEFAULT_CELLS: usize = 64;
pub const DEFAULT_CELL_SIZE: f64 = 0.5;
pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_IMAGE: usize = 64;
pub const DEFAULT_FRAMES: usize = 5;
pub const DEFAULT_HEIGHTS: usize = 4;
pub const PILLAR_LOW: f64 = 0.5;
pub const PILLAR_HIGH: f64 = 2.0;

pub fn default_heights(n: usize) -> Vec<f64> {
    even_heights(n, PILLAR_LOW, PILLAR_HIGH)
}

pub fn default_spec(heights: usize) -> BevSpec {
    BevSpec::centered(DEFAULT_CELLS, DEFAULT_CELL_SIZE, default_heights(heights))
        .expect("valid default grid")
}

/// Camera looking from `eye` at `target` with focal length chosen so every
/// pillar point of `spec` (up to `z_max`) projects inside the image.
pub fn fitted_camera(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    spec: &BevSpec,
    z_max: f64,
    width: usize,
    height: usize,
) -> Result<CameraModel> {
    let cx = (width - 1) as f64 / 2.0;
    let cy = (height - 1) as f64 / 2.0;
    let unit = CameraModel::look_at(eye, target, Vector3::z(), 1.0, 1.0, 0.0, 0.0, width, height)?;
    let half = spec.cell_size * 0.5;
    let xs = [
        spec.origin[0] - half,
        spec.origin[0] + (spec.cells_x as f64 - 0.5) * spec.cell_size,
    ];
    let ys = [
        spec.origin[1] - half,
        spec.origin[1] + (spec.cells_y as f64 - 0.5) * spec.cell_size,
    ];
    let mut extent_u: f64 = 0.0;
    let mut extent_v: f64 = 0.0;
    for &x in &xs {
        for &y in &ys {
            for z in [0.0, z_max] {
                let p = project_point(&unit, &Vector3::new(x, y, z));
                if !(p.depth > 0.0) {
                    return Err(Error::InvalidArgument("grid corner behind camera".into()));
                }
                extent_u = extent_u.max(p.u.abs());
                extent_v = extent_v.max(p.v.abs());
            }
        }
    }
    let f = 0.98 * (cx / extent_u).min(cy / extent_v);
    CameraModel::look_at(eye, target, Vector3::z(), f, f, cx, cy, width, height)
}

/// Two elevated cameras on perpendicular baselines, both covering the whole
/// grid.
pub fn default_rig(spec: &BevSpec, width: usize, height: usize) -> Result<Vec<CameraModel>> {
    let ext_x = spec.cells_x as f64 * spec.cell_size;
    let ext_y = spec.cells_y as f64 * spec.cell_size;
    let span = ext_x.max(ext_y);
    let center = Vector3::new(
        spec.origin[0] + (spec.cells_x - 1) as f64 * spec.cell_size * 0.5,
        spec.origin[1] + (spec.cells_y - 1) as f64 * spec.cell_size * 0.5,
        0.0,
    );
    let elevation = RIG_ELEVATION * span;
    let baseline = RIG_BASELINE * span;
    let z_max = spec.heights.last().copied().unwrap_or(0.0).max(0.0) + 1.0;
    [
        Vector3::new(-baseline, 0.0, elevation),
        Vector3::new(0.0, -baseline, elevation),
    ]
    .into_iter()
    .map(|off| fitted_camera(center + off, center, spec, z_max, width, height))
    .collect()
}

const RIG_ELEVATION: f64 = 2.5;
const RIG_BASELINE: f64 = 0.5;

fn unit_signature(channels: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut s: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
    s[0] = 1.0;
    s
}

/// Single static box whose channel-0 signature is 1.0, placed at a random
/// cell center away from the grid border.
pub fn beacon_scene(seed: u64, heights: usize) -> Result<Scene> {
    let spec = default_spec(heights);
    let mut rng = seeded_rng(seed);
    let margin = 6;
    let i = rng.random_range(margin..DEFAULT_CELLS - margin);
    let j = rng.random_range(margin..DEFAULT_CELLS - margin);
    let z = rng.random_range(PILLAR_LOW..PILLAR_HIGH);
    let mut signature = vec![0.0; DEFAULT_CHANNELS];
    signature[0] = 1.0;
    let b = SceneBox {
        center: [
            spec.origin[0] + i as f64 * spec.cell_size,
            spec.origin[1] + j as f64 * spec.cell_size,
            z,
        ],
        half_extent: [0.25 * spec.cell_size, 0.25 * spec.cell_size],
        velocity: [0.0, 0.0],
        signature,
    };
    let rig = default_rig(&spec, DEFAULT_IMAGE, DEFAULT_IMAGE)?;
    Scene::new(
        seed,
        spec,
        [DEFAULT_IMAGE, DEFAULT_IMAGE],
        rig,
        vec![EgoPose::new(0.0, 0.0, 0.0)],
        vec![b],
        DEFAULT_CHANNELS,
    )
}

/// Random ego trajectory: forward motion up to `max_step` meters per frame
/// with small lateral drift and yaw changes.
pub fn random_trajectory(frames: usize, max_step: f64, rng: &mut impl Rng) -> Vec<EgoPose> {
    let mut pose = EgoPose::new(0.0, 0.0, 0.0);
    let mut out = vec![pose];
    for _ in 1..frames {
        let fwd = rng.random_range(0.0..max_step);
        let side = rng.random_range(-0.25..0.25) * max_step;
        let dyaw = rng.random_range(-0.05..0.05);
        let (s, c) = pose.yaw.sin_cos();
        pose = EgoPose::new(
            pose.x + c * fwd - s * side,
            pose.y + s * fwd + c * side,
            pose.yaw + dyaw,
        );
        out.push(pose);
    }
    out
}

/// A few static boxes seen over `frames` frames of forward ego motion.
pub fn static_scene(seed: u64, frames: usize) -> Result<Scene> {
    let spec = default_spec(DEFAULT_HEIGHTS);
    let mut rng = seeded_rng(seed);
    let ego = random_trajectory(frames, 1.0, &mut rng);
    let mut boxes = Vec::new();
    for (k, amp) in [1.0, 0.6, 0.4].into_iter().enumerate() {
        let mut signature = unit_signature(DEFAULT_CHANNELS, &mut rng);
        signature[0] = amp;
        let x = rng.random_range(-8.0..8.0);
        let y = -6.0 + 6.0 * k as f64 + rng.random_range(-1.0..1.0);
        boxes.push(SceneBox {
            center: [x, y, rng.random_range(PILLAR_LOW..PILLAR_HIGH)],
            half_extent: [0.75, 0.5],
            velocity: [0.0, 0.0],
            signature,
        });
    }
    let rig = default_rig(&spec, DEFAULT_IMAGE, DEFAULT_IMAGE)?;
    Scene::new(
        seed,
        spec,
        [DEFAULT_IMAGE, DEFAULT_IMAGE],
        rig,
        ego,
        boxes,
        DEFAULT_CHANNELS,
    )
}

/// Seeded family of short sequences with one moving blob each, observed
/// with a random per-frame gain, for fitting and evaluating temporal fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingBlobFamily {
    pub seed: u64,
    pub cells: usize,
    pub cell_size: f64,
    pub channels: usize,
    pub frames: usize,
    /// Blob speed in cells per frame.
    pub speed: f64,
    /// Blob half extent in cells.
    pub half_extent: f64,
    /// Maximum ego forward motion per frame in cells.
    pub ego_step: f64,
    pub min_gain: f64,
}

impl MovingBlobFamily {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            cells: 32,
            cell_size: 1.0,
            channels: 4,
            frames: DEFAULT_FRAMES,
            speed: 3.0,
            half_extent: 0.5,
            ego_step: 1.0,
            min_gain: 0.1,
        }
    }

    pub fn spec(&self) -> BevSpec {
        BevSpec::centered(self.cells, self.cell_size, vec![1.0]).expect("valid family grid")
    }

    /// Scene `index` of the family (no cameras).
    pub fn scene(&self, index: u64) -> Result<Scene> {
        let spec = self.spec();
        let mut rng = seeded_rng(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index),
        );
        let ego = random_trajectory(self.frames, self.ego_step * self.cell_size, &mut rng);
        let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let speed = self.speed * self.cell_size;
        let vel = [speed * angle.cos(), speed * angle.sin()];
        // final position inside the central part of the last ego frame
        let span = (self.cells as f64 - 1.0) * self.cell_size;
        let end_ego = [
            rng.random_range(-0.2..0.2) * span,
            rng.random_range(-0.2..0.2) * span,
        ];
        let last = ego[ego.len() - 1];
        let end_world = last.ego_to_world() * Vector3::new(end_ego[0], end_ego[1], 1.0);
        let t_last = (self.frames - 1) as f64;
        let start = [end_world.x - t_last * vel[0], end_world.y - t_last * vel[1]];
        let signature = unit_signature(self.channels, &mut rng);
        let he = self.half_extent * self.cell_size;
        let b = SceneBox {
            center: [start[0], start[1], 1.0],
            half_extent: [he, he],
            velocity: vel,
            signature,
        };
        Scene::new(
            self.seed,
            spec,
            [1, 1],
            Vec::new(),
            ego,
            vec![b],
            self.channels,
        )
    }

    pub fn frame_gains(&self, index: u64) -> Vec<f64> {
        let mut rng = seeded_rng(self.seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5EED);
        (0..self.frames)
            .map(|_| rng.random_range(self.min_gain..=1.0))
            .collect()
    }

    /// Observed frames (gain-scaled LiDAR renders) and the clean target.
    pub fn example(&self, index: u64) -> Result<TdaExample> {
        let scene = self.scene(index)?;
        let gains = self.frame_gains(index);
        let frames = (0..self.frames)
            .map(|t| {
                let f = render_lidar_bev(&scene, t)?;
                let spec = f.spec().clone();
                BevFeature::new(spec, f.data().scaled(gains[t]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TdaExample {
            seq: FrameSequence::new(frames, scene.ego.clone())?,
            target: ground_truth_bev(&scene, self.frames - 1)?,
        })
    }

    pub fn examples(&self, range: std::ops::Range<u64>) -> Result<Vec<TdaExample>> {
        range.map(|k| self.example(k)).collect()
    }
}
