//! Camera projection, BEV grid coordinates, planar ego motion and BEV warping.
//!
//! BEV tensors are stored `cells_x x cells_y x C`. When a BEV map is handed
//! to the image-space kernels it is viewed as a `C x cells_y x cells_x` map,
//! so cell `(i, j)` sits at pixel coordinate `(x, y) = (i, j)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{sample_backward_into, sample_into, Tensor};

const ORTHONORMAL_TOL: f64 = 1e-9;
/// Minimum camera-frame depth for a projection to count as valid.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
    width: usize,
    height: usize,
}

impl CameraModel {
    /// `extrinsics` maps homogeneous points of the BEV/world frame into the
    /// camera frame (x right, y down, z forward).
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (fx, fy) = (intrinsics[(0, 0)], intrinsics[(1, 1)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if intrinsics[(0, 1)] != 0.0
            || intrinsics[(1, 0)] != 0.0
            || intrinsics.row(2) != nalgebra::RowVector3::new(0.0, 0.0, 1.0)
        {
            return Err(Error::InvalidArgument(
                "intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]".into(),
            ));
        }
        if extrinsics.row(3) != nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0) {
            return Err(Error::InvalidArgument(
                "extrinsics bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        let r = extrinsics.fixed_view::<3, 3>(0, 0);
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(dev <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "extrinsic rotation is not orthonormal (deviation {dev:e})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "image extents must be positive".into(),
            ));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    pub fn from_pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsics: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, extrinsics, width, height)
    }

    /// Camera at `eye` whose optical axis passes through `target`. `up` fixes
    /// the roll; image rows grow against it.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidArgument(
                "look_at: up is parallel to the view direction".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::from_pinhole(fx, fy, cx, cy, ext, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Same camera with extrinsics `self.extrinsics * frame_to_self`.
    pub fn composed(&self, frame_to_self: &Matrix4<f64>) -> Result<Self> {
        Self::new(
            self.intrinsics,
            self.extrinsics * frame_to_self,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

pub fn project_point(cam: &CameraModel, p_world: &Vector3<f64>) -> Projection {
    let p_cam = cam.extrinsics * Vector4::new(p_world.x, p_world.y, p_world.z, 1.0);
    let depth = p_cam.z;
    let img = cam.intrinsics * Vector3::new(p_cam.x, p_cam.y, p_cam.z);
    let u = img.x / img.z;
    let v = img.y / img.z;
    let valid = depth > MIN_DEPTH
        && u >= 0.0
        && v >= 0.0
        && u <= (cam.width - 1) as f64
        && v <= (cam.height - 1) as f64;
    Projection { u, v, depth, valid }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    /// Meters per cell.
    pub cell_size: f64,
    /// Metric `(x, y)` of the center of cell `(0, 0)`.
    pub origin: [f64; 2],
    /// Pillar heights in meters, strictly increasing.
    pub heights: Vec<f64>,
}

impl BevSpec {
    pub fn new(
        cells_x: usize,
        cells_y: usize,
        cell_size: f64,
        origin: [f64; 2],
        heights: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            cells_x,
            cells_y,
            cell_size,
            origin,
            heights,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square grid of `cells` cells centered on the ego origin.
    pub fn centered(cells: usize, cell_size: f64, heights: Vec<f64>) -> Result<Self> {
        let o = -(cells as f64 - 1.0) * 0.5 * cell_size;
        Self::new(cells, cells, cell_size, [o, o], heights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells_x == 0 || self.cells_y == 0 {
            return Err(Error::InvalidArgument(
                "BEV grid must have at least one cell".into(),
            ));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.heights.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one pillar height is required".into(),
            ));
        }
        if self.heights.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(format!(
                "pillar heights must be strictly increasing: {:?}",
                self.heights
            )));
        }
        Ok(())
    }

    pub fn mid_height(&self) -> f64 {
        self.heights.iter().sum::<f64>() / self.heights.len() as f64
    }

    /// Fractional cell coordinates of a metric point.
    pub fn world_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin[0]) / self.cell_size,
            (y - self.origin[1]) / self.cell_size,
        )
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }
}

/// `n` evenly spaced pillar heights spanning `[low, high]` (just `low` when
/// `n == 1`).
pub fn even_heights(n: usize, low: f64, high: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![low],
        _ => (0..n)
            .map(|k| low + (high - low) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn bev_cell_to_world(spec: &BevSpec, i: usize, j: usize, h: f64) -> Result<Vector3<f64>> {
    if i >= spec.cells_x || j >= spec.cells_y {
        return Err(Error::OutOfRange(format!(
            "cell ({i}, {j}) outside {}x{} grid",
            spec.cells_x, spec.cells_y
        )));
    }
    Ok(Vector3::new(
        spec.origin[0] + i as f64 * spec.cell_size,
        spec.origin[1] + j as f64 * spec.cell_size,
        h,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn ego_to_world(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }

    pub fn world_to_ego(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let tx = -(c * self.x + s * self.y);
        let ty = -(-s * self.x + c * self.y);
        Matrix3::new(c, s, tx, -s, c, ty, 0.0, 0.0, 1.0)
    }

    /// World-to-ego as a 4x4 rigid transform (z unchanged).
    pub fn world_to_ego_4(&self) -> Matrix4<f64> {
        lift_se2(&self.world_to_ego())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

pub fn lift_se2(m: &Matrix3<f64>) -> Matrix4<f64> {
    Matrix4::new(
        m[(0, 0)],
        m[(0, 1)],
        0.0,
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        0.0,
        m[(1, 2)],
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Maps points expressed in the `pose_from` ego frame into the `pose_to`
/// ego frame.
pub fn ego_motion_matrix(pose_from: &EgoPose, pose_to: &EgoPose) -> Matrix3<f64> {
    if pose_from == pose_to {
        return Matrix3::identity();
    }
    pose_to.world_to_ego() * pose_from.ego_to_world()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    spec: BevSpec,
    data: Tensor,
}

impl BevFeature {
    pub fn new(spec: BevSpec, data: Tensor) -> Result<Self> {
        match data.shape() {
            [x, y, _] if *x == spec.cells_x && *y == spec.cells_y => Ok(Self { spec, data }),
            s => shape_err(format!(
                "BEV tensor {s:?} does not match a {}x{} grid",
                spec.cells_x, spec.cells_y
            )),
        }
    }

    pub fn zeros(spec: &BevSpec, channels: usize) -> Self {
        Self {
            data: Tensor::zeros(&[spec.cells_x, spec.cells_y, channels]),
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &BevSpec {
        &self.spec
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels();
        let o = (i * self.spec.cells_y + j) * c;
        &self.data.data()[o..o + c]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let c = self.channels();
        let o = (i * self.spec.cells_y + j) * c;
        &mut self.data.data_mut()[o..o + c]
    }

    /// `C x cells_y x cells_x` view for the image-space kernels.
    pub fn to_chw(&self) -> Tensor {
        let (nx, ny, c) = (self.spec.cells_x, self.spec.cells_y, self.channels());
        let src = self.data.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..c {
                    out[(k * ny + j) * nx + i] = src[(i * ny + j) * c + k];
                }
            }
        }
        Tensor::new(vec![c, ny, nx], out).expect("consistent extents")
    }

    pub fn from_chw(spec: &BevSpec, chw: &Tensor) -> Result<Self> {
        let (c, ny, nx) = match chw.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return shape_err(format!("expected C x H x W, got {s:?}")),
        };
        if (nx, ny) != (spec.cells_x, spec.cells_y) {
            return shape_err(format!(
                "map {ny}x{nx} does not match {}x{} grid",
                spec.cells_y, spec.cells_x
            ));
        }
        let src = chw.data();
        let mut out = vec![0.0; src.len()];
        for k in 0..c {
            for j in 0..ny {
                for i in 0..nx {
                    out[(i * ny + j) * c + k] = src[(k * ny + j) * nx + i];
                }
            }
        }
        Self::new(spec.clone(), Tensor::new(vec![nx, ny, c], out)?)
    }

    pub fn same_layout(&self, other: &BevFeature) -> bool {
        self.spec == other.spec && self.data.shape() == other.data.shape()
    }
}

/// Affine map from output cell coordinates to source cell coordinates for
/// inverse warping by `m`.
fn source_cell_map(spec: &BevSpec, m: &Matrix3<f64>) -> Result<([[f64; 2]; 2], [f64; 2])> {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let det = a * d - b * c;
    if !(det.abs() > 1e-12) || !det.is_finite() {
        return Err(Error::Singular(format!(
            "rotation block determinant {det:e}"
        )));
    }
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let (tx, ty) = (m[(0, 2)], m[(1, 2)]);
    let t_inv = [
        -(inv[0][0] * tx + inv[0][1] * ty),
        -(inv[1][0] * tx + inv[1][1] * ty),
    ];
    let o = spec.origin;
    let shift = [
        (inv[0][0] * o[0] + inv[0][1] * o[1] + t_inv[0] - o[0]) / spec.cell_size,
        (inv[1][0] * o[0] + inv[1][1] * o[1] + t_inv[1] - o[1]) / spec.cell_size,
    ];
    Ok((inv, shift))
}

/// Inverse warp: every output cell samples the input at the preimage of its
/// center under `m` (bilinear, zero padding).
pub fn warp_bev(feature: &BevFeature, m: &Matrix3<f64>) -> Result<BevFeature> {
    let spec = feature.spec();
    let (rot, shift) = source_cell_map(spec, m)?;
    let src = feature.to_chw();
    let (nx, ny, c) = (spec.cells_x, spec.cells_y, feature.channels());
    let mut out = BevFeature::zeros(spec, c);
    for i in 0..nx {
        for j in 0..ny {
            let (fi, fj) = (i as f64, j as f64);
            let sx = rot[0][0] * fi + rot[0][1] * fj + shift[0];
            let sy = rot[1][0] * fi + rot[1][1] * fj + shift[1];
            sample_into(src.data(), ny, nx, 0..c, sx, sy, out.cell_mut(i, j));
        }
    }
    Ok(out)
}

/// Adjoint of [`warp_bev`] with respect to the input feature.
pub fn warp_bev_adjoint(grad_out: &BevFeature, m: &Matrix3<f64>) -> Result<BevFeature> {
    let spec = grad_out.spec();
    let (rot, shift) = source_cell_map(spec, m)?;
    let (nx, ny, c) = (spec.cells_x, spec.cells_y, grad_out.channels());
    let mut grad_chw = vec![0.0; nx * ny * c];
    let dummy = vec![0.0; nx * ny * c];
    for i in 0..nx {
        for j in 0..ny {
            let (fi, fj) = (i as f64, j as f64);
            let sx = rot[0][0] * fi + rot[0][1] * fj + shift[0];
            let sy = rot[1][0] * fi + rot[1][1] * fj + shift[1];
            sample_backward_into(
                &dummy,
                &mut grad_chw,
                ny,
                nx,
                0..c,
                sx,
                sy,
                grad_out.cell(i, j),
            );
        }
    }
    BevFeature::from_chw(spec, &Tensor::new(vec![c, ny, nx], grad_chw)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;
    use std::f64::consts::PI;

    fn spec8() -> BevSpec {
        BevSpec::new(8, 6, 0.5, [0.0, 0.0], vec![1.0]).unwrap()
    }

    #[test]
    fn cell_to_world() {
        let s = BevSpec::new(10, 10, 0.5, [0.0, 0.0], vec![1.0]).unwrap();
        assert_eq!(
            bev_cell_to_world(&s, 0, 0, 1.0).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        assert_eq!(
            bev_cell_to_world(&s, 4, 2, 0.3).unwrap(),
            Vector3::new(2.0, 1.0, 0.3)
        );
        assert!(matches!(
            bev_cell_to_world(&s, 10, 0, 0.0),
            Err(Error::OutOfRange(_))
        ));
        let fine = BevSpec::new(4, 4, 0.075, [0.0, 0.0], vec![1.0]).unwrap();
        let p = bev_cell_to_world(&fine, 3, 1, 0.0).unwrap();
        assert!((p.x - 0.225).abs() < 1e-15 && (p.y - 0.075).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(BevSpec::new(4, 4, 0.5, [0.0, 0.0], vec![]).is_err());
        assert!(BevSpec::new(4, 4, 0.5, [0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(BevSpec::new(0, 4, 0.5, [0.0, 0.0], vec![1.0]).is_err());
        assert!(BevSpec::new(4, 4, -0.5, [0.0, 0.0], vec![1.0]).is_err());
        assert_eq!(even_heights(4, 0.5, 2.0), vec![0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam =
            CameraModel::from_pinhole(50.0, 60.0, 31.0, 20.0, Matrix4::identity(), 64, 48).unwrap();
        let p = project_point(&cam, &Vector3::new(0.0, 0.0, 5.0));
        assert_eq!((p.u, p.v, p.depth, p.valid), (31.0, 20.0, 5.0, true));
        let behind = project_point(&cam, &Vector3::new(0.0, 0.0, -1.0));
        assert!(!behind.valid);
        assert_eq!(behind.depth, -1.0);
        let off = project_point(&cam, &Vector3::new(100.0, 0.0, 1.0));
        assert!(!off.valid && off.u > 63.0);
    }

    #[test]
    fn camera_validation() {
        let mut bad = Matrix4::identity();
        bad[(0, 0)] = 1.1;
        assert!(CameraModel::from_pinhole(1.0, 1.0, 0.0, 0.0, bad, 4, 4).is_err());
        assert!(CameraModel::from_pinhole(-1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 4, 4).is_err());
        let mut row = Matrix4::identity();
        row[(3, 0)] = 0.1;
        assert!(CameraModel::from_pinhole(1.0, 1.0, 0.0, 0.0, row, 4, 4).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let cam = CameraModel::look_at(
            Vector3::new(-10.0, 2.0, 20.0),
            Vector3::new(1.0, -1.0, 0.5),
            Vector3::z(),
            40.0,
            40.0,
            32.0,
            30.0,
            64,
            64,
        )
        .unwrap();
        let p = project_point(&cam, &Vector3::new(1.0, -1.0, 0.5));
        assert!((p.u - 32.0).abs() < 1e-9 && (p.v - 30.0).abs() < 1e-9 && p.valid);
    }

    #[test]
    fn projection_scale_consistency() {
        let cam =
            CameraModel::from_pinhole(50.0, 50.0, 32.0, 32.0, Matrix4::identity(), 64, 64).unwrap();
        let p = Vector3::new(0.3, -0.2, 4.0);
        let a = project_point(&cam, &p);
        let b = project_point(&cam, &(p * 2.5));
        assert!((a.u - b.u).abs() < 1e-12 && (a.v - b.v).abs() < 1e-12);
        assert!((b.depth - 2.5 * a.depth).abs() < 1e-12);
    }

    #[test]
    fn ego_motion_examples() {
        let o = EgoPose::new(0.0, 0.0, 0.0);
        assert_eq!(ego_motion_matrix(&o, &o), Matrix3::identity());
        let m = ego_motion_matrix(&o, &EgoPose::new(1.0, 0.0, 0.0));
        let p = m * Vector3::new(2.0, 0.0, 1.0);
        assert!((p.x - 1.0).abs() < 1e-15 && p.y.abs() < 1e-15);
        let m = ego_motion_matrix(&o, &EgoPose::new(0.0, 0.0, PI / 2.0));
        let p = m * Vector3::new(1.0, 0.0, 1.0);
        assert!(p.x.abs() < 1e-15 && (p.y + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ego_motion_inverse_and_composition() {
        let mut rng = seeded_rng(4);
        let mut pose = || {
            EgoPose::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-4.0..4.0),
            )
        };
        for _ in 0..50 {
            let (a, b, c) = (pose(), pose(), pose());
            let id = ego_motion_matrix(&a, &b) * ego_motion_matrix(&b, &a);
            assert!((id - Matrix3::identity()).abs().max() < 1e-12);
            let chained = ego_motion_matrix(&b, &c) * ego_motion_matrix(&a, &b);
            let direct = ego_motion_matrix(&a, &c);
            assert!((chained - direct).abs().max() < 1e-12);
        }
    }

    #[test]
    fn yaw_is_normalized() {
        assert_eq!(EgoPose::new(0.0, 0.0, PI).yaw, PI);
        assert_eq!(EgoPose::new(0.0, 0.0, -PI).yaw, PI);
        assert!((EgoPose::new(0.0, 0.0, 3.0 * PI / 2.0).yaw + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn chw_round_trip() {
        let mut rng = seeded_rng(9);
        let s = spec8();
        let f =
            BevFeature::new(s.clone(), Tensor::random_uniform(&[8, 6, 3], 1.0, &mut rng)).unwrap();
        let chw = f.to_chw();
        assert_eq!(chw.get(&[2, 4, 5]), f.cell(5, 4)[2]);
        assert_eq!(BevFeature::from_chw(&s, &chw).unwrap(), f);
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let mut rng = seeded_rng(1);
        let s = BevSpec::centered(7, 0.075, vec![1.0]).unwrap();
        let f = BevFeature::new(s, Tensor::random_uniform(&[7, 7, 2], 1.0, &mut rng)).unwrap();
        let w = warp_bev(&f, &Matrix3::identity()).unwrap();
        assert_eq!(w.data().data(), f.data().data());
    }

    #[test]
    fn one_cell_translation_shifts_content() {
        let mut rng = seeded_rng(2);
        let s = spec8();
        let f =
            BevFeature::new(s.clone(), Tensor::random_uniform(&[8, 6, 2], 1.0, &mut rng)).unwrap();
        let m = Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let w = warp_bev(&f, &m).unwrap();
        for j in 0..6 {
            assert!(w.cell(0, j).iter().all(|&v| v == 0.0));
            for i in 1..8 {
                assert_eq!(w.cell(i, j), f.cell(i - 1, j));
            }
        }
    }

    #[test]
    fn singular_warp_rejected() {
        let f = BevFeature::zeros(&spec8(), 1);
        let m = Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(warp_bev(&f, &m), Err(Error::Singular(_))));
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        let mut rng = seeded_rng(12);
        let s = BevSpec::centered(9, 0.5, vec![1.0]).unwrap();
        let m = ego_motion_matrix(
            &EgoPose::new(0.0, 0.0, 0.0),
            &EgoPose::new(0.37, -0.61, 0.3),
        );
        let x =
            BevFeature::new(s.clone(), Tensor::random_uniform(&[9, 9, 2], 1.0, &mut rng)).unwrap();
        let y = BevFeature::new(s, Tensor::random_uniform(&[9, 9, 2], 1.0, &mut rng)).unwrap();
        let ax = warp_bev(&x, &m).unwrap();
        let aty = warp_bev_adjoint(&y, &m).unwrap();
        let lhs: f64 = ax
            .data()
            .data()
            .iter()
            .zip(y.data().data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .data()
            .iter()
            .zip(aty.data().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
