//! LiDAR-guided view transformer: lifts multi-view image features into the
//! BEV grid.
//!
//! The camera BEV starts from pillar sampling (each cell's pillar points are
//! projected into every view, the per-view maximum over heights is kept and
//! averaged over the views that saw the cell). Each layer then builds
//! queries from the LiDAR BEV and the current camera BEV and refines the
//! camera BEV with deformable cross-attention into the image features.

use rayon::prelude::*;

use crate::deform_attn::{DeformAttnParams, ProjectedValues};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{bev_cell_to_world, project_point, BevFeature, BevSpec, CameraModel};
use crate::tensor::{sample_into, LinearParams, ParamRng, Tensor};

#[derive(Debug, Clone)]
pub struct ImageFeatureSet {
    views: Vec<Tensor>,
    cameras: Vec<CameraModel>,
}

impl ImageFeatureSet {
    pub fn new(views: Vec<Tensor>, cameras: Vec<CameraModel>) -> Result<Self> {
        if views.len() != cameras.len() {
            return shape_err(format!(
                "{} feature maps for {} cameras",
                views.len(),
                cameras.len()
            ));
        }
        let mut channels = None;
        for (k, (v, cam)) in views.iter().zip(&cameras).enumerate() {
            let (c, h, w) = match v.shape() {
                [c, h, w] => (*c, *h, *w),
                s => return shape_err(format!("view {k} must be C x H x W, got {s:?}")),
            };
            if (h, w) != (cam.height(), cam.width()) {
                return shape_err(format!(
                    "view {k} is {h}x{w} but its camera expects {}x{}",
                    cam.height(),
                    cam.width()
                ));
            }
            if *channels.get_or_insert(c) != c {
                return shape_err(format!(
                    "view {k} has {c} channels, expected {}",
                    channels.unwrap()
                ));
            }
        }
        Ok(Self { views, cameras })
    }

    pub fn views(&self) -> &[Tensor] {
        &self.views
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.views.first().map(|v| v.shape()[0])
    }

    /// Adds one more view.
    pub fn with_view(mut self, view: Tensor, camera: CameraModel) -> Result<Self> {
        self.views.push(view);
        self.cameras.push(camera);
        Self::new(self.views, self.cameras)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgvtLayerParams {
    /// `2C -> C`, applied to `[lidar | camera]`.
    pub query_reduce: LinearParams,
    pub attn: DeformAttnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgvtParams {
    pub layers: Vec<LgvtLayerParams>,
}

impl LgvtParams {
    pub fn init(
        channels: usize,
        layers: usize,
        heads: usize,
        points: usize,
        rng: &mut ParamRng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidArgument(
                "LGVT needs at least one layer".into(),
            ));
        }
        let layers = (0..layers)
            .map(|_| {
                Ok(LgvtLayerParams {
                    query_reduce: LinearParams::init(channels, 2 * channels, rng),
                    attn: DeformAttnParams::init(channels, heads, points, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Seeded query reduction with identity-style attention in every layer.
    pub fn identity_style(
        channels: usize,
        layers: usize,
        heads: usize,
        points: usize,
        rng: &mut ParamRng,
    ) -> Result<Self> {
        let mut p = Self::init(channels, layers, heads, points, rng)?;
        for l in &mut p.layers {
            l.attn = DeformAttnParams::identity(channels, heads, points)?;
        }
        Ok(p)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

fn check_images(images: &ImageFeatureSet) -> Result<usize> {
    images
        .channels()
        .ok_or_else(|| Error::InvalidArgument("at least one camera view is required".into()))
}

/// Pillar-sampled camera BEV.
pub fn init_camera_bev(spec: &BevSpec, images: &ImageFeatureSet) -> Result<BevFeature> {
    spec.validate()?;
    let c = check_images(images)?;
    let ny = spec.cells_y;
    let mut out = vec![0.0; spec.num_cells() * c];
    out.par_chunks_mut(c).enumerate().for_each(|(n, cell)| {
        let (i, j) = (n / ny, n % ny);
        let mut view_max = vec![0.0f64; c];
        let mut sample = vec![0.0; c];
        let mut hits = 0usize;
        for (view, cam) in images.views.iter().zip(&images.cameras) {
            let mut seen = false;
            for &h in &spec.heights {
                let p = bev_cell_to_world(spec, i, j, h).expect("cell in range");
                let proj = project_point(cam, &p);
                if !proj.valid {
                    continue;
                }
                sample_into(
                    view.data(),
                    cam.height(),
                    cam.width(),
                    0..c,
                    proj.u,
                    proj.v,
                    &mut sample,
                );
                if seen {
                    for (m, s) in view_max.iter_mut().zip(&sample) {
                        *m = m.max(*s);
                    }
                } else {
                    view_max.copy_from_slice(&sample);
                    seen = true;
                }
            }
            if seen {
                hits += 1;
                for (o, m) in cell.iter_mut().zip(&view_max) {
                    *o += m;
                }
            }
        }
        if hits > 0 {
            let inv = 1.0 / hits as f64;
            cell.iter_mut().for_each(|v| *v *= inv);
        }
    });
    BevFeature::new(
        spec.clone(),
        Tensor::new(vec![spec.cells_x, spec.cells_y, c], out)?,
    )
}

/// Per-cell `reduce([lidar | camera])`.
pub fn guided_query(
    b_lidar: &BevFeature,
    b_cam_prev: &BevFeature,
    reduce: &LinearParams,
) -> Result<Tensor> {
    if !b_lidar.same_layout(b_cam_prev) {
        return shape_err("LiDAR and camera BEV layouts differ");
    }
    let c = b_lidar.channels();
    if reduce.in_dim() != 2 * c || reduce.out_dim() != c {
        return shape_err(format!(
            "query reduction is {}x{}, expected {c}x{}",
            reduce.out_dim(),
            reduce.in_dim(),
            2 * c
        ));
    }
    Ok(reduce_pairs(b_lidar.data(), b_cam_prev.data(), reduce))
}

/// Applies `reduce` to the per-cell concatenation of two `X x Y x C` tensors.
pub(crate) fn reduce_pairs(first: &Tensor, second: &Tensor, reduce: &LinearParams) -> Tensor {
    let shape = first.shape();
    let c = shape[2];
    let mut out = vec![0.0; first.len()];
    out.par_chunks_mut(c)
        .zip(first.data().par_chunks(c).zip(second.data().par_chunks(c)))
        .for_each(|(o, (a, b))| {
            let mut cat = Vec::with_capacity(2 * c);
            cat.extend_from_slice(a);
            cat.extend_from_slice(b);
            reduce.apply_into(&cat, o);
        });
    Tensor::new(shape.to_vec(), out).expect("same extents")
}

/// One deformable cross-attention layer over all views.
pub fn lgvt_layer(
    q_guided: &Tensor,
    images: &ImageFeatureSet,
    spec: &BevSpec,
    attn: &DeformAttnParams,
) -> Result<BevFeature> {
    spec.validate()?;
    let c = check_images(images)?;
    if q_guided.shape() != [spec.cells_x, spec.cells_y, attn.channels()] {
        return shape_err(format!(
            "queries {:?} do not match a {}x{}x{} grid",
            q_guided.shape(),
            spec.cells_x,
            spec.cells_y,
            attn.channels()
        ));
    }
    let projected: Vec<ProjectedValues> = images
        .views
        .iter()
        .map(|v| attn.project_values(v))
        .collect::<Result<_>>()?;
    let mid = spec.mid_height();
    let ny = spec.cells_y;
    let mut out = vec![0.0; spec.num_cells() * c];
    out.par_chunks_mut(c)
        .zip(q_guided.data().par_chunks(c))
        .enumerate()
        .for_each(|(n, (cell, q))| {
            let (i, j) = (n / ny, n % ny);
            let p = bev_cell_to_world(spec, i, j, mid).expect("cell in range");
            let mut tmp = vec![0.0; c];
            let mut hits = 0usize;
            for (vals, cam) in projected.iter().zip(&images.cameras) {
                let proj = project_point(cam, &p);
                if !proj.valid {
                    continue;
                }
                let r = [
                    normalized(proj.u, cam.width()),
                    normalized(proj.v, cam.height()),
                ];
                attn.attend_into(q, r, vals, &mut tmp);
                hits += 1;
                for (o, t) in cell.iter_mut().zip(&tmp) {
                    *o += t;
                }
            }
            if hits > 0 {
                let inv = 1.0 / hits as f64;
                cell.iter_mut().for_each(|v| *v *= inv);
            }
        });
    BevFeature::new(
        spec.clone(),
        Tensor::new(vec![spec.cells_x, spec.cells_y, c], out)?,
    )
}

fn normalized(coord: f64, extent: usize) -> f64 {
    if extent > 1 {
        coord / (extent - 1) as f64
    } else {
        0.0
    }
}

pub fn lgvt_forward(
    b_lidar: &BevFeature,
    images: &ImageFeatureSet,
    spec: &BevSpec,
    params: &LgvtParams,
) -> Result<BevFeature> {
    if params.layers.is_empty() {
        return Err(Error::InvalidArgument(
            "LGVT needs at least one layer".into(),
        ));
    }
    if b_lidar.spec() != spec {
        return shape_err("LiDAR BEV spec differs from the requested grid");
    }
    let mut b_cam = init_camera_bev(spec, images)?;
    for layer in &params.layers {
        let q = guided_query(b_lidar, &b_cam, &layer.query_reduce)?;
        b_cam = lgvt_layer(&q, images, spec, &layer.attn)?;
    }
    Ok(b_cam)
}
