//! End-to-end run over a scene: per-frame camera BEV and spatial fusion,
//! then temporal fusion across frames.

use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::geometry::{BevFeature, BevSpec};
use crate::lgvt::{lgvt_forward, LgvtParams};
use crate::synthetic::{ground_truth_bev, render_image_features, render_lidar_bev, Scene};
use crate::tda::{temporal_fuse, FrameSequence, TdaParams};
use crate::tensor::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    /// Number of leading scene frames to use.
    pub frames: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            points: 4,
            frames: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub lgvt: LgvtParams,
    pub fusion: FusionParams,
    pub tda: TdaParams,
}

impl PipelineParams {
    /// Untrained parameters whose attention layers sample at their
    /// reference points, with plain averaging fusion.
    pub fn identity_style(channels: usize, config: &PipelineConfig) -> Result<Self> {
        let mut rng = seeded_rng(config.seed);
        Ok(Self {
            lgvt: LgvtParams::identity_style(
                channels,
                config.layers,
                config.heads,
                config.points,
                &mut rng,
            )?,
            fusion: FusionParams::average(channels),
            tda: TdaParams::identity_style(channels, config.heads, config.points, &mut rng)?,
        })
    }
}

/// Stage outputs at the last frame used.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub b_lidar: BevFeature,
    pub b_camera: BevFeature,
    pub fused: BevFeature,
    pub temporal: BevFeature,
    pub truth: BevFeature,
}

impl PipelineOutput {
    pub fn stages(&self) -> [(&'static str, &BevFeature); 4] {
        [
            ("b_lidar", &self.b_lidar),
            ("b_camera", &self.b_camera),
            ("fused", &self.fused),
            ("temporal", &self.temporal),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.stages().iter().all(|(_, f)| f.data().is_finite())
    }
}

/// Replaces the scene's pillar heights.
pub fn with_heights(scene: &Scene, heights: Vec<f64>) -> Result<Scene> {
    let s = &scene.spec;
    let spec = BevSpec::new(s.cells_x, s.cells_y, s.cell_size, s.origin, heights)?;
    Scene::new(
        scene.seed,
        spec,
        scene.image_size,
        scene.rig.clone(),
        scene.ego.clone(),
        scene.boxes.clone(),
        scene.channels,
    )
}

pub fn run_pipeline(
    scene: &Scene,
    config: &PipelineConfig,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    if config.frames == 0 || config.frames > scene.frames() {
        return Err(Error::InvalidArgument(format!(
            "requested {} frames, scene has {}",
            config.frames,
            scene.frames()
        )));
    }
    if scene.rig.is_empty() {
        return Err(Error::InvalidArgument(
            "the pipeline needs at least one camera".into(),
        ));
    }
    let spec = &scene.spec;
    let mut fused_frames = Vec::with_capacity(config.frames);
    let mut last = None;
    for t in 0..config.frames {
        let b_lidar = render_lidar_bev(scene, t)?;
        let images = render_image_features(scene, t)?;
        let b_camera = lgvt_forward(&b_lidar, &images, spec, &params.lgvt)?;
        let fused = params.fusion.apply(&b_lidar, &b_camera)?;
        fused_frames.push(fused.clone());
        last = Some((b_lidar, b_camera, fused));
    }
    let (b_lidar, b_camera, fused) = last.expect("at least one frame");
    let seq = FrameSequence::new(fused_frames, scene.ego[..config.frames].to_vec())?;
    let temporal = temporal_fuse(&seq, &params.tda)?;
    Ok(PipelineOutput {
        b_lidar,
        b_camera,
        fused,
        temporal,
        truth: ground_truth_bev(scene, config.frames - 1)?,
    })
}
