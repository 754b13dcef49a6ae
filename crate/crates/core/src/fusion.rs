//! LiDAR-camera BEV fusion: channel concat followed by 3x3 convolution.

use crate::error::{shape_err, Result};
use crate::geometry::BevFeature;
use crate::tensor::{concat_channels, conv2d, ConvParams, ParamRng};

pub fn fuse_spatial(
    b_lidar: &BevFeature,
    b_camera: &BevFeature,
    conv: &ConvParams,
) -> Result<BevFeature> {
    if !b_lidar.same_layout(b_camera) {
        return shape_err("LiDAR and camera BEV layouts differ");
    }
    let c = b_lidar.channels();
    if conv.in_channels() != 2 * c {
        return shape_err(format!(
            "fusion conv takes {} channels, concat has {}",
            conv.in_channels(),
            2 * c
        ));
    }
    let cat = concat_channels(&b_lidar.to_chw(), &b_camera.to_chw())?;
    BevFeature::from_chw(b_lidar.spec(), &conv2d(&cat, conv)?)
}

/// Fusion stack: the first conv maps `2C -> C`, any further convs `C -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub convs: Vec<ConvParams>,
}

impl FusionParams {
    pub fn init(channels: usize, layers: usize, rng: &mut ParamRng) -> Self {
        let mut convs = vec![ConvParams::init(channels, 2 * channels, rng)];
        convs.extend((1..layers).map(|_| ConvParams::init(channels, channels, rng)));
        Self { convs }
    }

    /// Single conv averaging the LiDAR and camera blocks at the center tap.
    pub fn average(channels: usize) -> Self {
        Self {
            convs: vec![ConvParams::block_average(channels, 2)],
        }
    }

    pub fn apply(&self, b_lidar: &BevFeature, b_camera: &BevFeature) -> Result<BevFeature> {
        let (first, rest) = self.convs.split_first().ok_or_else(|| {
            crate::Error::InvalidArgument("fusion needs at least one conv".into())
        })?;
        let mut f = fuse_spatial(b_lidar, b_camera, first)?;
        for conv in rest {
            f = BevFeature::from_chw(f.spec(), &conv2d(&f.to_chw(), conv)?)?;
        }
        Ok(f)
    }
}
