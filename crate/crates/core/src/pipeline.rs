//! Scene preparation shared by the command line and the tests.

use log::warn;

use crate::cloud::{estimate_normals, grid_downsample, sample_blocks, BlockParams, PointCloud};
use crate::superpoint::{segment_scene, VccsParams};
use crate::train::TrainBlock;
use crate::{Config, Result};

/// Grid downsampling followed by normal estimation.
pub fn preprocess(cloud: &PointCloud, cfg: &Config) -> Result<PointCloud> {
    cloud.validate()?;
    let down = grid_downsample(cloud, cfg.cell)?;
    let (out, degenerate) = estimate_normals(&down, cfg.normals_k)?;
    if degenerate > 0 {
        warn!("{}: {degenerate} points had a degenerate neighbourhood", cloud.scene_id);
    }
    Ok(out)
}

pub fn vccs_params(cfg: &Config) -> VccsParams {
    VccsParams {
        voxel_res: cfg.voxel_res,
        seed_res: cfg.seed_res,
        ..VccsParams::default()
    }
}

/// Superpoint ids for a preprocessed cloud.
pub fn superpoints(cloud: &PointCloud, cfg: &Config) -> Result<Vec<u32>> {
    let road = cfg
        .road_ransac
        .then_some((cfg.ransac_iters, cfg.ransac_thresh, cfg.seed));
    Ok(segment_scene(cloud, &vccs_params(cfg), cfg.gamma, road)?.sp_id)
}

pub fn block_params(cfg: &Config) -> BlockParams {
    BlockParams {
        block_xy: cfg.block,
        pts: cfg.pts,
        ..BlockParams::default()
    }
}

/// Samples the training blocks of every scene. Scene `i` uses seed
/// `cfg.seed + i`.
pub fn training_blocks(scenes: &[(PointCloud, Vec<u32>)], cfg: &Config) -> Result<Vec<TrainBlock>> {
    let params = block_params(cfg);
    let mut out = Vec::new();
    for (i, (cloud, sp)) in scenes.iter().enumerate() {
        for b in sample_blocks(cloud, Some(sp), &params, cfg.seed.wrapping_add(i as u64))? {
            out.push(TrainBlock::new(b, cfg.res)?);
        }
    }
    Ok(out)
}
