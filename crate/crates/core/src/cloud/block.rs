use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NormFrame, PointCloud, FEATURE_DIM};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockParams {
    /// Tile side on the xy plane, meters.
    pub block_xy: f64,
    /// Points per block.
    pub pts: usize,
    /// Tiles with fewer points are dropped.
    pub min_points: usize,
}

impl Default for BlockParams {
    fn default() -> Self {
        Self {
            block_xy: 1.5,
            pts: 4096,
            min_points: 64,
        }
    }
}

/// All points of one xy tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub key: (i64, i64),
    pub indices: Vec<usize>,
    /// Min-max frame over every point of the tile.
    pub frame: NormFrame,
}

/// A fixed-size training sample drawn from one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub tile: (i64, i64),
    /// Indices into the source cloud; may repeat when the tile is small.
    pub point_indices: Vec<usize>,
    /// `pts × 12`: block xyz, RGB, normal, scene xyz.
    pub features: Matrix,
    /// Voxelization coordinates in `[0,1]³` (equal to feature columns 0..3).
    pub norm_coords: Vec<[f64; 3]>,
    pub sp_ids: Vec<u32>,
    pub gt_labels: Option<Vec<u32>>,
    pub frame: NormFrame,
}

impl Block {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

/// Partitions the cloud into `block_xy × block_xy` xy tiles anchored at the
/// scene minimum. Tiles come back in row-major key order.
pub fn tile_points(cloud: &PointCloud, block_xy: f64) -> Vec<Tile> {
    let (lo, _) = cloud.bounds();
    let mut tiles: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, c) in cloud.coords.iter().enumerate() {
        let key = (
            ((c[0] - lo[0]) / block_xy).floor() as i64,
            ((c[1] - lo[1]) / block_xy).floor() as i64,
        );
        tiles.entry(key).or_default().push(i);
    }
    tiles
        .into_iter()
        .map(|(key, indices)| {
            let frame = NormFrame::from_points(indices.iter().map(|&i| &cloud.coords[i]));
            Tile { key, indices, frame }
        })
        .collect()
}

/// Builds the 12-channel features for `indices` of `cloud`.
///
/// Columns 0..3 hold coordinates normalized by `block_frame`, 3..6 RGB (zero
/// when the cloud has no colors), 6..9 normals and 9..12 coordinates
/// normalized by `scene_frame`.
pub fn assemble_features(
    cloud: &PointCloud,
    indices: &[usize],
    block_frame: &NormFrame,
    scene_frame: &NormFrame,
) -> Result<Matrix> {
    let normals = cloud.normals.as_ref().ok_or(Error::MissingNormals)?;
    let mut out = Matrix::zeros(indices.len(), FEATURE_DIM);
    for (row, &i) in indices.iter().enumerate() {
        let r = out.row_mut(row);
        r[0..3].copy_from_slice(&block_frame.apply(&cloud.coords[i]));
        if let Some(colors) = &cloud.colors {
            r[3..6].copy_from_slice(&colors[i]);
        }
        r[6..9].copy_from_slice(&normals[i]);
        r[9..12].copy_from_slice(&scene_frame.apply(&cloud.coords[i]));
    }
    Ok(out)
}

/// Draws `pts` indices from a tile: without replacement when the tile is
/// large enough, otherwise every tile point once and the rest with replacement.
pub(crate) fn draw_indices(tile: &[usize], pts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if tile.len() >= pts {
        index::sample(rng, tile.len(), pts)
            .into_iter()
            .map(|k| tile[k])
            .collect()
    } else {
        let mut out = tile.to_vec();
        while out.len() < pts {
            out.push(tile[rng.random_range(0..tile.len())]);
        }
        out
    }
}

/// Tiles the scene and samples one block from every tile holding at least
/// `min_points` points. `sp_ids`, when given, is the per-point superpoint
/// assignment of the cloud; otherwise every point gets superpoint 0.
pub fn sample_blocks(
    cloud: &PointCloud,
    sp_ids: Option<&[u32]>,
    params: &BlockParams,
    seed: u64,
) -> Result<Vec<Block>> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot sample blocks from an empty cloud"));
    }
    if !(params.block_xy > 0.0) || params.pts == 0 {
        return Err(Error::invalid("block size and point count must be positive"));
    }
    if let Some(sp) = sp_ids {
        if sp.len() != cloud.len() {
            return Err(Error::shape("superpoint ids do not match the cloud"));
        }
    }
    let scene_frame = NormFrame::from_points(cloud.coords.iter());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for tile in tile_points(cloud, params.block_xy) {
        if tile.indices.len() < params.min_points {
            continue;
        }
        let idx = draw_indices(&tile.indices, params.pts, &mut rng);
        blocks.push(build_block(cloud, sp_ids, &tile, idx, &scene_frame)?);
    }
    Ok(blocks)
}

pub(crate) fn build_block(
    cloud: &PointCloud,
    sp_ids: Option<&[u32]>,
    tile: &Tile,
    idx: Vec<usize>,
    scene_frame: &NormFrame,
) -> Result<Block> {
    let features = assemble_features(cloud, &idx, &tile.frame, scene_frame)?;
    let norm_coords = (0..idx.len())
        .map(|r| {
            let row = features.row(r);
            [row[0], row[1], row[2]]
        })
        .collect();
    Ok(Block {
        tile: tile.key,
        sp_ids: idx.iter().map(|&i| sp_ids.map_or(0, |s| s[i])).collect(),
        gt_labels: cloud
            .gt_labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect()),
        point_indices: idx,
        features,
        norm_coords,
        frame: tile.frame,
    })
}
