use crate::cloud::Block;
use crate::network::{Grads, Mode, NetworkParams, Tape};
use crate::tensor::Matrix;
use crate::voxel::{color_jitter, flip_rows, voxelize, ColorJitter, FlipSpec, Trilinear, VoxelGrid};
use crate::{Error, Result};

use super::loss::{normalize_rows, normalize_rows_backward};

/// A block with its interpolation taps precomputed for one grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBlock {
    pub block: Block,
    pub tri: Trilinear,
}

impl TrainBlock {
    pub fn new(block: Block, res: usize) -> Result<Self> {
        let tri = Trilinear::new(&block.norm_coords, res)?;
        Ok(Self { block, tri })
    }

    pub fn res(&self) -> usize {
        self.tri.res
    }
}

/// One pathway's view of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayView {
    pub jitter: ColorJitter,
    /// Color-jittered point features.
    pub input: Matrix,
    /// Voxelized input, before any flip.
    pub grid: VoxelGrid,
    /// Network output mapped back to the unflipped frame.
    pub output: Matrix,
    /// Devoxelized output before normalization.
    pub raw: Matrix,
    /// Unit-norm per-point features.
    pub features: Matrix,
}

/// Both pathways of one block. Pathway 1 is flipped, pathway 2 is not.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayBatch {
    pub flip: FlipSpec,
    pub views: [PathwayView; 2],
}

/// Runs one pathway over a batch of blocks: jitter, voxelize, flip, network,
/// inverse flip, devoxelize, normalize.
pub(crate) fn forward_pathway(
    net: &NetworkParams,
    blocks: &[&TrainBlock],
    jitters: &[ColorJitter],
    flip: FlipSpec,
    mode: Mode,
) -> Result<(Vec<PathwayView>, Option<Tape>)> {
    let res = blocks.first().ok_or_else(|| Error::invalid("empty batch"))?.res();
    let mut inputs = Vec::with_capacity(blocks.len());
    let mut grids = Vec::with_capacity(blocks.len());
    let mut net_in = Vec::with_capacity(blocks.len());
    for (b, &j) in blocks.iter().zip(jitters) {
        if b.res() != res {
            return Err(Error::shape("blocks in one batch use different grid resolutions"));
        }
        let input = color_jitter(&b.block.features, j);
        let grid = voxelize(&input, &b.block.norm_coords, res)?;
        net_in.push(flip_rows(&grid.data, res, flip));
        inputs.push(input);
        grids.push(grid);
    }
    let (outs, tape) = net.forward(&net_in, res, mode)?;
    drop(net_in);
    let views = outs
        .into_iter()
        .zip(blocks)
        .zip(inputs.into_iter().zip(grids))
        .zip(jitters)
        .map(|(((out, b), (input, grid)), &jitter)| {
            let output = flip_rows(&out, res, flip);
            let raw = b.tri.gather(&output);
            let features = normalize_rows(&raw);
            PathwayView {
                jitter,
                input,
                grid,
                output,
                raw,
                features,
            }
        })
        .collect();
    Ok((views, tape))
}

/// Backpropagates per-point feature gradients through normalization,
/// devoxelization, the inverse flip and the network. The voxelized input
/// receives no gradient.
pub(crate) fn backward_pathway(
    net: &NetworkParams,
    tape: &Tape,
    blocks: &[&TrainBlock],
    views: &[PathwayView],
    flip: FlipSpec,
    grad_features: &[Matrix],
) -> Result<Grads> {
    let res = tape.res();
    let grad_out: Vec<Matrix> = blocks
        .iter()
        .zip(views)
        .zip(grad_features)
        .map(|((b, v), g)| {
            let d_raw = normalize_rows_backward(&v.raw, g);
            flip_rows(&b.tri.scatter(&d_raw), res, flip)
        })
        .collect();
    let (grads, dx) = net.backward(tape, &grad_out, false)?;
    debug_assert!(dx.is_none());
    Ok(grads)
}

/// Both pathways of a single block with running normalization statistics.
pub fn pathway_forward(
    block: &TrainBlock,
    net: &NetworkParams,
    flip: FlipSpec,
    jitter1: ColorJitter,
    jitter2: ColorJitter,
) -> Result<PathwayBatch> {
    let (mut v1, _) = forward_pathway(net, &[block], &[jitter1], flip, Mode::Eval)?;
    let (mut v2, _) = forward_pathway(net, &[block], &[jitter2], FlipSpec::NONE, Mode::Eval)?;
    Ok(PathwayBatch {
        flip,
        views: [v1.remove(0), v2.remove(0)],
    })
}
