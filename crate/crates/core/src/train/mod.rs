//! Two-pathway self-training: cluster the current features, then train the
//! network on the resulting superpoint-constrained pseudo-labels.

mod loss;
mod pathway;

use std::path::Path;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub(crate) use loss::{normalize_rows, normalize_rows_backward};
pub use loss::{cluster_loss, two_pathway_loss, PathwayTargets, TwoPathwayLoss};
pub use pathway::{pathway_forward, PathwayBatch, PathwayView, TrainBlock};
use pathway::{backward_pathway, forward_pathway};

use crate::cloud::{build_block, draw_indices, tile_points, NormFrame, PointCloud};
use crate::cluster::{
    assign_labels, class_weights, histogram, kmeans_pp, CentroidSet, SPLIT_SIGMA, UPDATE_SIGMA,
};
use crate::network::{sgd_step, Archive, Mode, NetworkConfig, NetworkParams};
use crate::tensor::{normalize_in_place, Matrix};
use crate::voxel::{voxelize, ColorJitter, FlipSpec, Trilinear};
use crate::{Config, Error, Result};

/// Number of leading batches whose features seed k-means++.
pub const INIT_BATCHES: usize = 50;
/// Upper bound on the points handed to k-means++.
pub const INIT_POOL: usize = 20_000;

const PHASE_INIT: u64 = 0;
const PHASE_A: u64 = 1;
const PHASE_B: u64 = 2;
const PHASE_INFER: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one (epoch, phase, batch) step.
pub(crate) fn step_rng(seed: u64, epoch: u64, phase: u64, batch: u64) -> ChaCha8Rng {
    let s = [epoch, phase, batch].iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ p));
    ChaCha8Rng::seed_from_u64(s)
}

/// Everything needed to resume or replay training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub net: NetworkParams,
    /// Pathway 1 and pathway 2 centroids; absent until the first epoch.
    pub centroids: Option<[CentroidSet; 2]>,
    pub epoch: usize,
    /// Pseudo-label histograms of the last clustering phase.
    pub histograms: [Vec<u64>; 2],
    /// Class weights applied by the next training phase.
    pub weights: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-batch objective.
    pub loss: f64,
    pub same: f64,
    pub cross: f64,
    pub batches: usize,
    pub histograms: [Vec<u64>; 2],
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        let k = config
            .classes
            .ok_or_else(|| Error::invalid("training needs the number of classes"))?;
        if k == 0 {
            return Err(Error::invalid("number of classes must be at least 1"));
        }
        if config.batch == 0 || config.res == 0 {
            return Err(Error::invalid("batch size and resolution must be positive"));
        }
        let net_cfg = NetworkConfig {
            plan: config.channel_plan(),
            kernel: config.kernel,
            ..NetworkConfig::default()
        };
        let net = NetworkParams::new(net_cfg, splitmix(config.seed))?;
        Ok(Self {
            config: config.clone(),
            net,
            centroids: None,
            epoch: 0,
            histograms: [vec![0; k], vec![0; k]],
            weights: [vec![1.0; k], vec![1.0; k]],
        })
    }

    pub fn classes(&self) -> usize {
        self.weights[0].len()
    }

    fn two_pathway(&self) -> bool {
        !self.config.single_pathway
    }

    fn check_blocks(&self, blocks: &[TrainBlock]) -> Result<()> {
        if blocks.is_empty() {
            return Err(Error::invalid("no training blocks"));
        }
        if let Some(b) = blocks.iter().find(|b| b.res() != self.config.res) {
            return Err(Error::shape(format!(
                "block prepared for resolution {}, config says {}",
                b.res(),
                self.config.res
            )));
        }
        Ok(())
    }

    /// Transforms for one batch: a single flip axis shared by the batch and
    /// independent jitters per block and pathway.
    fn draw_transforms(rng: &mut ChaCha8Rng, n: usize) -> (FlipSpec, Vec<[ColorJitter; 2]>) {
        let flip = FlipSpec::random_axis(rng);
        let jitters = (0..n)
            .map(|_| [ColorJitter::sample_default(rng), ColorJitter::sample_default(rng)])
            .collect();
        (flip, jitters)
    }

    /// Eval-mode features of one batch for each active pathway.
    fn batch_features(&self, batch: &[&TrainBlock], flip: FlipSpec, jitters: &[[ColorJitter; 2]]) -> Result<Vec<Vec<Matrix>>> {
        let paths = if self.two_pathway() { 2 } else { 1 };
        (0..paths)
            .map(|p| {
                let f = if p == 0 { flip } else { FlipSpec::NONE };
                // Eval mode is per-grid, so blocks can run independently.
                batch
                    .par_iter()
                    .zip(jitters.par_iter())
                    .map(|(b, j)| {
                        let (mut v, _) = forward_pathway(&self.net, &[*b], &[j[p]], f, Mode::Eval)?;
                        Ok(v.remove(0).features)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    fn init_centroids(&mut self, blocks: &[TrainBlock]) -> Result<()> {
        let k = self.classes();
        let bs = self.config.batch;
        let refs: Vec<&TrainBlock> = blocks.iter().collect();
        let mut pools: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];
        let dim = self.net.out_channels();
        for (bi, batch) in refs.chunks(bs).take(INIT_BATCHES).enumerate() {
            let mut rng = step_rng(self.config.seed, self.epoch as u64, PHASE_INIT, bi as u64);
            let (flip, jitters) = Self::draw_transforms(&mut rng, batch.len());
            for (p, feats) in self.batch_features(batch, flip, &jitters)?.into_iter().enumerate() {
                for f in feats {
                    pools[p].extend_from_slice(f.as_slice());
                }
            }
        }
        let mut sets = Vec::with_capacity(2);
        for p in 0..2 {
            let src = if pools[p].is_empty() { &pools[0] } else { &pools[p] };
            let data = Matrix::from_vec(src.len() / dim, dim, src.clone());
            let mut rng = step_rng(self.config.seed, self.epoch as u64, PHASE_INIT, u64::MAX - p as u64);
            let data = if data.rows() > INIT_POOL {
                let mut idx = index::sample(&mut rng, data.rows(), INIT_POOL).into_vec();
                idx.sort_unstable();
                data.select_rows(&idx)
            } else {
                data
            };
            let mut seeds = kmeans_pp(&data, k, &mut rng)?;
            // A zero feature cannot seed a unit centroid; fall back to a basis vector.
            for c in 0..k {
                let row = seeds.row_mut(c);
                if row.iter().all(|&v| v == 0.0) {
                    row[c % dim] = 1.0;
                }
                normalize_in_place(row);
            }
            sets.push(CentroidSet::new(seeds, p as u8 + 1)?);
        }
        let c2 = sets.pop().unwrap();
        let c1 = sets.pop().unwrap();
        self.centroids = Some([c1, c2]);
        Ok(())
    }

    /// Phase A: streams every block through the network in eval mode,
    /// assigns pseudo-labels per pathway and refines the centroids.
    fn clustering_phase(&mut self, blocks: &[TrainBlock]) -> Result<[Vec<u64>; 2]> {
        if self.centroids.is_none() {
            self.init_centroids(blocks)?;
        }
        let k = self.classes();
        let paths = if self.two_pathway() { 2 } else { 1 };
        let mut hist = [vec![0u64; k], vec![0u64; k]];
        let refs: Vec<&TrainBlock> = blocks.iter().collect();
        for (bi, batch) in refs.chunks(self.config.batch).enumerate() {
            let mut rng = step_rng(self.config.seed, self.epoch as u64, PHASE_A, bi as u64);
            let (flip, jitters) = Self::draw_transforms(&mut rng, batch.len());
            let feats = self.batch_features(batch, flip, &jitters)?;
            let sets = self.centroids.as_mut().unwrap();
            for (b, block) in batch.iter().enumerate() {
                for p in 0..paths {
                    let labels = assign_labels(&feats[p][b], &block.block.sp_ids, &sets[p])?.labels;
                    sets[p].minibatch_update(&feats[p][b], &labels, Some((UPDATE_SIGMA, &mut rng)))?;
                    for (h, c) in hist[p].iter_mut().zip(histogram(&labels, k)) {
                        *h += c;
                    }
                }
            }
        }
        let mut rng = step_rng(self.config.seed, self.epoch as u64, PHASE_A, u64::MAX);
        let sets = self.centroids.as_mut().unwrap();
        for p in 0..paths {
            hist[p] = sets[p].handle_degenerate(&hist[p], SPLIT_SIGMA, &mut rng)?;
        }
        Ok(hist)
    }

    /// Phase B: SGD over shuffled batches with labels recomputed from the
    /// frozen centroids.
    fn training_phase(&mut self, blocks: &[TrainBlock]) -> Result<(f64, f64, f64, usize)> {
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut step_rng(self.config.seed, self.epoch as u64, PHASE_B, u64::MAX));
        let centroids = self.centroids.clone().unwrap();
        let (mut sum, mut same, mut cross) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for (bi, chunk) in order.chunks(self.config.batch).enumerate() {
            let batch: Vec<&TrainBlock> = chunk.iter().map(|&i| &blocks[i]).collect();
            let mut rng = step_rng(self.config.seed, self.epoch as u64, PHASE_B, bi as u64);
            let (flip, jitters) = Self::draw_transforms(&mut rng, batch.len());
            let j1: Vec<ColorJitter> = jitters.iter().map(|j| j[0]).collect();
            let j2: Vec<ColorJitter> = jitters.iter().map(|j| j[1]).collect();
            let (v1, tape1) = forward_pathway(&self.net, &batch, &j1, flip, Mode::Train)?;
            let tape1 = tape1.unwrap();
            let second = if self.two_pathway() {
                let (v2, tape2) = forward_pathway(&self.net, &batch, &j2, FlipSpec::NONE, Mode::Train)?;
                Some((v2, tape2.unwrap()))
            } else {
                None
            };
            let scale = 1.0 / batch.len() as f64;
            let mut g1 = Vec::with_capacity(batch.len());
            let mut g2 = Vec::with_capacity(batch.len());
            let (mut b_same, mut b_cross) = (0.0, 0.0);
            for (b, block) in batch.iter().enumerate() {
                let sp = &block.block.sp_ids;
                let f1 = &v1[b].features;
                let l1 = assign_labels(f1, sp, &centroids[0])?.labels;
                let t1 = PathwayTargets {
                    labels: &l1,
                    centroids: &centroids[0].centroids,
                    weights: &self.weights[0],
                };
                match &second {
                    Some((v2, _)) => {
                        let f2 = &v2[b].features;
                        let l2 = assign_labels(f2, sp, &centroids[1])?.labels;
                        let t2 = PathwayTargets {
                            labels: &l2,
                            centroids: &centroids[1].centroids,
                            weights: &self.weights[1],
                        };
                        let out = two_pathway_loss(f1, f2, t1, t2)?;
                        b_same += out.l1() * scale;
                        b_cross += out.l2() * scale;
                        let [a, c] = out.grad;
                        g1.push(scaled(a, scale));
                        g2.push(scaled(c, scale));
                    }
                    None => {
                        let (l, g) = cluster_loss(f1, &l1, t1.centroids, t1.weights)?;
                        b_same += l * scale;
                        g1.push(scaled(g, scale));
                    }
                }
            }
            self.net.absorb_stats(&tape1);
            let mut grads = backward_pathway(&self.net, &tape1, &batch, &v1, flip, &g1)?;
            drop(tape1);
            if let Some((v2, tape2)) = second {
                self.net.absorb_stats(&tape2);
                grads.add_assign(&backward_pathway(&self.net, &tape2, &batch, &v2, FlipSpec::NONE, &g2)?);
            }
            sgd_step(&mut self.net, &grads, self.config.lr, self.config.wd)?;
            debug!("epoch {} batch {bi}: loss {:.6}", self.epoch, b_same + b_cross);
            sum += b_same + b_cross;
            same += b_same;
            cross += b_cross;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        Ok((sum / n, same / n, cross / n, batches))
    }

    /// One clustering phase followed by one training phase.
    pub fn run_epoch(&mut self, blocks: &[TrainBlock]) -> Result<EpochStats> {
        self.check_blocks(blocks)?;
        let hist = self.clustering_phase(blocks)?;
        let (loss, same, cross, batches) = self.training_phase(blocks)?;
        let paths = if self.two_pathway() { 2 } else { 1 };
        for p in 0..paths {
            self.weights[p] = class_weights(&hist[p])?;
        }
        self.histograms = hist.clone();
        let stats = EpochStats {
            epoch: self.epoch,
            loss,
            same,
            cross,
            batches,
            histograms: hist,
        };
        info!("epoch {}: loss {:.5} over {} batches", self.epoch, loss, batches);
        self.epoch += 1;
        Ok(stats)
    }

    /// Trains until `config.epochs` epochs have run, calling `on_epoch`
    /// after each.
    pub fn train<F>(&mut self, blocks: &[TrainBlock], mut on_epoch: F) -> Result<Vec<EpochStats>>
    where
        F: FnMut(&TrainState, &EpochStats) -> Result<()>,
    {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let s = self.run_epoch(blocks)?;
            on_epoch(self, &s)?;
            out.push(s);
        }
        Ok(out)
    }

    /// Centroids used for prediction: pathway 2, or pathway 1 when only one
    /// pathway is trained.
    pub fn inference_centroids(&self) -> Result<&CentroidSet> {
        let sets = self
            .centroids
            .as_ref()
            .ok_or_else(|| Error::invalid("model has not been trained"))?;
        Ok(if self.two_pathway() { &sets[1] } else { &sets[0] })
    }

    /// Unit-norm per-point features for a whole scene: every tile (however
    /// small) is sampled into a block, run without transforms, and
    /// interpolated at all of the tile's points.
    pub fn scene_features(&self, cloud: &PointCloud) -> Result<Matrix> {
        if cloud.normals.is_none() {
            return Err(Error::MissingNormals);
        }
        let res = self.config.res;
        let scene_frame = NormFrame::from_points(cloud.coords.iter());
        let tiles = tile_points(cloud, self.config.block);
        let per_tile: Vec<(Vec<usize>, Matrix)> = tiles
            .par_iter()
            .enumerate()
            .map(|(ti, tile)| {
                let mut rng = step_rng(self.config.seed, 0, PHASE_INFER, ti as u64);
                let idx = draw_indices(&tile.indices, self.config.pts, &mut rng);
                let block = build_block(cloud, None, tile, idx, &scene_frame)?;
                let grid = voxelize(&block.features, &block.norm_coords, res)?;
                let (mut out, _) = self.net.forward(&[grid.data], res, Mode::Eval)?;
                let coords: Vec<[f64; 3]> = tile.indices.iter().map(|&i| tile.frame.apply(&cloud.coords[i])).collect();
                let feats = Trilinear::new(&coords, res)?.gather(&out.remove(0));
                Ok((tile.indices.clone(), feats))
            })
            .collect::<Result<_>>()?;
        let dim = self.net.out_channels();
        let mut all = Matrix::zeros(cloud.len(), dim);
        for (idx, feats) in per_tile {
            for (r, &i) in idx.iter().enumerate() {
                let row = all.row_mut(i);
                row.copy_from_slice(feats.row(r));
                normalize_in_place(row);
            }
        }
        Ok(all)
    }

    /// Per-point labels with the superpoint constraint applied over the
    /// whole scene.
    pub fn infer_labels(&self, cloud: &PointCloud, sp_ids: &[u32]) -> Result<Vec<u32>> {
        if sp_ids.len() != cloud.len() {
            return Err(Error::shape("superpoint ids do not match the cloud"));
        }
        let centroids = self.inference_centroids()?;
        let feats = self.scene_features(cloud)?;
        Ok(assign_labels(&feats, sp_ids, centroids)?.labels)
    }

    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        ar.push_text("config", self.config.to_text());
        ar.push_ints("epoch", &[self.epoch as u64]);
        self.net.write_archive(&mut ar, "net.");
        match &self.centroids {
            Some([c1, c2]) => {
                ar.push_ints("has_centroids", &[1]);
                c1.write_archive(&mut ar, "mu1.");
                c2.write_archive(&mut ar, "mu2.");
            }
            None => ar.push_ints("has_centroids", &[0]),
        }
        for p in 0..2 {
            ar.push_ints(format!("hist{}", p + 1), &self.histograms[p]);
            ar.push_tensor(format!("weights{}", p + 1), &[self.weights[p].len()], &self.weights[p]);
        }
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let config = Config::from_text(ar.text("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let k = config
            .classes
            .ok_or_else(|| Error::Checkpoint("checkpoint config lacks the class count".into()))?;
        let net = NetworkParams::read_archive(ar, "net.")?;
        let dim = net.out_channels();
        let epoch = *ar.ints("epoch")?.first().unwrap_or(&0) as usize;
        let centroids = match ar.ints("has_centroids")?.first() {
            Some(1) => Some([
                CentroidSet::read_archive(ar, "mu1.", k, dim)?,
                CentroidSet::read_archive(ar, "mu2.", k, dim)?,
            ]),
            _ => None,
        };
        let mut histograms = [Vec::new(), Vec::new()];
        let mut weights = [Vec::new(), Vec::new()];
        for p in 0..2 {
            histograms[p] = ar.ints(&format!("hist{}", p + 1))?.to_vec();
            weights[p] = ar.tensor(&format!("weights{}", p + 1), &[k])?.to_vec();
            if histograms[p].len() != k {
                return Err(Error::Checkpoint("histogram length differs from class count".into()));
            }
        }
        Ok(Self {
            config,
            net,
            centroids,
            epoch,
            histograms,
            weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn scaled(mut m: Matrix, s: f64) -> Matrix {
    m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    m
}
