//! Geometric pre-segmentation of a scene into superpoints.

mod merge;
mod ransac;
mod vccs;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use merge::merge_superpoints;
pub use ransac::{ransac_plane, Plane};
pub use vccs::{vccs_superpoints, VccsParams};

use crate::cloud::PointCloud;
use crate::{Error, Result};

/// Per-point superpoint ids with per-superpoint aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointPartition {
    pub sp_id: Vec<u32>,
    pub sizes: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    /// Sum of the member unit normals.
    pub normal_sums: Vec<[f64; 3]>,
}

impl SuperpointPartition {
    /// Builds the partition from arbitrary labels, re-numbering them
    /// contiguously in order of first appearance.
    pub fn from_labels(cloud: &PointCloud, labels: &[u32]) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::shape("superpoint labels do not match the cloud"));
        }
        let normals = cloud.normals.as_ref().ok_or(Error::MissingNormals)?;
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let sp_id: Vec<u32> = labels
            .iter()
            .map(|l| {
                let next = remap.len() as u32;
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        let s = remap.len();
        let mut sizes = vec![0usize; s];
        let mut sums = vec![[0.0; 3]; s];
        let mut normal_sums = vec![[0.0; 3]; s];
        for (i, &id) in sp_id.iter().enumerate() {
            let id = id as usize;
            sizes[id] += 1;
            for a in 0..3 {
                sums[id][a] += cloud.coords[i][a];
                normal_sums[id][a] += normals[i][a];
            }
        }
        let centroids = sums
            .iter()
            .zip(&sizes)
            .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64])
            .collect();
        Ok(Self {
            sp_id,
            sizes,
            centroids,
            normal_sums,
        })
    }

    pub fn num_superpoints(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_points(&self) -> usize {
        self.sp_id.len()
    }
}

/// Full per-scene pre-segmentation: optional ground plane, VCCS, then merging
/// down to `gamma` superpoints.
pub fn segment_scene(
    cloud: &PointCloud,
    params: &VccsParams,
    gamma: usize,
    road: Option<(usize, f64, u64)>,
) -> Result<SuperpointPartition> {
    let labels = match road {
        None => vccs_superpoints(cloud, params)?.sp_id,
        Some((iters, thresh, seed)) => {
            let plane = ransac_plane(cloud, iters, thresh, seed)?;
            let rest: Vec<usize> = (0..cloud.len()).filter(|&i| !plane.inlier_mask[i]).collect();
            let mut labels = vec![0u32; cloud.len()];
            if !rest.is_empty() {
                let sub = vccs_superpoints(&cloud.subset(&rest), params)?;
                for (k, &i) in rest.iter().enumerate() {
                    labels[i] = sub.sp_id[k] + 1;
                }
            }
            labels
        }
    };
    let part = SuperpointPartition::from_labels(cloud, &labels)?;
    merge_superpoints(&part, gamma)
}

/// Writes one id per line, line `i` holding the id of point `i`.
pub fn save_superpoints(ids: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::with_capacity(ids.len() * 3);
    for id in ids {
        let _ = writeln!(s, "{id}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_superpoints(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u32>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("'{}' is not a superpoint id", l.trim()),
            })
        })
        .collect()
}
