use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use super::SuperpointPartition;
use crate::cloud::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VccsParams {
    pub voxel_res: f64,
    pub seed_res: f64,
    pub w_spatial: f64,
    pub w_color: f64,
    pub w_normal: f64,
}

impl Default for VccsParams {
    fn default() -> Self {
        Self {
            voxel_res: 0.03,
            seed_res: 0.5,
            w_spatial: 0.4,
            w_color: 0.2,
            w_normal: 1.0,
        }
    }
}

struct Voxel {
    pos: [f64; 3],
    color: [f64; 3],
    normal: [f64; 3],
}

#[derive(Default, Clone)]
struct Accum {
    pos: [f64; 3],
    color: [f64; 3],
    normal: [f64; 3],
    n: f64,
}

impl Accum {
    fn add(&mut self, v: &Voxel) {
        for a in 0..3 {
            self.pos[a] += v.pos[a];
            self.color[a] += v.color[a];
            self.normal[a] += v.normal[a];
        }
        self.n += 1.0;
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    voxel: usize,
    sp: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Reversed so BinaryHeap pops the smallest distance, then lowest voxel, then lowest sp.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.voxel.cmp(&self.voxel))
            .then(other.sp.cmp(&self.sp))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn cell(p: &[f64; 3], res: f64) -> [i64; 3] {
    [
        (p[0] / res).floor() as i64,
        (p[1] / res).floor() as i64,
        (p[2] / res).floor() as i64,
    ]
}

/// Seeded region growing over a voxel adjacency graph.
///
/// Points are binned into `voxel_res` voxels; one seed voxel is picked per
/// occupied `seed_res` cell (the voxel nearest the cell center) and
/// superpoints grow best-first over 26-connected voxels, ranked by a
/// weighted spatial/color/normal distance to each superpoint's running mean.
/// Voxels unreachable from any seed start new superpoints, so every point
/// ends up assigned and every superpoint is connected.
pub fn vccs_superpoints(cloud: &PointCloud, params: &VccsParams) -> Result<SuperpointPartition> {
    let normals = cloud.normals.as_ref().ok_or(Error::MissingNormals)?;
    if cloud.is_empty() {
        return Err(Error::invalid("empty cloud"));
    }
    if !(params.voxel_res > 0.0) || !(params.voxel_res < params.seed_res) {
        return Err(Error::invalid("need 0 < voxel_res < seed_res"));
    }

    let mut by_key: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, c) in cloud.coords.iter().enumerate() {
        by_key.entry(cell(c, params.voxel_res)).or_default().push(i);
    }
    let keys: Vec<[i64; 3]> = by_key.keys().copied().collect();
    let key_index: HashMap<[i64; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut point_voxel = vec![0usize; cloud.len()];
    let voxels: Vec<Voxel> = by_key
        .values()
        .enumerate()
        .map(|(vi, members)| {
            let mut acc = Accum::default();
            for &i in members {
                point_voxel[i] = vi;
                let col = cloud.colors.as_ref().map_or([0.0; 3], |c| c[i]);
                acc.add(&Voxel {
                    pos: cloud.coords[i],
                    color: col,
                    normal: normals[i],
                });
            }
            let n = acc.n;
            let mut normal = acc.normal;
            let len = (normal[0].powi(2) + normal[1].powi(2) + normal[2].powi(2)).sqrt();
            if len > 1e-12 {
                normal.iter_mut().for_each(|v| *v /= len);
            } else {
                normal = normals[members[0]];
            }
            Voxel {
                pos: acc.pos.map(|v| v / n),
                color: acc.color.map(|v| v / n),
                normal,
            }
        })
        .collect();

    let neighbours: Vec<Vec<usize>> = keys
        .iter()
        .map(|k| {
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        if let Some(&j) = key_index.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            out.push(j);
                        }
                    }
                }
            }
            out
        })
        .collect();

    // One seed per occupied seed cell: the voxel closest to the cell center.
    let mut seed_cells: BTreeMap<[i64; 3], (f64, usize)> = BTreeMap::new();
    for (vi, v) in voxels.iter().enumerate() {
        let sc = cell(&v.pos, params.seed_res);
        let center = sc.map(|k| (k as f64 + 0.5) * params.seed_res);
        let d: f64 = (0..3).map(|a| (v.pos[a] - center[a]).powi(2)).sum();
        seed_cells
            .entry(sc)
            .and_modify(|best| {
                if d < best.0 {
                    *best = (d, vi);
                }
            })
            .or_insert((d, vi));
    }
    let seeds: Vec<usize> = seed_cells.values().map(|&(_, vi)| vi).collect();

    let mut grower = Grower {
        params,
        voxels: &voxels,
        neighbours: &neighbours,
        owner: vec![usize::MAX; voxels.len()],
        stats: Vec::new(),
    };
    grower.grow(&seeds);
    let mut next = 0;
    while let Some(free) = (next..voxels.len()).find(|&v| grower.owner[v] == usize::MAX) {
        grower.grow(&[free]);
        next = free + 1;
    }

    let labels: Vec<u32> = point_voxel.iter().map(|&v| grower.owner[v] as u32).collect();
    SuperpointPartition::from_labels(cloud, &labels)
}

struct Grower<'a> {
    params: &'a VccsParams,
    voxels: &'a [Voxel],
    neighbours: &'a [Vec<usize>],
    owner: Vec<usize>,
    stats: Vec<Accum>,
}

impl Grower<'_> {
    fn distance(&self, v: &Voxel, sp: &Accum) -> f64 {
        let p = self.params;
        let n = sp.n;
        let mut dx = 0.0;
        let mut dc = 0.0;
        for a in 0..3 {
            dx += (v.pos[a] - sp.pos[a] / n).powi(2);
            dc += (v.color[a] - sp.color[a] / n).powi(2);
        }
        let len = (sp.normal[0].powi(2) + sp.normal[1].powi(2) + sp.normal[2].powi(2)).sqrt();
        let cos = if len > 1e-12 {
            (v.normal[0] * sp.normal[0] + v.normal[1] * sp.normal[1] + v.normal[2] * sp.normal[2]) / len
        } else {
            0.0
        };
        let spatial = dx.sqrt() / (3.0 * p.seed_res);
        (p.w_spatial * spatial * spatial + p.w_color * dc + p.w_normal * (1.0 - cos.abs()).powi(2)).sqrt()
    }

    fn grow(&mut self, seeds: &[usize]) {
        let mut heap = BinaryHeap::new();
        for &s in seeds {
            if self.owner[s] != usize::MAX {
                continue;
            }
            heap.push(Candidate {
                dist: 0.0,
                voxel: s,
                sp: self.stats.len(),
            });
            self.stats.push(Accum::default());
        }
        while let Some(Candidate { voxel, sp, .. }) = heap.pop() {
            if self.owner[voxel] != usize::MAX {
                continue;
            }
            self.owner[voxel] = sp;
            self.stats[sp].add(&self.voxels[voxel]);
            for &nb in &self.neighbours[voxel] {
                if self.owner[nb] == usize::MAX {
                    heap.push(Candidate {
                        dist: self.distance(&self.voxels[nb], &self.stats[sp]),
                        voxel: nb,
                        sp,
                    });
                }
            }
        }
        // Seeds that lost their voxel to a neighbour's growth leave empty slots;
        // from_labels compacts them away.
    }
}
