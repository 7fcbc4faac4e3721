//! Point clouds: storage, PLY interchange, preprocessing and block sampling.

mod block;
pub(crate) mod normals;
pub mod ply;
mod synth;

use std::collections::HashMap;

pub(crate) use block::{build_block, draw_indices};
pub use block::{assemble_features, sample_blocks, tile_points, Block, BlockParams, Tile};
pub use normals::estimate_normals;
pub use synth::{gen_synthetic, SceneSpec};

use crate::{Error, Result};

/// Number of per-point input feature channels.
pub const FEATURE_DIM: usize = 12;

/// Raw scene points plus optional per-point attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    /// RGB in `[0, 1]`.
    pub colors: Option<Vec<[f64; 3]>>,
    /// Unit normals.
    pub normals: Option<Vec<[f64; 3]>>,
    pub gt_labels: Option<Vec<u32>>,
    pub scene_id: String,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self {
            coords,
            colors: None,
            normals: None,
            gt_labels: None,
            scene_id: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Checks the structural invariants: nonempty, equal lengths, finite
    /// coordinates, colors in range and unit normals.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(i) = self.coords.iter().position(|c| !c.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != n {
                return Err(Error::invalid("color count differs from point count"));
            }
            if let Some(i) = colors.iter().position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
                return Err(Error::invalid(format!("point {i} has a color outside [0,1]")));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::invalid("normal count differs from point count"));
            }
            if let Some(i) = normals.iter().position(|v| (norm3(v) - 1.0).abs() > 1e-6) {
                return Err(Error::invalid(format!("point {i} has a non-unit normal")));
            }
        }
        if let Some(labels) = &self.gt_labels {
            if labels.len() != n {
                return Err(Error::invalid("label count differs from point count"));
            }
        }
        Ok(())
    }

    /// Keeps the points at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> PointCloud {
        let pick3 = |v: &Vec<[f64; 3]>| idx.iter().map(|&i| v[i]).collect();
        PointCloud {
            coords: pick3(&self.coords),
            colors: self.colors.as_ref().map(pick3),
            normals: self.normals.as_ref().map(pick3),
            gt_labels: self.gt_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            scene_id: self.scene_id.clone(),
        }
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    }
}

/// Axis-aligned min-max normalization frame mapping a point set into `[0,1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormFrame {
    pub min: [f64; 3],
    pub extent: [f64; 3],
}

impl NormFrame {
    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a [f64; 3]>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in pts {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let mut extent = [0.0; 3];
        for a in 0..3 {
            extent[a] = (hi[a] - lo[a]).max(0.0);
        }
        Self { min: lo, extent }
    }

    /// Maps `p` into `[0,1]³`. A degenerate (constant) axis maps to 0.5.
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.5; 3];
        for a in 0..3 {
            if self.extent[a] > 0.0 {
                out[a] = ((p[a] - self.min[a]) / self.extent[a]).clamp(0.0, 1.0);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Averages all points sharing a cell of an axis-aligned grid with pitch `cell`.
///
/// Coordinates, colors and normals are per-cell means (normals re-normalized);
/// labels take the per-cell majority with the smallest class id winning ties.
/// Output order follows the first point of each cell in input order.
pub fn grid_downsample(cloud: &PointCloud, cell: f64) -> Result<PointCloud> {
    if !(cell > 0.0) {
        return Err(Error::invalid("downsampling cell size must be positive"));
    }
    let mut slot_of: HashMap<[i64; 3], usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, c) in cloud.coords.iter().enumerate() {
        let key = [
            (c[0] / cell).floor() as i64,
            (c[1] / cell).floor() as i64,
            (c[2] / cell).floor() as i64,
        ];
        let slot = *slot_of.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
    }

    let mean3 = |v: &[[f64; 3]], idx: &[usize]| {
        let mut s = [0.0; 3];
        for &i in idx {
            for a in 0..3 {
                s[a] += v[i][a];
            }
        }
        let n = idx.len() as f64;
        [s[0] / n, s[1] / n, s[2] / n]
    };

    let coords = members.iter().map(|m| mean3(&cloud.coords, m)).collect();
    let colors = cloud.colors.as_ref().map(|col| {
        members
            .iter()
            .map(|m| {
                let c = mean3(col, m);
                [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]
            })
            .collect()
    });
    let normals = cloud.normals.as_ref().map(|nrm| {
        members
            .iter()
            .map(|m| {
                let v = mean3(nrm, m);
                let n = norm3(&v);
                if n > 1e-12 {
                    [v[0] / n, v[1] / n, v[2] / n]
                } else {
                    nrm[m[0]]
                }
            })
            .collect()
    });
    let gt_labels = cloud.gt_labels.as_ref().map(|lab| {
        members
            .iter()
            .map(|m| {
                let mut counts: HashMap<u32, usize> = HashMap::new();
                for &i in m {
                    *counts.entry(lab[i]).or_default() += 1;
                }
                counts
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(l, _)| l)
                    .unwrap()
            })
            .collect()
    });
    Ok(PointCloud {
        coords,
        colors,
        normals,
        gt_labels,
        scene_id: cloud.scene_id.clone(),
    })
}
