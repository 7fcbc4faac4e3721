//! Point ↔ voxel conversion and the voxel/color transforms applied per pathway.
//!
//! Grids are stored flat as `r³ × channels` matrices; cell `(m, p, q)` (x, y,
//! z indices) lives at row `(m·r + p)·r + q`.

use rand::Rng;

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Dense `r×r×r×d` feature grid with per-cell point counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub res: usize,
    pub data: Matrix,
    pub counts: Vec<u32>,
}

impl VoxelGrid {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    #[inline]
    pub fn cell(&self, m: usize, p: usize, q: usize) -> usize {
        cell_index(self.res, m, p, q)
    }

    pub fn flip(&self, spec: FlipSpec) -> VoxelGrid {
        let perm = flip_permutation(self.res, spec);
        let mut counts = vec![0; self.counts.len()];
        for (src, &dst) in perm.iter().enumerate() {
            counts[dst] = self.counts[src];
        }
        VoxelGrid {
            res: self.res,
            data: flip_rows(&self.data, self.res, spec),
            counts,
        }
    }
}

#[inline]
pub fn cell_index(r: usize, m: usize, p: usize, q: usize) -> usize {
    (m * r + p) * r + q
}

/// Cell index along one axis: `min(floor(c·r), r−1)`.
#[inline]
fn axis_cell(c: f64, r: usize) -> usize {
    ((c * r as f64).floor().max(0.0) as usize).min(r - 1)
}

fn check_coords(coords: &[[f64; 3]]) -> Result<()> {
    const TOL: f64 = 1e-9;
    for (i, c) in coords.iter().enumerate() {
        if c.iter().any(|v| !(*v >= -TOL && *v <= 1.0 + TOL)) {
            return Err(Error::invalid(format!(
                "normalized coordinate {c:?} of point {i} is outside [0,1]"
            )));
        }
    }
    Ok(())
}

/// Averages point features into an `r³` grid.
pub fn voxelize(features: &Matrix, coords: &[[f64; 3]], r: usize) -> Result<VoxelGrid> {
    if r == 0 {
        return Err(Error::invalid("voxel resolution must be at least 1"));
    }
    if features.rows() != coords.len() {
        return Err(Error::shape("feature rows differ from coordinate count"));
    }
    check_coords(coords)?;
    let d = features.cols();
    let mut data = Matrix::zeros(r * r * r, d);
    let mut counts = vec![0u32; r * r * r];
    for (i, c) in coords.iter().enumerate() {
        let cell = cell_index(r, axis_cell(c[0], r), axis_cell(c[1], r), axis_cell(c[2], r));
        counts[cell] += 1;
        for (o, v) in data.row_mut(cell).iter_mut().zip(features.row(i)) {
            *o += v;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 1 {
            let inv = 1.0 / n as f64;
            data.row_mut(cell).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(VoxelGrid { res: r, data, counts })
}

/// Trilinear gather weights of a set of query points: for every point, the
/// eight surrounding cell centers and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Trilinear {
    pub res: usize,
    pub taps: Vec<[(u32, f64); 8]>,
}

impl Trilinear {
    /// Cell centers sit at `(m + 0.5)/r`; queries beyond the outermost
    /// centers clamp to them.
    pub fn new(coords: &[[f64; 3]], r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::invalid("voxel resolution must be at least 1"));
        }
        check_coords(coords)?;
        let axis = |c: f64| -> (usize, usize, f64) {
            if r == 1 {
                return (0, 0, 0.0);
            }
            let u = (c * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
            let i0 = (u.floor() as usize).min(r - 2);
            (i0, i0 + 1, u - i0 as f64)
        };
        let taps = coords
            .iter()
            .map(|c| {
                let (x0, x1, tx) = axis(c[0]);
                let (y0, y1, ty) = axis(c[1]);
                let (z0, z1, tz) = axis(c[2]);
                let mut out = [(0u32, 0.0); 8];
                let mut k = 0;
                for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                    for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                        for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                            out[k] = (cell_index(r, xi, yi, zi) as u32, wx * wy * wz);
                            k += 1;
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Self { res: r, taps })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Gathers per-point features from a flat grid.
    pub fn gather(&self, grid: &Matrix) -> Matrix {
        let d = grid.cols();
        let mut out = Matrix::zeros(self.taps.len(), d);
        for (i, taps) in self.taps.iter().enumerate() {
            let row = out.row_mut(i);
            for &(cell, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (o, v) in row.iter_mut().zip(grid.row(cell as usize)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): scatters per-point gradients back
    /// onto the grid.
    pub fn scatter(&self, grad: &Matrix) -> Matrix {
        let r = self.res;
        let d = grad.cols();
        let mut out = Matrix::zeros(r * r * r, d);
        for (i, taps) in self.taps.iter().enumerate() {
            let g = grad.row(i);
            for &(cell, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (o, v) in out.row_mut(cell as usize).iter_mut().zip(g) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

/// Trilinear interpolation of grid features at `coords`.
pub fn devoxelize(grid: &VoxelGrid, coords: &[[f64; 3]]) -> Result<Matrix> {
    Ok(Trilinear::new(coords, grid.res)?.gather(&grid.data))
}

/// Subset of axes whose index order is reversed. Its own inverse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FlipSpec {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl FlipSpec {
    pub const NONE: FlipSpec = FlipSpec {
        x: false,
        y: false,
        z: false,
    };

    pub fn axis(a: usize) -> FlipSpec {
        FlipSpec {
            x: a == 0,
            y: a == 1,
            z: a == 2,
        }
    }

    /// One axis chosen uniformly.
    pub fn random_axis<R: Rng>(rng: &mut R) -> FlipSpec {
        Self::axis(rng.random_range(0..3))
    }

    pub fn is_identity(&self) -> bool {
        !(self.x || self.y || self.z)
    }

    pub fn bits(&self) -> u8 {
        u8::from(self.x) | (u8::from(self.y) << 1) | (u8::from(self.z) << 2)
    }
}

/// `perm[src] = dst` cell mapping of a flip.
pub fn flip_permutation(r: usize, spec: FlipSpec) -> Vec<usize> {
    let f = |i: usize, on: bool| if on { r - 1 - i } else { i };
    let mut perm = Vec::with_capacity(r * r * r);
    for m in 0..r {
        for p in 0..r {
            for q in 0..r {
                perm.push(cell_index(r, f(m, spec.x), f(p, spec.y), f(q, spec.z)));
            }
        }
    }
    perm
}

/// Reverses the requested axes of a flat `r³ × d` grid. Channels are untouched.
pub fn flip_rows(data: &Matrix, r: usize, spec: FlipSpec) -> Matrix {
    if spec.is_identity() {
        return data.clone();
    }
    let mut out = Matrix::zeros(data.rows(), data.cols());
    for (src, dst) in flip_permutation(r, spec).into_iter().enumerate() {
        out.row_mut(dst).copy_from_slice(data.row(src));
    }
    out
}

/// Brightness offset and contrast factor applied to the color channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 1.0,
    };

    /// Uniform draw with `brightness ∈ [-b, b]`, `contrast ∈ [1-c, 1+c]`.
    pub fn sample<R: Rng>(rng: &mut R, b: f64, c: f64) -> ColorJitter {
        ColorJitter {
            brightness: rng.random_range(-b..=b),
            contrast: rng.random_range(1.0 - c..=1.0 + c),
        }
    }

    /// Default ranges: brightness ±0.2, contrast 0.8–1.2.
    pub fn sample_default<R: Rng>(rng: &mut R) -> ColorJitter {
        Self::sample(rng, 0.2, 0.2)
    }
}

/// Contrast around the per-channel block mean, then brightness, then clamp to
/// `[0,1]`. Only columns 3..6 change; colorless blocks pass through.
pub fn color_jitter(features: &Matrix, jitter: ColorJitter) -> Matrix {
    let mut out = features.clone();
    let n = features.rows();
    if n == 0 || jitter == ColorJitter::IDENTITY {
        return out;
    }
    let colorless = features.iter_rows().all(|r| r[3..6].iter().all(|&v| v == 0.0));
    if colorless {
        return out;
    }
    let mut mean = [0.0; 3];
    for row in features.iter_rows() {
        for c in 0..3 {
            mean[c] += row[3 + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        let row = out.row_mut(i);
        for c in 0..3 {
            let v = (row[3 + c] - mean[c]) * jitter.contrast + mean[c] + jitter.brightness;
            row[3 + c] = v.clamp(0.0, 1.0);
        }
    }
    out
}
