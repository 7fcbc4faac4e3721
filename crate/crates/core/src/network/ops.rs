//! Layer kernels with their exact reverse-mode counterparts.
//!
//! All tensors are flat `r³ × channels` grids (see [`crate::voxel`]).
//! Convolution weights use the `out × in × k × k × k` layout.

use std::sync::Arc;

use crate::tensor::Matrix;

/// Columns of the im2col buffer are kept under this many `f64`s per chunk.
const CHUNK_ELEMS: usize = 1 << 20;

fn tap_offsets(k: usize) -> Vec<[isize; 3]> {
    let h = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k * k);
    for dx in -h..=h {
        for dy in -h..=h {
            for dz in -h..=h {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Neighbour cell of every (cell, tap) pair, `u32::MAX` where the kernel
/// reaches into the zero padding.
fn neighbour_table(r: usize, k: usize) -> Vec<u32> {
    let taps = tap_offsets(k);
    let ri = r as isize;
    let mut out = Vec::with_capacity(r * r * r * taps.len());
    for m in 0..ri {
        for p in 0..ri {
            for q in 0..ri {
                for t in &taps {
                    let (a, b, c) = (m + t[0], p + t[1], q + t[2]);
                    if a < 0 || b < 0 || c < 0 || a >= ri || b >= ri || c >= ri {
                        out.push(u32::MAX);
                    } else {
                        out.push(((a * ri + b) * ri + c) as u32);
                    }
                }
            }
        }
    }
    out
}

/// Same-resolution 3D convolution geometry (stride 1, zero padding `k/2`).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub res: usize,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    nbr: Arc<Vec<u32>>,
}

impl Conv3d {
    /// Panics unless `kernel` is odd.
    pub fn new(res: usize, kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            res,
            kernel,
            in_ch,
            out_ch,
            nbr: Arc::new(neighbour_table(res, kernel)),
        }
    }

    /// Same geometry with different channel counts, sharing the neighbour table.
    pub fn with_channels(&self, in_ch: usize, out_ch: usize) -> Self {
        Self {
            res: self.res,
            kernel: self.kernel,
            in_ch,
            out_ch,
            nbr: Arc::clone(&self.nbr),
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.taps()
    }

    fn cells(&self) -> usize {
        self.res * self.res * self.res
    }

    fn k_dim(&self) -> usize {
        self.in_ch * self.taps()
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_ELEMS / self.k_dim().max(1)).clamp(1, self.cells())
    }

    /// Column `t·in + ci` of row `cell − c0` holds input channel `ci` at tap `t`.
    fn im2col(&self, input: &Matrix, c0: usize, c1: usize, cols: &mut [f64]) {
        let taps = self.taps();
        let kd = self.k_dim();
        let cin = self.in_ch;
        let src = input.as_slice();
        for cell in c0..c1 {
            let row = &mut cols[(cell - c0) * kd..(cell - c0 + 1) * kd];
            let nb = &self.nbr[cell * taps..(cell + 1) * taps];
            for (dst, &n) in row.chunks_exact_mut(cin).zip(nb) {
                if n == u32::MAX {
                    dst.fill(0.0);
                } else {
                    dst.copy_from_slice(&src[n as usize * cin..(n as usize + 1) * cin]);
                }
            }
        }
    }

    /// Weights reordered to `out × (tap, in)` to match the im2col columns.
    fn tap_major(&self, weight: &[f64]) -> Vec<f64> {
        let (taps, cin, kd) = (self.taps(), self.in_ch, self.k_dim());
        let mut w = vec![0.0; weight.len()];
        for co in 0..self.out_ch {
            for ci in 0..cin {
                for t in 0..taps {
                    w[co * kd + t * cin + ci] = weight[co * kd + ci * taps + t];
                }
            }
        }
        w
    }

    pub fn forward(&self, input: &Matrix, weight: &[f64], bias: &[f64]) -> Matrix {
        debug_assert_eq!(input.cols(), self.in_ch);
        debug_assert_eq!(weight.len(), self.weight_len());
        let n = self.cells();
        let kd = self.k_dim();
        let cout = self.out_ch;
        let mut out = Matrix::zeros(n, cout);
        for row in 0..n {
            out.row_mut(row).copy_from_slice(bias);
        }
        let weight = self.tap_major(weight);
        let chunk = self.chunk_rows();
        let mut cols = vec![0.0; chunk * kd];
        let mut c0 = 0;
        while c0 < n {
            let c1 = (c0 + chunk).min(n);
            let rows = c1 - c0;
            self.im2col(input, c0, c1, &mut cols);
            let dst = &mut out.as_mut_slice()[c0 * cout..c1 * cout];
            // SAFETY: every pointer/stride pair addresses memory inside the
            // slices above, whose lengths match the dimensions passed.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    kd,
                    cout,
                    1.0,
                    cols.as_ptr(),
                    kd as isize,
                    1,
                    weight.as_ptr(),
                    1,
                    kd as isize,
                    1.0,
                    dst.as_mut_ptr(),
                    cout as isize,
                    1,
                );
            }
            c0 = c1;
        }
        out
    }

    /// Accumulates weight and bias gradients into `dweight`/`dbias` and
    /// returns the input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        input: &Matrix,
        weight: &[f64],
        grad_out: &Matrix,
        dweight: &mut [f64],
        dbias: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Matrix> {
        let n = self.cells();
        let kd = self.k_dim();
        let taps = self.taps();
        let cin = self.in_ch;
        let cout = self.out_ch;
        for row in grad_out.iter_rows() {
            for (d, g) in dbias.iter_mut().zip(row) {
                *d += g;
            }
        }
        let weight = self.tap_major(weight);
        let mut dw = vec![0.0; weight.len()];
        let chunk = self.chunk_rows();
        let mut cols = vec![0.0; chunk * kd];
        let mut dcols = if need_input_grad { vec![0.0; chunk * kd] } else { Vec::new() };
        let mut dinput = need_input_grad.then(|| Matrix::zeros(n, cin));
        let mut c0 = 0;
        while c0 < n {
            let c1 = (c0 + chunk).min(n);
            let rows = c1 - c0;
            self.im2col(input, c0, c1, &mut cols);
            let g = &grad_out.as_slice()[c0 * cout..c1 * cout];
            // SAFETY: dimensions and strides match the slice lengths.
            unsafe {
                // dW(kidx, co) += Σ_row cols(row, kidx)·g(row, co)
                matrixmultiply::dgemm(
                    kd,
                    rows,
                    cout,
                    1.0,
                    cols.as_ptr(),
                    1,
                    kd as isize,
                    g.as_ptr(),
                    cout as isize,
                    1,
                    1.0,
                    dw.as_mut_ptr(),
                    1,
                    kd as isize,
                );
            }
            if let Some(dx) = dinput.as_mut() {
                // SAFETY: as above.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        cout,
                        kd,
                        1.0,
                        g.as_ptr(),
                        cout as isize,
                        1,
                        weight.as_ptr(),
                        kd as isize,
                        1,
                        0.0,
                        dcols.as_mut_ptr(),
                        kd as isize,
                        1,
                    );
                }
                let dxs = dx.as_mut_slice();
                for cell in c0..c1 {
                    let row = &dcols[(cell - c0) * kd..(cell - c0 + 1) * kd];
                    let nb = &self.nbr[cell * taps..(cell + 1) * taps];
                    for (src, &nbi) in row.chunks_exact(cin).zip(nb) {
                        if nbi == u32::MAX {
                            continue;
                        }
                        let d = &mut dxs[nbi as usize * cin..(nbi as usize + 1) * cin];
                        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            c0 = c1;
        }
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..taps {
                    dweight[co * kd + ci * taps + t] += dw[co * kd + t * cin + ci];
                }
            }
        }
        dinput
    }
}

/// Per-channel batch mean and biased variance over every row of every grid.
pub fn batch_stats(zs: &[Matrix]) -> (Vec<f64>, Vec<f64>) {
    let c = zs[0].cols();
    let count: usize = zs.iter().map(|z| z.rows()).sum();
    let mut mean = vec![0.0; c];
    for z in zs {
        for row in z.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for z in zs {
        for row in z.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    (mean, var)
}

/// `γ·(z − mean)/sqrt(var + eps) + β`, channel-wise.
pub fn batch_norm(z: &Matrix, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Matrix {
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = z.clone();
    for i in 0..out.rows() {
        for (c, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = gamma[c] * (*v - mean[c]) * inv[c] + beta[c];
        }
    }
    out
}

/// Backward of training-mode batch normalization (statistics depend on the
/// inputs). Returns the input gradients and accumulates `dgamma`/`dbeta`.
pub fn batch_norm_backward(
    zs: &[Matrix],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    dys: &[Matrix],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<Matrix> {
    let c = mean.len();
    let count: f64 = zs.iter().map(|z| z.rows()).sum::<usize>() as f64;
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    // Σ dy and Σ dy·x̂ per channel.
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (z, dy) in zs.iter().zip(dys) {
        for (zr, gr) in z.iter_rows().zip(dy.iter_rows()) {
            for ch in 0..c {
                let xhat = (zr[ch] - mean[ch]) * inv[ch];
                sum_dy[ch] += gr[ch];
                sum_dy_xhat[ch] += gr[ch] * xhat;
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    zs.iter()
        .zip(dys)
        .map(|(z, dy)| {
            let mut dz = Matrix::zeros(z.rows(), c);
            for i in 0..z.rows() {
                let zr = z.row(i);
                let gr = dy.row(i);
                let out = dz.row_mut(i);
                for ch in 0..c {
                    let xhat = (zr[ch] - mean[ch]) * inv[ch];
                    out[ch] = gamma[ch] * inv[ch] / count
                        * (count * gr[ch] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                }
            }
            dz
        })
        .collect()
}

pub fn leaky_relu(x: &Matrix, slope: f64) -> Matrix {
    let mut out = x.clone();
    out.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
    out
}

/// Gradient through leaky ReLU given the pre-activation `x`.
pub fn leaky_relu_backward(x: &Matrix, dy: &Matrix, slope: f64) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}
