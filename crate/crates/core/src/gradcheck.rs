//! Central finite-difference checks of the analytic gradients.
//!
//! Every check builds a scalar loss `L = Σ R ⊙ y` with a fixed random `R`,
//! perturbs each input or parameter by `±h` and compares
//! `(L(+h) − L(−h)) / 2h` against the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::network::ops::{batch_norm, batch_norm_backward, batch_stats, leaky_relu, leaky_relu_backward, Conv3d};
use crate::network::{ChannelPlan, Mode, NetworkConfig, NetworkParams};
use crate::tensor::Matrix;
use crate::train::cluster_loss;
use crate::train::{normalize_rows, normalize_rows_backward};
use crate::voxel::Trilinear;
use crate::Result;

/// Denominator floor of the relative error, so gradients that vanish up to
/// rounding do not inflate the ratio.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a leaky ReLU kink.
    pub skipped: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(rel_error(analytic, numeric));
        self.checked += 1;
    }

    fn merge(&mut self, other: GradCheck) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel < tol
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn weighted_sum(y: &Matrix, r: &Matrix) -> f64 {
    y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

/// Central difference of `loss` along coordinate `i` of `x`.
fn central(x: &mut [f64], i: usize, h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let up = loss(x);
    x[i] = x0 - h;
    let down = loss(x);
    x[i] = x0;
    (up - down) / (2.0 * h)
}

/// Single convolution: input, weight and bias gradients.
pub fn check_conv(res: usize, kernel: usize, cin: usize, cout: usize, h: f64, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Conv3d::new(res, kernel, cin, cout);
    let mut x = randn(&mut rng, res.pow(3), cin);
    let mut w = randv(&mut rng, conv.weight_len());
    let mut b = randv(&mut rng, cout);
    let r = randn(&mut rng, res.pow(3), cout);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let dx = conv.backward(&x, &w, &r, &mut dw, &mut db, true).unwrap();

    let mut out = GradCheck::default();
    for i in 0..x.as_slice().len() {
        let (wc, bc) = (w.clone(), b.clone());
        let n = central(x.as_mut_slice(), i, h, |xs| {
            let xm = Matrix::from_vec(res.pow(3), cin, xs.to_vec());
            weighted_sum(&conv.forward(&xm, &wc, &bc), &r)
        });
        out.record(dx.as_slice()[i], n);
    }
    for i in 0..w.len() {
        let n = central(&mut w, i, h, |ws| weighted_sum(&conv.forward(&x, ws, &b), &r));
        out.record(dw[i], n);
    }
    for i in 0..cout {
        let n = central(&mut b, i, h, |bs| weighted_sum(&conv.forward(&x, &w, bs), &r));
        out.record(db[i], n);
    }
    out
}

/// Training-mode batch normalization, statistics included in the graph.
pub fn check_batch_norm(rows: usize, channels: usize, h: f64, seed: u64) -> GradCheck {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = randn(&mut rng, rows, channels);
    let mut gamma = randv(&mut rng, channels);
    let mut beta = randv(&mut rng, channels);
    let r = randn(&mut rng, rows, channels);
    let loss = |z: &Matrix, g: &[f64], b: &[f64]| {
        let (m, v) = batch_stats(std::slice::from_ref(z));
        weighted_sum(&batch_norm(z, &m, &v, g, b, eps), &r)
    };
    let (m, v) = batch_stats(std::slice::from_ref(&z));
    let mut dg = vec![0.0; channels];
    let mut db = vec![0.0; channels];
    let dz = batch_norm_backward(std::slice::from_ref(&z), &m, &v, &gamma, eps, std::slice::from_ref(&r), &mut dg, &mut db);

    let mut out = GradCheck::default();
    for i in 0..rows * channels {
        let (gc, bc) = (gamma.clone(), beta.clone());
        let n = central(z.as_mut_slice(), i, h, |zs| {
            loss(&Matrix::from_vec(rows, channels, zs.to_vec()), &gc, &bc)
        });
        out.record(dz[0].as_slice()[i], n);
    }
    for c in 0..channels {
        let n = central(&mut gamma, c, h, |g| loss(&z, g, &beta));
        out.record(dg[c], n);
        let n = central(&mut beta, c, h, |b| loss(&z, &gamma, b));
        out.record(db[c], n);
    }
    out
}

/// Leaky ReLU away from its kink.
pub fn check_leaky_relu(rows: usize, channels: usize, slope: f64, h: f64, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = randn(&mut rng, rows, channels);
    for v in x.as_mut_slice() {
        if v.abs() < 10.0 * h {
            *v = 0.5_f64.copysign(*v);
        }
    }
    let r = randn(&mut rng, rows, channels);
    let dx = leaky_relu_backward(&x, &r, slope);
    let mut out = GradCheck::default();
    for i in 0..rows * channels {
        let n = central(x.as_mut_slice(), i, h, |xs| {
            weighted_sum(&leaky_relu(&Matrix::from_vec(rows, channels, xs.to_vec()), slope), &r)
        });
        out.record(dx.as_slice()[i], n);
    }
    out
}

/// The composed network in training mode over a batch of grids: every
/// parameter and every input entry. Coordinates whose perturbation flips
/// the sign of any activation input are skipped and counted.
pub fn check_network(plan: ChannelPlan, res: usize, batch: usize, h: f64, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetworkConfig {
        plan,
        ..NetworkConfig::default()
    };
    let mut net = NetworkParams::new(config, seed)?;
    // Non-trivial normalization parameters exercise the γ/β paths.
    for l in &mut net.layers {
        l.gamma.iter_mut().for_each(|g| *g = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
        l.beta.iter_mut().for_each(|b| *b = 0.3 * rng.sample::<f64, _>(StandardNormal));
        l.bias.iter_mut().for_each(|b| *b = 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let cells = res.pow(3);
    let mut inputs: Vec<Matrix> = (0..batch).map(|_| randn(&mut rng, cells, net.in_channels())).collect();
    let rs: Vec<Matrix> = (0..batch).map(|_| randn(&mut rng, cells, net.out_channels())).collect();

    let eval = |net: &NetworkParams, inputs: &[Matrix]| -> (f64, Vec<bool>) {
        let (outs, tape) = net.forward(inputs, res, Mode::Train).unwrap();
        let l = outs.iter().zip(&rs).map(|(o, r)| weighted_sum(o, r)).sum();
        (l, net.activation_signs(&tape.unwrap()))
    };
    let (outs, tape) = net.forward(&inputs, res, Mode::Train)?;
    debug_assert_eq!(outs.len(), batch);
    let tape = tape.expect("training forward records a tape");
    let signs = net.activation_signs(&tape);
    let (grads, dx) = net.backward(&tape, &rs, true)?;
    let dx = dx.expect("input gradient requested");

    let mut out = GradCheck::default();
    let probe = |out: &mut GradCheck, analytic: f64, up: (f64, Vec<bool>), down: (f64, Vec<bool>)| {
        if up.1 != signs || down.1 != signs {
            out.skipped += 1;
        } else {
            out.record(analytic, (up.0 - down.0) / (2.0 * h));
        }
    };
    for li in 0..net.layers.len() {
        for which in 0..4 {
            let len = match which {
                0 => net.layers[li].weight.len(),
                1 => net.layers[li].bias.len(),
                2 => net.layers[li].gamma.len(),
                _ => net.layers[li].beta.len(),
            };
            for i in 0..len {
                let analytic = match which {
                    0 => grads.layers[li].weight[i],
                    1 => grads.layers[li].bias[i],
                    2 => grads.layers[li].gamma[i],
                    _ => grads.layers[li].beta[i],
                };
                let shifted = |delta: f64| {
                    let mut n = net.clone();
                    let l = &mut n.layers[li];
                    let v = match which {
                        0 => &mut l.weight,
                        1 => &mut l.bias,
                        2 => &mut l.gamma,
                        _ => &mut l.beta,
                    };
                    v[i] += delta;
                    eval(&n, &inputs)
                };
                let (up, down) = (shifted(h), shifted(-h));
                probe(&mut out, analytic, up, down);
            }
        }
    }
    for b in 0..batch {
        for i in 0..inputs[b].as_slice().len() {
            let x0 = inputs[b].as_slice()[i];
            inputs[b].as_mut_slice()[i] = x0 + h;
            let up = eval(&net, &inputs);
            inputs[b].as_mut_slice()[i] = x0 - h;
            let down = eval(&net, &inputs);
            inputs[b].as_mut_slice()[i] = x0;
            probe(&mut out, dx[b].as_slice()[i], up, down);
        }
    }
    Ok(out)
}

/// Cluster loss with respect to the (unit) features.
pub fn check_cluster_loss(n: usize, dim: usize, k: usize, h: f64, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = normalize_rows(&randn(&mut rng, n, dim));
    let mu = normalize_rows(&randn(&mut rng, k, dim));
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    let (_, grad) = cluster_loss(&f, &labels, &mu, &weights)?;
    let mut out = GradCheck::default();
    for i in 0..n * dim {
        let num = central(f.as_mut_slice(), i, h, |fs| {
            cluster_loss(&Matrix::from_vec(n, dim, fs.to_vec()), &labels, &mu, &weights)
                .unwrap()
                .0
        });
        out.record(grad.as_slice()[i], num);
    }
    Ok(out)
}

/// Devoxelization followed by row normalization and the cluster loss, with
/// respect to the grid values: the path the trainer backpropagates.
pub fn check_devoxelize_loss(res: usize, points: usize, dim: usize, k: usize, h: f64, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..points).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let tri = Trilinear::new(&coords, res)?;
    let mut grid = randn(&mut rng, res.pow(3), dim);
    let mu = normalize_rows(&randn(&mut rng, k, dim));
    let labels: Vec<u32> = (0..points).map(|_| rng.random_range(0..k as u32)).collect();
    let weights = vec![1.0; k];
    let loss = |g: &Matrix| cluster_loss(&normalize_rows(&tri.gather(g)), &labels, &mu, &weights).unwrap();
    let raw = tri.gather(&grid);
    let (_, df) = loss(&grid);
    let dgrid = tri.scatter(&normalize_rows_backward(&raw, &df));
    let mut out = GradCheck::default();
    let cols = grid.cols();
    for i in 0..grid.as_slice().len() {
        let num = central(grid.as_mut_slice(), i, h, |gs| {
            loss(&Matrix::from_vec(gs.len() / cols, cols, gs.to_vec())).0
        });
        out.record(dgrid.as_slice()[i], num);
    }
    Ok(out)
}

/// Every check at the given step, smallest sizes that still cover each path.
pub fn run_all(h: f64, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut net = check_network(ChannelPlan::new(3, vec![4, 3], 2), 4, 2, h, seed)?;
    // A second, shallower net with a single grid in the batch.
    net.merge(check_network(ChannelPlan::new(2, vec![3], 2), 3, 1, h, seed + 1)?);
    Ok(vec![
        ("conv3d", check_conv(4, 3, 2, 3, h, seed)),
        ("batch_norm", check_batch_norm(40, 3, h, seed)),
        ("leaky_relu", check_leaky_relu(30, 3, 0.1, h, seed)),
        ("network", net),
        ("cluster_loss", check_cluster_loss(12, 6, 4, h, seed)?),
        ("devoxelize+loss", check_devoxelize_loss(4, 20, 3, 3, h, seed)?),
    ])
}
