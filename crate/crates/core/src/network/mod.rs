//! Volumetric feature extractor: a stack of same-resolution 3D convolutions,
//! each followed by batch normalization and a leaky ReLU (the last layer
//! stays linear).

mod checkpoint;
pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Archive, Entry};
use ops::Conv3d;

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Channel widths from input through hidden layers to output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPlan {
    widths: Vec<usize>,
}

impl Default for ChannelPlan {
    /// 12 → 32 → 64 → 64 → 128 → 128 → 128 → 128 → 128.
    fn default() -> Self {
        Self::new(12, vec![32, 64, 64, 128, 128, 128, 128], 128)
    }
}

impl ChannelPlan {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend(hidden);
        widths.push(output);
        Self { widths }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub plan: ChannelPlan,
    /// Odd cubic kernel size.
    pub kernel: usize,
    /// Batch normalization after each convolution.
    pub use_norm: bool,
    pub slope: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            plan: ChannelPlan::default(),
            kernel: 3,
            use_norm: true,
            slope: 0.1,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `out × in × k × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; produces a tape.
    Train,
    /// Running statistics; no tape.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
}

/// Forward-pass record sufficient for an exact backward pass: the input
/// grids, every layer's pre-normalization convolution output, and the batch
/// statistics.
#[derive(Debug, Clone)]
pub struct Tape {
    res: usize,
    widths: Vec<usize>,
    input: Vec<Matrix>,
    conv_out: Vec<Vec<Matrix>>,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Tape {
    pub fn res(&self) -> usize {
        self.res
    }

    pub fn batch(&self) -> usize {
        self.input.len()
    }

    /// Per-layer batch (mean, biased variance).
    pub fn stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.stats
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

impl Grads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                    gamma: vec![0.0; l.gamma.len()],
                    beta: vec![0.0; l.beta.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in [
                (&mut a.weight, &b.weight),
                (&mut a.bias, &b.bias),
                (&mut a.gamma, &b.gamma),
                (&mut a.beta, &b.beta),
            ] {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).chain(&l.gamma).chain(&l.beta).copied())
    }
}

impl NetworkParams {
    /// He-normal convolution weights, zero biases, unit scale, zero shift.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        if config.kernel % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if config.plan.widths().iter().any(|&w| w == 0) || config.plan.num_layers() == 0 {
            return Err(Error::invalid("channel plan needs at least one layer of nonzero width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = config.kernel.pow(3);
        let layers = config
            .plan
            .widths()
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let std = (2.0 / (cin * taps) as f64).sqrt();
                let nd = Normal::new(0.0, std).unwrap();
                Layer {
                    in_ch: cin,
                    out_ch: cout,
                    weight: (0..cout * cin * taps).map(|_| nd.sample(&mut rng)).collect(),
                    bias: vec![0.0; cout],
                    gamma: vec![1.0; cout],
                    beta: vec![0.0; cout],
                    running_mean: vec![0.0; cout],
                    running_var: vec![1.0; cout],
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().unwrap().out_ch
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + l.gamma.len() + l.beta.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight
                .iter()
                .chain(&l.bias)
                .chain(&l.gamma)
                .chain(&l.beta)
                .chain(&l.running_mean)
                .chain(&l.running_var)
                .all(|v| v.is_finite())
                && l.running_var.iter().all(|&v| v >= 0.0)
        })
    }

    fn normalize(&self, li: usize, z: &Matrix, stats: Option<&(Vec<f64>, Vec<f64>)>) -> Matrix {
        let l = &self.layers[li];
        if !self.config.use_norm {
            return z.clone();
        }
        let (mean, var) = match stats {
            Some((m, v)) => (m.as_slice(), v.as_slice()),
            None => (l.running_mean.as_slice(), l.running_var.as_slice()),
        };
        ops::batch_norm(z, mean, var, &l.gamma, &l.beta, self.config.eps)
    }

    fn is_last(&self, li: usize) -> bool {
        li + 1 == self.layers.len()
    }

    /// Runs a batch of `r³ × in` grids through the network.
    ///
    /// Training mode normalizes with statistics over the whole batch and
    /// returns a [`Tape`]; running statistics are not touched (see
    /// [`absorb_stats`](Self::absorb_stats)).
    pub fn forward(&self, inputs: &[Matrix], res: usize, mode: Mode) -> Result<(Vec<Matrix>, Option<Tape>)> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cells = res * res * res;
        for x in inputs {
            if x.cols() != self.in_channels() {
                return Err(Error::shape(format!(
                    "network expects {} input channels, got {}",
                    self.in_channels(),
                    x.cols()
                )));
            }
            if x.rows() != cells {
                return Err(Error::shape(format!("grid has {} cells, expected {cells}", x.rows())));
            }
        }
        let geom = Conv3d::new(res, self.config.kernel, 1, 1);
        let train = mode == Mode::Train;
        let mut tape = train.then(|| Tape {
            res,
            widths: self.config.plan.widths().to_vec(),
            input: inputs.to_vec(),
            conv_out: Vec::with_capacity(self.layers.len()),
            stats: Vec::with_capacity(self.layers.len()),
        });
        let mut acts: Vec<Matrix> = inputs.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let conv = geom.with_channels(l.in_ch, l.out_ch);
            let zs: Vec<Matrix> = acts.iter().map(|a| conv.forward(a, &l.weight, &l.bias)).collect();
            let stats = (train && self.config.use_norm).then(|| ops::batch_stats(&zs));
            acts = zs
                .iter()
                .map(|z| {
                    let y = self.normalize(li, z, stats.as_ref());
                    if self.is_last(li) {
                        y
                    } else {
                        ops::leaky_relu(&y, self.config.slope)
                    }
                })
                .collect();
            if let Some(t) = tape.as_mut() {
                t.conv_out.push(zs);
                t.stats.push(stats.unwrap_or_default());
            }
        }
        Ok((acts, tape))
    }

    /// Folds a training tape's batch statistics into the running statistics.
    pub fn absorb_stats(&mut self, tape: &Tape) {
        if !self.config.use_norm {
            return;
        }
        let m = self.config.momentum;
        let count = (tape.batch() * tape.res.pow(3)) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for (l, (mean, var)) in self.layers.iter_mut().zip(&tape.stats) {
            for c in 0..l.out_ch {
                l.running_mean[c] = (1.0 - m) * l.running_mean[c] + m * mean[c];
                l.running_var[c] = (1.0 - m) * l.running_var[c] + m * var[c] * unbias;
            }
        }
    }

    /// Exact gradients of a scalar loss given `dL/d output` for every grid of
    /// the batch. Returns the parameter gradients and, when requested, the
    /// gradient with respect to the input grids.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: &[Matrix],
        need_input_grad: bool,
    ) -> Result<(Grads, Option<Vec<Matrix>>)> {
        if tape.widths != self.config.plan.widths() {
            return Err(Error::shape("tape was recorded with a different channel plan"));
        }
        if grad_out.len() != tape.batch() {
            return Err(Error::shape("gradient batch size differs from the tape"));
        }
        let cells = tape.res.pow(3);
        for g in grad_out {
            if g.rows() != cells || g.cols() != self.out_channels() {
                return Err(Error::shape("output gradient has the wrong shape"));
            }
        }
        let geom = Conv3d::new(tape.res, self.config.kernel, 1, 1);
        let mut grads = Grads::zeros_like(self);
        let slope = self.config.slope;
        let mut g: Vec<Matrix> = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let zs = &tape.conv_out[li];
            let stats = self.config.use_norm.then(|| &tape.stats[li]);
            // dL/dy (post-normalization, pre-activation)
            let dy: Vec<Matrix> = if self.is_last(li) {
                g
            } else {
                zs.iter()
                    .zip(&g)
                    .map(|(z, gi)| ops::leaky_relu_backward(&self.normalize(li, z, stats), gi, slope))
                    .collect()
            };
            let lg = &mut grads.layers[li];
            let dz = match stats {
                Some((mean, var)) => ops::batch_norm_backward(
                    zs,
                    mean,
                    var,
                    &l.gamma,
                    self.config.eps,
                    &dy,
                    &mut lg.gamma,
                    &mut lg.beta,
                ),
                None => dy,
            };
            let conv = geom.with_channels(l.in_ch, l.out_ch);
            let want_dx = li > 0 || need_input_grad;
            let mut next = Vec::with_capacity(dz.len());
            for (bi, dzi) in dz.iter().enumerate() {
                let input = if li == 0 {
                    tape.input[bi].clone()
                } else {
                    let prev = &tape.conv_out[li - 1][bi];
                    let pstats = self.config.use_norm.then(|| &tape.stats[li - 1]);
                    ops::leaky_relu(&self.normalize(li - 1, prev, pstats), slope)
                };
                if let Some(dx) = conv.backward(&input, &l.weight, dzi, &mut lg.weight, &mut lg.bias, want_dx) {
                    next.push(dx);
                }
            }
            g = next;
        }
        Ok((grads, need_input_grad.then_some(g)))
    }

    /// Sign pattern of every activation input recorded in `tape`; a change
    /// between two tapes means a leaky ReLU kink was crossed.
    pub(crate) fn activation_signs(&self, tape: &Tape) -> Vec<bool> {
        let mut out = Vec::new();
        for li in 0..self.layers.len() {
            if self.is_last(li) {
                continue;
            }
            let stats = self.config.use_norm.then(|| &tape.stats[li]);
            for z in &tape.conv_out[li] {
                out.extend(self.normalize(li, z, stats).as_slice().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Visits every trainable tensor with its gradient and whether weight
    /// decay applies to it.
    fn trainable_mut<'a>(
        &'a mut self,
        grads: &'a Grads,
    ) -> impl Iterator<Item = (&'a mut Vec<f64>, &'a Vec<f64>, bool)> {
        self.layers.iter_mut().zip(&grads.layers).flat_map(|(l, g)| {
            [
                (&mut l.weight, &g.weight, true),
                (&mut l.bias, &g.bias, false),
                (&mut l.gamma, &g.gamma, false),
                (&mut l.beta, &g.beta, false),
            ]
        })
    }
}

/// `p ← p − lr·(g + wd·p)` for convolution weights; biases and
/// normalization parameters get no decay.
pub fn sgd_step(params: &mut NetworkParams, grads: &Grads, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::shape("gradient layer count differs from the network"));
    }
    for (p, g, decay) in params.trainable_mut(grads) {
        if p.len() != g.len() {
            return Err(Error::shape("gradient tensor size differs from its parameter"));
        }
        let wd = if decay { weight_decay } else { 0.0 };
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * (gv + wd * *pv);
        }
    }
    Ok(())
}
