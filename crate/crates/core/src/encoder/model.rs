//! Fully connected encoder with batch normalization and ReLU after every
//! hidden layer. All trainable values live in one flat vector so gradients
//! and optimizer state share its layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Layer widths from input to output plus the bias switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// `[input, hidden..., output]`; empty for a parameterless encoder.
    pub dims: Vec<usize>,
    pub bias: bool,
}

impl Default for Architecture {
    /// 402 -> 150 -> 150 -> 128.
    fn default() -> Self {
        Architecture {
            dims: vec![402, 150, 150, 128],
            bias: true,
        }
    }
}

impl Architecture {
    pub fn layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    /// Offsets into the flat parameter vector.
    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut layers = Vec::new();
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let weight = offset;
            offset += fan_in * fan_out;
            let bias = self.bias.then(|| {
                let b = offset;
                offset += fan_out;
                b
            });
            let norm = (l + 1 < self.layers()).then(|| {
                let gamma = offset;
                offset += 2 * fan_out;
                (gamma, gamma + fan_out)
            });
            layers.push(LayerOffsets {
                fan_in,
                fan_out,
                weight,
                bias,
                norm,
            });
        }
        Layout {
            layers,
            total: offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in x fan_out` weight block.
    pub weight: usize,
    pub bias: Option<usize>,
    /// `(gamma, beta)` offsets for hidden layers.
    pub norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerOffsets>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    arch: Architecture,
    layout: Layout,
    values: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediates of a forward pass needed by [`EncoderParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    mode: Mode,
    /// Input of every layer (`inputs[0]` is the batch itself).
    inputs: Vec<Vec<f64>>,
    /// Normalized pre-activations of hidden layers.
    xhat: Vec<Vec<f64>>,
    /// `gamma * xhat + beta` before the ReLU.
    pre_relu: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    batch_mean: Vec<Vec<f64>>,
    batch_var: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Per-feature batch variance (biased) of each hidden layer's affine output.
    pub fn batch_var(&self) -> &[Vec<f64>] {
        &self.batch_var
    }

    /// Normalized (pre-gain) values of each hidden layer.
    pub fn normalized(&self) -> &[Vec<f64>] {
        &self.xhat
    }
}

/// `out[b, :] += x[b, :] * W` for a row-major `fan_in x fan_out` block.
pub(crate) fn affine(x: &[f64], w: &[f64], bias: Option<&[f64]>, batch: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * fan_out];
    for b in 0..batch {
        let row = &mut out[b * fan_out..(b + 1) * fan_out];
        if let Some(bias) = bias {
            row.copy_from_slice(bias);
        }
        for i in 0..fan_in {
            let xi = x[b * fan_in + i];
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * fan_out..(i + 1) * fan_out];
            for (o, wv) in row.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
    out
}

impl EncoderParams {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, unit gains,
    /// zero shifts and running statistics `(0, 1)`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layout = arch.layout();
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        for l in &layout.layers {
            let bound = (6.0 / l.fan_in as f64).sqrt();
            for v in &mut values[l.weight..l.weight + l.fan_in * l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            if let Some((gamma, _)) = l.norm {
                values[gamma..gamma + l.fan_out].fill(1.0);
                running_mean.push(vec![0.0; l.fan_out]);
                running_var.push(vec![1.0; l.fan_out]);
            }
        }
        EncoderParams {
            arch,
            layout,
            values,
            running_mean,
            running_var,
        }
    }

    pub fn from_parts(
        arch: Architecture,
        values: Vec<f64>,
        running_mean: Vec<Vec<f64>>,
        running_var: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let layout = arch.layout();
        if values.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameter values for an architecture with {}",
                values.len(),
                layout.total
            )));
        }
        let hidden: Vec<usize> = layout
            .layers
            .iter()
            .filter(|l| l.norm.is_some())
            .map(|l| l.fan_out)
            .collect();
        let shapes_ok = |stats: &[Vec<f64>]| {
            stats.len() == hidden.len() && stats.iter().zip(&hidden).all(|(s, &n)| s.len() == n)
        };
        if !shapes_ok(&running_mean) || !shapes_ok(&running_var) {
            return Err(Error::Shape("running statistics do not match architecture".into()));
        }
        if running_var.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Precondition("running variances must be positive".into()));
        }
        Ok(EncoderParams {
            arch,
            layout,
            values,
            running_mean,
            running_var,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Flat trainable values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn running_mean(&self) -> &[Vec<f64>] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[Vec<f64>] {
        &self.running_var
    }

    /// Weights, biases, gains and shifts; running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn forward(&self, batch: &[f64], batch_size: usize, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
        let in_dim = self.arch.input_dim();
        if batch.len() != batch_size * in_dim {
            return Err(Error::Shape(format!(
                "batch of {} values is not {batch_size} x {in_dim}",
                batch.len()
            )));
        }
        if mode == Mode::Train && batch_size < 2 {
            return Err(Error::Precondition(
                "train-mode forward needs a batch of at least 2".into(),
            ));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let mut cache = ForwardCache {
            batch: batch_size,
            mode,
            inputs: Vec::new(),
            xhat: Vec::new(),
            pre_relu: Vec::new(),
            inv_std: Vec::new(),
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
        };
        let mut x = batch.to_vec();
        for (li, l) in self.layout.layers.iter().enumerate() {
            let w = &self.values[l.weight..l.weight + l.fan_in * l.fan_out];
            let bias = l.bias.map(|b| &self.values[b..b + l.fan_out]);
            let z = affine(&x, w, bias, batch_size, l.fan_in, l.fan_out);
            cache.inputs.push(x);
            let Some((g_off, b_off)) = l.norm else {
                x = z;
                continue;
            };
            let n = l.fan_out;
            let (mean, var) = match mode {
                Mode::Train => batch_moments(&z, batch_size, n),
                Mode::Eval => (self.running_mean[li].clone(), self.running_var[li].clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = &self.values[g_off..g_off + n];
            let beta = &self.values[b_off..b_off + n];
            let mut xhat = vec![0.0; z.len()];
            let mut pre = vec![0.0; z.len()];
            let mut act = vec![0.0; z.len()];
            for b in 0..batch_size {
                for j in 0..n {
                    let k = b * n + j;
                    xhat[k] = (z[k] - mean[j]) * inv_std[j];
                    pre[k] = gamma[j] * xhat[k] + beta[j];
                    act[k] = pre[k].max(0.0);
                }
            }
            cache.xhat.push(xhat);
            cache.pre_relu.push(pre);
            cache.inv_std.push(inv_std);
            cache.batch_mean.push(mean);
            cache.batch_var.push(var);
            x = act;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok((x, cache))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let correction = cache.batch as f64 / (cache.batch as f64 - 1.0);
        for (li, (mean, var)) in cache.batch_mean.iter().zip(&cache.batch_var).enumerate() {
            for j in 0..mean.len() {
                let rm = &mut self.running_mean[li][j];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j];
                let rv = &mut self.running_var[li][j];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[j] * correction;
            }
        }
    }

    /// Gradients of a scalar loss with respect to every trainable value (flat
    /// layout) and to the input batch, given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = cache.batch;
        if cache.mode != Mode::Train {
            return Err(Error::Precondition("backward needs a train-mode cache".into()));
        }
        if grad_out.len() != batch * self.arch.output_dim() || cache.inputs.len() != self.layout.layers.len() {
            return Err(Error::Shape(format!(
                "upstream gradient of {} values for a {}x{} output",
                grad_out.len(),
                batch,
                self.arch.output_dim()
            )));
        }
        let mut grads = vec![0.0; self.values.len()];
        let mut upstream = grad_out.to_vec();
        for (li, l) in self.layout.layers.iter().enumerate().rev() {
            let (fan_in, fan_out) = (l.fan_in, l.fan_out);
            let mut dz = upstream;
            if let Some((g_off, b_off)) = l.norm {
                let hidden = li;
                let xhat = &cache.xhat[hidden];
                let pre = &cache.pre_relu[hidden];
                let inv_std = &cache.inv_std[hidden];
                let gamma = &self.values[g_off..g_off + fan_out];
                let mut sum_dxhat = vec![0.0; fan_out];
                let mut sum_dxhat_xhat = vec![0.0; fan_out];
                let mut dxhat = vec![0.0; dz.len()];
                for b in 0..batch {
                    for j in 0..fan_out {
                        let k = b * fan_out + j;
                        let dy = if pre[k] > 0.0 { dz[k] } else { 0.0 };
                        grads[g_off + j] += dy * xhat[k];
                        grads[b_off + j] += dy;
                        dxhat[k] = dy * gamma[j];
                        sum_dxhat[j] += dxhat[k];
                        sum_dxhat_xhat[j] += dxhat[k] * xhat[k];
                    }
                }
                let nb = batch as f64;
                for b in 0..batch {
                    for j in 0..fan_out {
                        let k = b * fan_out + j;
                        dz[k] = inv_std[j] / nb
                            * (nb * dxhat[k] - sum_dxhat[j] - xhat[k] * sum_dxhat_xhat[j]);
                    }
                }
            }
            let x = &cache.inputs[li];
            let w = &self.values[l.weight..l.weight + fan_in * fan_out];
            let mut dx = vec![0.0; batch * fan_in];
            for b in 0..batch {
                let dzr = &dz[b * fan_out..(b + 1) * fan_out];
                if let Some(b_off) = l.bias {
                    for (g, d) in grads[b_off..b_off + fan_out].iter_mut().zip(dzr) {
                        *g += d;
                    }
                }
                for i in 0..fan_in {
                    let xi = x[b * fan_in + i];
                    let wrow = &w[i * fan_out..(i + 1) * fan_out];
                    let grow = &mut grads[l.weight + i * fan_out..l.weight + (i + 1) * fan_out];
                    let mut acc = 0.0;
                    for ((g, d), wv) in grow.iter_mut().zip(dzr).zip(wrow) {
                        *g += xi * d;
                        acc += d * wv;
                    }
                    dx[b * fan_in + i] = acc;
                }
            }
            upstream = dx;
        }
        Ok((grads, upstream))
    }

    /// Rewrites the first layer so that raw inputs give the outputs the
    /// current parameters give on `(x - mean) / scale`.
    pub fn fold_input_standardization(&mut self, mean: &[f64], scale: &[f64]) -> Result<()> {
        let Some(l) = self.layout.layers.first().copied() else {
            return Ok(());
        };
        if mean.len() != l.fan_in || scale.len() != l.fan_in {
            return Err(Error::Shape("standardization vectors do not match input".into()));
        }
        let Some(b_off) = l.bias else {
            return Err(Error::Precondition(
                "folding standardization needs a first-layer bias".into(),
            ));
        };
        for i in 0..l.fan_in {
            for o in 0..l.fan_out {
                let w = &mut self.values[l.weight + i * l.fan_out + o];
                *w /= scale[i];
                self.values[b_off + o] -= mean[i] * *w;
            }
        }
        Ok(())
    }
}

/// Per-feature mean and biased variance over the batch.
fn batch_moments(z: &[f64], batch: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n];
    for b in 0..batch {
        for j in 0..n {
            mean[j] += z[b * n + j];
        }
    }
    for m in &mut mean {
        *m /= batch as f64;
    }
    let mut var = vec![0.0; n];
    for b in 0..batch {
        for j in 0..n {
            let d = z[b * n + j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= batch as f64;
    }
    (mean, var)
}
