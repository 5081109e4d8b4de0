//! Layer primitives with hand-written backward passes.
//!
//! Layers hold [`Span`]s into a flat parameter vector and never own weights.
//! Every `backward` accumulates parameter gradients into a buffer laid out
//! like [`ParamStore::values`] and returns the input gradient.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Span};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Output indices `o` in `[0, out_len)` with `0 <= o * stride + off < in_len`.
#[inline]
fn strided_range(out_len: usize, in_len: usize, off: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (in_len as isize - off + s - 1).div_euclid(s);
    let hi = hi.clamp(0, out_len as isize) as usize;
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Span,
    pub bias: Span,
}

impl Conv2d {
    /// Weights `[cout, cin, k, k]`, Kaiming fan-in init, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Conv2d {
        let weight = store.add_normal(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            kaiming_std(cin * k * k),
            rng,
        );
        let bias = store.add_constant(&format!("{name}.bias"), &[cout], 0.0);
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.cin
            || x.height() + 2 * self.pad < self.k
            || x.width() + 2 * self.pad < self.k
        {
            return Err(Error::shape(format!(
                "conv expects {} input channels and spatial size >= {}, got {:?}",
                self.cin, self.k, x.shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_dims(h, w);
        let (wt, bias) = (self.weight.of(p), self.bias.of(p));
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let mut y = Tensor::zeros([n, self.cout, oh, ow]);
        for b in 0..n {
            for co in 0..self.cout {
                let out = &mut y.data
                    [((b * self.cout + co) * oh * ow)..((b * self.cout + co + 1) * oh * ow)];
                out.iter_mut().for_each(|v| *v = bias[co]);
                for ci in 0..self.cin {
                    let inp =
                        &x.data[((b * self.cin + ci) * h * w)..((b * self.cin + ci + 1) * h * w)];
                    for ky in 0..k {
                        let offy = ky as isize - pad;
                        let (oy0, oy1) = strided_range(oh, h, offy, s);
                        for kx in 0..k {
                            let wv = wt[((co * self.cin + ci) * k + ky) * k + kx];
                            let offx = kx as isize - pad;
                            let (ox0, ox1) = strided_range(ow, w, offx, s);
                            for oy in oy0..oy1 {
                                let iy = (oy * s) as isize + offy;
                                let row = &inp[iy as usize * w..];
                                let orow = &mut out[oy * ow..(oy + 1) * ow];
                                for ox in ox0..ox1 {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    orow[ox] += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&self, p: &[f64], x: &Tensor, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let [n, _, h, w] = x.shape;
        let [_, _, oh, ow] = dy.shape;
        let wt = self.weight.of(p);
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let mut dx = Tensor::zeros(x.shape);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; self.cout];
        for b in 0..n {
            for co in 0..self.cout {
                let g = &dy.data
                    [((b * self.cout + co) * oh * ow)..((b * self.cout + co + 1) * oh * ow)];
                db[co] += g.iter().sum::<f64>();
                for ci in 0..self.cin {
                    let base = (b * self.cin + ci) * h * w;
                    for ky in 0..k {
                        let offy = ky as isize - pad;
                        let (oy0, oy1) = strided_range(oh, h, offy, s);
                        for kx in 0..k {
                            let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let offx = kx as isize - pad;
                            let (ox0, ox1) = strided_range(ow, w, offx, s);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = ((oy * s) as isize + offy) as usize;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                for ox in ox0..ox1 {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    let xi = base + iy * w + ix;
                                    acc += grow[ox] * x.data[xi];
                                    dx.data[xi] += wv * grow[ox];
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        accumulate(grads, self.weight, &dw);
        accumulate(grads, self.bias, &db);
        dx
    }
}

/// Transposed convolution, weights `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Span,
    pub bias: Span,
}

impl ConvTranspose2d {
    /// Kernel 4, stride 2, padding 1: doubles the spatial size.
    pub fn upsample2(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut Rng,
    ) -> Self {
        let (k, stride, pad) = (4, 2, 1);
        // each output pixel sees cin * (k/stride)^2 inputs
        let fan_in = cin * (k / stride) * (k / stride);
        let weight = store.add_normal(
            &format!("{name}.weight"),
            &[cin, cout, k, k],
            kaiming_std(fan_in),
            rng,
        );
        let bias = store.add_constant(&format!("{name}.bias"), &[cout], 0.0);
        ConvTranspose2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.pad,
            (w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.cin {
            return Err(Error::shape(format!(
                "transposed conv expects {} channels, got {:?}",
                self.cin, x.shape
            )));
        }
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_dims(h, w);
        let (wt, bias) = (self.weight.of(p), self.bias.of(p));
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let mut y = Tensor::zeros([n, self.cout, oh, ow]);
        for b in 0..n {
            for co in 0..self.cout {
                let out = &mut y.data
                    [((b * self.cout + co) * oh * ow)..((b * self.cout + co + 1) * oh * ow)];
                out.iter_mut().for_each(|v| *v = bias[co]);
                for ci in 0..self.cin {
                    let inp =
                        &x.data[((b * self.cin + ci) * h * w)..((b * self.cin + ci + 1) * h * w)];
                    for ky in 0..k {
                        let offy = ky as isize - pad;
                        let (iy0, iy1) = strided_range(h, oh, offy, s);
                        for kx in 0..k {
                            let wv = wt[((ci * self.cout + co) * k + ky) * k + kx];
                            let offx = kx as isize - pad;
                            let (ix0, ix1) = strided_range(w, ow, offx, s);
                            for iy in iy0..iy1 {
                                let oy = ((iy * s) as isize + offy) as usize;
                                let irow = &inp[iy * w..(iy + 1) * w];
                                let orow = &mut out[oy * ow..(oy + 1) * ow];
                                for ix in ix0..ix1 {
                                    let ox = ((ix * s) as isize + offx) as usize;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&self, p: &[f64], x: &Tensor, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let [n, _, h, w] = x.shape;
        let [_, _, oh, ow] = dy.shape;
        let wt = self.weight.of(p);
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let mut dx = Tensor::zeros(x.shape);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; self.cout];
        for b in 0..n {
            for co in 0..self.cout {
                let g = &dy.data
                    [((b * self.cout + co) * oh * ow)..((b * self.cout + co + 1) * oh * ow)];
                db[co] += g.iter().sum::<f64>();
                for ci in 0..self.cin {
                    let base = (b * self.cin + ci) * h * w;
                    for ky in 0..k {
                        let offy = ky as isize - pad;
                        let (iy0, iy1) = strided_range(h, oh, offy, s);
                        for kx in 0..k {
                            let widx = ((ci * self.cout + co) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let offx = kx as isize - pad;
                            let (ix0, ix1) = strided_range(w, ow, offx, s);
                            let mut acc = 0.0;
                            for iy in iy0..iy1 {
                                let oy = ((iy * s) as isize + offy) as usize;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                for ix in ix0..ix1 {
                                    let ox = ((ix * s) as isize + offx) as usize;
                                    let xi = base + iy * w + ix;
                                    acc += grow[ox] * x.data[xi];
                                    dx.data[xi] += wv * grow[ox];
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        accumulate(grads, self.weight, &dw);
        accumulate(grads, self.bias, &db);
        dx
    }
}

/// How a [`BatchNorm`] normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running statistics (inference).
    Running,
    /// Identity, used to isolate other layers in tests.
    PassThrough,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Span,
    pub beta: Span,
    pub running_mean: Span,
    pub running_var: Span,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Batch statistics waiting to be folded into the running buffers.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: Span,
    pub running_var: Span,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            channels,
            gamma: store.add_constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_constant(&format!("{name}.beta"), &[channels], 0.0),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), &[channels], 0.0),
            running_var: store.add_buffer(&format!("{name}.running_var"), &[channels], 1.0),
        }
    }

    pub fn forward(
        &self,
        p: &[f64],
        x: &Tensor,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Tensor, BnCache)> {
        let [n, c, h, w] = x.shape;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {:?}",
                self.channels, x.shape
            )));
        }
        if mode == BnMode::PassThrough {
            let cache = BnCache {
                mode,
                xhat: Vec::new(),
                inv_std: Vec::new(),
            };
            return Ok((x.clone(), cache));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let (gamma, beta) = (self.gamma.of(p), self.beta.of(p));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            BnMode::Batch => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x.data[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += x.data[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|&t| (t - m) * (t - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                let unbiased = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean: mean.clone(),
                    var: var.iter().map(|v| v * unbiased).collect(),
                });
            }
            BnMode::Running => {
                mean.copy_from_slice(self.running_mean.of(p));
                var.copy_from_slice(self.running_var.of(p));
            }
            BnMode::PassThrough => unreachable!(),
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = Tensor::zeros(x.shape);
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (x.data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y.data[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn backward(&self, p: &[f64], cache: &BnCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        if cache.mode == BnMode::PassThrough {
            return dy.clone();
        }
        let [n, c, h, w] = dy.shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let gamma = self.gamma.of(p);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dgamma[ch] += dy.data[i] * cache.xhat[i];
                    dbeta[ch] += dy.data[i];
                }
            }
        }
        let mut dx = Tensor::zeros(dy.shape);
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dx.data[i] = match cache.mode {
                        BnMode::Batch => {
                            scale * (dy.data[i] - (dbeta[ch] + cache.xhat[i] * dgamma[ch]) / count)
                        }
                        _ => scale * dy.data[i],
                    };
                }
            }
        }
        accumulate(grads, self.gamma, &dgamma);
        accumulate(grads, self.beta, &dbeta);
        dx
    }
}

/// Folds batch statistics into running buffers:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn commit_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (r, m) in u
            .running_mean
            .of_mut(&mut store.values)
            .iter_mut()
            .zip(&u.mean)
        {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, v) in u
            .running_var
            .of_mut(&mut store.values)
            .iter_mut()
            .zip(&u.var)
        {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Backward of [`leaky_relu`] given its input.
pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    Tensor {
        shape: dy.shape,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
            .collect(),
    }
}

/// Backward of tanh given its output.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: dy.shape,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&t, &g)| g * (1.0 - t * t))
            .collect(),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-channel spatial mean: `[n, c, h, w] -> n x c`.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let plane = x.plane();
    x.data
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn global_avg_pool_backward(shape: [usize; 4], dpool: &[f64]) -> Tensor {
    let plane = shape[2] * shape[3];
    let mut dx = Tensor::zeros(shape);
    for (chunk, &g) in dx.data.chunks_mut(plane).zip(dpool) {
        chunk.iter_mut().for_each(|v| *v = g / plane as f64);
    }
    dx
}

/// Dense layer, weights `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Span,
    pub bias: Span,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Linear {
        Linear {
            fan_in,
            fan_out,
            weight: store.add_normal(
                &format!("{name}.weight"),
                &[fan_out, fan_in],
                (1.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: store.add_constant(&format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    /// `x` holds `batch` rows of `fan_in` values.
    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (wt, bias) = (self.weight.of(p), self.bias.of(p));
        x.chunks(self.fan_in)
            .flat_map(|row| {
                (0..self.fan_out).map(move |o| {
                    bias[o]
                        + wt[o * self.fan_in..(o + 1) * self.fan_in]
                            .iter()
                            .zip(row)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
            })
            .collect()
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let wt = self.weight.of(p);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; self.fan_out];
        for (b, row) in x.chunks(self.fan_in).enumerate() {
            for o in 0..self.fan_out {
                let g = dy[b * self.fan_out + o];
                db[o] += g;
                for i in 0..self.fan_in {
                    dw[o * self.fan_in + i] += g * row[i];
                    dx[b * self.fan_in + i] += g * wt[o * self.fan_in + i];
                }
            }
        }
        accumulate(grads, self.weight, &dw);
        accumulate(grads, self.bias, &db);
        dx
    }
}

fn accumulate(grads: &mut [f64], span: Span, g: &[f64]) {
    for (a, b) in span.of_mut(grads).iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_param_grad, random_tensor};
    use crate::rng;

    #[test]
    fn strided_range_bounds() {
        // stride 2, offset -1, input 8: o*2-1 in [0,8) => o in [1, 4]
        assert_eq!(strided_range(4, 8, -1, 2), (1, 4));
        assert_eq!(strided_range(4, 8, 2, 2), (0, 3));
        assert_eq!(strided_range(8, 8, 0, 1), (0, 8));
        assert_eq!(strided_range(3, 2, 5, 1), (0, 0));
    }

    fn conv_probe(k: usize, stride: usize, pad: usize) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(3, 0);
        let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride, pad, &mut r);
        let x = random_tensor([2, 2, 8, 8], 11);
        let (oh, ow) = conv.out_dims(8, 8);
        let probe = random_tensor([2, 3, oh, ow], 12);
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let y = conv.forward(p, x).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| conv.backward(p, x, &probe, g);
        check_input_grad(&store.values, &x, &loss, &back, 1e-4);
        check_param_grad(
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
            1e-4,
        );
    }

    #[test]
    fn conv_gradients() {
        conv_probe(3, 1, 1);
        conv_probe(3, 2, 1);
        conv_probe(1, 1, 0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(5, 0);
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 2, 1, &mut r);
        let x = random_tensor([1, 1, 6, 6], 1);
        let y = conv.forward(&store.values, &x).unwrap();
        let wt = conv.weight.of(&store.values);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if (0..6).contains(&iy) && (0..6).contains(&ix) {
                            s += wt[ky * 3 + kx] * x.data[iy as usize * 6 + ix as usize];
                        }
                    }
                }
                assert!((y.data[oy * 3 + ox] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <convT(x), y> = <x, conv(y)> for matching weights and zero bias
        let mut store = ParamStore::new();
        let mut r = rng::seeded(6, 0);
        let up = ConvTranspose2d::upsample2(&mut store, "u", 2, 3, &mut r);
        let x = random_tensor([1, 2, 4, 4], 2);
        let y = random_tensor([1, 3, 8, 8], 3);
        let ux = up.forward(&store.values, &x).unwrap();
        assert_eq!(ux.shape, [1, 3, 8, 8]);
        let mut p = store.values.clone();
        p.extend([0.0, 0.0]);
        let down = Conv2d {
            cin: 3,
            cout: 2,
            k: 4,
            stride: 2,
            pad: 1,
            weight: up.weight,
            bias: Span {
                offset: p.len() - 2,
                len: 2,
            },
        };
        let dy = down.forward(&p, &y).unwrap();
        let lhs: f64 = ux.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(7, 0);
        let up = ConvTranspose2d::upsample2(&mut store, "u", 3, 2, &mut r);
        let x = random_tensor([2, 3, 4, 4], 4);
        let probe = random_tensor([2, 2, 8, 8], 5);
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let y = up.forward(p, x).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| up.backward(p, x, &probe, g);
        check_input_grad(&store.values, &x, &loss, &back, 1e-4);
        check_param_grad(
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
            1e-4,
        );
    }

    fn bn_probe(mode: BnMode) {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let mut p = store.values.clone();
        // non-trivial affine and running statistics
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.1 * (i as f64 + 1.0).sin();
        }
        let x = random_tensor([2, 3, 4, 4], 9);
        // squared probe makes the batch-mode gradient non-trivial
        let probe = random_tensor([2, 3, 4, 4], 10);
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let (y, _) = bn.forward(p, x, mode, &mut Vec::new()).unwrap();
            y.data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b + 0.5 * a * a)
                .sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let (y, cache) = bn.forward(p, x, mode, &mut Vec::new()).unwrap();
            let dy = Tensor {
                shape: y.shape,
                data: y.data.iter().zip(&probe.data).map(|(a, b)| b + a).collect(),
            };
            bn.backward(p, &cache, &dy, g)
        };
        check_input_grad(&p, &x, &loss, &back, 1e-4);
        check_param_grad(&p, &store.trainable_indices(), &x, &loss, &back, 1e-4);
    }

    #[test]
    fn batch_norm_gradients() {
        bn_probe(BnMode::Batch);
        bn_probe(BnMode::Running);
        bn_probe(BnMode::PassThrough);
    }

    #[test]
    fn batch_norm_normalizes_and_tracks_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = random_tensor([3, 2, 5, 5], 1).map(|v| 4.0 * v + 7.0);
        let mut updates = Vec::new();
        let (y, _) = bn
            .forward(&store.values, &x, BnMode::Batch, &mut updates)
            .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data[(b * 2 + ch) * 25..(b * 2 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|t| (t - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        assert_eq!(updates.len(), 1);
        let batch_mean = updates[0].mean.clone();
        commit_bn_updates(&mut store, &updates, BN_MOMENTUM);
        let rm = bn.running_mean.of(&store.values);
        for ch in 0..2 {
            assert!((rm[ch] - 0.1 * batch_mean[ch]).abs() < 1e-12);
        }
        // a constant input stays finite
        let flat = Tensor::zeros([1, 2, 4, 4]).map(|_| 3.0);
        let (y, _) = bn
            .forward(&store.values, &flat, BnMode::Batch, &mut Vec::new())
            .unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn linear_and_pool_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(8, 0);
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut r);
        let x = random_tensor([2, 3, 4, 4], 6);
        let probe = [0.3, -1.2, 0.7, 2.0];
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let pooled = global_avg_pool(x);
            lin.forward(p, &pooled)
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let pooled = global_avg_pool(x);
            let dp = lin.backward(p, &pooled, &probe, g);
            global_avg_pool_backward(x.shape, &dp)
        };
        check_input_grad(&store.values, &x, &loss, &back, 1e-4);
        check_param_grad(
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
            1e-4,
        );
    }

    #[test]
    fn activation_gradients() {
        let x = random_tensor([1, 2, 3, 3], 13);
        let probe = random_tensor([1, 2, 3, 3], 14);
        let dot = |a: &Tensor| {
            a.data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let loss = |_: &[f64], x: &Tensor| dot(&leaky_relu(x, 0.2));
        let back = |_: &[f64], x: &Tensor, _: &mut [f64]| leaky_relu_backward(x, &probe, 0.2);
        check_input_grad(&[], &x, &loss, &back, 1e-4);
        let loss = |_: &[f64], x: &Tensor| dot(&x.map(f64::tanh));
        let back = |_: &[f64], x: &Tensor, _: &mut [f64]| tanh_backward(&x.map(f64::tanh), &probe);
        check_input_grad(&[], &x, &loss, &back, 1e-4);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
