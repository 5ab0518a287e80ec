//! Encoder building blocks with hand-written backward passes.
//!
//! Every layer works on channel-first [`Tensor`]s with three spatial axes;
//! planar layers simply use a depth extent of one.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Channel-first activation map: `[channel][z][y][x]`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    fn row(&self, c: usize, z: usize, y: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2]
    }
}

/// Output indices `o` for which `o + offset` stays inside `[0, n)`.
#[inline]
fn valid(n: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    lo..hi.max(lo)
}

/// Same-padded convolution with odd kernel extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    /// `[out][in][kz][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let n = out_channels * fan_in;
        Conv {
            in_channels,
            out_channels,
            kernel,
            weight: (0..n).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((o * self.in_channels + i) * self.kernel[0] + kz) * self.kernel[1] + ky) * self.kernel[2] + kx
    }

    fn offsets(&self, kz: usize, ky: usize, kx: usize) -> [isize; 3] {
        [
            kz as isize - (self.kernel[0] / 2) as isize,
            ky as isize - (self.kernel[1] / 2) as isize,
            kx as isize - (self.kernel[2] / 2) as isize,
        ]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_channels);
        let [d, h, w] = x.dims;
        let mut out = Tensor::zeros(self.out_channels, x.dims);
        let plane = out.spatial_len();
        for o in 0..self.out_channels {
            out.data[o * plane..(o + 1) * plane].fill(self.bias[o]);
            for i in 0..self.in_channels {
                for kz in 0..self.kernel[0] {
                    for ky in 0..self.kernel[1] {
                        for kx in 0..self.kernel[2] {
                            let wv = self.weight[self.widx(o, i, kz, ky, kx)];
                            let [dz, dy, dx] = self.offsets(kz, ky, kx);
                            let xs = valid(w, dx);
                            for z in valid(d, dz) {
                                for y in valid(h, dy) {
                                    let ib = x.row(i, (z as isize + dz) as usize, (y as isize + dy) as usize);
                                    let ob = out.row(o, z, y);
                                    let src = &x.data[(ib as isize + xs.start as isize + dx) as usize..][..xs.len()];
                                    let dst = &mut out.data[ob + xs.start..][..xs.len()];
                                    for (dv, sv) in dst.iter_mut().zip(src) {
                                        *dv += wv * sv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grad_w: &mut [f64], grad_b: &mut [f64]) -> Tensor {
        let [d, h, w] = x.dims;
        let mut grad_in = Tensor::zeros(self.in_channels, x.dims);
        let plane = grad_out.spatial_len();
        for o in 0..self.out_channels {
            grad_b[o] += grad_out.data[o * plane..(o + 1) * plane].iter().sum::<f64>();
            for i in 0..self.in_channels {
                for kz in 0..self.kernel[0] {
                    for ky in 0..self.kernel[1] {
                        for kx in 0..self.kernel[2] {
                            let wi = self.widx(o, i, kz, ky, kx);
                            let wv = self.weight[wi];
                            let [dz, dy, dx] = self.offsets(kz, ky, kx);
                            let xs = valid(w, dx);
                            let mut gw = 0.0;
                            for z in valid(d, dz) {
                                for y in valid(h, dy) {
                                    let ib = (x.row(i, (z as isize + dz) as usize, (y as isize + dy) as usize) as isize
                                        + xs.start as isize
                                        + dx) as usize;
                                    let ob = grad_out.row(o, z, y) + xs.start;
                                    let g = &grad_out.data[ob..][..xs.len()];
                                    let src = &x.data[ib..][..xs.len()];
                                    let dst = &mut grad_in.data[ib..][..xs.len()];
                                    for k in 0..xs.len() {
                                        gw += g[k] * src[k];
                                        dst[k] += wv * g[k];
                                    }
                                }
                            }
                            grad_w[wi] += gw;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        channels: x.channels,
        dims: x.dims,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient of ReLU given its input `x`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        channels: x.channels,
        dims: x.dims,
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Non-overlapping max pooling; trailing voxels that do not fill a window are dropped.
pub fn maxpool_forward(x: &Tensor, window: [usize; 3]) -> (Tensor, Vec<usize>) {
    let od = [x.dims[0] / window[0], x.dims[1] / window[1], x.dims[2] / window[2]];
    let mut out = Tensor::zeros(x.channels, od);
    let mut argmax = vec![0usize; out.data.len()];
    let mut oi = 0;
    for c in 0..x.channels {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for wz in 0..window[0] {
                        for wy in 0..window[1] {
                            let row = x.row(c, z * window[0] + wz, y * window[1] + wy);
                            for wx in 0..window[2] {
                                let idx = row + xx * window[2] + wx;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    at = idx;
                                }
                            }
                        }
                    }
                    out.data[oi] = best;
                    argmax[oi] = at;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(input: &Tensor, argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(input.channels, input.dims);
    for (&at, &g) in argmax.iter().zip(&grad_out.data) {
        grad.data[at] += g;
    }
    grad
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = x.spatial_len();
    x.data.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect()
}

pub fn global_avg_pool_backward(channels: usize, dims: [usize; 3], grad: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(channels, dims);
    let n = out.spatial_len();
    for (c, chunk) in out.data.chunks_mut(n).enumerate() {
        chunk.fill(grad[c] / n as f64);
    }
    out
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        Dense {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            grad_b[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad_w[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

/// Returns `x / |x|` and `|x|`. A zero vector maps to zero.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (vec![0.0; x.len()], 0.0);
    }
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Gradient of `x / |x|` given the normalized output `y` and `|x|`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, grad_out: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; y.len()];
    }
    let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    y.iter().zip(grad_out).map(|(&yi, &g)| (g - yi * dot) / norm).collect()
}

/// Elementwise sign with `sgn(0) = +1`.
pub fn sign_layer_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect()
}

/// Straight-through estimator: the upstream gradient passes unchanged.
pub fn sign_layer_backward(grad_out: &[f64]) -> Vec<f64> {
    grad_out.to_vec()
}
