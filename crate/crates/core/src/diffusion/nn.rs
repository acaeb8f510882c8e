//! Minimal layers for the toy denoiser. Weights are seeded, never trained.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Matrix;

/// `y = x W + b`, with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Matrix,
    bias: Vec<f32>,
}

impl Linear {
    /// He-normal weights, zero bias, scaled by `gain`.
    pub fn he<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f32) -> Self {
        let std = gain * (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, data).expect("sized"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight).expect("layer input width matches");
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    pub fn forward_vec(&self, x: &[f32]) -> Vec<f32> {
        let row = Matrix::new(1, x.len(), x.to_vec()).expect("sized");
        self.forward(&row).into_data()
    }
}

/// 3×3 convolution with zero padding over a row-major `H × W` grid.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    taps: Vec<Matrix>,
    out_channels: usize,
}

impl Conv3x3 {
    pub fn he<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize) -> Self {
        let std = (2.0 / (9 * in_channels) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let taps = (0..9)
            .map(|_| {
                let data = (0..in_channels * out_channels).map(|_| normal.sample(rng)).collect();
                Matrix::new(in_channels, out_channels, data).expect("sized")
            })
            .collect();
        Self { taps, out_channels }
    }

    pub fn forward(&self, x: &Matrix, grid: (usize, usize)) -> Matrix {
        let (h, w) = grid;
        let mut out = Matrix::zeros(h * w, self.out_channels);
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                for (t, tap) in self.taps.iter().enumerate() {
                    let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = x.row(sy as usize * w + sx as usize);
                    let dst = out.row_mut(p);
                    for (c, &a) in src.iter().enumerate() {
                        for (o, &wt) in dst.iter_mut().zip(tap.row(c)) {
                            *o += a * wt;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Per-patch normalization over channels, no affine parameters.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f32>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub fn gelu(x: f32) -> f32 {
    // tanh approximation
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// 2×2 average pooling, halving both grid sides.
pub fn avg_pool2(x: &Matrix, grid: (usize, usize)) -> Matrix {
    let (h, w) = grid;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Matrix::zeros(oh * ow, x.cols());
    for y in 0..oh {
        for xx in 0..ow {
            let dst = out.row_mut(y * ow + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = x.row((2 * y + dy) * w + 2 * xx + dx);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += 0.25 * v;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling from `grid` to twice its size.
pub fn upsample2(x: &Matrix, grid: (usize, usize)) -> Matrix {
    let (h, w) = grid;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Matrix::zeros(oh * ow, x.cols());
    for y in 0..oh {
        for xx in 0..ow {
            out.row_mut(y * ow + xx).copy_from_slice(x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

/// Sinusoidal embedding of a scalar noise level.
pub fn sinusoidal(value: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10_000f32.ln()) * j as f32 / half as f32).exp();
        out.push((value * 100.0 * freq).sin());
    }
    for j in 0..half {
        let freq = (-(10_000f32.ln()) * j as f32 / half as f32).exp();
        out.push((value * 100.0 * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}
