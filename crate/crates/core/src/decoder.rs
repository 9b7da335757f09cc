//! Convolutional image decoder: 16-channel feature map to RGB.
//!
//! `conv_in (3x3, 16 -> 256) -> ReLU -> [1x1 256->64 -> ReLU -> 3x3 64->64 ->
//! ReLU -> 1x1 64->256] + skip -> ReLU -> conv_out (1x1, 256 -> 3) -> sigmoid`.
//! Convolutions zero-pad to keep the spatial size and run as im2col + GEMM.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub in_channels: usize,
    pub width: usize,
    pub bottleneck: usize,
    pub in_kernel: usize,
    pub mid_kernel: usize,
    pub out_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            width: 256,
            bottleneck: 64,
            in_kernel: 3,
            mid_kernel: 3,
            out_channels: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for k in [self.in_kernel, self.mid_kernel] {
            if k % 2 == 0 {
                return Err(Error::BadConfig(format!("decoder kernel {k} must be odd")));
            }
        }
        if [self.in_channels, self.width, self.bottleneck, self.out_channels].contains(&0) {
            return Err(Error::BadConfig("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// The five convolutions in evaluation order.
    pub fn layers(&self) -> [ConvShape; 5] {
        [
            ConvShape::new(self.in_kernel, self.in_channels, self.width),
            ConvShape::new(1, self.width, self.bottleneck),
            ConvShape::new(self.mid_kernel, self.bottleneck, self.bottleneck),
            ConvShape::new(1, self.bottleneck, self.width),
            ConvShape::new(1, self.width, self.out_channels),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    pub fn new(kernel: usize, cin: usize, cout: usize) -> Self {
        Self { kernel, cin, cout }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    /// Weights `(patch_len x cout)` followed by `cout` biases.
    pub fn param_count(&self) -> usize {
        self.patch_len() * self.cout + self.cout
    }

    /// Flat offset of weight `[ky][kx][ci] -> co`.
    pub fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kernel + kx) * self.cin + ci) * self.cout + co
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: Vec<f64>,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct DecoderRecord {
    height: usize,
    width: usize,
    input: Vec<f64>,
    h0: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    out: Vec<f64>,
}

impl Decoder {
    pub fn zeros(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let n = config.layers().iter().map(|l| l.param_count()).sum();
        Ok(Self {
            config,
            params: vec![0.0; n],
        })
    }

    /// He-normal kernels, zero biases.
    pub fn init(config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut dec = Self::zeros(config)?;
        let layers = dec.config.layers();
        let mut off = 0;
        for l in layers {
            let normal = Normal::new(0.0, (2.0 / l.patch_len() as f64).sqrt()).unwrap();
            for w in &mut dec.params[off..off + l.patch_len() * l.cout] {
                *w = normal.sample(rng);
            }
            off += l.param_count();
        }
        Ok(dec)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Start offset of every layer's parameter block.
    pub fn layer_offsets(&self) -> [usize; 5] {
        let mut out = [0; 5];
        let mut off = 0;
        for (o, l) in out.iter_mut().zip(self.config.layers()) {
            *o = off;
            off += l.param_count();
        }
        out
    }

    fn layer_params(&self, i: usize) -> (&[f64], &[f64]) {
        let l = self.config.layers()[i];
        let off = self.layer_offsets()[i];
        let (w, rest) = self.params[off..].split_at(l.patch_len() * l.cout);
        (w, &rest[..l.cout])
    }

    pub fn decode(&self, features: &ImageBuffer) -> Result<(ImageBuffer, DecoderRecord)> {
        if features.channels != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {} channels, got {}",
                self.config.in_channels, features.channels
            )));
        }
        let (h, w) = (features.height, features.width);
        if h == 0 || w == 0 {
            return Err(Error::TooSmall("decoder input is empty".into()));
        }
        let layers = self.config.layers();
        let conv = |i: usize, x: &[f64]| {
            let (wt, b) = self.layer_params(i);
            conv_forward(x, h, w, layers[i], wt, b)
        };
        let mut h0 = conv(0, &features.data);
        relu_inplace(&mut h0);
        let mut a = conv(1, &h0);
        relu_inplace(&mut a);
        let mut b = conv(2, &a);
        relu_inplace(&mut b);
        let mut h1_pre = conv(3, &b);
        for (v, s) in h1_pre.iter_mut().zip(&h0) {
            *v += s;
        }
        let mut h1 = h1_pre.clone();
        relu_inplace(&mut h1);
        let mut out = conv(4, &h1);
        for v in &mut out {
            *v = crate::scene::sigmoid(*v);
        }
        let image = ImageBuffer::from_vec(h, w, self.config.out_channels, out.clone())?;
        Ok((
            image,
            DecoderRecord {
                height: h,
                width: w,
                input: features.data.clone(),
                h0,
                a,
                b,
                h1_pre,
                h1,
                out,
            },
        ))
    }

    /// Returns `(dparams, dfeatures)`.
    pub fn backward(&self, rec: &DecoderRecord, upstream: &ImageBuffer) -> (Vec<f64>, ImageBuffer) {
        let (h, w) = (rec.height, rec.width);
        assert_eq!(upstream.shape(), (h, w, self.config.out_channels));
        let layers = self.config.layers();
        let offsets = self.layer_offsets();
        let mut dparams = vec![0.0; self.params.len()];
        let mut conv_back = |i: usize, x: &[f64], dy: &[f64]| -> Vec<f64> {
            let l = layers[i];
            let (wt, _) = self.layer_params(i);
            let block = &mut dparams[offsets[i]..offsets[i] + l.param_count()];
            conv_backward(x, h, w, l, wt, dy, block)
        };

        let dz: Vec<f64> = rec
            .out
            .iter()
            .zip(&upstream.data)
            .map(|(s, u)| u * s * (1.0 - s))
            .collect();
        let mut dh1 = conv_back(4, &rec.h1, &dz);
        relu_backward(&mut dh1, &rec.h1_pre);
        let mut db = conv_back(3, &rec.b, &dh1);
        relu_backward(&mut db, &rec.b);
        let mut da = conv_back(2, &rec.a, &db);
        relu_backward(&mut da, &rec.a);
        let mut dh0 = conv_back(1, &rec.h0, &da);
        for (d, s) in dh0.iter_mut().zip(&dh1) {
            *d += s;
        }
        relu_backward(&mut dh0, &rec.h0);
        let dx = conv_back(0, &rec.input, &dh0);
        let dfeat = ImageBuffer::from_vec(h, w, self.config.in_channels, dx)
            .expect("decoder input shape");
        (dparams, dfeat)
    }
}

fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the activation was not positive.
fn relu_backward(dy: &mut [f64], activation: &[f64]) {
    for (d, a) in dy.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
}

fn im2col(x: &[f64], h: usize, w: usize, l: ConvShape) -> Vec<f64> {
    let k = l.kernel;
    let pad = (k / 2) as isize;
    let plen = l.patch_len();
    let mut col = vec![0.0; h * w * plen];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * plen..(y * w + xx + 1) * plen];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * l.cin;
                    let dst = (ky * k + kx) * l.cin;
                    row[dst..dst + l.cin].copy_from_slice(&x[src..src + l.cin]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], h: usize, w: usize, l: ConvShape) -> Vec<f64> {
    let k = l.kernel;
    let pad = (k / 2) as isize;
    let plen = l.patch_len();
    let mut x = vec![0.0; h * w * l.cin];
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * plen..(y * w + xx + 1) * plen];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * l.cin;
                    let src = (ky * k + kx) * l.cin;
                    for c in 0..l.cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}

/// `C = A B` for row-major `A (m x k)`, `B (k x n)`; strides given explicitly
/// so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given shapes and
    // strides (checked by the callers' length invariants above and below).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(x: &[f64], h: usize, w: usize, l: ConvShape, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = h * w;
    assert_eq!(x.len(), hw * l.cin);
    let plen = l.patch_len();
    let col_owned;
    let col: &[f64] = if l.kernel == 1 {
        x
    } else {
        col_owned = im2col(x, h, w, l);
        &col_owned
    };
    let mut y = vec![0.0; hw * l.cout];
    for row in y.chunks_exact_mut(l.cout) {
        row.copy_from_slice(bias);
    }
    gemm(
        hw,
        plen,
        l.cout,
        col,
        (plen as isize, 1),
        weights,
        (l.cout as isize, 1),
        &mut y,
        true,
    );
    y
}

/// Accumulates weight/bias gradients into `dparams` (this layer's block) and
/// returns `dL/dx`.
fn conv_backward(
    x: &[f64],
    h: usize,
    w: usize,
    l: ConvShape,
    weights: &[f64],
    dy: &[f64],
    dparams: &mut [f64],
) -> Vec<f64> {
    let hw = h * w;
    let plen = l.patch_len();
    let col_owned;
    let col: &[f64] = if l.kernel == 1 {
        x
    } else {
        col_owned = im2col(x, h, w, l);
        &col_owned
    };
    let (dw, db) = dparams.split_at_mut(plen * l.cout);
    // dW += col^T dy
    gemm(plen, hw, l.cout, col, (1, plen as isize), dy, (l.cout as isize, 1), dw, true);
    for row in dy.chunks_exact(l.cout) {
        for (b, d) in db.iter_mut().zip(row) {
            *b += d;
        }
    }
    // dcol = dy W^T
    let mut dcol = vec![0.0; hw * plen];
    gemm(hw, l.cout, plen, dy, (l.cout as isize, 1), weights, (1, l.cout as isize), &mut dcol, false);
    if l.kernel == 1 {
        dcol
    } else {
        col2im(&dcol, h, w, l)
    }
}
