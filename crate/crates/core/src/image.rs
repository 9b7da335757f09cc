//! Dense row-major float rasters and the resampling helpers the losses and
//! pseudo-label provider need.
//!
//! Pixel `(x, y)` covers the continuous square `[x, x+1) x [y, y+1)`; its
//! center is `(x + 0.5, y + 0.5)`. With that convention, scaling intrinsics by
//! `s` and average-pooling by `s` are exact inverses of each other.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                expected: height * width * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Reads an 8-bit PNG (gray, RGB or RGBA) as an RGB image in [0, 1].
    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::from_vec(h as usize, w as usize, 3, data)
    }

    /// Quantizes to 8 bits and writes a PNG. Only 1- or 3-channel images.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize_u8(*v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::ShapeMismatch(format!(
                    "cannot write {c}-channel image as png"
                )))
            }
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    /// Flat little-endian dump: `H, W, C` as u32 followed by f32 samples.
    pub fn write_raw(&self, mut w: impl Write) -> Result<()> {
        w.write_u32::<LittleEndian>(self.height as u32)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(self.channels as u32)?;
        for v in &self.data {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        Ok(())
    }

    pub fn read_raw(mut r: impl Read) -> Result<Self> {
        let h = r.read_u32::<LittleEndian>()? as usize;
        let w = r.read_u32::<LittleEndian>()? as usize;
        let c = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0.0; h * w * c];
        for v in &mut data {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        Self::from_vec(h, w, c, data)
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Each output pixel is the mean of its `factor x factor` input block.
pub fn avg_pool_downsample(img: &ImageBuffer, factor: usize) -> Result<ImageBuffer> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::NotDivisible {
            height: img.height,
            width: img.width,
            factor,
        });
    }
    let (h, w, c) = (img.height / factor, img.width / factor, img.channels);
    let mut out = ImageBuffer::zeros(h, w, c);
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.get(y * factor + dy, x * factor + dx, ch);
                    }
                }
                out.set(y, x, ch, acc * norm);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool_downsample`]: spreads each upstream value evenly
/// over its block.
pub fn avg_pool_backward(upstream: &ImageBuffer, factor: usize) -> ImageBuffer {
    let norm = 1.0 / (factor * factor) as f64;
    ImageBuffer::from_fn(
        upstream.height * factor,
        upstream.width * factor,
        upstream.channels,
        |y, x, c| upstream.get(y / factor, x / factor, c) * norm,
    )
}

/// Nearest-neighbour upsampling by block replication.
pub fn replicate_upsample(img: &ImageBuffer, factor: usize) -> ImageBuffer {
    ImageBuffer::from_fn(
        img.height * factor,
        img.width * factor,
        img.channels,
        |y, x, c| img.get(y / factor, x / factor, c),
    )
}

/// Catmull-Rom (a = -0.5) cubic convolution weight.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

fn bicubic_taps(dst: usize, factor: usize, src_len: usize) -> [(usize, f64); 4] {
    let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let base = src.floor();
    let t = src - base;
    let mut taps = [(0usize, 0.0f64); 4];
    for (k, tap) in taps.iter_mut().enumerate() {
        let offset = k as i64 - 1;
        let idx = (base as i64 + offset).clamp(0, src_len as i64 - 1) as usize;
        *tap = (idx, cubic_weight(t - offset as f64));
    }
    taps
}

/// Separable bicubic upsampling, edge samples replicated. The output is not
/// clamped; callers producing display images clamp to [0, 1].
pub fn bicubic_upsample(img: &ImageBuffer, factor: usize) -> ImageBuffer {
    if factor == 1 {
        return img.clone();
    }
    let (h, w, c) = img.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut rows = ImageBuffer::zeros(h, ow, c);
    for x in 0..ow {
        let taps = bicubic_taps(x, factor, w);
        for y in 0..h {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * img.get(y, i, ch)).sum();
                rows.set(y, x, ch, v);
            }
        }
    }
    let mut out = ImageBuffer::zeros(oh, ow, c);
    for y in 0..oh {
        let taps = bicubic_taps(y, factor, h);
        for x in 0..ow {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows.get(i, x, ch)).sum();
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_block_mean() {
        let img = ImageBuffer::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = avg_pool_downsample(&img, 2).unwrap();
        assert_eq!(out.data, vec![2.5]);
    }

    #[test]
    fn avg_pool_constant_and_identity() {
        let img = ImageBuffer::filled(4, 6, 3, 0.37);
        let out = avg_pool_downsample(&img, 2).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-15));
        let img = ImageBuffer::from_fn(3, 5, 2, |y, x, c| (y * 7 + x * 3 + c) as f64);
        assert_eq!(avg_pool_downsample(&img, 1).unwrap(), img);
    }

    #[test]
    fn avg_pool_rejects_indivisible() {
        let img = ImageBuffer::zeros(5, 4, 1);
        assert!(matches!(
            avg_pool_downsample(&img, 2),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn pool_replicate_pool_is_idempotent() {
        let img = ImageBuffer::from_fn(8, 8, 3, |y, x, c| ((y * 31 + x * 17 + c * 5) % 13) as f64 / 13.0);
        let p = avg_pool_downsample(&img, 2).unwrap();
        let again = avg_pool_downsample(&replicate_upsample(&p, 2), 2).unwrap();
        for (a, b) in p.data.iter().zip(&again.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let img = ImageBuffer::from_fn(6, 4, 2, |y, x, c| (y as f64 * 0.3 - x as f64 * 0.1 + c as f64).sin());
        let up = ImageBuffer::from_fn(3, 2, 2, |y, x, c| (y + 2 * x + c) as f64 * 0.25 - 0.5);
        let lhs: f64 = avg_pool_downsample(&img, 2)
            .unwrap()
            .data
            .iter()
            .zip(&up.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = img
            .data
            .iter()
            .zip(&avg_pool_backward(&up, 2).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bicubic_factor_one_is_identity() {
        let img = ImageBuffer::from_fn(4, 5, 3, |y, x, c| (y + x + c) as f64 / 12.0);
        assert_eq!(bicubic_upsample(&img, 1), img);
    }

    #[test]
    fn bicubic_constant_stays_constant() {
        let img = ImageBuffer::filled(5, 7, 3, 0.42);
        let up = bicubic_upsample(&img, 2);
        assert_eq!(up.shape(), (10, 14, 3));
        assert!(up.data.iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn bicubic_reproduces_linear_ramp_in_interior() {
        // Intensity linear in the continuous coordinate: v(x) = a + b * (x + 0.5).
        let (a, b) = (0.1, 0.05);
        let img = ImageBuffer::from_fn(4, 16, 1, |_, x, _| a + b * (x as f64 + 0.5));
        for factor in [2usize, 4] {
            let up = bicubic_upsample(&img, factor);
            for x in 0..up.width {
                let src = (x as f64 + 0.5) / factor as f64 - 0.5;
                // Taps at floor(src)-1 ..= floor(src)+2 must be in range.
                if src.floor() < 1.0 || src.floor() + 2.0 > 15.0 {
                    continue;
                }
                let expected = a + b * (x as f64 + 0.5) / factor as f64;
                assert!((up.get(1, x, 0) - expected).abs() < 1e-6, "x={x}");
            }
        }
    }

    #[test]
    fn raw_dump_round_trips_header() {
        let img = ImageBuffer::from_fn(2, 3, 4, |y, x, c| (y * 12 + x * 4 + c) as f64);
        let mut buf = Vec::new();
        img.write_raw(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 24 * 4);
        let back = ImageBuffer::read_raw(buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }
}
