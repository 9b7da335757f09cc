//! Photometric losses with gradients w.r.t. the rendered image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{avg_pool_backward, avg_pool_downsample, ImageBuffer};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub lambda_ssim: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.2,
            lambda_ssim: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_reg", self.lambda_reg), ("lambda_ssim", self.lambda_ssim)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::BadConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Subgradient of `l1_loss` w.r.t. `a` (zero where `a == b`).
pub fn l1_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageBuffer> {
    a.ensure_same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    ImageBuffer::from_vec(a.height, a.width, a.channels, data)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded separable Gaussian filter of one `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = x as isize + t as isize - r;
                if sx >= 0 && sx < w as isize {
                    s += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = y as isize + t as isize - r;
                if sy >= 0 && sy < h as isize {
                    s += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel_plane(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

struct SsimPlane {
    mean: f64,
    grad: Option<Vec<f64>>,
}

/// Local statistics are window-weighted moments normalized by the in-bounds
/// window mass, so windows clipped by the border stay unbiased.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, want_grad: bool) -> SsimPlane {
    let k = ssim_kernel();
    let z = blur(&vec![1.0; h * w], h, w, &k);
    let norm = |v: Vec<f64>| -> Vec<f64> { v.into_iter().zip(&z).map(|(a, b)| a / b).collect() };
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = norm(blur(x, h, w, &k));
    let my = norm(blur(y, h, w, &k));
    let exx = norm(blur(&prod(x, x), h, w, &k));
    let eyy = norm(blur(&prod(y, y), h, w, &k));
    let exy = norm(blur(&prod(x, y), h, w, &k));
    let n = (h * w) as f64;

    let mut total = 0.0;
    let mut g_mu = vec![0.0; h * w];
    let mut g_xx = vec![0.0; h * w];
    let mut g_xy = vec![0.0; h * w];
    for p in 0..h * w {
        let (ux, uy) = (mx[p], my[p]);
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * (exy[p] - ux * uy) + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            g_mu[p] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2) / (n * z[p]);
            g_xx[p] = -s / b2 / (n * z[p]);
            g_xy[p] = 2.0 * a1 / (b1 * b2) / (n * z[p]);
        }
    }
    let grad = want_grad.then(|| {
        let bm = blur(&g_mu, h, w, &k);
        let bxx = blur(&g_xx, h, w, &k);
        let bxy = blur(&g_xy, h, w, &k);
        (0..h * w)
            .map(|q| bm[q] + 2.0 * x[q] * bxx[q] + y[q] * bxy[q])
            .collect()
    });
    SsimPlane { mean: total / n, grad }
}

fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    a.ensure_same_shape(b)?;
    let (h, w, ch) = a.shape();
    if h == 0 || w == 0 || ch == 0 {
        return Err(Error::TooSmall("ssim needs a non-empty image".into()));
    }
    let mut sum = 0.0;
    let mut grad = want_grad.then(|| ImageBuffer::zeros(h, w, ch));
    for c in 0..ch {
        let plane = ssim_plane(&channel_plane(a, c), &channel_plane(b, c), h, w, want_grad);
        sum += plane.mean;
        if let (Some(g), Some(pg)) = (grad.as_mut(), plane.grad) {
            for (p, v) in pg.into_iter().enumerate() {
                g.data[p * ch + c] = v / ch as f64;
            }
        }
    }
    Ok((sum / ch as f64, grad))
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `(1 - lambda_ssim) L1 + lambda_ssim (1 - SSIM)` and its gradient w.r.t. `render`.
pub fn loss_hr_with_grad(render: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<(f64, ImageBuffer)> {
    let l1 = l1_loss(render, target)?;
    let mut grad = l1_grad(render, target)?;
    grad.data.iter_mut().for_each(|g| *g *= 1.0 - cfg.lambda_ssim);
    let mut loss = (1.0 - cfg.lambda_ssim) * l1;
    if cfg.lambda_ssim != 0.0 {
        let (s, sg) = ssim_with_grad(render, target)?;
        loss += cfg.lambda_ssim * (1.0 - s);
        for (g, d) in grad.data.iter_mut().zip(&sg.data) {
            *g -= cfg.lambda_ssim * d;
        }
    }
    Ok((loss, grad))
}

pub fn loss_hr(render: &ImageBuffer, pseudo: &ImageBuffer, cfg: &LossConfig) -> Result<f64> {
    let l1 = l1_loss(render, pseudo)?;
    if cfg.lambda_ssim == 0.0 {
        return Ok(l1);
    }
    Ok((1.0 - cfg.lambda_ssim) * l1 + cfg.lambda_ssim * (1.0 - ssim(render, pseudo)?))
}

/// The `loss_hr` blend applied to the average-pooled render against the LR target.
pub fn loss_reg_with_grad(
    render_hr: &ImageBuffer,
    gt_lr: &ImageBuffer,
    factor: usize,
    cfg: &LossConfig,
) -> Result<(f64, ImageBuffer)> {
    let pooled = avg_pool_downsample(render_hr, factor)?;
    let (loss, g) = loss_hr_with_grad(&pooled, gt_lr, cfg)?;
    Ok((loss, avg_pool_backward(&g, factor)))
}

pub fn loss_reg(render_hr: &ImageBuffer, gt_lr: &ImageBuffer, factor: usize, cfg: &LossConfig) -> Result<f64> {
    loss_hr(&avg_pool_downsample(render_hr, factor)?, gt_lr, cfg)
}

/// `(1 - lambda_reg) loss_hr + lambda_reg loss_reg`.
pub fn total_loss(
    render_hr: &ImageBuffer,
    pseudo_hr: &ImageBuffer,
    gt_lr: &ImageBuffer,
    factor: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    let hr = loss_hr(render_hr, pseudo_hr, cfg)?;
    let reg = loss_reg(render_hr, gt_lr, factor, cfg)?;
    Ok(blend_total(hr, reg, cfg))
}

pub fn blend_total(hr: f64, reg: f64, cfg: &LossConfig) -> f64 {
    (1.0 - cfg.lambda_reg) * hr + cfg.lambda_reg * reg
}

pub fn total_loss_with_grad(
    render_hr: &ImageBuffer,
    pseudo_hr: &ImageBuffer,
    gt_lr: &ImageBuffer,
    factor: usize,
    cfg: &LossConfig,
) -> Result<(f64, ImageBuffer)> {
    let (hr, mut g) = loss_hr_with_grad(render_hr, pseudo_hr, cfg)?;
    let (reg, gr) = loss_reg_with_grad(render_hr, gt_lr, factor, cfg)?;
    for (a, b) in g.data.iter_mut().zip(&gr.data) {
        *a = (1.0 - cfg.lambda_reg) * *a + cfg.lambda_reg * b;
    }
    Ok((blend_total(hr, reg, cfg), g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::replicate_upsample;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    /// Direct sliding-window SSIM: for every pixel, walk the full 11x11 window,
    /// keep in-bounds taps and normalize by their total weight.
    fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let r = 5isize;
        let wgt = |dy: isize, dx: isize| (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
        let mut total = 0.0;
        for c in 0..a.channels {
            for y in 0..a.height as isize {
                for x in 0..a.width as isize {
                    let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (py, px) = (y + dy, x + dx);
                            if py < 0 || px < 0 || py >= a.height as isize || px >= a.width as isize {
                                continue;
                            }
                            let wv = wgt(dy, dx);
                            let va = a.get(py as usize, px as usize, c);
                            let vb = b.get(py as usize, px as usize, c);
                            sw += wv;
                            sx += wv * va;
                            sy += wv * vb;
                            sxx += wv * va * va;
                            syy += wv * vb * vb;
                            sxy += wv * va * vb;
                        }
                    }
                    let (mx, my) = (sx / sw, sy / sw);
                    let vx = sxx / sw - mx * mx;
                    let vy = syy / sw - my * my;
                    let cxy = sxy / sw - mx * my;
                    total += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                }
            }
        }
        total / (a.data.len() as f64)
    }

    #[test]
    fn l1_examples() {
        let z = ImageBuffer::zeros(3, 4, 3);
        let h = ImageBuffer::filled(3, 4, 3, 0.5);
        assert_eq!(l1_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l1_loss(&z, &h).unwrap(), 0.5);
        let (a, b) = (random_image(1, 4, 4, 3), random_image(2, 4, 4, 3));
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        assert!(matches!(l1_loss(&z, &ImageBuffer::zeros(3, 3, 3)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(3, 16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_two_constants_is_closed_form() {
        let a = ImageBuffer::zeros(16, 16, 3);
        let b = ImageBuffer::filled(16, 16, 3, 1.0);
        let expect = SSIM_C1 * SSIM_C2 / ((1.0 + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 1e-4).abs() < 1e-7);
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        for seed in 0..5 {
            let a = random_image(10 + seed, 16, 16, 3);
            let b = random_image(20 + seed, 16, 16, 3);
            assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-8);
        }
        // Smaller than the window.
        let a = random_image(30, 8, 8, 3);
        let b = random_image(31, 8, 8, 3);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-8);
    }

    #[test]
    fn ssim_errors() {
        assert!(matches!(
            ssim(&ImageBuffer::zeros(0, 4, 3), &ImageBuffer::zeros(0, 4, 3)),
            Err(Error::TooSmall(_))
        ));
        assert!(matches!(
            ssim(&ImageBuffer::zeros(4, 4, 3), &ImageBuffer::zeros(4, 5, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(40, 9, 13, 2);
        let b = random_image(41, 9, 13, 2);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for k in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            p.data[k] += h;
            let mut m = a.clone();
            m.data[k] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g.data[k]).abs() < 1e-6 * fd.abs().max(1e-3), "{k}: {fd} vs {}", g.data[k]);
        }
    }

    #[test]
    fn loss_hr_examples() {
        let cfg = LossConfig::default();
        let a = random_image(50, 12, 12, 3);
        assert_eq!(loss_hr(&a, &a, &cfg).unwrap(), 0.0);
        // L1 = 1 between all-zero and all-one images; SSIM of these constants is
        // ~1e-4, so the blend is 0.8 + 0.2 (1 - 1e-4).
        let z = ImageBuffer::zeros(12, 12, 3);
        let o = ImageBuffer::filled(12, 12, 3, 1.0);
        let s = ssim(&z, &o).unwrap();
        assert_eq!(loss_hr(&z, &o, &cfg).unwrap(), 0.8 * 1.0 + 0.2 * (1.0 - s));
        assert!((loss_hr(&z, &o, &cfg).unwrap() - 1.0).abs() < 1e-4);
        let pure = LossConfig { lambda_ssim: 0.0, ..cfg };
        let b = random_image(51, 12, 12, 3);
        assert_eq!(loss_hr(&a, &b, &pure).unwrap(), l1_loss(&a, &b).unwrap());
    }

    #[test]
    fn loss_reg_examples() {
        let cfg = LossConfig::default();
        let lr = random_image(60, 6, 6, 3);
        let hr = replicate_upsample(&lr, 2);
        assert_eq!(l1_loss(&avg_pool_downsample(&hr, 2).unwrap(), &lr).unwrap(), 0.0);
        assert!(loss_reg(&hr, &lr, 2, &cfg).unwrap().abs() < 1e-12);

        let pure = LossConfig { lambda_ssim: 0.0, ..cfg };
        let shifted = ImageBuffer::from_vec(6, 6, 3, lr.data.iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((loss_reg(&hr, &shifted, 2, &pure).unwrap() - 0.1).abs() < 1e-12);

        assert!(matches!(
            loss_reg(&hr, &ImageBuffer::zeros(5, 6, 3), 2, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(blend_total(1.0, 0.5, &cfg), 0.9);
        let hr = random_image(70, 8, 8, 3);
        let lr = avg_pool_downsample(&hr, 2).unwrap();
        assert_eq!(total_loss(&hr, &hr, &lr, 2, &cfg).unwrap(), 0.0);
        let no_reg = LossConfig { lambda_reg: 0.0, ..cfg };
        let pseudo = random_image(71, 8, 8, 3);
        let noise = random_image(72, 4, 4, 3);
        assert_eq!(
            total_loss(&hr, &pseudo, &noise, 2, &no_reg).unwrap(),
            loss_hr(&hr, &pseudo, &no_reg).unwrap()
        );
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let r = random_image(80, 8, 8, 3);
        let p = random_image(81, 8, 8, 3);
        let g = random_image(82, 4, 4, 3);
        let (v, grad) = total_loss_with_grad(&r, &p, &g, 2, &cfg).unwrap();
        assert!((v - total_loss(&r, &p, &g, 2, &cfg).unwrap()).abs() < 1e-15);
        let h = 1e-7;
        for k in (0..r.data.len()).step_by(5) {
            let mut a = r.clone();
            a.data[k] += h;
            let mut b = r.clone();
            b.data[k] -= h;
            let fd = (total_loss(&a, &p, &g, 2, &cfg).unwrap() - total_loss(&b, &p, &g, 2, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - grad.data[k]).abs() < 1e-6, "{k}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda_reg: 1.5, lambda_ssim: 0.2 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn dssim_in_range(seed in 0u64..1000) {
            let a = random_image(seed, 12, 12, 1);
            let b = random_image(seed + 5000, 12, 12, 1);
            let d = 1.0 - ssim(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
        }

        #[test]
        fn total_loss_zero_on_consistent_inputs(seed in 0u64..1000) {
            let hr = random_image(seed, 8, 8, 3);
            let lr = avg_pool_downsample(&hr, 2).unwrap();
            prop_assert_eq!(total_loss(&hr, &hr, &lr, 2, &LossConfig::default()).unwrap(), 0.0);
        }
    }
}
