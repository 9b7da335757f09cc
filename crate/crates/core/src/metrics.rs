//! Image quality metrics.

use crate::error::Result;
use crate::image::ImageBuffer;

/// Peak signal-to-noise ratio in dB for images in [0, 1]. Identical images
/// yield `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub use crate::loss::ssim;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn mse_hundredth_is_twenty_db() {
        let a = ImageBuffer::zeros(4, 4, 3);
        let b = ImageBuffer::filled(4, 4, 3, 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn identical_is_infinite() {
        let a = ImageBuffer::filled(3, 3, 3, 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn shape_checked() {
        assert!(matches!(
            psnr(&ImageBuffer::zeros(2, 2, 3), &ImageBuffer::zeros(2, 3, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
