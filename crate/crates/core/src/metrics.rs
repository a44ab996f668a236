//! Distortion metrics.
//!
//! Conventions used in every report:
//! * images are rescaled from `[-1, 1]` to `[0, 1]` before scoring
//!   ([`to_unit_range`]);
//! * PSNR uses the MSE over all RGB elements;
//! * SSIM is computed on ITU-R BT.601 luma with an 11x11 Gaussian window
//!   (sigma 1.5), `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, averaged over the
//!   positions where the window fits entirely inside the image.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Maps `[-1, 1]` to `[0, 1]` and clamps.
pub fn to_unit_range<T: Scalar>(image: &Image<T>) -> Image<T> {
    let half = T::of(0.5);
    image.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Dimension("mse of empty images".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(max^2 / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// BT.601 luma of an RGB image; single-channel images pass through.
pub fn luma<T: Scalar>(image: &Image<T>) -> Result<Image<T>> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => {
            let (r, g, b) = (T::of(0.299), T::of(0.587), T::of(0.114));
            Ok(Image::from_fn(image.height(), image.width(), 1, |y, x, _| {
                r * image.get(y, x, 0) + g * image.get(y, x, 1) + b * image.get(y, x, 2)
            }))
        }
        c => Err(Error::Dimension(format!("luma needs 1 or 3 channels, got {c}"))),
    }
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// SSIM of the luma channels of two `[0, 1]` images.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    ssim_with_range(a, b, 1.0)
}

pub fn ssim_with_range<T: Scalar>(a: &Image<T>, b: &Image<T>, data_range: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la: Vec<f64> = luma(a)?.data().iter().map(|v| v.to_f64_lossy()).collect();
    let lb: Vec<f64> = luma(b)?.data().iter().map(|v| v.to_f64_lossy()).collect();
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, oh, ow) = filter_valid(&la, h, w, &taps);
    let (mu_b, ..) = filter_valid(&lb, h, w, &taps);
    let (e_aa, ..) = filter_valid(&prod(&la, &la), h, w, &taps);
    let (e_bb, ..) = filter_valid(&prod(&lb, &lb), h, w, &taps);
    let (e_ab, ..) = filter_valid(&prod(&la, &lb), h, w, &taps);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Per-image scores under the conventions in the module docs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub psnr_rgb: f64,
    pub ssim_luma: f64,
}

/// Scores `prediction` against `reference`, both in `[-1, 1]`.
pub fn score<T: Scalar>(prediction: &Image<T>, reference: &Image<T>) -> Result<Scores> {
    let (a, b) = (to_unit_range(prediction), to_unit_range(reference));
    Ok(Scores { psnr_rgb: psnr(&a, &b, 1.0)?, ssim_luma: ssim(&a, &b)? })
}

/// Arithmetic mean of each column; an infinite PSNR makes the mean infinite.
pub fn mean_scores(rows: &[Scores]) -> Option<Scores> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(Scores {
        psnr_rgb: rows.iter().map(|r| r.psnr_rgb).sum::<f64>() / n,
        ssim_luma: rows.iter().map(|r| r.ssim_luma).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut s = seed;
        Image::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn psnr_reference_values() {
        let a = Image::filled(4, 4, 3, 0.5f64);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_loop_oracle_and_is_symmetric() {
        let (a, b) = (lcg_image(7, 5, 3, 1), lcg_image(7, 5, 3, 2));
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..5 {
                    acc += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (acc / 105.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (a, b) = (lcg_image(16, 20, 3, 3), lcg_image(16, 20, 3, 4));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negative_is_negative() {
        let a = Image::from_fn(24, 24, 1, |y, x, _| if (y / 2 + x / 3) % 2 == 0 { 0.9 } else { 0.1 });
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_small_image_is_rejected() {
        let a = Image::<f64>::zeros(10, 32, 1);
        assert!(matches!(ssim(&a, &a), Err(Error::Precondition(_))));
    }

    #[test]
    fn unit_range_mapping() {
        let a = Image::from_rows(&[&[-1.0f64, 0.0, 1.0, 3.0]]).unwrap();
        assert_eq!(to_unit_range(&a).data(), &[0.0, 0.5, 1.0, 1.0]);
    }
}
