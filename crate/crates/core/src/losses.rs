//! Pre-training losses for the initial predictor: spatial MSE, FFT-magnitude
//! MSE, Haar detail-band MSE, and their weighted sum.
//!
//! Every expectation is an element mean. Each loss has a `*_with_grad`
//! companion returning the analytic gradient with respect to `predicted`.

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::freq::{check_dwt_compatible, dwt_haar, fft2d, idwt_haar, DetailBands, Spectrum, WaveletPyramid};
use crate::image::Image;
use crate::scalar::Scalar;

/// Smoothing of `|z|` in the FFT-magnitude gradient: `sqrt(|z|^2 + eps^2)`.
pub const MAGNITUDE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the FFT-magnitude term.
    pub alpha: f64,
    /// Weight of the DWT detail-band term.
    pub beta: f64,
    pub dwt_levels: usize,
}

/// The FFT term is computed on unnormalized magnitudes, so it is roughly
/// `H*W` times larger than the spatial term; the default `alpha` keeps it
/// on a comparable footing for 32-64 px patches.
impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1e-4, beta: 0.1, dwt_levels: 2 }
    }
}

impl LossWeights {
    /// Spatial term only.
    pub fn gt_only(dwt_levels: usize) -> Self {
        LossWeights { alpha: 0.0, beta: 0.0, dwt_levels }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Domain(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.dwt_levels == 0 {
            return Err(Error::Domain("dwt_levels must be at least 1".into()));
        }
        Ok(())
    }
}

/// The three component losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub gt: T,
    pub fft: T,
    pub dwt: T,
    pub total: T,
}

fn check_pair<T: Scalar>(predicted: &Image<T>, target: &Image<T>) -> Result<()> {
    predicted.check_same_shape(target)?;
    if predicted.is_empty() {
        return Err(Error::Dimension("loss of empty images".into()));
    }
    Ok(())
}

pub fn loss_gt<T: Scalar>(predicted: &Image<T>, target: &Image<T>) -> Result<T> {
    check_pair(predicted, target)?;
    let n = T::of_usize(predicted.len());
    Ok(predicted.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n)
}

pub fn loss_gt_with_grad<T: Scalar>(predicted: &Image<T>, target: &Image<T>) -> Result<(T, Image<T>)> {
    let value = loss_gt(predicted, target)?;
    let k = T::of(2.0) / T::of_usize(predicted.len());
    Ok((value, predicted.zip_map(target, |p, t| k * (p - t))?))
}

pub fn loss_fft<T: Scalar>(predicted: &Image<T>, target: &Image<T>) -> Result<T> {
    Ok(fft_parts(predicted, target)?.0)
}

fn fft_parts<T: Scalar>(predicted: &Image<T>, target: &Image<T>) -> Result<(T, Spectrum<T>, Spectrum<T>)> {
    check_pair(predicted, target)?;
    let sp = fft2d(predicted)?;
    let st = fft2d(target)?;
    let n = T::of_usize(predicted.len());
    let value = sp
        .coefficients()
        .iter()
        .zip(st.coefficients())
        .map(|(a, b)| {
            let d = a.norm() - b.norm();
            d * d
        })
        .sum::<T>()
        / n;
    Ok((value, sp, st))
}

pub fn loss_fft_with_grad<T: Scalar>(predicted: &Image<T>, target: &Image<T>) -> Result<(T, Image<T>)> {
    let (value, sp, st) = fft_parts(predicted, target)?;
    let (h, w, c) = predicted.dims();
    let n = T::of_usize(predicted.len());
    let eps2 = T::of(MAGNITUDE_EPS * MAGNITUDE_EPS);
    let two = T::of(2.0);
    let coeffs: Vec<Complex<T>> = sp
        .coefficients()
        .iter()
        .zip(st.coefficients())
        .map(|(z, zt)| {
            let smooth = (z.norm_sqr() + eps2).sqrt();
            let dl_dmag = two * (z.norm() - zt.norm()) / n;
            z.scale(dl_dmag / smooth)
        })
        .collect();
    // the adjoint of the unnormalized DFT is H*W times the normalized inverse
    let back = crate::freq::ifft2d(&Spectrum::from_parts(h, w, c, coeffs, false)?)?;
    let hw = T::of_usize(h * w);
    Ok((value, back.map(|v| v * hw)))
}

fn band_mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> T {
    let n = T::of_usize(a.len());
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n
}

fn dwt_pair<T: Scalar>(
    predicted: &Image<T>,
    target: &Image<T>,
    levels: usize,
) -> Result<(WaveletPyramid<T>, WaveletPyramid<T>)> {
    check_pair(predicted, target)?;
    check_dwt_compatible(predicted.height(), predicted.width(), levels)?;
    Ok((dwt_haar(predicted, levels)?, dwt_haar(target, levels)?))
}

/// Sum over levels of the H, V and D band MSEs; LL is ignored.
pub fn loss_dwt<T: Scalar>(predicted: &Image<T>, target: &Image<T>, levels: usize) -> Result<T> {
    let (pp, pt) = dwt_pair(predicted, target, levels)?;
    Ok(pp
        .details
        .iter()
        .zip(&pt.details)
        .map(|(a, b)| {
            band_mse(&a.horizontal, &b.horizontal)
                + band_mse(&a.vertical, &b.vertical)
                + band_mse(&a.diagonal, &b.diagonal)
        })
        .sum())
}

pub fn loss_dwt_with_grad<T: Scalar>(predicted: &Image<T>, target: &Image<T>, levels: usize) -> Result<(T, Image<T>)> {
    let value = loss_dwt(predicted, target, levels)?;
    let (pp, pt) = dwt_pair(predicted, target, levels)?;
    let two = T::of(2.0);
    let grad_band = |a: &Image<T>, b: &Image<T>| {
        let k = two / T::of_usize(a.len());
        a.zip_map(b, |x, y| k * (x - y)).expect("bands share shape")
    };
    let details = pp
        .details
        .iter()
        .zip(&pt.details)
        .map(|(a, b)| DetailBands {
            horizontal: grad_band(&a.horizontal, &b.horizontal),
            vertical: grad_band(&a.vertical, &b.vertical),
            diagonal: grad_band(&a.diagonal, &b.diagonal),
        })
        .collect();
    let (h, w, c) = pp.ll.dims();
    // orthonormal transform: the adjoint is the inverse
    let grad = idwt_haar(&WaveletPyramid { ll: Image::zeros(h, w, c), details })?;
    Ok((value, grad))
}

/// `L_GT + alpha * L_FFT + beta * L_DWT`.
pub fn loss_cnn<T: Scalar>(predicted: &Image<T>, target: &Image<T>, weights: &LossWeights) -> Result<LossBreakdown<T>> {
    weights.validate()?;
    let gt = loss_gt(predicted, target)?;
    let fft = loss_fft(predicted, target)?;
    let dwt = loss_dwt(predicted, target, weights.dwt_levels)?;
    let total = gt + T::of(weights.alpha) * fft + T::of(weights.beta) * dwt;
    Ok(LossBreakdown { gt, fft, dwt, total })
}

pub fn loss_cnn_with_grad<T: Scalar>(
    predicted: &Image<T>,
    target: &Image<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown<T>, Image<T>)> {
    weights.validate()?;
    let (gt, mut grad) = loss_gt_with_grad(predicted, target)?;
    let (fft, g_fft) = loss_fft_with_grad(predicted, target)?;
    let (dwt, g_dwt) = loss_dwt_with_grad(predicted, target, weights.dwt_levels)?;
    let (a, b) = (T::of(weights.alpha), T::of(weights.beta));
    for ((g, &f), &d) in grad.data_mut().iter_mut().zip(g_fft.data()).zip(g_dwt.data()) {
        *g += a * f + b * d;
    }
    let total = gt + a * fft + b * dwt;
    Ok((LossBreakdown { gt, fft, dwt, total }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut s = seed;
        Image::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn gt_reference_values() {
        let z = Image::zeros(3, 3, 2);
        assert_eq!(loss_gt(&z, &z).unwrap(), 0.0);
        let half = Image::filled(3, 3, 2, 0.5);
        assert_eq!(loss_gt(&half, &z).unwrap(), 0.25);
    }

    #[test]
    fn gt_matches_loop_oracle() {
        let (a, b) = (lcg_image(5, 4, 3, 1), lcg_image(5, 4, 3, 2));
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..4 {
                    let d = a.get(y, x, c) - b.get(y, x, c);
                    acc += d * d;
                }
            }
        }
        assert!((loss_gt(&a, &b).unwrap() - acc / 60.0).abs() < 1e-7);
    }

    #[test]
    fn fft_constant_pair() {
        let one = Image::filled(2, 2, 1, 1.0f64);
        let zero = Image::zeros(2, 2, 1);
        assert_eq!(loss_fft(&zero, &one).unwrap(), 4.0);
        let one3 = Image::filled(2, 2, 3, 1.0f64);
        assert_eq!(loss_fft(&Image::zeros(2, 2, 3), &one3).unwrap(), 4.0);
    }

    #[test]
    fn fft_ignores_circular_shift() {
        let a = lcg_image(8, 8, 2, 3);
        assert!(loss_fft(&a.roll(3, 5), &a).unwrap() < 1e-12);
        assert!(loss_gt(&a.roll(3, 5), &a).unwrap() > 0.1);
    }

    #[test]
    fn dwt_ignores_constant_offset() {
        let a = lcg_image(8, 8, 1, 4);
        let shifted = a.map(|v| v + 0.3);
        assert!(loss_dwt(&shifted, &a, 3).unwrap() < 1e-12);
    }

    #[test]
    fn dwt_matches_band_oracle() {
        let (a, b) = (lcg_image(8, 8, 2, 5), lcg_image(8, 8, 2, 6));
        let (pa, pb) = (dwt_haar(&a, 2).unwrap(), dwt_haar(&b, 2).unwrap());
        let mut expected = 0.0;
        for lvl in 0..2 {
            for (x, y) in [
                (&pa.details[lvl].horizontal, &pb.details[lvl].horizontal),
                (&pa.details[lvl].vertical, &pb.details[lvl].vertical),
                (&pa.details[lvl].diagonal, &pb.details[lvl].diagonal),
            ] {
                let d: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
                expected += d / x.len() as f64;
            }
        }
        assert!((loss_dwt(&a, &b, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dwt_precondition() {
        let a = Image::<f64>::zeros(6, 6, 1);
        assert!(matches!(loss_dwt(&a, &a, 2), Err(Error::Precondition(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Image::<f64>::zeros(4, 4, 1);
        let b = Image::<f64>::zeros(4, 4, 3);
        assert!(matches!(loss_gt(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(loss_fft(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(loss_cnn(&a, &b, &LossWeights::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn combined_loss_bookkeeping() {
        let (a, b) = (lcg_image(8, 8, 3, 7), lcg_image(8, 8, 3, 8));
        let w = LossWeights { alpha: 0.1, beta: 0.1, dwt_levels: 2 };
        let l = loss_cnn(&a, &b, &w).unwrap();
        let expected = loss_gt(&a, &b).unwrap() + 0.1 * loss_fft(&a, &b).unwrap() + 0.1 * loss_dwt(&a, &b, 2).unwrap();
        assert!((l.total - expected).abs() < 1e-7);
        let gt_only = loss_cnn(&a, &b, &LossWeights::gt_only(2)).unwrap();
        assert_eq!(gt_only.total, loss_gt(&a, &b).unwrap());
        assert!(matches!(
            loss_cnn(&a, &b, &LossWeights { alpha: -1.0, ..w }),
            Err(Error::Domain(_))
        ));
    }

    fn check_gradient(f: impl Fn(&Image<f64>) -> (f64, Image<f64>)) {
        let p = lcg_image(4, 4, 2, 11);
        let (_, grad) = f(&p);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
            let analytic = grad.data()[i];
            assert!(
                (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3),
                "element {i}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = lcg_image(4, 4, 2, 12);
        check_gradient(|p| loss_gt_with_grad(p, &t).unwrap());
        check_gradient(|p| loss_fft_with_grad(p, &t).unwrap());
        check_gradient(|p| loss_dwt_with_grad(p, &t, 2).unwrap());
        let w = LossWeights { alpha: 0.3, beta: 0.7, dwt_levels: 2 };
        check_gradient(|p| {
            let (l, g) = loss_cnn_with_grad(p, &t, &w).unwrap();
            (l.total, g)
        });
    }
}
