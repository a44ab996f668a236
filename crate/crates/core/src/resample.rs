//! Separable image resampling (bicubic and bilinear).
//!
//! Pixel centers are aligned (`in = (out + 0.5) / scale - 0.5`), kernels are
//! widened by `1 / scale` when shrinking so downsampling is antialiased, and
//! borders are handled by symmetric reflection. Weights are renormalized per
//! output sample, so constant images stay constant.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// Keys cubic with `a = -0.5`.
    Bicubic,
    Bilinear,
}

impl Kernel {
    fn support(self) -> f64 {
        match self {
            Kernel::Bicubic => 2.0,
            Kernel::Bilinear => 1.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Kernel::Bicubic => {
                let a = -0.5;
                if x <= 1.0 {
                    (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
                } else if x < 2.0 {
                    a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
                } else {
                    0.0
                }
            }
            Kernel::Bilinear => (1.0 - x).max(0.0),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Taps for each output sample along one axis.
fn axis_weights(input: usize, output: usize, kernel: Kernel) -> Vec<Vec<(usize, f64)>> {
    let scale = output as f64 / input as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = kernel.support() / stretch;
    (0..output)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = kernel.eval((center - j as f64) * stretch);
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = reflect(j, input);
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resizes every channel to `out_h x out_w`.
pub fn resize<T: Scalar>(image: &Image<T>, out_h: usize, out_w: usize, kernel: Kernel) -> Result<Image<T>> {
    let (h, w, c) = image.dims();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    let rows = axis_weights(h, out_h, kernel);
    let cols = axis_weights(w, out_w, kernel);
    let mut out = Image::zeros(out_h, out_w, c);
    let mut tmp = vec![0.0f64; h * out_w];
    for ch in 0..c {
        let src = image.plane(ch);
        for y in 0..h {
            for (x, taps) in cols.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(i, wt)| src[y * w + i].to_f64_lossy() * wt).sum();
            }
        }
        let dst = out.plane_mut(ch);
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, wt)| tmp[i * out_w + x] * wt).sum();
                dst[y * out_w + x] = T::of(v);
            }
        }
    }
    Ok(out)
}

/// Integer-factor upscaling.
pub fn upscale<T: Scalar>(image: &Image<T>, factor: usize, kernel: Kernel) -> Result<Image<T>> {
    resize(image, image.height() * factor, image.width() * factor, kernel)
}

/// Bicubic upscaling of a batch of images.
pub fn upscale_all<T: Scalar>(images: &[Image<T>], factor: usize, kernel: Kernel) -> Result<Vec<Image<T>>> {
    images.iter().map(|im| upscale(im, factor, kernel)).collect()
}
