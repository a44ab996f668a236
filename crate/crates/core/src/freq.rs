//! Frequency-domain primitives: 2D FFT, multi-level orthonormal Haar DWT and
//! the Gaussian high-pass filter.
//!
//! Conventions:
//! * the forward FFT is unnormalized, the inverse carries the `1/(H*W)` factor;
//! * spectra are produced with DC at `(0, 0)`; [`Spectrum::centered`] moves DC
//!   to `(H/2, W/2)`, which is where [`HighPassFilter`] measures distances from;
//! * Haar sub-bands for a 2x2 block `[[a, b], [c, d]]` are
//!   `LL = (a+b+c+d)/2`, `H = (a-b+c-d)/2`, `V = (a+b-c-d)/2`, `D = (a-b-c+d)/2`.

use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Complex `H x W x C` spectrum, channel-planar like [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    height: usize,
    width: usize,
    channels: usize,
    coefficients: Vec<Complex<T>>,
    centered: bool,
}

impl<T: Scalar> Spectrum<T> {
    pub fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        coefficients: Vec<Complex<T>>,
        centered: bool,
    ) -> Result<Self> {
        if height * width * channels != coefficients.len() || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} spectrum cannot hold {} coefficients",
                coefficients.len()
            )));
        }
        Ok(Spectrum { height, width, channels, coefficients, centered })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Spectrum {
            height,
            width,
            channels,
            coefficients: vec![Complex::zero(); height * width * channels],
            centered: false,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn coefficients(&self) -> &[Complex<T>] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.coefficients
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> Complex<T> {
        self.coefficients[(c * self.height + u) * self.width + v]
    }

    pub fn plane(&self, c: usize) -> &[Complex<T>] {
        let n = self.height * self.width;
        &self.coefficients[c * n..(c + 1) * n]
    }

    /// Coefficient at zero frequency of channel `c`, whatever the layout.
    pub fn dc(&self, c: usize) -> Complex<T> {
        if self.centered {
            self.get(self.height / 2, self.width / 2, c)
        } else {
            self.get(0, 0, c)
        }
    }

    /// Elementwise modulus, in the spectrum's current layout.
    pub fn magnitude(&self) -> Image<T> {
        let data = self.coefficients.iter().map(|z| z.norm()).collect();
        Image::from_planar(self.height, self.width, self.channels, data)
            .expect("spectrum dims are consistent")
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> T {
        self.coefficients.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Same coefficients with DC moved to `(H/2, W/2)`.
    pub fn centered(&self) -> Self {
        if self.centered {
            return self.clone();
        }
        let mut out = self.roll(self.height / 2, self.width / 2);
        out.centered = true;
        out
    }

    /// Same coefficients with DC moved back to `(0, 0)`.
    pub fn uncentered(&self) -> Self {
        if !self.centered {
            return self.clone();
        }
        let mut out = self.roll(self.height - self.height / 2, self.width - self.width / 2);
        out.centered = false;
        out
    }

    fn roll(&self, dy: usize, dx: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut coefficients = vec![Complex::zero(); self.coefficients.len()];
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = &mut coefficients[c * h * w..(c + 1) * h * w];
            for u in 0..h {
                let uu = (u + dy) % h;
                for v in 0..w {
                    dst[uu * w + (v + dx) % w] = src[u * w + v];
                }
            }
        }
        Spectrum { coefficients, ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        Spectrum {
            height: self.height,
            width: self.width,
            channels: self.channels,
            coefficients: Vec::new(),
            centered: self.centered,
        }
    }
}

fn transform_planes<T: Scalar>(
    planes: &mut [Complex<T>],
    height: usize,
    width: usize,
    inverse: bool,
) {
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    let mut column = vec![Complex::zero(); height];
    for plane in planes.chunks_mut(height * width) {
        row_fft.process(plane);
        for v in 0..width {
            for u in 0..height {
                column[u] = plane[u * width + v];
            }
            col_fft.process(&mut column);
            for u in 0..height {
                plane[u * width + v] = column[u];
            }
        }
    }
}

/// Unnormalized forward 2D DFT of every channel.
pub fn fft2d<T: Scalar>(image: &Image<T>) -> Result<Spectrum<T>> {
    let (h, w, c) = image.dims();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Dimension(format!("fft2d needs a non-empty image, got {h}x{w}x{c}")));
    }
    let mut coefficients: Vec<Complex<T>> =
        image.data().iter().map(|&re| Complex::new(re, T::zero())).collect();
    transform_planes(&mut coefficients, h, w, false);
    Spectrum::from_parts(h, w, c, coefficients, false)
}

/// Inverse 2D DFT, keeping the real part.
pub fn ifft2d<T: Scalar>(spectrum: &Spectrum<T>) -> Result<Image<T>> {
    Ok(ifft2d_with_residue(spectrum)?.0)
}

/// Inverse 2D DFT returning the real part and the largest discarded
/// imaginary magnitude.
pub fn ifft2d_with_residue<T: Scalar>(spectrum: &Spectrum<T>) -> Result<(Image<T>, T)> {
    let spectrum = spectrum.uncentered();
    let (h, w, c) = (spectrum.height, spectrum.width, spectrum.channels);
    if spectrum.coefficients.len() != h * w * c {
        return Err(Error::Dimension("spectrum layout does not match its coefficients".into()));
    }
    let mut coefficients = spectrum.coefficients;
    transform_planes(&mut coefficients, h, w, true);
    let norm = T::one() / T::of_usize(h * w);
    let mut residue = T::zero();
    let data = coefficients
        .iter()
        .map(|z| {
            residue = residue.max((z.im * norm).abs());
            z.re * norm
        })
        .collect();
    Ok((Image::from_planar(h, w, c, data)?, residue))
}

/// Detail sub-bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands<T> {
    pub horizontal: Image<T>,
    pub vertical: Image<T>,
    pub diagonal: Image<T>,
}

impl<T: Scalar> DetailBands<T> {
    /// `H + V + D`, channel by channel.
    pub fn sum(&self) -> Image<T> {
        let hv = self.horizontal.zip_map(&self.vertical, |a, b| a + b).expect("bands share shape");
        hv.zip_map(&self.diagonal, |a, b| a + b).expect("bands share shape")
    }

    fn energy(&self) -> T {
        [&self.horizontal, &self.vertical, &self.diagonal]
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|&v| v * v)
            .sum()
    }
}

/// Multi-level Haar decomposition. `details[i]` holds level `i + 1`, whose
/// bands measure `H / 2^(i+1)` by `W / 2^(i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<T> {
    pub ll: Image<T>,
    pub details: Vec<DetailBands<T>>,
}

impl<T: Scalar> WaveletPyramid<T> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Detail bands at decomposition level `level` (1-based).
    pub fn level(&self, level: usize) -> Option<&DetailBands<T>> {
        level.checked_sub(1).and_then(|i| self.details.get(i))
    }

    /// Total squared coefficient energy over every band.
    pub fn energy(&self) -> T {
        let ll: T = self.ll.data().iter().map(|&v| v * v).sum();
        ll + self.details.iter().map(DetailBands::energy).sum()
    }
}

/// Checks that `H` and `W` are divisible by `2^levels`.
pub fn check_dwt_compatible(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Precondition("DWT needs at least one level".into()));
    }
    let block = 1usize.checked_shl(levels as u32).unwrap_or(0);
    if block == 0 || height % block != 0 || width % block != 0 || height == 0 || width == 0 {
        return Err(Error::Precondition(format!(
            "{levels}-level DWT requires height and width divisible by {}, got {height}x{width}",
            1u128 << levels.min(127)
        )));
    }
    Ok(())
}

fn haar_step<T: Scalar>(image: &Image<T>) -> (Image<T>, DetailBands<T>) {
    let (h, w, c) = image.dims();
    let (h2, w2) = (h / 2, w / 2);
    let half = T::of(0.5);
    let mut ll = Image::zeros(h2, w2, c);
    let mut hb = Image::zeros(h2, w2, c);
    let mut vb = Image::zeros(h2, w2, c);
    let mut db = Image::zeros(h2, w2, c);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let a = image.get(2 * y, 2 * x, ch);
                let b = image.get(2 * y, 2 * x + 1, ch);
                let cc = image.get(2 * y + 1, 2 * x, ch);
                let d = image.get(2 * y + 1, 2 * x + 1, ch);
                ll.set(y, x, ch, (a + b + cc + d) * half);
                hb.set(y, x, ch, (a - b + cc - d) * half);
                vb.set(y, x, ch, (a + b - cc - d) * half);
                db.set(y, x, ch, (a - b - cc + d) * half);
            }
        }
    }
    (ll, DetailBands { horizontal: hb, vertical: vb, diagonal: db })
}

fn haar_inverse_step<T: Scalar>(ll: &Image<T>, bands: &DetailBands<T>) -> Image<T> {
    let (h2, w2, c) = ll.dims();
    let half = T::of(0.5);
    let mut out = Image::zeros(2 * h2, 2 * w2, c);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let s = ll.get(y, x, ch);
                let hh = bands.horizontal.get(y, x, ch);
                let vv = bands.vertical.get(y, x, ch);
                let dd = bands.diagonal.get(y, x, ch);
                out.set(2 * y, 2 * x, ch, (s + hh + vv + dd) * half);
                out.set(2 * y, 2 * x + 1, ch, (s - hh + vv - dd) * half);
                out.set(2 * y + 1, 2 * x, ch, (s + hh - vv - dd) * half);
                out.set(2 * y + 1, 2 * x + 1, ch, (s - hh - vv + dd) * half);
            }
        }
    }
    out
}

/// Orthonormal Haar decomposition to `levels` levels, recursing on LL.
pub fn dwt_haar<T: Scalar>(image: &Image<T>, levels: usize) -> Result<WaveletPyramid<T>> {
    check_dwt_compatible(image.height(), image.width(), levels)?;
    let mut ll = image.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (next, bands) = haar_step(&ll);
        details.push(bands);
        ll = next;
    }
    Ok(WaveletPyramid { ll, details })
}

/// Exact inverse of [`dwt_haar`].
pub fn idwt_haar<T: Scalar>(pyramid: &WaveletPyramid<T>) -> Result<Image<T>> {
    if pyramid.details.is_empty() {
        return Err(Error::Structure("pyramid has no detail levels".into()));
    }
    let mut ll = pyramid.ll.clone();
    for (i, bands) in pyramid.details.iter().enumerate().rev() {
        for (name, band) in
            [("H", &bands.horizontal), ("V", &bands.vertical), ("D", &bands.diagonal)]
        {
            if band.dims() != ll.dims() {
                return Err(Error::Structure(format!(
                    "level {} band {name} is {:?}, expected {:?}",
                    i + 1,
                    band.dims(),
                    ll.dims()
                )));
            }
        }
        ll = haar_inverse_step(&ll, bands);
    }
    Ok(ll)
}

/// Gaussian high-pass response `1 - exp(-D^2 / (2 sigma^2))` on a DC-centered
/// grid, `D` being the distance to `(H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighPassFilter<T> {
    height: usize,
    width: usize,
    sigma: T,
    response: Vec<T>,
}

impl<T: Scalar> HighPassFilter<T> {
    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major `H x W` response, DC at `(H/2, W/2)`.
    pub fn response(&self) -> &[T] {
        &self.response
    }

    pub fn at(&self, u: usize, v: usize) -> T {
        self.response[u * self.width + v]
    }

    /// Euclidean distance of `(u, v)` from the centered DC position.
    pub fn distance(&self, u: usize, v: usize) -> T {
        centered_distance(self.height, self.width, u, v)
    }

    /// Arbitrary response grid (e.g. all-pass or all-stop) in centered layout.
    pub fn from_response(height: usize, width: usize, response: Vec<T>) -> Result<Self> {
        if response.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} filter needs {} values, got {}",
                height * width,
                response.len()
            )));
        }
        Ok(HighPassFilter { height, width, sigma: T::infinity(), response })
    }
}

pub(crate) fn centered_distance<T: Scalar>(height: usize, width: usize, u: usize, v: usize) -> T {
    let du = T::of_usize(u) - T::of_usize(height / 2);
    let dv = T::of_usize(v) - T::of_usize(width / 2);
    (du * du + dv * dv).sqrt()
}

/// Builds the Gaussian high-pass response for standard deviation `sigma`.
///
/// Values saturate at the largest representable number below one, so the
/// response stays in `[0, 1)` even where `exp` underflows.
pub fn gaussian_highpass<T: Scalar>(height: usize, width: usize, sigma: T) -> Result<HighPassFilter<T>> {
    if !(sigma > T::zero()) || sigma.is_nan() {
        return Err(Error::Domain(format!("high-pass sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Dimension("high-pass filter needs positive size".into()));
    }
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    let two_var = T::of(2.0) * sigma * sigma;
    let mut response = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            let d: T = centered_distance(height, width, u, v);
            let value = -(-(d * d) / two_var).exp_m1();
            response.push(value.min(below_one));
        }
    }
    Ok(HighPassFilter { height, width, sigma, response })
}

/// `M' = H (x) M`, broadcast over channels. The result keeps the input's layout.
pub fn apply_filter<T: Scalar>(spectrum: &Spectrum<T>, filter: &HighPassFilter<T>) -> Result<Spectrum<T>> {
    if spectrum.height != filter.height || spectrum.width != filter.width {
        return Err(Error::Dimension(format!(
            "filter is {}x{}, spectrum is {}x{}",
            filter.height, filter.width, spectrum.height, spectrum.width
        )));
    }
    let was_centered = spectrum.centered;
    let mut out = spectrum.centered();
    let n = out.height * out.width;
    for plane in out.coefficients.chunks_mut(n) {
        for (z, &g) in plane.iter_mut().zip(&filter.response) {
            *z = z.scale(g);
        }
    }
    Ok(if was_centered { out } else { out.uncentered() })
}

/// `ifft2d(apply_filter(fft2d(image), gaussian_highpass(sigma)))`.
pub fn highpass_image<T: Scalar>(image: &Image<T>, sigma: T) -> Result<Image<T>> {
    let spectrum = fft2d(image)?;
    let filter = gaussian_highpass(image.height(), image.width(), sigma)?;
    ifft2d(&apply_filter(&spectrum, &filter)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(image: &Image<f64>) -> Vec<Complex<f64>> {
        let (h, w, c) = image.dims();
        let mut out = Vec::with_capacity(h * w * c);
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let mut acc = Complex::new(0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let phase = -2.0
                                * std::f64::consts::PI
                                * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                            acc += Complex::from_polar(image.get(y, x, ch), phase);
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn lcg_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut s = seed;
        Image::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn constant_2x2_has_only_dc() {
        let im = Image::filled(2, 2, 1, 1.0f64);
        let s = fft2d(&im).unwrap();
        assert_eq!(s.get(0, 0, 0), Complex::new(4.0, 0.0));
        for (u, v) in [(0, 1), (1, 0), (1, 1)] {
            assert!(s.get(u, v, 0).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut im = Image::zeros(4, 6, 1);
        im.set(1, 3, 0, 1.0f64);
        let s = fft2d(&im).unwrap();
        for z in s.coefficients() {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_on_8x8() {
        let im = lcg_image(8, 8, 2, 7);
        let s = fft2d(&im).unwrap();
        for (a, b) in s.coefficients().iter().zip(naive_dft(&im)) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_image_is_rejected() {
        let im = Image::<f32>::zeros(0, 4, 1);
        assert!(matches!(fft2d(&im), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let out = ifft2d(&Spectrum::<f64>::zeros(4, 4, 3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn removing_dc_subtracts_the_mean() {
        let im = lcg_image(6, 4, 1, 3);
        let mut s = fft2d(&im).unwrap();
        s.coefficients_mut()[0] = Complex::new(0.0, 0.0);
        let out = ifft2d(&s).unwrap();
        let mean = im.mean();
        for (a, b) in out.data().iter().zip(im.data()) {
            assert!((a - (b - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_roundtrip() {
        let s = fft2d(&lcg_image(5, 7, 1, 1)).unwrap();
        let c = s.centered();
        assert_eq!(c.get(2, 3, 0), s.get(0, 0, 0));
        assert_eq!(c.uncentered(), s);
    }

    #[test]
    fn haar_single_block_values() {
        let im = Image::from_rows(&[&[1.0f64, 0.0], &[0.0, 0.0]]).unwrap();
        let p = dwt_haar(&im, 1).unwrap();
        assert_eq!(p.ll.data(), &[0.5]);
        assert_eq!(p.details[0].horizontal.data(), &[0.5]);
        assert_eq!(p.details[0].vertical.data(), &[0.5]);
        assert_eq!(p.details[0].diagonal.data(), &[0.5]);

        let ones = Image::from_rows(&[&[1.0f64, 1.0], &[1.0, 1.0]]).unwrap();
        let p = dwt_haar(&ones, 1).unwrap();
        assert_eq!(p.ll.data(), &[2.0]);
        assert_eq!(p.details[0].sum().data(), &[0.0]);
    }

    #[test]
    fn haar_band_orientation() {
        // left/right difference lands in H, top/bottom in V
        let lr = Image::from_rows(&[&[1.0f64, -1.0], &[1.0, -1.0]]).unwrap();
        let p = dwt_haar(&lr, 1).unwrap();
        assert_eq!(p.details[0].horizontal.data(), &[2.0]);
        assert_eq!(p.details[0].vertical.data(), &[0.0]);
        let tb = Image::from_rows(&[&[1.0f64, 1.0], &[-1.0, -1.0]]).unwrap();
        let p = dwt_haar(&tb, 1).unwrap();
        assert_eq!(p.details[0].vertical.data(), &[2.0]);
        assert_eq!(p.details[0].horizontal.data(), &[0.0]);
    }

    #[test]
    fn dwt_requires_divisible_dims() {
        let im = Image::<f64>::zeros(12, 16, 1);
        let err = dwt_haar(&im, 3).unwrap_err();
        assert!(matches!(err, Error::Precondition(ref m) if m.contains("divisible by 8")));
        assert!(dwt_haar(&im, 2).is_ok());
        assert!(matches!(dwt_haar(&im, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn ll_only_pyramid_inverts_to_scaled_constant() {
        let levels = 3;
        let c = 5.0f64;
        let mut p = dwt_haar(&Image::<f64>::zeros(16, 16, 2), levels).unwrap();
        p.ll = Image::filled(2, 2, 2, c);
        let out = idwt_haar(&p).unwrap();
        for &v in out.data() {
            assert!((v - c / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idwt_rejects_inconsistent_bands() {
        let mut p = dwt_haar(&Image::<f64>::zeros(8, 8, 1), 2).unwrap();
        p.details[1].diagonal = Image::zeros(3, 2, 1);
        assert!(matches!(idwt_haar(&p), Err(Error::Structure(_))));
    }

    #[test]
    fn highpass_reference_points() {
        let f = gaussian_highpass(9, 9, 2.0f64).unwrap();
        assert_eq!(f.at(4, 4), 0.0);
        // (4, 6) is two bins from DC: D = sigma
        assert!((f.at(4, 6) - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((f.at(4, 6) - 0.39347).abs() < 1e-5);
    }

    #[test]
    fn highpass_rejects_bad_sigma() {
        assert!(matches!(gaussian_highpass(4, 4, 0.0f64), Err(Error::Domain(_))));
        assert!(matches!(gaussian_highpass(4, 4, -1.0f32), Err(Error::Domain(_))));
        assert!(matches!(gaussian_highpass(4, 4, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn huge_sigma_passes_nothing() {
        let f = gaussian_highpass(64, 64, 1e6f64).unwrap();
        assert!(f.response().iter().all(|&v| v < 1e-5));
    }

    #[test]
    fn tiny_sigma_stays_below_one() {
        let f = gaussian_highpass(32, 32, 1e-3f32).unwrap();
        assert!(f.response().iter().all(|&v| v < 1.0));
        assert_eq!(f.at(16, 16), 0.0);
    }

    #[test]
    fn trivial_filters() {
        let s = fft2d(&lcg_image(4, 4, 3, 9)).unwrap();
        let ones = HighPassFilter::from_response(4, 4, vec![1.0; 16]).unwrap();
        assert_eq!(apply_filter(&s, &ones).unwrap(), s);
        let zeros = HighPassFilter::from_response(4, 4, vec![0.0; 16]).unwrap();
        assert_eq!(apply_filter(&s, &zeros).unwrap().energy(), 0.0);
        let wrong = HighPassFilter::from_response(4, 2, vec![0.0; 8]).unwrap();
        assert!(matches!(apply_filter(&s, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_image_is_removed_by_highpass() {
        let im = Image::filled(16, 12, 3, 0.7f64);
        let (out, residue) = ifft2d_with_residue(
            &apply_filter(&fft2d(&im).unwrap(), &gaussian_highpass(16, 12, 3.0).unwrap()).unwrap(),
        )
        .unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));
        assert!(residue < 1e-5);
    }

    #[test]
    fn filtered_real_spectrum_stays_real() {
        for (h, w) in [(8, 8), (7, 9), (6, 5)] {
            let im = lcg_image(h, w, 1, 11);
            let filtered =
                apply_filter(&fft2d(&im).unwrap(), &gaussian_highpass(h, w, 1.5).unwrap()).unwrap();
            let (_, residue) = ifft2d_with_residue(&filtered).unwrap();
            assert!(residue < 1e-5, "{h}x{w}: {residue}");
        }
    }
}
