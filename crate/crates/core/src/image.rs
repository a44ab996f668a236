//! Spatial-domain images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An `H x W x C` real image.
///
/// Storage is channel-planar (all of channel 0, then channel 1, ...), which
/// keeps per-channel transforms contiguous and makes batching into
/// `[N, C, H, W]` tensors a plain copy. Pixel values of normalized images lie
/// in `[-1, 1]`; residuals and intermediate maps are unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Image { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Image { height, width, channels, data }
    }

    /// Wraps channel-planar data.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    /// Wraps a single-channel row-major grid.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_planar(height, width, 1, rows.concat())
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.with_data(data))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "image shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of_usize(self.data.len().max(1))
    }

    /// Circular shift by `(dy, dx)` pixels.
    pub fn roll(&self, dy: usize, dx: usize) -> Self {
        let (h, w) = (self.height, self.width);
        Image::from_fn(h, w, self.channels, |y, x, c| {
            self.get((y + h - dy % h) % h, (x + w - dx % w) % w, c)
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    /// `[1, C, H, W]` view of this image.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("planar layout matches NCHW")
    }

    pub fn batch(images: &[Image<T>]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let mut data = Vec::with_capacity(first.len() * images.len());
        for im in images {
            first.check_same_shape(im)?;
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
    }

    pub fn unbatch(t: &Tensor<T>) -> Vec<Image<T>> {
        let (n, c, h, w) = t.dims4();
        (0..n)
            .map(|i| Image { height: h, width: w, channels: c, data: t.item(i).to_vec() })
            .collect()
    }

    fn with_data(&self, data: Vec<T>) -> Self {
        Image { height: self.height, width: self.width, channels: self.channels, data }
    }
}
