//! Dense NCHW tensors and the image/depth containers built on them.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Batch of feature planes in `[batch, channels, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies batch item `n` out as a single-item tensor.
    pub fn select(&self, n: usize) -> Tensor<T> {
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }

    /// Batch items at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::Bounds { idx: i, len: self.shape[0] });
            }
            data.extend_from_slice(self.item(i));
        }
        Ok(Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        })
    }

    /// Concatenates tensors of identical per-item shape along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "stack: item shape {:?} differs from {:?}",
                    &p.shape[1..],
                    [c, h, w]
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn ensure_shape(&self, want: [usize; 4], what: &str) -> Result<()> {
        if self.shape != want {
            return Err(Error::shape(format!(
                "{what}: expected shape {want:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.ensure_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.ensure_shape(other.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / lit(self.data.len().max(1) as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// A single RGB image with values in `[0, 1]`, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    /// `3 × height × width`, channel-major.
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} elements, expected {}",
                data.len(),
                3 * height * width
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Image {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Packs images of equal size into one batch tensor.
    pub fn batch(images: &[&Image<T>]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape("images in a batch differ in size"));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec([images.len(), 3, h, w], data)
    }
}

/// Metric depth with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> DepthMap<T> {
    /// Depth map with every pixel valid.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let mask = vec![true; data.len()];
        Self::with_mask(height, width, data, mask)
    }

    pub fn with_mask(height: usize, width: usize, data: Vec<T>, mask: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || mask.len() != height * width {
            return Err(Error::shape(format!(
                "depth map buffers ({}, {}) do not match {height}×{width}",
                data.len(),
                mask.len()
            )));
        }
        Ok(DepthMap {
            height,
            width,
            data,
            mask,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        DepthMap {
            height,
            width,
            data: vec![value; height * width],
            mask: vec![true; height * width],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Views the map as a `1 × 1 × H × W` tensor (mask dropped).
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor {
            shape: [1, 1, self.height, self.width],
            data: self.data.clone(),
        }
    }

    /// Reads batch item `n` of a single-channel tensor as an all-valid map.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::shape(format!(
                "depth tensor must have one channel, got {}",
                t.channels()
            )));
        }
        Self::new(t.height(), t.width(), t.item(n).to_vec())
    }

    /// Halves resolution by averaging valid pixels of each 2×2 block. A block
    /// with no valid pixel stays invalid.
    pub fn downsample2(&self) -> Result<Self> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::shape("downsample2 needs even dimensions"));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = vec![T::zero(); h * w];
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                let mut count = 0usize;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * self.width + 2 * x + dx;
                    if self.mask[i] {
                        acc += self.data[i];
                        count += 1;
                    }
                }
                if count > 0 {
                    data[y * w + x] = acc / lit(count as f64);
                    mask[y * w + x] = true;
                }
            }
        }
        Self::with_mask(h, w, data, mask)
    }
}
