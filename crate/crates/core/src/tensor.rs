//! Dense channel-major (C×H×W) tensors.
//!
//! Images, disparity maps and confidence maps all share this layout. The
//! element type is generic so the sampling and loss code can be run in
//! double precision for gradient checking while the network runs in `f32`.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

/// H×W×3 image in [-1, 1].
pub type ImageTensor<T = f32> = Tensor<T>;
/// H×W×1 map of non-negative horizontal displacements in pixels.
pub type DisparityMap<T = f32> = Tensor<T>;
/// H×W×1 map with values in (0, 1].
pub type ConfidenceMap<T = f32> = Tensor<T>;

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor::from_vec", shape.len(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
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

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(c, y, x);
        self.data[o] = v;
    }

    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[T] {
        let o = self.offset(c, y, 0);
        &self.data[o..o + self.shape.width]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, y: usize) -> &mut [T] {
        let o = self.offset(c, y, 0);
        let w = self.shape.width;
        &mut self.data[o..o + w]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape("zip_map", other.shape)?;
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

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape("add_assign", other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn expect_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, expected, self.shape));
        }
        Ok(())
    }

    /// Checks that `other` covers the same H×W grid, ignoring channels.
    pub fn expect_same_grid(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.height() != other.height() || self.width() != other.width() {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        Ok(())
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::infinity(), |a, b| if b < a { b } else { a })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
        }
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::shape("concat_channels", first.shape, p.shape));
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(channels, h, w),
            data,
        })
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        let p = self.shape.plane();
        Tensor {
            shape: Shape::new(count, self.height(), self.width()),
            data: self.data[start * p..(start + count) * p].to_vec(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}",
                self.shape
            )));
        }
        let shape = Shape::new(self.channels(), height, width);
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..self.channels() {
            for y in top..top + height {
                let row = self.row(c, y);
                data.extend_from_slice(&row[left..left + width]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Pads bottom and right edges by mirror reflection (edge pixel not
    /// repeated). Pads longer than the image keep folding back and forth.
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot pad empty tensor {}",
                self.shape
            )));
        }
        let reflect = |i: usize, n: usize| {
            if n == 1 {
                return 0;
            }
            let m = i % (2 * (n - 1));
            if m < n {
                m
            } else {
                2 * (n - 1) - m
            }
        };
        let shape = Shape::new(self.channels(), h + bottom, w + right);
        Ok(Tensor::from_fn(shape, |c, y, x| {
            self.get(c, reflect(y, h), reflect(x, w))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_slice_round_trip() {
        let a =
            Tensor::<f32>::from_fn(Shape::new(2, 2, 3), |c, y, x| (c * 100 + y * 10 + x) as f32);
        let b = Tensor::<f32>::filled(Shape::new(1, 2, 3), 7.0);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 3);
        assert_eq!(cat.slice_channels(0, 2), a);
        assert_eq!(cat.slice_channels(2, 1), b);
    }

    #[test]
    fn concat_rejects_grid_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 3));
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let a = Tensor::<f32>::from_fn(Shape::new(3, 5, 7), |c, y, x| (c + 2 * y + 3 * x) as f32);
        let p = a.pad_reflect(3, 4).unwrap();
        assert_eq!(p.height(), 8);
        assert_eq!(p.width(), 11);
        // mirror without repeating the edge
        assert_eq!(p.get(0, 0, 7), a.get(0, 0, 5));
        assert_eq!(p.crop(0, 0, 5, 7).unwrap(), a);
        let long = a.pad_reflect(20, 0).unwrap();
        // rows 0..5 then 3,2,1,0,1,2,3,4,3,...
        assert_eq!(long.get(0, 8, 0), a.get(0, 0, 0));
        assert_eq!(long.get(0, 12, 0), a.get(0, 4, 0));
    }
}

/// Binary H×W mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Mask::from_vec", height * width, data.len()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
