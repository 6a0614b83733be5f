//! Dense row-major `f64` tensors.
//!
//! Image-like data is laid out channel-major as `[C, H, W]`; scalars are
//! shape `[1]`. There is no batch dimension: batches are handled by
//! summing per-sample losses on one tape.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new([1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            data: (0..n).map(&mut f).collect(),
            shape,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `[C, H, W]`. Rank-2 tensors are treated as a
    /// single channel.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            s => panic!("expected a [C, H, W] tensor, got {s:?}"),
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Value at `(c, y, x)` of a `[C, H, W]` tensor.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    /// One channel plane as a `[1, H, W]` tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let (_, h, w) = self.chw();
        Tensor::new([1, h, w], self.data[c * h * w..(c + 1) * h * w].to_vec())
    }
}

/// A per-pixel boolean map, stored row-major `H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(height * width, bits.len());
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn not(&self) -> Mask {
        Mask::new(self.height, self.width, self.bits.iter().map(|b| !b).collect())
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask::new(
            self.height,
            self.width,
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        )
    }

    pub fn or(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask::new(
            self.height,
            self.width,
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        )
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.and(other).count();
        let union = self.or(other).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// `[1, H, W]` tensor with 1.0 where set.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Nearest-neighbour resampling to a new resolution.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }
}
