//! Validated RGB (or single-channel) images.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// An image as a `[C, H, W]` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid(Tensor);

impl ImageGrid {
    pub const MIN_SIDE: usize = 8;

    /// Validates the shape and finiteness, clamping values into `[0, 1]`.
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(t.shape().len() == 3, "image must be [C, H, W], got {:?}", t.shape());
        let (c, h, w) = t.chw();
        ensure!(c >= 1, "image needs at least one channel");
        ensure!(
            h >= Self::MIN_SIDE && w >= Self::MIN_SIDE,
            "image is {h}x{w}, minimum side is {}",
            Self::MIN_SIDE
        );
        ensure!(t.all_finite(), "image contains non-finite values");
        Ok(Self(t.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn from_fn(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn([c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            f(ch, rest / w, rest % w)
        }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.chw().0
    }

    pub fn height(&self) -> usize {
        self.0.chw().1
    }

    pub fn width(&self) -> usize {
        self.0.chw().2
    }

    /// Area-average downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let (c, h, w) = self.0.chw();
        ensure!(factor >= 1 && h % factor == 0 && w % factor == 0, "cannot downsample {h}x{w} by {factor}");
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        Self::from_fn(c, oh, ow, |ch, y, x| {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += self.0.at(ch, y * factor + dy, x * factor + dx);
                }
            }
            s * inv
        })
    }
}
