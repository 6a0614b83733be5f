//! Pinhole intrinsics, rigid transforms and the homogeneous pixel grid.
//!
//! Pixel coordinates are `(u, v)` with `u` pointing right and `v` down. The
//! origin sits on the centre of the top-left pixel, so pixel `(x, y)` has
//! coordinates `(x as f64, y as f64)`.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::autodiff::axis_angle_to_matrix;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        ensure!(fx > 0.0 && fy > 0.0, "focal lengths must be positive (fx={fx}, fy={fy})");
        ensure!(cx.is_finite() && cy.is_finite(), "principal point must be finite");
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics for a `width × height` image with normalised focal
    /// lengths (fractions of the image size) and a centred principal point.
    pub fn from_normalized(fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            fx * width as f64,
            fy * height as f64,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics after resizing the image by `(sx, sy)`: every entry of the
    /// first two rows of K is multiplied by the scale factor.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }

    /// Ray `K⁻¹ [u, v, 1]ᵀ`, with unit z.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid transform `p ↦ R p + t` (translation in metres).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub const ORTHONORMAL_TOL: f64 = 1e-8;

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validated constructor.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// From an axis-angle rotation vector and a translation.
    pub fn from_axis_angle(w: [f64; 3], t: [f64; 3]) -> Self {
        let r = axis_angle_to_matrix(w);
        Self {
            rotation: Matrix3::from_row_slice(&r),
            translation: Vector3::from(t),
        }
    }

    /// From the 12-vector `[R row-major, t]` used on the autodiff tape.
    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 12);
        Self {
            rotation: Matrix3::from_row_slice(&v[..9]),
            translation: Vector3::new(v[9], v[10], v[11]),
        }
    }

    pub fn to_flat(&self) -> Tensor {
        let mut v: Vec<f64> = Vec::with_capacity(12);
        for i in 0..3 {
            for j in 0..3 {
                v.push(self.rotation[(i, j)]);
            }
        }
        v.extend(self.translation.iter());
        Tensor::new([12], v)
    }

    /// Axis-angle rotation vector and translation.
    pub fn to_axis_angle(&self) -> ([f64; 3], [f64; 3]) {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let w = rot.scaled_axis();
        ([w.x, w.y, w.z], [self.translation.x, self.translation.y, self.translation.z])
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()),
            "pose contains non-finite entries"
        );
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        ensure!(err <= Self::ORTHONORMAL_TOL, "rotation is not orthonormal (|RᵀR − I| = {err:e})");
        let det = self.rotation.determinant();
        ensure!(
            (det - 1.0).abs() <= Self::ORTHONORMAL_TOL,
            "rotation determinant is {det}, expected +1"
        );
        Ok(())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Checked composition; both inputs must be valid poses.
    pub fn try_compose(&self, other: &PoseSE3) -> Result<PoseSE3> {
        self.validate()?;
        other.validate()?;
        Ok(self.compose(other))
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest absolute entry difference to `other`.
    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// Homogeneous pixel coordinates `p_t` for an `H × W` image: a `[3, H, W]`
/// tensor holding `(u, v, 1)` at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid(Tensor);

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let hw = height * width;
        Self(Tensor::from_fn([3, height, width], |i| match i / hw {
            0 => (i % width) as f64,
            1 => ((i % hw) / width) as f64,
            _ => 1.0,
        }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// The `(u, v)` rows as a `[2, H, W]` coordinate tensor.
    pub fn coords(&self) -> Tensor {
        let (_, h, w) = self.0.chw();
        Tensor::new([2, h, w], self.0.data()[..2 * h * w].to_vec())
    }
}
