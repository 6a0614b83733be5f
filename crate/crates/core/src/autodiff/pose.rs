//! Axis-angle to rotation matrix, with an exact Jacobian computed by
//! forward-mode dual numbers.

use std::ops::{Add, Mul, Neg, Sub};

use super::{Tape, Var};
use crate::tensor::Tensor;

/// Value plus three tangent components.
#[derive(Clone, Copy, Debug)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; 3];
        d[k] = 1.0;
        Self { v, d }
    }

    fn apply(self, f: f64, df: f64) -> Self {
        Self {
            v: f,
            d: self.d.map(|x| x * df),
        }
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.apply(s, 0.5 / s)
    }

    fn sin(self) -> Self {
        self.apply(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.apply(self.v.cos(), -self.v.sin())
    }

    fn recip(self) -> Self {
        self.apply(1.0 / self.v, -1.0 / (self.v * self.v))
    }

    fn scale(self, s: f64) -> Self {
        Self {
            v: self.v * s,
            d: self.d.map(|x| x * s),
        }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

fn rodrigues(w: [Dual3; 3]) -> [Dual3; 9] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    // coefficients of [w]x and [w]x^2; Taylor expansions near zero keep the
    // tangents finite
    let (a, b) = if theta2.v < 1e-8 {
        (
            Dual3::constant(1.0) - theta2.scale(1.0 / 6.0),
            Dual3::constant(0.5) - theta2.scale(1.0 / 24.0),
        )
    } else {
        let theta = theta2.sqrt();
        let inv = theta.recip();
        let inv2 = theta2.recip();
        (theta.sin() * inv, (Dual3::constant(1.0) - theta.cos()) * inv2)
    };
    let zero = Dual3::constant(0.0);
    let k = [zero, -w[2], w[1], w[2], zero, -w[0], -w[1], w[0], zero];
    let mut k2 = [zero; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = zero;
            for l in 0..3 {
                acc = acc + k[i * 3 + l] * k[l * 3 + j];
            }
            k2[i * 3 + j] = acc;
        }
    }
    let mut r = [zero; 9];
    for i in 0..9 {
        let eye = if i % 4 == 0 { 1.0 } else { 0.0 };
        r[i] = Dual3::constant(eye) + a * k[i] + b * k2[i];
    }
    r
}

/// Row-major rotation matrix for the axis-angle vector `w`.
pub fn axis_angle_to_matrix(w: [f64; 3]) -> [f64; 9] {
    rodrigues(w.map(Dual3::constant)).map(|d| d.v)
}

/// Row-major rotation matrix and its Jacobian: `jac[i][k] = dR_i / dw_k`.
pub fn axis_angle_to_matrix_jacobian(w: [f64; 3]) -> ([f64; 9], [[f64; 3]; 9]) {
    let r = rodrigues([
        Dual3::variable(w[0], 0),
        Dual3::variable(w[1], 1),
        Dual3::variable(w[2], 2),
    ]);
    (r.map(|d| d.v), r.map(|d| d.d))
}

impl Tape {
    /// Maps a 6-vector `(axis-angle, translation)` to a 12-vector holding
    /// the row-major rotation followed by the translation.
    pub fn pose_from_params(&self, params: Var) -> Var {
        let p = self.value(params);
        assert_eq!(p.len(), 6, "pose parameters must have 6 entries");
        let d = p.data();
        let (r, jac) = axis_angle_to_matrix_jacobian([d[0], d[1], d[2]]);
        let mut out = r.to_vec();
        out.extend_from_slice(&d[3..6]);
        self.custom(Tensor::new([12], out), &[params], move |g, _| {
            let g = g.data();
            let mut gp = vec![0.0; 6];
            for (i, row) in jac.iter().enumerate() {
                for k in 0..3 {
                    gp[k] += g[i] * row[k];
                }
            }
            gp[3..6].copy_from_slice(&g[9..12]);
            vec![Some(Tensor::new([6], gp))]
        })
    }
}
