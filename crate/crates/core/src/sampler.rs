//! Differentiable bilinear sampling with clamp-to-edge borders.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Mask, Tensor};

/// Interpolation footprint of one sample.
#[derive(Clone, Copy)]
struct Footprint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// coordinate was clamped in u / v, which zeroes that gradient
    clamped_u: bool,
    clamped_v: bool,
}

fn footprint(u: f64, v: f64, h: usize, w: usize) -> Footprint {
    let (u, v) = (if u.is_finite() { u } else { -1.0 }, if v.is_finite() { v } else { -1.0 });
    let umax = (w - 1) as f64;
    let vmax = (h - 1) as f64;
    let uc = u.clamp(0.0, umax);
    let vc = v.clamp(0.0, vmax);
    let x0 = if w > 1 { (uc.floor() as usize).min(w - 2) } else { 0 };
    let y0 = if h > 1 { (vc.floor() as usize).min(h - 2) } else { 0 };
    Footprint {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: uc - x0 as f64,
        fy: vc - y0 as f64,
        clamped_u: u < 0.0 || u > umax,
        clamped_v: v < 0.0 || v > vmax,
    }
}

/// Whether `(u, v)` lies inside the image (inclusive of the border pixel
/// centres).
#[inline]
pub fn in_bounds(u: f64, v: f64, h: usize, w: usize) -> bool {
    u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64
}

impl Tape {
    /// Samples `img: [C, H, W]` at `coords: [2, H', W']` (rows `u`, `v`).
    ///
    /// Out-of-bounds coordinates are clamped to the border and flagged false
    /// in the returned validity mask. Gradients reach both the image and the
    /// coordinates; a clamped coordinate gets zero gradient.
    pub fn bilinear_sample(&self, img: Var, coords: Var) -> (Var, Mask) {
        let iv = self.value(img);
        let cv = self.value(coords);
        let (c, h, w) = iv.chw();
        let (two, oh, ow) = cv.chw();
        assert_eq!(two, 2, "coords must be [2, H, W]");
        let np = oh * ow;
        let (us, vs) = cv.data().split_at(np);
        let fps: Vec<Footprint> = (0..np).map(|i| footprint(us[i], vs[i], h, w)).collect();
        let valid = Mask::new(oh, ow, (0..np).map(|i| in_bounds(us[i], vs[i], h, w)).collect());
        let d = iv.data();
        let mut out = vec![0.0; c * np];
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for (i, f) in fps.iter().enumerate() {
                let top = (1.0 - f.fx) * plane[f.y0 * w + f.x0] + f.fx * plane[f.y0 * w + f.x1];
                let bot = (1.0 - f.fx) * plane[f.y1 * w + f.x0] + f.fx * plane[f.y1 * w + f.x1];
                out[ch * np + i] = (1.0 - f.fy) * top + f.fy * bot;
            }
        }
        let fps = Rc::new(fps);
        let out = self.custom(Tensor::new([c, oh, ow], out), &[img, coords], move |g, needs| {
            let gd = g.data();
            let gi = needs[0].then(|| {
                let mut gi = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut gi[ch * h * w..(ch + 1) * h * w];
                    for (i, f) in fps.iter().enumerate() {
                        let gv = gd[ch * np + i];
                        if gv == 0.0 {
                            continue;
                        }
                        plane[f.y0 * w + f.x0] += gv * (1.0 - f.fx) * (1.0 - f.fy);
                        plane[f.y0 * w + f.x1] += gv * f.fx * (1.0 - f.fy);
                        plane[f.y1 * w + f.x0] += gv * (1.0 - f.fx) * f.fy;
                        plane[f.y1 * w + f.x1] += gv * f.fx * f.fy;
                    }
                }
                Tensor::new([c, h, w], gi)
            });
            let gc = needs[1].then(|| {
                let d = iv.data();
                let mut gc = vec![0.0; 2 * np];
                for ch in 0..c {
                    let plane = &d[ch * h * w..(ch + 1) * h * w];
                    for (i, f) in fps.iter().enumerate() {
                        let gv = gd[ch * np + i];
                        let (a, b) = (plane[f.y0 * w + f.x0], plane[f.y0 * w + f.x1]);
                        let (cc, dd) = (plane[f.y1 * w + f.x0], plane[f.y1 * w + f.x1]);
                        if !f.clamped_u && f.x1 != f.x0 {
                            gc[i] += gv * ((1.0 - f.fy) * (b - a) + f.fy * (dd - cc));
                        }
                        if !f.clamped_v && f.y1 != f.y0 {
                            let top = (1.0 - f.fx) * a + f.fx * b;
                            let bot = (1.0 - f.fx) * cc + f.fx * dd;
                            gc[np + i] += gv * (bot - top);
                        }
                    }
                }
                Tensor::new([2, oh, ow], gc)
            });
            vec![gi, gc]
        });
        (out, valid)
    }
}

/// Value-level bilinear sampling of `img: [C, H, W]` at `coords: [2, H', W']`.
pub fn bilinear_sample(img: &Tensor, coords: &Tensor) -> Result<(Tensor, Mask)> {
    ensure!(img.shape().len() == 3, "image must be [C, H, W], got {:?}", img.shape());
    ensure!(
        coords.shape().len() == 3 && coords.shape()[0] == 2,
        "coords must be [2, H, W], got {:?}",
        coords.shape()
    );
    ensure!(
        img.shape()[1..] == coords.shape()[1..],
        "image {:?} and coords {:?} disagree on H×W",
        img.shape(),
        coords.shape()
    );
    ensure!(coords.all_finite(), "coords must be finite");
    let tape = Tape::new();
    let (out, valid) = tape.bilinear_sample(tape.constant(img.clone()), tape.constant(coords.clone()));
    Ok(((*tape.value(out)).clone(), valid))
}
