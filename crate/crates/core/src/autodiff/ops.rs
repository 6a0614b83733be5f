//! Differentiable tensor operations recorded on a [`Tape`].

use std::rc::Rc;

use super::{Tape, Var};
use crate::tensor::{Mask, Tensor};

/// How an operand of a binary op maps onto the output.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// `[1, H, W]` operand against a `[C, H, W]` output.
    Plane(usize),
}

impl Bcast {
    fn of(out: &[usize], operand: &[usize]) -> Bcast {
        if out == operand {
            return Bcast::Same;
        }
        let n: usize = operand.iter().product();
        if n == 1 {
            return Bcast::Scalar;
        }
        match (out, operand) {
            ([_, h, w], [1, oh, ow]) if h == oh && w == ow => Bcast::Plane(h * w),
            _ => panic!("cannot broadcast {operand:?} to {out:?}"),
        }
    }

    /// Sums an output-shaped gradient back to the operand shape.
    fn reduce(self, g: Vec<f64>, shape: &[usize]) -> Tensor {
        match self {
            Bcast::Same => Tensor::new(shape.to_vec(), g),
            Bcast::Scalar => Tensor::new(shape.to_vec(), vec![g.iter().sum()]),
            Bcast::Plane(hw) => {
                let mut out = vec![0.0; hw];
                for chunk in g.chunks(hw) {
                    out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                Tensor::new(shape.to_vec(), out)
            }
        }
    }
}

/// `f(a[i], b[i])` over `n` output elements with broadcasting.
fn bmap(n: usize, a: &[f64], ba: Bcast, b: &[f64], bb: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (ba, bb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Bcast::Scalar, Bcast::Same) => b.iter().map(|&y| f(a[0], y)).collect(),
        _ => {
            let period = match (ba, bb) {
                (Bcast::Plane(hw), _) | (_, Bcast::Plane(hw)) => hw,
                _ => n,
            };
            let mut out = Vec::with_capacity(n);
            for start in (0..n).step_by(period) {
                for j in 0..period {
                    let i = start + j;
                    let pick = |d: &[f64], bc: Bcast| match bc {
                        Bcast::Same => d[i],
                        Bcast::Scalar => d[0],
                        Bcast::Plane(_) => d[j],
                    };
                    out.push(f(pick(a, ba), pick(b, bb)));
                }
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn larger_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.len() >= b.len() {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    }
}

impl Tape {
    fn binary(&self, a: Var, b: Var, op: BinOp) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out_shape = larger_shape(&av, &bv);
        let ba = Bcast::of(&out_shape, av.shape());
        let bb = Bcast::of(&out_shape, bv.shape());
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let out = match op {
            BinOp::Add => bmap(n, ad, ba, bd, bb, |x, y| x + y),
            BinOp::Sub => bmap(n, ad, ba, bd, bb, |x, y| x - y),
            BinOp::Mul => bmap(n, ad, ba, bd, bb, |x, y| x * y),
            BinOp::Div => bmap(n, ad, ba, bd, bb, |x, y| x / y),
        };
        self.custom(Tensor::new(out_shape, out), &[a, b], move |g, needs| {
            let g = g.data();
            let n = g.len();
            let (ad, bd) = (av.data(), bv.data());
            let ga = needs[0].then(|| {
                let v = match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => bmap(n, g, Bcast::Same, bd, bb, |g, y| g * y),
                    BinOp::Div => bmap(n, g, Bcast::Same, bd, bb, |g, y| g / y),
                };
                ba.reduce(v, av.shape())
            });
            let gb = needs[1].then(|| {
                let v = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|v| -v).collect(),
                    BinOp::Mul => bmap(n, g, Bcast::Same, ad, ba, |g, x| g * x),
                    BinOp::Div => {
                        let gx = bmap(n, g, Bcast::Same, ad, ba, |g, x| g * x);
                        bmap(n, &gx, Bcast::Same, bd, bb, |t, y| -t / (y * y))
                    }
                };
                bb.reduce(v, bv.shape())
            });
            vec![ga, gb]
        })
    }

    /// Elementwise sum. Either side may be a scalar or a `[1, H, W]` plane
    /// broadcast against `[C, H, W]`.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let xv = self.value(x);
        let out = Rc::new(xv.map(f));
        let out_c = Rc::clone(&out);
        self.custom((*out).clone(), &[x], move |g, _| {
            let data: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(out_c.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(xv.shape().to_vec(), data))]
        })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, move |x| x * s, move |_, _| s)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn elu(&self, x: Var) -> Var {
        self.unary(
            x,
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.custom(Tensor::scalar(xv.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape.to_vec());
        self.custom(out, &[x], move |g, _| vec![Some(g.clone().reshape(old.clone()))])
    }

    /// Mean over channels: `[C, H, W] -> [1, H, W]`.
    pub fn channel_mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&xv.data()[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        let inv = 1.0 / c as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.custom(Tensor::new([1, h, w], out), &[x], move |g, _| {
            let gd = g.data();
            let data: Vec<f64> = (0..c * hw).map(|i| gd[i % hw] * inv).collect();
            vec![Some(Tensor::new([c, h, w], data))]
        })
    }

    /// Mean over pixels per channel: `[C, H, W] -> [C]`.
    pub fn spatial_mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let hw = h * w;
        let out: Vec<f64> = (0..c)
            .map(|ch| xv.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.custom(Tensor::new([c], out), &[x], move |g, _| {
            let gd = g.data();
            let data: Vec<f64> = (0..c * hw).map(|i| gd[i / hw] / hw as f64).collect();
            vec![Some(Tensor::new([c, h, w], data))]
        })
    }

    /// Adds a per-channel vector `b: [C]` to `x: [C, H, W]`.
    pub fn add_channel(&self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let (c, h, w) = xv.chw();
        assert_eq!(bv.len(), c, "add_channel: bias length mismatch");
        let hw = h * w;
        let data: Vec<f64> = (0..c * hw).map(|i| xv.data()[i] + bv.data()[i / hw]).collect();
        self.custom(Tensor::new([c, h, w], data), &[x, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let v: Vec<f64> = (0..c)
                    .map(|ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum())
                    .collect();
                Tensor::new([c], v)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Stacks `[C_i, H, W]` inputs along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let (_, h, w) = vals[0].chw();
        let mut data = Vec::new();
        let mut counts = Vec::new();
        for v in &vals {
            let (c, vh, vw) = v.chw();
            assert_eq!((vh, vw), (h, w), "concat_channels: spatial mismatch");
            data.extend_from_slice(v.data());
            counts.push(c);
        }
        let total: usize = counts.iter().sum();
        self.custom(Tensor::new([total, h, w], data), xs, move |g, needs| {
            let mut off = 0;
            counts
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let n = c * h * w;
                    let part = need.then(|| Tensor::new([c, h, w], g.data()[off..off + n].to_vec()));
                    off += n;
                    part
                })
                .collect()
        })
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let out = Tensor::new([len, h, w], xv.data()[start * hw..(start + len) * hw].to_vec());
        self.custom(out, &[x], move |g, _| {
            let mut full = vec![0.0; c * hw];
            full[start * hw..(start + len) * hw].copy_from_slice(g.data());
            vec![Some(Tensor::new([c, h, w], full))]
        })
    }

    /// Nearest-neighbour resize of a `[C, H, W]` tensor.
    pub fn resize_nearest(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let map: Vec<usize> = (0..out_h * out_w)
            .map(|i| {
                let (y, x) = (i / out_w, i % out_w);
                ((y * h) / out_h) * w + (x * w) / out_w
            })
            .collect();
        let mut data = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &xv.data()[ch * h * w..(ch + 1) * h * w];
            data.extend(map.iter().map(|&m| plane[m]));
        }
        self.custom(Tensor::new([c, out_h, out_w], data), &[x], move |g, _| {
            let mut gx = vec![0.0; c * h * w];
            let on = out_h * out_w;
            for ch in 0..c {
                for (i, &m) in map.iter().enumerate() {
                    gx[ch * h * w + m] += g.data()[ch * on + i];
                }
            }
            vec![Some(Tensor::new([c, h, w], gx))]
        })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let (oh, ow) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let b = ch * h * w + 2 * y * w + 2 * x;
                    out[(ch * oh + y) * ow + x] = 0.25 * (d[b] + d[b + 1] + d[b + w] + d[b + w + 1]);
                }
            }
        }
        self.custom(Tensor::new([c, oh, ow], out), &[x], move |g, _| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let v = 0.25 * g.data()[(ch * oh + y) * ow + x];
                        let b = ch * h * w + 2 * y * w + 2 * x;
                        gx[b] += v;
                        gx[b + 1] += v;
                        gx[b + w] += v;
                        gx[b + w + 1] += v;
                    }
                }
            }
            vec![Some(Tensor::new([c, h, w], gx))]
        })
    }

    /// `window × window` box mean with replicate padding (same output size).
    /// `window` must be odd.
    pub fn box_mean_replicate(&self, x: Var, window: usize) -> Var {
        assert!(window % 2 == 1, "box window must be odd");
        let r = (window / 2) as isize;
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let inv = 1.0 / (window * window) as f64;
        let out = box_sum(xv.data(), c, h, w, r, false);
        let out = out.into_iter().map(|v| v * inv).collect();
        self.custom(Tensor::new([c, h, w], out), &[x], move |g, _| {
            let gx = box_sum(g.data(), c, h, w, r, true);
            vec![Some(Tensor::new([c, h, w], gx.into_iter().map(|v| v * inv).collect()))]
        })
    }

    /// Forward difference along x: `[C, H, W] -> [C, H, W-1]`.
    pub fn diff_x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let d = xv.data();
        let mut out = Vec::with_capacity(c * h * (w - 1));
        for row in 0..c * h {
            for x in 0..w - 1 {
                out.push(d[row * w + x + 1] - d[row * w + x]);
            }
        }
        self.custom(Tensor::new([c, h, w - 1], out), &[x], move |g, _| {
            let mut gx = vec![0.0; c * h * w];
            for row in 0..c * h {
                for x in 0..w - 1 {
                    let v = g.data()[row * (w - 1) + x];
                    gx[row * w + x + 1] += v;
                    gx[row * w + x] -= v;
                }
            }
            vec![Some(Tensor::new([c, h, w], gx))]
        })
    }

    /// Forward difference along y: `[C, H, W] -> [C, H-1, W]`.
    pub fn diff_y(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let d = xv.data();
        let mut out = Vec::with_capacity(c * (h - 1) * w);
        for ch in 0..c {
            for y in 0..h - 1 {
                for x in 0..w {
                    let i = (ch * h + y) * w + x;
                    out.push(d[i + w] - d[i]);
                }
            }
        }
        self.custom(Tensor::new([c, h - 1, w], out), &[x], move |g, _| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h - 1 {
                    for x in 0..w {
                        let v = g.data()[(ch * (h - 1) + y) * w + x];
                        let i = (ch * h + y) * w + x;
                        gx[i + w] += v;
                        gx[i] -= v;
                    }
                }
            }
            vec![Some(Tensor::new([c, h, w], gx))]
        })
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let hw = h * w;
        let d = xv.data();
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let m = (0..c).map(|ch| d[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for ch in 0..c {
                let e = (d[ch * hw + p] - m).exp();
                out[ch * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[ch * hw + p] /= s;
            }
        }
        let y = Rc::new(Tensor::new([c, h, w], out));
        let yc = Rc::clone(&y);
        self.custom((*y).clone(), &[x], move |g, _| {
            let (gd, yd) = (g.data(), yc.data());
            let mut gx = vec![0.0; c * hw];
            for p in 0..hw {
                let dot: f64 = (0..c).map(|ch| gd[ch * hw + p] * yd[ch * hw + p]).sum();
                for ch in 0..c {
                    let i = ch * hw + p;
                    gx[i] = yd[i] * (gd[i] - dot);
                }
            }
            vec![Some(Tensor::new([c, h, w], gx))]
        })
    }

    /// Softmax over a flat vector.
    pub fn softmax(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let as_chw = self.reshape(x, &[n, 1, 1]);
        let s = self.softmax_channels(as_chw);
        self.reshape(s, &[n])
    }

    /// `sum_i weights[i] * p[i]` over channels: `[N, H, W] x [N] -> [1, H, W]`.
    pub fn weighted_channel_sum(&self, p: Var, weights: Var) -> Var {
        let pv = self.value(p);
        let wv = self.value(weights);
        let (n, h, w) = pv.chw();
        assert_eq!(wv.len(), n, "weighted_channel_sum: weight length mismatch");
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for i in 0..n {
            let c = wv.data()[i];
            for (o, v) in out.iter_mut().zip(&pv.data()[i * hw..(i + 1) * hw]) {
                *o += c * v;
            }
        }
        self.custom(Tensor::new([1, h, w], out), &[p, weights], move |g, needs| {
            let gd = g.data();
            let gp = needs[0].then(|| {
                let data: Vec<f64> = (0..n * hw).map(|i| gd[i % hw] * wv.data()[i / hw]).collect();
                Tensor::new([n, h, w], data)
            });
            let gw = needs[1].then(|| {
                let data: Vec<f64> = (0..n)
                    .map(|i| {
                        pv.data()[i * hw..(i + 1) * hw]
                            .iter()
                            .zip(gd)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                Tensor::new([n], data)
            });
            vec![gp, gw]
        })
    }

    /// Per-pixel select: `a` where the mask is set, `b` elsewhere. Gradients
    /// reach only the selected branch.
    pub fn select(&self, mask: &Mask, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "select: shape mismatch");
        let (c, h, w) = av.chw();
        assert_eq!((mask.height(), mask.width()), (h, w), "select: mask shape mismatch");
        let hw = h * w;
        let bits: Rc<Vec<bool>> = Rc::new(mask.bits().to_vec());
        let data: Vec<f64> = (0..c * hw)
            .map(|i| if bits[i % hw] { av.data()[i] } else { bv.data()[i] })
            .collect();
        self.custom(Tensor::new([c, h, w], data), &[a, b], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                Tensor::new([c, h, w], (0..c * hw).map(|i| if bits[i % hw] { gd[i] } else { 0.0 }).collect())
            });
            let gb = needs[1].then(|| {
                Tensor::new([c, h, w], (0..c * hw).map(|i| if bits[i % hw] { 0.0 } else { gd[i] }).collect())
            });
            vec![ga, gb]
        })
    }

    /// Per-pixel L2 normalisation over channels. Zero vectors stay zero and
    /// receive no gradient.
    pub fn l2_normalize_channels(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let hw = h * w;
        let d = xv.data();
        let norms: Vec<f64> = (0..hw)
            .map(|p| (0..c).map(|ch| d[ch * hw + p].powi(2)).sum::<f64>().sqrt())
            .collect();
        let out: Vec<f64> = (0..c * hw)
            .map(|i| {
                let n = norms[i % hw];
                if n > 0.0 {
                    d[i] / n
                } else {
                    0.0
                }
            })
            .collect();
        let y = Rc::new(Tensor::new([c, h, w], out));
        let yc = Rc::clone(&y);
        self.custom((*y).clone(), &[x], move |g, _| {
            let (gd, yd) = (g.data(), yc.data());
            let mut gx = vec![0.0; c * hw];
            for p in 0..hw {
                let n = norms[p];
                if n == 0.0 {
                    continue;
                }
                let dot: f64 = (0..c).map(|ch| gd[ch * hw + p] * yd[ch * hw + p]).sum();
                for ch in 0..c {
                    let i = ch * hw + p;
                    gx[i] = (gd[i] - yd[i] * dot) / n;
                }
            }
            vec![Some(Tensor::new([c, h, w], gx))]
        })
    }

    /// Dense layer `w x + b` with `x: [N]`, `w: [M, N]`, `b: [M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let n = xv.len();
        let m = bv.len();
        assert_eq!(wv.shape(), &[m, n], "linear: weight shape mismatch");
        let out: Vec<f64> = (0..m)
            .map(|i| bv.data()[i] + (0..n).map(|j| wv.data()[i * n + j] * xv.data()[j]).sum::<f64>())
            .collect();
        let xshape = xv.shape().to_vec();
        self.custom(Tensor::new([m], out), &[x, w, b], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let v: Vec<f64> = (0..n)
                    .map(|j| (0..m).map(|i| wv.data()[i * n + j] * gd[i]).sum())
                    .collect();
                Tensor::new(xshape.clone(), v)
            });
            let gw = needs[1].then(|| {
                Tensor::new([m, n], (0..m * n).map(|k| gd[k / n] * xv.data()[k % n]).collect())
            });
            let gb = needs[2].then(|| Tensor::new([m], gd.to_vec()));
            vec![gx, gw, gb]
        })
    }

    /// 2-D convolution with zero padding.
    ///
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (cin, h, wd) = xv.chw();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Cout, Cin, k, k]");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d: input channel mismatch");
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = Rc::new(geo.im2col(xv.data()));
        let rows = cin * k * k;
        let np = geo.oh * geo.ow;
        let mut out = vec![0.0; cout * np];
        for (co, chunk) in out.chunks_mut(np).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bv.data()[co]);
        }
        gemm(false, false, cout, rows, np, wv.data(), &cols, &mut out, 1.0);
        let (oh, ow) = (geo.oh, geo.ow);
        self.custom(Tensor::new([cout, oh, ow], out), &[x, w, b], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gcols = vec![0.0; rows * np];
                gemm(true, false, rows, cout, np, wv.data(), gd, &mut gcols, 0.0);
                Tensor::new([cin, geo.h, geo.w], geo.col2im(&gcols))
            });
            let gw = needs[1].then(|| {
                let mut gwd = vec![0.0; cout * rows];
                gemm(false, true, cout, np, rows, gd, &cols, &mut gwd, 0.0);
                Tensor::new(wv.shape().to_vec(), gwd)
            });
            let gb = needs[2].then(|| {
                Tensor::new([cout], gd.chunks(np).map(|c| c.iter().sum()).collect())
            });
            vec![gx, gw, gb]
        })
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(self.stride).min(self.ow);
        (lo.min(hi), hi)
    }

    /// `[Cin*k*k, OH*OW]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let np = self.oh * self.ow;
        let mut cols = vec![0.0; self.cin * self.k * self.k * np];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        let d = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            d[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (j, ox) in (lo..hi).enumerate() {
                                d[ox] = src[first + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let np = self.oh * self.ow;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        let s = &src[oy * self.ow..(oy + 1) * self.ow];
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            x[base + first..base + first + hi - lo]
                                .iter_mut()
                                .zip(&s[lo..hi])
                                .for_each(|(a, b)| *a += b);
                        } else {
                            for (j, ox) in (lo..hi).enumerate() {
                                x[base + first + j * self.stride] += s[ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices where `op(a)` is
/// `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided views require,
    // which the assert above checks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}


/// Separable `(2r+1)²` box sum with replicate padding, or its transpose
/// (scatter to the clamped taps) when `transpose` is set.
fn box_sum(d: &[f64], c: usize, h: usize, w: usize, r: isize, transpose: bool) -> Vec<f64> {
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    // rows, through a replicate-padded copy and a sliding window
    let span = 2 * r as usize + 1;
    let mut pad = vec![0.0; w + span - 1];
    for row in 0..c * h {
        let src = &d[row * w..(row + 1) * w];
        let dst = &mut tmp[row * w..(row + 1) * w];
        if transpose {
            // scatter into the padded row, then fold the pad onto the edges
            pad.iter_mut().for_each(|v| *v = 0.0);
            let mut acc = 0.0;
            for j in 0..pad.len() {
                if j < w {
                    acc += src[j];
                }
                if j >= span {
                    acc -= src[j - span];
                }
                pad[j] = acc;
            }
            let r = r as usize;
            dst.copy_from_slice(&pad[r..r + w]);
            dst[0] += pad[..r].iter().sum::<f64>();
            dst[w - 1] += pad[r + w..].iter().sum::<f64>();
        } else {
            for (j, p) in pad.iter_mut().enumerate() {
                *p = src[clamp(j as isize - r, w)];
            }
            let mut acc: f64 = pad[..span - 1].iter().sum();
            for x in 0..w {
                acc += pad[x + span - 1];
                dst[x] = acc;
                acc -= pad[x];
            }
        }
    }
    // columns
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for o in -r..=r {
                let yy = clamp(y as isize + o, h);
                let (from, to) = if transpose { (y, yy) } else { (yy, y) };
                let (a, b) = (base + from * w, base + to * w);
                for x in 0..w {
                    out[b + x] += tmp[a + x];
                }
            }
        }
    }
    out
}
