//! Dynamic-object masking from flow disagreement and the isolated triplet
//! loss on depth features.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::geometry::FlowField;
use crate::tensor::{Mask, Tensor};

/// Depth features `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(t.shape().len() == 3, "features must be [C, H, W], got {:?}", t.shape());
        ensure!(t.all_finite(), "features must be finite");
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Per-pixel unit-norm features and a mask of pixels whose vector was
    /// non-zero. Zero vectors stay zero.
    pub fn normalized(&self) -> (Tensor, Mask) {
        let (c, h, w) = self.0.chw();
        let n = h * w;
        let d = self.0.data();
        let mut out = d.to_vec();
        let mut bits = vec![false; n];
        for (i, bit) in bits.iter_mut().enumerate() {
            let norm = (0..c).map(|k| d[k * n + i].powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                *bit = true;
                for k in 0..c {
                    out[k * n + i] /= norm;
                }
            }
        }
        (Tensor::new([c, h, w], out), Mask::new(h, w, bits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// τ is the image mean of the flow differences.
    Mean,
    /// τ is that mean plus a fixed floor in pixels.
    MeanPlusFloor,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowMaskConfig {
    pub tau_mode: TauMode,
    pub tau_floor: f64,
}

impl Default for FlowMaskConfig {
    fn default() -> Self {
        Self { tau_mode: TauMode::MeanPlusFloor, tau_floor: 1.0 }
    }
}

impl FlowMaskConfig {
    pub fn pure() -> Self {
        Self { tau_mode: TauMode::Mean, tau_floor: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.tau_floor.is_finite() && self.tau_floor >= 0.0,
            "tau_floor must be finite and non-negative, got {}",
            self.tau_floor
        );
        Ok(())
    }
}

/// Window size `k`, hinge margin `m0` and the count a neighbour set must
/// exceed for an anchor to enter Γ.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub window: usize,
    pub margin: f64,
    pub min_count: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { window: 5, margin: 0.65, min_count: 5 }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window >= 3 && self.window % 2 == 1,
            "triplet window must be odd and at least 3, got {}",
            self.window
        );
        ensure!(self.margin.is_finite() && self.margin > 0.0, "margin must be positive");
        Ok(())
    }
}

/// `M_flow = ‖F − F_rigid‖ > τ`. Returns the mask and the realised τ.
pub fn flow_difference_mask(flow: &FlowField, rigid: &FlowField, cfg: &FlowMaskConfig) -> Result<(Mask, f64)> {
    ensure!(
        flow.tensor().shape() == rigid.tensor().shape(),
        "flow fields differ in shape: {:?} vs {:?}",
        flow.tensor().shape(),
        rigid.tensor().shape()
    );
    cfg.validate()?;
    let diff = flow.difference_magnitude(rigid);
    let mut tau = diff.iter().sum::<f64>() / diff.len() as f64;
    if cfg.tau_mode == TauMode::MeanPlusFloor {
        tau += cfg.tau_floor;
    }
    let bits = diff.iter().map(|&d| d > tau).collect();
    Ok((Mask::new(flow.height(), flow.width(), bits), tau))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletDistances {
    /// `None` when the set is empty.
    pub d_plus: Option<f64>,
    pub d_minus: Option<f64>,
    pub n_plus: usize,
    pub n_minus: usize,
}

/// Window bounds around `(y, x)` clipped to the image.
fn window(y: usize, x: usize, h: usize, w: usize, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let r = k / 2;
    (y.saturating_sub(r)..(y + r + 1).min(h), x.saturating_sub(r)..(x + r + 1).min(w))
}

fn sq_dist(f: &[f64], n: usize, c: usize, a: usize, b: usize) -> f64 {
    (0..c).map(|k| (f[k * n + a] - f[k * n + b]).powi(2)).sum()
}

fn distances_at(f: &[f64], c: usize, h: usize, w: usize, labels: &[bool], y: usize, x: usize, k: usize) -> TripletDistances {
    let n = h * w;
    let a = y * w + x;
    let (ys, xs) = window(y, x, h, w, k);
    let (mut sp, mut sm, mut np, mut nm) = (0.0, 0.0, 0, 0);
    for yy in ys {
        for xx in xs.clone() {
            let j = yy * w + xx;
            if j == a {
                continue;
            }
            let d = sq_dist(f, n, c, a, j);
            if labels[j] == labels[a] {
                sp += d;
                np += 1;
            } else {
                sm += d;
                nm += 1;
            }
        }
    }
    TripletDistances {
        d_plus: (np > 0).then(|| sp / np as f64),
        d_minus: (nm > 0).then(|| sm / nm as f64),
        n_plus: np,
        n_minus: nm,
    }
}

/// Mean squared distances between the normalised anchor feature and its
/// same-label (P⁺) and other-label (P⁻) window neighbours. The anchor
/// itself is excluded.
pub fn triplet_distances(
    f: &FeatureMap,
    m_flow: &Mask,
    anchor: (usize, usize),
    cfg: &TripletConfig,
) -> Result<TripletDistances> {
    cfg.validate()?;
    let (c, h, w) = f.tensor().chw();
    ensure!((m_flow.height(), m_flow.width()) == (h, w), "mask shape differs from features");
    ensure!(anchor.0 < h && anchor.1 < w, "anchor {anchor:?} out of bounds");
    let (fh, _) = f.normalized();
    Ok(distances_at(fh.data(), c, h, w, m_flow.bits(), anchor.0, anchor.1, cfg.window))
}

impl Tape {
    /// Isolated triplet loss on raw features `[C, H, W]`: features are
    /// L2-normalised per pixel, then the hinge loss is averaged over the
    /// anchors in Γ. Returns a scalar, 0 when Γ is empty.
    pub fn isolated_triplet_loss(&self, features: Var, m_flow: &Mask, cfg: &TripletConfig) -> Var {
        let fh = self.l2_normalize_channels(features);
        let fv = self.value(fh);
        let (c, h, w) = fv.chw();
        let n = h * w;
        let labels = m_flow.bits();
        let f = fv.data();
        // (anchor, hinge active, |P+|, |P-|)
        let mut anchors = Vec::new();
        // running mean: exact when every anchor contributes the same value
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = distances_at(f, c, h, w, labels, y, x, cfg.window);
                if d.n_plus > cfg.min_count && d.n_minus > cfg.min_count {
                    let dp = d.d_plus.unwrap_or(0.0);
                    let dm = d.d_minus.unwrap_or(0.0);
                    let hinge = cfg.margin - dm;
                    anchors.push((y * w + x, hinge > 0.0, d.n_plus, d.n_minus));
                    mean += (dp + hinge.max(0.0) - mean) / anchors.len() as f64;
                }
            }
        }
        if anchors.is_empty() {
            return self.mul_scalar(self.sum(fh), 0.0);
        }
        let count = anchors.len() as f64;
        let labels = Rc::new(labels.to_vec());
        let k = cfg.window;
        self.custom(Tensor::scalar(mean), &[fh], move |g, _| {
            let f = fv.data();
            let scale = g.item() / count;
            let mut gf = vec![0.0; c * n];
            for &(a, active, np, nm) in &anchors {
                let (ys, xs) = window(a / w, a % w, h, w, k);
                for yy in ys {
                    for xx in xs.clone() {
                        let j = yy * w + xx;
                        if j == a {
                            continue;
                        }
                        let coef = if labels[j] == labels[a] {
                            scale / np as f64
                        } else if active {
                            -scale / nm as f64
                        } else {
                            continue;
                        };
                        for ch in 0..c {
                            let diff = 2.0 * coef * (f[ch * n + a] - f[ch * n + j]);
                            gf[ch * n + a] += diff;
                            gf[ch * n + j] -= diff;
                        }
                    }
                }
            }
            vec![Some(Tensor::new([c, h, w], gf))]
        })
    }
}

/// Value-level isolated triplet loss; see [`Tape::isolated_triplet_loss`].
pub fn isolated_triplet_loss(f: &FeatureMap, m_flow: &Mask, cfg: &TripletConfig) -> Result<f64> {
    cfg.validate()?;
    ensure!(
        (m_flow.height(), m_flow.width()) == (f.height(), f.width()),
        "mask shape differs from features"
    );
    let t = Tape::new();
    let l = t.isolated_triplet_loss(t.constant(f.tensor().clone()), m_flow, cfg);
    Ok(t.value(l).item())
}
