//! Heteroscedastic uncertainty, bins-based depth decoding, the percentile
//! uncertainty mask, depth fusion and prompt concatenation.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::geometry::DepthMap;
use crate::motion::FeatureMap;
use crate::photometric::LossMap;
use crate::tensor::{Mask, Tensor};

pub const SIGMA2_MIN: f64 = 1e-6;
pub const SIGMA2_MAX: f64 = 1e3;

/// Per-pixel photometric-error variance `[1, H, W]`, clamped to
/// `[SIGMA2_MIN, SIGMA2_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceMap {
    sigma2: Tensor,
    clamped: usize,
}

impl VarianceMap {
    /// Clamps into range and records how many entries were moved.
    pub fn new(t: Tensor) -> Result<Self> {
        let t = if t.shape().len() == 2 { t.clone().reshape([1, t.shape()[0], t.shape()[1]]) } else { t };
        ensure!(
            t.shape().len() == 3 && t.shape()[0] == 1,
            "variance must be [1, H, W], got {:?}",
            t.shape()
        );
        ensure!(t.data().iter().all(|v| !v.is_nan()), "variance contains NaN");
        let clamped = t.data().iter().filter(|v| !(SIGMA2_MIN..=SIGMA2_MAX).contains(*v)).count();
        if clamped > 0 {
            log::debug!("clamped {clamped} variance entries into [{SIGMA2_MIN}, {SIGMA2_MAX}]");
        }
        Ok(Self { sigma2: t.map(|v| v.clamp(SIGMA2_MIN, SIGMA2_MAX)), clamped })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.sigma2
    }

    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn height(&self) -> usize {
        self.sigma2.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.sigma2.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterFormula {
    /// `c_i = d_min + (d_max − d_min)(b_i/2 + Σ_{j<i} b_j)`.
    Adabins,
    /// The same with coefficient `2 b_i`; centres can leave `[d_min, d_max]`.
    AsWritten,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinConfig {
    pub n: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub center_formula: CenterFormula,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self { n: 16, d_min: 0.1, d_max: 100.0, center_formula: CenterFormula::Adabins }
    }
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n >= 2, "need at least two bins, got {}", self.n);
        ensure!(
            0.0 < self.d_min && self.d_min < self.d_max && self.d_max.is_finite(),
            "need 0 < d_min < d_max, got [{}, {}]",
            self.d_min,
            self.d_max
        );
        Ok(())
    }

    fn coefficient(&self) -> f64 {
        match self.center_formula {
            CenterFormula::Adabins => 0.5,
            CenterFormula::AsWritten => 2.0,
        }
    }
}

/// Bin probabilities `[N, H, W]`, a simplex per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub const SIMPLEX_TOL: f64 = 1e-6;

    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(t.shape().len() == 3, "probabilities must be [N, H, W], got {:?}", t.shape());
        ensure!(t.data().iter().all(|&v| v.is_finite() && v >= 0.0), "probabilities must be finite and non-negative");
        let (n, h, w) = t.chw();
        let hw = h * w;
        for p in 0..hw {
            let s: f64 = (0..n).map(|i| t.data()[i * hw + p]).sum();
            ensure!((s - 1.0).abs() <= Self::SIMPLEX_TOL, "probabilities at pixel {p} sum to {s}");
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn bins(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Learnable prompt `[C_p, H', W']` concatenated onto decoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTensor(Tensor);

impl PromptTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(t.shape().len() == 3, "prompt must be [C, H, W], got {:?}", t.shape());
        ensure!(t.all_finite(), "prompt must be finite");
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_widths(b: &[f64]) -> Result<()> {
    ensure!(!b.is_empty(), "bin widths are empty");
    ensure!(b.iter().all(|&v| v.is_finite() && v >= 0.0), "bin widths must be non-negative");
    let s: f64 = b.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-6, "bin widths sum to {s}, not 1");
    Ok(())
}

fn centers_of(b: &[f64], d_min: f64, d_max: f64, coef: f64) -> Vec<f64> {
    let range = d_max - d_min;
    let mut before = 0.0;
    b.iter()
        .map(|&bi| {
            let c = d_min + range * (coef * bi + before);
            before += bi;
            c
        })
        .collect()
}

/// Bin centres from simplex widths. Only the depth range and formula of
/// `cfg` are used; the bin count comes from `b`.
pub fn bin_centers(b: &[f64], cfg: &BinConfig) -> Result<Vec<f64>> {
    check_widths(b)?;
    ensure!(
        0.0 <= cfg.d_min && cfg.d_min < cfg.d_max && cfg.d_max.is_finite(),
        "need 0 <= d_min < d_max"
    );
    Ok(centers_of(b, cfg.d_min, cfg.d_max, cfg.coefficient()))
}

/// `D = Σ_i c_i p_i` per pixel.
pub fn depth_from_probs(p: &ProbMap, centers: &[f64]) -> Result<DepthMap> {
    ensure!(centers.len() == p.bins(), "{} centres for {} bins", centers.len(), p.bins());
    let t = Tape::new();
    let d = t.weighted_channel_sum(t.constant(p.tensor().clone()), t.constant(Tensor::new([centers.len()], centers.to_vec())));
    DepthMap::new((*t.value(d)).clone())
}

/// Marks the pixels whose variance is strictly above the empirical
/// `quantile` (nearest-rank). Returns the mask and the threshold ε.
pub fn uncertainty_mask(sigma2: &VarianceMap, quantile: f64) -> Result<(Mask, f64)> {
    ensure!(0.0 < quantile && quantile < 1.0, "quantile must lie in (0, 1), got {quantile}");
    let d = sigma2.tensor().data();
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((quantile * d.len() as f64).ceil() as usize).clamp(1, d.len());
    let eps = sorted[rank - 1];
    let bits = d.iter().map(|&v| v > eps).collect();
    Ok((Mask::new(sigma2.height(), sigma2.width(), bits), eps))
}

/// `D_post` where the mask is set, `D_pre` elsewhere.
pub fn fuse_depth(pre: &DepthMap, post: &DepthMap, m_u: &Mask) -> Result<DepthMap> {
    ensure!(pre.tensor().shape() == post.tensor().shape(), "depth maps differ in shape");
    ensure!((m_u.height(), m_u.width()) == (pre.height(), pre.width()), "mask shape differs from depth");
    let t = Tape::new();
    let d = t.select(m_u, t.constant(post.tensor().clone()), t.constant(pre.tensor().clone()));
    DepthMap::new((*t.value(d)).clone())
}

/// Stacks `[F; P]` along channels. With `resample` set, a prompt of a
/// different spatial size is nearest-resized to the features first.
pub fn prompt_concat(f: &FeatureMap, p: &PromptTensor, resample: bool) -> Result<FeatureMap> {
    let (cp, ph, pw) = p.tensor().chw();
    let (h, w) = (f.height(), f.width());
    if cp == 0 {
        return Ok(f.clone());
    }
    ensure!(
        (ph, pw) == (h, w) || resample,
        "prompt is {ph}x{pw} but features are {h}x{w} and resampling is off"
    );
    let t = Tape::new();
    let pv = t.resize_nearest(t.constant(p.tensor().clone()), h, w);
    let out = t.concat_channels(&[t.constant(f.tensor().clone()), pv]);
    FeatureMap::new((*t.value(out)).clone())
}

impl Tape {
    /// `mean(L_ph² / σ² + ln σ²)`.
    pub fn uncertainty_loss(&self, l_ph: Var, sigma2: Var) -> Var {
        let r = self.div(self.square(l_ph), sigma2);
        self.mean(self.add(r, self.ln(sigma2)))
    }

    /// Differentiable bin centres from widths `[N]`.
    pub fn bin_centers(&self, widths: Var, cfg: &BinConfig) -> Var {
        let b = self.value(widths);
        let coef = cfg.coefficient();
        let range = cfg.d_max - cfg.d_min;
        let n = b.len();
        let c = centers_of(b.data(), cfg.d_min, cfg.d_max, coef);
        self.custom(Tensor::new([n], c), &[widths], move |g, _| {
            let gd = g.data();
            let mut out = vec![0.0; n];
            let mut later = 0.0;
            for j in (0..n).rev() {
                out[j] = range * (coef * gd[j] + later);
                later += gd[j];
            }
            vec![Some(Tensor::new([n], out))]
        })
    }
}

pub fn uncertainty_loss(l_ph: &LossMap, sigma2: &VarianceMap) -> Result<f64> {
    ensure!(l_ph.tensor().shape() == sigma2.tensor().shape(), "loss map and variance differ in shape");
    let t = Tape::new();
    let l = t.uncertainty_loss(t.constant(l_ph.tensor().clone()), t.constant(sigma2.tensor().clone()));
    Ok(t.value(l).item())
}
