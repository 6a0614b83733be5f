//! Appearance losses: SSIM, the mixed SSIM + L1 photometric error, the
//! per-pixel minimum over source views, and edge-aware smoothness.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::geometry::InvDepthMap;
use crate::image::ImageGrid;
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Weight of the SSIM term against L1.
    pub alpha: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            ssim_window: 3,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1], got {}", self.alpha);
        ensure!(
            self.ssim_window >= 3 && self.ssim_window % 2 == 1,
            "SSIM window must be odd and at least 3, got {}",
            self.ssim_window
        );
        ensure!(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0, "SSIM constants must be positive");
        Ok(())
    }
}

/// Non-negative per-pixel loss values, `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMap(Tensor);

impl LossMap {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(
            matches!(t.shape(), [1, _, _]),
            "loss map must be [1, H, W], got {:?}",
            t.shape()
        );
        ensure!(
            t.data().iter().all(|v| v.is_finite() && *v >= 0.0),
            "loss map must be finite and non-negative"
        );
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }
}

impl Tape {
    /// Per-channel local SSIM map `[C, H, W]` with replicate-padded box
    /// statistics.
    pub fn ssim(&self, a: Var, b: Var, cfg: &PhotometricConfig) -> Var {
        let win = cfg.ssim_window;
        let pool = |v| self.box_mean_replicate(v, win);
        let mu_a = pool(a);
        let mu_b = pool(b);
        let mu_a2 = self.square(mu_a);
        let mu_b2 = self.square(mu_b);
        let mu_ab = self.mul(mu_a, mu_b);
        let sig_a = self.sub(pool(self.square(a)), mu_a2);
        let sig_b = self.sub(pool(self.square(b)), mu_b2);
        let sig_ab = self.sub(pool(self.mul(a, b)), mu_ab);
        let num = self.mul(
            self.add_scalar(self.mul_scalar(mu_ab, 2.0), cfg.ssim_c1),
            self.add_scalar(self.mul_scalar(sig_ab, 2.0), cfg.ssim_c2),
        );
        let den = self.mul(
            self.add_scalar(self.add(mu_a2, mu_b2), cfg.ssim_c1),
            self.add_scalar(self.add(sig_a, sig_b), cfg.ssim_c2),
        );
        self.div(num, den)
    }

    /// `(α/2)(1 − SSIM) + (1 − α)|a − b|`, both terms averaged over
    /// channels. Returns `[1, H, W]`.
    pub fn photometric_error(&self, syn: Var, tgt: Var, cfg: &PhotometricConfig) -> Var {
        let ssim = self.channel_mean(self.ssim(syn, tgt, cfg));
        let dssim = self.mul_scalar(self.add_scalar(self.neg(ssim), 1.0), cfg.alpha / 2.0);
        let l1 = self.channel_mean(self.abs(self.sub(syn, tgt)));
        self.add(dssim, self.mul_scalar(l1, 1.0 - cfg.alpha))
    }

    /// Per-pixel minimum over sources, ignoring invalid samples. Pixels that
    /// are invalid in every source get value 0 and are cleared in the
    /// returned mask.
    pub fn min_reprojection(&self, maps: &[Var], validity: &[Mask]) -> (Var, Mask) {
        assert!(!maps.is_empty(), "min_reprojection needs at least one source");
        assert_eq!(maps.len(), validity.len());
        let vals: Vec<_> = maps.iter().map(|&m| self.value(m)).collect();
        let (_, h, w) = vals[0].chw();
        let n = h * w;
        let mut out = vec![0.0; n];
        let mut arg: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            for (s, (v, m)) in vals.iter().zip(validity).enumerate() {
                if !m.bits()[i] {
                    continue;
                }
                let x = v.data()[i];
                if arg[i].is_none() || x < out[i] {
                    out[i] = x;
                    arg[i] = Some(s);
                }
            }
        }
        let any = Mask::new(h, w, arg.iter().map(Option::is_some).collect());
        let k = maps.len();
        let var = self.custom(Tensor::new([1, h, w], out), maps, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs.iter().map(|&nd| nd.then(|| vec![0.0; n])).collect();
            for (i, a) in arg.iter().enumerate() {
                if let Some(s) = a {
                    if let Some(gs) = grads[*s].as_mut() {
                        gs[i] = g.data()[i];
                    }
                }
            }
            (0..k)
                .map(|s| grads[s].take().map(|v| Tensor::new([1, h, w], v)))
                .collect()
        });
        (var, any)
    }

    /// Edge-aware smoothness of mean-normalised inverse depth
    /// `disp: [1, H, W]` against the image `img: [C, H, W]`.
    ///
    /// Forward differences; the x and y terms are each averaged over the
    /// positions where the difference is defined and then summed.
    pub fn smoothness_loss(&self, disp: Var, img: Var) -> Var {
        let mean = self.mean(disp);
        let norm = self.div(disp, mean);
        let term = |dd: Var, di: Var| {
            let weight = self.exp(self.neg(self.channel_mean(self.abs(di))));
            self.mean(self.mul(self.abs(dd), weight))
        };
        let x = term(self.diff_x(norm), self.diff_x(img));
        let y = term(self.diff_y(norm), self.diff_y(img));
        self.add(x, y)
    }
}

fn same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    ensure!(
        a.tensor().shape() == b.tensor().shape(),
        "image shapes differ: {:?} vs {:?}",
        a.tensor().shape(),
        b.tensor().shape()
    );
    Ok(())
}

/// Channel-averaged SSIM per pixel, `[1, H, W]`, values in `[−1, 1]`.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, cfg: &PhotometricConfig) -> Result<Tensor> {
    cfg.validate()?;
    same_shape(a, b)?;
    let t = Tape::new();
    let s = t.ssim(t.constant(a.tensor().clone()), t.constant(b.tensor().clone()), cfg);
    let s = t.channel_mean(s);
    Ok((*t.value(s)).clone())
}

pub fn photometric_error(syn: &ImageGrid, tgt: &ImageGrid, cfg: &PhotometricConfig) -> Result<LossMap> {
    cfg.validate()?;
    same_shape(syn, tgt)?;
    let t = Tape::new();
    let pe = t.photometric_error(t.constant(syn.tensor().clone()), t.constant(tgt.tensor().clone()), cfg);
    // 1 − SSIM can round to a hair below zero
    LossMap::new(t.value(pe).map(|v| v.max(0.0)))
}

/// Per-pixel minimum over valid sources plus the mask of pixels valid in at
/// least one source.
pub fn min_reprojection(maps: &[LossMap], validity: &[Mask]) -> Result<(LossMap, Mask)> {
    ensure!(!maps.is_empty(), "min_reprojection needs at least one source");
    ensure!(maps.len() == validity.len(), "one validity mask per source is required");
    let shape = maps[0].tensor().shape().to_vec();
    for (m, v) in maps.iter().zip(validity) {
        ensure!(m.tensor().shape() == shape.as_slice(), "loss map shapes differ");
        ensure!([1, v.height(), v.width()] == shape.as_slice(), "validity mask shape differs from loss maps");
    }
    let t = Tape::new();
    let vars: Vec<Var> = maps.iter().map(|m| t.constant(m.tensor().clone())).collect();
    let (out, any) = t.min_reprojection(&vars, validity);
    Ok((LossMap::new((*t.value(out)).clone())?, any))
}

pub fn smoothness_loss(disp: &InvDepthMap, img: &ImageGrid) -> Result<f64> {
    let d = disp.tensor();
    ensure!(d.chw().1 == img.height() && d.chw().2 == img.width(), "inverse depth and image disagree on H×W");
    ensure!(d.mean() > 0.0, "mean inverse depth must be positive");
    let t = Tape::new();
    let l = t.smoothness_loss(t.constant(d.clone()), t.constant(img.tensor().clone()));
    Ok(t.value(l).item())
}
