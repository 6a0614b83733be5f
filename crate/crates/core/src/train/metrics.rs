use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::DepthMap;
use crate::tensor::Mask;

/// The seven Eigen depth metrics, averaged over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3"];

    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.a1, self.a2, self.a3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub median_scaling: bool,
    pub min_depth: f64,
    /// Ground truth beyond this is ignored and predictions are capped to it.
    pub max_depth: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { median_scaling: true, min_depth: 1e-3, max_depth: 80.0 }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Accumulates per-image metrics.
///
/// The median-scaling ratio of an image is taken over all of its valid
/// ground-truth pixels; the metrics themselves can be restricted to a region
/// (for example static or moving pixels).
#[derive(Clone, Debug)]
pub struct DepthEvaluator {
    cfg: EvalConfig,
    sums: [f64; 7],
    images: usize,
}

impl DepthEvaluator {
    pub fn new(cfg: EvalConfig) -> Self {
        Self { cfg, sums: [0.0; 7], images: 0 }
    }

    /// Returns whether the image contributed any pixel.
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap, valid: Option<&Mask>, region: Option<&Mask>) -> Result<bool> {
        ensure!(
            (pred.height(), pred.width()) == (gt.height(), gt.width()),
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        );
        for m in [valid, region].into_iter().flatten() {
            ensure!((m.height(), m.width()) == (gt.height(), gt.width()), "mask shape differs from depth");
        }
        let (lo, hi) = (self.cfg.min_depth, self.cfg.max_depth);
        let p = pred.tensor().data();
        let g = gt.tensor().data();
        let ok: Vec<bool> = (0..g.len())
            .map(|i| g[i] > lo && g[i] < hi && valid.map_or(true, |m| m.bits()[i]))
            .collect();
        let scale = if self.cfg.median_scaling {
            let mut gs: Vec<f64> = (0..g.len()).filter(|&i| ok[i]).map(|i| g[i]).collect();
            let mut ps: Vec<f64> = (0..g.len()).filter(|&i| ok[i]).map(|i| p[i]).collect();
            if gs.is_empty() {
                return Ok(false);
            }
            median(&mut gs) / median(&mut ps)
        } else {
            1.0
        };
        let idx: Vec<usize> = (0..g.len()).filter(|&i| ok[i] && region.map_or(true, |m| m.bits()[i])).collect();
        if idx.is_empty() {
            return Ok(false);
        }
        let n = idx.len() as f64;
        let mut acc = [0.0; 7];
        for &i in &idx {
            let (gt, pr) = (g[i], (p[i] * scale).clamp(lo, hi));
            let thresh = (gt / pr).max(pr / gt);
            acc[0] += (gt - pr).abs() / gt;
            acc[1] += (gt - pr).powi(2) / gt;
            acc[2] += (gt - pr).powi(2);
            acc[3] += (gt.ln() - pr.ln()).powi(2);
            acc[4] += (thresh < 1.25) as u8 as f64;
            acc[5] += (thresh < 1.25f64.powi(2)) as u8 as f64;
            acc[6] += (thresh < 1.25f64.powi(3)) as u8 as f64;
        }
        for (k, a) in acc.iter().enumerate() {
            let v = a / n;
            self.sums[k] += if k == 2 || k == 3 { v.sqrt() } else { v };
        }
        self.images += 1;
        Ok(true)
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        ensure!(self.images > 0, "no valid ground-truth pixels to evaluate");
        let m = self.sums.map(|s| s / self.images as f64);
        Ok(DepthMetrics { abs_rel: m[0], sq_rel: m[1], rmse: m[2], rmse_log: m[3], a1: m[4], a2: m[5], a3: m[6] })
    }
}

/// Metrics over aligned prediction / ground-truth pairs.
pub fn evaluate_depth<'a>(
    pairs: impl IntoIterator<Item = (&'a DepthMap, &'a DepthMap)>,
    cfg: &EvalConfig,
) -> Result<DepthMetrics> {
    let mut ev = DepthEvaluator::new(*cfg);
    for (p, g) in pairs {
        ev.add(p, g, None, None)?;
    }
    ev.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    fn random_depth(seed: u64) -> DepthMap {
        let mut rng = RngState::new(seed);
        DepthMap::new(Tensor::from_fn([1, 6, 9], |_| rng.uniform(1.0, 60.0))).unwrap()
    }

    fn scaled(d: &DepthMap, s: f64) -> DepthMap {
        DepthMap::new(d.tensor().scale(s)).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = random_depth(1);
        let m = evaluate_depth([(&g, &g)], &EvalConfig::default()).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.a1, m.a2, m.a3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn median_scaling_cancels_global_scale() {
        let g = random_depth(2);
        let p = scaled(&g, 2.0);
        let m = evaluate_depth([(&p, &g)], &EvalConfig::default()).unwrap();
        assert!(m.abs_rel < 1e-15, "{}", m.abs_rel);
    }

    #[test]
    fn unscaled_one_and_a_half_gives_half() {
        let g = DepthMap::new(Tensor::from_fn([1, 4, 4], |i| 1.0 + i as f64)).unwrap();
        let p = scaled(&g, 1.5);
        let cfg = EvalConfig { median_scaling: false, ..EvalConfig::default() };
        let m = evaluate_depth([(&p, &g)], &cfg).unwrap();
        assert_eq!(m.abs_rel, 0.5);
        assert_eq!(m.a1, 0.0);
        assert_eq!(m.a2, 1.0);
    }

    #[test]
    fn closed_form_on_two_pixels() {
        let g = DepthMap::new(Tensor::new([1, 1, 2], vec![2.0, 4.0])).unwrap();
        let p = DepthMap::new(Tensor::new([1, 1, 2], vec![3.0, 4.0])).unwrap();
        let cfg = EvalConfig { median_scaling: false, ..EvalConfig::default() };
        let m = evaluate_depth([(&p, &g)], &cfg).unwrap();
        assert!((m.abs_rel - 0.25).abs() < 1e-15);
        assert!((m.sq_rel - 0.25).abs() < 1e-15);
        assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((m.rmse_log - (0.5 * 1.5f64.ln().powi(2)).sqrt()).abs() < 1e-15);
        assert_eq!((m.a1, m.a2, m.a3), (0.5, 1.0, 1.0));
    }

    #[test]
    fn thresholds_are_ordered_and_cap_applies() {
        let cfg = EvalConfig { median_scaling: false, ..EvalConfig::default() };
        for s in 0..20 {
            let g = random_depth(s);
            let p = random_depth(s + 100);
            let m = evaluate_depth([(&p, &g)], &cfg).unwrap();
            assert!(0.0 <= m.a1 && m.a1 <= m.a2 && m.a2 <= m.a3 && m.a3 <= 1.0);
        }
        let g = DepthMap::new(Tensor::new([1, 1, 2], vec![10.0, 90.0])).unwrap();
        let p = DepthMap::new(Tensor::new([1, 1, 2], vec![1000.0, 1.0])).unwrap();
        let m = evaluate_depth([(&p, &g)], &cfg).unwrap();
        assert_eq!(m.abs_rel, 7.0);
    }

    #[test]
    fn empty_overlap_is_an_error() {
        let g = random_depth(3);
        let none = Mask::filled(6, 9, false);
        let mut ev = DepthEvaluator::new(EvalConfig::default());
        assert!(!ev.add(&g, &g, Some(&none), None).unwrap());
        assert!(ev.finish().is_err());
        assert!(evaluate_depth(std::iter::empty(), &EvalConfig::default()).is_err());
    }

    #[test]
    fn region_restricts_pixels_but_not_the_scale() {
        let g = DepthMap::new(Tensor::full([1, 2, 2], 10.0)).unwrap();
        let p = DepthMap::new(Tensor::new([1, 2, 2], vec![5.0, 5.0, 5.0, 10.0])).unwrap();
        let region = Mask::new(2, 2, vec![false, false, false, true]);
        let mut ev = DepthEvaluator::new(EvalConfig::default());
        ev.add(&p, &g, None, Some(&region)).unwrap();
        // ratio 10 / 5 doubles the lone region pixel to 20
        assert_eq!(ev.finish().unwrap().abs_rel, 1.0);
    }
}
