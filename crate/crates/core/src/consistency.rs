//! Teacher–student machinery: the matching cost volume, its argmin depth,
//! the teacher/cost-volume inconsistency mask, the masked consistency loss
//! and the combined self-supervised objective.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::error::{ensure, Result};
use crate::geometry::DepthMap;
use crate::motion::FeatureMap;
use crate::photometric::LossMap;
use crate::tensor::{Mask, Tensor};

/// Matching costs `[B, H, W]` over ascending depth hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    costs: Tensor,
    hypotheses: Vec<f64>,
}

impl CostVolume {
    pub fn new(costs: Tensor, hypotheses: Vec<f64>) -> Result<Self> {
        ensure!(hypotheses.len() >= 2, "a cost volume needs at least two hypotheses");
        ensure!(
            hypotheses.windows(2).all(|w| w[0] < w[1]) && hypotheses[0] > 0.0,
            "hypotheses must be positive and strictly increasing"
        );
        ensure!(
            costs.shape().len() == 3 && costs.shape()[0] == hypotheses.len(),
            "costs {:?} do not match {} hypotheses",
            costs.shape(),
            hypotheses.len()
        );
        ensure!(costs.all_finite(), "costs must be finite");
        Ok(Self { costs, hypotheses })
    }

    pub fn costs(&self) -> &Tensor {
        &self.costs
    }

    pub fn hypotheses(&self) -> &[f64] {
        &self.hypotheses
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// `count` depths whose inverses are evenly spaced over
/// `[1/d_max, 1/d_min]`, returned in ascending depth order.
pub fn depth_hypotheses(d_min: f64, d_max: f64, count: usize) -> Result<Vec<f64>> {
    ensure!(count >= 2, "need at least two hypotheses");
    ensure!(0.0 < d_min && d_min < d_max, "need 0 < d_min < d_max");
    let (lo, hi) = (1.0 / d_max, 1.0 / d_min);
    let mut depths: Vec<f64> = (0..count)
        .map(|i| 1.0 / (hi - (hi - lo) * i as f64 / (count - 1) as f64))
        .collect();
    depths[0] = d_min;
    depths[count - 1] = d_max;
    Ok(depths)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfLossWeights {
    pub lambda_sm: f64,
}

impl Default for SelfLossWeights {
    fn default() -> Self {
        Self { lambda_sm: 1e-3 }
    }
}

impl Tape {
    /// Plane-sweep cost volume `[B, h, w]`: for each hypothesis the source
    /// features are warped into the target view at that constant depth and
    /// compared by mean absolute difference over channels. Invalid warps get
    /// the largest valid cost of their pixel (0 when no hypothesis is valid).
    ///
    /// `pose` is the 12-vector target→source transform; `k` must already be
    /// scaled to the feature resolution.
    pub fn cost_volume(&self, feat_t: Var, feat_s: Var, pose: Var, k: &CameraIntrinsics, hypotheses: &[f64]) -> Var {
        let (_, h, w) = self.value(feat_t).chw();
        let mut slices = Vec::with_capacity(hypotheses.len());
        let mut valid = Vec::with_capacity(hypotheses.len());
        for &d in hypotheses {
            let depth = self.constant(Tensor::full([1, h, w], d));
            let (warped, v) = self.synthesize_view(feat_s, depth, pose, k);
            slices.push(self.channel_mean(self.abs(self.sub(warped, feat_t))));
            valid.push(v);
        }
        let raw = self.concat_channels(&slices);
        self.fill_invalid_with_max(raw, &valid)
    }

    fn fill_invalid_with_max(&self, raw: Var, valid: &[Mask]) -> Var {
        let rv = self.value(raw);
        let (b, h, w) = rv.chw();
        let n = h * w;
        // per pixel: index of the max valid cost, if any
        let src: Vec<Option<usize>> = (0..n)
            .map(|i| {
                (0..b)
                    .filter(|&k| valid[k].bits()[i])
                    .max_by(|&x, &y| rv.data()[x * n + i].total_cmp(&rv.data()[y * n + i]))
            })
            .collect();
        let mut out = rv.data().to_vec();
        let mut route: Vec<Option<usize>> = vec![None; b * n];
        for k in 0..b {
            for i in 0..n {
                let idx = k * n + i;
                if valid[k].bits()[i] {
                    route[idx] = Some(idx);
                } else if let Some(m) = src[i] {
                    out[idx] = rv.data()[m * n + i];
                    route[idx] = Some(m * n + i);
                } else {
                    out[idx] = 0.0;
                }
            }
        }
        let route = Rc::new(route);
        self.custom(Tensor::new([b, h, w], out), &[raw], move |g, _| {
            let mut gr = vec![0.0; b * n];
            for (idx, r) in route.iter().enumerate() {
                if let Some(r) = r {
                    gr[*r] += g.data()[idx];
                }
            }
            vec![Some(Tensor::new([b, h, w], gr))]
        })
    }

    /// Masked L1 between student and teacher depth, averaged over all
    /// pixels. The teacher input is detached: no gradient reaches it.
    pub fn consistency_loss(&self, student: Var, teacher: Var, mask: &Mask) -> Var {
        let teacher = self.detach(teacher);
        let m = self.constant(mask.to_tensor());
        self.mean(self.mul(m, self.abs(self.sub(student, teacher))))
    }

    /// `mean((1 − M) · L_ph) + L_cons + λ_sm · L_sm`.
    pub fn self_supervised_loss(&self, l_ph: Var, l_cons: Var, l_sm: Var, mask: &Mask, w: &SelfLossWeights) -> Var {
        let keep = self.constant(mask.not().to_tensor());
        let ph = self.mean(self.mul(keep, l_ph));
        self.add(self.add(ph, l_cons), self.mul_scalar(l_sm, w.lambda_sm))
    }
}

/// Value-level cost volume; see [`Tape::cost_volume`].
pub fn build_cost_volume(
    feat_t: &FeatureMap,
    feat_s: &FeatureMap,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    hypotheses: &[f64],
) -> Result<CostVolume> {
    ensure!(hypotheses.len() >= 2, "a cost volume needs at least two hypotheses");
    ensure!(
        hypotheses.iter().all(|d| d.is_finite() && *d > 0.0),
        "hypotheses must be finite and positive"
    );
    ensure!(feat_t.tensor().shape() == feat_s.tensor().shape(), "feature maps differ in shape");
    pose.validate()?;
    let t = Tape::new();
    let cv = t.cost_volume(
        t.constant(feat_t.tensor().clone()),
        t.constant(feat_s.tensor().clone()),
        t.constant(pose.to_flat()),
        k,
        hypotheses,
    );
    let costs = (*t.value(cv)).clone();
    let mut sorted = hypotheses.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted == hypotheses {
        CostVolume::new(costs, sorted)
    } else {
        // caller-ordered slices are returned as computed; the type still
        // records them ascending, so reorder the slices to match
        let (_, h, w) = costs.chw();
        let n = h * w;
        let mut order: Vec<usize> = (0..hypotheses.len()).collect();
        order.sort_by(|&a, &b| hypotheses[a].total_cmp(&hypotheses[b]));
        let mut data = Vec::with_capacity(costs.len());
        for &o in &order {
            data.extend_from_slice(&costs.data()[o * n..(o + 1) * n]);
        }
        CostVolume::new(Tensor::new([hypotheses.len(), h, w], data), sorted)
    }
}

/// Depth of the cheapest hypothesis at every pixel; ties go to the
/// smaller index.
pub fn argmin_depth(cv: &CostVolume) -> DepthMap {
    let (b, h, w) = cv.costs.chw();
    let n = h * w;
    let d = cv.costs.data();
    let out: Vec<f64> = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..b {
                if d[k * n + i] < d[best * n + i] {
                    best = k;
                }
            }
            cv.hypotheses[best]
        })
        .collect();
    DepthMap::new(Tensor::new([1, h, w], out)).expect("hypotheses are positive")
}

/// Marks pixels where `max((D_cv − D̂)/D̂, (D̂ − D_cv)/D_cv) > 1`.
pub fn inconsistency_mask(d_cv: &DepthMap, d_teacher: &DepthMap) -> Result<Mask> {
    ensure!(
        d_cv.tensor().shape() == d_teacher.tensor().shape(),
        "depth maps differ in shape"
    );
    let (h, w) = (d_cv.height(), d_cv.width());
    let bits = d_cv
        .tensor()
        .data()
        .iter()
        .zip(d_teacher.tensor().data())
        .map(|(&c, &t)| ((c - t) / t).max((t - c) / c) > 1.0)
        .collect();
    Ok(Mask::new(h, w, bits))
}

pub fn consistency_loss(student: &DepthMap, teacher: &DepthMap, mask: &Mask) -> Result<f64> {
    ensure!(student.tensor().shape() == teacher.tensor().shape(), "depth maps differ in shape");
    ensure!(
        (mask.height(), mask.width()) == (student.height(), student.width()),
        "mask shape differs from depth"
    );
    let t = Tape::new();
    let l = t.consistency_loss(
        t.constant(student.tensor().clone()),
        t.constant(teacher.tensor().clone()),
        mask,
    );
    Ok(t.value(l).item())
}

pub fn self_supervised_loss(l_ph: &LossMap, l_cons: f64, l_sm: f64, mask: &Mask, w: &SelfLossWeights) -> Result<f64> {
    let (_, h, wd) = l_ph.tensor().chw();
    ensure!((mask.height(), mask.width()) == (h, wd), "mask shape differs from loss map");
    let t = Tape::new();
    let l = t.self_supervised_loss(
        t.constant(l_ph.tensor().clone()),
        t.constant(Tensor::scalar(l_cons)),
        t.constant(Tensor::scalar(l_sm)),
        mask,
        w,
    );
    Ok(t.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn depth(v: Vec<f64>, h: usize, w: usize) -> DepthMap {
        DepthMap::new(Tensor::new([1, h, w], v)).unwrap()
    }

    #[test]
    fn hypotheses_are_inverse_linear() {
        let hs = depth_hypotheses(0.1, 100.0, 16).unwrap();
        assert_eq!(hs.len(), 16);
        assert_eq!((hs[0], hs[15]), (0.1, 100.0));
        let inv: Vec<f64> = hs.iter().map(|d| 1.0 / d).collect();
        let step = inv[0] - inv[1];
        for w in inv.windows(2) {
            assert!(((w[0] - w[1]) - step).abs() < 1e-9);
        }
        assert!(depth_hypotheses(1.0, 1.0, 4).is_err());
        assert!(depth_hypotheses(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn identical_features_cost_nothing() {
        let mut rng = RngState::new(1);
        let f = FeatureMap::new(Tensor::from_fn([4, 8, 8], |_| rng.uniform(-1.0, 1.0))).unwrap();
        let k = CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
        let cv = build_cost_volume(&f, &f, &PoseSE3::identity(), &k, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(cv.costs().max_abs(), 0.0);
    }

    #[test]
    fn permuting_hypotheses_permutes_slices() {
        let mut rng = RngState::new(2);
        let a = FeatureMap::new(Tensor::from_fn([3, 8, 12], |_| rng.uniform(-1.0, 1.0))).unwrap();
        let b = FeatureMap::new(Tensor::from_fn([3, 8, 12], |_| rng.uniform(-1.0, 1.0))).unwrap();
        let k = CameraIntrinsics::new(10.0, 10.0, 5.5, 3.5).unwrap();
        let pose = PoseSE3::from_translation(-0.3, 0.0, 0.05);
        let hs = [1.0, 2.0, 3.0, 5.0, 8.0];
        let shuffled = [5.0, 1.0, 8.0, 3.0, 2.0];
        let t = Tape::new();
        let run = |h: &[f64]| {
            let v = t.cost_volume(
                t.constant(a.tensor().clone()),
                t.constant(b.tensor().clone()),
                t.constant(pose.to_flat()),
                &k,
                h,
            );
            (*t.value(v)).clone()
        };
        let (x, y) = (run(&hs), run(&shuffled));
        let n = 8 * 12;
        for (j, d) in shuffled.iter().enumerate() {
            let i = hs.iter().position(|v| v == d).unwrap();
            assert_eq!(&x.data()[i * n..(i + 1) * n], &y.data()[j * n..(j + 1) * n]);
        }
        // the value-level API records slices in ascending order either way
        let cv1 = build_cost_volume(&a, &b, &pose, &k, &hs).unwrap();
        let cv2 = build_cost_volume(&a, &b, &pose, &k, &shuffled).unwrap();
        assert_eq!(cv1, cv2);
    }

    #[test]
    fn cost_volume_rejects_degenerate_input() {
        let f = FeatureMap::new(Tensor::zeros([2, 8, 8])).unwrap();
        let k = CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
        assert!(build_cost_volume(&f, &f, &PoseSE3::identity(), &k, &[1.0]).is_err());
        assert!(build_cost_volume(&f, &f, &PoseSE3::identity(), &k, &[1.0, -1.0]).is_err());
        assert!(CostVolume::new(Tensor::zeros([2, 8, 8]), vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn argmin_cases() {
        let hs: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let unique = Tensor::from_fn([6, 4, 4], |i| if i / 16 == 3 { 0.0 } else { 1.0 + (i % 5) as f64 });
        let d = argmin_depth(&CostVolume::new(unique, hs.clone()).unwrap());
        assert!(d.tensor().data().iter().all(|&v| v == 4.0));
        let flat = Tensor::full([6, 4, 4], 0.5);
        let d = argmin_depth(&CostVolume::new(flat, hs.clone()).unwrap());
        assert!(d.tensor().data().iter().all(|&v| v == 1.0));

        let mut rng = RngState::new(3);
        for _ in 0..10 {
            // coarse values force frequent ties
            let costs = Tensor::from_fn([6, 5, 7], |_| rng.index(4) as f64);
            let cv = CostVolume::new(costs.clone(), hs.clone()).unwrap();
            let d = argmin_depth(&cv);
            for y in 0..5 {
                for x in 0..7 {
                    let col: Vec<f64> = (0..6).map(|b| costs.at(b, y, x)).collect();
                    let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let first = col.iter().position(|&c| c == min).unwrap();
                    assert_eq!(d.at(y, x), hs[first]);
                }
            }
        }
    }

    #[test]
    fn inconsistency_mask_cases() {
        let mut rng = RngState::new(4);
        let t = depth((0..64).map(|_| rng.uniform(1.0, 50.0)).collect(), 8, 8);
        assert_eq!(inconsistency_mask(&t, &t).unwrap().count(), 0);
        let three = DepthMap::new(t.tensor().scale(3.0)).unwrap();
        assert_eq!(inconsistency_mask(&three, &t).unwrap().count(), 64);
        let one_half = DepthMap::new(t.tensor().scale(1.5)).unwrap();
        assert_eq!(inconsistency_mask(&one_half, &t).unwrap().count(), 0);
        let other = depth((0..64).map(|_| rng.uniform(1.0, 50.0)).collect(), 8, 8);
        assert_eq!(inconsistency_mask(&t, &other).unwrap(), inconsistency_mask(&other, &t).unwrap());
    }

    #[test]
    fn consistency_loss_cases() {
        let t = depth(vec![2.0; 64], 8, 8);
        let s = depth(vec![3.0; 64], 8, 8);
        assert_eq!(consistency_loss(&s, &t, &Mask::filled(8, 8, false)).unwrap(), 0.0);
        assert_eq!(consistency_loss(&s, &t, &Mask::filled(8, 8, true)).unwrap(), 1.0);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::full([1, 8, 8], 3.0));
        let t = tape.leaf(Tensor::full([1, 8, 8], 2.0));
        let mask = Mask::from_fn(8, 8, |y, _| y < 4);
        let l = tape.consistency_loss(s, t, &mask);
        let g = tape.backward(l);
        assert!(g.get(t).is_none());
        let gs = g.get(s).unwrap();
        assert_eq!(gs.at(0, 0, 0), 1.0 / 64.0);
        assert_eq!(gs.at(0, 7, 0), 0.0);
    }

    #[test]
    fn self_supervised_loss_cases() {
        let lph = LossMap::new(Tensor::full([1, 8, 8], 0.2)).unwrap();
        let w = SelfLossWeights::default();
        let all = Mask::filled(8, 8, true);
        assert_eq!(self_supervised_loss(&lph, 0.0, 0.0, &all, &w).unwrap(), 0.0);
        let none = Mask::filled(8, 8, false);
        let zero = SelfLossWeights { lambda_sm: 0.0 };
        assert!((self_supervised_loss(&lph, 0.0, 3.0, &none, &zero).unwrap() - 0.2).abs() < 1e-15);
        let half = Mask::from_fn(8, 8, |y, _| y < 4);
        let l = self_supervised_loss(&lph, 0.1, 5.0, &half, &w).unwrap();
        assert!((l - 0.205).abs() < 1e-12, "{l}");
    }
}
