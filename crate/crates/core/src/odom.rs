//! Trajectories from chained relative poses and the KITTI odometry metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::camera::PoseSE3;
use crate::error::{ensure, Error, Result};

/// Camera-to-world poses, one per frame, starting at the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<PoseSE3>,
}

impl Trajectory {
    /// Rebases `poses` so that the first one is the identity.
    pub fn new(poses: Vec<PoseSE3>) -> Result<Self> {
        ensure!(!poses.is_empty(), "trajectory needs at least one pose");
        for p in &poses {
            p.validate()?;
        }
        let origin = poses[0].inverse();
        Ok(Self { poses: poses.iter().map(|p| origin.compose(p)).collect() })
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Cumulative path length at every frame.
    pub fn distances(&self) -> Vec<f64> {
        let mut d = vec![0.0];
        for w in self.poses.windows(2) {
            d.push(d.last().unwrap() + (w[1].translation - w[0].translation).norm());
        }
        d
    }

    /// Moves every camera by `sim`: positions map through it and
    /// orientations rotate with it.
    pub fn aligned(&self, sim: &Similarity) -> Trajectory {
        let poses = self
            .poses
            .iter()
            .map(|p| PoseSE3 { rotation: sim.rotation * p.rotation, translation: sim.apply(&p.translation) })
            .collect();
        Trajectory { poses }
    }

    /// Applies `g ∘ pose` to every pose (a change of world frame).
    pub fn transformed(&self, g: &PoseSE3) -> Trajectory {
        Trajectory { poses: self.poses.iter().map(|p| g.compose(p)).collect() }
    }
}

/// Chains frame-to-frame motions: pose 0 is the identity and
/// `pose[i + 1] = pose[i] ∘ relatives[i]`.
pub fn accumulate(relatives: &[PoseSE3]) -> Result<Trajectory> {
    ensure!(!relatives.is_empty(), "need at least one relative pose");
    let mut poses = vec![PoseSE3::identity()];
    for r in relatives {
        r.validate()?;
        poses.push(poses.last().unwrap().compose(r));
    }
    Ok(Trajectory { poses })
}

/// Inverse of [`accumulate`].
pub fn relatives(traj: &Trajectory) -> Vec<PoseSE3> {
    traj.poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
}

/// Least-squares similarity `dst ≈ s R src + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }
}

/// Umeyama's closed-form similarity alignment.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    ensure!(src.len() == dst.len(), "point sets differ in length: {} vs {}", src.len(), dst.len());
    ensure!(src.len() >= 2, "alignment needs at least two points");
    if src == dst {
        return Ok(Similarity { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s: f64 = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    let cov = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - mu_d) * (s - mu_s).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    if var_s == 0.0 {
        return Ok(Similarity { scale: 0.0, rotation: Matrix3::identity(), translation: mu_d });
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let d = svd.singular_values;
    let trace = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let scale = trace / var_s;
    Ok(Similarity { scale, rotation, translation: mu_d - scale * rotation * mu_s })
}

/// Absolute trajectory error: position RMSE after similarity alignment of
/// `pred` onto `gt`.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ensure!(
        pred.len() == gt.len(),
        "trajectory lengths differ: {} vs {}",
        pred.len(),
        gt.len()
    );
    ensure!(gt.len() >= 2, "ATE needs at least two poses");
    let (p, g) = (pred.positions(), gt.positions());
    let sim = umeyama(&p, &g)?;
    let sq: f64 = p.iter().zip(&g).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    Ok((sq / p.len() as f64).sqrt())
}

/// Segment lengths (metres) and start-frame stride of the KITTI protocol.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub lengths: Vec<f64>,
    pub step: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { lengths: (1..=8).map(|i| 100.0 * i as f64).collect(), step: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentErrors {
    /// Mean translational drift in percent.
    pub e_t: f64,
    /// Mean rotational drift in degrees per 100 m.
    pub e_r: f64,
    pub segments: usize,
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0).acos()
}

/// KITTI segment errors. Returns `None` when the ground-truth path is too
/// short for every configured length.
pub fn segment_errors(pred: &Trajectory, gt: &Trajectory, cfg: &SegmentConfig) -> Result<Option<SegmentErrors>> {
    ensure!(
        pred.len() == gt.len(),
        "trajectory lengths differ: {} vs {}",
        pred.len(),
        gt.len()
    );
    ensure!(gt.len() >= 2, "segment errors need at least two poses");
    ensure!(cfg.step >= 1 && !cfg.lengths.is_empty(), "invalid segment configuration");
    ensure!(cfg.lengths.iter().all(|&l| l > 0.0), "segment lengths must be positive");
    let dist = gt.distances();
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for first in (0..gt.len()).step_by(cfg.step) {
        for &len in &cfg.lengths {
            let Some(last) = (first..gt.len()).find(|&i| dist[i] > dist[first] + len) else {
                continue;
            };
            let d_gt = gt.poses[first].inverse().compose(&gt.poses[last]);
            let d_pred = pred.poses[first].inverse().compose(&pred.poses[last]);
            let err = d_pred.inverse().compose(&d_gt);
            // normalised by the distance actually travelled, which overshoots
            // the nominal length by up to one frame
            let travelled = dist[last] - dist[first];
            t_sum += err.translation.norm() / travelled;
            r_sum += rotation_angle(&err.rotation) / travelled;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let n = count as f64;
    Ok(Some(SegmentErrors {
        e_t: 100.0 * t_sum / n,
        e_r: (r_sum / n).to_degrees() * 100.0,
        segments: count,
    }))
}

/// KITTI odometry pose text: twelve numbers per line, the row-major 3×4
/// camera-to-world matrix.
pub fn format_kitti_poses(traj: &Trajectory) -> String {
    let mut out = String::new();
    for p in &traj.poses {
        let (r, t) = (&p.rotation, &p.translation);
        let vals = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

pub fn parse_kitti_poses(text: &str) -> Result<Vec<PoseSE3>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Contract(format!("line {}: {e}", i + 1)))?;
        ensure!(v.len() == 12, "line {}: expected 12 numbers, found {}", i + 1, v.len());
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let p = PoseSE3::new(r, Vector3::new(v[3], v[7], v[11]))
            .map_err(|e| Error::Contract(format!("line {}: {e}", i + 1)))?;
        poses.push(p);
    }
    Ok(poses)
}

pub fn write_kitti_poses(path: &Path, traj: &Trajectory) -> Result<()> {
    std::fs::write(path, format_kitti_poses(traj)).map_err(|e| Error::io(path, e))
}

pub fn read_kitti_poses(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let poses = parse_kitti_poses(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Trajectory::new(poses).map_err(|e| Error::format(path, e.to_string()))
}

/// Top-down (x–z) plot of ground truth (blue) and the aligned prediction
/// (red) as a PNG.
pub fn plot_trajectories(path: &Path, pred: &Trajectory, gt: &Trajectory, size: u32) -> Result<()> {
    let p = pred.positions();
    let sim = umeyama(&p, &gt.positions())?;
    let aligned: Vec<_> = p.iter().map(|x| sim.apply(x)).collect();
    let g = gt.positions();
    let all = g.iter().chain(&aligned);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in all {
        for (k, c) in [v.x, v.z].into_iter().enumerate() {
            lo[k] = lo[k].min(c);
            hi[k] = hi[k].max(c);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let margin = 10.0;
    let scale = (size as f64 - 2.0 * margin) / span;
    let to_px = |v: &Vector3<f64>| {
        (
            margin + (v.x - lo[0]) * scale,
            size as f64 - margin - (v.z - lo[1]) * scale,
        )
    };
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    for (pts, color) in [(&g, [40, 80, 220]), (&aligned, [220, 40, 40])] {
        for w in pts.windows(2) {
            let (a, b) = (to_px(&w[0]), to_px(&w[1]));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for i in 0..=steps {
                let f = i as f64 / steps as f64;
                let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
                if x >= 0.0 && y >= 0.0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn random_pose(rng: &mut RngState, rot: f64, trans: f64) -> PoseSE3 {
        let mut u = |a: f64| [rng.uniform(-a, a), rng.uniform(-a, a), rng.uniform(-a, a)];
        let w = u(rot);
        PoseSE3::from_axis_angle(w, u(trans))
    }

    fn straight(n: usize, step: f64) -> Trajectory {
        accumulate(&vec![PoseSE3::from_translation(0.0, 0.0, step); n - 1]).unwrap()
    }

    #[test]
    fn accumulate_cases() {
        let t = accumulate(&[PoseSE3::identity(); 4]).unwrap();
        assert!(t.poses().iter().all(|p| p.max_abs_diff(&PoseSE3::identity()) == 0.0));
        let t = accumulate(&[PoseSE3::from_translation(1.0, 0.0, 0.0); 3]).unwrap();
        let xs: Vec<f64> = t.positions().iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(accumulate(&[]).is_err());
    }

    #[test]
    fn ate_cases() {
        let mut rng = RngState::new(1);
        let rel: Vec<_> = (0..20).map(|_| random_pose(&mut rng, 0.1, 1.0)).collect();
        let gt = accumulate(&rel).unwrap();
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let scaled: Vec<_> = rel.iter().map(|p| PoseSE3::new(p.rotation, 3.0 * p.translation).unwrap()).collect();
        assert!(ate(&accumulate(&scaled).unwrap(), &gt).unwrap() < 1e-9);
        assert!(ate(&straight(5, 1.0), &gt).is_err());
    }

    /// Best in-plane similarity by exhaustive search over rotation angle and
    /// reflection, with the optimal scale and translation in closed form.
    fn brute_force_planar_ate(p: &[Vector3<f64>], g: &[Vector3<f64>]) -> f64 {
        let n = p.len() as f64;
        let mp = p.iter().sum::<Vector3<f64>>() / n;
        let mg = g.iter().sum::<Vector3<f64>>() / n;
        let cost = |theta: f64, flip: f64| {
            let (c, s) = (theta.cos(), theta.sin());
            let rot = |v: &Vector3<f64>| {
                let (x, y) = (v.x, flip * v.y);
                Vector3::new(c * x - s * y, s * x + c * y, 0.0)
            };
            let pc: Vec<_> = p.iter().map(|v| rot(&(v - mp))).collect();
            let gc: Vec<_> = g.iter().map(|v| v - mg).collect();
            let num: f64 = pc.iter().zip(&gc).map(|(a, b)| a.dot(b)).sum();
            let den: f64 = pc.iter().map(|a| a.norm_squared()).sum();
            let s = (num / den).max(0.0);
            let sq: f64 = pc.iter().zip(&gc).map(|(a, b)| (s * a - b).norm_squared()).sum();
            (sq / n).sqrt()
        };
        let mut best = f64::INFINITY;
        for flip in [1.0, -1.0] {
            let mut theta = 0.0;
            let mut step = std::f64::consts::TAU / 3600.0;
            for _ in 0..3600 {
                best = best.min(cost(theta, flip));
                theta += step;
            }
            // refine around the grid optimum
            let mut t0 = (0..3600)
                .map(|i| i as f64 * step)
                .min_by(|a, b| cost(*a, flip).total_cmp(&cost(*b, flip)))
                .unwrap();
            for _ in 0..60 {
                step *= 0.5;
                for cand in [t0 - step, t0 + step] {
                    if cost(cand, flip) < cost(t0, flip) {
                        t0 = cand;
                    }
                }
            }
            best = best.min(cost(t0, flip));
        }
        best
    }

    #[test]
    fn alternating_lateral_offset_matches_brute_force() {
        for n in [4usize, 5, 8] {
            let gt = straight(n, 1.0);
            let sign = |i: usize| if i % 2 == 0 { 1.0 } else { -1.0 };
            let pred: Vec<_> = gt
                .positions()
                .iter()
                .enumerate()
                .map(|(i, p)| PoseSE3::new(Matrix3::identity(), p + Vector3::new(sign(i), 0.0, 0.0)).unwrap())
                .collect();
            let pred = Trajectory { poses: pred };
            // the points live in the x–z plane; map it onto x–y for the oracle
            let to_xy = |v: &Vector3<f64>| Vector3::new(v.x, v.z, 0.0);
            let oracle = brute_force_planar_ate(
                &pred.positions().iter().map(to_xy).collect::<Vec<_>>(),
                &gt.positions().iter().map(to_xy).collect::<Vec<_>>(),
            );
            let got = ate(&pred, &gt).unwrap();
            assert!((got - oracle).abs() < 1e-9, "n={n}: {got} vs {oracle}");
        }
    }

    #[test]
    fn straight_line_scale_bias() {
        let gt = straight(120, 1.0);
        let pred = straight(120, 1.01);
        let cfg = SegmentConfig { lengths: vec![10.0, 20.0, 50.0], step: 1 };
        let e = segment_errors(&pred, &gt, &cfg).unwrap().unwrap();
        assert!((e.e_t - 1.0).abs() < 1e-6, "{}", e.e_t);
        assert!(e.e_r.abs() < 1e-9);
        let same = segment_errors(&gt, &gt, &cfg).unwrap().unwrap();
        assert_eq!((same.e_t, same.e_r), (0.0, 0.0));
    }

    #[test]
    fn constant_yaw_bias() {
        let theta: f64 = 1e-3;
        let gt = straight(200, 1.0);
        let biased = PoseSE3::from_axis_angle([0.0, theta, 0.0], [0.0, 0.0, 1.0]);
        let pred = accumulate(&vec![biased; 199]).unwrap();
        let cfg = SegmentConfig { lengths: vec![20.0, 50.0], step: 5 };
        let e = segment_errors(&pred, &gt, &cfg).unwrap().unwrap();
        let expect = theta.to_degrees() * 100.0;
        assert!((e.e_r - expect).abs() < 1e-9, "{} vs {expect}", e.e_r);
    }

    #[test]
    fn short_trajectory_is_flagged() {
        let gt = straight(10, 1.0);
        assert_eq!(segment_errors(&gt, &gt, &SegmentConfig::default()).unwrap(), None);
    }

    #[test]
    fn pose_file_round_trip() {
        let mut rng = RngState::new(3);
        let rel: Vec<_> = (0..10).map(|_| random_pose(&mut rng, 0.2, 2.0)).collect();
        let t = accumulate(&rel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        write_kitti_poses(&path, &t).unwrap();
        let back = read_kitti_poses(&path).unwrap();
        assert_eq!(back, t);
        std::fs::write(&path, "1 2 3\n").unwrap();
        let err = read_kitti_poses(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn plot_is_written() {
        let gt = straight(30, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        plot_trajectories(&path, &gt, &gt, 128).unwrap();
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relatives_round_trip(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let rel: Vec<_> = (0..15).map(|_| random_pose(&mut rng, 0.3, 2.0)).collect();
            let back = relatives(&accumulate(&rel).unwrap());
            for (a, b) in rel.iter().zip(&back) {
                prop_assert!(a.max_abs_diff(b) < 1e-8);
            }
        }

        #[test]
        fn ate_is_similarity_invariant(seed in 0u64..1000, s in 0.1f64..10.0) {
            let mut rng = RngState::new(seed);
            let gt = accumulate(&(0..12).map(|_| random_pose(&mut rng, 0.2, 1.0)).collect::<Vec<_>>()).unwrap();
            let pred = accumulate(&(0..12).map(|_| random_pose(&mut rng, 0.2, 1.0)).collect::<Vec<_>>()).unwrap();
            let g = random_pose(&mut rng, 3.0, 20.0);
            let moved: Vec<_> = pred
                .poses()
                .iter()
                .map(|p| {
                    let q = g.compose(p);
                    PoseSE3::new(q.rotation, s * q.translation).unwrap()
                })
                .collect();
            let moved = Trajectory { poses: moved };
            let (a, b) = (ate(&pred, &gt).unwrap(), ate(&moved, &gt).unwrap());
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }

        #[test]
        fn segment_errors_ignore_a_joint_rigid_motion(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let gt = accumulate(&(0..40).map(|_| random_pose(&mut rng, 0.05, 1.0)).collect::<Vec<_>>()).unwrap();
            let pred = accumulate(&(0..40).map(|_| random_pose(&mut rng, 0.05, 1.0)).collect::<Vec<_>>()).unwrap();
            let g = random_pose(&mut rng, 3.0, 50.0);
            let cfg = SegmentConfig { lengths: vec![5.0, 10.0], step: 2 };
            let a = segment_errors(&pred, &gt, &cfg).unwrap().unwrap();
            let b = segment_errors(&pred.transformed(&g), &gt.transformed(&g), &cfg).unwrap().unwrap();
            prop_assert!((a.e_t - b.e_t).abs() < 1e-8 && (a.e_r - b.e_r).abs() < 1e-8);
        }
    }
}
