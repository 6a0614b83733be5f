//! Projective geometry: reprojection, view synthesis and rigid flow.
//!
//! Reprojection maps every target pixel `p` through
//! `K (T (D(p) K⁻¹ p))`. It is evaluated as the per-pixel flow
//! `f · (q / q_z − r)` with `r = K⁻¹ p` and `q = R r + t / D`, and the
//! coordinates are `p + flow`. The two forms are algebraically identical;
//! this one makes the identity pose produce exactly zero flow and makes
//! sampling at `grid + rigid_flow` bit-identical to sampling at the
//! reprojected coordinates.

use std::rc::Rc;

use nalgebra::Vector3;

use crate::autodiff::{Tape, Var};
use crate::camera::{CameraIntrinsics, PixelGrid, PoseSE3};
use crate::error::{ensure, Result};
use crate::image::ImageGrid;
use crate::sampler::in_bounds;
use crate::tensor::{Mask, Tensor};

/// Minimum projected depth (metres) for a reprojection to count as valid.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

/// Per-pixel depth in metres, stored as `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let t = as_plane(t)?;
        ensure!(
            t.data().iter().all(|&d| d.is_finite() && d > 0.0),
            "depth must be finite and positive everywhere"
        );
        Ok(Self(t))
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(Tensor::full([1, height, width], depth))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.chw().1
    }

    pub fn width(&self) -> usize {
        self.0.chw().2
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.at(0, y, x)
    }

    pub fn to_inverse(&self) -> InvDepthMap {
        InvDepthMap(self.0.map(|d| 1.0 / d))
    }

    /// Checks `d_min ≤ D ≤ d_max` elementwise.
    pub fn check_bounds(&self, d_min: f64, d_max: f64) -> Result<()> {
        ensure!(
            self.0.data().iter().all(|&d| d >= d_min && d <= d_max),
            "depth outside [{d_min}, {d_max}]"
        );
        Ok(())
    }
}

/// Per-pixel inverse depth in 1/metres, stored as `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvDepthMap(Tensor);

impl InvDepthMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let t = as_plane(t)?;
        ensure!(
            t.data().iter().all(|&d| d.is_finite() && d > 0.0),
            "inverse depth must be finite and positive everywhere"
        );
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_depth(&self) -> DepthMap {
        DepthMap(self.0.map(|d| 1.0 / d))
    }
}

/// Per-pixel displacement `(Δu, Δv)` in pixels, stored as `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(
            t.shape().len() == 3 && t.shape()[0] == 2,
            "flow must be [2, H, W], got {:?}",
            t.shape()
        );
        ensure!(t.all_finite(), "flow must be finite");
        let (_, h, w) = t.chw();
        let bound = ((h * h + w * w) as f64).sqrt();
        let n = h * w;
        let d = t.data();
        ensure!(
            (0..n).all(|i| d[i].hypot(d[n + i]) <= bound),
            "flow magnitude exceeds the image diagonal"
        );
        Ok(Self(t))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros([2, height, width]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.chw().1
    }

    pub fn width(&self) -> usize {
        self.0.chw().2
    }

    /// `(Δu, Δv)` at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.0.at(0, y, x), self.0.at(1, y, x))
    }

    /// Per-pixel Euclidean norm of `self − other`, row-major.
    pub fn difference_magnitude(&self, other: &FlowField) -> Vec<f64> {
        let n = self.height() * self.width();
        let (a, b) = (self.0.data(), other.0.data());
        (0..n).map(|i| (a[i] - b[i]).hypot(a[n + i] - b[n + i])).collect()
    }
}

fn as_plane(t: Tensor) -> Result<Tensor> {
    match t.shape() {
        [1, _, _] => Ok(t),
        [h, w] => {
            let (h, w) = (*h, *w);
            Ok(t.reshape([1, h, w]))
        }
        s => Err(crate::Error::Contract(format!("expected a [1, H, W] map, got {s:?}"))),
    }
}

/// Per-pixel intermediate values reused by the backward pass.
struct Projection {
    ray: Vector3<f64>,
    q: Vector3<f64>,
    ok: bool,
}

impl Tape {
    /// Reprojection flow of every pixel given `depth: [1, H, W]` and the
    /// 12-vector pose `[R row-major, t]`. Returns the `[2, H, W]` flow and
    /// the validity mask (projected depth above [`MIN_PROJECTED_DEPTH`] and
    /// landing inside the image).
    pub fn reprojection_flow(&self, depth: Var, pose: Var, k: &CameraIntrinsics) -> (Var, Mask) {
        let dv = self.value(depth);
        let pv = self.value(pose);
        let (_, h, w) = dv.chw();
        let n = h * w;
        let p = PoseSE3::from_flat(pv.data());
        let k = *k;
        let mut flow = vec![0.0; 2 * n];
        let mut valid = vec![false; n];
        let mut proj = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = dv.data()[i];
                let ray = k.backproject(x as f64, y as f64);
                let q = p.rotation * ray + p.translation / d;
                let ok = d * q.z > MIN_PROJECTED_DEPTH;
                if ok {
                    flow[i] = k.fx * (q.x / q.z - ray.x);
                    flow[n + i] = k.fy * (q.y / q.z - ray.y);
                    valid[i] = in_bounds(x as f64 + flow[i], y as f64 + flow[n + i], h, w);
                } else {
                    // sends the sample to the top-left border, flagged invalid
                    flow[i] = -1.0 - x as f64;
                    flow[n + i] = -1.0 - y as f64;
                }
                proj.push(Projection { ray, q, ok });
            }
        }
        let proj = Rc::new(proj);
        let out = self.custom(Tensor::new([2, h, w], flow), &[depth, pose], move |g, needs| {
            let gd = g.data();
            let mut g_depth = vec![0.0; n];
            let mut g_pose = [0.0; 12];
            for (i, pr) in proj.iter().enumerate() {
                if !pr.ok {
                    continue;
                }
                let (gu, gv) = (gd[i], gd[n + i]);
                let iz = 1.0 / pr.q.z;
                // d flow / d q
                let gq = Vector3::new(
                    gu * k.fx * iz,
                    gv * k.fy * iz,
                    -(gu * k.fx * pr.q.x + gv * k.fy * pr.q.y) * iz * iz,
                );
                let d = dv.data()[i];
                // q = R r + t / d
                g_depth[i] = -gq.dot(&p.translation) / (d * d);
                for a in 0..3 {
                    for b in 0..3 {
                        g_pose[a * 3 + b] += gq[a] * pr.ray[b];
                    }
                    g_pose[9 + a] += gq[a] / d;
                }
            }
            vec![
                needs[0].then(|| Tensor::new([1, h, w], g_depth)),
                needs[1].then(|| Tensor::new([12], g_pose.to_vec())),
            ]
        });
        (out, Mask::new(h, w, valid))
    }

    /// Source-image coordinates `grid + flow` for every target pixel.
    pub fn reproject(&self, depth: Var, pose: Var, k: &CameraIntrinsics) -> (Var, Mask) {
        let (flow, valid) = self.reprojection_flow(depth, pose, k);
        let (_, h, w) = self.value(depth).chw();
        let grid = self.constant(PixelGrid::new(h, w).coords());
        (self.add(grid, flow), valid)
    }

    /// Warps `source` into the target view: `I_s⟨K T D K⁻¹ p⟩`.
    pub fn synthesize_view(&self, source: Var, depth: Var, pose: Var, k: &CameraIntrinsics) -> (Var, Mask) {
        let (coords, proj_valid) = self.reproject(depth, pose, k);
        let (img, sample_valid) = self.bilinear_sample(source, coords);
        (img, proj_valid.and(&sample_valid))
    }
}

fn check_inputs(depth: &DepthMap, pose: &PoseSE3) -> Result<()> {
    pose.validate()?;
    ensure!(
        depth.tensor().data().iter().all(|&d| d > 0.0 && d.is_finite()),
        "depth must be positive"
    );
    Ok(())
}

/// Source-image coordinates `[2, H, W]` and validity for every target pixel.
pub fn reproject(depth: &DepthMap, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<(Tensor, Mask)> {
    check_inputs(depth, pose)?;
    let tape = Tape::new();
    let (coords, valid) = tape.reproject(
        tape.constant(depth.tensor().clone()),
        tape.constant(pose.to_flat()),
        k,
    );
    Ok(((*tape.value(coords)).clone(), valid))
}

/// Rigid flow `K(T D K⁻¹ p) − p` caused by camera motion alone.
pub fn rigid_flow(depth: &DepthMap, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<FlowField> {
    check_inputs(depth, pose)?;
    let tape = Tape::new();
    let (flow, _) = tape.reprojection_flow(
        tape.constant(depth.tensor().clone()),
        tape.constant(pose.to_flat()),
        k,
    );
    Ok(FlowField((*tape.value(flow)).clone()))
}

/// Synthesises the target view from `source` and returns it with the
/// per-pixel validity mask.
pub fn synthesize_view(
    source: &ImageGrid,
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<(ImageGrid, Mask)> {
    check_inputs(depth, pose)?;
    ensure!(
        (source.height(), source.width()) == (depth.height(), depth.width()),
        "source image and depth disagree on H×W"
    );
    let tape = Tape::new();
    let (img, valid) = tape.synthesize_view(
        tape.constant(source.tensor().clone()),
        tape.constant(depth.tensor().clone()),
        tape.constant(pose.to_flat()),
        k,
    );
    Ok((ImageGrid::new((*tape.value(img)).clone())?, valid))
}

/// Samples `source` at `grid + flow`.
pub fn warp_with_flow(source: &ImageGrid, flow: &FlowField) -> Result<(ImageGrid, Mask)> {
    let (_, h, w) = flow.tensor().chw();
    let tape = Tape::new();
    let grid = tape.constant(PixelGrid::new(h, w).coords());
    let coords = tape.add(grid, tape.constant(flow.tensor().clone()));
    let (img, valid) = tape.bilinear_sample(tape.constant(source.tensor().clone()), coords);
    Ok((ImageGrid::new((*tape.value(img)).clone())?, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::RngState;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 9.5, 7.5).unwrap()
    }

    fn random_pose(rng: &mut RngState, rot: f64, trans: f64) -> PoseSE3 {
        PoseSE3::from_axis_angle(
            [rng.uniform(-rot, rot), rng.uniform(-rot, rot), rng.uniform(-rot, rot)],
            [rng.uniform(-trans, trans), rng.uniform(-trans, trans), rng.uniform(-trans, trans)],
        )
    }

    #[test]
    fn identity_pose_gives_identity_grid() {
        let mut rng = RngState::new(1);
        let d = DepthMap::new(Tensor::from_fn([1, 16, 20], |_| rng.uniform(1.0, 50.0))).unwrap();
        let (coords, valid) = reproject(&d, &PoseSE3::identity(), &k100()).unwrap();
        assert_eq!(coords, PixelGrid::new(16, 20).coords());
        assert_eq!(valid.count(), 320);
        let flow = rigid_flow(&d, &PoseSE3::identity(), &k100()).unwrap();
        assert_eq!(flow.tensor().max_abs(), 0.0);
    }

    #[test]
    fn lateral_translation_shifts_by_focal_times_baseline_over_depth() {
        // camera moves +1 m along x, so points move −1 m in its frame
        let d = DepthMap::constant(16, 20, 10.0).unwrap();
        let t_ts = PoseSE3::from_translation(1.0, 0.0, 0.0).inverse();
        let flow = rigid_flow(&d, &t_ts, &k100()).unwrap();
        for y in 0..16 {
            for x in 0..20 {
                let (du, dv) = flow.at(y, x);
                assert!((du + 10.0).abs() < 1e-12 && dv.abs() < 1e-12);
            }
        }
        let (coords, _) = reproject(&d, &t_ts, &k100()).unwrap();
        assert!((coords.at(0, 3, 15) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_only_flow_is_depth_independent() {
        let mut rng = RngState::new(2);
        let pose = PoseSE3::from_axis_angle([0.01, -0.02, 0.015], [0.0, 0.0, 0.0]);
        let d1 = DepthMap::new(Tensor::from_fn([1, 16, 20], |_| rng.uniform(1.0, 50.0))).unwrap();
        let d2 = DepthMap::constant(16, 20, 3.0).unwrap();
        let a = reproject(&d1, &pose, &k100()).unwrap().0;
        let b = reproject(&d2, &pose, &k100()).unwrap().0;
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-10);
    }

    #[test]
    fn rigid_flow_is_coords_minus_grid() {
        let mut rng = RngState::new(3);
        for _ in 0..10 {
            let d = DepthMap::new(Tensor::from_fn([1, 12, 16], |_| rng.uniform(2.0, 30.0))).unwrap();
            let pose = random_pose(&mut rng, 0.05, 0.5);
            let (coords, _) = reproject(&d, &pose, &k100()).unwrap();
            let flow = rigid_flow(&d, &pose, &k100()).unwrap();
            let diff = coords.zip_map(&PixelGrid::new(12, 16).coords(), |a, b| a - b);
            assert!(diff.zip_map(flow.tensor(), |a, b| a - b).max_abs() < 1e-10);
        }
    }

    #[test]
    fn warp_via_flow_is_bit_identical_to_view_synthesis() {
        let mut rng = RngState::new(4);
        let img = ImageGrid::new(Tensor::from_fn([3, 12, 16], |_| rng.uniform(0.0, 1.0))).unwrap();
        let d = DepthMap::new(Tensor::from_fn([1, 12, 16], |_| rng.uniform(2.0, 30.0))).unwrap();
        let pose = random_pose(&mut rng, 0.05, 0.5);
        let (a, _) = synthesize_view(&img, &d, &pose, &k100()).unwrap();
        let flow = rigid_flow(&d, &pose, &k100()).unwrap();
        let (b, _) = warp_with_flow(&img, &flow).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_synthesis_is_exact() {
        let mut rng = RngState::new(5);
        let img = ImageGrid::new(Tensor::from_fn([3, 8, 8], |_| rng.uniform(0.0, 1.0))).unwrap();
        let d = DepthMap::constant(8, 8, 4.0).unwrap();
        let (out, valid) = synthesize_view(&img, &d, &PoseSE3::identity(), &k100()).unwrap();
        assert_eq!(out, img);
        assert_eq!(valid.count(), 64);
    }

    #[test]
    fn points_behind_camera_are_invalid() {
        let d = DepthMap::constant(8, 8, 1.0).unwrap();
        let back = PoseSE3::from_translation(0.0, 0.0, -2.0);
        let (_, valid) = reproject(&d, &back, &k100()).unwrap();
        assert_eq!(valid.count(), 0);
    }

    #[test]
    fn nonpositive_depth_is_rejected() {
        assert!(DepthMap::new(Tensor::zeros([1, 8, 8])).is_err());
        let mut bad = DepthMap::constant(8, 8, 1.0).unwrap();
        bad.0.data_mut()[5] = -1.0;
        assert!(reproject(&bad, &PoseSE3::identity(), &k100()).is_err());
    }

    #[test]
    fn reprojection_flow_gradients() {
        let mut rng = RngState::new(6);
        let d = Tensor::from_fn([1, 8, 8], |_| rng.uniform(2.0, 10.0));
        let pose = random_pose(&mut rng, 0.05, 0.5).to_flat();
        let weights = Tensor::from_fn([2, 8, 8], |_| rng.uniform(-1.0, 1.0));
        let k = CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
        let err = gradcheck::check(&d, |t, d| {
            let (f, _) = t.reprojection_flow(d, t.constant(pose.clone()), &k);
            t.sum(t.mul(f, t.constant(weights.clone())))
        }, 1e-6, 1e-8);
        assert!(err < 1e-6, "depth err {err}");
        let err = gradcheck::check(&pose, |t, p| {
            let (f, _) = t.reprojection_flow(t.constant(d.clone()), p, &k);
            t.sum(t.mul(f, t.constant(weights.clone())))
        }, 1e-6, 1e-8);
        assert!(err < 1e-6, "pose err {err}");
    }
}
