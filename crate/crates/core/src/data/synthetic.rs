//! Fronto-parallel textured layers seen by a moving pinhole camera, with an
//! optional independently moving box. Every frame comes with exact depth,
//! relative poses, optical flow and the motion mask.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::FrameSample;
use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::error::{ensure, Error, Result};
use crate::geometry::{DepthMap, FlowField};
use crate::image::ImageGrid;
use crate::rng::RngState;
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneVariant {
    Textured,
    /// Background and every third layer are flat colours.
    LowTexture,
}

/// Generator parameters for a [`SyntheticScene`], stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Focal lengths as fractions of width and height.
    pub fx_norm: f64,
    pub fy_norm: f64,
    /// World translation of the camera per frame, metres.
    pub camera_step: [f64; 3],
    /// Rotation about the vertical axis per frame, radians.
    pub yaw_per_frame: f64,
    pub layers: usize,
    pub depth_range: [f64; 2],
    pub background_depth: f64,
    pub variant: SceneVariant,
    pub moving_object: bool,
    pub object_depth: f64,
    /// World velocity of the object per frame (x, y), metres.
    pub object_velocity: [f64; 2],
    /// Object size as fractions of the image width and height.
    pub object_size: [f64; 2],
    /// Object centre at frame 0, as fractions of the image width and height.
    pub object_center: [f64; 2],
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 192,
            height: 64,
            frames: 50,
            fx_norm: 0.58,
            fy_norm: 1.92,
            camera_step: [0.4, 0.0, 0.0],
            yaw_per_frame: 0.0,
            layers: 20,
            depth_range: [7.0, 30.0],
            background_depth: 40.0,
            variant: SceneVariant::Textured,
            moving_object: false,
            object_depth: 5.0,
            object_velocity: [0.4, 0.0],
            object_size: [0.3, 1.0 / 3.0],
            object_center: [0.5, 0.65],
            noise_std: 0.0,
        }
    }
}

impl SceneConfig {
    /// Static textured scene.
    pub fn textured(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Adds a box covering about 10% of the image that keeps pace with the
    /// camera sideways while sliding down. Its optical flow is vertical, so
    /// no depth makes the sideways camera's rigid flow agree with it. The box
    /// leaves the bottom of the image after about 27 frames.
    pub fn moving_box(seed: u64) -> Self {
        Self { seed, moving_object: true, object_velocity: [0.4, 0.1], object_center: [0.5, 0.15], ..Self::default() }
    }

    /// Large flat regions and sensor noise.
    pub fn low_texture(seed: u64) -> Self {
        Self { seed, variant: SceneVariant::LowTexture, noise_std: 0.03, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < ImageGrid::MIN_SIDE || self.height < ImageGrid::MIN_SIDE {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        if self.frames < 3 {
            return bad(format!("need at least 3 frames, got {}", self.frames));
        }
        let [lo, hi] = self.depth_range;
        if !(0.0 < lo && lo < hi && hi < self.background_depth) {
            return bad(format!("need 0 < depth_range[0] < depth_range[1] < background_depth, got {lo}, {hi}, {}", self.background_depth));
        }
        if self.moving_object && !(self.object_depth > 0.0 && self.object_depth < self.background_depth) {
            return bad(format!("object depth {} outside (0, background)", self.object_depth));
        }
        if !(self.noise_std >= 0.0 && self.fx_norm > 0.0 && self.fy_norm > 0.0) {
            return bad("noise and focal lengths must be non-negative / positive".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_normalized(self.fx_norm, self.fy_norm, self.width, self.height)
            .expect("validated focal lengths")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn build(&self) -> Result<SyntheticScene> {
        SyntheticScene::generate(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wave {
    /// Spatial frequency in cycles per metre.
    pub k: [f64; 2],
    pub phase: f64,
    pub amp: [f64; 3],
}

/// Analytic colour pattern over a plane's world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
    /// Smoothed checkerboard: (cycles per metre, amplitude).
    pub checker: Option<(f64, f64)>,
}

impl Texture {
    pub fn flat(base: [f64; 3]) -> Self {
        Self { base, waves: Vec::new(), checker: None }
    }

    pub fn is_flat(&self) -> bool {
        self.waves.is_empty() && self.checker.is_none()
    }

    /// Pattern whose image-space periods at depth `z` span roughly 6 to 64
    /// pixels, log-uniformly.
    fn random(base: [f64; 3], z: f64, fx: f64, rng: &mut RngState) -> Self {
        let metres_per_px = z / fx;
        let waves = (0..5)
            .map(|_| {
                let period = rng.uniform(6f64.ln(), 64f64.ln()).exp() * metres_per_px;
                let angle = rng.uniform(0.0, std::f64::consts::PI);
                let a = rng.uniform(0.07, 0.13);
                let tint = [rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)];
                Wave {
                    k: [angle.cos() / period, angle.sin() / period],
                    phase: rng.uniform(0.0, std::f64::consts::TAU),
                    amp: [a * tint[0], a * tint[1], a * tint[2]],
                }
            })
            .collect();
        let checker = Some((1.0 / (rng.uniform(10.0, 16.0) * metres_per_px), rng.uniform(0.08, 0.14)));
        Self { base, waves, checker }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.k[0] * x + w.k[1] * y) + w.phase).sin();
            for (ch, a) in c.iter_mut().zip(w.amp) {
                *ch += a * s;
            }
        }
        if let Some((f, a)) = self.checker {
            let t = std::f64::consts::TAU * f;
            let s = a * (3.0 * (t * x).sin() * (t * y).sin()).tanh();
            c.iter_mut().for_each(|ch| *ch += s);
        }
        c
    }
}

/// A rectangle on the plane `Z = depth`, spanning `x` and `y` in world
/// metres.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub depth: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub texture: Texture,
}

impl Layer {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.x[0] <= x && x <= self.x[1] && self.y[0] <= y && y <= self.y[1]
    }
}

/// A layer translating by `velocity` every frame; its texture moves with it.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingObject {
    pub layer: Layer,
    pub velocity: [f64; 2],
}

impl MovingObject {
    fn offset(&self, frame: usize) -> [f64; 2] {
        [self.velocity[0] * frame as f64, self.velocity[1] * frame as f64]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Surface {
    Layer(usize),
    Object,
}

struct Hit {
    depth: f64,
    surface: Surface,
    point: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub intrinsics: CameraIntrinsics,
    /// Static layers; the last one is the unbounded background.
    pub layers: Vec<Layer>,
    pub object: Option<MovingObject>,
    /// Camera-to-world pose of every frame; the first is the identity.
    pub trajectory: Vec<PoseSE3>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl SyntheticScene {
    pub fn generate(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.intrinsics();
        let mut rng = RngState::new(cfg.seed);
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let trajectory: Vec<PoseSE3> = (0..cfg.frames)
            .map(|i| {
                let f = i as f64;
                PoseSE3::from_axis_angle(
                    [0.0, cfg.yaw_per_frame * f, 0.0],
                    [cfg.camera_step[0] * f, cfg.camera_step[1] * f, cfg.camera_step[2] * f],
                )
            })
            .collect();
        let travel = cfg.camera_step[0] * (cfg.frames - 1) as f64;
        let (lo, hi) = (cfg.depth_range[0].ln(), cfg.depth_range[1].ln());
        let flat_layer = |i: usize| cfg.variant == SceneVariant::LowTexture && i % 3 == 0;
        let mut layers = Vec::with_capacity(cfg.layers + 1);
        for i in 0..cfg.layers {
            let z = rng.uniform(lo, hi).exp();
            let mpx = z / k.fx;
            let mpy = z / k.fy;
            let half_w = 0.5 * rng.uniform(0.25, 0.6) * w * mpx;
            let half_h = 0.5 * rng.uniform(0.3, 0.7) * h * mpy;
            let cx = rng.uniform(travel.min(0.0) - 0.5 * w * mpx, travel.max(0.0) + 0.5 * w * mpx);
            let cy = rng.uniform(-0.35 * h * mpy, 0.35 * h * mpy);
            let base = hsv((i as f64 * 0.618_034 + 0.1).fract(), 0.55, 0.6);
            let texture = if flat_layer(i) { Texture::flat(base) } else { Texture::random(base, z, k.fx, &mut rng) };
            layers.push(Layer { depth: z, x: [cx - half_w, cx + half_w], y: [cy - half_h, cy + half_h], texture });
        }
        let bg_base = [0.55, 0.62, 0.7];
        let bg_texture = if cfg.variant == SceneVariant::LowTexture {
            Texture::flat(bg_base)
        } else {
            Texture::random(bg_base, cfg.background_depth, k.fx, &mut rng)
        };
        layers.push(Layer {
            depth: cfg.background_depth,
            x: [f64::NEG_INFINITY, f64::INFINITY],
            y: [f64::NEG_INFINITY, f64::INFINITY],
            texture: bg_texture,
        });
        let object = cfg.moving_object.then(|| {
            let z = cfg.object_depth;
            let (uc, vc) = (cfg.object_center[0] * (w - 1.0), cfg.object_center[1] * (h - 1.0));
            let (xc, yc) = ((uc - k.cx) * z / k.fx, (vc - k.cy) * z / k.fy);
            let half_w = 0.5 * cfg.object_size[0] * w * z / k.fx;
            let half_h = 0.5 * cfg.object_size[1] * h * z / k.fy;
            let mut texture = Texture::random([0.85, 0.3, 0.25], z, k.fx, &mut rng);
            // keep the box distinct from every layer
            texture.checker = Some((texture.checker.unwrap().0, 0.2));
            MovingObject {
                layer: Layer { depth: z, x: [xc - half_w, xc + half_w], y: [yc - half_h, yc + half_h], texture },
                velocity: cfg.object_velocity,
            }
        });
        Ok(Self { config: cfg.clone(), intrinsics: k, layers, object, trajectory })
    }

    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    /// `T_{t→s}`, mapping camera-`t` coordinates to camera-`s` coordinates.
    pub fn relative_pose(&self, t: usize, s: usize) -> PoseSE3 {
        self.trajectory[s].inverse().compose(&self.trajectory[t])
    }

    fn trace(&self, frame: usize, u: f64, v: f64) -> Option<Hit> {
        let pose = &self.trajectory[frame];
        let dir = pose.rotation * self.intrinsics.backproject(u, v);
        let origin = pose.translation;
        if dir.z <= 1e-12 {
            return None;
        }
        let mut best: Option<Hit> = None;
        let mut consider = |layer: &Layer, surface: Surface, shift: [f64; 2]| {
            let t = (layer.depth - origin.z) / dir.z;
            if t <= 0.0 || best.as_ref().is_some_and(|b| b.depth <= t) {
                return;
            }
            let p = origin + dir * t;
            if layer.contains(p.x - shift[0], p.y - shift[1]) {
                best = Some(Hit { depth: t, surface, point: p });
            }
        };
        if let Some(obj) = &self.object {
            consider(&obj.layer, Surface::Object, obj.offset(frame));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            consider(layer, Surface::Layer(i), [0.0, 0.0]);
        }
        best
    }

    fn colour(&self, hit: &Hit, frame: usize) -> [f64; 3] {
        match hit.surface {
            Surface::Layer(i) => self.layers[i].texture.sample(hit.point.x, hit.point.y),
            Surface::Object => {
                let obj = self.object.as_ref().expect("object hit implies an object");
                let [dx, dy] = obj.offset(frame);
                obj.layer.texture.sample(hit.point.x - dx, hit.point.y - dy)
            }
        }
    }

    fn is_flat(&self, s: Surface) -> bool {
        match s {
            Surface::Layer(i) => self.layers[i].texture.is_flat(),
            Surface::Object => self.object.as_ref().is_some_and(|o| o.layer.texture.is_flat()),
        }
    }

    /// Renders one frame: image, depth, flow to the previous frame (zero for
    /// frame 0), motion and flat masks, and object visibility.
    pub fn render_frame(&self, frame: usize, rng: &RngState) -> Result<RenderedFrame> {
        ensure!(frame < self.frames(), "frame {frame} out of range (0..{})", self.frames());
        let (h, w) = (self.config.height, self.config.width);
        let n = h * w;
        let mut img = vec![0.0; 3 * n];
        let mut depth = vec![0.0; n];
        let mut flow = vec![0.0; 2 * n];
        let mut moving = vec![false; n];
        let mut flat = vec![false; n];
        let world_to_cam = |f: usize| {
            let pose = &self.trajectory[f];
            (pose.rotation.transpose(), pose.translation)
        };
        let cur = world_to_cam(frame);
        let prev = frame.checked_sub(1).map(world_to_cam);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (u, v) = (x as f64, y as f64);
                let hit = self
                    .trace(frame, u, v)
                    .ok_or_else(|| Error::Contract(format!("pixel ({y}, {x}) of frame {frame} sees no surface")))?;
                let c = self.colour(&hit, frame);
                for ch in 0..3 {
                    img[ch * n + i] = c[ch];
                }
                depth[i] = hit.depth;
                moving[i] = hit.surface == Surface::Object;
                flat[i] = self.is_flat(hit.surface);
                if let Some((rt, c_prev)) = &prev {
                    let mut p = hit.point;
                    if hit.surface == Surface::Object {
                        let vel = self.object.as_ref().unwrap().velocity;
                        p.x -= vel[0];
                        p.y -= vel[1];
                    }
                    let q = rt * (p - c_prev);
                    ensure!(q.z > 0.0, "surface point of pixel ({y}, {x}) is behind the previous camera");
                    // both ends go through the same projection, so a still
                    // camera yields exactly zero flow
                    let (pu, pv) = self.intrinsics.project(&q);
                    let (cu, cv) = self.intrinsics.project(&(cur.0 * (hit.point - cur.1)));
                    flow[i] = pu - cu;
                    flow[n + i] = pv - cv;
                }
            }
        }
        if self.config.noise_std > 0.0 {
            let mut noise = rng.fork(frame as u64);
            img.iter_mut().for_each(|v| *v += self.config.noise_std * noise.normal());
        }
        let object_visible = moving.iter().any(|&m| m);
        Ok(RenderedFrame {
            image: ImageGrid::new(Tensor::new([3, h, w], img))?,
            depth: DepthMap::new(Tensor::new([1, h, w], depth))?,
            flow_prev: FlowField::new(Tensor::new([2, h, w], flow))?,
            motion_mask: Mask::new(h, w, moving),
            flat_mask: Mask::new(h, w, flat),
            object_visible,
        })
    }
}

/// Everything rendered for a single frame.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub image: ImageGrid,
    pub depth: DepthMap,
    /// Flow to the previous frame; zero for frame 0.
    pub flow_prev: FlowField,
    pub motion_mask: Mask,
    pub flat_mask: Mask,
    pub object_visible: bool,
}

/// Renders the triplet centred on `frame` (which needs both neighbours).
pub fn render_scene(scene: &SyntheticScene, frame: usize, rng: &RngState) -> Result<FrameSample> {
    ensure!(
        frame >= 1 && frame + 1 < scene.frames(),
        "frame {frame} needs both neighbours in a {}-frame scene",
        scene.frames()
    );
    let prev = scene.render_frame(frame - 1, rng)?;
    let cur = scene.render_frame(frame, rng)?;
    let next = scene.render_frame(frame + 1, rng)?;
    Ok(assemble(scene, frame, &prev, cur, &next))
}

fn assemble(scene: &SyntheticScene, frame: usize, prev: &RenderedFrame, cur: RenderedFrame, next: &RenderedFrame) -> FrameSample {
    FrameSample {
        prev: prev.image.clone(),
        target: cur.image,
        next: next.image.clone(),
        intrinsics: scene.intrinsics,
        depth_valid: Some(Mask::filled(cur.depth.height(), cur.depth.width(), true)),
        depth: Some(cur.depth),
        pose_prev: Some(scene.relative_pose(frame, frame - 1)),
        pose_next: Some(scene.relative_pose(frame, frame + 1)),
        flow_prev: Some(cur.flow_prev),
        motion_mask: Some(cur.motion_mask),
        flat_mask: Some(cur.flat_mask),
        object_visible: cur.object_visible,
        id: format!("synthetic-{}-{frame:04}", scene.config.seed),
    }
}

/// A scene with every frame rendered once.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub scene: SyntheticScene,
    pub frames: Vec<RenderedFrame>,
}

impl SyntheticSequence {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        let scene = cfg.build()?;
        let rng = RngState::with_stream(cfg.seed, 0xd47a);
        let frames: Vec<RenderedFrame> = (0..scene.frames()).map(|f| scene.render_frame(f, &rng)).collect::<Result<_>>()?;
        if cfg.moving_object {
            let hidden = frames.iter().filter(|f| !f.object_visible).count();
            if hidden > 0 {
                log::warn!("moving object is outside the view in {hidden} of {} frames", frames.len());
            }
        }
        Ok(Self { scene, frames })
    }

    /// Centre frames that have both neighbours.
    pub fn sample_indices(&self) -> std::ops::Range<usize> {
        1..self.frames.len() - 1
    }

    pub fn sample(&self, frame: usize) -> Result<FrameSample> {
        ensure!(self.sample_indices().contains(&frame), "frame {frame} has no neighbours");
        Ok(assemble(
            &self.scene,
            frame,
            &self.frames[frame - 1],
            self.frames[frame].clone(),
            &self.frames[frame + 1],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rigid_flow;

    #[test]
    fn still_camera_gives_zero_flow_and_equal_frames() {
        let cfg = SceneConfig { camera_step: [0.0; 3], frames: 3, ..SceneConfig::textured(1) };
        let s = render_scene(&cfg.build().unwrap(), 1, &RngState::new(0)).unwrap();
        assert_eq!(s.prev, s.target);
        assert_eq!(s.flow_prev.unwrap().tensor().max_abs(), 0.0);
    }

    #[test]
    fn rigid_flow_matches_rendered_flow_on_static_frames() {
        for cfg in [
            SceneConfig { frames: 6, ..SceneConfig::textured(2) },
            SceneConfig { frames: 6, yaw_per_frame: 0.01, camera_step: [0.3, 0.02, 0.2], ..SceneConfig::textured(3) },
        ] {
            let seq = SyntheticSequence::new(&cfg).unwrap();
            for t in seq.sample_indices() {
                let s = seq.sample(t).unwrap();
                let rigid = rigid_flow(s.depth.as_ref().unwrap(), s.pose_prev.as_ref().unwrap(), &s.intrinsics).unwrap();
                let err = rigid.difference_magnitude(s.flow_prev.as_ref().unwrap()).into_iter().fold(0.0, f64::max);
                assert!(err < 1e-6, "frame {t}: {err}");
            }
        }
    }

    #[test]
    fn motion_mask_is_where_flows_disagree() {
        let seq = SyntheticSequence::new(&SceneConfig { frames: 4, ..SceneConfig::moving_box(4) }).unwrap();
        let s = seq.sample(2).unwrap();
        let rigid = rigid_flow(s.depth.as_ref().unwrap(), s.pose_prev.as_ref().unwrap(), &s.intrinsics).unwrap();
        let diff = rigid.difference_magnitude(s.flow_prev.as_ref().unwrap());
        let mask = s.motion_mask.unwrap();
        for (i, d) in diff.iter().enumerate() {
            assert_eq!(mask.bits()[i], *d > 1e-6, "pixel {i}: {d}");
        }
        let frac = mask.fraction();
        assert!((0.09..=0.11).contains(&frac), "{frac}");
        assert!(s.object_visible);
    }

    #[test]
    fn rendering_is_deterministic_and_seeded() {
        let a = SyntheticSequence::new(&SceneConfig { frames: 3, ..SceneConfig::low_texture(5) }).unwrap();
        let b = SyntheticSequence::new(&SceneConfig { frames: 3, ..SceneConfig::low_texture(5) }).unwrap();
        let c = SyntheticSequence::new(&SceneConfig { frames: 3, ..SceneConfig::low_texture(6) }).unwrap();
        assert_eq!(a.frames[1].image, b.frames[1].image);
        assert_ne!(a.frames[1].image, c.frames[1].image);
        assert!(a.frames[1].flat_mask.fraction() > 0.2);
    }

    #[test]
    fn layer_depths_respect_the_range() {
        let s = SceneConfig::textured(7).build().unwrap();
        let (n, bg) = (s.layers.len() - 1, s.config.background_depth);
        assert!(s.layers[..n].iter().all(|l| (7.0..=30.0).contains(&l.depth)));
        assert_eq!(s.layers[n].depth, bg);
        assert_eq!(s.trajectory[0], PoseSE3::identity());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SceneConfig::moving_box(9);
        assert_eq!(SceneConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(SceneConfig::from_toml("frames = 2").is_err());
        assert!(SceneConfig::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn object_leaving_view_is_flagged() {
        let cfg = SceneConfig { frames: 30, object_velocity: [3.0, 0.0], ..SceneConfig::moving_box(3) };
        let seq = SyntheticSequence::new(&cfg).unwrap();
        assert!(seq.frames[0].object_visible);
        assert!(!seq.frames[29].object_visible);
    }
}
