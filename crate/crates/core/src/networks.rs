//! Small stand-in networks: a single-frame teacher, a multi-frame student
//! with cost volume, prompts, bins and uncertainty heads, a pose network and
//! the optical-flow provider used only during training.

use std::cell::Cell;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::consistency::{depth_hypotheses, CostVolume};
use crate::data::FrameSample;
use crate::error::{ensure, Error, Result};
use crate::geometry::{DepthMap, FlowField};
use crate::image::ImageGrid;
use crate::nn::{Bound, Conv, Linear, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Mask, Tensor};
use crate::uncertainty::{uncertainty_mask, BinConfig, ProbMap, VarianceMap, SIGMA2_MAX, SIGMA2_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Conv,
    /// Adds a global sequence-mixing layer after the deepest stage.
    ConvWithSequenceMixer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderHeads {
    DepthSigmoid,
    BinsVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub scales: usize,
    pub base_channels: usize,
    pub encoder_kind: EncoderKind,
    pub decoder_heads: DecoderHeads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub teacher: NetworkSpec,
    pub student: NetworkSpec,
    pub bins: BinConfig,
    /// Depth hypotheses in the student's cost volume.
    pub hypotheses: usize,
    pub prompt_channels: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub pose_translation_scale: f64,
    pub pose_rotation_scale: f64,
    /// Quantile of σ² above which the refined depth replaces the initial one.
    pub uncertainty_quantile: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            teacher: NetworkSpec {
                scales: 4,
                base_channels: 8,
                encoder_kind: EncoderKind::Conv,
                decoder_heads: DecoderHeads::DepthSigmoid,
            },
            student: NetworkSpec {
                scales: 4,
                base_channels: 8,
                encoder_kind: EncoderKind::ConvWithSequenceMixer,
                decoder_heads: DecoderHeads::BinsVariance,
            },
            bins: BinConfig::default(),
            hypotheses: 16,
            prompt_channels: 4,
            min_depth: 0.1,
            max_depth: 100.0,
            pose_translation_scale: 0.01,
            pose_rotation_scale: 0.01,
            uncertainty_quantile: 0.8,
        }
    }
}

impl ModelConfig {
    /// Defaults for 2,000-step runs on the synthetic scene: a larger pose
    /// translation factor lets the pose reach the scene's motion scale in
    /// time.
    pub fn desk() -> Self {
        Self { pose_translation_scale: 0.1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            if spec.scales != 4 {
                return bad(format!("{name}: only 4 scales are supported, got {}", spec.scales));
            }
            if !spec.base_channels.is_power_of_two() || spec.base_channels < 2 {
                return bad(format!("{name}: base_channels must be a power of two >= 2"));
            }
            let f = 1 << (spec.scales - 1);
            if self.height % f != 0 || self.width % f != 0 {
                return bad(format!(
                    "{name}: resolution {}x{} is not divisible by 2^(S-1) = {f}",
                    self.height, self.width
                ));
            }
        }
        if self.teacher.decoder_heads != DecoderHeads::DepthSigmoid {
            return bad("teacher must use depth_sigmoid heads".into());
        }
        if self.student.decoder_heads != DecoderHeads::BinsVariance {
            return bad("student must use bins_variance heads".into());
        }
        self.bins.validate()?;
        if self.hypotheses < 2 {
            return bad("need at least two cost-volume hypotheses".into());
        }
        if !(0.0 < self.min_depth && self.min_depth < self.max_depth) {
            return bad("need 0 < min_depth < max_depth".into());
        }
        if !(0.0 < self.uncertainty_quantile && self.uncertainty_quantile < 1.0) {
            return bad("uncertainty_quantile must lie in (0, 1)".into());
        }
        Ok(())
    }

    fn scale_dims(&self, s: usize) -> (usize, usize) {
        (self.height >> s, self.width >> s)
    }
}

/// Normalises `[0, 1]` images to roughly zero mean and unit spread.
fn normalize_input(t: &Tape, img: Var) -> Var {
    t.mul_scalar(t.add_scalar(img, -0.45), 1.0 / 0.225)
}

fn up2(t: &Tape, x: Var) -> Var {
    let (_, h, w) = t.value(x).chw();
    t.resize_nearest(x, 2 * h, 2 * w)
}

/// Single-frame depth network.
#[derive(Clone, Debug)]
pub struct TeacherNet {
    stem: Conv,
    enc: [Conv; 3],
    dec: [Conv; 4],
    heads: [Conv; 4],
    min_depth: f64,
    max_depth: f64,
}

impl TeacherNet {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let c = cfg.teacher.base_channels;
        let stem = Conv::new(store, "teacher.stem", 3, c, 3, 1, rng);
        let enc = [
            Conv::new(store, "teacher.enc1", c, 2 * c, 3, 2, rng),
            Conv::new(store, "teacher.enc2", 2 * c, 4 * c, 3, 2, rng),
            Conv::new(store, "teacher.enc3", 4 * c, 4 * c, 3, 2, rng),
        ];
        // dec[s] produces the features of scale s
        let dec = [
            Conv::new(store, "teacher.dec0", 2 * c, c, 3, 1, rng),
            Conv::new(store, "teacher.dec1", 4 * c, c, 3, 1, rng),
            Conv::new(store, "teacher.dec2", 8 * c, 2 * c, 3, 1, rng),
            Conv::new(store, "teacher.dec3", 4 * c, 4 * c, 3, 1, rng),
        ];
        let heads = [
            Conv::new(store, "teacher.head0", c, 1, 3, 1, rng),
            Conv::new(store, "teacher.head1", c, 1, 3, 1, rng),
            Conv::new(store, "teacher.head2", 2 * c, 1, 3, 1, rng),
            Conv::new(store, "teacher.head3", 4 * c, 1, 3, 1, rng),
        ];
        // Start near the geometric middle of the depth range with small
        // per-pixel variation, so early warps are coherent.
        let (lo, hi) = (1.0 / cfg.max_depth, 1.0 / cfg.min_depth);
        let s0 = (1.0 / (cfg.min_depth * cfg.max_depth).sqrt() - lo) / (hi - lo);
        let bias = (s0 / (1.0 - s0)).ln();
        for h in &heads {
            store.get_mut(h.w).data_mut().iter_mut().for_each(|w| *w *= 0.1);
            store.get_mut(h.b).data_mut().fill(bias);
        }
        Self { stem, enc, dec, heads, min_depth: cfg.min_depth, max_depth: cfg.max_depth }
    }

    /// Depth maps `[1, H/2^s, W/2^s]` for s = 0..4, finest first.
    pub fn forward(&self, t: &Tape, p: &Bound, img: Var) -> Vec<Var> {
        let x = normalize_input(t, img);
        let x0 = t.elu(self.stem.forward(t, p, x));
        let e1 = t.elu(self.enc[0].forward(t, p, x0));
        let e2 = t.elu(self.enc[1].forward(t, p, e1));
        let e3 = t.elu(self.enc[2].forward(t, p, e2));
        let d3 = t.elu(self.dec[3].forward(t, p, e3));
        let d2 = t.elu(self.dec[2].forward(t, p, t.concat_channels(&[up2(t, d3), e2])));
        let d1 = t.elu(self.dec[1].forward(t, p, t.concat_channels(&[up2(t, d2), e1])));
        let d0 = t.elu(self.dec[0].forward(t, p, t.concat_channels(&[up2(t, d1), x0])));
        [d0, d1, d2, d3]
            .iter()
            .zip(&self.heads)
            .map(|(&d, head)| self.to_depth(t, head.forward(t, p, d)))
            .collect()
    }

    /// `D = 1 / (d_min_inv + (d_max_inv − d_min_inv) · sigmoid(x))`.
    fn to_depth(&self, t: &Tape, logits: Var) -> Var {
        let (lo, hi) = (1.0 / self.max_depth, 1.0 / self.min_depth);
        let disp = t.add_scalar(t.mul_scalar(t.sigmoid(logits), hi - lo), lo);
        t.recip(disp)
    }
}

/// Per-scale outputs of the student; every `Var` is `[C, H/2^s, W/2^s]`.
pub struct StudentOutput {
    pub depth_pre: Vec<Var>,
    pub depth_post: Vec<Var>,
    /// Fused depth `D_t`.
    pub depth: Vec<Var>,
    pub variance: Vec<Var>,
    pub probs_pre: Vec<Var>,
    /// Penultimate decoder features per scale.
    pub features: Vec<Var>,
    pub cost_volume: Var,
    pub hypotheses: Vec<f64>,
    pub bin_centers: Var,
    /// Finest-scale uncertainty mask and its threshold.
    pub uncertainty_mask: Mask,
    pub epsilon: f64,
}

/// Multi-frame depth network with cost volume, prompts and bins heads.
#[derive(Clone, Debug)]
pub struct StudentNet {
    stem: Conv,
    enc1: Conv,
    enc2: Conv,
    fuse: Conv,
    enc3: Conv,
    mixer: Option<Linear>,
    dec: [Conv; 4],
    prompts: [ParamId; 4],
    bins_head: [Conv; 4],
    var_head: [Conv; 4],
    refine_head: [Conv; 4],
    bin_logits: ParamId,
    bins: BinConfig,
    quantile: f64,
    hypotheses: usize,
}

impl StudentNet {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let c = cfg.student.base_channels;
        let n = cfg.bins.n;
        let cp = cfg.prompt_channels;
        let b = cfg.hypotheses;
        let stem = Conv::new(store, "student.stem", 3, c, 3, 1, rng);
        let enc1 = Conv::new(store, "student.enc1", c, 2 * c, 3, 2, rng);
        let enc2 = Conv::new(store, "student.enc2", 2 * c, 2 * c, 3, 2, rng);
        let fuse = Conv::new(store, "student.fuse", b + 2 * c, 4 * c, 3, 1, rng);
        let enc3 = Conv::new(store, "student.enc3", 4 * c, 4 * c, 3, 2, rng);
        let mixer = (cfg.student.encoder_kind == EncoderKind::ConvWithSequenceMixer)
            .then(|| Linear::new(store, "student.mixer", 4 * c, 4 * c, (1.0 / (4 * c) as f64).sqrt(), rng));
        let feat = [c, c, 2 * c, 4 * c];
        let dec = [
            Conv::new(store, "student.dec0", c + c + cp, feat[0], 3, 1, rng),
            Conv::new(store, "student.dec1", feat[2] + 2 * c + cp, feat[1], 3, 1, rng),
            Conv::new(store, "student.dec2", feat[3] + 4 * c + cp, feat[2], 3, 1, rng),
            Conv::new(store, "student.dec3", 4 * c + cp, feat[3], 3, 1, rng),
        ];
        let prompts = std::array::from_fn(|s| {
            let (h, w) = cfg.scale_dims(s);
            store.add(format!("student.prompt{s}"), Tensor::from_fn([cp, h, w], |_| 0.1 * rng.normal()))
        });
        let bins_head = std::array::from_fn(|s| Conv::new(store, &format!("student.bins{s}"), feat[s], n, 3, 1, rng));
        let var_head = std::array::from_fn(|s| Conv::new(store, &format!("student.var{s}"), feat[s], 1, 3, 1, rng));
        // starts as the identity refinement: residual logits are zero
        let refine_head = std::array::from_fn(|s| Conv::zeroed(store, &format!("student.refine{s}"), n + 1 + feat[s], n, 1));
        let bin_logits = store.add("student.bin_logits", Tensor::zeros([n]));
        Self {
            stem,
            enc1,
            enc2,
            fuse,
            enc3,
            mixer,
            dec,
            prompts,
            bins_head,
            var_head,
            refine_head,
            bin_logits,
            bins: cfg.bins,
            quantile: cfg.uncertainty_quantile,
            hypotheses: b,
        }
    }

    fn encode(&self, t: &Tape, p: &Bound, img: Var) -> (Var, Var, Var) {
        let x = normalize_input(t, img);
        let x0 = t.elu(self.stem.forward(t, p, x));
        let e1 = t.elu(self.enc1.forward(t, p, x0));
        let e2 = t.elu(self.enc2.forward(t, p, e1));
        (x0, e1, e2)
    }

    /// `pose` is the 12-vector `T_{t→t−1}`; `depth_range` bounds both the
    /// cost-volume hypotheses and the bin centres.
    pub fn forward(
        &self,
        t: &Tape,
        p: &Bound,
        target: Var,
        prev: Var,
        pose: Var,
        k: &CameraIntrinsics,
        depth_range: [f64; 2],
    ) -> StudentOutput {
        let (x0, e1, f_t) = self.encode(t, p, target);
        let (_, _, f_s) = self.encode(t, p, prev);
        let hyps = depth_hypotheses(depth_range[0], depth_range[1], self.hypotheses)
            .expect("depth range validated by the caller");
        let cv = t.cost_volume(f_t, f_s, pose, &k.scaled(0.25, 0.25), &hyps);
        let m2 = t.elu(self.fuse.forward(t, p, t.concat_channels(&[cv, f_t])));
        let mut e3 = t.elu(self.enc3.forward(t, p, m2));
        if let Some(mixer) = &self.mixer {
            let g = mixer.forward(t, p, t.spatial_mean(e3));
            e3 = t.elu(t.add_channel(e3, g));
        }
        let prompt = |s: usize| p.var(self.prompts[s]);
        let d3 = t.elu(self.dec[3].forward(t, p, t.concat_channels(&[e3, prompt(3)])));
        let d2 = t.elu(self.dec[2].forward(t, p, t.concat_channels(&[up2(t, d3), m2, prompt(2)])));
        let d1 = t.elu(self.dec[1].forward(t, p, t.concat_channels(&[up2(t, d2), e1, prompt(1)])));
        let d0 = t.elu(self.dec[0].forward(t, p, t.concat_channels(&[up2(t, d1), x0, prompt(0)])));
        let feats = [d0, d1, d2, d3];

        let widths = t.softmax(p.var(self.bin_logits));
        let bins = BinConfig { d_min: depth_range[0], d_max: depth_range[1], ..self.bins.clone() };
        let centers = t.bin_centers(widths, &bins);
        let mut out = StudentOutput {
            depth_pre: Vec::new(),
            depth_post: Vec::new(),
            depth: Vec::new(),
            variance: Vec::new(),
            probs_pre: Vec::new(),
            features: feats.to_vec(),
            cost_volume: cv,
            hypotheses: hyps,
            bin_centers: centers,
            uncertainty_mask: Mask::filled(1, 1, false),
            epsilon: 0.0,
        };
        for (s, &f) in feats.iter().enumerate() {
            let logits = self.bins_head[s].forward(t, p, f);
            let log_var = self.var_head[s].forward(t, p, f);
            let var = t.clamp(t.exp(log_var), SIGMA2_MIN, SIGMA2_MAX);
            // log σ² keeps the refinement input well scaled
            let residual = self.refine_head[s].forward(t, p, t.concat_channels(&[logits, log_var, f]));
            let p_pre = t.softmax_channels(logits);
            let p_post = t.softmax_channels(t.add(logits, residual));
            out.depth_pre.push(t.weighted_channel_sum(p_pre, centers));
            out.depth_post.push(t.weighted_channel_sum(p_post, centers));
            out.variance.push(var);
            out.probs_pre.push(p_pre);
        }
        let finest = VarianceMap::new((*t.value(out.variance[0])).clone()).expect("clamped variance");
        let (m_u, eps) = uncertainty_mask(&finest, self.quantile).expect("quantile validated");
        for s in 0..feats.len() {
            let (_, h, w) = t.value(out.depth_pre[s]).chw();
            let m = m_u.resize_nearest(h, w);
            out.depth.push(t.select(&m, out.depth_post[s], out.depth_pre[s]));
        }
        out.uncertainty_mask = m_u;
        out.epsilon = eps;
        out
    }

    pub fn refine_params(&self) -> Vec<ParamId> {
        self.refine_head.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    pub fn prompt_params(&self) -> [ParamId; 4] {
        self.prompts
    }
}

/// Relative-pose regressor on a stacked image pair.
#[derive(Clone, Debug)]
pub struct PoseNet {
    convs: [Conv; 4],
    head: Linear,
    translation_scale: f64,
    rotation_scale: f64,
}

impl PoseNet {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let convs = [
            Conv::new(store, "pose.conv1", 6, 8, 3, 2, rng),
            Conv::new(store, "pose.conv2", 8, 16, 3, 2, rng),
            Conv::new(store, "pose.conv3", 16, 32, 3, 2, rng),
            Conv::new(store, "pose.conv4", 32, 32, 3, 2, rng),
        ];
        let head = Linear::new(store, "pose.head", 32, 6, 0.0, rng);
        Self {
            convs,
            head,
            translation_scale: cfg.pose_translation_scale,
            rotation_scale: cfg.pose_rotation_scale,
        }
    }

    /// 12-vector `[R row-major, t]` of `T_{target→source}`.
    pub fn forward(&self, t: &Tape, p: &Bound, target: Var, source: Var) -> Var {
        let mut x = normalize_input(t, t.concat_channels(&[target, source]));
        for c in &self.convs {
            x = t.elu(c.forward(t, p, x));
        }
        let raw = self.head.forward(t, p, t.spatial_mean(x));
        let scale = Tensor::new(
            [6],
            [[self.rotation_scale; 3], [self.translation_scale; 3]].concat(),
        );
        t.pose_from_params(t.mul(raw, t.constant(scale)))
    }
}

/// All three networks sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub teacher: TeacherNet,
    pub student: StudentNet,
    pub pose: PoseNet,
    /// Running bounds of the teacher's depth, used as cost-volume range.
    pub depth_range: [f64; 2],
}

impl Models {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::with_stream(seed, 0x6e6e);
        let mut store = ParamStore::new();
        let teacher = TeacherNet::new(&mut store, cfg, &mut rng.fork(1));
        let student = StudentNet::new(&mut store, cfg, &mut rng.fork(2));
        let pose = PoseNet::new(&mut store, cfg, &mut rng.fork(3));
        let _ = rng.normal();
        Ok(Self {
            config: cfg.clone(),
            store,
            teacher,
            student,
            pose,
            depth_range: [cfg.min_depth.max(0.1), cfg.max_depth.min(100.0)],
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        ensure!(
            (img.height(), img.width()) == (self.config.height, self.config.width),
            "image is {}x{}, model expects {}x{}",
            img.height(),
            img.width(),
            self.config.height,
            self.config.width
        );
        ensure!(img.channels() == 3, "model expects RGB input");
        Ok(())
    }
}

/// Teacher depth at every scale, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleDepth(pub Vec<DepthMap>);

impl MultiScaleDepth {
    pub fn finest(&self) -> &DepthMap {
        &self.0[0]
    }

    pub fn inverse(&self) -> Vec<Tensor> {
        self.0.iter().map(|d| d.tensor().map(|v| 1.0 / v)).collect()
    }
}

fn depth_of(t: &Tape, v: Var) -> DepthMap {
    DepthMap::new((*t.value(v)).clone()).expect("network depth is positive")
}

pub fn teacher_forward(models: &Models, img: &ImageGrid) -> Result<MultiScaleDepth> {
    models.check_image(img)?;
    let t = Tape::new();
    let p = models.store.bind_frozen(&t);
    let ds = models.teacher.forward(&t, &p, t.constant(img.tensor().clone()));
    Ok(MultiScaleDepth(ds.into_iter().map(|d| depth_of(&t, d)).collect()))
}

pub fn pose_forward(models: &Models, target: &ImageGrid, source: &ImageGrid) -> Result<PoseSE3> {
    models.check_image(target)?;
    models.check_image(source)?;
    let t = Tape::new();
    let p = models.store.bind_frozen(&t);
    let v = models.pose.forward(&t, &p, t.constant(target.tensor().clone()), t.constant(source.tensor().clone()));
    let pose = PoseSE3::from_flat(t.value(v).data());
    pose.validate()?;
    Ok(pose)
}

/// Full student outputs as value types.
pub struct StudentPrediction {
    pub depth: MultiScaleDepth,
    pub depth_pre: DepthMap,
    pub depth_post: DepthMap,
    pub variance: VarianceMap,
    pub probs: ProbMap,
    pub cost_volume: CostVolume,
    pub uncertainty_mask: Mask,
}

pub fn student_forward(
    models: &Models,
    target: &ImageGrid,
    prev: &ImageGrid,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<StudentPrediction> {
    models.check_image(target)?;
    models.check_image(prev)?;
    pose.validate()?;
    let t = Tape::new();
    let p = models.store.bind_frozen(&t);
    let out = models.student.forward(
        &t,
        &p,
        t.constant(target.tensor().clone()),
        t.constant(prev.tensor().clone()),
        t.constant(pose.to_flat()),
        k,
        models.depth_range,
    );
    Ok(StudentPrediction {
        depth: MultiScaleDepth(out.depth.iter().map(|&d| depth_of(&t, d)).collect()),
        depth_pre: depth_of(&t, out.depth_pre[0]),
        depth_post: depth_of(&t, out.depth_post[0]),
        variance: VarianceMap::new((*t.value(out.variance[0])).clone())?,
        probs: ProbMap::new((*t.value(out.probs_pre[0])).clone())?,
        cost_volume: CostVolume::new((*t.value(out.cost_volume)).clone(), out.hypotheses)?,
        uncertainty_mask: out.uncertainty_mask,
    })
}

/// Depth inference: pose from the pose network, then the student. Needs no
/// optical flow.
pub fn predict_depth(models: &Models, target: &ImageGrid, prev: &ImageGrid, k: &CameraIntrinsics) -> Result<DepthMap> {
    let pose = pose_forward(models, target, prev)?;
    let pred = student_forward(models, target, prev, &pose, k)?;
    Ok(pred.depth.0.into_iter().next().expect("four scales"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FlowSource {
    /// Renderer ground truth plus Gaussian noise of this standard deviation.
    Oracle { noise_std: f64 },
    /// UMFL files named `<sample id>.umfl` in a directory.
    File { dir: PathBuf },
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::Oracle { noise_std: 0.0 }
    }
}

/// Supplies `F_{t→t−1}` during training and counts how often it is asked.
#[derive(Debug)]
pub struct FlowProvider {
    source: FlowSource,
    calls: Cell<u64>,
}

impl FlowProvider {
    pub fn new(source: FlowSource) -> Self {
        Self { source, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    pub fn source(&self) -> &FlowSource {
        &self.source
    }

    pub fn provide(&self, sample: &FrameSample, rng: &mut RngState) -> Result<FlowField> {
        self.calls.set(self.calls.get() + 1);
        match &self.source {
            FlowSource::Oracle { noise_std } => {
                let gt = sample.flow_prev.as_ref().ok_or_else(|| {
                    Error::Contract(format!("oracle flow needs synthetic ground truth, sample {} has none", sample.id))
                })?;
                if *noise_std == 0.0 {
                    return Ok(gt.clone());
                }
                let mut noisy = gt.tensor().clone();
                for v in noisy.data_mut() {
                    *v += noise_std * rng.normal();
                }
                FlowField::new(noisy)
            }
            FlowSource::File { dir } => {
                let name: String = sample.id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
                read_flow_file(&dir.join(format!("{name}.umfl")))
            }
        }
    }
}

const FLOW_MAGIC: &[u8; 4] = b"UMFL";

/// Writes `magic, H, W (u32 LE), then H·W·(Δu, Δv) as f32 LE`, row-major.
pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = flow.at(y, x);
            buf.extend_from_slice(&(du as f32).to_le_bytes());
            buf.extend_from_slice(&(dv as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "not a UMFL flow file"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    if buf.len() != 12 + 8 * h * w {
        return Err(Error::format(path, format!("expected {} bytes for {h}x{w}, found {}", 12 + 8 * h * w, buf.len())));
    }
    let n = h * w;
    let mut data = vec![0.0; 2 * n];
    for i in 0..n {
        let f = |j: usize| f32::from_le_bytes(buf[12 + 8 * i + 4 * j..16 + 8 * i + 4 * j].try_into().unwrap()) as f64;
        data[i] = f(0);
        data[n + i] = f(1);
    }
    FlowField::new(Tensor::new([2, h, w], data)).map_err(|e| Error::format(path, e.to_string()))
}
