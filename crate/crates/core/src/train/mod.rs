//! The training objective and loop.
//!
//! All losses are computed at full resolution on nearest-upsampled depth.
//! The masks M (inconsistency), M_flow (motion) and M_u (uncertainty) are
//! computed once at full resolution and nearest-downsampled wherever a
//! coarser map needs them.

mod checkpoint;
mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{evaluate_depth, DepthEvaluator, DepthMetrics, EvalConfig};

use crate::autodiff::{Tape, Var};
use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::consistency::{argmin_depth, inconsistency_mask, CostVolume, SelfLossWeights};
use crate::data::FrameSample;
use crate::error::{ensure, Error, Result};
use crate::geometry::{rigid_flow, DepthMap};
use crate::motion::{flow_difference_mask, FlowMaskConfig, TripletConfig};
use crate::networks::{predict_depth, FlowProvider, FlowSource, Models};
use crate::nn::{Adam, AdamConfig, Bound};
use crate::photometric::PhotometricConfig;
use crate::rng::RngState;
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_u: f64,
    pub lambda_tri: f64,
    pub lambda_sm: f64,
    pub scales: usize,
    pub lr: f64,
    /// The learning rate is divided by 10 for this many final epochs.
    pub lr_drop_epochs: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Total optimiser steps; overrides `epochs × steps per epoch`. The
    /// learning-rate drop then covers the same final fraction of steps.
    pub steps: Option<usize>,
    /// Enables the motion path: M_flow in the photometric terms and the
    /// isolated triplet loss.
    pub motion: bool,
    pub flow: FlowSource,
    pub flow_mask: FlowMaskConfig,
    pub triplet: TripletConfig,
    pub photometric: PhotometricConfig,
    pub adam: AdamConfig,
    /// EMA momentum of the teacher-depth range used for cost-volume
    /// hypotheses.
    pub range_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_tri: 0.1,
            lambda_sm: 1e-3,
            scales: 4,
            lr: 1e-4,
            lr_drop_epochs: 5,
            batch: 12,
            epochs: 20,
            seed: 0,
            steps: None,
            motion: true,
            flow: FlowSource::default(),
            flow_mask: FlowMaskConfig::default(),
            triplet: TripletConfig::default(),
            photometric: PhotometricConfig::default(),
            adam: AdamConfig::default(),
            range_momentum: 0.99,
        }
    }
}

impl TrainConfig {
    /// Settings for short CPU runs on the 64×192 synthetic scenes.
    pub fn desk() -> Self {
        Self { lr: 1e-3, batch: 1, epochs: 40, steps: Some(2000), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.scales != 4 {
            return bad("scales must be 4 to match the networks");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.lr_drop_epochs > self.epochs && self.steps.is_none() {
            return bad("lr_drop_epochs exceeds epochs");
        }
        if [self.lambda_u, self.lambda_tri].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lambda_sm > 0.0) {
            return bad("lambda_sm must be positive");
        }
        if !(0.0..1.0).contains(&self.range_momentum) {
            return bad("range_momentum must lie in [0, 1)");
        }
        self.flow_mask.validate()?;
        self.triplet.validate()?;
        self.photometric.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.batch))
    }

    /// Learning rate at `step`, with the final-epochs drop.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let keep = self.epochs.saturating_sub(self.lr_drop_epochs);
        let drop_from = if self.epochs == 0 { total_steps } else { total_steps * keep / self.epochs };
        if step >= drop_from {
            self.lr / 10.0
        } else {
            self.lr
        }
    }
}

/// One scale's contribution to the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleTerms {
    pub self_supervised: f64,
    pub uncertainty: f64,
    pub triplet: f64,
}

/// `(1/S) Σ_s (L_self + λ_u L_u + λ_tri L_tri)`.
pub fn total_loss(per_scale: &[ScaleTerms], cfg: &TrainConfig) -> Result<f64> {
    ensure!(
        per_scale.len() == cfg.scales,
        "expected {} scales, got {}",
        cfg.scales,
        per_scale.len()
    );
    let sum: f64 = per_scale
        .iter()
        .map(|s| s.self_supervised + cfg.lambda_u * s.uncertainty + cfg.lambda_tri * s.triplet)
        .sum();
    Ok(sum / cfg.scales as f64)
}

impl Tape {
    /// Graph version of [`total_loss`]; each tuple is `(L_self, L_u, L_tri)`.
    pub fn total_loss(&self, per_scale: &[(Var, Var, Var)], cfg: &TrainConfig) -> Var {
        assert_eq!(per_scale.len(), cfg.scales, "scale count mismatch");
        let terms: Vec<Var> = per_scale
            .iter()
            .map(|&(s, u, tri)| {
                self.add(self.add(s, self.mul_scalar(u, cfg.lambda_u)), self.mul_scalar(tri, cfg.lambda_tri))
            })
            .collect();
        let sum = terms[1..].iter().fold(terms[0], |acc, &v| self.add(acc, v));
        self.mul_scalar(sum, 1.0 / cfg.scales as f64)
    }
}

/// Every loss term of one scale, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ScaleReport {
    pub photometric: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub self_supervised: f64,
    pub uncertainty: f64,
    pub triplet: f64,
    pub teacher_photometric: f64,
    pub teacher_smoothness: f64,
}

impl ScaleReport {
    const NAMES: [&'static str; 8] = [
        "photometric",
        "consistency",
        "smoothness",
        "self",
        "uncertainty",
        "triplet",
        "teacher_photometric",
        "teacher_smoothness",
    ];

    fn values(&self) -> [f64; 8] {
        [
            self.photometric,
            self.consistency,
            self.smoothness,
            self.self_supervised,
            self.uncertainty,
            self.triplet,
            self.teacher_photometric,
            self.teacher_smoothness,
        ]
    }

    fn add_scaled(&mut self, o: &ScaleReport, w: f64) {
        self.photometric += w * o.photometric;
        self.consistency += w * o.consistency;
        self.smoothness += w * o.smoothness;
        self.self_supervised += w * o.self_supervised;
        self.uncertainty += w * o.uncertainty;
        self.triplet += w * o.triplet;
        self.teacher_photometric += w * o.teacher_photometric;
        self.teacher_smoothness += w * o.teacher_smoothness;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub lr: f64,
    pub scales: Vec<ScaleReport>,
    pub student_total: f64,
    pub teacher_total: f64,
    pub total: f64,
    /// Fractions of pixels in M and M_flow.
    pub inconsistent_fraction: f64,
    pub motion_fraction: f64,
}

impl LossReport {
    /// Recomputes the total from the itemised terms.
    pub fn itemised_total(&self, cfg: &TrainConfig) -> f64 {
        let s = self.scales.len() as f64;
        let student: f64 = self
            .scales
            .iter()
            .map(|r| r.self_supervised + cfg.lambda_u * r.uncertainty + cfg.lambda_tri * r.triplet)
            .sum();
        let teacher: f64 = self
            .scales
            .iter()
            .map(|r| r.teacher_photometric + cfg.lambda_sm * r.teacher_smoothness)
            .sum();
        (student + teacher) / s
    }

    pub fn csv_header(scales: usize) -> Vec<String> {
        let mut h = vec!["step".to_string(), "lr".to_string()];
        for s in 0..scales {
            h.extend(ScaleReport::NAMES.iter().map(|n| format!("s{s}_{n}")));
        }
        h.extend(["student_total", "teacher_total", "total"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), self.lr.to_string()];
        for s in &self.scales {
            r.extend(s.values().iter().map(f64::to_string));
        }
        r.extend([self.student_total, self.teacher_total, self.total].map(|v| v.to_string()));
        r
    }
}

/// Networks, optimiser and counters of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub models: Models,
    pub adam: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(models: Models, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(&models.store, cfg.adam);
        Self { models, adam, step: 0 }
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let models = ck.models()?;
        ensure!(
            ck.adam_m.len() == models.store.len(),
            "checkpoint optimiser state does not match the model"
        );
        Ok(Self { models, adam: ck.adam(cfg.adam), step: ck.step })
    }
}

struct SampleGraph {
    scales: Vec<[Var; 8]>,
    total: Var,
    teacher_finest: Tensor,
    inconsistent: f64,
    motion: f64,
}

fn up_to(t: &Tape, v: Var, h: usize, w: usize) -> Var {
    let (_, vh, vw) = t.value(v).chw();
    if (vh, vw) == (h, w) {
        v
    } else {
        t.resize_nearest(v, h, w)
    }
}

/// Per-pixel minimum photometric error over the previous and next frames.
fn reprojection_loss(
    t: &Tape,
    target: Var,
    sources: &[(Var, Var)],
    depth: Var,
    k: &CameraIntrinsics,
    cfg: &PhotometricConfig,
) -> Var {
    let mut maps = Vec::new();
    let mut valid = Vec::new();
    for &(img, pose) in sources {
        let (syn, v) = t.synthesize_view(img, depth, pose, k);
        maps.push(t.photometric_error(syn, target, cfg));
        valid.push(v);
    }
    t.min_reprojection(&maps, &valid).0
}

fn masked_mean(t: &Tape, map: Var, exclude: &Mask) -> Var {
    t.mean(t.mul(map, t.constant(exclude.not().to_tensor())))
}

fn sample_graph(
    t: &Tape,
    p: &Bound,
    models: &Models,
    s: &FrameSample,
    cfg: &TrainConfig,
    flow: &FlowProvider,
    rng: &mut RngState,
) -> Result<SampleGraph> {
    let (h, w) = (s.height(), s.width());
    let k = &s.intrinsics;
    let target = t.constant(s.target.tensor().clone());
    let prev = t.constant(s.prev.tensor().clone());
    let next = t.constant(s.next.tensor().clone());

    let pose_prev = models.pose.forward(t, p, target, prev);
    let pose_next = models.pose.forward(t, p, target, next);
    let sources = [(prev, pose_prev), (next, pose_next)];
    // The student sees the pose as an input; only the teacher's terms train it.
    let student_sources = [(prev, t.detach(pose_prev)), (next, t.detach(pose_next))];

    let teacher = models.teacher.forward(t, p, target);
    let teacher_full: Vec<Var> = teacher.iter().map(|&d| up_to(t, d, h, w)).collect();
    let teacher_finest = (*t.value(teacher_full[0])).clone();
    let teacher_depth = DepthMap::new(teacher_finest.clone())?;

    let m_flow = if cfg.motion {
        let provided = flow.provide(s, rng)?;
        let pose_value = PoseSE3::from_flat(t.value(pose_prev).data());
        let rigid = rigid_flow(&teacher_depth, &pose_value, k)?;
        flow_difference_mask(&provided, &rigid, &cfg.flow_mask)?.0
    } else {
        Mask::filled(h, w, false)
    };

    let out = models
        .student
        .forward(t, p, target, prev, t.detach(pose_prev), k, models.depth_range);
    let cv = CostVolume::new((*t.value(out.cost_volume)).clone(), out.hypotheses.clone())?;
    let d_cv = argmin_depth(&cv);
    let d_cv_full = DepthMap::new((*t.value(up_to(t, t.constant(d_cv.into_tensor()), h, w))).clone())?;
    let m_inc = inconsistency_mask(&d_cv_full, &teacher_depth)?;
    let excluded = m_inc.or(&m_flow);

    let weights = SelfLossWeights { lambda_sm: cfg.lambda_sm };
    let mut images = vec![target];
    for i in 1..cfg.scales {
        images.push(t.avg_pool2(images[i - 1]));
    }
    let mut scales = Vec::with_capacity(cfg.scales);
    let mut tuples = Vec::with_capacity(cfg.scales);
    let mut teacher_sum: Option<Var> = None;
    for sc in 0..cfg.scales {
        let t_map = reprojection_loss(t, target, &sources, teacher_full[sc], k, &cfg.photometric);
        let t_ph = masked_mean(t, t_map, &m_flow);
        let t_sm = t.smoothness_loss(t.recip(teacher[sc]), images[sc]);
        let t_total = t.add(t_ph, t.mul_scalar(t_sm, cfg.lambda_sm));
        teacher_sum = Some(teacher_sum.map_or(t_total, |acc| t.add(acc, t_total)));

        let depth = up_to(t, out.depth[sc], h, w);
        let l_map = reprojection_loss(t, target, &student_sources, depth, k, &cfg.photometric);
        let l_cons = t.consistency_loss(depth, teacher_full[sc], &m_inc);
        let l_sm = t.smoothness_loss(t.recip(out.depth[sc]), images[sc]);
        let l_self = t.self_supervised_loss(l_map, l_cons, l_sm, &excluded, &weights);
        let kept = t.mul(l_map, t.constant(excluded.not().to_tensor()));
        let l_u = t.uncertainty_loss(kept, up_to(t, out.variance[sc], h, w));
        let l_tri = if cfg.motion && sc == 0 {
            let (_, fh, fw) = t.value(out.features[sc]).chw();
            t.isolated_triplet_loss(out.features[sc], &m_flow.resize_nearest(fh, fw), &cfg.triplet)
        } else {
            t.constant(Tensor::scalar(0.0))
        };
        let l_ph = masked_mean(t, l_map, &excluded);
        scales.push([l_ph, l_cons, l_sm, l_self, l_u, l_tri, t_ph, t_sm]);
        tuples.push((l_self, l_u, l_tri));
    }
    let student = t.total_loss(&tuples, cfg);
    let teacher_total = t.mul_scalar(teacher_sum.expect("at least one scale"), 1.0 / cfg.scales as f64);
    let total = t.add(student, teacher_total);
    Ok(SampleGraph {
        scales,
        total,
        teacher_finest,
        inconsistent: m_inc.fraction(),
        motion: m_flow.fraction(),
    })
}

/// One optimiser step over `batch`.
///
/// The teacher's output is detached wherever the student's losses use it, so
/// the teacher is trained by its own photometric and smoothness terms only.
pub fn train_step(
    state: &mut TrainState,
    batch: &[FrameSample],
    cfg: &TrainConfig,
    flow: &FlowProvider,
    lr: f64,
) -> Result<LossReport> {
    ensure!(!batch.is_empty(), "empty batch");
    let t = Tape::new();
    let p = state.models.store.bind(&t);
    // one stream per step, so a resumed run draws what an uninterrupted one would
    let mut rng = RngState::with_stream(cfg.seed, 0x7a1).fork(state.step);
    let mut graphs = Vec::with_capacity(batch.len());
    for s in batch {
        graphs.push(sample_graph(&t, &p, &state.models, s, cfg, flow, &mut rng)?);
    }
    let inv_b = 1.0 / batch.len() as f64;
    let sum = graphs[1..].iter().fold(graphs[0].total, |acc, g| t.add(acc, g.total));
    let loss = t.mul_scalar(sum, inv_b);

    let mut report = LossReport {
        step: state.step,
        lr,
        scales: vec![ScaleReport::default(); cfg.scales],
        ..LossReport::default()
    };
    for g in &graphs {
        for (sc, vars) in g.scales.iter().enumerate() {
            let v = vars.map(|v| t.value(v).item());
            for (name, x) in ScaleReport::NAMES.iter().zip(v) {
                if !x.is_finite() {
                    return Err(Error::NonFinite { term: format!("scale{sc}.{name}") });
                }
            }
            let r = ScaleReport {
                photometric: v[0],
                consistency: v[1],
                smoothness: v[2],
                self_supervised: v[3],
                uncertainty: v[4],
                triplet: v[5],
                teacher_photometric: v[6],
                teacher_smoothness: v[7],
            };
            report.scales[sc].add_scaled(&r, inv_b);
        }
        report.inconsistent_fraction += inv_b * g.inconsistent;
        report.motion_fraction += inv_b * g.motion;
    }
    report.total = t.value(loss).item();
    if !report.total.is_finite() {
        return Err(Error::NonFinite { term: "total".into() });
    }
    let s = cfg.scales as f64;
    report.student_total = report
        .scales
        .iter()
        .map(|r| r.self_supervised + cfg.lambda_u * r.uncertainty + cfg.lambda_tri * r.triplet)
        .sum::<f64>()
        / s;
    report.teacher_total = report.total - report.student_total;

    let grads = t.backward(loss);
    state.adam.update(&mut state.models.store, &p, &grads, lr);
    update_depth_range(state, &graphs, cfg);
    state.step += 1;
    Ok(report)
}

/// Teacher-depth quantiles that bound the student's hypotheses and bins.
const RANGE_QUANTILES: [f64; 2] = [0.02, 0.98];

fn update_depth_range(state: &mut TrainState, graphs: &[SampleGraph], cfg: &TrainConfig) {
    let mc = &state.models.config;
    // Saturated outputs mean "no parallax", not a depth.
    let cap = 0.5 * mc.max_depth;
    let mut all: Vec<f64> = graphs
        .iter()
        .flat_map(|g| g.teacher_finest.data().iter().copied())
        .filter(|&d| d < cap)
        .collect();
    if all.is_empty() {
        return;
    }
    all.sort_by(f64::total_cmp);
    let at = |q: f64| all[((all.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (at(RANGE_QUANTILES[0]), at(RANGE_QUANTILES[1]));
    let r = &mut state.models.depth_range;
    if state.step == 0 {
        *r = [lo, hi];
    } else {
        let m = cfg.range_momentum;
        *r = [m * r[0] + (1.0 - m) * lo, m * r[1] + (1.0 - m) * hi];
    }
    r[0] = r[0].clamp(mc.min_depth, mc.max_depth / 2.0);
    r[1] = r[1].clamp(r[0] * 2.0, mc.max_depth);
}

/// Sample order for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut RngState::with_stream(seed, 0xe90c).fork(epoch));
    idx
}

/// Observer of a training run.
pub trait TrainHook {
    fn on_step(&mut self, _state: &TrainState, _report: &LossReport) -> Result<()> {
        Ok(())
    }
}

impl TrainHook for () {}

/// Writes one CSV row per step.
pub struct CsvLog<W: std::io::Write> {
    writer: csv::Writer<W>,
}

impl CsvLog<std::fs::File> {
    pub fn create(path: &Path, scales: usize) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(file, scales).map_err(|e| Error::format(path, e.to_string()))
    }
}

impl<W: std::io::Write> CsvLog<W> {
    pub fn new(inner: W, scales: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer
            .write_record(LossReport::csv_header(scales))
            .map_err(|e| Error::Contract(e.to_string()))?;
        Ok(Self { writer })
    }

    pub fn into_inner(self) -> W {
        self.writer.into_inner().ok().expect("csv flush")
    }
}

impl<W: std::io::Write> TrainHook for CsvLog<W> {
    fn on_step(&mut self, _state: &TrainState, report: &LossReport) -> Result<()> {
        self.writer.write_record(report.csv_row()).map_err(|e| Error::Contract(e.to_string()))?;
        self.writer.flush().map_err(|e| Error::Contract(e.to_string()))
    }
}

/// Runs from `state.step` to the configured number of steps, cycling through
/// `data` in a per-epoch shuffled order.
pub fn train(
    state: &mut TrainState,
    data: &[FrameSample],
    cfg: &TrainConfig,
    flow: &FlowProvider,
    hook: &mut dyn TrainHook,
) -> Result<()> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "training set is empty");
    let total = cfg.total_steps(data.len());
    let per_epoch = data.len().div_ceil(cfg.batch);
    while (state.step as usize) < total {
        let step = state.step as usize;
        let (epoch, within) = (step / per_epoch, step % per_epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch as u64);
        let batch: Vec<FrameSample> = order
            .iter()
            .skip(within * cfg.batch)
            .take(cfg.batch)
            .map(|&i| data[i].clone())
            .collect();
        let report = train_step(state, &batch, cfg, flow, cfg.lr_at(step, total))?;
        if step % 50 == 0 {
            log::info!("step {step}/{total} loss {:.5}", report.total);
        }
        hook.on_step(state, &report)?;
    }
    Ok(())
}

/// Depth metrics of the inference path over the whole image and split by
/// the ground-truth motion mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub all: DepthMetrics,
    pub static_pixels: DepthMetrics,
    /// `None` when no sample has moving pixels.
    pub moving_pixels: Option<DepthMetrics>,
}

pub fn evaluate_samples(models: &Models, samples: &[FrameSample], cfg: &EvalConfig) -> Result<SplitMetrics> {
    let mut all = DepthEvaluator::new(*cfg);
    let mut still = DepthEvaluator::new(*cfg);
    let mut moving = DepthEvaluator::new(*cfg);
    for s in samples {
        let gt = s
            .depth
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no ground-truth depth", s.id)))?;
        let pred = predict_depth(models, &s.target, &s.prev, &s.intrinsics)?;
        let valid = s.depth_valid.as_ref();
        all.add(&pred, gt, valid, None)?;
        match &s.motion_mask {
            Some(m) => {
                still.add(&pred, gt, valid, Some(&m.not()))?;
                moving.add(&pred, gt, valid, Some(m))?;
            }
            None => {
                still.add(&pred, gt, valid, None)?;
            }
        }
    }
    Ok(SplitMetrics {
        all: all.finish()?,
        static_pixels: still.finish()?,
        moving_pixels: (moving.images() > 0).then(|| moving.finish()).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneConfig, SyntheticSequence};
    use crate::networks::ModelConfig;

    fn tiny_setup(seed: u64, motion: bool) -> (TrainState, Vec<FrameSample>, TrainConfig) {
        let scene = SceneConfig {
            width: 32,
            height: 16,
            frames: 5,
            moving_object: motion,
            ..SceneConfig::textured(seed)
        };
        let seq = SyntheticSequence::new(&scene).unwrap();
        let data: Vec<_> = seq.sample_indices().map(|i| seq.sample(i).unwrap()).collect();
        let models = Models::new(&ModelConfig { height: 16, width: 32, ..ModelConfig::default() }, seed).unwrap();
        let cfg = TrainConfig { batch: 2, lr: 1e-3, motion, seed, ..TrainConfig::default() };
        (TrainState::new(models, &cfg), data, cfg)
    }

    #[test]
    fn total_loss_cases() {
        let cfg = TrainConfig::default();
        let zero = [ScaleTerms::default(); 4];
        assert_eq!(total_loss(&zero, &cfg).unwrap(), 0.0);
        let hand = [ScaleTerms { self_supervised: 1.0, uncertainty: 2.0, triplet: 10.0 }; 4];
        assert_eq!(total_loss(&hand, &cfg).unwrap(), 4.0);
        let plain = TrainConfig { lambda_u: 0.0, lambda_tri: 0.0, ..cfg.clone() };
        let varied: Vec<_> = (0..4)
            .map(|i| ScaleTerms { self_supervised: i as f64, uncertainty: 3.0, triplet: 7.0 })
            .collect();
        assert_eq!(total_loss(&varied, &plain).unwrap(), 1.5);
        assert!(total_loss(&hand[..3], &cfg).is_err());

        let t = Tape::new();
        let c = |v: f64| t.constant(Tensor::scalar(v));
        let tuples = [(c(1.0), c(2.0), c(10.0)); 4];
        assert_eq!(t.value(t.total_loss(&tuples, &cfg)).item(), 4.0);
    }

    #[test]
    fn lr_schedule_drops_for_final_epochs() {
        let cfg = TrainConfig { lr: 1e-4, epochs: 20, lr_drop_epochs: 5, batch: 12, ..TrainConfig::default() };
        let total = cfg.total_steps(120);
        assert_eq!(total, 200);
        assert_eq!(cfg.lr_at(149, total), 1e-4);
        assert_eq!(cfg.lr_at(150, total), 1e-5);
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let err = TrainConfig::from_toml("lamda_u = 1.0").unwrap_err();
        assert!(err.to_string().contains("lamda_u"), "{err}");
        let partial = TrainConfig::from_toml("lr = 0.5\n[flow]\nkind = \"oracle\"\nnoise_std = 0.5\n").unwrap();
        assert_eq!(partial.lr, 0.5);
        assert_eq!(partial.flow, FlowSource::Oracle { noise_std: 0.5 });
    }

    #[test]
    fn report_items_sum_to_total_and_zero_lr_freezes() {
        let (mut state, data, cfg) = tiny_setup(1, true);
        let before = state.models.store.clone();
        let provider = FlowProvider::new(cfg.flow.clone());
        let r = train_step(&mut state, &data[..2], &cfg, &provider, 0.0).unwrap();
        assert_eq!(state.models.store, before);
        assert!((r.itemised_total(&cfg) - r.total).abs() < 1e-6);
        assert_eq!(r.scales.len(), 4);
        assert_eq!(provider.calls(), 2);
        let r = train_step(&mut state, &data[1..3], &cfg, &provider, 1e-3).unwrap();
        assert!((r.itemised_total(&cfg) - r.total).abs() < 1e-6);
        assert_ne!(state.models.store, before);
    }

    #[test]
    fn ablation_never_asks_for_flow() {
        let (mut state, data, cfg) = tiny_setup(2, false);
        let provider = FlowProvider::new(cfg.flow.clone());
        let r = train_step(&mut state, &data[..1], &cfg, &provider, 1e-3).unwrap();
        assert_eq!(provider.calls(), 0);
        assert!(r.scales.iter().all(|s| s.triplet == 0.0));
        assert_eq!(r.motion_fraction, 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let (mut state, data, cfg) = tiny_setup(3, true);
            let cfg = TrainConfig { steps: Some(3), ..cfg };
            let provider = FlowProvider::new(cfg.flow.clone());
            let mut log = CsvLog::new(Vec::new(), 4).unwrap();
            train(&mut state, &data, &cfg, &provider, &mut log).unwrap();
            (log.into_inner(), state.models.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,lr,s0_photometric"));
    }

    #[test]
    fn non_finite_term_is_named() {
        let (mut state, data, cfg) = tiny_setup(4, false);
        let id = state.models.store.find("student.bin_logits").unwrap();
        state.models.store.get_mut(id).data_mut()[0] = f64::NAN;
        let provider = FlowProvider::new(cfg.flow.clone());
        let err = train_step(&mut state, &data[..1], &cfg, &provider, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(err.to_string().contains("scale0."), "{err}");
    }

    #[test]
    fn consistency_terms_leave_teacher_parameters_untouched() {
        let (state, data, cfg) = tiny_setup(5, true);
        let t = Tape::new();
        let p = state.models.store.bind(&t);
        let provider = FlowProvider::new(cfg.flow.clone());
        let g = sample_graph(&t, &p, &state.models, &data[0], &cfg, &provider, &mut RngState::new(0)).unwrap();
        let cons = g.scales[1..].iter().fold(g.scales[0][1], |acc, v| t.add(acc, v[1]));
        let grads = t.backward(cons);
        let mut student_grad = 0.0;
        for (param, &var) in state.models.store.params().iter().zip(p.vars()) {
            let gmax = grads.get(var).map_or(0.0, |g| g.max_abs());
            if param.name.starts_with("teacher.") {
                assert_eq!(gmax, 0.0, "{}", param.name);
            } else {
                student_grad += gmax;
            }
        }
        assert!(student_grad > 0.0);
    }
}
