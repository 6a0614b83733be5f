//! The experiment commands behind the `selfdepth` binary.
//!
//! Settings resolve as command-line flag > config file > built-in default.
//! Every command writes `<command>.manifest.toml` into its output directory
//! before doing any work and refuses to replace a manifest that records a
//! different run.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::consistency::{argmin_depth, inconsistency_mask};
use crate::data::{FrameSample, KittiSequence, SceneConfig, SyntheticSequence};
use crate::error::{ensure, Error, Result};
use crate::geometry::{rigid_flow, DepthMap};
use crate::image::ImageGrid;
use crate::motion::flow_difference_mask;
use crate::networks::{pose_forward, predict_depth, student_forward, teacher_forward, FlowProvider, ModelConfig, Models};
use crate::odom::{ate, plot_trajectories, segment_errors, umeyama, write_kitti_poses, accumulate, read_kitti_poses, SegmentConfig, Trajectory};
use crate::rng::RngState;
use crate::tensor::{Mask, Tensor};
use crate::train::{
    config_hash, train, Checkpoint, CsvLog, DepthEvaluator, DepthMetrics, EvalConfig, LossReport, TrainConfig, TrainHook,
    TrainState,
};

/// Environment variable consulted for the data root when `--data-root` is
/// not given.
pub const DATA_ROOT_ENV: &str = "SELFDEPTH_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        scene: SceneConfig,
    },
    /// A KITTI raw split under the data root. `gt_poses` holds one KITTI
    /// pose line per split entry and is needed by `eval-odom`.
    Kitti {
        split: String,
        #[serde(default)]
        gt_poses: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { scene: SceneConfig::moving_box(0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data_root: Option<PathBuf>,
    /// Steps between checkpoint saves while training.
    pub checkpoint_every: usize,
    /// Index into the dataset's samples used by `render-masks`.
    pub sample: usize,
    pub data: DataSource,
    /// Taken from the checkpoint when absent and one is given, otherwise
    /// [`ModelConfig::desk`].
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub odometry: SegmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            data_root: None,
            checkpoint_every: 500,
            sample: 0,
            data: DataSource::default(),
            model: None,
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            odometry: SegmentConfig { lengths: vec![2.0, 4.0, 6.0, 8.0], step: 1 },
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    /// Sets the training seed and, for synthetic data, the scene seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    /// Also clears `train.steps` unless `steps` is given too.
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub motion: Option<bool>,
    pub sample: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// SHA-256 of the resolved TOML without `out`, so the same experiment
    /// written to two directories carries the same hash.
    pub fn hash(&self) -> String {
        config_hash(&RunConfig { out: PathBuf::new(), ..self.clone() }.to_toml())
    }

    pub fn resolve(ov: &Overrides) -> Result<Self> {
        let mut cfg = match &ov.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = ov.seed {
            cfg.train.seed = seed;
            if let DataSource::Synthetic { scene } = &mut cfg.data {
                scene.seed = seed;
            }
        }
        if let Some(out) = &ov.out {
            cfg.out = out.clone();
        }
        if let Some(root) = &ov.data_root {
            cfg.data_root = Some(root.clone());
        }
        if let Some(e) = ov.epochs {
            cfg.train.epochs = e;
            cfg.train.steps = None;
            cfg.train.lr_drop_epochs = cfg.train.lr_drop_epochs.min(e);
        }
        if let Some(s) = ov.steps {
            cfg.train.steps = Some(s);
        }
        if let Some(lr) = ov.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = ov.batch {
            cfg.train.batch = b;
        }
        if let Some(m) = ov.motion {
            cfg.train.motion = m;
        }
        if let Some(s) = ov.sample {
            cfg.sample = s;
        }
        cfg.train.validate()?;
        if let Some(m) = &cfg.model {
            m.validate()?;
        }
        Ok(cfg)
    }

    fn dataset_id(&self) -> String {
        match &self.data {
            DataSource::Synthetic { scene } => format!("synthetic:{}", &config_hash(&scene.to_toml())[..16]),
            DataSource::Kitti { split, .. } => {
                let root = self.data_root.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
                format!("kitti:{root}:{split}")
            }
        }
    }

    fn root(&self) -> Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| {
            Error::Config(format!("KITTI data needs a data root: pass --data-root, set {DATA_ROOT_ENV} or data_root"))
        })
    }
}

/// What a command was run with and what it wrote. Holds no timestamps, so
/// reruns with the same inputs produce the same file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub dataset: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&str]) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.train.seed,
            dataset: cfg.dataset_id(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn path(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}.manifest.toml"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::path(dir, &self.command);
        let text = toml::to_string(self).expect("manifest serialises");
        if path.exists() {
            let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            ensure!(
                old == text,
                "refusing to overwrite {}: it records a different run; choose another --out",
                path.display()
            );
            return Ok(path);
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Samples plus, when known, the frames in order and the camera trajectory.
struct Dataset {
    samples: Vec<FrameSample>,
    frames: Vec<ImageGrid>,
    trajectory: Option<Trajectory>,
}

fn load_dataset(cfg: &RunConfig, model: &ModelConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic { scene } => {
            ensure!(
                (scene.height, scene.width) == (model.height, model.width),
                "scene is {}x{} but the model expects {}x{}",
                scene.height,
                scene.width,
                model.height,
                model.width
            );
            let seq = SyntheticSequence::new(scene)?;
            let samples = seq.sample_indices().map(|i| seq.sample(i)).collect::<Result<Vec<_>>>()?;
            let frames = seq.frames.iter().map(|f| f.image.clone()).collect();
            let trajectory = Some(Trajectory::new(seq.scene.trajectory.clone())?);
            Ok(Dataset { samples, frames, trajectory })
        }
        DataSource::Kitti { split, gt_poses } => {
            let root = cfg.root()?;
            let samples = KittiSequence::open(root, split, model.width, model.height)?.collect::<Result<Vec<_>>>()?;
            let frames = samples.iter().map(|s| s.target.clone()).collect();
            let trajectory = gt_poses.as_ref().map(|p| read_kitti_poses(&root.join(p))).transpose()?;
            Ok(Dataset { samples, frames, trajectory })
        }
    }
}

/// Loads the checkpoint and checks it against an explicit `[model]`.
fn load_models(cfg: &RunConfig, checkpoint: &Path) -> Result<Models> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(m) = &cfg.model {
        if *m != ck.model_config {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different [model] than the config",
                checkpoint.display()
            )));
        }
    }
    ck.models()
}

fn require_checkpoint<'a>(command: &str, checkpoint: Option<&'a Path>) -> Result<&'a Path> {
    checkpoint.ok_or_else(|| Error::Config(format!("{command} needs --checkpoint")))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub manifest: PathBuf,
}

struct RunHook {
    csv: CsvLog<fs::File>,
    every: usize,
    path: PathBuf,
    hash: String,
    last_loss: Option<f64>,
}

impl TrainHook for RunHook {
    fn on_step(&mut self, state: &TrainState, report: &LossReport) -> Result<()> {
        self.csv.on_step(state, report)?;
        self.last_loss = Some(report.total);
        if self.every > 0 && state.step as usize % self.every == 0 {
            Checkpoint::capture(&state.models, &state.adam, state.step, &self.hash).save(&self.path)?;
        }
        Ok(())
    }
}

/// Trains from scratch or resumes from `checkpoint`. Writes
/// `train.manifest.toml`, `config.toml`, `loss.csv` (from the first step run
/// here) and `checkpoint.ckpt`.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    let out = &cfg.out;
    let resumed = checkpoint.map(Checkpoint::load).transpose()?;
    let model = match (&cfg.model, &resumed) {
        (Some(m), Some(ck)) if *m != ck.model_config => {
            return Err(Error::Config("checkpoint was trained with a different [model] than the config".into()))
        }
        (Some(m), _) => m.clone(),
        (None, Some(ck)) => ck.model_config.clone(),
        (None, None) => ModelConfig::desk(),
    };
    model.validate()?;
    cfg.train.validate()?;
    let inputs: Vec<&Path> = checkpoint.into_iter().collect();
    let manifest = RunManifest::new("train", cfg, &inputs, &["config.toml", "loss.csv", "checkpoint.ckpt"]).write(out)?;
    let config_path = out.join("config.toml");
    let resolved = RunConfig { model: Some(model.clone()), ..cfg.clone() };
    fs::write(&config_path, resolved.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let data = load_dataset(cfg, &model)?;
    let mut state = match &resumed {
        Some(ck) => TrainState::from_checkpoint(ck, &cfg.train)?,
        None => TrainState::new(Models::new(&model, cfg.train.seed)?, &cfg.train),
    };
    let hash = cfg.hash();
    let ck_path = out.join("checkpoint.ckpt");
    let loss_csv = out.join("loss.csv");
    let mut hook = RunHook {
        csv: CsvLog::create(&loss_csv, cfg.train.scales)?,
        every: cfg.checkpoint_every,
        path: ck_path.clone(),
        hash: hash.clone(),
        last_loss: None,
    };
    let flow = FlowProvider::new(cfg.train.flow.clone());
    train(&mut state, &data.samples, &cfg.train, &flow, &mut hook)?;
    Checkpoint::capture(&state.models, &state.adam, state.step, &hash).save(&ck_path)?;
    Ok(TrainOutcome { steps: state.step, last_loss: hook.last_loss, checkpoint: ck_path, loss_csv, manifest })
}

/// Seven-column depth metrics over the configured dataset, written to
/// `depth_metrics.csv`. With `gt_as_prediction` the ground truth is scored
/// against itself and no checkpoint is needed.
pub fn cmd_eval_depth(cfg: &RunConfig, checkpoint: Option<&Path>, gt_as_prediction: bool) -> Result<DepthMetrics> {
    let models = if gt_as_prediction {
        None
    } else {
        Some(load_models(cfg, require_checkpoint("eval-depth", checkpoint)?)?)
    };
    let model = models.as_ref().map(|m| m.config.clone()).or_else(|| cfg.model.clone()).unwrap_or_else(ModelConfig::desk);
    let inputs: Vec<&Path> = checkpoint.into_iter().collect();
    RunManifest::new("eval-depth", cfg, &inputs, &["depth_metrics.csv"]).write(&cfg.out)?;
    let data = load_dataset(cfg, &model)?;
    let mut ev = DepthEvaluator::new(cfg.eval);
    for s in &data.samples {
        let gt = s
            .depth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("sample {} has no ground-truth depth", s.id)))?;
        let pred = match &models {
            Some(m) => predict_depth(m, &s.target, &s.prev, &s.intrinsics)?,
            None => gt.clone(),
        };
        ev.add(&pred, gt, s.depth_valid.as_ref(), None)?;
    }
    let metrics = ev.finish()?;
    let row = metrics.values().iter().map(|v| v.to_string()).collect();
    write_csv(&cfg.out.join("depth_metrics.csv"), &DepthMetrics::COLUMNS, &[row])?;
    Ok(metrics)
}

pub fn format_metrics_table(m: &DepthMetrics) -> String {
    let head: Vec<String> = DepthMetrics::COLUMNS.iter().map(|c| format!("{c:>9}")).collect();
    let vals: Vec<String> = m.values().iter().map(|v| format!("{v:>9.4}")).collect();
    format!("{}\n{}\n", head.join(" "), vals.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdomReport {
    /// `None` when the trajectory is shorter than every segment length.
    pub e_t: Option<f64>,
    pub e_r: Option<f64>,
    pub segments: usize,
    pub ate: f64,
}

/// Chains pose-network motions between consecutive frames, aligns the result
/// to the ground truth with a similarity transform and scores it. Writes
/// `pred_poses.txt`, `gt_poses.txt`, `trajectory.png` and
/// `odom_metrics.csv`.
pub fn cmd_eval_odom(cfg: &RunConfig, checkpoint: Option<&Path>, gt_as_prediction: bool) -> Result<OdomReport> {
    let models = if gt_as_prediction {
        None
    } else {
        Some(load_models(cfg, require_checkpoint("eval-odom", checkpoint)?)?)
    };
    let model = models.as_ref().map(|m| m.config.clone()).or_else(|| cfg.model.clone()).unwrap_or_else(ModelConfig::desk);
    let inputs: Vec<&Path> = checkpoint.into_iter().collect();
    let files = ["pred_poses.txt", "gt_poses.txt", "trajectory.png", "odom_metrics.csv"];
    RunManifest::new("eval-odom", cfg, &inputs, &files).write(&cfg.out)?;
    let data = load_dataset(cfg, &model)?;
    let gt = data
        .trajectory
        .ok_or_else(|| Error::Config("eval-odom needs ground-truth poses (data.gt_poses for KITTI)".into()))?;
    ensure!(
        gt.len() == data.frames.len(),
        "{} ground-truth poses for {} frames",
        gt.len(),
        data.frames.len()
    );
    let pred = match &models {
        Some(m) => {
            let rel = data
                .frames
                .windows(2)
                .map(|w| pose_forward(m, &w[1], &w[0]))
                .collect::<Result<Vec<_>>>()?;
            accumulate(&rel)?
        }
        None => gt.clone(),
    };
    let report = odometry_metrics(&pred, &gt, &cfg.odometry)?;
    write_kitti_poses(&cfg.out.join(files[0]), &pred)?;
    write_kitti_poses(&cfg.out.join(files[1]), &gt)?;
    plot_trajectories(&cfg.out.join(files[2]), &pred, &gt, 512)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    write_csv(
        &cfg.out.join(files[3]),
        &["e_t", "e_r", "ate", "segments"],
        &[vec![opt(report.e_t), opt(report.e_r), report.ate.to_string(), report.segments.to_string()]],
    )?;
    Ok(report)
}

/// ATE, and segment errors of `pred` after the same similarity alignment.
pub fn odometry_metrics(pred: &Trajectory, gt: &Trajectory, seg: &SegmentConfig) -> Result<OdomReport> {
    let sim = umeyama(&pred.positions(), &gt.positions())?;
    let errs = segment_errors(&pred.aligned(&sim), gt, seg)?;
    Ok(OdomReport {
        e_t: errs.map(|e| e.e_t),
        e_r: errs.map(|e| e.e_r),
        segments: errs.map_or(0, |e| e.segments),
        ate: ate(pred, gt)?,
    })
}

/// Statistics of the maps written by [`cmd_render_masks`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskSummary {
    pub sample: String,
    pub inconsistent_fraction: f64,
    /// `None` when no optical flow is available for the sample.
    pub motion_fraction: Option<f64>,
    pub uncertain_fraction: f64,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
    pub depth_diff_max: f64,
    pub files: Vec<String>,
}

/// Renders M, M_flow, M_u, σ² and |D_pre − D_post| for one sample as PNGs
/// sharing one colour map (its legend is `legend.png` and a strip under
/// every map), plus `masks.toml` with the statistics.
pub fn cmd_render_masks(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<MaskSummary> {
    let ck = require_checkpoint("render-masks", checkpoint)?;
    let models = load_models(cfg, ck)?;
    let names = ["m.png", "m_flow.png", "m_u.png", "sigma2.png", "depth_diff.png", "legend.png", "masks.toml"];
    RunManifest::new("render-masks", cfg, &[ck], &names).write(&cfg.out)?;
    let data = load_dataset(cfg, &models.config)?;
    let s = data.samples.get(cfg.sample).ok_or_else(|| {
        Error::Config(format!("sample {} out of range ({} samples)", cfg.sample, data.samples.len()))
    })?;
    let (h, w) = (s.height(), s.width());
    let teacher = teacher_forward(&models, &s.target)?.finest().clone();
    let pose = pose_forward(&models, &s.target, &s.prev)?;
    let pred = student_forward(&models, &s.target, &s.prev, &pose, &s.intrinsics)?;
    let d_cv = upsample(argmin_depth(&pred.cost_volume).into_tensor(), h, w);
    let m = inconsistency_mask(&DepthMap::new(d_cv)?, &teacher)?;

    let flow = FlowProvider::new(cfg.train.flow.clone());
    let mut rng = RngState::with_stream(cfg.train.seed, 0x4e5d);
    let m_flow = match flow.provide(s, &mut rng) {
        Ok(f) => Some(flow_difference_mask(&f, &rigid_flow(&teacher, &pose, &s.intrinsics)?, &cfg.train.flow_mask)?.0),
        Err(e) => {
            log::warn!("no optical flow for {}: {e}; M_flow is left blank", s.id);
            None
        }
    };
    let m_u = &pred.uncertainty_mask;
    let sigma2 = pred.variance.tensor();
    let diff: Vec<f64> = pred
        .depth_pre
        .tensor()
        .data()
        .iter()
        .zip(pred.depth_post.tensor().data())
        .map(|(a, b)| (a - b).abs())
        .collect();

    let out = &cfg.out;
    let mask_vals = |m: &Mask| m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    save_map(&out.join(names[0]), &mask_vals(&m), h, w)?;
    let blank = Mask::filled(h, w, false);
    save_map(&out.join(names[1]), &mask_vals(m_flow.as_ref().unwrap_or(&blank)), h, w)?;
    save_map(&out.join(names[2]), &mask_vals(m_u), h, w)?;
    let log_s: Vec<f64> = sigma2.data().iter().map(|v| v.ln()).collect();
    save_map(&out.join(names[3]), &normalise(&log_s), h, w)?;
    save_map(&out.join(names[4]), &normalise(&diff), h, w)?;
    let legend: Vec<f64> = (0..16 * 256).map(|i| (i % 256) as f64 / 255.0).collect();
    save_map(&out.join(names[5]), &legend, 16, 256)?;

    let (lo, hi) = sigma2.data().iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let summary = MaskSummary {
        sample: s.id.clone(),
        inconsistent_fraction: m.fraction(),
        motion_fraction: m_flow.as_ref().map(Mask::fraction),
        uncertain_fraction: m_u.fraction(),
        sigma2_min: lo,
        sigma2_max: hi,
        depth_diff_max: diff.iter().copied().fold(0.0, f64::max),
        files: names.iter().map(|n| n.to_string()).collect(),
    };
    let path = out.join(names[6]);
    fs::write(&path, toml::to_string(&summary).expect("summary serialises")).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn upsample(t: Tensor, h: usize, w: usize) -> Tensor {
    let tape = Tape::new();
    let v = tape.resize_nearest(tape.constant(t), h, w);
    (*tape.value(v)).clone()
}

/// Affine map of `v` onto [0, 1]; constant input maps to 0.
fn normalise(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    v.iter().map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
}

/// Dark blue through red to pale yellow.
fn colour(x: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.1],
        [0.25, 0.05, 0.45],
        [0.7, 0.15, 0.35],
        [0.98, 0.55, 0.1],
        [0.99, 0.99, 0.75],
    ];
    let x = x.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Writes `values` (in [0, 1], row-major `h × w`) with a legend strip below.
fn save_map(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    const STRIP: usize = 6;
    let mut img = RgbImage::new(w as u32, (h + STRIP) as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, colour(values[y * w + x]));
        }
    }
    for y in h..h + STRIP {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, colour(x as f64 / (w.max(2) - 1) as f64));
        }
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        let scene = SceneConfig { width: 32, height: 16, frames: 6, ..SceneConfig::moving_box(1) };
        RunConfig {
            out: dir.to_path_buf(),
            data: DataSource::Synthetic { scene },
            model: Some(ModelConfig { height: 16, width: 32, ..ModelConfig::desk() }),
            train: TrainConfig { steps: Some(2), ..TrainConfig::desk() },
            odometry: SegmentConfig { lengths: vec![0.5, 1.0], step: 1 },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let err = RunConfig::from_toml("[train]\nlamda_u = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("lamda_u"), "{err}");
        let kitti = "[data]\nkind = \"kitti\"\nsplit = \"eigen\"\n";
        assert!(matches!(RunConfig::from_toml(kitti).unwrap().data, DataSource::Kitti { .. }));
    }

    #[test]
    fn flags_beat_config_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "out = \"from-config\"\n[train]\nlr = 0.5\nbatch = 3\n").unwrap();
        let ov = Overrides { config: Some(path), lr: Some(0.25), seed: Some(9), ..Overrides::default() };
        let cfg = RunConfig::resolve(&ov).unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.train.batch, 3);
        assert_eq!(cfg.out, PathBuf::from("from-config"));
        assert_eq!(cfg.train.lambda_u, 1.0);
        assert_eq!(cfg.train.seed, 9);
        assert!(matches!(cfg.data, DataSource::Synthetic { ref scene } if scene.seed == 9));
        let zero = RunConfig::resolve(&Overrides { epochs: Some(0), ..Overrides::default() }).unwrap();
        assert_eq!(zero.train.steps, None);
    }

    #[test]
    fn manifest_is_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let a = RunManifest::new("x", &cfg, &[], &["a"]);
        a.write(dir.path()).unwrap();
        a.write(dir.path()).unwrap();
        let b = RunManifest::new("x", &cfg, &[], &["b"]);
        assert!(b.write(dir.path()).unwrap_err().to_string().contains("refusing"));
        assert_eq!(RunManifest::read(&RunManifest::path(dir.path(), "x")).unwrap(), a);
    }

    #[test]
    fn colour_map_ends() {
        assert_eq!(colour(0.0), Rgb([0, 0, 26]));
        assert_eq!(colour(1.0), Rgb([252, 252, 191]));
        assert_eq!(normalise(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(normalise(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn kitti_without_root_is_a_config_error() {
        let cfg = RunConfig { data: DataSource::Kitti { split: "s".into(), gt_poses: None }, ..RunConfig::default() };
        let err = load_dataset(&cfg, &ModelConfig::desk()).err().unwrap();
        assert!(err.to_string().contains(DATA_ROOT_ENV));
    }
}
