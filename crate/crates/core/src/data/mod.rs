//! Training and evaluation samples: the synthetic renderer with full ground
//! truth and a loader for KITTI raw sequences.

mod kitti;
mod synthetic;

pub use kitti::{export_kitti_sequence, load_kitti_sequence, KittiSequence, KITTI_HEIGHT, KITTI_WIDTH};
pub use synthetic::{render_scene, Layer, MovingObject, SceneConfig, SceneVariant, SyntheticScene, SyntheticSequence, Texture};

use crate::camera::{CameraIntrinsics, PoseSE3};
use crate::geometry::{DepthMap, FlowField};
use crate::image::ImageGrid;
use crate::tensor::Mask;

/// A training triplet centred on frame `t`. Ground-truth fields are present
/// for synthetic data and optional for real data.
#[derive(Clone, Debug)]
pub struct FrameSample {
    /// `I_{t−1}`, `I_t`, `I_{t+1}`.
    pub prev: ImageGrid,
    pub target: ImageGrid,
    pub next: ImageGrid,
    pub intrinsics: CameraIntrinsics,
    pub depth: Option<DepthMap>,
    /// Pixels with a ground-truth depth measurement.
    pub depth_valid: Option<Mask>,
    /// `T_{t→t−1}` and `T_{t→t+1}`.
    pub pose_prev: Option<PoseSE3>,
    pub pose_next: Option<PoseSE3>,
    /// `F_{t→t−1}`.
    pub flow_prev: Option<FlowField>,
    pub motion_mask: Option<Mask>,
    /// Pixels showing an untextured surface.
    pub flat_mask: Option<Mask>,
    /// Whether the moving object is at least partly visible at `t`.
    pub object_visible: bool,
    pub id: String,
}

impl FrameSample {
    pub fn height(&self) -> usize {
        self.target.height()
    }

    pub fn width(&self) -> usize {
        self.target.width()
    }
}
