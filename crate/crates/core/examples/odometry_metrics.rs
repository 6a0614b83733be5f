//! Accumulates a noisy copy of the synthetic camera motion and scores it
//! against the ground truth.

use selfdepth::camera::PoseSE3;
use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::odom::{accumulate, ate, relatives, segment_errors, SegmentConfig, Trajectory};
use selfdepth::rng::RngState;

fn main() -> selfdepth::Result<()> {
    let seq = SyntheticSequence::new(&SceneConfig { yaw_per_frame: 0.01, ..SceneConfig::textured(0) })?;
    let gt = Trajectory::new(seq.scene.trajectory.clone())?;
    let mut rng = RngState::new(1);
    let noisy: Vec<PoseSE3> = relatives(&gt)
        .into_iter()
        .map(|r| {
            let jitter = PoseSE3::from_axis_angle([0.0, 0.002 * rng.normal(), 0.0], [0.02 * rng.normal(), 0.0, 0.02 * rng.normal()]);
            r.compose(&jitter)
        })
        .collect();
    // a monocular estimate: right shape, wrong scale
    let pred = accumulate(&noisy)?;
    let pred = Trajectory::new(
        pred.poses().iter().map(|p| PoseSE3 { rotation: p.rotation, translation: p.translation * 0.3 }).collect(),
    )?;
    println!("ATE after similarity alignment: {:.4} m", ate(&pred, &gt)?);
    let seg = SegmentConfig { lengths: vec![2.0, 4.0, 8.0], step: 1 };
    let aligned = pred.aligned(&selfdepth::odom::umeyama(&pred.positions(), &gt.positions())?);
    match segment_errors(&aligned, &gt, &seg)? {
        Some(e) => println!("e_t {:.2}%  e_r {:.3} deg/100m over {} segments", e.e_t, e.e_r, e.segments),
        None => println!("trajectory shorter than every segment length"),
    }
    Ok(())
}
