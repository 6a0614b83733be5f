//! Rigid flow from ground-truth depth and pose against the renderer's flow,
//! on a static scene and on the moving-box scene.

use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::geometry::rigid_flow;

fn main() -> selfdepth::Result<()> {
    for (name, cfg) in [("static", SceneConfig::textured(0)), ("moving box", SceneConfig::moving_box(0))] {
        let seq = SyntheticSequence::new(&cfg)?;
        let s = seq.sample(5)?;
        let rigid = rigid_flow(s.depth.as_ref().unwrap(), s.pose_prev.as_ref().unwrap(), &s.intrinsics)?;
        let diff = rigid.difference_magnitude(s.flow_prev.as_ref().unwrap());
        let worst = diff.iter().copied().fold(0.0, f64::max);
        let off = diff.iter().filter(|&&d| d > 1e-6).count();
        println!("{name:>10}: max |F_rigid - F| = {worst:.3e} px, {off} pixels disagree");
    }
    Ok(())
}
