//! Warps the previous synthetic frame into the target view with ground-truth
//! depth and pose, and compares the result with the real target.

use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::geometry::synthesize_view;
use selfdepth::photometric::{photometric_error, PhotometricConfig};

fn main() -> selfdepth::Result<()> {
    let seq = SyntheticSequence::new(&SceneConfig::textured(0))?;
    let s = seq.sample(10)?;
    let depth = s.depth.as_ref().expect("synthetic depth");
    let pose = s.pose_prev.expect("synthetic pose");
    let (warped, valid) = synthesize_view(&s.prev, depth, &pose, &s.intrinsics)?;

    let cfg = PhotometricConfig::default();
    let warped_err = photometric_error(&warped, &s.target, &cfg)?;
    let raw_err = photometric_error(&s.prev, &s.target, &cfg)?;
    println!("valid warp pixels: {:.1}%", 100.0 * valid.fraction());
    println!("photometric error, unwarped source: {:.4}", raw_err.mean());
    println!("photometric error, warped source:   {:.4}", warped_err.mean());
    Ok(())
}
