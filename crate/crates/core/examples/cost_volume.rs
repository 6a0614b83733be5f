//! Builds a cost volume from raw images with the true pose, reads depth off
//! its argmin and flags pixels that disagree with a corrupted "teacher".

use selfdepth::consistency::{argmin_depth, build_cost_volume, depth_hypotheses, inconsistency_mask};
use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::geometry::DepthMap;
use selfdepth::motion::FeatureMap;

fn main() -> selfdepth::Result<()> {
    let seq = SyntheticSequence::new(&SceneConfig::textured(1))?;
    let s = seq.sample(8)?;
    let gt = s.depth.as_ref().unwrap();
    let hyp = depth_hypotheses(2.0, 60.0, 32)?;
    let feat = |img: &selfdepth::image::ImageGrid| FeatureMap::new(img.tensor().clone());
    let cv = build_cost_volume(&feat(&s.target)?, &feat(&s.prev)?, s.pose_prev.as_ref().unwrap(), &s.intrinsics, &hyp)?;
    let d_cv = argmin_depth(&cv);

    let within = d_cv
        .tensor()
        .data()
        .iter()
        .zip(gt.tensor().data())
        .filter(|(p, g)| (*p / *g - 1.0).abs() < 0.15)
        .count();
    println!("{} hypotheses; argmin within 15% of truth on {:.1}% of pixels", hyp.len(), 100.0 * within as f64 / gt.tensor().len() as f64);

    // a teacher that is three times too far on the left half
    let w = gt.width();
    let teacher = DepthMap::new(selfdepth::tensor::Tensor::from_fn(gt.tensor().shape().to_vec(), |i| {
        gt.tensor().data()[i] * if i % w < w / 2 { 3.0 } else { 1.0 }
    }))?;
    let m = inconsistency_mask(&d_cv, &teacher)?;
    let left = m.bits().iter().enumerate().filter(|(i, &b)| b && i % w < w / 2).count();
    println!("inconsistent pixels: {} ({} on the corrupted half)", m.count(), left);
    Ok(())
}
