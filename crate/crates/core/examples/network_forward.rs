//! One forward pass of the teacher, pose and student networks on a
//! synthetic frame, with the shapes and statistics of every output.

use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::networks::{pose_forward, student_forward, teacher_forward, ModelConfig, Models};

fn main() -> selfdepth::Result<()> {
    let models = Models::new(&ModelConfig::desk(), 0)?;
    println!("parameters: {}", models.parameter_count());
    let seq = SyntheticSequence::new(&SceneConfig::moving_box(0))?;
    let s = seq.sample(3)?;

    let teacher = teacher_forward(&models, &s.target)?;
    for (i, d) in teacher.0.iter().enumerate() {
        let v = d.tensor().data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("teacher scale {i}: {}x{}, mean depth {mean:.2} m", d.height(), d.width());
    }
    let pose = pose_forward(&models, &s.target, &s.prev)?;
    println!("pose at initialisation: t = {:?}", pose.translation.as_slice());
    let p = student_forward(&models, &s.target, &s.prev, &pose, &s.intrinsics)?;
    println!(
        "student: {} hypotheses, {} bins, {:.0}% pixels refined, σ² in [{:.2e}, {:.2e}]",
        p.cost_volume.len(),
        p.probs.bins(),
        100.0 * p.uncertainty_mask.fraction(),
        p.variance.tensor().data().iter().copied().fold(f64::INFINITY, f64::min),
        p.variance.tensor().data().iter().copied().fold(0.0, f64::max),
    );
    Ok(())
}
