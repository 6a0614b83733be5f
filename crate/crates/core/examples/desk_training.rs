//! Trains the full pipeline on the moving-box synthetic scene and reports
//! depth accuracy on static and moving pixels as training progresses.
//!
//! ```text
//! cargo run --release --example desk_training -- [steps] [motion: 0|1] [seed] [translation scale]
//! ```

use std::time::Instant;

use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::networks::{FlowProvider, ModelConfig, Models};
use selfdepth::train::{evaluate_samples, train_step, EvalConfig, TrainConfig, TrainState};

fn main() -> selfdepth::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: u64| args.get(i).and_then(|a| a.parse().ok()).unwrap_or(default);
    let (steps, motion, seed) = (arg(0, 2000) as usize, arg(1, 1) == 1, arg(2, 0));

    let seq = SyntheticSequence::new(&SceneConfig::moving_box(seed))?;
    let data: Vec<_> = seq.sample_indices().map(|i| seq.sample(i)).collect::<Result<_, _>>()?;
    let cfg = TrainConfig { motion, seed, steps: Some(steps), ..TrainConfig::desk() };
    let tscale: f64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(ModelConfig::desk().pose_translation_scale);
    let models = Models::new(&ModelConfig { pose_translation_scale: tscale, ..ModelConfig::desk() }, seed)?;
    println!("parameters: {}", models.parameter_count());
    let mut state = TrainState::new(models, &cfg);
    let flow = FlowProvider::new(cfg.flow.clone());
    let eval = EvalConfig::default();

    let start = Instant::now();
    let per_epoch = data.len().div_ceil(cfg.batch);
    for step in 0..steps {
        let order = selfdepth::train::epoch_order(data.len(), seed, (step / per_epoch) as u64);
        let i = order[(step % per_epoch) * cfg.batch];
        let report = train_step(&mut state, std::slice::from_ref(&data[i]), &cfg, &flow, cfg.lr_at(step, steps))?;
        if step % 100 == 0 || step + 1 == steps {
            let probe: Vec<_> = data.iter().step_by(6).cloned().collect();
            let m = evaluate_samples(&state.models, &probe, &eval)?;
            let mut teacher = selfdepth::train::DepthEvaluator::new(eval);
            let mut t_ratio = 0.0;
            for s in &probe {
                let d = selfdepth::networks::teacher_forward(&state.models, &s.target)?;
                teacher.add(d.finest(), s.depth.as_ref().unwrap(), None, s.motion_mask.as_ref().map(|m| m.not()).as_ref())?;
                let p = selfdepth::networks::pose_forward(&state.models, &s.target, &s.prev)?;
                t_ratio += p.translation.norm() / s.pose_prev.unwrap().translation.norm() / probe.len() as f64;
            }
            println!("    teacher static {:.4} |t|/|t_gt| {:.4}", teacher.finish()?.abs_rel, t_ratio);
            println!(
                "step {step:5} {:6.1}s loss {:.4} M {:.3} Mflow {:.3} range [{:.2}, {:.2}] static {:.4} moving {:.4}",
                start.elapsed().as_secs_f64(),
                report.total,
                report.inconsistent_fraction,
                report.motion_fraction,
                state.models.depth_range[0],
                state.models.depth_range[1],
                m.static_pixels.abs_rel,
                m.moving_pixels.map_or(f64::NAN, |m| m.abs_rel),
            );
        }
    }
    Ok(())
}
