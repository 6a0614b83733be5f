//! Trains on the low-texture scene and compares the predicted variance σ²
//! on flat and textured pixels.
//!
//! ```text
//! cargo run --release --example uncertainty_low_texture -- [steps] [seeds] [first seed]
//! ```

use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::networks::{pose_forward, student_forward, FlowProvider, ModelConfig, Models};
use selfdepth::train::{train, TrainConfig, TrainState};

fn main() -> selfdepth::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|a| a.parse().ok()).unwrap_or(600);
    let seeds: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let first: u64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0);

    for seed in first..first + seeds {
        let seq = SyntheticSequence::new(&SceneConfig::low_texture(seed))?;
        let data: Vec<_> = seq.sample_indices().map(|i| seq.sample(i)).collect::<Result<_, _>>()?;
        let cfg = TrainConfig { seed, steps: Some(steps), motion: false, ..TrainConfig::desk() };
        let mut state = TrainState::new(Models::new(&ModelConfig::desk(), seed)?, &cfg);
        train(&mut state, &data, &cfg, &FlowProvider::new(cfg.flow.clone()), &mut ())?;

        let (mut flat, mut textured) = ((0.0, 0usize), (0.0, 0usize));
        for s in data.iter().step_by(4) {
            let pose = pose_forward(&state.models, &s.target, &s.prev)?;
            let pred = student_forward(&state.models, &s.target, &s.prev, &pose, &s.intrinsics)?;
            let is_flat = s.flat_mask.as_ref().expect("synthetic samples carry a flat mask");
            for (&v, &f) in pred.variance.tensor().data().iter().zip(is_flat.bits()) {
                let acc = if f { &mut flat } else { &mut textured };
                acc.0 += v;
                acc.1 += 1;
            }
        }
        let (f, t) = (flat.0 / flat.1 as f64, textured.0 / textured.1 as f64);
        println!("seed {seed}: mean σ² flat {f:.5}  textured {t:.5}  ratio {:.3}", f / t);
    }
    Ok(())
}
