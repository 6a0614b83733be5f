//! Trains a few steps, checkpoints, resumes, and shows that the resumed run
//! continues exactly where an uninterrupted one would be.

use selfdepth::data::{SceneConfig, SyntheticSequence};
use selfdepth::networks::{FlowProvider, ModelConfig, Models};
use selfdepth::train::{epoch_order, train, train_step, Checkpoint, LossReport, TrainConfig, TrainHook, TrainState};

#[derive(Default)]
struct Losses(Vec<f64>);

impl TrainHook for Losses {
    fn on_step(&mut self, _: &TrainState, r: &LossReport) -> selfdepth::Result<()> {
        self.0.push(r.total);
        Ok(())
    }
}

fn main() -> selfdepth::Result<()> {
    let scene = SceneConfig { width: 64, height: 32, frames: 8, ..SceneConfig::moving_box(0) };
    let seq = SyntheticSequence::new(&scene)?;
    let data: Vec<_> = seq.sample_indices().map(|i| seq.sample(i)).collect::<Result<_, _>>()?;
    let model = ModelConfig { width: 64, height: 32, ..ModelConfig::desk() };
    let cfg = TrainConfig { steps: Some(6), ..TrainConfig::desk() };
    let flow = FlowProvider::new(cfg.flow.clone());

    let mut straight = TrainState::new(Models::new(&model, 0)?, &cfg);
    let mut all = Losses::default();
    train(&mut straight, &data, &cfg, &flow, &mut all)?;

    // the first half by hand, on the full run's batch order and lr schedule
    let mut first = TrainState::new(Models::new(&model, 0)?, &cfg);
    let total = cfg.total_steps(data.len());
    for step in 0..3 {
        let i = epoch_order(data.len(), cfg.seed, (step / data.len()) as u64)[step % data.len()];
        train_step(&mut first, std::slice::from_ref(&data[i]), &cfg, &flow, cfg.lr_at(step, total))?;
    }
    let path = std::env::temp_dir().join("selfdepth-example.ckpt");
    Checkpoint::capture(&first.models, &first.adam, first.step, "example").save(&path)?;

    let mut resumed = TrainState::from_checkpoint(&Checkpoint::load(&path)?, &cfg)?;
    let mut rest = Losses::default();
    train(&mut resumed, &data, &cfg, &flow, &mut rest)?;
    println!("uninterrupted: {:?}", all.0);
    println!("resumed tail:  {:?}", rest.0);
    Ok(())
}
