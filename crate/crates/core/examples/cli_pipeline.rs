//! Runs the four `selfdepth` commands through the library on a tiny scene:
//! train, eval-depth, eval-odom and render-masks.

use selfdepth::cli::{cmd_eval_depth, cmd_eval_odom, cmd_render_masks, cmd_train, format_metrics_table, DataSource, RunConfig};
use selfdepth::data::SceneConfig;
use selfdepth::networks::ModelConfig;
use selfdepth::odom::SegmentConfig;
use selfdepth::train::TrainConfig;

fn main() -> selfdepth::Result<()> {
    let out = std::env::temp_dir().join(format!("selfdepth-cli-{}", std::process::id()));
    let scene = SceneConfig { width: 64, height: 32, frames: 12, ..SceneConfig::moving_box(0) };
    let base = RunConfig {
        data: DataSource::Synthetic { scene },
        model: Some(ModelConfig { width: 64, height: 32, ..ModelConfig::desk() }),
        train: TrainConfig { steps: Some(20), ..TrainConfig::desk() },
        odometry: SegmentConfig { lengths: vec![1.0, 2.0], step: 1 },
        ..RunConfig::default()
    };
    let with_out = |dir: &str| RunConfig { out: out.join(dir), ..base.clone() };

    let trained = cmd_train(&with_out("train"), None)?;
    println!("trained {} steps, final loss {:.4}", trained.steps, trained.last_loss.unwrap_or(f64::NAN));
    let ck = Some(trained.checkpoint.as_path());
    print!("{}", format_metrics_table(&cmd_eval_depth(&with_out("depth"), ck, false)?));
    let odom = cmd_eval_odom(&with_out("odom"), ck, false)?;
    println!("ATE {:.3} m, e_t {:?}", odom.ate, odom.e_t);
    let masks = cmd_render_masks(&with_out("masks"), ck)?;
    println!("masks: M {:.3}, M_u {:.3}", masks.inconsistent_fraction, masks.uncertain_fraction);
    println!("outputs under {}", out.display());
    Ok(())
}
