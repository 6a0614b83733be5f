use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfdepth::cli::{self, Overrides, RunConfig, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "selfdepth", version, about = "Self-supervised monocular depth and odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume from --checkpoint)
    Train(Common),
    /// Depth metrics of a checkpoint
    EvalDepth {
        #[command(flatten)]
        common: Common,
        /// Score the ground truth against itself
        #[arg(long)]
        gt_as_prediction: bool,
    },
    /// Trajectory metrics of a checkpoint's pose network
    EvalOdom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gt_as_prediction: bool,
    },
    /// Write the masks, variance and refinement maps of one sample as PNGs
    RenderMasks(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Enable or disable the motion-aware terms
    #[arg(long)]
    motion: Option<bool>,
    /// Sample index for render-masks
    #[arg(long)]
    sample: Option<usize>,
}

impl Common {
    fn resolve(&self) -> selfdepth::Result<RunConfig> {
        RunConfig::resolve(&Overrides {
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            data_root: self.data_root.clone(),
            epochs: self.epochs,
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            motion: self.motion,
            sample: self.sample,
        })
    }
}

fn run(cmd: Command) -> selfdepth::Result<()> {
    match cmd {
        Command::Train(c) => {
            let out = cli::cmd_train(&c.resolve()?, c.checkpoint.as_deref())?;
            match out.last_loss {
                Some(l) => println!("step {} loss {l:.4}", out.steps),
                None => println!("step {}", out.steps),
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::EvalDepth { common: c, gt_as_prediction } => {
            let m = cli::cmd_eval_depth(&c.resolve()?, c.checkpoint.as_deref(), gt_as_prediction)?;
            print!("{}", cli::format_metrics_table(&m));
        }
        Command::EvalOdom { common: c, gt_as_prediction } => {
            let r = cli::cmd_eval_odom(&c.resolve()?, c.checkpoint.as_deref(), gt_as_prediction)?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("t_err {}  r_err {}  ate {:.4}  segments {}", show(r.e_t), show(r.e_r), r.ate, r.segments);
        }
        Command::RenderMasks(c) => {
            let cfg = c.resolve()?;
            let s = cli::cmd_render_masks(&cfg, c.checkpoint.as_deref())?;
            println!(
                "{}: M {:.3}  M_u {:.3}  M_flow {}  -> {}",
                s.sample,
                s.inconsistent_fraction,
                s.uncertain_fraction,
                s.motion_fraction.map_or("n/a".to_string(), |f| format!("{f:.3}")),
                cfg.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
