use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevfuse::commands;

#[derive(Parser)]
#[command(
    name = "bevfuse",
    about = "Camera-radar BEV vehicle segmentation: synthetic data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "num-scenes")]
        num_scenes: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: prints dataset IoU, writes per-scene CSV
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Drop each radar point with this probability before accumulation
        #[arg(long = "radar-dropout", default_value_t = 0.0)]
        radar_dropout: f64,
        /// Feed the radar branch an empty cloud
        #[arg(long = "no-radar")]
        no_radar: bool,
        /// Per-scene CSV destination
        #[arg(long, default_value = "eval_per_scene.csv")]
        out: PathBuf,
    },
    /// Predict the BEV map for one scene file
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay a prediction on a scene's ground truth as a PPM image
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen {
            config,
            out,
            num_scenes,
            seed,
        } => commands::cmd_gen(&config, &out, num_scenes, seed),
        Cmd::Train { config, data, out } => commands::cmd_train(&config, &data, &out),
        Cmd::Eval {
            checkpoint,
            data,
            radar_dropout,
            no_radar,
            out,
        } => commands::cmd_eval(&checkpoint, &data, radar_dropout, no_radar, &out).map(|_| ()),
        Cmd::Infer {
            checkpoint,
            scene,
            out,
        } => commands::cmd_infer(&checkpoint, &scene, &out).map(|_| ()),
        Cmd::Render { scene, pred, out } => commands::cmd_render(&scene, &pred, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
