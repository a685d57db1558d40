//! `drive-imitation`: road generation, expert demos, GP fitting and sampling,
//! PPO training, evaluation, log replay and the live-driving server.
//!
//! Exit codes: 0 success, 2 invalid flags or inputs, 1 runtime failure.

mod commands;
mod replay;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drive_imitation::eval::ActionMode;
use drive_imitation::expert::Variable;
use drive_imitation::reward::RewardMode;
use drive_imitation::Error;

#[derive(Parser)]
#[command(name = "drive-imitation", version, about = "Imitate an expert driver's track-position and speed distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML config; defaults to $DRIVE_IMITATION_CONFIG, then built-in values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a track file
    GenerateRoad {
        /// training, desk, alternating_50m, gaussian_spaced or gaussian_batched
        #[arg(long)]
        kind: String,
        /// Loop length in meters (generated kinds only)
        #[arg(long, default_value_t = drive_imitation::track::GENERALIZATION_LENGTH)]
        length: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive the scripted expert from arc length 0 and log every 0.1 s
    CollectExpert {
        /// Track file or id (training, desk, <kind>-<length>-<seed>)
        #[arg(long)]
        track: String,
        #[arg(long, default_value_t = 8)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fit a rational-quadratic GP to one variable of a demo
    FitGp {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        variable: Variable,
        /// Track file or id; defaults to the demo's `# track=` line
        #[arg(long)]
        track: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw trajectories inside the model's 99% band on the 5 m lap grid
    SampleGp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the MDN policy with PPO against the expert-derived reward
    Train(TrainArgs),
    /// Roll out a checkpoint (or the expert) and compare with the expert's GPs
    Evaluate(EvaluateArgs),
    /// Summarize a demo or episode CSV and optionally draw it as SVG
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Track file or id; defaults to the log's `# track=` line
        #[arg(long)]
        track: Option<String>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Serve lockstep live-driving sessions as newline-delimited JSON over TCP
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value = "desk")]
        track: String,
        /// Where recorded demos are written
        #[arg(long, default_value = "demos")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Overrides the config's track
    #[arg(long)]
    track: Option<String>,
    /// Overrides the config's reward mode
    #[arg(long)]
    reward: Option<RewardMode>,
    /// Expert track-position model; fitted from fresh demos when absent
    #[arg(long, requires = "expert_v")]
    expert_d: Option<PathBuf>,
    #[arg(long, requires = "expert_d")]
    expert_v: Option<PathBuf>,
    /// Sample banks for the stochastic reward; drawn from the models when absent
    #[arg(long, requires = "samples_v")]
    samples_d: Option<PathBuf>,
    #[arg(long, requires = "samples_d")]
    samples_v: Option<PathBuf>,
    /// Overrides ppo.total_steps
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides ppo.checkpoint_every
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Use the table's literal learning rate (0.1) instead of the config's
    #[arg(long)]
    table_lr: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, required_unless_present = "expert", conflicts_with = "expert")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the scripted expert instead of a checkpoint
    #[arg(long)]
    expert: bool,
    #[arg(long)]
    track: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    mode: Option<ActionMode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, requires = "expert_v")]
    expert_d: Option<PathBuf>,
    #[arg(long, requires = "expert_d")]
    expert_v: Option<PathBuf>,
    /// Output stem: writes <out>.json, <out>.csv and <out>-laps.csv
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Also run the three generalization roads
    #[arg(long)]
    generalization: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        e if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateRoad { kind, length, seed, out } => commands::generate_road(&kind, length, seed, &out),
        Command::CollectExpert {
            track,
            rounds,
            seed,
            out,
            config,
        } => commands::collect_expert(&track, rounds, seed, &out, config.config.as_deref()),
        Command::FitGp {
            demo,
            variable,
            track,
            out,
        } => commands::fit_gp(&demo, variable, track.as_deref(), &out),
        Command::SampleGp { model, n, seed, out } => commands::sample_gp(&model, n, seed, &out),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Replay { log, track, svg } => replay::run(&log, track.as_deref(), svg.as_deref()),
        Command::Serve {
            port,
            bind,
            track,
            out_dir,
        } => serve::run(&bind, port, &track, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
