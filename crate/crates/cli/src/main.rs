use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gnstode::commands::{
    cmd_evaluate, cmd_generate, cmd_rollout, cmd_train, EvaluateArgs, GenerateArgs, RolloutArgs, TrainArgs,
};
use gnstode::ode::OdeMethod;
use gnstode::physics::{SplitCounts, SystemKind, SystemSpec};
use gnstode::Exec;

const THREADS_VAR: &str = "GNSTODE_THREADS";

#[derive(Parser)]
#[command(name = "gnstode", version, about = "Learned particle simulator with spatial and temporal neural ODEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/val/test trajectory datasets
    Generate(Generate),
    /// Train a model and write its checkpoint and loss log
    Train(Train),
    /// Roll out test trajectories and write a JSON report
    Evaluate(Evaluate),
    /// Export one predicted and ground-truth trajectory as CSV
    Rollout(Rollout),
}

#[derive(Args)]
struct Generate {
    #[arg(long, default_value = "gravity")]
    system: SystemKind,
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Defaults to the system's standard intensity
    #[arg(long)]
    intensity: Option<f64>,
    #[arg(long, default_value_t = 200)]
    timesteps: usize,
    #[arg(long)]
    dt: Option<f64>,
    /// Interaction constant (G or k)
    #[arg(long)]
    constant: Option<f64>,
    #[arg(long)]
    softening: Option<f64>,
    /// Train, validation and test trajectory counts
    #[arg(long, default_value = "100,20,20", value_parser = parse_counts)]
    counts: SplitCounts,
    /// Keep every stride-th stamp
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    spatial_steps: usize,
    #[arg(long, default_value_t = 4)]
    temporal_steps: usize,
    #[arg(long, default_value = "rk4")]
    method: OdeMethod,
    #[arg(long)]
    ablate_spatial: bool,
    #[arg(long)]
    ablate_temporal: bool,
    #[arg(long, default_value_t = gnstode::model::DEFAULT_HIDDEN)]
    hidden: usize,
    /// Neighbours per particle in the interaction graph
    #[arg(long, default_value_t = 15)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path with a .csv extension
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    test: PathBuf,
    /// Checkpoint path; repeat the flag or use '{i}' with --repeat
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Simulator step the stride in the report is measured against
    #[arg(long, default_value_t = 0.01)]
    base_dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Rollout {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    traj_index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_counts(s: &str) -> Result<SplitCounts, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match parts[..] {
        [train, val, test] => Ok(SplitCounts { train, val, test }),
        _ => Err(format!("expected three comma-separated counts, got '{s}'")),
    }
}

fn configure_threads() -> anyhow::Result<Exec> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(Exec::default());
    };
    let threads: usize = v
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_VAR}='{v}' is not a thread count"))?;
    if threads == 0 {
        bail!("{THREADS_VAR} must be at least 1");
    }
    if threads == 1 {
        return Ok(Exec::Sequential);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(Exec::Parallel)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = configure_threads()?;
    match cli.command {
        Command::Generate(g) => {
            let spec = SystemSpec::new(g.system);
            let args = GenerateArgs {
                system: g.system,
                n: g.n,
                intensity: g.intensity.unwrap_or(spec.intensity),
                timesteps: g.timesteps,
                dt: g.dt.unwrap_or(spec.dt),
                constant: g.constant.unwrap_or(spec.constant),
                softening: g.softening.unwrap_or(spec.softening),
                counts: g.counts,
                stride: g.stride,
                seed: g.seed,
                out_dir: g.out_dir,
            };
            let paths = cmd_generate(&args, exec)?;
            for p in [paths.train, paths.val, paths.test] {
                println!("{}", p.display());
            }
        }
        Command::Train(t) => {
            let args = TrainArgs {
                train: t.train,
                val: t.val,
                epochs: t.epochs,
                batch_size: t.batch_size,
                learning_rate: t.lr,
                spatial_steps: t.spatial_steps,
                temporal_steps: t.temporal_steps,
                method: t.method,
                ablate_spatial: t.ablate_spatial,
                ablate_temporal: t.ablate_temporal,
                hidden_width: t.hidden,
                k_neighbors: t.k,
                seed: t.seed,
                out: t.out,
                log: t.log,
            };
            let quiet = t.quiet;
            let (_, record) = cmd_train(&args, exec, |r| {
                if !quiet {
                    eprintln!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss);
                }
            })?;
            let best = record.best();
            println!(
                "best epoch {} (val {:.6}) -> {}",
                best.epoch,
                best.val_loss,
                args.out.display()
            );
        }
        Command::Evaluate(e) => {
            let args = EvaluateArgs {
                test: e.test,
                ckpts: e.ckpt,
                repeat: e.repeat,
                base_dt: e.base_dt,
                out: e.out,
            };
            let report = cmd_evaluate(&args, exec)?;
            println!("rmse {:.6}  energy_error {:.6}", report.rmse(), report.energy_error());
        }
        Command::Rollout(r) => {
            let args = RolloutArgs {
                ckpt: r.ckpt,
                data: r.data,
                traj_index: r.traj_index,
                out: r.out,
            };
            let out = cmd_rollout(&args)?;
            if let Some(step) = out.diverged_at {
                eprintln!("warning: rollout diverged at step {step}");
            }
            println!("{}", args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
