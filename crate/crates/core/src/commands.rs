//! The four experiment commands, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, rollout, EvalReport, ReportEcho};
use crate::exec::Exec;
use crate::io::{trajectories_csv, training_log_csv, write_atomic, Checkpoint, CsvTrajectory, DatasetFile};
use crate::model::ModelConfig;
use crate::ode::{OdeConfig, OdeMethod};
use crate::physics::{downsample, generate_dataset, SplitCounts, SystemKind, SystemSpec, Trajectory};
use crate::training::{train_with, EpochRecord, TrainRecord, TrainingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateArgs {
    pub system: SystemKind,
    pub n: usize,
    pub intensity: f64,
    pub timesteps: usize,
    pub dt: f64,
    pub constant: f64,
    pub softening: f64,
    pub counts: SplitCounts,
    pub stride: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl GenerateArgs {
    pub fn new(system: SystemKind, out_dir: impl Into<PathBuf>) -> Self {
        let spec = SystemSpec::new(system);
        Self {
            system,
            n: 20,
            intensity: spec.intensity,
            timesteps: 200,
            dt: spec.dt,
            constant: spec.constant,
            softening: spec.softening,
            counts: SplitCounts::default(),
            stride: 1,
            seed: 0,
            out_dir: out_dir.into(),
        }
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            system: self.system,
            constant: self.constant,
            dt: self.dt,
            softening: self.softening,
            intensity: self.intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Simulates the three splits and writes `train.bin`, `val.bin` and
/// `test.bin` into `out_dir`.
pub fn cmd_generate(args: &GenerateArgs, exec: Exec) -> Result<GeneratedPaths> {
    if args.stride < 1 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if args.timesteps.div_ceil(args.stride) < 2 {
        return Err(Error::invalid(format!(
            "stride {} leaves fewer than 2 of {} stamps",
            args.stride, args.timesteps
        )));
    }
    let counts = args.counts;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::invalid("every split needs at least one trajectory"));
    }
    let spec = args.spec();
    let ds = generate_dataset(args.n, &spec, args.timesteps, counts, args.seed, exec)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let paths = GeneratedPaths {
        train: args.out_dir.join("train.bin"),
        val: args.out_dir.join("val.bin"),
        test: args.out_dir.join("test.bin"),
    };
    for (split, path) in [(ds.train, &paths.train), (ds.val, &paths.val), (ds.test, &paths.test)] {
        let trajs = split
            .iter()
            .map(|t| downsample(t, args.stride))
            .collect::<Result<Vec<_>>>()?;
        DatasetFile::new(&spec, trajs)?.write(path)?;
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub train: PathBuf,
    pub val: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub spatial_steps: usize,
    pub temporal_steps: usize,
    pub method: OdeMethod,
    pub ablate_spatial: bool,
    pub ablate_temporal: bool,
    pub hidden_width: usize,
    pub k_neighbors: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Defaults to `out` with a `.csv` extension.
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    pub fn new(train: impl Into<PathBuf>, val: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        let t = TrainingConfig::default();
        let m = ModelConfig::new(SystemKind::Gravity);
        Self {
            train: train.into(),
            val: val.into(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            spatial_steps: m.spatial_ode.steps,
            temporal_steps: m.temporal_ode.steps,
            method: m.spatial_ode.method,
            ablate_spatial: false,
            ablate_temporal: false,
            hidden_width: m.hidden_width,
            k_neighbors: m.k_neighbors,
            seed: 0,
            out: out.into(),
            log: None,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out.with_extension("csv"))
    }

    pub fn model_config(&self, system: SystemKind) -> ModelConfig {
        ModelConfig {
            spatial_ode: OdeConfig {
                method: self.method,
                steps: self.spatial_steps,
            },
            temporal_ode: OdeConfig {
                method: self.method,
                steps: self.temporal_steps,
            },
            ablate_spatial: self.ablate_spatial,
            ablate_temporal: self.ablate_temporal,
            hidden_width: self.hidden_width,
            k_neighbors: self.k_neighbors,
            ..ModelConfig::new(system)
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TrainingConfig::default()
        }
    }
}

/// Trains on `args.train`, selects the epoch with the lowest validation
/// loss, and writes the checkpoint and the per-epoch CSV log.
pub fn cmd_train(
    args: &TrainArgs,
    exec: Exec,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainRecord)> {
    let train = DatasetFile::read(&args.train)?;
    let val = DatasetFile::read(&args.val)?;
    if train.header.system != val.header.system {
        return Err(Error::Incompatible(format!(
            "training data is {}, validation data is {}",
            train.header.system, val.header.system
        )));
    }
    let system = train.header.system;
    let model = args.model_config(system);
    let cfg = args.training_config();
    model.validate()?;
    cfg.validate()?;
    let (params, record) = train_with(&train.trajectories, &val.trajectories, &model, &cfg, exec, on_epoch)?;
    let ckpt = Checkpoint::new(system, model, cfg, params, Some(&record))?;
    ckpt.write(&args.out)?;
    write_atomic(&args.log_path(), training_log_csv(&record).as_bytes())?;
    Ok((ckpt, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub test: PathBuf,
    /// One or more checkpoints; with `repeat = k`, a single path containing
    /// `{i}` expands to `i = 0..k`.
    pub ckpts: Vec<PathBuf>,
    pub repeat: usize,
    /// Simulator step of the undownsampled data, used to report the stride.
    pub base_dt: f64,
    pub out: PathBuf,
}

/// Reports from several checkpoints and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedReport {
    pub rmse: f64,
    pub energy_error: f64,
    pub rmse_std: f64,
    pub energy_error_std: f64,
    pub baseline_rmse: f64,
    pub checkpoints: Vec<String>,
    pub runs: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvaluateOutput {
    Single(EvalReport),
    Repeated(RepeatedReport),
}

impl EvaluateOutput {
    pub fn rmse(&self) -> f64 {
        match self {
            EvaluateOutput::Single(r) => r.rmse,
            EvaluateOutput::Repeated(r) => r.rmse,
        }
    }

    pub fn energy_error(&self) -> f64 {
        match self {
            EvaluateOutput::Single(r) => r.energy_error,
            EvaluateOutput::Repeated(r) => r.energy_error,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(match self {
            EvaluateOutput::Single(r) => serde_json::to_string_pretty(r)?,
            EvaluateOutput::Repeated(r) => serde_json::to_string_pretty(r)?,
        })
    }
}

/// Checkpoint paths after `{i}` expansion.
pub fn expand_checkpoints(ckpts: &[PathBuf], repeat: usize) -> Result<Vec<PathBuf>> {
    if ckpts.is_empty() {
        return Err(Error::invalid("at least one checkpoint is required"));
    }
    if repeat < 1 {
        return Err(Error::invalid("repeat must be at least 1"));
    }
    if repeat == 1 {
        return Ok(ckpts.to_vec());
    }
    let mut out = Vec::new();
    for c in ckpts {
        let s = c.to_string_lossy();
        if !s.contains("{i}") {
            return Err(Error::invalid(format!(
                "--repeat {repeat} needs a '{{i}}' placeholder in checkpoint path '{s}'"
            )));
        }
        out.extend((0..repeat).map(|i| PathBuf::from(s.replace("{i}", &i.to_string()))));
    }
    Ok(out)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn stride_of(dt_effective: f64, base_dt: f64) -> Result<usize> {
    if !(base_dt > 0.0) {
        return Err(Error::invalid("base dt must be positive"));
    }
    let s = (dt_effective / base_dt).round();
    if s < 1.0 || ((s * base_dt - dt_effective).abs() > 1e-9 * dt_effective) {
        return Err(Error::Incompatible(format!(
            "dataset step {dt_effective} is not a multiple of base dt {base_dt}"
        )));
    }
    Ok(s as usize)
}

fn check_compatible(ckpt: &Checkpoint, data: &DatasetFile, path: &Path) -> Result<()> {
    if ckpt.meta.system != data.header.system {
        return Err(Error::Incompatible(format!(
            "checkpoint {} is for {}, dataset is {}",
            path.display(),
            ckpt.meta.system,
            data.header.system
        )));
    }
    Ok(())
}

/// Rolls every test trajectory out from its first state and writes the
/// report as JSON.
pub fn cmd_evaluate(args: &EvaluateArgs, exec: Exec) -> Result<EvaluateOutput> {
    let data = DatasetFile::read(&args.test)?;
    let paths = expand_checkpoints(&args.ckpts, args.repeat)?;
    let h = &data.header;
    let stride = stride_of(h.dt_effective, args.base_dt)?;
    let spec = h.spec();
    let mut runs = Vec::with_capacity(paths.len());
    for p in &paths {
        let ckpt = Checkpoint::read(p)?;
        check_compatible(&ckpt, &data, p)?;
        let echo = ReportEcho {
            system: h.system.to_string(),
            n: h.n,
            intensity: h.intensity,
            dt_effective: h.dt_effective,
            stride,
            ablate_spatial: ckpt.meta.model.ablate_spatial,
            ablate_temporal: ckpt.meta.model.ablate_temporal,
        };
        runs.push(evaluate(&data.trajectories, &ckpt.params, &ckpt.meta.model, &spec, echo, exec)?);
    }
    let out = if runs.len() == 1 {
        EvaluateOutput::Single(runs.pop().expect("one run"))
    } else {
        let (rmse, rmse_std) = mean_std(&runs.iter().map(|r| r.rmse).collect::<Vec<_>>());
        let (energy_error, energy_error_std) = mean_std(&runs.iter().map(|r| r.energy_error).collect::<Vec<_>>());
        EvaluateOutput::Repeated(RepeatedReport {
            rmse,
            energy_error,
            rmse_std,
            energy_error_std,
            baseline_rmse: runs[0].baseline_rmse,
            checkpoints: paths.iter().map(|p| p.display().to_string()).collect(),
            runs,
        })
    };
    write_atomic(&args.out, out.to_json()?.as_bytes())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub traj_index: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub predicted: Trajectory,
    pub truth: Trajectory,
    pub diverged_at: Option<usize>,
}

/// Writes the predicted and ground-truth versions of one trajectory to CSV.
pub fn cmd_rollout(args: &RolloutArgs) -> Result<RolloutOutput> {
    let data = DatasetFile::read(&args.data)?;
    let ckpt = Checkpoint::read(&args.ckpt)?;
    check_compatible(&ckpt, &data, &args.ckpt)?;
    let truth = data
        .trajectories
        .get(args.traj_index)
        .ok_or(Error::Index {
            op: "cmd_rollout",
            index: args.traj_index,
            bound: data.trajectories.len(),
        })?
        .clone();
    let r = rollout(truth.first(), &ckpt.params, &ckpt.meta.model, truth.len())?;
    let diverged_at = r.diverged_at;
    if r.states.len() < 2 {
        return Err(Error::NonFinite("first predicted step".into()));
    }
    let predicted = r.into_trajectory(truth.dt_effective())?;
    let csv = trajectories_csv(
        data.header.system,
        &[
            CsvTrajectory {
                source: "predicted",
                index: args.traj_index,
                states: predicted.states(),
            },
            CsvTrajectory {
                source: "truth",
                index: args.traj_index,
                states: truth.states(),
            },
        ],
    );
    write_atomic(&args.out, csv.as_bytes())?;
    Ok(RolloutOutput {
        predicted,
        truth,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_expansion() {
        let one = vec![PathBuf::from("a.ckpt")];
        assert_eq!(expand_checkpoints(&one, 1).unwrap(), one);
        assert!(expand_checkpoints(&one, 3).is_err());
        assert!(expand_checkpoints(&[], 1).is_err());
        let pat = vec![PathBuf::from("runs/m{i}.ckpt")];
        assert_eq!(
            expand_checkpoints(&pat, 2).unwrap(),
            vec![PathBuf::from("runs/m0.ckpt"), PathBuf::from("runs/m1.ckpt")]
        );
    }

    #[test]
    fn stride_from_time_step() {
        assert_eq!(stride_of(0.01, 0.01).unwrap(), 1);
        assert_eq!(stride_of(0.05, 0.01).unwrap(), 5);
        assert_eq!(stride_of(0.2, 0.01).unwrap(), 20);
        assert!(stride_of(0.015, 0.01).is_err());
        assert!(stride_of(0.01, 0.0).is_err());
    }

    #[test]
    fn mean_and_spread() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
