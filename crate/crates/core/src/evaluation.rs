//! Closed-loop rollouts, trajectory metrics, and a constant-velocity
//! reference predictor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{predict_step, ModelConfig, ModelParameters};
use crate::physics::{hamiltonian, ParticleState, SystemSpec, Trajectory};

/// Predicted states from a rollout. `diverged_at` is the index of the
/// first step whose prediction failed; states stop just before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<ParticleState>,
    pub diverged_at: Option<usize>,
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn into_trajectory(self, dt_effective: f64) -> Result<Trajectory> {
        Trajectory::new(self.states, dt_effective)
    }
}

/// Applies `step` `t_len − 1` times starting from `x1`, feeding each output
/// back in. Stops early if a step fails or yields a non-finite state.
pub fn rollout_with<F>(x1: &ParticleState, t_len: usize, mut step: F) -> Result<Rollout>
where
    F: FnMut(&ParticleState) -> Result<ParticleState>,
{
    if t_len < 2 {
        return Err(Error::invalid(format!("rollout length must be at least 2, got {t_len}")));
    }
    let mut states = Vec::with_capacity(t_len);
    states.push(x1.clone());
    for t in 1..t_len {
        match step(&states[t - 1]) {
            Ok(next) if next.is_finite() => states.push(next),
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Coincident { .. }) => {
                return Ok(Rollout {
                    states,
                    diverged_at: Some(t),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Rollout {
        states,
        diverged_at: None,
    })
}

/// Closed-loop simulation with the learned model; the interaction graph is
/// rebuilt from predicted positions at every step.
pub fn rollout(x1: &ParticleState, params: &ModelParameters, config: &ModelConfig, t_len: usize) -> Result<Rollout> {
    rollout_with(x1, t_len, |s| predict_step(s, params, config))
}

/// Positions advance with the initial velocities; everything else frozen.
pub fn constant_velocity_baseline(x1: &ParticleState, t_len: usize, dt_effective: f64) -> Result<Trajectory> {
    if t_len < 2 {
        return Err(Error::invalid(format!("rollout length must be at least 2, got {t_len}")));
    }
    let mut states = Vec::with_capacity(t_len);
    states.push(x1.clone());
    for t in 1..t_len {
        let mut s = states[t - 1].clone();
        for i in 0..s.n() {
            let x = s.position(i);
            let v = x1.velocity(i);
            s.set_position(i, [x[0] + dt_effective * v[0], x[1] + dt_effective * v[1]]);
        }
        states.push(s);
    }
    Trajectory::new(states, dt_effective)
}

fn check_matched(pred: &[Trajectory], truth: &[Trajectory]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.n() != t.n() || p.system() != t.system() {
            return Err(Error::Shape {
                op: "metric",
                lhs: vec![p.len(), p.n()],
                rhs: vec![t.len(), t.n()],
            });
        }
    }
    Ok(())
}

/// `Σ_{t=2}^{T} ‖X^c_t − X̂^c_t‖²_F` over coordinate columns of one
/// trajectory pair. Lengths must match.
pub fn squared_coordinate_error(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if pred.len() != truth.len() || pred.n() != truth.n() {
        return Err(Error::Shape {
            op: "squared_coordinate_error",
            lhs: vec![pred.len(), pred.n()],
            rhs: vec![truth.len(), truth.n()],
        });
    }
    let mut sum = 0.0;
    for (p, t) in pred.states().iter().zip(truth.states()).skip(1) {
        for i in 0..t.n() {
            let (a, b) = (p.position(i), t.position(i));
            sum += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        }
    }
    Ok(sum)
}

/// `√((1/N) Σ_i Σ_{t=2}^{T} ‖X^c − X̂^c‖²_F)`.
pub fn rmse(pred: &[Trajectory], truth: &[Trajectory]) -> Result<f64> {
    check_matched(pred, truth)?;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += squared_coordinate_error(p, t)?;
    }
    Ok((sum / pred.len() as f64).sqrt())
}

/// `|H_1 − Ĥ_T| / |H_1|` for one trajectory: true initial energy against
/// predicted final energy.
pub fn relative_energy_error(pred: &Trajectory, truth: &Trajectory, spec: &SystemSpec) -> Result<f64> {
    let h1 = hamiltonian(truth.first(), spec)?;
    if h1 == 0.0 {
        return Err(Error::invalid("initial energy is zero; relative error undefined"));
    }
    let ht = hamiltonian(pred.last(), spec)?;
    Ok((h1 - ht).abs() / h1.abs())
}

/// Mean of [`relative_energy_error`] over trajectories.
pub fn energy_error(pred: &[Trajectory], truth: &[Trajectory], spec: &SystemSpec) -> Result<f64> {
    check_matched(pred, truth)?;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += relative_energy_error(p, t, spec)?;
    }
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub index: usize,
    /// Ground-truth stamps compared (the rollout prefix when diverged).
    pub steps: usize,
    pub squared_error: f64,
    pub rmse: f64,
    pub energy_error: f64,
    pub diverged_at: Option<usize>,
}

/// Settings echoed into a report so result grids can be scripted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEcho {
    pub system: String,
    pub n: usize,
    pub intensity: f64,
    pub dt_effective: f64,
    pub stride: usize,
    pub ablate_spatial: bool,
    pub ablate_temporal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub energy_error: f64,
    pub baseline_rmse: f64,
    pub num_trajectories: usize,
    pub num_diverged: usize,
    pub config: ReportEcho,
    pub trajectories: Vec<TrajectoryMetrics>,
}

impl EvalReport {
    /// Aggregates recomputed from the per-trajectory rows.
    pub fn recompute(rows: &[TrajectoryMetrics]) -> (f64, f64) {
        let n = rows.len() as f64;
        let sq: f64 = rows.iter().map(|r| r.squared_error).sum();
        let en: f64 = rows.iter().map(|r| r.energy_error).sum();
        ((sq / n).sqrt(), en / n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Truncates `truth` to the length of a diverged prediction.
fn prefix(truth: &Trajectory, len: usize) -> Result<Trajectory> {
    Trajectory::new(truth.states()[..len].to_vec(), truth.dt_effective())
}

/// Rolls the model out from the first state of every test trajectory for
/// its full length and scores the result.
pub fn evaluate(
    test: &[Trajectory],
    params: &ModelParameters,
    config: &ModelConfig,
    spec: &SystemSpec,
    echo: ReportEcho,
    exec: Exec,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("no test trajectories"));
    }
    let rollouts = exec.map(test, |t| rollout(t.first(), params, config, t.len()));
    let mut rows = Vec::with_capacity(test.len());
    let mut base_sq = 0.0;
    for (index, (truth, r)) in test.iter().zip(rollouts).enumerate() {
        let r = r?;
        let diverged_at = r.diverged_at;
        let steps = r.states.len();
        if steps < 2 {
            return Err(Error::NonFinite(format!("first prediction of test trajectory {index}")));
        }
        let truth_p = prefix(truth, steps)?;
        let pred = r.into_trajectory(truth.dt_effective())?;
        let squared_error = squared_coordinate_error(&pred, &truth_p)?;
        rows.push(TrajectoryMetrics {
            index,
            steps,
            squared_error,
            rmse: squared_error.sqrt(),
            energy_error: relative_energy_error(&pred, &truth_p, spec)?,
            diverged_at,
        });
        let cv = constant_velocity_baseline(truth.first(), truth.len(), truth.dt_effective())?;
        base_sq += squared_coordinate_error(&cv, truth)?;
    }
    let (rmse, energy_error) = EvalReport::recompute(&rows);
    Ok(EvalReport {
        rmse,
        energy_error,
        baseline_rmse: (base_sq / test.len() as f64).sqrt(),
        num_trajectories: rows.len(),
        num_diverged: rows.iter().filter(|r| r.diverged_at.is_some()).count(),
        config: echo,
        trajectories: rows,
    })
}
