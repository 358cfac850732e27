//! Fixed-step explicit ODE integrators recorded on the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(OdeMethod::Euler),
            "rk4" => Ok(OdeMethod::Rk4),
            other => Err(Error::invalid(format!("unknown ODE method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub steps: usize,
}

impl OdeConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: OdeMethod::Rk4,
            steps,
        }
    }

    pub fn euler(steps: usize) -> Self {
        Self {
            method: OdeMethod::Euler,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("ODE steps must be at least 1"));
        }
        Ok(())
    }
}

/// Solves `dy/dt = f(y, t)` from `t0` to `t1` with `cfg.steps` uniform
/// steps. Every stage is recorded on `tape`, so the result is
/// differentiable with respect to `y0` and anything `f` closes over.
pub fn integrate<F>(
    tape: &mut Tape,
    mut f: F,
    y0: Var,
    t0: f64,
    t1: f64,
    cfg: &OdeConfig,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(Error::invalid(format!(
            "integration interval [{t0}, {t1}] is empty"
        )));
    }
    let h = (t1 - t0) / cfg.steps as f64;
    let mut y = y0;
    for step in 0..cfg.steps {
        let t = t0 + step as f64 * h;
        y = match cfg.method {
            OdeMethod::Euler => {
                let k1 = f(tape, y, t)?;
                let dy = tape.scale(k1, h)?;
                tape.add(y, dy)?
            }
            OdeMethod::Rk4 => {
                let k1 = f(tape, y, t)?;
                let d1 = tape.scale(k1, 0.5 * h)?;
                let y2 = tape.add(y, d1)?;
                let k2 = f(tape, y2, t + 0.5 * h)?;
                let d2 = tape.scale(k2, 0.5 * h)?;
                let y3 = tape.add(y, d2)?;
                let k3 = f(tape, y3, t + 0.5 * h)?;
                let d3 = tape.scale(k3, h)?;
                let y4 = tape.add(y, d3)?;
                let k4 = f(tape, y4, t + h)?;
                let k23 = tape.add(k2, k3)?;
                let k23 = tape.scale(k23, 2.0)?;
                let k14 = tape.add(k1, k4)?;
                let sum = tape.add(k14, k23)?;
                let dy = tape.scale(sum, h / 6.0)?;
                tape.add(y, dy)?
            }
        };
        if !tape.value(y).is_finite() {
            return Err(Error::NonFinite(format!("ODE state after step {step}")));
        }
    }
    Ok(y)
}
