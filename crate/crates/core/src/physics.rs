//! Ground-truth particle dynamics: initial conditions, softened Gravity and
//! Coulomb forces, kick-drift-kick Leapfrog integration, and the Hamiltonian.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Gravity,
    Coulomb,
}

const GRAVITY_STATIC: [bool; 5] = [true, false, false, false, false];
const COULOMB_STATIC: [bool; 6] = [true, true, false, false, false, false];

impl SystemKind {
    /// Per-particle feature count: `[m, x, y, ẋ, ẏ]` or `[m, c, x, y, ẋ, ẏ]`.
    pub fn feature_dim(self) -> usize {
        match self {
            SystemKind::Gravity => 5,
            SystemKind::Coulomb => 6,
        }
    }

    /// Columns that never change over time (mass, charge).
    pub fn static_mask(self) -> &'static [bool] {
        match self {
            SystemKind::Gravity => &GRAVITY_STATIC,
            SystemKind::Coulomb => &COULOMB_STATIC,
        }
    }

    /// Column of the x coordinate; y follows it.
    pub fn position_col(self) -> usize {
        match self {
            SystemKind::Gravity => 1,
            SystemKind::Coulomb => 2,
        }
    }

    /// Column of the x velocity; ẏ follows it.
    pub fn velocity_col(self) -> usize {
        self.position_col() + 2
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Gravity => &["m", "x", "y", "vx", "vy"],
            SystemKind::Coulomb => &["m", "c", "x", "y", "vx", "vy"],
        }
    }

    pub fn code(self) -> u32 {
        match self {
            SystemKind::Gravity => 0,
            SystemKind::Coulomb => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(SystemKind::Gravity),
            1 => Some(SystemKind::Coulomb),
            _ => None,
        }
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gravity" => Ok(SystemKind::Gravity),
            "coulomb" => Ok(SystemKind::Coulomb),
            other => Err(Error::invalid(format!("unknown system '{other}'"))),
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SystemKind::Gravity => "gravity",
            SystemKind::Coulomb => "coulomb",
        })
    }
}

/// Physical constants and sampling parameters of a simulated system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: SystemKind,
    /// `G` for Gravity, `k` for Coulomb.
    pub constant: f64,
    pub dt: f64,
    pub softening: f64,
    /// Mean particle count per unit area of the initial square.
    pub intensity: f64,
}

impl SystemSpec {
    pub fn new(system: SystemKind) -> Self {
        Self {
            system,
            constant: 2.0,
            dt: 0.01,
            softening: 0.01,
            intensity: 0.42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.intensity > 0.0) {
            return Err(Error::invalid(format!(
                "intensity must be positive, got {}",
                self.intensity
            )));
        }
        if !(self.softening >= 0.0) {
            return Err(Error::invalid(format!(
                "softening must be non-negative, got {}",
                self.softening
            )));
        }
        Ok(())
    }
}

/// One time stamp of an `n`-particle system, row-major `n × d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    system: SystemKind,
    n: usize,
    features: Vec<f64>,
}

impl ParticleState {
    pub fn new(system: SystemKind, n: usize, features: Vec<f64>) -> Result<Self> {
        let d = system.feature_dim();
        if features.len() != n * d {
            return Err(Error::DataLength {
                shape: vec![n, d],
                len: features.len(),
            });
        }
        let state = Self {
            system,
            n,
            features,
        };
        if let Some(i) = (0..n).find(|&i| !(state.mass(i) > 0.0)) {
            return Err(Error::invalid(format!(
                "particle {i} has non-positive mass {}",
                state.mass(i)
            )));
        }
        Ok(state)
    }

    /// Skips the mass check; used for model predictions, which copy masses
    /// from a validated input.
    pub(crate) fn from_raw(system: SystemKind, n: usize, features: Vec<f64>) -> Self {
        debug_assert_eq!(features.len(), n * system.feature_dim());
        Self {
            system,
            n,
            features,
        }
    }

    pub fn from_tensor(system: SystemKind, t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.cols() != system.feature_dim() {
            return Err(Error::Shape {
                op: "ParticleState::from_tensor",
                lhs: t.shape().to_vec(),
                rhs: vec![t.rows(), system.feature_dim()],
            });
        }
        Self::new(system, t.rows(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.dim(), self.features.clone())
    }

    pub fn system(&self) -> SystemKind {
        self.system
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.system.feature_dim()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.particle(i)[0]
    }

    /// Charge for Coulomb systems; `None` for Gravity.
    pub fn charge(&self, i: usize) -> Option<f64> {
        match self.system {
            SystemKind::Coulomb => Some(self.particle(i)[1]),
            SystemKind::Gravity => None,
        }
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        let c = self.system.position_col();
        let p = self.particle(i);
        [p[c], p[c + 1]]
    }

    pub fn velocity(&self, i: usize) -> [f64; 2] {
        let c = self.system.velocity_col();
        let p = self.particle(i);
        [p[c], p[c + 1]]
    }

    pub fn set_position(&mut self, i: usize, x: [f64; 2]) {
        let (c, d) = (self.system.position_col(), self.dim());
        self.features[i * d + c] = x[0];
        self.features[i * d + c + 1] = x[1];
    }

    pub fn set_velocity(&mut self, i: usize, v: [f64; 2]) {
        let (c, d) = (self.system.velocity_col(), self.dim());
        self.features[i * d + c] = v[0];
        self.features[i * d + c + 1] = v[1];
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|v| v.is_finite())
    }

    /// True when every static column equals `other`'s bit for bit.
    pub fn same_static(&self, other: &ParticleState) -> bool {
        if self.n != other.n || self.system != other.system {
            return false;
        }
        let mask = self.system.static_mask();
        self.features
            .iter()
            .zip(&other.features)
            .enumerate()
            .all(|(k, (a, b))| !mask[k % mask.len()] || a.to_bits() == b.to_bits())
    }

    /// Total linear momentum `Σ mᵢvᵢ`.
    pub fn momentum(&self) -> [f64; 2] {
        (0..self.n).fold([0.0, 0.0], |acc, i| {
            let (m, v) = (self.mass(i), self.velocity(i));
            [acc[0] + m * v[0], acc[1] + m * v[1]]
        })
    }
}

/// A time-ordered sequence of states with uniform particle count.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<ParticleState>,
    dt_effective: f64,
}

impl Trajectory {
    pub fn new(states: Vec<ParticleState>, dt_effective: f64) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        let first = &states[0];
        for (t, s) in states.iter().enumerate().skip(1) {
            if s.system != first.system || s.n != first.n {
                return Err(Error::invalid(format!(
                    "state {t} has a different system or particle count"
                )));
            }
            if !s.same_static(first) {
                return Err(Error::invalid(format!(
                    "state {t} changes static features"
                )));
            }
        }
        Ok(Self {
            states,
            dt_effective,
        })
    }

    pub fn states(&self) -> &[ParticleState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> &ParticleState {
        &self.states[0]
    }

    pub fn last(&self) -> &ParticleState {
        &self.states[self.states.len() - 1]
    }

    pub fn dt_effective(&self) -> f64 {
        self.dt_effective
    }

    pub fn system(&self) -> SystemKind {
        self.states[0].system
    }

    pub fn n(&self) -> usize {
        self.states[0].n
    }
}

/// Train/validation/test trajectory counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 100,
            val: 20,
            test: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Positions uniform on a square of side `√(n / intensity)`, unit masses,
/// velocities uniform on `(−1, 1)`, Coulomb charges uniform on `(0.5, 1.5)`.
pub fn sample_initial<R: Rng + ?Sized>(
    n: usize,
    spec: &SystemSpec,
    rng: &mut R,
) -> Result<ParticleState> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 particles, got {n}")));
    }
    spec.validate()?;
    let side = square_side(n, spec.intensity);
    let d = spec.system.feature_dim();
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n {
        features.push(1.0);
        if spec.system == SystemKind::Coulomb {
            features.push(open_uniform(rng, 0.5, 1.5));
        }
        features.push(rng.random_range(0.0..side));
        features.push(rng.random_range(0.0..side));
        features.push(open_uniform(rng, -1.0, 1.0));
        features.push(open_uniform(rng, -1.0, 1.0));
    }
    ParticleState::new(spec.system, n, features)
}

/// Side of the square holding `n` particles at the given areal intensity.
pub fn square_side(n: usize, intensity: f64) -> f64 {
    (n as f64 / intensity).sqrt()
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

fn check_layout(state: &ParticleState, spec: &SystemSpec) -> Result<()> {
    if state.system != spec.system {
        return Err(Error::Incompatible(format!(
            "state is {} but spec is {}",
            state.system, spec.system
        )));
    }
    Ok(())
}

/// Softened pairwise accelerations, one `[ax, ay]` per particle.
pub fn acceleration(state: &ParticleState, spec: &SystemSpec) -> Result<Vec<[f64; 2]>> {
    check_layout(state, spec)?;
    let n = state.n;
    let eps2 = spec.softening * spec.softening;
    let pos: Vec<[f64; 2]> = (0..n).map(|i| state.position(i)).collect();
    let mut acc = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pos[i][0] - pos[j][0];
            let dy = pos[i][1] - pos[j][1];
            let s = dx * dx + dy * dy + eps2;
            if s == 0.0 {
                return Err(Error::Coincident { i, j });
            }
            let inv = 1.0 / (s * s.sqrt());
            // Coefficients of (xᵢ − xⱼ) in aᵢ and of (xⱼ − xᵢ) in aⱼ.
            let (ci, cj) = match spec.system {
                SystemKind::Gravity => (
                    -spec.constant * state.mass(j) * inv,
                    -spec.constant * state.mass(i) * inv,
                ),
                SystemKind::Coulomb => {
                    let qq = spec.constant * state.particle(i)[1] * state.particle(j)[1] * inv;
                    (qq / state.mass(i), qq / state.mass(j))
                }
            };
            acc[i][0] += ci * dx;
            acc[i][1] += ci * dy;
            acc[j][0] -= cj * dx;
            acc[j][1] -= cj * dy;
        }
    }
    Ok(acc)
}

/// Kick-drift-kick step given the acceleration at the current positions;
/// returns the new state and the acceleration at the new positions.
fn leapfrog_with(
    state: &ParticleState,
    spec: &SystemSpec,
    acc: &[[f64; 2]],
) -> Result<(ParticleState, Vec<[f64; 2]>)> {
    let half = 0.5 * spec.dt;
    let mut next = state.clone();
    for i in 0..state.n {
        let v = state.velocity(i);
        let x = state.position(i);
        let vh = [v[0] + half * acc[i][0], v[1] + half * acc[i][1]];
        next.set_velocity(i, vh);
        next.set_position(i, [x[0] + spec.dt * vh[0], x[1] + spec.dt * vh[1]]);
    }
    let acc_next = acceleration(&next, spec)?;
    for (i, a) in acc_next.iter().enumerate() {
        let vh = next.velocity(i);
        next.set_velocity(i, [vh[0] + half * a[0], vh[1] + half * a[1]]);
    }
    Ok((next, acc_next))
}

pub fn leapfrog_step(state: &ParticleState, spec: &SystemSpec) -> Result<ParticleState> {
    let acc = acceleration(state, spec)?;
    leapfrog_with(state, spec, &acc).map(|(s, _)| s)
}

/// Total energy: kinetic plus softened pair potential.
pub fn hamiltonian(state: &ParticleState, spec: &SystemSpec) -> Result<f64> {
    check_layout(state, spec)?;
    let n = state.n;
    let eps2 = spec.softening * spec.softening;
    let mut kinetic = 0.0;
    for i in 0..n {
        let v = state.velocity(i);
        kinetic += 0.5 * state.mass(i) * (v[0] * v[0] + v[1] * v[1]);
    }
    let mut potential = 0.0;
    for i in 0..n {
        let xi = state.position(i);
        for j in (i + 1)..n {
            let xj = state.position(j);
            let (dx, dy) = (xi[0] - xj[0], xi[1] - xj[1]);
            let s = dx * dx + dy * dy + eps2;
            if s == 0.0 {
                return Err(Error::Coincident { i, j });
            }
            let pair = match spec.system {
                SystemKind::Gravity => -state.mass(i) * state.mass(j),
                SystemKind::Coulomb => state.particle(i)[1] * state.particle(j)[1],
            };
            potential += spec.constant * pair / s.sqrt();
        }
    }
    Ok(kinetic + potential)
}

/// Integrates `t_len − 1` Leapfrog steps from `initial`.
pub fn simulate(initial: ParticleState, spec: &SystemSpec, t_len: usize) -> Result<Trajectory> {
    if t_len < 2 {
        return Err(Error::invalid(format!(
            "trajectory length must be at least 2, got {t_len}"
        )));
    }
    let mut acc = acceleration(&initial, spec)?;
    let mut states = Vec::with_capacity(t_len);
    states.push(initial);
    for _ in 1..t_len {
        let (next, a) = leapfrog_with(states.last().expect("non-empty"), spec, &acc)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("leapfrog state".into()));
        }
        acc = a;
        states.push(next);
    }
    Trajectory::new(states, spec.dt)
}

/// Random stream for trajectory `index` of a dataset generated from `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates the train, validation and test splits. Trajectory `k` (counted
/// across splits in that order) draws from its own stream of `seed`.
pub fn generate_dataset(
    n: usize,
    spec: &SystemSpec,
    t_len: usize,
    counts: SplitCounts,
    seed: u64,
    exec: Exec,
) -> Result<Dataset> {
    spec.validate()?;
    if t_len < 2 {
        return Err(Error::invalid(format!(
            "trajectory length must be at least 2, got {t_len}"
        )));
    }
    let total = counts.train + counts.val + counts.test;
    let mut all = exec
        .map_range(total, |k| {
            let mut rng = trajectory_rng(seed, k as u64);
            sample_initial(n, spec, &mut rng)
                .and_then(|s0| simulate(s0, spec, t_len))
                .map_err(|e| Error::Trajectory {
                    index: k,
                    source: Box::new(e),
                })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(counts.train + counts.val);
    let val = all.split_off(counts.train);
    Ok(Dataset {
        train: all,
        val,
        test,
    })
}

/// Keeps states `0, stride, 2·stride, …`.
pub fn downsample(traj: &Trajectory, stride: usize) -> Result<Trajectory> {
    if stride < 1 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let states: Vec<ParticleState> = traj.states.iter().step_by(stride).cloned().collect();
    Trajectory::new(states, traj.dt_effective * stride as f64)
}
