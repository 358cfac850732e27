//! The GNSTODE simulator: a graph interaction network integrated over
//! continuous depth, a dynamics head, and a learned within-step dynamics
//! integrated over normalized time.

mod params;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use params::{layer_sizes, Linear, Mlp, MlpVars, ModelParameters, NormStats, ParamGroup, ParamVars};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{knn_graph, SpatialGraph, DEFAULT_K};
use crate::ode::{integrate, OdeConfig};
use crate::physics::{ParticleState, SystemKind};

/// Hidden width of every network unless configured otherwise.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spatial_ode: OdeConfig,
    pub temporal_ode: OdeConfig,
    pub ablate_spatial: bool,
    pub ablate_temporal: bool,
    pub hidden_width: usize,
    pub k_neighbors: usize,
    /// True for features that never change (mass, charge).
    pub static_feature_mask: Vec<bool>,
}

impl ModelConfig {
    pub fn new(system: SystemKind) -> Self {
        Self {
            spatial_ode: OdeConfig::rk4(2),
            temporal_ode: OdeConfig::rk4(4),
            ablate_spatial: false,
            ablate_temporal: false,
            hidden_width: DEFAULT_HIDDEN,
            k_neighbors: DEFAULT_K,
            static_feature_mask: system.static_mask().to_vec(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.static_feature_mask.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial_ode.validate()?;
        self.temporal_ode.validate()?;
        if self.hidden_width < 1 {
            return Err(Error::invalid("hidden width must be at least 1"));
        }
        if self.k_neighbors < 1 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(())
    }

    /// Checks that `params` were built for this configuration.
    pub fn check_params(&self, params: &ModelParameters) -> Result<()> {
        self.validate()?;
        let d = self.feature_dim();
        let [m, u, h, t] = layer_sizes(d, self.hidden_width);
        for (group, sizes) in ParamGroup::ALL.into_iter().zip([m, u, h, t]) {
            let mlp = params.mlp(group);
            let actual: Vec<usize> = std::iter::once(mlp.input_dim())
                .chain(mlp.layers.iter().map(|l| l.weight.cols()))
                .collect();
            let consistent = mlp
                .layers
                .windows(2)
                .all(|w| w[0].weight.cols() == w[1].weight.rows())
                && mlp.layers.iter().all(|l| l.bias.shape() == [1, l.weight.cols()]);
            if actual != sizes || !consistent {
                return Err(Error::Incompatible(format!(
                    "{} network has layer sizes {actual:?}, expected {sizes:?}",
                    group.name()
                )));
            }
        }
        if params.norm.dim() != d || params.norm.std.len() != d || params.norm.delta_std.len() != d {
            return Err(Error::Incompatible(format!(
                "normalization has {} features, model has {d}",
                params.norm.dim()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// Graph connectivity and scaled edge features recorded on a tape.
#[derive(Debug, Clone)]
pub struct GraphInput {
    n: usize,
    receivers: Arc<[usize]>,
    senders: Arc<[usize]>,
    edges: Var,
}

impl GraphInput {
    /// Edge features are divided by `length_scale`.
    pub fn new(tape: &mut Tape, graph: &SpatialGraph, length_scale: f64) -> Self {
        let edges = tape.constant(graph.edge_features().map(|v| v / length_scale));
        Self {
            n: graph.n(),
            receivers: graph.receivers().clone(),
            senders: graph.senders().clone(),
            edges,
        }
    }

    fn num_edges(&self) -> usize {
        self.receivers.len()
    }
}

/// Per-state constants: the raw and normalized state and the column masks.
#[derive(Debug, Clone)]
pub struct Frame {
    pub x: Var,
    pub xn: Var,
    /// Dynamic-column mask times increment scale, `n × d`.
    scale: Var,
    dyn_mask: Var,
    /// Input state with dynamic columns zeroed.
    static_part: Var,
}

impl Frame {
    pub fn new(tape: &mut Tape, state: &ParticleState, norm: &NormStats, mask: &[bool]) -> Self {
        let (n, d) = (state.n(), state.dim());
        let tile = |f: &dyn Fn(usize) -> f64| Tensor::matrix(n, d, (0..n * d).map(|k| f(k % d)).collect());
        let scale = tile(&|c| if mask[c] { 0.0 } else { norm.delta_std[c] });
        let dyn_mask = tile(&|c| if mask[c] { 0.0 } else { 1.0 });
        let static_part = Tensor::matrix(
            n,
            d,
            state
                .features()
                .iter()
                .enumerate()
                .map(|(k, &v)| if mask[k % d] { v } else { 0.0 })
                .collect(),
        );
        Self {
            x: tape.constant(state.to_tensor()),
            xn: tape.constant(Tensor::matrix(n, d, norm.normalize(state.features()))),
            scale: tape.constant(scale),
            dyn_mask: tape.constant(dyn_mask),
            static_part: tape.constant(static_part),
        }
    }
}

/// Output of the dynamics head.
#[derive(Debug, Clone, Copy)]
pub struct Dynamics {
    /// In increment units, static columns zero.
    pub normalized: Var,
    /// In raw feature units, static columns zero.
    pub raw: Var,
}

/// Model parameters bound to one tape.
pub struct Forward<'a> {
    pub vars: ParamVars,
    params: &'a ModelParameters,
    config: &'a ModelConfig,
}

impl<'a> Forward<'a> {
    /// Records the parameters as gradient-tracked leaves when `trainable`.
    pub fn new(
        tape: &mut Tape,
        params: &'a ModelParameters,
        config: &'a ModelConfig,
        trainable: bool,
    ) -> Result<Self> {
        config.check_params(params)?;
        Ok(Self {
            vars: params.bind(tape, trainable),
            params,
            config,
        })
    }

    pub fn graph_input(&self, tape: &mut Tape, graph: &SpatialGraph, system: SystemKind) -> GraphInput {
        GraphInput::new(tape, graph, self.params.norm.length_scale(system))
    }

    pub fn frame(&self, tape: &mut Tape, state: &ParticleState) -> Frame {
        Frame::new(tape, state, &self.params.norm, &self.config.static_feature_mask)
    }

    /// `dH/dl` at depth `l`: edge messages summed per receiver, then a node
    /// update.
    pub fn gin_derivative(&self, tape: &mut Tape, h: Var, graph: &GraphInput, l: f64) -> Result<Var> {
        let hv = tape.value(h);
        if hv.rows() != graph.n {
            return Err(Error::Shape {
                op: "gin_derivative",
                lhs: hv.shape().to_vec(),
                rhs: vec![graph.n],
            });
        }
        let e = graph.num_edges();
        let h_i = tape.gather_rows(h, graph.receivers.clone())?;
        let h_j = tape.gather_rows(h, graph.senders.clone())?;
        let l_edge = tape.constant(Tensor::full(&[e, 1], l));
        let msg_in = tape.concat(&[h_i, h_j, graph.edges, l_edge], 1)?;
        let msg = self.vars.message.forward(tape, msg_in)?;
        let agg = tape.segment_sum(msg, graph.receivers.clone(), graph.n)?;
        let l_node = tape.constant(Tensor::full(&[graph.n, 1], l));
        let upd_in = tape.concat(&[h, agg, l_node], 1)?;
        self.vars.update.forward(tape, upd_in)
    }

    /// `H_L` from `H_0`, or one skip-connected step when the spatial ODE is
    /// ablated.
    pub fn spatial_ode_solve(&self, tape: &mut Tape, h0: Var, graph: &GraphInput) -> Result<Var> {
        if self.config.ablate_spatial {
            let dh = self.gin_derivative(tape, h0, graph, 0.0)?;
            return tape.add(h0, dh);
        }
        integrate(
            tape,
            |t, h, l| self.gin_derivative(t, h, graph, l.min(1.0)),
            h0,
            0.0,
            1.0,
            &self.config.spatial_ode,
        )
    }

    pub fn dynamics_head(&self, tape: &mut Tape, h: Var, frame: &Frame) -> Result<Dynamics> {
        let out = self.vars.head.forward(tape, h)?;
        let normalized = tape.mul(out, frame.dyn_mask)?;
        let raw = tape.mul(out, frame.scale)?;
        Ok(Dynamics { normalized, raw })
    }

    /// `D_τ = D_t + τ·g([D_t ‖ X_t ‖ τ])`, with `g` in increment units.
    pub fn temporal_dynamics(&self, tape: &mut Tape, dynamics: Dynamics, frame: &Frame, tau: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("τ = {tau} is outside [0, 1]")));
        }
        let n = tape.value(frame.x).rows();
        let tau_col = tape.constant(Tensor::full(&[n, 1], tau));
        let input = tape.concat(&[dynamics.normalized, frame.xn, tau_col], 1)?;
        let g = self.vars.temporal.forward(tape, input)?;
        let g = tape.mul(g, frame.scale)?;
        let g = tape.scale(g, tau)?;
        tape.add(dynamics.raw, g)
    }

    /// Records one simulator step and returns `X̂_{t+1}` in raw units.
    pub fn predict(&self, tape: &mut Tape, state: &ParticleState) -> Result<Var> {
        if state.dim() != self.config.feature_dim() {
            return Err(Error::Incompatible(format!(
                "state has {} features, model has {}",
                state.dim(),
                self.config.feature_dim()
            )));
        }
        let graph = knn_graph(state, self.config.k_neighbors)?;
        let graph = self.graph_input(tape, &graph, state.system());
        let frame = self.frame(tape, state);
        let h = self.spatial_ode_solve(tape, frame.xn, &graph)?;
        let dynamics = self.dynamics_head(tape, h, &frame)?;
        let x_next = if self.config.ablate_temporal {
            tape.add(frame.x, dynamics.raw)?
        } else {
            integrate(
                tape,
                |t, _, tau| self.temporal_dynamics(t, dynamics, &frame, tau.min(1.0)),
                frame.x,
                0.0,
                1.0,
                &self.config.temporal_ode,
            )?
        };
        let moving = tape.mul(x_next, frame.dyn_mask)?;
        let out = tape.add(moving, frame.static_part)?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite("prediction".into()));
        }
        Ok(out)
    }
}

/// `Σ ((X̂ − X)/σ)²` recorded on the tape.
pub fn step_loss_var(tape: &mut Tape, pred: Var, target: &ParticleState, norm: &NormStats) -> Result<Var> {
    let d = target.dim();
    let n = target.n();
    let inv = Tensor::matrix(n, d, (0..n * d).map(|k| 1.0 / norm.std[k % d]).collect());
    let inv = tape.constant(inv);
    let t = tape.constant(target.to_tensor());
    let diff = tape.sub(pred, t)?;
    let z = tape.mul(diff, inv)?;
    let sq = tape.mul(z, z)?;
    Ok(tape.sum_all(sq))
}

/// Normalized squared one-step error between two states.
pub fn step_loss(pred: &ParticleState, target: &ParticleState, norm: &NormStats) -> Result<f64> {
    if pred.n() != target.n() || pred.dim() != target.dim() || norm.dim() != target.dim() {
        return Err(Error::Shape {
            op: "step_loss",
            lhs: vec![pred.n(), pred.dim()],
            rhs: vec![target.n(), target.dim()],
        });
    }
    let d = target.dim();
    Ok(pred
        .features()
        .iter()
        .zip(target.features())
        .enumerate()
        .map(|(k, (a, b))| {
            let z = (a - b) / norm.std[k % d];
            z * z
        })
        .sum())
}

/// Loss of one `(X_t, X_{t+1})` pair and its gradient for every parameter
/// tensor in canonical order.
pub fn loss_and_gradients(
    params: &ModelParameters,
    config: &ModelConfig,
    x: &ParticleState,
    target: &ParticleState,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let fwd = Forward::new(&mut tape, params, config, true)?;
    let pred = fwd.predict(&mut tape, x)?;
    let loss = step_loss_var(&mut tape, pred, target, &params.norm)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), fwd.vars.gradients(&grads)?))
}

/// Loss of one pair without gradients.
pub fn pair_loss(
    params: &ModelParameters,
    config: &ModelConfig,
    x: &ParticleState,
    target: &ParticleState,
) -> Result<f64> {
    let pred = predict_step(x, params, config)?;
    step_loss(&pred, target, &params.norm)
}

/// `X̂_{t+1}` for `state`.
pub fn predict_step(state: &ParticleState, params: &ModelParameters, config: &ModelConfig) -> Result<ParticleState> {
    let mut tape = Tape::new();
    let fwd = Forward::new(&mut tape, params, config, false)?;
    let out = fwd.predict(&mut tape, state)?;
    Ok(ParticleState::from_raw(
        state.system(),
        state.n(),
        tape.value(out).data().to_vec(),
    ))
}

/// GIN derivative evaluated outside any training tape.
pub fn gin_derivative(
    h: &Tensor,
    graph: &SpatialGraph,
    l: f64,
    params: &ModelParameters,
    config: &ModelConfig,
    system: SystemKind,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::invalid(format!("depth l = {l} is outside [0, 1]")));
    }
    h.check_finite("hidden state")?;
    let mut tape = Tape::new();
    let fwd = Forward::new(&mut tape, params, config, false)?;
    let g = fwd.graph_input(&mut tape, graph, system);
    let hv = tape.constant(h.clone());
    let out = fwd.gin_derivative(&mut tape, hv, &g, l)?;
    Ok(tape.value(out).clone())
}

/// `H_L` for `state` on `graph`.
pub fn spatial_ode_solve(
    state: &ParticleState,
    graph: &SpatialGraph,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fwd = Forward::new(&mut tape, params, config, false)?;
    let g = fwd.graph_input(&mut tape, graph, state.system());
    let frame = fwd.frame(&mut tape, state);
    let h = fwd.spatial_ode_solve(&mut tape, frame.xn, &g)?;
    Ok(tape.value(h).clone())
}

/// Temporal dynamics `D_t` (raw units) from a hidden state.
pub fn dynamics_head(
    h: &Tensor,
    state: &ParticleState,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Tensor> {
    h.check_finite("hidden state")?;
    let mut tape = Tape::new();
    let fwd = Forward::new(&mut tape, params, config, false)?;
    let frame = fwd.frame(&mut tape, state);
    let hv = tape.constant(h.clone());
    let d = fwd.dynamics_head(&mut tape, hv, &frame)?;
    Ok(tape.value(d.raw).clone())
}

/// `D_τ` given raw `D_t` for `state`.
pub fn temporal_dynamics_fn(
    d_t: &Tensor,
    state: &ParticleState,
    tau: f64,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fwd = Forward::new(&mut tape, params, config, false)?;
    let frame = fwd.frame(&mut tape, state);
    let (n, d) = (state.n(), state.dim());
    if d_t.shape() != [n, d] {
        return Err(Error::Shape {
            op: "temporal_dynamics_fn",
            lhs: d_t.shape().to_vec(),
            rhs: vec![n, d],
        });
    }
    let mask = &config.static_feature_mask;
    let std = &params.norm.delta_std;
    let dn = d_t
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask[k % d] { 0.0 } else { v / std[k % d] })
        .collect();
    let raw = tape.constant(d_t.clone());
    let normalized = tape.constant(Tensor::matrix(n, d, dn));
    let out = fwd.temporal_dynamics(&mut tape, Dynamics { normalized, raw }, &frame, tau)?;
    Ok(tape.value(out).clone())
}
