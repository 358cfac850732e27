use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::physics::{SystemKind, Trajectory};

/// Per-feature standardization statistics of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Scale of one-step increments `X_{t+1} − X_t`; network outputs are
    /// expressed in these units.
    pub delta_std: Vec<f64>,
}

impl NormStats {
    /// Zero mean, unit scale: normalization is the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            delta_std: vec![1.0; d],
        }
    }

    /// Mean and population standard deviation of every feature over every
    /// particle and time stamp, and root-mean-square of one-step increments.
    /// Constant features get scale 1.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::invalid("no trajectories to normalize"))?;
        let d = first.first().dim();
        let mut count = 0usize;
        let mut sum = vec![0.0; d];
        for s in trajs.iter().flat_map(|t| t.states()) {
            for p in s.features().chunks(d) {
                for (acc, v) in sum.iter_mut().zip(p) {
                    *acc += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; d];
        for s in trajs.iter().flat_map(|t| t.states()) {
            for p in s.features().chunks(d) {
                for ((acc, v), m) in sq.iter_mut().zip(p).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let floor = |v: f64| if v > 1e-12 { v } else { 1.0 };
        let std = sq.iter().map(|s| floor((s / count as f64).sqrt())).collect();
        let mut dsq = vec![0.0; d];
        let mut dcount = 0usize;
        for t in trajs {
            for w in t.states().windows(2) {
                for (a, b) in w[0].features().chunks(d).zip(w[1].features().chunks(d)) {
                    for ((acc, x0), x1) in dsq.iter_mut().zip(a).zip(b) {
                        *acc += (x1 - x0) * (x1 - x0);
                    }
                    dcount += 1;
                }
            }
        }
        let delta_std = dsq
            .iter()
            .map(|s| floor((s / dcount.max(1) as f64).sqrt()))
            .collect();
        Ok(Self {
            mean,
            std,
            delta_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Row-major `n × d` standardized copy of `features`.
    pub fn normalize(&self, features: &[f64]) -> Vec<f64> {
        let d = self.dim();
        features
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) / self.std[k % d])
            .collect()
    }

    /// Length scale for edge features: mean of the two coordinate scales.
    pub fn length_scale(&self, system: SystemKind) -> f64 {
        let c = system.position_col();
        0.5 * (self.std[c] + self.std[c + 1])
    }
}

/// Fully connected layer `x·W + b`, `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tanh multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Weights uniform on `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Linear {
                    weight: Tensor::zeros(&[w[0], w[1]]),
                    bias: Tensor::zeros(&[1, w[1]]),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }
}

/// Tape handles for one [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if k < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// The four learnable networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Per-edge message function.
    Message,
    /// Per-node update function.
    Update,
    /// Hidden state to temporal dynamics.
    Head,
    /// Correction to the temporal dynamics inside a step.
    Temporal,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Message,
        ParamGroup::Update,
        ParamGroup::Head,
        ParamGroup::Temporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Message => "message",
            ParamGroup::Update => "update",
            ParamGroup::Head => "head",
            ParamGroup::Temporal => "temporal",
        }
    }
}

/// All learnable weights plus the normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub message: Mlp,
    pub update: Mlp,
    pub head: Mlp,
    pub temporal: Mlp,
    pub norm: NormStats,
}

/// Layer widths of the four networks for feature dimension `d` and hidden
/// width `w` (two hidden layers each).
pub fn layer_sizes(d: usize, w: usize) -> [Vec<usize>; 4] {
    [
        vec![2 * d + 3 + 1, w, w, d],
        vec![2 * d + 1, w, w, d],
        vec![d, w, w, d],
        vec![2 * d + 1, w, w, d],
    ]
}

impl ModelParameters {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, norm: NormStats, rng: &mut R) -> Self {
        let [m, u, h, t] = layer_sizes(d, hidden);
        Self {
            message: Mlp::init(&m, rng),
            update: Mlp::init(&u, rng),
            head: Mlp::init(&h, rng),
            temporal: Mlp::init(&t, rng),
            norm,
        }
    }

    pub fn zeros(d: usize, hidden: usize, norm: NormStats) -> Self {
        let [m, u, h, t] = layer_sizes(d, hidden);
        Self {
            message: Mlp::zeros(&m),
            update: Mlp::zeros(&u),
            head: Mlp::zeros(&h),
            temporal: Mlp::zeros(&t),
            norm,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn hidden_width(&self) -> usize {
        self.head.layers[0].weight.cols()
    }

    pub fn mlp(&self, group: ParamGroup) -> &Mlp {
        match group {
            ParamGroup::Message => &self.message,
            ParamGroup::Update => &self.update,
            ParamGroup::Head => &self.head,
            ParamGroup::Temporal => &self.temporal,
        }
    }

    pub fn mlp_mut(&mut self, group: ParamGroup) -> &mut Mlp {
        match group {
            ParamGroup::Message => &mut self.message,
            ParamGroup::Update => &mut self.update,
            ParamGroup::Head => &mut self.head,
            ParamGroup::Temporal => &mut self.temporal,
        }
    }

    /// Every weight tensor in canonical order with its name and group.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for g in ParamGroup::ALL {
            for (k, l) in self.mlp(g).layers.iter().enumerate() {
                out.push((format!("{}.{k}.weight", g.name()), g, &l.weight));
                out.push((format!("{}.{k}.bias", g.name()), g, &l.bias));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for mlp in [
            &mut self.message,
            &mut self.update,
            &mut self.head,
            &mut self.temporal,
        ] {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Overwrites every tensor, in canonical order.
    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Shape {
                op: "set_tensors",
                lhs: vec![slots.len()],
                rhs: vec![values.len()],
            });
        }
        for (slot, v) in slots.iter_mut().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "set_tensors",
                    lhs: slot.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut bind_mlp = |m: &Mlp| MlpVars {
            layers: m
                .layers
                .iter()
                .map(|l| {
                    if trainable {
                        (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                    } else {
                        (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                    }
                })
                .collect(),
        };
        ParamVars {
            message: bind_mlp(&self.message),
            update: bind_mlp(&self.update),
            head: bind_mlp(&self.head),
            temporal: bind_mlp(&self.temporal),
        }
    }
}

/// Parameters recorded on a tape, mirroring [`ModelParameters`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub message: MlpVars,
    pub update: MlpVars,
    pub head: MlpVars,
    pub temporal: MlpVars,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        [&self.message, &self.update, &self.head, &self.temporal]
            .iter()
            .flat_map(|m| m.layers.iter().flat_map(|&(w, b)| [w, b]))
            .collect()
    }

    /// Gradients in canonical tensor order.
    pub fn gradients(&self, grads: &Gradients) -> Result<Vec<Tensor>> {
        self.vars()
            .into_iter()
            .map(|v| grads.get(v).cloned().ok_or(Error::ForeignVar))
            .collect()
    }
}
