//! Iterative leaky integrate-and-fire dynamics on the tape.
//!
//! Plain update: `v' = κ·v·(1 − s) + I`, `s' = spike(v')`.
//! Attended update: `v' = κ·v·u·(1 − s) + I`, where `u` is the attention
//! tensor computed from the previous step's spikes. The reset factor and
//! the membrane history both stay on the graph, so gradients flow through
//! time as well as across layers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attended update called without an attention tensor")]
    MissingAttention,
    #[error("invalid LIF configuration: {0}")]
    Config(String),
}

/// Forward behaviour of the spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpikeMode {
    /// Binary step forward, arctan surrogate backward.
    #[default]
    Heaviside,
    /// Arctan sigmoid forward with its exact derivative. Used for
    /// finite-difference gradient checks.
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifConfig {
    pub v_th: f64,
    /// Membrane decay factor κ_τ.
    pub kappa: f64,
    /// Surrogate slope.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub mode: SpikeMode,
}

fn default_alpha() -> f64 {
    2.0
}

impl LifConfig {
    pub fn new(v_th: f64, kappa: f64) -> Self {
        Self {
            v_th,
            kappa,
            alpha: 2.0,
            mode: SpikeMode::Heaviside,
        }
    }

    pub fn with_mode(mut self, mode: SpikeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(NeuronError::Config(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(NeuronError::Config(format!("v_th {} must be positive", self.v_th)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(NeuronError::Config(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    pub fn spike<F: Scalar>(&self, tape: &mut Tape<F>, v: Var) -> Var {
        let (th, a) = (F::lit(self.v_th), F::lit(self.alpha));
        match self.mode {
            SpikeMode::Heaviside => tape.spike(v, th, a),
            SpikeMode::Smooth => tape.smooth_spike(v, th, a),
        }
    }
}

/// Membrane potential, last spikes, and pending attention of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub v: Var,
    pub s: Var,
    pub u: Option<Var>,
}

impl LayerState {
    /// Resting state: `v = 0`, `s = 0`, no attention.
    pub fn reset<F: Scalar>(tape: &mut Tape<F>, shape: &[usize]) -> Self {
        let v = tape.constant(Tensor::zeros(shape));
        let s = tape.constant(Tensor::zeros(shape));
        Self { v, s, u: None }
    }

    pub fn shape<'a, F: Scalar>(&self, tape: &'a Tape<F>) -> &'a [usize] {
        tape.shape(self.v)
    }
}

fn check_shapes<F: Scalar>(tape: &Tape<F>, state: &LayerState, input: Var) -> Result<(), NeuronError> {
    let (v, s, i) = (tape.shape(state.v), tape.shape(state.s), tape.shape(input));
    if v != s || v != i {
        return Err(TensorError::Dimension {
            op: "lif_step",
            detail: format!("v {v:?}, s {s:?}, input {i:?}"),
        }
        .into());
    }
    Ok(())
}

fn integrate<F: Scalar>(
    tape: &mut Tape<F>,
    state: &LayerState,
    input: Var,
    u: Option<Var>,
    cfg: &LifConfig,
) -> Result<(LayerState, Var), NeuronError> {
    let mut hist = tape.scale(state.v, F::lit(cfg.kappa));
    if let Some(u) = u {
        hist = tape.mul(hist, u)?;
    }
    let keep = tape.affine(state.s, -F::one(), F::one());
    let hist = tape.mul(hist, keep)?;
    let v = tape.add(hist, input)?;
    let s = cfg.spike(tape, v);
    Ok((LayerState { v, s, u: None }, s))
}

/// One plain LIF step.
pub fn lif_step<F: Scalar>(
    tape: &mut Tape<F>,
    state: &LayerState,
    input: Var,
    cfg: &LifConfig,
) -> Result<(LayerState, Var), NeuronError> {
    check_shapes(tape, state, input)?;
    integrate(tape, state, input, None, cfg)
}

/// One LIF step whose decayed history is gated by `state.u`.
pub fn lif_step_attended<F: Scalar>(
    tape: &mut Tape<F>,
    state: &LayerState,
    input: Var,
    cfg: &LifConfig,
) -> Result<(LayerState, Var), NeuronError> {
    check_shapes(tape, state, input)?;
    let u = state.u.ok_or(NeuronError::MissingAttention)?;
    crate::tensor::kernels::broadcast_shape(tape.shape(u), tape.shape(state.v))
        .ok()
        .filter(|b| b == tape.shape(state.v))
        .ok_or_else(|| TensorError::Dimension {
            op: "lif_step_attended",
            detail: format!("attention {:?} vs membrane {:?}", tape.shape(u), tape.shape(state.v)),
        })?;
    integrate(tape, state, input, Some(u), cfg)
}
