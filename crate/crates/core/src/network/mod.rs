//! Layered spiking network: parsing, time-unrolled forward pass, voting
//! decode, and complexity counts.
//!
//! Frames enter as `[B, T, C, H, W]` and are processed layer by layer with
//! all `T` steps stacked time-major along the row axis (`[T·B, ..]`). This is
//! equivalent to a step-major loop because no layer feeds back into an
//! earlier one. Within a spiking layer the steps are unrolled in order so
//! each step sees the previous step's membrane, spikes and attention.

mod arch;
mod checkpoint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arch::{ArchError, Architecture, Shape, Stage, Token, DROPOUT_RATE};
pub use checkpoint::{decode_checkpoint, read_checkpoint, write_checkpoint, CheckpointError};

use crate::attention::{compute_attention, AttentionError, AttentionVars, ChannelVars, SpatialVars, UnitBranches, Variant};
use crate::neuron::{lif_step, lif_step_attended, LayerState, LifConfig, NeuronError};
use crate::tensor::{kernels, ParamStore, Rng, Scalar, Tape, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("architecture: {0}")]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid network: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
}

/// Everything needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct NetworkSpec {
    pub arch: Architecture,
    pub variant: Variant,
    pub lif: LifConfig,
    /// Channel-attention reduction ratio.
    pub reduction: usize,
    pub steps: usize,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    arch: String,
    input: [usize; 3],
    variant: Variant,
    lif: LifConfig,
    reduction: usize,
    steps: usize,
}

impl TryFrom<SpecRepr> for NetworkSpec {
    type Error = NetworkError;

    fn try_from(r: SpecRepr) -> Result<Self, Self::Error> {
        NetworkSpec::new(&r.arch, r.input, r.variant, r.lif, r.reduction, r.steps)
    }
}

impl From<NetworkSpec> for SpecRepr {
    fn from(s: NetworkSpec) -> Self {
        SpecRepr {
            arch: s.arch.render(),
            input: s.arch.input(),
            variant: s.variant,
            lif: s.lif,
            reduction: s.reduction,
            steps: s.steps,
        }
    }
}

impl NetworkSpec {
    pub fn new(
        arch: &str,
        input: [usize; 3],
        variant: Variant,
        lif: LifConfig,
        reduction: usize,
        steps: usize,
    ) -> Result<Self, NetworkError> {
        let arch = Architecture::parse(arch, input)?;
        let spec = Self {
            arch,
            variant,
            lif,
            reduction,
            steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        self.lif.validate()?;
        if self.steps == 0 {
            return Err(NetworkError::Config("steps must be positive".into()));
        }
        match self.arch.stages().last() {
            Some(Stage::Voting { .. }) => {}
            _ => return Err(NetworkError::Config("the last layer must be a voting layer".into())),
        }
        self.arch.count_parameters(self.variant, self.reduction)?;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.arch.voting().map_or(0, |v| v.0)
    }

    pub fn per_class(&self) -> usize {
        self.arch.voting().map_or(0, |v| v.1)
    }

    pub fn count_parameters(&self) -> usize {
        self.arch
            .count_parameters(self.variant, self.reduction)
            .expect("validated spec")
    }

    pub fn count_mult_adds(&self) -> u64 {
        self.arch
            .count_mult_adds(self.variant, self.reduction, self.steps)
            .expect("validated spec")
    }
}

/// Per-step class scores `o: [B, M, T]`, each the fraction of a class's
/// voting neurons that fired.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutput<F> {
    pub o: Tensor<F>,
}

impl<F: Scalar> VoteOutput<F> {
    /// Time-averaged scores `[B, M]`.
    pub fn mean_over_time(&self) -> Tensor<F> {
        kernels::mean_last_axis(&self.o).expect("[B, M, T] votes")
    }

    /// Argmax of the time-averaged scores; ties go to the lowest class.
    pub fn predictions(&self) -> Vec<usize> {
        let mean = self.mean_over_time();
        let m = mean.shape()[1];
        mean.data().chunks(m).map(argmax).collect()
    }
}

pub fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Training or inference behaviour of batch norm and dropout.
pub enum Phase<'a> {
    /// Batch statistics (running stats updated) and dropout masks from the rng.
    Train(&'a mut Rng),
    Eval,
}

#[derive(Debug, Clone)]
struct BnBuffers<F> {
    mean: Vec<F>,
    var: Vec<F>,
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: usize,
    bias: usize,
    bn: Option<(usize, usize, usize)>,
    spatial: Option<(usize, usize)>,
    channel: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct LinearParams {
    weight: usize,
    bias: usize,
}

/// A spiking network with its parameters and batch-norm buffers.
#[derive(Debug, Clone)]
pub struct SpikingNetwork<F> {
    spec: NetworkSpec,
    params: ParamStore<F>,
    convs: Vec<ConvParams>,
    linears: Vec<LinearParams>,
    bn: Vec<BnBuffers<F>>,
    unit: UnitBranches,
    hidden: Option<Tensor<F>>,
}

fn kaiming<F: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::lit(rng.uniform_range(-bound, bound)))
}

impl<F: Scalar> SpikingNetwork<F> {
    /// Builds the network and initializes every parameter from `rng`.
    ///
    /// Each parameter draws from a stream keyed by its name, so networks
    /// that differ only in attention variant share their conv and dense
    /// weights.
    pub fn new(spec: NetworkSpec, rng: &Rng) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut linears = Vec::new();
        let mut bn = Vec::new();
        let add = |params: &mut ParamStore<F>, name: String, shape: &[usize], fan_in: Option<usize>| {
            let value = match fan_in {
                Some(f) => kaiming(&mut rng.fork_named(&name), shape, f),
                None => Tensor::zeros(shape),
            };
            params.register(name, value)
        };
        for (si, stage) in spec.arch.stages().iter().enumerate() {
            match *stage {
                Stage::Conv {
                    index,
                    cin,
                    channels,
                    kernel,
                    batch_norm,
                    ..
                } => {
                    let p = format!("conv{index}");
                    let fan = cin * kernel * kernel;
                    let weight = add(&mut params, format!("{p}.weight"), &[channels, cin, kernel, kernel], Some(fan));
                    let bias = add(&mut params, format!("{p}.bias"), &[channels], None);
                    let bn_idx = batch_norm.then(|| {
                        let g = params.register(format!("{p}.bn.gamma"), Tensor::ones(&[channels]));
                        let b = params.register(format!("{p}.bn.beta"), Tensor::zeros(&[channels]));
                        bn.push(BnBuffers {
                            mean: vec![F::zero(); channels],
                            var: vec![F::one(); channels],
                        });
                        (g, b, bn.len() - 1)
                    });
                    let layout = spec.arch.layout(si, channels, spec.reduction, spec.variant)?;
                    let mut named = layout.param_shapes(spec.variant).into_iter().map(|(suffix, shape, fan_in)| {
                        let fan = (!suffix.ends_with("bias")).then_some(fan_in);
                        add(&mut params, format!("{p}.attn.{suffix}"), &shape, fan)
                    });
                    let spatial = spec
                        .variant
                        .has_spatial()
                        .then(|| (named.next().expect("weight"), named.next().expect("bias")));
                    let channel = spec
                        .variant
                        .has_channel()
                        .then(|| (named.next().expect("fc1"), named.next().expect("fc2")));
                    convs.push(ConvParams {
                        weight,
                        bias,
                        bn: bn_idx,
                        spatial,
                        channel,
                    });
                }
                Stage::Dense { index, fan_in, out } => {
                    let n = out.numel();
                    let weight = add(&mut params, format!("fc{index}.weight"), &[n, fan_in], Some(fan_in));
                    let bias = add(&mut params, format!("fc{index}.bias"), &[n], None);
                    linears.push(LinearParams { weight, bias });
                }
                Stage::Voting {
                    fan_in,
                    classes,
                    per_class,
                } => {
                    let n = classes * per_class;
                    let weight = add(&mut params, "voting.weight".into(), &[n, fan_in], Some(fan_in));
                    let bias = add(&mut params, "voting.bias".into(), &[n], None);
                    linears.push(LinearParams { weight, bias });
                }
                Stage::Pool { .. } | Stage::Dropout { .. } => {}
            }
        }
        debug_assert_eq!(params.num_scalars(), spec.count_parameters());
        Ok(Self {
            spec,
            params,
            convs,
            linears,
            bn,
            unit: UnitBranches::default(),
            hidden: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Replaces attention branches with exact ones. Testing only.
    pub fn set_unit_branches(&mut self, unit: UnitBranches) {
        self.unit = unit;
    }

    /// Batch-norm running statistics as `(name, tensor)` pairs.
    pub fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        for (ci, conv) in self.convs.iter().enumerate() {
            if let Some((_, _, b)) = conv.bn {
                let buf = &self.bn[b];
                let n = buf.mean.len();
                out.push((format!("conv{}.bn.running_mean", ci + 1), Tensor::new(vec![n], buf.mean.clone()).expect("shape")));
                out.push((format!("conv{}.bn.running_var", ci + 1), Tensor::new(vec![n], buf.var.clone()).expect("shape")));
            }
        }
        out
    }

    pub(crate) fn set_buffers(&mut self, buffers: &[Tensor<F>]) -> Result<(), NetworkError> {
        if buffers.len() != 2 * self.bn.len() {
            return Err(NetworkError::Config(format!(
                "{} buffers for {} batch-norm layers",
                buffers.len(),
                self.bn.len()
            )));
        }
        for (buf, pair) in self.bn.iter_mut().zip(buffers.chunks(2)) {
            if pair[0].len() != buf.mean.len() || pair[1].len() != buf.var.len() {
                return Err(NetworkError::Config("batch-norm buffer size mismatch".into()));
            }
            buf.mean = pair[0].data().to_vec();
            buf.var = pair[1].data().to_vec();
        }
        Ok(())
    }

    /// Last conv layer's membrane trajectory `[B, T, C, H, W]` from the
    /// most recent forward pass.
    pub fn hidden_activation(&self) -> Result<&Tensor<F>, NetworkError> {
        self.hidden
            .as_ref()
            .ok_or_else(|| NetworkError::State("hidden activation requested before any forward pass".into()))
    }

    /// Clears recorded state; the next forward starts from rest.
    pub fn reset_states(&mut self) {
        self.hidden = None;
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&mut self, frames: &Tensor<F>, phase: Phase<'_>) -> Result<VoteOutput<F>, NetworkError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let o = self.forward_on(&mut tape, &vars, frames, phase)?;
        tape.status()?;
        Ok(VoteOutput {
            o: tape.value(o).clone(),
        })
    }

    /// Records the forward pass on `tape` with parameters bound to `vars`
    /// (see [`ParamStore::bind`]) and returns the `[B, M, T]` votes.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape<F>,
        vars: &[Var],
        frames: &Tensor<F>,
        mut phase: Phase<'_>,
    ) -> Result<Var, NetworkError> {
        let [c0, h0, w0] = self.spec.arch.input();
        let t_steps = self.spec.steps;
        let fs = frames.shape();
        if fs.len() != 5 || fs[1] != t_steps || fs[2..] != [c0, h0, w0] {
            return Err(TensorError::Dimension {
                op: "forward",
                detail: format!("frames {fs:?}, expected [B, {t_steps}, {c0}, {h0}, {w0}]"),
            }
            .into());
        }
        let b = fs[0];
        if b == 0 {
            return Err(NetworkError::Config("empty batch".into()));
        }
        self.hidden = None;
        let stacked = kernels::permute(frames, &[1, 0, 2, 3, 4])?.reshape(&[t_steps * b, c0, h0, w0])?;
        let mut x = tape.constant(stacked);
        let lif = self.spec.lif;
        let (mut ci, mut li) = (0, 0);
        let last_conv = self.convs.len();
        let stages = self.spec.arch.stages().to_vec();

        for stage in &stages {
            match *stage {
                Stage::Conv {
                    stride, padding, out, ..
                } => {
                    let cp = self.convs[ci].clone();
                    ci += 1;
                    let mut z = tape.conv2d(x, vars[cp.weight], Some(vars[cp.bias]), stride, padding)?;
                    if let Some((g, beta, bi)) = cp.bn {
                        z = self.batch_norm(tape, z, vars[g], vars[beta], bi, &phase)?;
                    }
                    let attn = AttentionVars {
                        spatial: cp.spatial.map(|(w, bias)| SpatialVars {
                            weight: vars[w],
                            bias: vars[bias],
                        }),
                        channel: cp.channel.map(|(f1, f2)| ChannelVars {
                            fc1: vars[f1],
                            fc2: vars[f2],
                        }),
                    };
                    let record = ci == last_conv;
                    let (s, vs) = self.spiking(tape, z, b, &lif, Some(&attn), record)?;
                    if record {
                        let parts: Vec<&Tensor<F>> = vs.iter().map(|&v| tape.value(v)).collect();
                        let traj = kernels::concat_rows(&parts)?;
                        let mut dims = vec![t_steps, b];
                        dims.extend(out.dims());
                        let traj = traj.reshape(&dims)?;
                        self.hidden = Some(kernels::permute(&traj, &[1, 0, 2, 3, 4])?);
                    }
                    x = s;
                }
                Stage::Pool { k, .. } => x = tape.avgpool2d(x, k)?,
                Stage::Dropout { out } => {
                    if let Phase::Train(rng) = &mut phase {
                        let n = out.numel();
                        let keep: Vec<F> = (0..b * n)
                            .map(|_| if rng.bernoulli(1.0 - DROPOUT_RATE) { F::one() } else { F::zero() })
                            .collect();
                        let mut mask = Vec::with_capacity(t_steps * b * n);
                        for _ in 0..t_steps {
                            mask.extend_from_slice(&keep);
                        }
                        let mask = Tensor::new(tape.shape(x).to_vec(), mask)?;
                        x = tape.dropout(x, DROPOUT_RATE, &mask, true)?;
                    }
                }
                Stage::Dense { .. } | Stage::Voting { .. } => {
                    let lp = self.linears[li];
                    li += 1;
                    let n_in = tape.shape(x)[1..].iter().product();
                    let flat = tape.reshape(x, &[t_steps * b, n_in])?;
                    let z = tape.linear(flat, vars[lp.weight], Some(vars[lp.bias]))?;
                    x = self.spiking(tape, z, b, &lif, None, false)?.0;
                }
            }
            let got = &tape.shape(x)[1..];
            let want = stage.out_shape().dims();
            if got != want.as_slice() {
                return Err(NetworkError::State(format!(
                    "shape audit failed after {stage:?}: runtime {got:?}, inferred {want:?}"
                )));
            }
        }

        let (m, p) = (self.spec.classes(), self.spec.per_class());
        let votes = tape.reshape(x, &[t_steps, b, m, p])?;
        let votes = tape.mean_last_axis(votes)?;
        Ok(tape.permute(votes, &[1, 2, 0])?)
    }

    fn batch_norm(
        &mut self,
        tape: &mut Tape<F>,
        z: Var,
        gamma: Var,
        beta: Var,
        idx: usize,
        phase: &Phase<'_>,
    ) -> Result<Var, NetworkError> {
        let eps = F::lit(BN_EPS);
        match phase {
            Phase::Train(_) => {
                let shape = tape.shape(z);
                let n = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = tape.batchnorm_train(z, gamma, beta, eps)?;
                let buf = &mut self.bn[idx];
                let (keep, new) = (F::lit(BN_MOMENTUM), F::lit(1.0 - BN_MOMENTUM));
                let unbias = if n > 1 { F::lit(n as f64 / (n - 1) as f64) } else { F::one() };
                for c in 0..mean.len() {
                    buf.mean[c] = keep * buf.mean[c] + new * mean[c];
                    buf.var[c] = keep * buf.var[c] + new * var[c] * unbias;
                }
                Ok(y)
            }
            Phase::Eval => {
                let buf = &self.bn[idx];
                Ok(tape.batchnorm_eval(z, gamma, beta, &buf.mean, &buf.var, eps)?)
            }
        }
    }

    /// Unrolls a LIF layer over the stacked currents `z: [T·B, ..]`.
    /// Returns the stacked spikes and, if `record`, each step's membrane.
    fn spiking(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        b: usize,
        lif: &LifConfig,
        attn: Option<&AttentionVars>,
        record: bool,
    ) -> Result<(Var, Vec<Var>), NetworkError> {
        let mut shape = tape.shape(z).to_vec();
        shape[0] = b;
        let mut state = LayerState::reset(tape, &shape);
        let mut spikes = Vec::with_capacity(self.spec.steps);
        let mut membranes = Vec::new();
        for t in 0..self.spec.steps {
            let input = tape.slice_rows(z, t * b, b)?;
            let u = match attn {
                Some(vars) if t > 0 => compute_attention(tape, state.s, vars, self.spec.variant, self.unit)?,
                _ => None,
            };
            let (next, s) = match u {
                Some(u) => {
                    state.u = Some(u);
                    lif_step_attended(tape, &state, input, lif)?
                }
                None => lif_step(tape, &state, input, lif)?,
            };
            state = next;
            spikes.push(s);
            if record {
                membranes.push(state.v);
            }
        }
        Ok((tape.concat_rows(&spikes)?, membranes))
    }
}

/// Mean over samples of the time-averaged L2 distance between two
/// `[B, T, ..]` trajectories.
pub fn trajectory_distance<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64, NetworkError> {
    if a.shape() != b.shape() || a.ndim() < 2 {
        return Err(TensorError::Dimension {
            op: "trajectory_distance",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
        .into());
    }
    let (n, t) = (a.shape()[0], a.shape()[1]);
    let inner = a.len() / (n * t).max(1);
    let mut total = 0.0;
    for (ra, rb) in a.data().chunks(inner).zip(b.data().chunks(inner)) {
        let d: f64 = ra
            .iter()
            .zip(rb)
            .map(|(&x, &y)| {
                let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum();
        total += d.sqrt();
    }
    Ok(total / (n * t) as f64)
}
