//! Spatial-channel attention over a layer's spike maps.
//!
//! For spikes `S: [B,C,H,W]` the spatial branch is `σ(W_s ∗ S + b)`, a 1×1
//! convolution collapsing channels to `[B,1,H,W]`. The channel branch
//! squeezes space to a per-channel firing rate `e: [B,C]` and excites it
//! through a bias-free bottleneck, `σ(W_c2 · relu(W_c1 · e))`. The fused
//! tensor is their broadcast product `[B,C,H,W]`. STFA keeps only the
//! spatial branch and CTFA only the channel branch; BL has no attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{variant} attention needs {branch} parameters")]
    MissingParams { variant: Variant, branch: &'static str },
    #[error("reduction ratio {reduction} does not divide {channels} channels")]
    Reduction { channels: usize, reduction: usize },
}

/// Attention variant of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[allow(clippy::upper_case_acronyms)]
pub enum Variant {
    BL,
    STFA,
    CTFA,
    SCTFA,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::BL, Variant::STFA, Variant::CTFA, Variant::SCTFA];

    pub fn has_spatial(self) -> bool {
        matches!(self, Variant::STFA | Variant::SCTFA)
    }

    pub fn has_channel(self) -> bool {
        matches!(self, Variant::CTFA | Variant::SCTFA)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BL => "BL",
            Variant::STFA => "STFA",
            Variant::CTFA => "CTFA",
            Variant::SCTFA => "SCTFA",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected BL, STFA, CTFA or SCTFA)"))
    }
}

/// Shapes of the attention parameters attached to one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub channels: usize,
    pub reduction: usize,
}

impl AttentionLayout {
    pub fn new(channels: usize, reduction: usize, variant: Variant) -> Result<Self, AttentionError> {
        if variant.has_channel() && (reduction == 0 || !channels.is_multiple_of(reduction)) {
            return Err(AttentionError::Reduction { channels, reduction });
        }
        Ok(Self { channels, reduction })
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / self.reduction
    }

    /// `(name suffix, shape, fan_in)` of every parameter the variant allocates.
    pub fn param_shapes(&self, variant: Variant) -> Vec<(&'static str, Vec<usize>, usize)> {
        let c = self.channels;
        let mut out = Vec::new();
        if variant.has_spatial() {
            out.push(("spatial.weight", vec![1, c, 1, 1], c));
            out.push(("spatial.bias", vec![1], c));
        }
        if variant.has_channel() {
            let r = self.bottleneck();
            out.push(("channel.fc1", vec![r, c], c));
            out.push(("channel.fc2", vec![c, r], r));
        }
        out
    }

    pub fn param_count(&self, variant: Variant) -> usize {
        self.param_shapes(variant)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Bound spatial-branch parameters.
#[derive(Debug, Clone, Copy)]
pub struct SpatialVars {
    pub weight: Var,
    pub bias: Var,
}

/// Bound channel-branch parameters.
#[derive(Debug, Clone, Copy)]
pub struct ChannelVars {
    pub fc1: Var,
    pub fc2: Var,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionVars {
    pub spatial: Option<SpatialVars>,
    pub channel: Option<ChannelVars>,
}

/// Replaces a branch output with exactly 1.0.
///
/// Structural-equivalence testing only: SCTFA with a unit spatial branch
/// must reproduce CTFA bitwise, with a unit channel branch STFA, and with
/// both the baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitBranches {
    pub spatial: bool,
    pub channel: bool,
}

/// `σ(W_s ∗ S + b)`: `[B,C,H,W] -> [B,1,H,W]`.
pub fn spatial_excitation<F: Scalar>(tape: &mut Tape<F>, s: Var, p: SpatialVars) -> Result<Var, AttentionError> {
    let z = tape.conv2d(s, p.weight, Some(p.bias), 1, 0)?;
    Ok(tape.sigmoid(z))
}

/// Per-channel spatial mean: `[B,C,H,W] -> [B,C]`.
pub fn channel_squeeze<F: Scalar>(tape: &mut Tape<F>, s: Var) -> Result<Var, AttentionError> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 4 || shape[2] * shape[3] == 0 {
        return Err(TensorError::Dimension {
            op: "channel_squeeze",
            detail: format!("spike map {shape:?}"),
        }
        .into());
    }
    let flat = tape.reshape(s, &[shape[0], shape[1], shape[2] * shape[3]])?;
    Ok(tape.mean_last_axis(flat)?)
}

/// `σ(W_c2 · relu(W_c1 · e))`: `[B,C] -> [B,C]`.
pub fn channel_excitation<F: Scalar>(tape: &mut Tape<F>, e: Var, p: ChannelVars) -> Result<Var, AttentionError> {
    let hidden = tape.linear(e, p.fc1, None)?;
    let hidden = tape.relu(hidden);
    let out = tape.linear(hidden, p.fc2, None)?;
    Ok(tape.sigmoid(out))
}

/// Broadcast product of `[B,1,H,W]` spatial and `[B,C]` channel attention.
pub fn fuse<F: Scalar>(tape: &mut Tape<F>, u_s: Var, u_c: Var) -> Result<Var, AttentionError> {
    let cs = tape.shape(u_c).to_vec();
    if cs.len() != 2 {
        return Err(TensorError::Dimension {
            op: "fuse",
            detail: format!("channel attention {cs:?} must be [B,C]"),
        }
        .into());
    }
    let u_c = tape.reshape(u_c, &[cs[0], cs[1], 1, 1])?;
    Ok(tape.mul(u_s, u_c)?)
}

/// Attention tensor for spike map `s`, or `None` for the baseline.
pub fn compute_attention<F: Scalar>(
    tape: &mut Tape<F>,
    s: Var,
    vars: &AttentionVars,
    variant: Variant,
    unit: UnitBranches,
) -> Result<Option<Var>, AttentionError> {
    if variant == Variant::BL {
        return Ok(None);
    }
    let shape = tape.shape(s).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::Dimension {
            op: "compute_attention",
            detail: format!("spike map {shape:?} must be [B,C,H,W]"),
        }
        .into());
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);

    let spatial = if variant.has_spatial() {
        Some(if unit.spatial {
            tape.constant(Tensor::ones(&[b, 1, h, w]))
        } else {
            let p = vars.spatial.ok_or(AttentionError::MissingParams {
                variant,
                branch: "spatial",
            })?;
            spatial_excitation(tape, s, p)?
        })
    } else {
        None
    };
    let channel = if variant.has_channel() {
        Some(if unit.channel {
            tape.constant(Tensor::ones(&[b, c]))
        } else {
            let p = vars.channel.ok_or(AttentionError::MissingParams {
                variant,
                branch: "channel",
            })?;
            let e = channel_squeeze(tape, s)?;
            channel_excitation(tape, e, p)?
        })
    } else {
        None
    };

    let u = match (spatial, channel) {
        (Some(us), Some(uc)) => fuse(tape, us, uc)?,
        (Some(us), None) => tape.expand(us, &shape)?,
        (None, Some(uc)) => {
            let uc = tape.reshape(uc, &[b, c, 1, 1])?;
            tape.expand(uc, &shape)?
        }
        (None, None) => unreachable!("non-baseline variant has a branch"),
    };
    Ok(Some(u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spatial_weights_give_half() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i % 2) as f64));
        let p = SpatialVars {
            weight: tape.constant(Tensor::zeros(&[1, 3, 1, 1])),
            bias: tape.constant(Tensor::zeros(&[1])),
        };
        let u = spatial_excitation(&mut tape, s, p).unwrap();
        assert_eq!(tape.shape(u), &[2, 1, 4, 4]);
        assert!(tape.value(u).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn silent_input_with_bias_three() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let p = SpatialVars {
            weight: tape.constant(Tensor::ones(&[1, 2, 1, 1])),
            bias: tape.constant(Tensor::full(&[1], 3.0)),
        };
        let u = spatial_excitation(&mut tape, s, p).unwrap();
        let expected = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((expected - 0.95257).abs() < 1e-5);
        assert!(tape.value(u).data().iter().all(|&x| x == expected));
    }

    #[test]
    fn squeeze_of_constant_channels() {
        let mut tape = Tape::<f64>::new();
        // channel 0 all ones, channel 1 half ones
        let s = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 || i % 2 == 0 { 1.0 } else { 0.0 }));
        let e = channel_squeeze(&mut tape, s).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 0.5]);
    }

    #[test]
    fn zero_channel_weights_give_half() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::from_fn(&[2, 4], |i| i as f64 / 8.0));
        let p = ChannelVars {
            fc1: tape.constant(Tensor::zeros(&[1, 4])),
            fc2: tape.constant(Tensor::zeros(&[4, 1])),
        };
        let u = channel_excitation(&mut tape, e, p).unwrap();
        assert!(tape.value(u).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn reduction_four_on_four_channels_is_width_one() {
        let layout = AttentionLayout::new(4, 4, Variant::SCTFA).unwrap();
        assert_eq!(layout.bottleneck(), 1);
        assert!(AttentionLayout::new(6, 4, Variant::SCTFA).is_err());
        assert!(AttentionLayout::new(6, 4, Variant::STFA).is_ok());
        assert_eq!(layout.param_count(Variant::SCTFA), 5 + 8);
        assert_eq!(layout.param_count(Variant::BL), 0);
    }

    #[test]
    fn fuse_constants() {
        let mut tape = Tape::<f64>::new();
        let us = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let uc = tape.constant(Tensor::full(&[1, 3], 0.5));
        let u = fuse(&mut tape, us, uc).unwrap();
        assert_eq!(tape.shape(u), &[1, 3, 2, 2]);
        assert!(tape.value(u).data().iter().all(|&x| x == 0.25));

        let us = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let uc = tape.constant(Tensor::ones(&[1, 3]));
        let u = fuse(&mut tape, us, uc).unwrap();
        assert!(tape.value(u).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn baseline_has_no_attention_and_missing_params_error() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let none = compute_attention(&mut tape, s, &AttentionVars::default(), Variant::BL, UnitBranches::default());
        assert!(none.unwrap().is_none());
        let err = compute_attention(&mut tape, s, &AttentionVars::default(), Variant::STFA, UnitBranches::default());
        assert!(matches!(err, Err(AttentionError::MissingParams { branch: "spatial", .. })));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("sctfa".parse::<Variant>().unwrap(), Variant::SCTFA);
        assert!("xyz".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::CTFA).unwrap(), "\"CTFA\"");
    }
}
