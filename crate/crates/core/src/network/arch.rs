//! Architecture strings such as `Input-32C7S2-BN-AP2-512FC-VotingC10P5-AP`.
//!
//! Tokens, separated by `-`:
//!
//! | token            | meaning                                          |
//! |------------------|--------------------------------------------------|
//! | `Input`          | event frames, must come first                    |
//! | `<n>C<k>[S<s>]`  | `n` output channels, `k×k` kernel, stride `s`    |
//! | `BN`             | batch norm, directly after a conv                |
//! | `AP<k>`          | `k×k` average pool over spikes                   |
//! | `DP`             | dropout, rate 0.5                                |
//! | `<n>FC`          | dense spiking layer with `n` neurons             |
//! | `VotingC<M>P<P>` | `M` classes × `P` voting neurons                 |
//! | `AP` (last)      | temporal average of the votes                    |
//!
//! Convolutions use padding `⌊k/2⌋`. Each conv (plus its BN) is followed by a
//! LIF layer, and attention acts on that layer's spikes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionLayout, Variant};

pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("token {index} (`{token}`): {reason}")]
pub struct ArchError {
    pub index: usize,
    pub token: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Token {
    Input,
    Conv { channels: usize, kernel: usize, stride: usize },
    BatchNorm,
    AvgPool(usize),
    Dropout,
    Dense(usize),
    Voting { classes: usize, per_class: usize },
    TemporalMean,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::Input => f.write_str("Input"),
            Token::Conv { channels, kernel, stride } if stride == 1 => write!(f, "{channels}C{kernel}"),
            Token::Conv { channels, kernel, stride } => write!(f, "{channels}C{kernel}S{stride}"),
            Token::BatchNorm => f.write_str("BN"),
            Token::AvgPool(k) => write!(f, "AP{k}"),
            Token::Dropout => f.write_str("DP"),
            Token::Dense(n) => write!(f, "{n}FC"),
            Token::Voting { classes, per_class } => write!(f, "VotingC{classes}P{per_class}"),
            Token::TemporalMean => f.write_str("AP"),
        }
    }
}

fn positive(digits: &str) -> Option<usize> {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&n| n > 0)
}

fn parse_token(tok: &str) -> Option<Token> {
    match tok {
        "Input" => return Some(Token::Input),
        "BN" => return Some(Token::BatchNorm),
        "DP" => return Some(Token::Dropout),
        "AP" => return Some(Token::TemporalMean),
        _ => {}
    }
    if let Some(k) = tok.strip_prefix("AP") {
        return positive(k).map(Token::AvgPool);
    }
    if let Some(rest) = tok.strip_prefix("VotingC") {
        let (m, p) = rest.split_once('P')?;
        return Some(Token::Voting {
            classes: positive(m)?,
            per_class: positive(p)?,
        });
    }
    if let Some(n) = tok.strip_suffix("FC") {
        return positive(n).map(Token::Dense);
    }
    let (n, rest) = tok.split_once('C')?;
    let (k, s) = match rest.split_once('S') {
        Some((k, s)) => (k, positive(s)?),
        None => (rest, 1),
    };
    Some(Token::Conv {
        channels: positive(n)?,
        kernel: positive(k)?,
        stride: s,
    })
}

/// Activation shape after a stage, per sample and per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(self) -> usize {
        match self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            Shape::Map { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
        }
    }
}

/// One executable stage with its inferred shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    /// Conv, optional BN, then spiking neurons. `out` is the conv output.
    Conv {
        index: usize,
        cin: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        batch_norm: bool,
        out: Shape,
    },
    Pool { k: usize, out: Shape },
    Dropout { out: Shape },
    Dense { index: usize, fan_in: usize, out: Shape },
    Voting { fan_in: usize, classes: usize, per_class: usize },
}

impl Stage {
    pub fn out_shape(&self) -> Shape {
        match *self {
            Stage::Conv { out, .. } | Stage::Pool { out, .. } | Stage::Dropout { out } | Stage::Dense { out, .. } => out,
            Stage::Voting { classes, per_class, .. } => Shape::Flat(classes * per_class),
        }
    }
}

/// Parsed architecture bound to an input shape `[C, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    tokens: Vec<Token>,
    input: [usize; 3],
    stages: Vec<Stage>,
}

impl Architecture {
    pub fn parse(s: &str, input: [usize; 3]) -> Result<Self, ArchError> {
        let raw: Vec<&str> = s.trim().split('-').map(str::trim).collect();
        let mut tokens = Vec::with_capacity(raw.len());
        for (index, tok) in raw.iter().enumerate() {
            let t = parse_token(tok).ok_or_else(|| ArchError {
                index,
                token: tok.to_string(),
                reason: "unknown token".into(),
            })?;
            tokens.push(t);
        }
        let err = |index: usize, reason: String| ArchError {
            index,
            token: raw[index].to_string(),
            reason,
        };
        if tokens.first() != Some(&Token::Input) {
            return Err(err(0, "architecture must start with `Input`".into()));
        }
        if input.contains(&0) {
            return Err(err(0, format!("input shape {input:?} has a zero extent")));
        }

        let mut shape = Shape::Map {
            c: input[0],
            h: input[1],
            w: input[2],
        };
        let mut stages: Vec<Stage> = Vec::new();
        let (mut n_conv, mut n_dense) = (0, 0);
        let mut voting_at = None;
        for (i, &tok) in tokens.iter().enumerate().skip(1) {
            if let Some(v) = voting_at {
                if tok != Token::TemporalMean || i != tokens.len() - 1 {
                    return Err(err(i, format!("only a final `AP` may follow the voting layer (token {v})")));
                }
            }
            match tok {
                Token::Input => return Err(err(i, "`Input` may only appear first".into())),
                Token::Conv { channels, kernel, stride } => {
                    let Shape::Map { c, h, w } = shape else {
                        return Err(err(i, "convolution after a flat layer".into()));
                    };
                    let padding = kernel / 2;
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(err(i, format!("kernel {kernel} larger than padded {h}x{w} input")));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    n_conv += 1;
                    shape = Shape::Map { c: channels, h: oh, w: ow };
                    stages.push(Stage::Conv {
                        index: n_conv,
                        cin: c,
                        channels,
                        kernel,
                        stride,
                        padding,
                        batch_norm: false,
                        out: shape,
                    });
                }
                Token::BatchNorm => match stages.last_mut() {
                    Some(Stage::Conv { batch_norm, .. }) if !*batch_norm => *batch_norm = true,
                    _ => return Err(err(i, "`BN` must directly follow a convolution".into())),
                },
                Token::AvgPool(k) => {
                    let Shape::Map { c, h, w } = shape else {
                        return Err(err(i, "pooling after a flat layer".into()));
                    };
                    if h % k != 0 || w % k != 0 {
                        return Err(err(i, format!("{h}x{w} extent not divisible by {k}")));
                    }
                    shape = Shape::Map { c, h: h / k, w: w / k };
                    stages.push(Stage::Pool { k, out: shape });
                }
                Token::Dropout => stages.push(Stage::Dropout { out: shape }),
                Token::Dense(n) => {
                    n_dense += 1;
                    stages.push(Stage::Dense {
                        index: n_dense,
                        fan_in: shape.numel(),
                        out: Shape::Flat(n),
                    });
                    shape = Shape::Flat(n);
                }
                Token::Voting { classes, per_class } => {
                    stages.push(Stage::Voting {
                        fan_in: shape.numel(),
                        classes,
                        per_class,
                    });
                    shape = Shape::Flat(classes * per_class);
                    voting_at = Some(i);
                }
                Token::TemporalMean => {
                    if voting_at.is_none() {
                        return Err(err(i, "temporal `AP` must follow the voting layer".into()));
                    }
                }
            }
        }
        Ok(Self { tokens, input, stages })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// `(classes, per_class)` of the voting layer, if present.
    pub fn voting(&self) -> Option<(usize, usize)> {
        self.stages.iter().find_map(|s| match *s {
            Stage::Voting { classes, per_class, .. } => Some((classes, per_class)),
            _ => None,
        })
    }

    pub fn conv_stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().filter(|s| matches!(s, Stage::Conv { .. }))
    }

    /// Canonical string: stride 1 is omitted.
    pub fn render(&self) -> String {
        self.tokens.iter().map(Token::to_string).collect::<Vec<_>>().join("-")
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self, variant: Variant, reduction: usize) -> Result<usize, ArchError> {
        let mut total = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            total += match *stage {
                Stage::Conv {
                    cin,
                    channels,
                    kernel,
                    batch_norm,
                    ..
                } => {
                    let layout = self.layout(i, channels, reduction, variant)?;
                    cin * channels * kernel * kernel
                        + channels
                        + if batch_norm { 2 * channels } else { 0 }
                        + layout.param_count(variant)
                }
                Stage::Dense { fan_in, out, .. } => fan_in * out.numel() + out.numel(),
                Stage::Voting {
                    fan_in,
                    classes,
                    per_class,
                } => fan_in * classes * per_class + classes * per_class,
                Stage::Pool { .. } | Stage::Dropout { .. } => 0,
            };
        }
        Ok(total)
    }

    /// Dense multiply-accumulates over `steps` timesteps.
    pub fn count_mult_adds(&self, variant: Variant, reduction: usize, steps: usize) -> Result<u64, ArchError> {
        let mut per_step: u64 = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            per_step += match *stage {
                Stage::Conv {
                    cin,
                    channels,
                    kernel,
                    out,
                    ..
                } => {
                    let Shape::Map { h, w, .. } = out else { unreachable!() };
                    let layout = self.layout(i, channels, reduction, variant)?;
                    let mut n = (h * w * channels * cin * kernel * kernel) as u64;
                    if variant.has_spatial() {
                        n += (channels * h * w) as u64;
                    }
                    if variant.has_channel() {
                        n += (2 * channels * layout.bottleneck()) as u64;
                    }
                    n
                }
                Stage::Dense { fan_in, out, .. } => (fan_in * out.numel()) as u64,
                Stage::Voting {
                    fan_in,
                    classes,
                    per_class,
                } => (fan_in * classes * per_class) as u64,
                Stage::Pool { .. } | Stage::Dropout { .. } => 0,
            };
        }
        Ok(per_step * steps as u64)
    }

    pub(crate) fn layout(
        &self,
        stage: usize,
        channels: usize,
        reduction: usize,
        variant: Variant,
    ) -> Result<AttentionLayout, ArchError> {
        AttentionLayout::new(channels, reduction, variant).map_err(|e| {
            let tok = self.token_index_of_stage(stage);
            ArchError {
                index: tok,
                token: self.tokens[tok].to_string(),
                reason: e.to_string(),
            }
        })
    }

    fn token_index_of_stage(&self, stage: usize) -> usize {
        let mut seen = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            let emits = !matches!(t, Token::Input | Token::BatchNorm | Token::TemporalMean);
            if emits {
                if seen == stage {
                    return i;
                }
                seen += 1;
            }
        }
        0
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
