//! Naive reference implementations and fixtures shared by the test targets.
#![allow(dead_code)]

use spiking_attention::network::{NetworkSpec, Phase, SpikingNetwork};
use spiking_attention::neuron::{LifConfig, SpikeMode};
use spiking_attention::tensor::{Rng, Tape, Tensor};
use spiking_attention::training::mse_vote_loss;
use spiking_attention::attention::Variant;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-scale, scale))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct six-loop cross-correlation with explicit zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[co, ci, ky, kx]) * x.at(&[bi, ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut out = Vec::new();
    for r in 0..n {
        for c in 0..o {
            let mut acc = b.map_or(0.0, |b| b.data()[c]);
            for k in 0..f {
                acc += x.at(&[r, k]) * w.at(&[c, k]);
            }
            out.push(acc);
        }
    }
    out
}

pub fn naive_avgpool(x: &Tensor<f64>, k: usize) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for b in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..s[2] / k {
                for ox in 0..s[3] / k {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.at(&[b, c, oy * k + dy, ox * k + dx]);
                        }
                    }
                    out.push(acc / (k * k) as f64);
                }
            }
        }
    }
    out
}

/// Training-mode batch norm on `[N,C,H,W]` with biased batch variance.
pub fn naive_batchnorm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = (n * h * w) as f64;
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    sum += x.at(&[b, ch, y, xx]);
                }
            }
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    sq += (x.at(&[b, ch, y, xx]) - mean).powi(2);
                }
            }
        }
        means[ch] = mean;
        vars[ch] = sq / m;
    }
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let z = (x.at(&[b, ch, y, xx]) - means[ch]) / (vars[ch] + eps).sqrt();
                    out.push(gamma[ch] * z + beta[ch]);
                }
            }
        }
    }
    (out, means, vars)
}

/// Spatial mean of every channel: `[B,C,H,W] -> [B,C]`.
pub fn naive_channel_squeeze(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for b in 0..s[0] {
        for c in 0..s[1] {
            let mut acc = 0.0;
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    acc += x.at(&[b, c, y, xx]);
                }
            }
            out.push(acc / (s[2] * s[3]) as f64);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Spatial and channel attention maps of one spike tensor, written out
/// element by element.
pub fn naive_attention(
    s: &Tensor<f64>,
    ws: &[f64],
    bs: f64,
    fc1: &Tensor<f64>,
    fc2: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let sh = s.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut us = Vec::new();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let z: f64 = (0..c).map(|ch| ws[ch] * s.at(&[bi, ch, y, x])).sum();
                us.push(sigmoid(z + bs));
            }
        }
    }
    let e = naive_channel_squeeze(s);
    let hidden = fc1.shape()[0];
    let mut uc = Vec::new();
    for bi in 0..b {
        let z: Vec<f64> = (0..hidden)
            .map(|j| (0..c).map(|k| fc1.at(&[j, k]) * e[bi * c + k]).sum::<f64>().max(0.0))
            .collect();
        for ch in 0..c {
            uc.push(sigmoid((0..hidden).map(|j| fc2.at(&[ch, j]) * z[j]).sum()));
        }
    }
    (us, uc)
}

/// Random event-count frames `[B,T,2,H,W]` with values in {0,1,2}.
pub fn random_frames(rng: &mut Rng, b: usize, t: usize, h: usize, w: usize, density: f64) -> Tensor<f64> {
    Tensor::from_fn(&[b, t, 2, h, w], |_| {
        if rng.bernoulli(density) {
            1.0 + rng.below(2) as f64
        } else {
            0.0
        }
    })
}

pub const GRADCHECK_ARCH: &str = "Input-4C3-BN-AP2-4C3-BN-VotingC2P2-AP";

/// Smooth-mode 64-bit SCTFA network for finite-difference checks.
pub fn gradcheck_net(seed: u64) -> SpikingNetwork<f64> {
    let lif = LifConfig::new(0.5, 0.7).with_mode(SpikeMode::Smooth);
    let spec = NetworkSpec::new(GRADCHECK_ARCH, [2, 6, 6], Variant::SCTFA, lif, 4, 3).unwrap();
    SpikingNetwork::new(spec, &Rng::new(seed)).unwrap()
}

pub fn loss_value(net: &mut SpikingNetwork<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = net.params().iter().map(|p| tape.constant(p.value.clone())).collect();
    let o = net.forward_on(&mut tape, &vars, x, Phase::Train(&mut Rng::new(0))).unwrap();
    let l = mse_vote_loss(&mut tape, o, labels).unwrap();
    tape.value(l).item()
}

/// Analytic gradient of every parameter.
pub fn analytic_grads(net: &mut SpikingNetwork<f64>, x: &Tensor<f64>, labels: &[usize]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let o = net.forward_on(&mut tape, &vars, x, Phase::Train(&mut Rng::new(0))).unwrap();
    let l = mse_vote_loss(&mut tape, o, labels).unwrap();
    tape.backward(l).unwrap();
    net.params_mut().zero_grad();
    net.params_mut().accumulate_grads(&tape, &vars);
    net.params().iter().map(|p| p.grad.clone()).collect()
}

/// Per-parameter result of a central-difference check.
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// Norms below this count as zero in the relative error.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences with step `h`.
/// The relative error of a parameter tensor is
/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_NORM_FLOOR)`.
pub fn gradient_check(net: &mut SpikingNetwork<f64>, x: &Tensor<f64>, labels: &[usize], h: f64) -> Vec<GradCheck> {
    let analytic = analytic_grads(net, x, labels);
    let mut out = Vec::new();
    for (pi, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = net.params().get(pi).value.data()[k];
            net.params_mut().get_mut(pi).value.data_mut()[k] = orig + h;
            let up = loss_value(net, x, labels);
            net.params_mut().get_mut(pi).value.data_mut()[k] = orig - h;
            let down = loss_value(net, x, labels);
            net.params_mut().get_mut(pi).value.data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = a.data().iter().zip(&numeric).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let an = a.l2_norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(GradCheck {
            name: net.params().get(pi).name.clone(),
            rel_err: diff / an.max(nn).max(GRAD_NORM_FLOOR),
            analytic_norm: an,
        });
    }
    out
}
