mod common;

use common::*;
use proptest::prelude::*;
use spiking_attention::attention::*;
use spiking_attention::tensor::{Rng, Tape, Tensor};

fn binary(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 })
}

struct Params {
    ws: Tensor<f64>,
    bs: Tensor<f64>,
    fc1: Tensor<f64>,
    fc2: Tensor<f64>,
}

fn params(rng: &mut Rng, c: usize, r: usize) -> Params {
    Params {
        ws: random_tensor(rng, &[1, c, 1, 1], 2.0),
        bs: random_tensor(rng, &[1], 1.0),
        fc1: random_tensor(rng, &[c / r, c], 2.0),
        fc2: random_tensor(rng, &[c, c / r], 2.0),
    }
}

fn bind(tape: &mut Tape<f64>, p: &Params) -> AttentionVars {
    AttentionVars {
        spatial: Some(SpatialVars {
            weight: tape.constant(p.ws.clone()),
            bias: tape.constant(p.bs.clone()),
        }),
        channel: Some(ChannelVars {
            fc1: tape.constant(p.fc1.clone()),
            fc2: tape.constant(p.fc2.clone()),
        }),
    }
}

#[test]
fn spatial_examples() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::zeros(&[2, 8, 4, 4]));
    let vars = SpatialVars {
        weight: tape.constant(Tensor::zeros(&[1, 8, 1, 1])),
        bias: tape.constant(Tensor::full(&[1], 3.0)),
    };
    let u = spatial_excitation(&mut tape, s, vars).unwrap();
    assert_eq!(tape.shape(u), &[2, 1, 4, 4]);
    assert!(tape.value(u).data().iter().all(|&x| (x - 0.952_574_126_822_433_4).abs() < 1e-15));
}

#[test]
fn squeeze_examples() {
    let mut tape = Tape::<f64>::new();
    let mut x = Tensor::zeros(&[1, 2, 2, 2]);
    x.data_mut()[..4].fill(1.0);
    x.data_mut()[4..6].fill(1.0);
    let s = tape.constant(x);
    let e = channel_squeeze(&mut tape, s).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 0.5]);
}

#[test]
fn zero_weights_give_half() {
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::full(&[3, 4], 0.7));
    let vars = ChannelVars {
        fc1: tape.constant(Tensor::zeros(&[1, 4])),
        fc2: tape.constant(Tensor::zeros(&[4, 1])),
    };
    let u = channel_excitation(&mut tape, e, vars).unwrap();
    assert!(tape.value(u).data().iter().all(|&x| x == 0.5));
}

#[test]
fn bottleneck_and_divisibility() {
    let layout = AttentionLayout::new(4, 4, Variant::SCTFA).unwrap();
    assert_eq!(layout.bottleneck(), 1);
    assert_eq!(layout.param_count(Variant::SCTFA), 4 + 1 + 4 + 4);
    assert_eq!(layout.param_count(Variant::STFA), 5);
    assert_eq!(layout.param_count(Variant::CTFA), 8);
    assert_eq!(layout.param_count(Variant::BL), 0);
    assert!(AttentionLayout::new(6, 4, Variant::CTFA).is_err());
    assert!(AttentionLayout::new(6, 4, Variant::STFA).is_ok());
}

#[test]
fn variant_names_roundtrip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(v.name().to_lowercase().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    assert!("XYZ".parse::<Variant>().is_err());
}

#[test]
fn baseline_has_no_attention_and_missing_branches_error() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
    let none = AttentionVars::default();
    assert!(compute_attention(&mut tape, s, &none, Variant::BL, UnitBranches::default()).unwrap().is_none());
    assert!(matches!(
        compute_attention(&mut tape, s, &none, Variant::SCTFA, UnitBranches::default()),
        Err(AttentionError::MissingParams { .. })
    ));
}

proptest! {
    #[test]
    fn attention_matches_loop_oracle(b in 1usize..3, c4 in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let c = 4 * c4;
        let mut rng = Rng::new(seed);
        let x = binary(&mut rng, &[b, c, h, w]);
        let p = params(&mut rng, c, 4);
        let (us, uc) = naive_attention(&x, p.ws.data(), p.bs.data()[0], &p.fc1, &p.fc2);

        let mut tape = Tape::new();
        let s = tape.constant(x.clone());
        let vars = bind(&mut tape, &p);
        let e = channel_squeeze(&mut tape, s).unwrap();
        prop_assert!(max_abs_diff(tape.value(e).data(), &naive_channel_squeeze(&x)) <= 1e-12);
        prop_assert!(tape.value(e).data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        for variant in [Variant::SCTFA, Variant::STFA, Variant::CTFA] {
            let u = compute_attention(&mut tape, s, &vars, variant, UnitBranches::default()).unwrap().unwrap();
            let got = tape.value(u);
            for bi in 0..b {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let sp = us[(bi * h + y) * w + xx];
                            let cp = uc[bi * c + ch];
                            let want = match variant {
                                Variant::SCTFA => sp * cp,
                                Variant::STFA => sp,
                                _ => cp,
                            };
                            let g = got.at(&[bi, ch, y, xx]);
                            prop_assert!((g - want).abs() <= 1e-12);
                            prop_assert!(g > 0.0 && g < 1.0);
                        }
                    }
                }
            }
            prop_assert_eq!(got.shape(), &[b, c, h, w]);
        }
    }

    #[test]
    fn fuse_matches_loop(b in 1usize..3, c in 1usize..5, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let us = Tensor::from_fn(&[b, 1, h, w], |_| rng.uniform());
        let uc = Tensor::from_fn(&[b, c], |_| rng.uniform());
        let mut tape = Tape::new();
        let (a, d) = (tape.constant(us.clone()), tape.constant(uc.clone()));
        let f = fuse(&mut tape, a, d).unwrap();
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(tape.value(f).at(&[bi, ch, y, x]), us.at(&[bi, 0, y, x]) * uc.at(&[bi, ch]));
                    }
                }
            }
        }
    }

    #[test]
    fn unit_branches_reduce_to_the_other_variant(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = binary(&mut rng, &[2, 8, 3, 3]);
        let p = params(&mut rng, 8, 4);
        let mut tape = Tape::new();
        let s = tape.constant(x);
        let vars = bind(&mut tape, &p);
        let eval = |tape: &mut Tape<f64>, v: Variant, unit: UnitBranches| {
            let u = compute_attention(tape, s, &vars, v, unit).unwrap().unwrap();
            tape.value(u).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        let unit_s = eval(&mut tape, Variant::SCTFA, UnitBranches { spatial: true, channel: false });
        prop_assert_eq!(unit_s, eval(&mut tape, Variant::CTFA, UnitBranches::default()));
        let unit_c = eval(&mut tape, Variant::SCTFA, UnitBranches { spatial: false, channel: true });
        prop_assert_eq!(unit_c, eval(&mut tape, Variant::STFA, UnitBranches::default()));
        let both = eval(&mut tape, Variant::SCTFA, UnitBranches { spatial: true, channel: true });
        prop_assert!(both.iter().all(|&b| b == 1.0f64.to_bits()));
    }
}
