mod common;

use common::*;
use proptest::prelude::*;
use spiking_attention::attention::Variant;
use spiking_attention::network::*;
use spiking_attention::neuron::LifConfig;
use spiking_attention::tensor::{Rng, Tensor};

const GESTURE: &str = "Input-128C5S2-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-512FC-VotingC11P5-AP";
const MNIST_DVS: &str = "Input-32C7S2-BN-AP2-64C3-BN-AP2-128C3-BN-AP2-512FC-VotingC10P5-AP";
const SMALL: &str = "Input-8C3-BN-AP2-8C3-BN-AP2-DP-16FC-VotingC4P2-AP";

fn net(arch: &str, input: [usize; 3], variant: Variant, seed: u64) -> SpikingNetwork<f64> {
    let spec = NetworkSpec::new(arch, input, variant, LifConfig::new(0.5, 0.7), 4, 5).unwrap();
    SpikingNetwork::new(spec, &Rng::new(seed)).unwrap()
}

/// Attention parameter and per-step Mult-Adds increments implied by the
/// conv stages, as `(spatial, channel)` pairs.
fn attention_deltas(a: &Architecture, r: usize) -> ((usize, usize), (u64, u64)) {
    let (mut ps, mut pc, mut ms, mut mc) = (0, 0, 0, 0);
    for st in a.stages() {
        if let Stage::Conv { channels: c, out, .. } = *st {
            ps += c + 1;
            pc += 2 * c * c / r;
            ms += out.numel() as u64;
            mc += (2 * c * c / r) as u64;
        }
    }
    ((ps, pc), (ms, mc))
}

#[test]
fn table_architectures_parse() {
    let m = Architecture::parse(MNIST_DVS, [2, 128, 128]).unwrap();
    let fc_in = m.stages().iter().find_map(|s| match *s {
        Stage::Dense { fan_in, .. } => Some(fan_in),
        _ => None,
    });
    assert_eq!(fc_in, Some(128 * 8 * 8));
    assert_eq!(m.voting(), Some((10, 5)));
    let g = Architecture::parse(GESTURE, [2, 128, 128]).unwrap();
    assert_eq!(g.voting(), Some((11, 5)));
    assert_eq!(g.render(), GESTURE);
    assert_eq!(g.conv_stages().count(), 5);
}

#[test]
fn parse_errors_name_the_token() {
    let e = Architecture::parse("Input-8C3-AP2", [2, 9, 9]).unwrap_err();
    assert_eq!((e.index, e.token.as_str()), (2, "AP2"));
    let e = Architecture::parse("Input-8C3-Foo-VotingC2P1", [2, 8, 8]).unwrap_err();
    assert_eq!(e.index, 2);
    let e = Architecture::parse("Input-VotingC2P1-8FC", [2, 8, 8]).unwrap_err();
    assert_eq!(e.index, 2);
}

#[test]
fn tiny_counts() {
    let a = Architecture::parse("Input-1C1", [2, 4, 4]).unwrap();
    assert_eq!(a.count_parameters(Variant::BL, 1).unwrap(), 3);
    let a = Architecture::parse("Input", [2, 4, 4]).unwrap();
    assert_eq!(a.count_mult_adds(Variant::BL, 4, 10).unwrap(), 0);
    assert_eq!(a.count_parameters(Variant::SCTFA, 4).unwrap(), 0);
}

#[test]
fn attention_deltas_on_table_architectures() {
    for (arch, steps) in [(GESTURE, 10), (MNIST_DVS, 20)] {
        let a = Architecture::parse(arch, [2, 128, 128]).unwrap();
        let ((ps, pc), (ms, mc)) = attention_deltas(&a, 4);
        let p = |v| a.count_parameters(v, 4).unwrap();
        let m = |v| a.count_mult_adds(v, 4, steps).unwrap();
        assert_eq!(p(Variant::STFA) - p(Variant::BL), ps);
        assert_eq!(p(Variant::CTFA) - p(Variant::BL), pc);
        assert_eq!(p(Variant::SCTFA) - p(Variant::BL), ps + pc);
        assert_eq!(m(Variant::STFA) - m(Variant::BL), ms * steps as u64);
        assert_eq!(m(Variant::CTFA) - m(Variant::BL), mc * steps as u64);
        assert_eq!(m(Variant::SCTFA) - m(Variant::BL), (ms + mc) * steps as u64);
    }
}

#[test]
fn built_networks_register_counted_parameters() {
    for v in Variant::ALL {
        let n = net(SMALL, [2, 8, 8], v, 1);
        assert_eq!(n.params().num_scalars(), n.spec().count_parameters());
        let has_attn = n.params().iter().any(|p| p.name.contains("attn"));
        assert_eq!(has_attn, v != Variant::BL);
        assert!(n
            .params()
            .iter()
            .filter(|p| p.name.contains("attn"))
            .all(|p| p.name.starts_with("conv")));
    }
}

#[test]
fn silent_input_silent_votes() {
    for v in Variant::ALL {
        let mut n = net(SMALL, [2, 8, 8], v, 2);
        let out = n.forward(&Tensor::zeros(&[2, 5, 2, 8, 8]), Phase::Eval).unwrap();
        assert_eq!(out.o.shape(), &[2, 4, 5]);
        assert!(out.o.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn toy_voting_net_decodes_winner() {
    let spec = NetworkSpec::new("Input-VotingC2P2-AP", [2, 1, 1], Variant::BL, LifConfig::new(1.0, 0.7), 4, 4).unwrap();
    let mut n = SpikingNetwork::<f64>::new(spec, &Rng::new(0)).unwrap();
    let store = n.params_mut();
    let w = store.index_of("voting.weight").unwrap();
    store.get_mut(w).value = Tensor::new(vec![4, 2], vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
    let b = store.index_of("voting.bias").unwrap();
    store.get_mut(b).value = Tensor::zeros(&[4]);
    let out = n.forward(&Tensor::ones(&[3, 4, 2, 1, 1]), Phase::Eval).unwrap();
    let mean = out.mean_over_time();
    for s in 0..3 {
        assert_eq!(&mean.data()[s * 2..s * 2 + 2], &[1.0, 0.0]);
    }
    assert_eq!(out.predictions(), vec![0, 0, 0]);
    assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
}

#[test]
fn forward_is_deterministic_and_stateless() {
    let x = random_frames(&mut Rng::new(4), 3, 5, 8, 8, 0.3);
    let mut a = net(SMALL, [2, 8, 8], Variant::SCTFA, 9);
    let mut b = net(SMALL, [2, 8, 8], Variant::SCTFA, 9);
    let first = a.forward(&x, Phase::Eval).unwrap().o;
    let again = a.forward(&x, Phase::Eval).unwrap().o;
    assert_eq!(first, again);
    assert_eq!(first, b.forward(&x, Phase::Eval).unwrap().o);
    let t1 = a.forward(&x, Phase::Train(&mut Rng::new(1))).unwrap().o;
    let t2 = b.forward(&x, Phase::Train(&mut Rng::new(1))).unwrap().o;
    assert_eq!(t1, t2);
    assert!(t1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn forward_rejects_wrong_shapes() {
    let mut n = net(SMALL, [2, 8, 8], Variant::BL, 0);
    assert!(n.forward(&Tensor::zeros(&[1, 4, 2, 8, 8]), Phase::Eval).is_err());
    assert!(n.forward(&Tensor::zeros(&[1, 5, 2, 8, 6]), Phase::Eval).is_err());
    assert!(n.forward(&Tensor::zeros(&[5, 2, 8, 8]), Phase::Eval).is_err());
}

#[test]
fn hidden_activation_contract() {
    let mut n = net(SMALL, [2, 8, 8], Variant::CTFA, 0);
    assert!(matches!(n.hidden_activation(), Err(NetworkError::State(_))));
    let x = random_frames(&mut Rng::new(1), 2, 5, 8, 8, 0.3);
    n.forward(&x, Phase::Eval).unwrap();
    let h = n.hidden_activation().unwrap().clone();
    assert_eq!(h.shape(), &[2, 5, 8, 4, 4]);
    n.forward(&x, Phase::Eval).unwrap();
    assert_eq!(trajectory_distance(&h, n.hidden_activation().unwrap()).unwrap(), 0.0);
    n.reset_states();
    assert!(n.hidden_activation().is_err());
}

#[test]
fn trajectory_distance_is_a_metric() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let a = random_tensor(&mut rng, &[3, 4, 2, 3, 3], 2.0);
        let b = random_tensor(&mut rng, &[3, 4, 2, 3, 3], 2.0);
        let c = random_tensor(&mut rng, &[3, 4, 2, 3, 3], 2.0);
        let d = |x: &Tensor<f64>, y: &Tensor<f64>| trajectory_distance(x, y).unwrap();
        assert_eq!(d(&a, &a), 0.0);
        assert_eq!(d(&a, &b), d(&b, &a));
        assert!(d(&a, &b) > 0.0);
        assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }
    let one = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    let zero = Tensor::zeros(&[1, 2, 2]);
    assert_eq!(trajectory_distance(&one, &zero).unwrap(), 2.5);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut n = net(SMALL, [2, 8, 8], Variant::SCTFA, 3);
    let x = random_frames(&mut Rng::new(2), 2, 5, 8, 8, 0.3);
    n.forward(&x, Phase::Train(&mut Rng::new(0))).unwrap();
    let (ck, man) = (dir.path().join("c.bin"), dir.path().join("m.tsv"));
    write_checkpoint(&n, &ck, &man).unwrap();
    let mut back: SpikingNetwork<f64> = read_checkpoint(&ck).unwrap();
    assert_eq!(back.spec(), n.spec());
    for (p, q) in n.params().iter().zip(back.params().iter()) {
        assert_eq!((&p.name, &p.value), (&q.name, &q.value));
    }
    assert_eq!(n.buffers(), back.buffers());
    assert_eq!(n.forward(&x, Phase::Eval).unwrap().o, back.forward(&x, Phase::Eval).unwrap().o);

    let manifest = std::fs::read_to_string(&man).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "name\tshape\toffset");
    assert_eq!(lines.len() - 1, n.params().len() + n.buffers().len());
    assert!(lines[1].starts_with("conv1.weight\t8x2x3x3\t"));
    let bytes = std::fs::read(&ck).unwrap();
    assert_eq!(&bytes[..4], b"SNN1");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f64>(&bad), Err(CheckpointError::Format { offset: 0, .. })));
    assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
    let single: SpikingNetwork<f32> = decode_checkpoint(&bytes).unwrap();
    assert_eq!(single.params().num_scalars(), n.params().num_scalars());
}

#[test]
fn spec_json_roundtrip() {
    let spec = NetworkSpec::new(SMALL, [2, 8, 8], Variant::STFA, LifConfig::new(0.5, 0.7), 4, 5).unwrap();
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
}

fn arch_strategy() -> impl Strategy<Value = String> {
    let block = (
        prop::sample::select(vec![4usize, 8, 12]),
        prop::sample::select(vec![1usize, 3, 5]),
        1usize..=2,
        any::<bool>(),
        any::<bool>(),
    );
    (
        prop::collection::vec(block, 1..4),
        any::<bool>(),
        prop::option::of(prop::sample::select(vec![8usize, 16])),
        2usize..5,
        1usize..4,
    )
        .prop_map(|(blocks, dp, fc, m, p)| {
            let mut s = String::from("Input");
            for (c, k, stride, bn, pool) in blocks {
                s += &format!("-{c}C{k}");
                if stride > 1 {
                    s += &format!("S{stride}");
                }
                if bn {
                    s += "-BN";
                }
                if pool {
                    s += "-AP2";
                }
            }
            if dp {
                s += "-DP";
            }
            if let Some(f) = fc {
                s += &format!("-{f}FC");
            }
            s + &format!("-VotingC{m}P{p}-AP")
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_architectures_render_count_and_run(arch in arch_strategy(), seed in any::<u64>()) {
        let a = match Architecture::parse(&arch, [2, 16, 16]) {
            Ok(a) => a,
            Err(_) => return Err(TestCaseError::reject("indivisible pooling")),
        };
        prop_assert_eq!(a.render(), arch.clone());
        let ((ps, pc), (ms, mc)) = attention_deltas(&a, 4);
        let bl = a.count_parameters(Variant::BL, 4).unwrap();
        prop_assert_eq!(a.count_parameters(Variant::SCTFA, 4).unwrap(), bl + ps + pc);
        prop_assert_eq!(
            a.count_mult_adds(Variant::SCTFA, 4, 3).unwrap() - a.count_mult_adds(Variant::BL, 4, 3).unwrap(),
            3 * (ms + mc)
        );
        let spec = NetworkSpec::new(&arch, [2, 16, 16], Variant::SCTFA, LifConfig::new(0.5, 0.7), 4, 3).unwrap();
        let (m, p) = (spec.classes(), spec.per_class());
        let mut n = SpikingNetwork::<f64>::new(spec, &Rng::new(seed)).unwrap();
        prop_assert_eq!(n.params().num_scalars(), bl + ps + pc);
        let x = random_frames(&mut Rng::new(seed), 2, 3, 16, 16, 0.3);
        let o = n.forward(&x, Phase::Train(&mut Rng::new(seed))).unwrap().o;
        prop_assert_eq!(o.shape(), &[2, m, 3]);
        let step = 1.0 / p as f64;
        for &v in o.data() {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(((v / step).round() * step - v).abs() < 1e-12);
        }
    }
}
