mod common;

use proptest::prelude::*;
use spiking_attention::network::{read_checkpoint, write_checkpoint, SpikingNetwork};
use spiking_attention::tensor::{ParamStore, Rng, Tape, Tensor};
use spiking_attention::training::*;

const TINY: &str = r#"{
  "arch": "Input-4C3-BN-AP2-VotingC4P2-AP",
  "variant": "SCTFA",
  "seed": 5,
  "precision": "f64",
  "epochs": 3,
  "batch_size": 5,
  "lr": 0.01,
  "lr_decay": 0.9,
  "dataset": {
    "dt_ms": 20.0,
    "steps": 10,
    "source": { "synthetic": { "train_per_class": 4, "test_per_class": 3, "width": 8, "height": 8, "duration_ms": 200.0, "seed": 1 } }
  },
  "lif": { "v_th": 1.0, "kappa": 0.7 }
}"#;

fn tiny() -> TrainConfig {
    serde_json::from_str(TINY).unwrap()
}

fn run(cfg: &TrainConfig) -> TrainOutcome<f64> {
    let (tr, te) = cfg.load_data().unwrap();
    train::<f64>(cfg, &tr, &te, &TrainOptions::default()).unwrap()
}

#[test]
fn defaults_fill_in() {
    let cfg = tiny();
    assert_eq!(cfg.reduction, 4);
    assert_eq!(cfg.lif.alpha, 2.0);
    assert!(!cfg.dataset.binarize);
    assert!(serde_json::from_str::<TrainConfig>(&TINY.replace("\"seed\": 5", "\"seed\": 5, \"momentum\": 1")).is_err());
}

#[test]
fn config_validation() {
    let mut c = tiny();
    c.lr = -1.0;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.lr_decay = 0.0;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.lif.kappa = 1.5;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.dataset.dt_ms = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn adam_closed_form() {
    let mut store = ParamStore::<f64>::new();
    store.register("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut adam = AdamState::new(&store);
    let g1 = [0.3, -4.0, 1e-3];
    store.get_mut(0).grad = Tensor::new(vec![3], g1.to_vec()).unwrap();
    adam.step(&mut store, 0.1);
    let w1 = store.get(0).value.data().to_vec();
    for (i, w0) in [1.0, -2.0, 0.5].iter().enumerate() {
        let step = 0.1 * g1[i] / (g1[i].abs() + 1e-8);
        assert!((w1[i] - (w0 - step)).abs() < 1e-15);
    }
    let g2 = [-0.3, 1.0, 0.0];
    store.get_mut(0).grad = Tensor::new(vec![3], g2.to_vec()).unwrap();
    adam.step(&mut store, 0.05);
    for i in 0..3 {
        let m = 0.9 * 0.1 * g1[i] + 0.1 * g2[i];
        let v = 0.999 * 0.001 * g1[i] * g1[i] + 0.001 * g2[i] * g2[i];
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let want = w1[i] - 0.05 * mh / (vh.sqrt() + 1e-8);
        assert!((store.get(0).value.data()[i] - want).abs() < 1e-14);
    }
    assert_eq!(adam.step, 2);
}

#[test]
fn schedule_examples() {
    assert_eq!(lr_schedule(0.002, 0.98, 0), 0.002);
    assert!((lr_schedule(0.001, 0.95, 2) - 0.000_902_5).abs() < 1e-18);
    assert_eq!(lr_schedule(0.3, 1.0, 50), 0.3);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = tiny();
    cfg.arch = "Input-4C3-AP2-VotingC4P2-AP".into();
    cfg.lr = 0.0;
    cfg.epochs = 1;
    let (tr, te) = cfg.load_data().unwrap();
    let out = train::<f64>(&cfg, &tr, &te, &TrainOptions::default()).unwrap();
    let spec = cfg.network_spec(tr.input_shape().unwrap()).unwrap();
    let mut fresh = SpikingNetwork::<f64>::new(spec, &Rng::new(cfg.seed).fork_named("init")).unwrap();
    for (a, b) in out.best.params().iter().zip(fresh.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let untrained = evaluate(&mut fresh, &te, None).unwrap();
    assert_eq!(out.record.best_acc, untrained.accuracy);
}

#[test]
fn record_bookkeeping() {
    let cfg = tiny();
    let out = run(&cfg);
    let r = &out.record;
    assert_eq!(r.per_epoch.len(), 3);
    for (i, e) in r.per_epoch.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert_eq!(e.lr, lr_schedule(cfg.lr, cfg.lr_decay, i));
        assert!(e.loss >= 0.0 && e.loss.is_finite());
    }
    let best = r.per_epoch.iter().map(|e| e.test_acc).fold(f64::MIN, f64::max);
    assert_eq!(r.best_acc, best);
    assert_eq!(r.per_epoch.iter().position(|e| e.test_acc == best), Some(r.best_epoch));
    let (_, te) = cfg.load_data().unwrap();
    for (c, row) in r.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), te.labels().iter().filter(|&&l| l == c).count());
    }
    let trace: usize = (0..4).map(|i| r.confusion[i][i]).sum();
    assert_eq!(trace as f64 / te.len() as f64, r.best_acc);
    assert!(r.timing_ms.is_none());
}

#[test]
fn identical_runs_identical_records() {
    let cfg = tiny();
    let a = serde_json::to_string(&run(&cfg).record).unwrap();
    let b = serde_json::to_string(&run(&cfg).record).unwrap();
    assert_eq!(a, b);
    let mut other = tiny();
    other.seed = 6;
    assert_ne!(a, serde_json::to_string(&run(&other).record).unwrap());
}

#[test]
fn checkpoint_reproduces_accuracy() {
    let cfg = tiny();
    let mut out = run(&cfg);
    let (_, te) = cfg.load_data().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("c.bin");
    write_checkpoint(&out.best, &ck, dir.path().join("m.tsv")).unwrap();
    let mut back: SpikingNetwork<f64> = read_checkpoint(&ck).unwrap();
    let a = evaluate(&mut out.best, &te, None).unwrap();
    let b = evaluate(&mut back, &te, None).unwrap();
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.confusion, b.confusion);
    assert_eq!(a.accuracy, out.record.best_acc);
}

#[test]
fn huge_learning_rate_diverges_with_record() {
    let mut cfg = tiny();
    cfg.lr = f64::MAX;
    let (tr, te) = cfg.load_data().unwrap();
    match train::<f64>(&cfg, &tr, &te, &TrainOptions::default()) {
        Err(TrainError::Diverged { record, .. }) => assert_eq!(record.seed, cfg.seed),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.record)),
    }
}

#[test]
fn labels_beyond_voting_classes_are_rejected() {
    let mut cfg = tiny();
    cfg.arch = "Input-4C3-BN-AP2-VotingC2P2-AP".into();
    let (tr, te) = cfg.load_data().unwrap();
    assert!(matches!(
        train::<f64>(&cfg, &tr, &te, &TrainOptions::default()),
        Err(TrainError::Label { .. })
    ));
}

#[test]
fn single_precision_trains() {
    let mut cfg = tiny();
    cfg.epochs = 1;
    let (tr, te) = cfg.load_data().unwrap();
    let out = train::<f32>(&cfg, &tr, &te, &TrainOptions::default()).unwrap();
    assert!(out.record.per_epoch[0].loss.is_finite());
}

proptest! {
    #[test]
    fn loss_matches_formula(n in 1usize..4, m in 2usize..5, t in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let o = Tensor::from_fn(&[n, m, t], |_| rng.uniform());
        let labels: Vec<usize> = (0..n).map(|_| rng.below(m as u64) as usize).collect();
        let mut tape = Tape::<f64>::new();
        let ov = tape.constant(o.clone());
        let l = mse_vote_loss(&mut tape, ov, &labels).unwrap();
        let mut want = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            for c in 0..m {
                let mean: f64 = (0..t).map(|k| o.at(&[i, c, k])).sum::<f64>() / t as f64;
                let y = if c == label { 1.0 } else { 0.0 };
                want += (y - mean).powi(2);
            }
        }
        want /= 2.0 * n as f64;
        prop_assert!((tape.value(l).item() - want).abs() <= 1e-12);
        prop_assert!(tape.value(l).item() >= 0.0);
    }
}
