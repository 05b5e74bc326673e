//! Runs every example in its quick form.

#[allow(dead_code)]
mod complexity_report {
    include!("../examples/complexity_report.rs");
}
#[allow(dead_code)]
mod event_pipeline {
    include!("../examples/event_pipeline.rs");
}
#[allow(dead_code)]
mod train_moving_bar {
    include!("../examples/train_moving_bar.rs");
}
#[allow(dead_code)]
mod ablation {
    include!("../examples/ablation.rs");
}
#[allow(dead_code)]
mod kappa_sweep {
    include!("../examples/kappa_sweep.rs");
}
#[allow(dead_code)]
mod robustness_sweep {
    include!("../examples/robustness_sweep.rs");
}
#[allow(dead_code)]
mod gradient_check {
    include!("../examples/gradient_check.rs");
}

use spiking_attention::attention::Variant;

#[test]
fn complexity_example() {
    let rows = complexity_report::run_example(false).unwrap();
    assert_eq!(rows.len(), 8);
    let bl = &rows[0].1;
    assert_eq!(bl.variant, Variant::BL);
    assert!((bl.params as f64 - 0.895e6).abs() / 0.895e6 < 0.01);
    let mnist = rows.iter().find(|(n, r)| n == "MNIST-DVS" && r.variant == Variant::BL).unwrap();
    assert!((mnist.1.mult_adds as f64 - 1.096e9).abs() / 1.096e9 < 0.02);
}

#[test]
fn event_pipeline_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = event_pipeline::run_example(dir.path()).unwrap();
    assert_eq!(out.len(), 4);
    for s in &out {
        assert!(s.events > 0);
        let total: f64 = s.frame_totals.iter().sum();
        assert!(s.noisy_total >= total);
        assert!(s.event_loss_total <= total && s.frame_loss_total <= total);
    }
}

#[test]
fn train_example() {
    let dir = tempfile::tempdir().unwrap();
    let r = train_moving_bar::run_example(dir.path(), true).unwrap();
    assert_eq!(r.per_epoch.len(), 1);
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 16);
}

#[test]
fn ablation_example() {
    let dir = tempfile::tempdir().unwrap();
    let t = ablation::run_example(dir.path(), true).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert!(t.rows.iter().all(|r| r.completed == 2));
}

#[test]
fn kappa_example() {
    let dir = tempfile::tempdir().unwrap();
    let t = kappa_sweep::run_example(dir.path(), true).unwrap();
    assert_eq!(t.rows.iter().map(|r| r.kappa).collect::<Vec<_>>(), vec![0.3, 0.7]);
}

#[test]
fn robustness_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = robustness_sweep::run_example(dir.path(), true).unwrap();
    assert_eq!(out.len(), 2);
    for (_, r) in &out {
        assert_eq!(r.rows.len(), 6);
        assert!(r.rows.iter().filter(|x| x.level == 0.0).all(|x| x.accuracy == r.clean));
    }
}

#[test]
fn gradient_check_example() {
    let out = gradient_check::run_example(3).unwrap();
    assert!(!out.is_empty());
    for (name, rel, _) in out {
        assert!(rel < 1e-4, "{name}: {rel}");
    }
}
