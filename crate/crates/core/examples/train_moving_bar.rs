// Trains the attention network on the synthetic moving-bar corpus and
// evaluates the best checkpoint. Pass `--quick` for a one-epoch smoke run.

use std::path::Path;

use spiking_attention::harness::{cmd_eval, cmd_train, GlobalOpts};
use spiking_attention::training::RunRecord;

pub const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/moving_bar.json");

pub fn run_example(out: &Path, quick: bool) -> Result<RunRecord, Box<dyn std::error::Error>> {
    let mut config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(CONFIG)?)?;
    if quick {
        config["epochs"] = 1.into();
        config["dataset"]["source"]["synthetic"]["train_per_class"] = 8.into();
        config["dataset"]["source"]["synthetic"]["test_per_class"] = 4.into();
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)?)?;

    let opts = GlobalOpts {
        force: true,
        verbose: !quick,
        ..Default::default()
    };
    let (run, record) = cmd_train(&path, &out.join("runs"), &opts)?;
    let eval = cmd_eval(&run, None)?;
    assert_eq!(eval.accuracy, record.best_acc);
    println!("run directory {}", run.display());
    Ok(record)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let out = std::env::temp_dir().join("spikeattn-train");
    let r = run_example(&out, quick)?;
    for e in &r.per_epoch {
        println!("epoch {:>2}  loss {:.4}  test {:.3}  lr {:.5}", e.epoch, e.loss, e.test_acc, e.lr);
    }
    println!("best {:.3} at epoch {}", r.best_acc, r.best_epoch);
    println!("confusion (rows true, columns predicted):");
    for row in &r.confusion {
        println!("  {row:?}");
    }
    Ok(())
}
