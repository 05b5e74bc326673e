// Accuracy of the attention network as a function of the membrane decay
// factor κ. Pass `--quick` for a two-point smoke run.

use std::path::Path;

use spiking_attention::harness::{cmd_sweep_kappa, GlobalOpts, ReportTable, DEFAULT_KAPPAS};

pub const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/moving_bar.json");

pub fn run_example(out: &Path, quick: bool) -> Result<ReportTable, Box<dyn std::error::Error>> {
    let mut config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(CONFIG)?)?;
    let (kappas, trials) = if quick {
        config["epochs"] = 1.into();
        config["dataset"]["source"]["synthetic"]["train_per_class"] = 4.into();
        config["dataset"]["source"]["synthetic"]["test_per_class"] = 2.into();
        (vec![0.3, 0.7], 1)
    } else {
        config["epochs"] = 5.into();
        (DEFAULT_KAPPAS.to_vec(), 2)
    };
    std::fs::create_dir_all(out)?;
    let path = out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)?)?;
    let opts = GlobalOpts {
        force: true,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..Default::default()
    };
    Ok(cmd_sweep_kappa(&path, &kappas, trials, &out.join("sweep"), &opts)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let out = std::env::temp_dir().join("spikeattn-kappa");
    let table = run_example(&out, quick)?;
    print!("{}", table.to_kappa_csv());
    Ok(())
}
