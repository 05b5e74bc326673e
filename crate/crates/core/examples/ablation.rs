// Trains BL, STFA, CTFA and SCTFA over several seeds and prints the
// mean ± std and best accuracy of each. Pass `--quick` for a tiny grid.

use std::path::Path;

use spiking_attention::harness::{cmd_ablate, reaggregate, GlobalOpts, ReportTable};

pub const PLAN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/ablation_plan.json");

pub fn run_example(out: &Path, quick: bool) -> Result<ReportTable, Box<dyn std::error::Error>> {
    let mut plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(PLAN)?)?;
    if quick {
        plan["trials"] = 2.into();
        plan["base"]["epochs"] = 1.into();
        plan["base"]["dataset"]["source"]["synthetic"]["train_per_class"] = 4.into();
        plan["base"]["dataset"]["source"]["synthetic"]["test_per_class"] = 2.into();
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("plan.json");
    std::fs::write(&path, serde_json::to_string_pretty(&plan)?)?;
    let opts = GlobalOpts {
        force: true,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..Default::default()
    };
    let table = cmd_ablate(&path, &out.join("ablation"), &opts)?;
    assert_eq!(reaggregate(&out.join("ablation"))?, table);
    Ok(table)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let out = std::env::temp_dir().join("spikeattn-ablation");
    let table = run_example(&out, quick)?;
    print!("{}", table.render());
    println!("table and per-run records under {}", out.join("ablation").display());
    Ok(())
}
