// Trains BL and SCTFA networks, then compares their accuracy under
// background noise, event loss and frame loss. Noise levels also report
// the mean distance between clean and noisy hidden potentials.

use std::path::Path;

use spiking_attention::harness::{cmd_robustness, cmd_train, GlobalOpts, RobustnessGrid, RobustnessReport};

pub const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/moving_bar.json");

pub fn run_example(out: &Path, quick: bool) -> Result<Vec<(String, RobustnessReport)>, Box<dyn std::error::Error>> {
    let mut config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(CONFIG)?)?;
    let grid = if quick {
        config["epochs"] = 1.into();
        config["dataset"]["source"]["synthetic"]["train_per_class"] = 4.into();
        config["dataset"]["source"]["synthetic"]["test_per_class"] = 2.into();
        RobustnessGrid {
            noise: vec![0.0, 0.5],
            event_loss: vec![0.0, 0.3],
            frame_loss: vec![0.0, 0.3],
        }
    } else {
        RobustnessGrid::defaults()
    };
    std::fs::create_dir_all(out)?;
    let opts = GlobalOpts {
        force: true,
        ..Default::default()
    };
    let mut reports = Vec::new();
    for variant in ["BL", "SCTFA"] {
        config["variant"] = variant.into();
        let path = out.join(format!("{variant}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&config)?)?;
        let (run, _) = cmd_train(&path, &out.join("runs"), &opts)?;
        let report = cmd_robustness(&run, &grid, Some(&run.join("robustness")), &opts)?;
        reports.push((variant.to_string(), report));
    }
    Ok(reports)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let quick = std::env::args().any(|a| a == "--quick");
    let out = std::env::temp_dir().join("spikeattn-robustness");
    for (variant, report) in run_example(&out, quick)? {
        println!("{variant}: clean accuracy {:.3}", report.clean);
        for r in &report.rows {
            let d = r.distance.map_or(String::new(), |d| format!("  distance {d:.3}"));
            println!("  {:<14} {:>5}  accuracy {:.3}{d}", r.kind, r.level, r.accuracy);
        }
    }
    Ok(())
}
