// Parameter counts and Mult-Adds of the two reference architectures, with
// and without attention. Pass `--time` to also measure inference latency.

use spiking_attention::attention::Variant;
use spiking_attention::harness::{cmd_complexity, ComplexityArgs, ComplexityReport, GlobalOpts};

const ARCHS: [(&str, &str, [usize; 3], usize); 2] = [
    (
        "DVS Gesture",
        "Input-128C5S2-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-128C3-BN-AP2-512FC-VotingC11P5-AP",
        [2, 128, 128],
        10,
    ),
    (
        "MNIST-DVS",
        "Input-32C7S2-BN-AP2-64C3-BN-AP2-128C3-BN-AP2-512FC-VotingC10P5-AP",
        [2, 128, 128],
        20,
    ),
];

pub fn run_example(time: bool) -> Result<Vec<(String, ComplexityReport)>, Box<dyn std::error::Error>> {
    let mut out = Vec::new();
    for (name, arch, input, steps) in ARCHS {
        for variant in Variant::ALL {
            let report = cmd_complexity(
                &ComplexityArgs {
                    arch: arch.into(),
                    variant,
                    steps,
                    input,
                    reduction: 4,
                    time_batch: time.then_some(1),
                    repeats: 3,
                },
                &GlobalOpts::default(),
            )?;
            out.push((name.to_string(), report));
        }
    }
    Ok(out)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let time = std::env::args().any(|a| a == "--time");
    println!("{:<12} {:<6} {:>10} {:>14} {:>10}", "dataset", "model", "params", "mult-adds", "ms/batch");
    for (name, r) in run_example(time)? {
        let ms = r.batch_ms.map_or("-".into(), |m| format!("{m:.1}"));
        println!(
            "{:<12} {:<6} {:>10} {:>11.4}e9 {:>10}",
            name,
            r.variant.to_string(),
            r.params,
            r.mult_adds as f64 / 1e9,
            ms
        );
    }
    Ok(())
}
