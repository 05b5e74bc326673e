use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spiking_attention::attention::Variant;
use spiking_attention::events::{CorruptionKind, CorruptionSpec};
use spiking_attention::harness::{self, ComplexityArgs, GlobalOpts, HarnessError, RobustnessGrid, SynthArgs};
use spiking_attention::tensor::Precision;

#[derive(Parser)]
#[command(name = "spikeattn", version, about = "Train and analyse attention-gated spiking networks on event data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overwrite existing output directories.
    #[arg(long, global = true)]
    force: bool,
    /// Record wall-clock timings in run records.
    #[arg(long, global = true)]
    timing: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled moving-bar corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        height: u16,
        #[arg(long, default_value_t = 16)]
        width: u16,
        #[arg(long, default_value_t = 500.0)]
        duration_ms: f64,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
    },
    /// Train one network from a JSON config.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train every variant × seed cell of a plan and tabulate.
    Ablate {
        plan: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Sweep the membrane decay factor.
    SweepKappa {
        config: PathBuf,
        /// Comma-separated κ values.
        #[arg(long, value_delimiter = ',')]
        kappas: Vec<f64>,
        #[arg(long, default_value_t = harness::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value = "kappa-sweep")]
        out: PathBuf,
    },
    /// Evaluate a trained run under noise, event loss and frame loss.
    Robustness {
        run: PathBuf,
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        event_loss: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        frame_loss: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count, Mult-Adds and inference latency of an architecture.
    Complexity {
        arch: String,
        #[arg(long, default_value = "BL")]
        variant: Variant,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Input height and width.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        reduction: usize,
        /// Batch size of the timing run; 0 skips timing.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Evaluate a trained run, optionally under one corruption.
    Eval {
        run: PathBuf,
        #[arg(long, value_parser = ["poisson_noise", "event_loss", "frame_loss"])]
        corruption: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let g = cli.global;
    let opts = GlobalOpts {
        seed: g.seed,
        precision: g.precision,
        threads: g.threads,
        force: g.force,
        timing: g.timing,
        verbose: g.verbose,
    };
    match cli.cmd {
        Command::Synth {
            out,
            classes,
            per_class,
            height,
            width,
            duration_ms,
            rate,
        } => {
            let args = SynthArgs {
                classes,
                per_class,
                height,
                width,
                duration_ms,
                rate,
                seed: 0,
            };
            let files = harness::cmd_synth(&out, &args, &opts)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Train { config, out } => {
            let (dir, record) = harness::cmd_train(&config, &out, &opts)?;
            println!(
                "best test accuracy {:.4} at epoch {} -> {}",
                record.best_acc,
                record.best_epoch,
                dir.display()
            );
        }
        Command::Ablate { plan, out } => {
            let table = harness::cmd_ablate(&plan, &out, &opts)?;
            print!("{}", table.render());
        }
        Command::SweepKappa {
            config,
            kappas,
            trials,
            out,
        } => {
            let table = harness::cmd_sweep_kappa(&config, &kappas, trials, &out, &opts)?;
            print!("{}", table.to_kappa_csv());
        }
        Command::Robustness {
            run,
            noise,
            event_loss,
            frame_loss,
            out,
        } => {
            let d = RobustnessGrid::defaults();
            let grid = RobustnessGrid {
                noise: noise.unwrap_or(d.noise),
                event_loss: event_loss.unwrap_or(d.event_loss),
                frame_loss: frame_loss.unwrap_or(d.frame_loss),
            };
            let report = harness::cmd_robustness(&run, &grid, out.as_deref(), &opts)?;
            print!("{}", report.to_csv());
        }
        Command::Complexity {
            arch,
            variant,
            steps,
            size,
            reduction,
            batch,
            repeats,
        } => {
            let report = harness::cmd_complexity(
                &ComplexityArgs {
                    arch,
                    variant,
                    steps,
                    input: [2, size, size],
                    reduction,
                    time_batch: (batch > 0).then_some(batch),
                    repeats,
                },
                &opts,
            )?;
            println!("arch       {}", report.arch);
            println!("variant    {}", report.variant);
            println!("params     {} ({:.3}e6)", report.params, report.params as f64 / 1e6);
            println!("mult-adds  {} ({:.3}e9 at T={})", report.mult_adds, report.mult_adds as f64 / 1e9, report.steps);
            if let Some(ms) = report.batch_ms {
                println!("latency    {ms:.1} ms per batch of {}", report.batch_size);
            }
        }
        Command::Eval { run, corruption, level } => {
            let seed = opts.seed.unwrap_or(0);
            let spec = corruption.map(|k| CorruptionSpec {
                kind: match k.as_str() {
                    "poisson_noise" => CorruptionKind::PoissonNoise { lambda: level },
                    "event_loss" => CorruptionKind::EventLoss { p: level },
                    _ => CorruptionKind::FrameLoss { p: level },
                },
                seed,
            });
            let report = harness::cmd_eval(&run, spec)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
