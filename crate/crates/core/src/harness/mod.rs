//! Experiment commands behind the `spikeattn` binary.
//!
//! Every command is a plain function so it can be driven from code as well
//! as from the command line. Outputs are JSON (`run_record.json`), CSV
//! (`table.csv`, `kappa.csv`, `robustness.csv`), the binary checkpoint and
//! its `manifest.tsv`.

mod plan;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{trial_seed, Cell, ExperimentPlan, PlanFile, ReportRow, ReportTable, DEFAULT_TRIALS};

use crate::attention::Variant;
use crate::events::{self, CorruptionKind, CorruptionSpec, EventError};
use crate::network::{read_checkpoint, Architecture, write_checkpoint, CheckpointError, NetworkError, NetworkSpec, Phase, SpikingNetwork};
use crate::neuron::LifConfig;
use crate::tensor::{Precision, Rng, Scalar, Tensor};
use crate::training::{
    evaluate, train, Dataset, EvalReport, RunRecord, SyntheticSpec, TrainConfig, TrainError, TrainOptions,
};

pub const RUN_RECORD: &str = "run_record.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{file}: field `{field}`: {message}")]
    Config { file: String, field: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Events(#[from] EventError),
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct GlobalOpts {
    /// Overrides the configured seed.
    pub seed: Option<u64>,
    /// Overrides the configured precision.
    pub precision: Option<Precision>,
    /// Worker threads for sweeps; 0 means 1.
    pub threads: usize,
    pub force: bool,
    /// Embed wall-clock timings in run records (breaks bitwise reruns).
    pub timing: bool,
    pub verbose: bool,
}

impl GlobalOpts {
    fn threads(&self) -> usize {
        self.threads.max(1)
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            record_timing: self.timing,
            verbose: self.verbose,
            threads: self.threads(),
        }
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

fn create_dir(path: &Path, force: bool) -> Result<(), HarnessError> {
    if path.exists() && !force {
        return Err(HarnessError::Exists(path.to_path_buf()));
    }
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Parses JSON, reporting the dotted path of a bad or missing field.
pub fn parse_json<T: DeserializeOwned>(text: &str, file: &str) -> Result<T, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut field = e.path().to_string();
        let message = e.inner().to_string();
        if let Some(rest) = message.strip_prefix("missing field `") {
            let name = rest.split('`').next().unwrap_or_default();
            field = if field == "." { name.to_string() } else { format!("{field}.{name}") };
        }
        HarnessError::Config {
            file: file.to_string(),
            field,
            message,
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    parse_json(&read_text(path)?, &path.display().to_string())
}

pub fn load_config(path: &Path) -> Result<TrainConfig, HarnessError> {
    let cfg: TrainConfig = load_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub classes: usize,
    pub per_class: usize,
    pub height: u16,
    pub width: u16,
    pub duration_ms: f64,
    pub rate: f64,
    pub seed: u64,
}

/// Writes `per_class × classes` labeled event files and `manifest.tsv`.
pub fn cmd_synth(out_dir: &Path, args: &SynthArgs, opts: &GlobalOpts) -> Result<Vec<PathBuf>, HarnessError> {
    let spec = SyntheticSpec {
        classes: args.classes,
        train_per_class: args.per_class,
        test_per_class: 0,
        width: args.width,
        height: args.height,
        duration_ms: args.duration_ms,
        rate: args.rate,
        seed: opts.seed.unwrap_or(args.seed),
    };
    let streams = spec.generate_split("corpus", args.per_class)?;
    create_dir(out_dir, opts.force)?;
    let mut manifest = format!("# seed={}\nfile\tlabel\tevents\n", spec.seed);
    let mut files = Vec::with_capacity(streams.len());
    for (i, s) in streams.iter().enumerate() {
        let name = format!("sample_{i:05}.evs");
        let path = out_dir.join(&name);
        events::write_events(&path, s)?;
        let _ = writeln!(manifest, "{name}\t{}\t{}", s.label().expect("labeled"), s.len());
        files.push(path);
    }
    write_text(&out_dir.join(MANIFEST), &manifest)?;
    Ok(files)
}

// ---------------------------------------------------------------- train

fn train_into<F: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: &Path,
    master_seed: u64,
    opts: &GlobalOpts,
) -> Result<RunRecord, HarnessError> {
    match train::<F>(cfg, train_set, test_set, &opts.train_options()) {
        Ok(mut out) => {
            out.record.master_seed = master_seed;
            write_checkpoint(&out.best, dir.join(CHECKPOINT), dir.join(MANIFEST))?;
            write_json(&dir.join(RUN_RECORD), &out.record)?;
            Ok(out.record)
        }
        Err(TrainError::Diverged {
            epoch,
            batch,
            loss,
            mut record,
        }) => {
            record.master_seed = master_seed;
            #[derive(Serialize)]
            struct Diagnostic<'a> {
                error: &'a str,
                epoch: usize,
                batch: usize,
                loss: Option<f64>,
                record: &'a RunRecord,
            }
            write_json(
                &dir.join(RUN_RECORD),
                &Diagnostic {
                    error: "diverged",
                    epoch,
                    batch,
                    loss: loss.is_finite().then_some(loss),
                    record: &record,
                },
            )?;
            Err(TrainError::Diverged {
                epoch,
                batch,
                loss,
                record,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn train_dispatch(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: &Path,
    master_seed: u64,
    opts: &GlobalOpts,
) -> Result<RunRecord, HarnessError> {
    match cfg.precision {
        Precision::F32 => train_into::<f32>(cfg, train_set, test_set, dir, master_seed, opts),
        Precision::F64 => train_into::<f64>(cfg, train_set, test_set, dir, master_seed, opts),
    }
}

/// Directory name of a single training run.
pub fn run_dir_name(cfg: &TrainConfig) -> String {
    format!("{}-seed{}", cfg.variant, cfg.seed)
}

/// Trains from a config file into `out_root/<variant>-seed<seed>/`.
pub fn cmd_train(config: &Path, out_root: &Path, opts: &GlobalOpts) -> Result<(PathBuf, RunRecord), HarnessError> {
    let mut cfg = load_config(config)?;
    opts.apply(&mut cfg);
    cfg.validate()?;
    let dir = out_root.join(run_dir_name(&cfg));
    create_dir(&dir, opts.force)?;
    let (train_set, test_set) = cfg.load_data()?;
    let record = train_dispatch(&cfg, &train_set, &test_set, &dir, cfg.seed, opts)?;
    Ok((dir, record))
}

// ---------------------------------------------------------------- sweeps

/// Trains every cell on a bounded worker pool and aggregates the results.
/// Each cell writes into `out_dir/runs/<cell>/`.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path, opts: &GlobalOpts) -> Result<(ReportTable, Vec<Option<RunRecord>>), HarnessError> {
    plan.validate()?;
    create_dir(out_dir, opts.force)?;
    let runs = out_dir.join("runs");
    std::fs::create_dir_all(&runs).map_err(io_err(&runs))?;
    let (train_set, test_set) = plan.base.load_data()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads())
        .build()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Option<RunRecord>> = pool.install(|| {
        plan.cells
            .par_iter()
            .map(|cell| {
                let cfg = cell.config(&plan.base);
                let dir = runs.join(cell.dir_name());
                let res = std::fs::create_dir_all(&dir)
                    .map_err(io_err(&dir))
                    .and_then(|_| train_dispatch(&cfg, &train_set, &test_set, &dir, plan.base.seed, opts));
                match res {
                    Ok(r) => Some(r),
                    Err(e) => {
                        eprintln!("cell {} aborted: {e}", cell.dir_name());
                        None
                    }
                }
            })
            .collect()
    });
    let refs: Vec<Option<&RunRecord>> = results.iter().map(Option::as_ref).collect();
    let table = ReportTable::aggregate(plan.base.seed, &plan.cells, &refs);
    write_json(
        &out_dir.join(PLAN_INDEX),
        &PlanIndex {
            master_seed: plan.base.seed,
            cells: plan.cells.clone(),
        },
    )?;
    Ok((table, results))
}

const PLAN_INDEX: &str = "plan.json";

#[derive(Serialize, Deserialize)]
struct PlanIndex {
    master_seed: u64,
    cells: Vec<Cell>,
}

pub fn load_plan(path: &Path, opts: &GlobalOpts) -> Result<ExperimentPlan, HarnessError> {
    let mut file: PlanFile = load_json(path)?;
    opts.apply(&mut file.base);
    ExperimentPlan::from_file(file)
}

/// Variant ablation; writes `table.csv` and `plan.json`.
pub fn cmd_ablate(plan_path: &Path, out_dir: &Path, opts: &GlobalOpts) -> Result<ReportTable, HarnessError> {
    let plan = load_plan(plan_path, opts)?;
    let (table, _) = run_plan(&plan, out_dir, opts)?;
    write_text(&out_dir.join("table.csv"), &table.to_csv())?;
    Ok(table)
}

pub const DEFAULT_KAPPAS: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// One row per κ for the base variant; writes `kappa.csv` and `table.csv`.
pub fn cmd_sweep_kappa(
    config: &Path,
    kappas: &[f64],
    trials: usize,
    out_dir: &Path,
    opts: &GlobalOpts,
) -> Result<ReportTable, HarnessError> {
    let mut base = load_config(config)?;
    opts.apply(&mut base);
    if let Some(k) = kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(HarnessError::Invalid(format!("kappa {k} outside [0, 1]")));
    }
    let plan = ExperimentPlan::from_file(PlanFile {
        variants: vec![base.variant],
        kappas: if kappas.is_empty() { DEFAULT_KAPPAS.to_vec() } else { kappas.to_vec() },
        seeds: Vec::new(),
        trials: Some(trials),
        base,
    })?;
    let (table, _) = run_plan(&plan, out_dir, opts)?;
    write_text(&out_dir.join("kappa.csv"), &table.to_kappa_csv())?;
    write_text(&out_dir.join("table.csv"), &table.to_csv())?;
    Ok(table)
}

/// Rebuilds a sweep's table from the run records under `out_dir/runs`.
pub fn reaggregate(out_dir: &Path) -> Result<ReportTable, HarnessError> {
    let index: PlanIndex = load_json(&out_dir.join(PLAN_INDEX))?;
    let records: Vec<Option<RunRecord>> = index
        .cells
        .iter()
        .map(|c| load_json(&out_dir.join("runs").join(c.dir_name()).join(RUN_RECORD)).ok())
        .collect();
    let refs: Vec<Option<&RunRecord>> = records.iter().map(Option::as_ref).collect();
    Ok(ReportTable::aggregate(index.master_seed, &index.cells, &refs))
}

// ---------------------------------------------------------------- eval

/// Loads the run record and best checkpoint from a run directory.
pub fn load_run(run_dir: &Path) -> Result<RunRecord, HarnessError> {
    load_json(&run_dir.join(RUN_RECORD))
}

fn eval_run<F: Scalar>(
    run_dir: &Path,
    test_set: &Dataset,
    corruptions: &[Option<CorruptionSpec>],
) -> Result<Vec<EvalReport>, HarnessError> {
    let mut net: SpikingNetwork<F> = read_checkpoint(run_dir.join(CHECKPOINT))?;
    corruptions
        .iter()
        .map(|c| Ok(evaluate(&mut net, test_set, c.as_ref())?))
        .collect()
}

fn eval_dispatch(
    run_dir: &Path,
    precision: Precision,
    test_set: &Dataset,
    corruptions: &[Option<CorruptionSpec>],
) -> Result<Vec<EvalReport>, HarnessError> {
    match precision {
        Precision::F32 => eval_run::<f32>(run_dir, test_set, corruptions),
        Precision::F64 => eval_run::<f64>(run_dir, test_set, corruptions),
    }
}

/// Evaluates a run's best checkpoint on its test set.
pub fn cmd_eval(run_dir: &Path, corruption: Option<CorruptionSpec>) -> Result<EvalReport, HarnessError> {
    let record = load_run(run_dir)?;
    let (_, test_set) = record.config.load_data()?;
    let mut out = eval_dispatch(run_dir, record.config.precision, &test_set, &[corruption])?;
    Ok(out.remove(0))
}

// ---------------------------------------------------------------- robustness

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGrid {
    pub noise: Vec<f64>,
    pub event_loss: Vec<f64>,
    pub frame_loss: Vec<f64>,
}

pub const DEFAULT_NOISE: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0];
pub const DEFAULT_LOSS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

impl RobustnessGrid {
    pub fn defaults() -> Self {
        Self {
            noise: DEFAULT_NOISE.to_vec(),
            event_loss: DEFAULT_LOSS.to_vec(),
            frame_loss: DEFAULT_LOSS.to_vec(),
        }
    }

    /// Corruptions with a seed derived per kind and level index.
    pub fn specs(&self, master: u64) -> Vec<CorruptionSpec> {
        let root = Rng::new(master);
        let mut out = Vec::new();
        let mut push = |name: &str, levels: &[f64], mk: &dyn Fn(f64) -> CorruptionKind| {
            let base = root.fork_named(name);
            for (i, &l) in levels.iter().enumerate() {
                out.push(CorruptionSpec {
                    kind: mk(l),
                    seed: base.fork(i as u64).next_u64(),
                });
            }
        };
        push("poisson_noise", &self.noise, &|lambda| CorruptionKind::PoissonNoise { lambda });
        push("event_loss", &self.event_loss, &|p| CorruptionKind::EventLoss { p });
        push("frame_loss", &self.frame_loss, &|p| CorruptionKind::FrameLoss { p });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: String,
    pub level: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub distance: Option<f64>,
}

/// Clean accuracy plus one row per corruption level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub master_seed: u64,
    pub clean: f64,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// `kind,level,metric,value,seed,master_seed`; one line per level per metric.
    pub fn to_csv(&self) -> String {
        let m = self.master_seed;
        let mut s = String::from("kind,level,metric,value,seed,master_seed\n");
        let _ = writeln!(s, "clean,0,accuracy,{:.6},,{m}", self.clean);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},accuracy,{:.6},{},{m}", r.kind, r.level, r.accuracy, r.seed);
            if let Some(d) = r.distance {
                let _ = writeln!(s, "{},{},distance,{:.6},{},{m}", r.kind, r.level, d, r.seed);
            }
        }
        s
    }
}

/// Evaluates a run's checkpoint at every corruption level; writes
/// `robustness.csv` into `out_dir` when given.
pub fn cmd_robustness(
    run_dir: &Path,
    grid: &RobustnessGrid,
    out_dir: Option<&Path>,
    opts: &GlobalOpts,
) -> Result<RobustnessReport, HarnessError> {
    let record = load_run(run_dir)?;
    let master = opts.seed.unwrap_or(record.master_seed);
    let (_, test_set) = record.config.load_data()?;
    let specs = grid.specs(master);
    let mut all: Vec<Option<CorruptionSpec>> = vec![None];
    all.extend(specs.iter().copied().map(Some));
    let reports = eval_dispatch(run_dir, record.config.precision, &test_set, &all)?;
    let rows: Vec<RobustnessRow> = specs
        .iter()
        .zip(&reports[1..])
        .map(|(s, r)| RobustnessRow {
            kind: s.kind.name().to_string(),
            level: s.kind.level(),
            seed: s.seed,
            accuracy: r.accuracy,
            distance: matches!(s.kind, CorruptionKind::PoissonNoise { .. }).then(|| r.distance.unwrap_or(0.0)),
        })
        .collect();
    let report = RobustnessReport {
        master_seed: master,
        clean: reports[0].accuracy,
        rows,
    };
    if let Some(dir) = out_dir {
        create_dir(dir, true)?;
        write_text(&dir.join("robustness.csv"), &report.to_csv())?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- complexity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub arch: String,
    pub variant: Variant,
    pub steps: usize,
    pub params: usize,
    pub mult_adds: u64,
    /// Median wall-clock time of one inference batch.
    pub batch_ms: Option<f64>,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct ComplexityArgs {
    pub arch: String,
    pub variant: Variant,
    pub steps: usize,
    pub input: [usize; 3],
    pub reduction: usize,
    /// Batch size for the timing run; `None` skips timing.
    pub time_batch: Option<usize>,
    pub repeats: usize,
}

fn time_forward<F: Scalar>(spec: NetworkSpec, batch: usize, repeats: usize, seed: u64) -> Result<f64, HarnessError> {
    let rng = Rng::new(seed);
    let mut net = SpikingNetwork::<F>::new(spec.clone(), &rng.fork_named("init"))?;
    let mut data_rng = rng.fork_named("input");
    let [c, h, w] = spec.arch.input();
    let x = Tensor::from_fn(&[batch, spec.steps, c, h, w], |_| {
        if data_rng.bernoulli(0.05) {
            F::one()
        } else {
            F::zero()
        }
    });
    net.forward(&x, Phase::Eval)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        net.forward(&x, Phase::Eval)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Parameter count, Mult-Adds, and optionally the median batch latency
/// after one warmup batch.
pub fn cmd_complexity(args: &ComplexityArgs, opts: &GlobalOpts) -> Result<ComplexityReport, HarnessError> {
    let arch = Architecture::parse(&args.arch, args.input).map_err(NetworkError::from)?;
    let params = arch.count_parameters(args.variant, args.reduction).map_err(NetworkError::from)?;
    let mult_adds = arch
        .count_mult_adds(args.variant, args.reduction, args.steps)
        .map_err(NetworkError::from)?;
    let batch_ms = match args.time_batch {
        Some(b) => {
            let spec = NetworkSpec::new(
                &args.arch,
                args.input,
                args.variant,
                LifConfig::new(1.0, 0.7),
                args.reduction,
                args.steps,
            )?;
            let seed = opts.seed.unwrap_or(0);
            Some(match opts.precision.unwrap_or_default() {
                Precision::F32 => time_forward::<f32>(spec, b, args.repeats, seed)?,
                Precision::F64 => time_forward::<f64>(spec, b, args.repeats, seed)?,
            })
        }
        None => None,
    };
    Ok(ComplexityReport {
        arch: arch.render(),
        variant: args.variant,
        steps: args.steps,
        params,
        mult_adds,
        batch_ms,
        batch_size: args.time_batch.unwrap_or(0),
    })
}
