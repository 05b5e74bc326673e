use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attention::Variant;
use crate::tensor::Rng;
use crate::training::{RunRecord, TrainConfig};

pub const DEFAULT_TRIALS: usize = 3;

/// One training run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub kappa: f64,
    pub seed: u64,
}

impl Cell {
    /// Directory name of the cell's artifacts.
    pub fn dir_name(&self) -> String {
        format!("{}-k{:.3}-seed{}", self.variant, self.kappa, self.seed)
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.variant = self.variant;
        cfg.lif.kappa = self.kappa;
        cfg.seed = self.seed;
        cfg
    }
}

/// Seed of trial `i` under `master`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    Rng::new(master).fork_named("trial").fork(trial as u64).next_u64()
}

/// Plan file contents. Cells are the product of variants, κ values and
/// seeds; seeds default to `trials` values derived from the base seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub base: TrainConfig,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub kappas: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub base: TrainConfig,
    pub cells: Vec<Cell>,
}

impl ExperimentPlan {
    pub fn from_file(file: PlanFile) -> Result<Self, HarnessError> {
        let variants = if file.variants.is_empty() {
            vec![file.base.variant]
        } else {
            file.variants.clone()
        };
        let kappas = if file.kappas.is_empty() {
            vec![file.base.lif.kappa]
        } else {
            file.kappas.clone()
        };
        let seeds = if file.seeds.is_empty() {
            let n = file.trials.unwrap_or(DEFAULT_TRIALS);
            (0..n).map(|i| trial_seed(file.base.seed, i)).collect()
        } else {
            file.seeds.clone()
        };
        let mut cells = Vec::new();
        for &variant in &variants {
            for &kappa in &kappas {
                for &seed in &seeds {
                    cells.push(Cell { variant, kappa, seed });
                }
            }
        }
        let plan = Self { base: file.base, cells };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.cells.is_empty() {
            return Err(HarnessError::Invalid("plan has no cells".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.cells {
            if !seen.insert((c.variant, c.kappa.to_bits(), c.seed)) {
                return Err(HarnessError::Invalid(format!(
                    "duplicate cell {} kappa {} seed {}",
                    c.variant, c.kappa, c.seed
                )));
            }
            if !(0.0..=1.0).contains(&c.kappa) {
                return Err(HarnessError::Invalid(format!("kappa {} outside [0, 1]", c.kappa)));
            }
            c.config(&self.base).validate()?;
        }
        Ok(())
    }
}

/// Aggregate over the trials of one (variant, κ) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub kappa: f64,
    pub trials: usize,
    pub completed: usize,
    pub mean_acc: Option<f64>,
    /// Sample standard deviation; needs at least two completed trials.
    pub std_acc: Option<f64>,
    pub best_acc: Option<f64>,
}

impl ReportRow {
    pub fn complete(&self) -> bool {
        self.completed == self.trials
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub master_seed: u64,
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl ReportTable {
    /// Groups results by (variant, κ) in first-appearance order. `None`
    /// marks an aborted run.
    pub fn aggregate(master_seed: u64, cells: &[Cell], results: &[Option<&RunRecord>]) -> Self {
        let mut keys: Vec<(Variant, u64)> = Vec::new();
        for c in cells {
            let k = (c.variant, c.kappa.to_bits());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let rows = keys
            .into_iter()
            .map(|(variant, kbits)| {
                let accs: Vec<Option<f64>> = cells
                    .iter()
                    .zip(results)
                    .filter(|(c, _)| c.variant == variant && c.kappa.to_bits() == kbits)
                    .map(|(_, r)| r.map(|r| r.best_acc))
                    .collect();
                let done: Vec<f64> = accs.iter().flatten().copied().collect();
                let n = done.len();
                let mean = (n > 0).then(|| done.iter().sum::<f64>() / n as f64);
                let std = mean.filter(|_| n >= 2).map(|m| {
                    (done.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1) as f64).sqrt()
                });
                let best = done.iter().copied().reduce(f64::max);
                ReportRow {
                    variant,
                    kappa: f64::from_bits(kbits),
                    trials: accs.len(),
                    completed: n,
                    mean_acc: mean,
                    std_acc: std,
                    best_acc: best,
                }
            })
            .collect();
        Self { master_seed, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,kappa,trials,completed,mean_acc,std_acc,best_acc,master_seed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.3},{},{},{},{},{},{}",
                r.variant,
                r.kappa,
                r.trials,
                r.completed,
                opt(r.mean_acc),
                opt(r.std_acc),
                opt(r.best_acc),
                self.master_seed
            );
        }
        s
    }

    /// κ sweep layout: `kappa,mean_acc,std_acc,best_acc`.
    pub fn to_kappa_csv(&self) -> String {
        let mut s = String::from("kappa,mean_acc,std_acc,best_acc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:.3},{},{},{}", r.kappa, opt(r.mean_acc), opt(r.std_acc), opt(r.best_acc));
        }
        s
    }

    /// Two-line summary per row: mean ± std, then best.
    pub fn render(&self) -> String {
        let mut s = format!("{:<8} {:>6}  {:<22} {:>8}\n", "variant", "kappa", "mean ± std", "best");
        for r in &self.rows {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
            let ms = match (r.mean_acc, r.std_acc) {
                (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
                (m, _) => pct(m),
            };
            let flag = if r.complete() { "" } else { "  (incomplete)" };
            let _ = writeln!(s, "{:<8} {:>6.3}  {:<22} {:>8}{flag}", r.variant.to_string(), r.kappa, ms, pct(r.best_acc));
        }
        s
    }
}
