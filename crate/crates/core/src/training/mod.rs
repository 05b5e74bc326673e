//! Vote loss, Adam with per-epoch exponential decay, and the training loop.

mod data;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{load_dir, DataSource, Dataset, SyntheticSpec};

use crate::attention::Variant;
use crate::events::{self, CorruptionSpec, EventError};
use crate::network::{CheckpointError, NetworkError, NetworkSpec, Phase, SpikingNetwork};
use crate::neuron::LifConfig;
use crate::tensor::{ParamStore, Precision, Rng, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        record: Box<RunRecord>,
    },
}

/// Frame slicing and sample source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub dt_ms: f64,
    pub steps: usize,
    #[serde(default)]
    pub binarize: bool,
    pub source: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: String,
    pub variant: Variant,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate η.
    pub lr: f64,
    /// Per-epoch decay γ.
    pub lr_decay: f64,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    pub dataset: DatasetSpec,
    pub lif: LifConfig,
}

fn default_reduction() -> usize {
    4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be non-negative", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.dataset.steps == 0 {
            return bad("dataset.steps must be positive".into());
        }
        events::ms_to_us(self.dataset.dt_ms)?;
        self.lif.validate().map_err(|e| TrainError::Config(format!("lif: {e}")))?;
        Ok(())
    }

    pub fn network_spec(&self, input: [usize; 3]) -> Result<NetworkSpec, TrainError> {
        Ok(NetworkSpec::new(
            &self.arch,
            input,
            self.variant,
            self.lif,
            self.reduction,
            self.dataset.steps,
        )?)
    }

    /// Loads or generates the `(train, test)` datasets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), TrainError> {
        let (train, test) = match &self.dataset.source {
            DataSource::Synthetic(s) => s.generate()?,
            DataSource::Directory { train, test } => (load_dir(train)?, load_dir(test)?),
        };
        let dt = events::ms_to_us(self.dataset.dt_ms)?;
        let mk = |s| Dataset::from_streams(s, dt, self.dataset.steps, self.dataset.binarize);
        Ok((mk(train)?, mk(test)?))
    }
}

/// `η·γ^epoch`.
pub fn lr_schedule(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr * decay.powi(epoch as i32)
}

fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<F>, TrainError> {
    let mut y = Tensor::zeros(&[labels.len(), classes]);
    for (n, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(TrainError::Label { label: l, classes });
        }
        y.data_mut()[n * classes + l] = F::one();
    }
    Ok(y)
}

/// `(1/2N) Σ_n ‖Y_n − mean_t o_n‖²` for votes `o: [N, M, T]`.
pub fn mse_vote_loss<F: Scalar>(tape: &mut Tape<F>, o: Var, labels: &[usize]) -> Result<Var, TrainError> {
    let shape = tape.shape(o).to_vec();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(TensorError::Dimension {
            op: "mse_vote_loss",
            detail: format!("votes {shape:?} for {} labels", labels.len()),
        }
        .into());
    }
    let y = tape.constant(one_hot(labels, shape[1])?);
    let mean = tape.mean_last_axis(o)?;
    let diff = tape.sub(y, mean)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, F::lit(0.5 / labels.len() as f64)))
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore<F>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different store");
        self.step += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = F::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (F::lit(lr), F::lit(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + (F::one() - b1) * g[i];
                vd[i] = b2 * vd[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total: f64,
    pub per_epoch: f64,
}

/// Everything a training run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    /// Seed of the experiment this run belongs to; equals `seed` for a lone run.
    #[serde(default)]
    pub master_seed: u64,
    pub threads: usize,
    pub per_epoch: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_acc: f64,
    /// Rows are true classes, columns predictions, at the best epoch.
    pub confusion: Vec<Vec<usize>>,
    /// Wall-clock time; omitted unless requested so records stay reproducible.
    pub timing_ms: Option<Timing>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub record_timing: bool,
    pub verbose: bool,
    pub threads: usize,
}

pub struct TrainOutcome<F> {
    pub record: RunRecord,
    /// Network at the best test epoch.
    pub best: SpikingNetwork<F>,
}

/// Accuracy, confusion matrix and optional clean-vs-corrupted distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub distance: Option<f64>,
}

const EVAL_BATCH: usize = 32;

fn confusion_of(labels: &[usize], preds: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut c = vec![vec![0; classes]; classes];
    for (&l, &p) in labels.iter().zip(preds) {
        c[l][p] += 1;
    }
    c
}

fn accuracy_of(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let hit: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn check_labels(data: &Dataset, classes: usize) -> Result<(), TrainError> {
    match data.labels().iter().find(|&&l| l >= classes) {
        Some(&label) => Err(TrainError::Label { label, classes }),
        None => Ok(()),
    }
}

/// Evaluates `net` on `data`, optionally on a corrupted copy.
///
/// With a corruption, accuracy is measured on the corrupted samples and the
/// distance is the mean over samples of the time-averaged Euclidean distance
/// between clean and corrupted last-conv membrane trajectories.
pub fn evaluate<F: Scalar>(
    net: &mut SpikingNetwork<F>,
    data: &Dataset,
    corruption: Option<&CorruptionSpec>,
) -> Result<EvalReport, TrainError> {
    let spec = net.spec().clone();
    if data.input_shape() != Some(spec.arch.input()) || data.steps() != spec.steps {
        return Err(NetworkError::Config(format!(
            "dataset {:?} x {} steps does not match network {:?} x {} steps",
            data.input_shape(),
            data.steps(),
            spec.arch.input(),
            spec.steps
        ))
        .into());
    }
    let classes = spec.classes();
    check_labels(data, classes)?;
    let corrupted = corruption.map(|c| data.corrupted(c)).transpose()?;
    let target = corrupted.as_ref().unwrap_or(data);
    let mut preds = Vec::with_capacity(data.len());
    let mut dist_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = target.batch::<F>(chunk);
        preds.extend(net.forward(&x, Phase::Eval)?.predictions());
        if corrupted.is_some() {
            let noisy = net.hidden_activation()?.clone();
            let (x, _) = data.batch::<F>(chunk);
            net.forward(&x, Phase::Eval)?;
            let clean = net.hidden_activation()?;
            dist_sum += crate::network::trajectory_distance(clean, &noisy)? * chunk.len() as f64;
        }
    }
    let confusion = confusion_of(data.labels(), &preds, classes);
    Ok(EvalReport {
        accuracy: accuracy_of(&confusion),
        confusion,
        distance: corrupted.map(|_| if data.is_empty() { 0.0 } else { dist_sum / data.len() as f64 }),
    })
}

/// Trains a fresh network and keeps the best-test-accuracy snapshot.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome<F>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(TrainError::Config("train and test sets must be non-empty".into()));
    }
    let input = train_set.input_shape().expect("non-empty");
    if test_set.input_shape() != Some(input) {
        return Err(TrainError::Config("train and test frame shapes differ".into()));
    }
    let spec = cfg.network_spec(input)?;
    check_labels(train_set, spec.classes())?;
    check_labels(test_set, spec.classes())?;

    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.fork_named("shuffle");
    let mut dropout_rng = root.fork_named("dropout");
    let mut net = SpikingNetwork::<F>::new(spec, &root.fork_named("init"))?;
    let mut adam = AdamState::new(net.params());
    let started = Instant::now();

    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        master_seed: cfg.seed,
        threads: opts.threads.max(1),
        per_epoch: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_acc: -1.0,
        confusion: Vec::new(),
        timing_ms: None,
    };
    let mut best = net.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, cfg.lr_decay, epoch);
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train_set.batch::<F>(chunk);
            let mut tape = Tape::new();
            let vars = net.params().bind(&mut tape);
            let o = net.forward_on(&mut tape, &vars, &x, Phase::Train(&mut dropout_rng))?;
            let loss = mse_vote_loss(&mut tape, o, &labels)?;
            let lv = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: lv,
                    record: Box::new(record),
                });
            }
            loss_sum += lv * chunk.len() as f64;
            tape.backward(loss)?;
            net.params_mut().zero_grad();
            net.params_mut().accumulate_grads(&tape, &vars);
            adam.step(net.params_mut(), lr);
            if net.params().iter().any(|p| !p.value.all_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    loss: lv,
                    record: Box::new(record),
                });
            }
        }
        let report = evaluate(&mut net, test_set, None)?;
        let log = EpochLog {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            test_acc: report.accuracy,
            lr,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  test_acc {:.4}  lr {:.6}",
                log.epoch, log.loss, log.test_acc, log.lr
            );
        }
        record.per_epoch.push(log);
        if report.accuracy > record.best_acc {
            record.best_acc = report.accuracy;
            record.best_epoch = epoch;
            record.confusion = report.confusion;
            best = net.clone();
        }
    }
    if cfg.epochs == 0 {
        let report = evaluate(&mut net, test_set, None)?;
        record.best_acc = report.accuracy;
        record.confusion = report.confusion;
    }
    if opts.record_timing {
        let total = started.elapsed().as_secs_f64() * 1e3;
        record.timing_ms = Some(Timing {
            total,
            per_epoch: total / cfg.epochs.max(1) as f64,
        });
    }
    best.reset_states();
    Ok(TrainOutcome { record, best })
}
