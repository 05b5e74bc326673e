use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::events::{
    self, add_poisson_noise, drop_events, drop_frames, slice_to_frames, synth_moving_bar, CorruptionKind,
    CorruptionSpec, Direction, EventStream, FrameSequence, MovingBarConfig,
};
use crate::tensor::{Rng, Scalar, Tensor};

/// Moving-bar corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_side")]
    pub width: u16,
    #[serde(default = "default_side")]
    pub height: u16,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Corpus seed, independent of the training seed.
    pub seed: u64,
}

fn default_classes() -> usize {
    4
}
fn default_side() -> u16 {
    16
}
fn default_duration() -> f64 {
    500.0
}
fn default_rate() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn bar_config(&self) -> Result<MovingBarConfig, TrainError> {
        Ok(MovingBarConfig {
            width: self.width,
            height: self.height,
            duration_us: events::ms_to_us(self.duration_ms)?,
            rate: self.rate,
        })
    }

    /// Generates `(train, test)` streams.
    pub fn generate(&self) -> Result<(Vec<EventStream>, Vec<EventStream>), TrainError> {
        Ok((
            self.generate_split("train", self.train_per_class)?,
            self.generate_split("test", self.test_per_class)?,
        ))
    }

    /// `per_class` samples of every class, interleaved by class. Sample `i`
    /// draws from its own stream keyed by split name and index, so the
    /// corpus does not depend on generation order.
    pub fn generate_split(&self, split: &str, per_class: usize) -> Result<Vec<EventStream>, TrainError> {
        if self.classes == 0 || self.classes > Direction::ALL.len() {
            return Err(TrainError::Config(format!(
                "synthetic corpus supports 1 to {} classes, got {}",
                Direction::ALL.len(),
                self.classes
            )));
        }
        let cfg = self.bar_config()?;
        let base = Rng::new(self.seed).fork_named(split);
        let mut out = Vec::with_capacity(per_class * self.classes);
        for i in 0..per_class * self.classes {
            let dir = Direction::ALL[i % self.classes];
            out.push(synth_moving_bar(dir, &cfg, &mut base.fork(i as u64))?);
        }
        Ok(out)
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directories of labeled event files (binary or CSV).
    Directory { train: PathBuf, test: PathBuf },
}

/// Reads every event file in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<EventStream>, TrainError> {
    let io = |e: std::io::Error| TrainError::Io {
        path: dir.display().to_string(),
        source: e,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("evs" | "csv")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let s = events::read_events(&p)?;
        if s.label().is_none() {
            return Err(TrainError::Config(format!("{} has no label", p.display())));
        }
        out.push(s);
    }
    Ok(out)
}

/// Framed, labeled samples plus the raw streams they came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    streams: Vec<EventStream>,
    frames: Vec<FrameSequence>,
    labels: Vec<usize>,
    dt_us: u64,
    steps: usize,
    binarize: bool,
}

impl Dataset {
    pub fn from_streams(streams: Vec<EventStream>, dt_us: u64, steps: usize, binarize: bool) -> Result<Self, TrainError> {
        let mut frames = Vec::with_capacity(streams.len());
        let mut labels = Vec::with_capacity(streams.len());
        for (i, s) in streams.iter().enumerate() {
            let label = s
                .label()
                .ok_or_else(|| TrainError::Config(format!("sample {i} has no label")))?;
            if s.width() != streams[0].width() || s.height() != streams[0].height() {
                return Err(TrainError::Config(format!(
                    "sample {i} is {}x{}, expected {}x{}",
                    s.width(),
                    s.height(),
                    streams[0].width(),
                    streams[0].height()
                )));
            }
            let f = slice_to_frames(s, dt_us, steps)?;
            frames.push(if binarize { f.binarized() } else { f });
            labels.push(label as usize);
        }
        Ok(Self {
            streams,
            frames,
            labels,
            dt_us,
            steps,
            binarize,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn frames(&self) -> &[FrameSequence] {
        &self.frames
    }

    /// `[2, H, W]` of every frame.
    pub fn input_shape(&self) -> Option<[usize; 3]> {
        self.frames.first().map(|f| [2, f.height(), f.width()])
    }

    /// Copy of the dataset with `corruption` applied to every sample.
    ///
    /// Sample `i` uses its own stream derived from the corruption seed, so
    /// the result does not depend on batching. Noise and frame loss act on
    /// counts, event loss on raw events before slicing. Binarization, if
    /// configured, is applied afterwards.
    pub fn corrupted(&self, corruption: &CorruptionSpec) -> Result<Self, TrainError> {
        corruption.kind.validate()?;
        let root = Rng::new(corruption.seed);
        let mut frames = Vec::with_capacity(self.len());
        for (i, stream) in self.streams.iter().enumerate() {
            let mut rng = root.fork(i as u64);
            let raw = match corruption.kind {
                CorruptionKind::EventLoss { p } => slice_to_frames(&drop_events(stream, p, &mut rng)?, self.dt_us, self.steps)?,
                CorruptionKind::PoissonNoise { lambda } => {
                    add_poisson_noise(&slice_to_frames(stream, self.dt_us, self.steps)?, lambda, &mut rng)?
                }
                CorruptionKind::FrameLoss { p } => drop_frames(&slice_to_frames(stream, self.dt_us, self.steps)?, p, &mut rng)?,
            };
            frames.push(if self.binarize { raw.binarized() } else { raw });
        }
        Ok(Self {
            frames,
            ..self.clone()
        })
    }

    /// Stacks samples `idx` into `[B, T, 2, H, W]` with their labels.
    pub fn batch<F: Scalar>(&self, idx: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let per = self.frames[0].frames.len();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend(self.frames[i].frames.data().iter().map(|&v| F::lit(v)));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.frames[0].frames.shape());
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("uniform frame shapes"), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            train_per_class: 2,
            test_per_class: 1,
            width: 8,
            height: 8,
            duration_ms: 100.0,
            rate: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let (train, test) = spec().generate().unwrap();
        assert_eq!((train.len(), test.len()), (8, 4));
        let labels: Vec<_> = train.iter().map(|s| s.label().unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(spec().generate().unwrap().0, train);
    }

    #[test]
    fn identity_corruptions_reproduce_frames() {
        let (train, _) = spec().generate().unwrap();
        let ds = Dataset::from_streams(train, 10_000, 10, false).unwrap();
        for kind in [
            CorruptionKind::PoissonNoise { lambda: 0.0 },
            CorruptionKind::EventLoss { p: 0.0 },
            CorruptionKind::FrameLoss { p: 0.0 },
        ] {
            let c = ds.corrupted(&CorruptionSpec { kind, seed: 5 }).unwrap();
            assert_eq!(c.frames(), ds.frames());
        }
        let blank = ds
            .corrupted(&CorruptionSpec {
                kind: CorruptionKind::FrameLoss { p: 1.0 },
                seed: 5,
            })
            .unwrap();
        assert!(blank.frames().iter().all(|f| f.total_count() == 0.0));
    }

    #[test]
    fn batch_layout() {
        let (train, _) = spec().generate().unwrap();
        let ds = Dataset::from_streams(train, 10_000, 10, false).unwrap();
        let (x, y) = ds.batch::<f32>(&[3, 1]);
        assert_eq!(x.shape(), &[2, 10, 2, 8, 8]);
        assert_eq!(y, vec![3, 1]);
    }
}
