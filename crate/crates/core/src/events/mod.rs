//! Event-camera streams: data model, time slicing into count frames,
//! synthetic generators, and corruption operators.

mod io;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Rng, Tensor};

pub use io::{decode_events, encode_events, encode_events_csv, read_events, write_events, write_events_csv};
pub use synth::{synth_moving_bar, Direction, MovingBarConfig};

#[derive(Debug, Error)]
pub enum EventError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("event {index} out of bounds: ({x}, {y}) in {width}x{height}")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("event {index} has polarity {polarity}, expected 0 or 1")]
    Polarity { index: usize, polarity: u8 },
    #[error("event {index} is earlier than its predecessor")]
    Unsorted { index: usize },
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One polarity event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

/// A time-ordered, bounds-checked list of events from a `width × height`
/// sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
    label: Option<u32>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>, label: Option<u32>) -> Result<Self, EventError> {
        for (index, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EventError::OutOfBounds {
                    index,
                    x: e.x,
                    y: e.y,
                    width,
                    height,
                });
            }
            if e.polarity > 1 {
                return Err(EventError::Polarity {
                    index,
                    polarity: e.polarity,
                });
            }
            if index > 0 && e.t < events[index - 1].t {
                return Err(EventError::Unsorted { index });
            }
        }
        Ok(Self {
            width,
            height,
            events,
            label,
        })
    }

    pub fn empty(width: u16, height: u16, label: Option<u32>) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
            label,
        }
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    /// Timestamp of the last event, or 0 for an empty stream.
    pub fn duration_us(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t)
    }
}

/// `T` frames of per-pixel, per-polarity event counts, shape `[T, 2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor<f64>,
    pub label: Option<u32>,
    pub dt_us: u64,
}

impl FrameSequence {
    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn total_count(&self) -> f64 {
        self.frames.sum()
    }

    /// Presence frames: every non-zero count becomes 1.
    pub fn binarized(&self) -> Self {
        Self {
            frames: self.frames.map(|c| if c > 0.0 { 1.0 } else { 0.0 }),
            ..self.clone()
        }
    }

    /// Sum of counts in frame `t`.
    pub fn frame_total(&self, t: usize) -> f64 {
        let per = self.frames.len() / self.steps();
        self.frames.data()[t * per..(t + 1) * per].iter().sum()
    }
}

/// Converts a slice length in milliseconds to whole microseconds.
pub fn ms_to_us(dt_ms: f64) -> Result<u64, EventError> {
    let us = (dt_ms * 1000.0).round();
    if !us.is_finite() || us < 1.0 {
        return Err(EventError::Parameter(format!("slice length {dt_ms} ms must be positive")));
    }
    Ok(us as u64)
}

/// Accumulates events into `steps` consecutive slices of length `dt_us`.
///
/// Slice `i` counts events with `t ∈ [i·dt, (i+1)·dt)` at
/// `[i, polarity, y, x]`. Events at or after `dt·steps` are dropped; slices
/// past the end of the stream stay zero.
pub fn slice_to_frames(stream: &EventStream, dt_us: u64, steps: usize) -> Result<FrameSequence, EventError> {
    if dt_us == 0 || steps == 0 {
        return Err(EventError::Parameter(format!(
            "slice length {dt_us} us and step count {steps} must be positive"
        )));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut frames = Tensor::zeros(&[steps, 2, h, w]);
    let horizon = dt_us.saturating_mul(steps as u64);
    let data = frames.data_mut();
    for e in stream.events.iter().take_while(|e| e.t < horizon) {
        let slot = (e.t / dt_us) as usize;
        data[((slot * 2 + e.polarity as usize) * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    Ok(FrameSequence {
        frames,
        label: stream.label,
        dt_us,
    })
}

/// Which corruption to apply, with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Mean added count per cell per slice.
    PoissonNoise { lambda: f64 },
    EventLoss { p: f64 },
    FrameLoss { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    pub seed: u64,
}

impl CorruptionKind {
    pub fn validate(&self) -> Result<(), EventError> {
        match *self {
            CorruptionKind::PoissonNoise { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(EventError::Parameter(format!("poisson rate {lambda} must be >= 0")))
            }
            CorruptionKind::EventLoss { p } | CorruptionKind::FrameLoss { p } if !(0.0..=1.0).contains(&p) => {
                Err(EventError::Parameter(format!("loss rate {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::PoissonNoise { .. } => "poisson_noise",
            CorruptionKind::EventLoss { .. } => "event_loss",
            CorruptionKind::FrameLoss { .. } => "frame_loss",
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            CorruptionKind::PoissonNoise { lambda } => lambda,
            CorruptionKind::EventLoss { p } | CorruptionKind::FrameLoss { p } => p,
        }
    }
}

/// Adds independent Poisson(`lambda`) counts to every cell.
pub fn add_poisson_noise(frames: &FrameSequence, lambda: f64, rng: &mut Rng) -> Result<FrameSequence, EventError> {
    CorruptionKind::PoissonNoise { lambda }.validate()?;
    let mut out = frames.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    for c in out.frames.data_mut() {
        *c += rng.poisson(lambda) as f64;
    }
    Ok(out)
}

/// Keeps each event independently with probability `1 − p`.
pub fn drop_events(stream: &EventStream, p: f64, rng: &mut Rng) -> Result<EventStream, EventError> {
    CorruptionKind::EventLoss { p }.validate()?;
    let events = stream.events.iter().copied().filter(|_| !rng.bernoulli(p)).collect();
    Ok(EventStream { events, ..stream.clone() })
}

/// Zeroes each whole frame independently with probability `p`.
pub fn drop_frames(frames: &FrameSequence, p: f64, rng: &mut Rng) -> Result<FrameSequence, EventError> {
    CorruptionKind::FrameLoss { p }.validate()?;
    let mut out = frames.clone();
    let t = out.steps();
    let per = out.frames.len() / t;
    for i in 0..t {
        if rng.bernoulli(p) {
            out.frames.data_mut()[i * per..(i + 1) * per].fill(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, polarity: u8) -> Event {
        Event { t, x, y, polarity }
    }

    #[test]
    fn stream_validates_bounds_and_order() {
        assert!(EventStream::new(4, 4, vec![ev(0, 3, 3, 1)], None).is_ok());
        assert!(matches!(
            EventStream::new(4, 4, vec![ev(0, 4, 0, 1)], None),
            Err(EventError::OutOfBounds { index: 0, .. })
        ));
        assert!(matches!(
            EventStream::new(4, 4, vec![ev(5, 0, 0, 0), ev(4, 0, 0, 0)], None),
            Err(EventError::Unsorted { index: 1 })
        ));
        assert!(matches!(
            EventStream::new(4, 4, vec![ev(0, 0, 0, 2)], None),
            Err(EventError::Polarity { .. })
        ));
    }

    #[test]
    fn single_event_lands_in_its_cell() {
        let s = EventStream::new(8, 8, vec![ev(0, 3, 5, 1)], Some(2)).unwrap();
        let f = slice_to_frames(&s, ms_to_us(125.0).unwrap(), 10).unwrap();
        assert_eq!(f.frames.shape(), &[10, 2, 8, 8]);
        assert_eq!(f.frames.at(&[0, 1, 5, 3]), 1.0);
        assert_eq!(f.total_count(), 1.0);
        assert_eq!(f.label, Some(2));
    }

    #[test]
    fn default_gesture_horizon() {
        assert_eq!(ms_to_us(125.0).unwrap() * 10, 1_250_000);
        assert!(ms_to_us(0.0).is_err());
    }

    #[test]
    fn tail_slices_of_short_stream_are_zero() {
        // 400 ms of events, one per ms.
        let events = (0..400).map(|i| ev(i * 1000, 0, 0, (i % 2) as u8)).collect();
        let s = EventStream::new(2, 2, events, None).unwrap();
        let f = slice_to_frames(&s, ms_to_us(50.0).unwrap(), 30).unwrap();
        for t in 0..8 {
            assert_eq!(f.frame_total(t), 50.0);
        }
        for t in 8..30 {
            assert_eq!(f.frame_total(t), 0.0);
        }
    }

    #[test]
    fn events_past_horizon_are_discarded() {
        let events = (0..100).map(|i| ev(i * 10, 1, 1, 0)).collect();
        let s = EventStream::new(2, 2, events, None).unwrap();
        let f = slice_to_frames(&s, 100, 3).unwrap();
        assert_eq!(f.total_count(), 30.0);
    }

    #[test]
    fn empty_stream_gives_zero_frames() {
        let f = slice_to_frames(&EventStream::empty(3, 2, None), 10, 4).unwrap();
        assert_eq!(f.frames.shape(), &[4, 2, 2, 3]);
        assert_eq!(f.total_count(), 0.0);
        assert!(slice_to_frames(&EventStream::empty(3, 2, None), 10, 0).is_err());
    }

    #[test]
    fn binarize_caps_counts() {
        let events = vec![ev(0, 0, 0, 1), ev(1, 0, 0, 1), ev(2, 1, 0, 0)];
        let s = EventStream::new(2, 1, events, None).unwrap();
        let f = slice_to_frames(&s, 10, 1).unwrap();
        assert_eq!(f.total_count(), 3.0);
        assert_eq!(f.binarized().total_count(), 2.0);
    }

    #[test]
    fn corruption_parameters_are_validated() {
        let f = slice_to_frames(&EventStream::empty(2, 2, None), 10, 2).unwrap();
        let mut rng = Rng::new(0);
        assert!(add_poisson_noise(&f, -1.0, &mut rng).is_err());
        assert!(drop_frames(&f, 1.5, &mut rng).is_err());
        assert!(drop_events(&EventStream::empty(2, 2, None), -0.1, &mut rng).is_err());
    }

    #[test]
    fn corruption_spec_json_shape() {
        let spec = CorruptionSpec {
            kind: CorruptionKind::FrameLoss { p: 0.25 },
            seed: 3,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"frame_loss","p":0.25,"seed":3}"#);
        let back: CorruptionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
