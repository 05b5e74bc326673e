use serde::{Deserialize, Serialize};

use super::{Event, EventError, EventStream};
use crate::tensor::Rng;

/// Sweep direction of a synthetic bar; the discriminant is the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LeftToRight = 0,
    RightToLeft = 1,
    TopToBottom = 2,
    BottomToTop = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::TopToBottom,
        Direction::BottomToTop,
    ];

    pub fn from_label(label: u32) -> Option<Direction> {
        Self::ALL.get(label as usize).copied()
    }

    pub fn label(self) -> u32 {
        self as u32
    }
}

/// Parameters of the moving-bar generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingBarConfig {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    /// Mean number of events each pixel emits per edge crossing.
    pub rate: f64,
}

impl Default for MovingBarConfig {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            duration_us: 500_000,
            rate: 1.0,
        }
    }
}

/// Generates a bar sweeping across the sensor in `direction`.
///
/// The bar spans a random sub-range (at least half) of the axis orthogonal
/// to the motion and has a random thickness. As the leading edge enters a
/// pixel it emits Poisson(`rate`) ON events; the trailing edge emits
/// Poisson(`rate`) OFF events. Event times are jittered uniformly within
/// the one-pixel crossing slot.
pub fn synth_moving_bar(direction: Direction, cfg: &MovingBarConfig, rng: &mut Rng) -> Result<EventStream, EventError> {
    if cfg.width < 8 || cfg.height < 8 {
        return Err(EventError::Parameter(format!(
            "moving bar needs at least 8x8 pixels, got {}x{}",
            cfg.width, cfg.height
        )));
    }
    if !(cfg.rate >= 0.0 && cfg.rate.is_finite()) || cfg.duration_us == 0 {
        return Err(EventError::Parameter(format!(
            "rate {} and duration {} us must be non-negative and positive",
            cfg.rate, cfg.duration_us
        )));
    }
    let (w, h) = (cfg.width as u64, cfg.height as u64);
    let (along, across) = match direction {
        Direction::LeftToRight | Direction::RightToLeft => (w, h),
        Direction::TopToBottom | Direction::BottomToTop => (h, w),
    };

    let thickness = 2 + rng.below((along / 4).max(2) - 1);
    let span = across / 2 + rng.below(across - across / 2 + 1);
    let span_start = rng.below(across - span + 1);
    let dur = cfg.duration_us as f64;
    let t0 = rng.uniform_range(0.0, 0.1) * dur;
    let sweep = rng.uniform_range(0.7, 0.9) * dur;
    let slot = sweep / (along + thickness) as f64;

    let mut events = Vec::new();
    for c in 0..along {
        let t_on = t0 + c as f64 * slot;
        let t_off = t_on + thickness as f64 * slot;
        for m in span_start..span_start + span {
            let (x, y) = match direction {
                Direction::LeftToRight => (c, m),
                Direction::RightToLeft => (w - 1 - c, m),
                Direction::TopToBottom => (m, c),
                Direction::BottomToTop => (m, h - 1 - c),
            };
            for (edge, polarity) in [(t_on, 1u8), (t_off, 0u8)] {
                for _ in 0..rng.poisson(cfg.rate) {
                    let t = (edge + rng.uniform() * slot) as u64;
                    events.push(Event {
                        t: t.min(cfg.duration_us - 1),
                        x: x as u16,
                        y: y as u16,
                        polarity,
                    });
                }
            }
        }
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(cfg.width, cfg.height, events, Some(direction.label()))
}
