//! Event-to-frame-stack encoding.
//!
//! SBT (stacking based on time) tiles the window before a label timestamp
//! into S stacks of C frames and writes the sign of the summed polarity
//! into each pixel; sign(0) = 0 so "no net change" stays silent and the
//! encoding is odd in the polarity. SBE (stacking based on event count)
//! forms frames from fixed-size event groups walking backward from the
//! label, so the freshest events always land in the final frame.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::event::EventStream;

/// Stacking mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EncodeMode {
    Sbt,
    Sbe,
}

/// Encoder configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub mode: EncodeMode,
    /// Stack duration in microseconds (SBT).
    pub delta_t_us: u64,
    /// Frames per stack (C).
    pub frames_per_stack: usize,
    /// Number of stacks (S).
    pub stacks: usize,
    /// Events per frame (SBE only).
    pub events_per_frame: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncodeMode::Sbt,
            delta_t_us: 60_000,
            frames_per_stack: 3,
            stacks: 3,
            events_per_frame: 5_000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_stack == 0 || self.stacks == 0 {
            return Err(Error::Config(String::from("stacks and frames_per_stack must be >= 1")));
        }
        match self.mode {
            EncodeMode::Sbt => {
                if self.delta_t_us == 0 {
                    return Err(Error::Config(String::from("delta_t must be nonzero")));
                }
                if self.delta_t_us % self.frames_per_stack as u64 != 0 {
                    return Err(Error::Config(alloc::format!(
                        "delta_t {} us is not divisible by frames_per_stack {}",
                        self.delta_t_us,
                        self.frames_per_stack
                    )));
                }
            }
            EncodeMode::Sbe => {
                if self.events_per_frame == 0 {
                    return Err(Error::Config(String::from("events_per_frame must be >= 1")));
                }
            }
        }
        Ok(())
    }

    /// Frame window length T = delta_t / frames_per_stack (SBT).
    pub fn frame_window_us(&self) -> u64 {
        self.delta_t_us / self.frames_per_stack as u64
    }
}

/// Dense signed frame tensor of shape S x C x H x W with values in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameStack {
    pub stacks: usize,
    pub frames_per_stack: usize,
    pub height: usize,
    pub width: usize,
    /// End of the covered window (exclusive), i.e. the label timestamp.
    pub t_end: u64,
    data: Vec<i8>,
}

impl FrameStack {
    fn new(stacks: usize, frames_per_stack: usize, height: usize, width: usize, t_end: u64) -> FrameStack {
        FrameStack {
            stacks,
            frames_per_stack,
            height,
            width,
            t_end,
            data: vec![0; stacks * frames_per_stack * height * width],
        }
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.stacks, self.frames_per_stack, self.height, self.width)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, s: usize, c: usize, y: usize, x: usize) -> i8 {
        self.data[((s * self.frames_per_stack + c) * self.height + y) * self.width + x]
    }

    /// One stack as a f64 slice image of shape [C, H, W].
    pub fn stack_values(&self, s: usize) -> Vec<f64> {
        let plane = self.frames_per_stack * self.height * self.width;
        self.data[s * plane..(s + 1) * plane]
            .iter()
            .map(|v| *v as f64)
            .collect()
    }

    pub fn from_raw(
        stacks: usize,
        frames_per_stack: usize,
        height: usize,
        width: usize,
        t_end: u64,
        data: Vec<i8>,
    ) -> Result<FrameStack> {
        if data.len() != stacks * frames_per_stack * height * width {
            return Err(Error::Shape(String::from("frame stack data length mismatch")));
        }
        if data.iter().any(|v| *v < -1 || *v > 1) {
            return Err(Error::Validation(String::from(
                "frame stack values must lie in {-1, 0, +1}",
            )));
        }
        Ok(FrameStack { stacks, frames_per_stack, height, width, t_end, data })
    }
}

#[inline]
fn sign(v: i64) -> i8 {
    match v {
        v if v > 0 => 1,
        v if v < 0 => -1,
        _ => 0,
    }
}

/// Encode by time windows tiling [t_label - S*delta_t, t_label).
pub fn encode_sbt(stream: &EventStream, t_label: u64, config: &EncoderConfig) -> Result<FrameStack> {
    config.validate()?;
    if config.mode != EncodeMode::Sbt {
        return Err(Error::Config(String::from("encoder mode is not SBT")));
    }
    let total = config.delta_t_us * config.stacks as u64;
    if t_label < total {
        return Err(Error::InsufficientHistory { earliest_admissible_us: total });
    }
    let (w, h) = (stream.geometry.0 as usize, stream.geometry.1 as usize);
    let n_frames = config.stacks * config.frames_per_stack;
    let window = config.frame_window_us();
    let t_start = t_label - total;

    let mut sums = vec![0i64; n_frames * h * w];
    let begin = stream.partition_at(t_start);
    for e in &stream.events()[begin..] {
        if e.t >= t_label {
            break;
        }
        // Half-open frame windows [t_start + f*window, t_start + (f+1)*window).
        let f = ((e.t - t_start) / window) as usize;
        sums[(f * h + e.y as usize) * w + e.x as usize] += e.p as i64;
    }

    let mut out = FrameStack::new(config.stacks, config.frames_per_stack, h, w, t_label);
    for (dst, src) in out.data.iter_mut().zip(sums.iter()) {
        *dst = sign(*src);
    }
    Ok(out)
}

/// Encode by fixed event counts walking backward from t_label.
pub fn encode_sbe(stream: &EventStream, t_label: u64, config: &EncoderConfig) -> Result<FrameStack> {
    config.validate()?;
    if config.mode != EncodeMode::Sbe {
        return Err(Error::Config(String::from("encoder mode is not SBE")));
    }
    let n_frames = config.stacks * config.frames_per_stack;
    let required = n_frames * config.events_per_frame;
    let end = stream.partition_at(t_label);
    if end < required {
        return Err(Error::InsufficientEvents { available: end, required });
    }
    let (w, h) = (stream.geometry.0 as usize, stream.geometry.1 as usize);
    let mut out = FrameStack::new(config.stacks, config.frames_per_stack, h, w, t_label);
    let plane = h * w;
    let first = end - required;
    let mut sums = vec![0i64; plane];
    for f in 0..n_frames {
        sums.fill(0);
        let lo = first + f * config.events_per_frame;
        for e in &stream.events()[lo..lo + config.events_per_frame] {
            sums[e.y as usize * w + e.x as usize] += e.p as i64;
        }
        for (i, s) in sums.iter().enumerate() {
            out.data[f * plane + i] = sign(*s);
        }
    }
    Ok(out)
}

/// Nonzero fraction of a stack, in [0, 1].
pub fn stack_sparsity(stack: &FrameStack) -> f64 {
    if stack.data.is_empty() {
        return 0.0;
    }
    let nnz = stack.data.iter().filter(|v| **v != 0).count();
    nnz as f64 / stack.data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Event;

    fn stream_of(events: Vec<Event>) -> EventStream {
        EventStream::new((8, 8), events).unwrap()
    }

    fn sbt_cfg(delta_t: u64, c: usize, s: usize) -> EncoderConfig {
        EncoderConfig {
            mode: EncodeMode::Sbt,
            delta_t_us: delta_t,
            frames_per_stack: c,
            stacks: s,
            events_per_frame: 1,
        }
    }

    #[test]
    fn sbt_sign_of_summed_polarity() {
        // Three events in one window: +1 +1 -1 -> +1; +1 -1 -> 0.
        let ev = vec![
            Event { t: 10, x: 1, y: 1, p: 1 },
            Event { t: 11, x: 1, y: 1, p: 1 },
            Event { t: 12, x: 1, y: 1, p: -1 },
            Event { t: 13, x: 2, y: 1, p: 1 },
            Event { t: 14, x: 2, y: 1, p: -1 },
        ];
        let stack = encode_sbt(&stream_of(ev), 100, &sbt_cfg(100, 1, 1)).unwrap();
        assert_eq!(stack.get(0, 0, 1, 1), 1);
        assert_eq!(stack.get(0, 0, 1, 2), 0);
    }

    #[test]
    fn sbt_requires_history() {
        let err = encode_sbt(&stream_of(vec![]), 100, &sbt_cfg(60, 3, 3)).unwrap_err();
        assert_eq!(err, Error::InsufficientHistory { earliest_admissible_us: 180 });
    }

    #[test]
    fn sbt_window_is_half_open() {
        // Event exactly at a frame boundary belongs to the later frame; an
        // event exactly at t_label is excluded.
        let ev = vec![
            Event { t: 50, x: 0, y: 0, p: 1 },
            Event { t: 100, x: 1, y: 0, p: 1 },
        ];
        let stack = encode_sbt(&stream_of(ev), 100, &sbt_cfg(100, 2, 1)).unwrap();
        assert_eq!(stack.get(0, 1, 0, 0), 1, "boundary event goes to the later frame");
        assert_eq!(stack.get(0, 0, 0, 1), 0);
        assert_eq!(stack.get(0, 1, 0, 1), 0, "event at t_label excluded");
    }

    #[test]
    fn sbt_default_frame_window_is_20ms() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.frame_window_us(), 20_000);
    }

    #[test]
    fn sbe_partitions_by_count_backward() {
        // 10 events, 5 per frame, S=1, C=2: events 0-4 -> frame 0, 5-9 -> frame 1.
        let ev: Vec<Event> = (0..10)
            .map(|i| Event { t: i as u64, x: i as u16 % 8, y: 0, p: 1 })
            .collect();
        let cfg = EncoderConfig {
            mode: EncodeMode::Sbe,
            events_per_frame: 5,
            stacks: 1,
            frames_per_stack: 2,
            ..EncoderConfig::default()
        };
        let stack = encode_sbe(&stream_of(ev), 100, &cfg).unwrap();
        // Frame 0 holds events 0-4 (x 0..4); frame 1 holds events 5-9.
        assert_eq!(stack.get(0, 0, 0, 0), 1);
        assert_eq!(stack.get(0, 1, 0, 5), 1);
        assert_eq!(stack.get(0, 0, 0, 5), 0, "x=5 appears only in the second group");
    }

    #[test]
    fn sbe_reports_available_count_on_error() {
        let ev = vec![Event { t: 0, x: 0, y: 0, p: 1 }];
        let cfg = EncoderConfig {
            mode: EncodeMode::Sbe,
            events_per_frame: 5,
            stacks: 1,
            frames_per_stack: 2,
            ..EncoderConfig::default()
        };
        let err = encode_sbe(&stream_of(ev), 100, &cfg).unwrap_err();
        assert_eq!(err, Error::InsufficientEvents { available: 1, required: 10 });
    }

    #[test]
    fn sbe_single_pixel_positive() {
        let ev: Vec<Event> = (0..5).map(|i| Event { t: i, x: 3, y: 3, p: 1 }).collect();
        let cfg = EncoderConfig {
            mode: EncodeMode::Sbe,
            events_per_frame: 5,
            stacks: 1,
            frames_per_stack: 1,
            ..EncoderConfig::default()
        };
        let stack = encode_sbe(&stream_of(ev), 10, &cfg).unwrap();
        assert_eq!(stack.get(0, 0, 3, 3), 1);
        assert_eq!(stack.data().iter().filter(|v| **v != 0).count(), 1);
    }

    #[test]
    fn sparsity_counts_fraction() {
        let ev = vec![Event { t: 1, x: 0, y: 0, p: 1 }];
        let stack = encode_sbt(&stream_of(ev), 100, &sbt_cfg(100, 1, 1)).unwrap();
        assert_eq!(stack_sparsity(&stack), 1.0 / 64.0);
        let empty = encode_sbt(&stream_of(vec![]), 100, &sbt_cfg(100, 1, 1)).unwrap();
        assert_eq!(stack_sparsity(&empty), 0.0);
    }

    #[test]
    fn empty_stream_encodes_to_zeros() {
        let stack = encode_sbt(&stream_of(vec![]), 200, &sbt_cfg(60, 3, 3)).unwrap();
        assert!(stack.data().iter().all(|v| *v == 0));
        assert_eq!(stack.shape(), (3, 3, 8, 8));
    }
}
