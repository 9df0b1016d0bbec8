//! Deterministic synthetic scene generator.
//!
//! Moving rectangles on a clean background stand in for recorded sensor
//! data at desk scale. Contour events are emitted whenever an object edge
//! crosses a pixel boundary: the leading edge fires positive polarity, the
//! trailing edge negative, each edge pixel with a configurable probability.
//! A static object therefore emits nothing. Uniform background noise is
//! optional. Output is a pure function of (seed, config).

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Geometry, GtBox};
use crate::rng::Rng;

/// Inclusive size range in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SizeRange {
    pub min_w: f64,
    pub max_w: f64,
    pub min_h: f64,
    pub max_h: f64,
}

/// Scene parameters for `synthesize_scene`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SceneConfig {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    pub num_objects: usize,
    /// Object speed range in pixels per second.
    pub speed_px_per_s: (f64, f64),
    /// Probability that an edge pixel emits an event when the edge crosses
    /// a pixel boundary.
    pub event_rate: f64,
    /// Probability that each interior pixel emits a texture event per
    /// crossed pixel boundary (moving objects are rarely contour-only).
    pub fill_rate: f64,
    /// Uniform background noise in events per second over the whole sensor.
    pub noise_rate_hz: f64,
    /// Ground-truth cadence in microseconds.
    pub label_interval_us: u64,
    /// Size range for class 0 ("car"-like, large).
    pub large_size: SizeRange,
    /// Size range for class 1 ("pedestrian"-like, small).
    pub small_size: SizeRange,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            duration_us: 2_000_000,
            num_objects: 3,
            speed_px_per_s: (35.0, 90.0),
            event_rate: 1.0,
            fill_rate: 0.5,
            noise_rate_hz: 300.0,
            label_interval_us: 60_000,
            large_size: SizeRange { min_w: 15.0, max_w: 26.0, min_h: 11.0, max_h: 20.0 },
            small_size: SizeRange { min_w: 8.0, max_w: 13.0, min_h: 9.0, max_h: 15.0 },
        }
    }
}

impl SceneConfig {
    pub fn geometry(&self) -> Geometry {
        (self.width, self.height)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(String::from("geometry must be nonzero")));
        }
        if self.duration_us == 0 {
            return Err(Error::Config(String::from(
                "duration is zero: empty stream",
            )));
        }
        if self.num_objects == 0 && self.noise_rate_hz == 0.0 {
            return Err(Error::Config(String::from(
                "degenerate empty scene: zero objects and zero noise",
            )));
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return Err(Error::Config(String::from("event_rate must be in [0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.fill_rate) {
            return Err(Error::Config(String::from("fill_rate must be in [0, 1]")));
        }
        if self.label_interval_us == 0 {
            return Err(Error::Config(String::from("label interval must be nonzero")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct MovingRect {
    class_id: u32,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64, // px per microsecond
    vy: f64,
}

const STEP_US: u64 = 1_000;

/// Generate a deterministic event stream plus ground-truth boxes.
pub fn synthesize_scene(seed: u64, config: &SceneConfig) -> Result<(EventStream, Vec<GtBox>)> {
    config.validate()?;
    let mut rng = Rng::new(seed ^ 0x5ce9e_5eed);
    let (gw, gh) = (config.width as f64, config.height as f64);

    let mut objects = Vec::with_capacity(config.num_objects);
    for i in 0..config.num_objects {
        let class_id = (i % 2) as u32;
        let size = if class_id == 0 { &config.large_size } else { &config.small_size };
        let w = rng.range_f64(size.min_w, size.max_w).min(gw - 2.0).max(2.0);
        let h = rng.range_f64(size.min_h, size.max_h).min(gh - 2.0).max(2.0);
        let x = rng.range_f64(0.0, gw - w);
        let y = rng.range_f64(0.0, gh - h);
        let speed = rng.range_f64(config.speed_px_per_s.0, config.speed_px_per_s.1);
        let angle = rng.range_f64(0.0, 2.0 * core::f64::consts::PI);
        objects.push(MovingRect {
            class_id,
            x,
            y,
            w,
            h,
            vx: speed * libm::cos(angle) / 1e6,
            vy: speed * libm::sin(angle) / 1e6,
        });
    }

    let mut events: Vec<Event> = Vec::new();
    let mut labels: Vec<GtBox> = Vec::new();
    let mut next_label = config.label_interval_us;

    let mut t = 0u64;
    while t < config.duration_us {
        let dt = STEP_US.min(config.duration_us - t);
        for obj in objects.iter_mut() {
            step_object(
                obj,
                dt as f64,
                gw,
                gh,
                config.event_rate,
                config.fill_rate,
                t,
                &mut rng,
                &mut events,
            );
        }
        t += dt;
        while next_label <= t && next_label <= config.duration_us {
            for obj in &objects {
                let (clamped, _) = GtBox {
                    t: next_label,
                    class_id: obj.class_id,
                    x: obj.x,
                    y: obj.y,
                    w: obj.w,
                    h: obj.h,
                }
                .clamped(config.geometry())?;
                labels.push(clamped);
            }
            next_label += config.label_interval_us;
        }
    }

    let n_noise = (config.noise_rate_hz * config.duration_us as f64 / 1e6) as u64;
    for _ in 0..n_noise {
        events.push(Event {
            t: rng.below(config.duration_us),
            x: rng.below(config.width as u64) as u16,
            y: rng.below(config.height as u64) as u16,
            p: if rng.next_f64() < 0.5 { 1 } else { -1 },
        });
    }

    events.sort_by_key(|e| e.t);
    let stream = EventStream::new(config.geometry(), events)?;
    Ok((stream, labels))
}

#[allow(clippy::too_many_arguments)]
fn step_object(
    obj: &mut MovingRect,
    dt_us: f64,
    gw: f64,
    gh: f64,
    event_rate: f64,
    fill_rate: f64,
    t_start: u64,
    rng: &mut Rng,
    events: &mut Vec<Event>,
) {
    let (x0, y0) = (obj.x, obj.y);
    let mut nx = obj.x + obj.vx * dt_us;
    let mut ny = obj.y + obj.vy * dt_us;
    // Bounce off the walls, keeping the box fully inside.
    if nx < 0.0 {
        nx = -nx;
        obj.vx = -obj.vx;
    }
    if nx + obj.w > gw {
        nx = 2.0 * (gw - obj.w) - nx;
        obj.vx = -obj.vx;
    }
    if ny < 0.0 {
        ny = -ny;
        obj.vy = -obj.vy;
    }
    if ny + obj.h > gh {
        ny = 2.0 * (gh - obj.h) - ny;
        obj.vy = -obj.vy;
    }
    obj.x = nx.clamp(0.0, gw - obj.w);
    obj.y = ny.clamp(0.0, gh - obj.h);

    // Within one micro-step the motion is at most a pixel or two; emit one
    // burst per crossed column (vertical edges) and per crossed row
    // (horizontal edges) at the step midpoint.
    let t_ev = t_start + (dt_us as u64) / 2;

    let crossings = emit_axis_crossings(
        x0, obj.x, obj.w, obj.y, obj.h, gw, gh, event_rate, t_ev, rng, events, true,
    ) + emit_axis_crossings(
        y0, obj.y, obj.h, obj.x, obj.w, gh, gw, event_rate, t_ev, rng, events, false,
    );
    // Interior texture: per crossed boundary, each covered pixel may emit
    // one event of either polarity.
    if fill_rate > 0.0 && crossings > 0 {
        let x_lo = libm::floor(obj.x).max(0.0) as i64;
        let x_hi = (libm::ceil(obj.x + obj.w) as i64).min(gw as i64);
        let y_lo = libm::floor(obj.y).max(0.0) as i64;
        let y_hi = (libm::ceil(obj.y + obj.h) as i64).min(gh as i64);
        for _ in 0..crossings {
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if rng.next_f64() < fill_rate {
                        events.push(Event { t: t_ev, x: x as u16, y: y as u16, p: 1 });
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn emit_axis_crossings(
    pos0: f64,
    pos1: f64,
    extent: f64,
    ortho_pos: f64,
    ortho_extent: f64,
    axis_len: f64,
    ortho_len: f64,
    event_rate: f64,
    t_ev: u64,
    rng: &mut Rng,
    events: &mut Vec<Event>,
    axis_is_x: bool,
) -> usize {
    if pos1 == pos0 {
        return 0;
    }
    let moving_pos = pos1 > pos0;
    // Leading edge of motion. Moving in + direction: leading is pos + extent,
    // trailing is pos. Reverse for - direction.
    let (lead0, lead1, trail0, trail1) = if moving_pos {
        (pos0 + extent, pos1 + extent, pos0, pos1)
    } else {
        (pos1, pos0, pos1 + extent, pos0 + extent)
    };
    let span_lo = libm::floor(ortho_pos).max(0.0) as i64;
    let span_hi = (libm::ceil(ortho_pos + ortho_extent) as i64).min(ortho_len as i64);
    let mut emit_line = |line: i64, polarity: i8| {
        if line < 0 || line >= axis_len as i64 {
            return;
        }
        for o in span_lo..span_hi {
            if rng.next_f64() < event_rate {
                let (x, y) = if axis_is_x { (line, o) } else { (o, line) };
                events.push(Event {
                    t: t_ev,
                    x: x as u16,
                    y: y as u16,
                    p: polarity,
                });
            }
        }
    };
    // Pixel columns/rows newly crossed by each edge in this step.
    let mut crossings = 0usize;
    for c in crossed_cells(lead0, lead1) {
        emit_line(c, 1);
        crossings += 1;
    }
    for c in crossed_cells(trail0, trail1) {
        emit_line(c, -1);
    }
    crossings
}

/// Integer cells whose boundary the half-open sweep (a, b] crossed.
fn crossed_cells(a: f64, b: f64) -> impl Iterator<Item = i64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let start = libm::floor(lo) as i64 + 1;
    let end = libm::floor(hi) as i64;
    start..=end
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SceneConfig::default();
        let (s1, l1) = synthesize_scene(1, &cfg).unwrap();
        let (s2, l2) = synthesize_scene(1, &cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        assert!(!s1.is_empty());
    }

    #[test]
    fn static_object_without_noise_emits_nothing() {
        let cfg = SceneConfig {
            num_objects: 1,
            speed_px_per_s: (0.0, 0.0),
            noise_rate_hz: 0.0,
            ..SceneConfig::default()
        };
        let (s, labels) = synthesize_scene(42, &cfg).unwrap();
        assert_eq!(s.len(), 0);
        assert!(!labels.is_empty());
    }

    #[test]
    fn degenerate_scene_is_rejected() {
        let cfg = SceneConfig {
            num_objects: 0,
            noise_rate_hz: 0.0,
            ..SceneConfig::default()
        };
        assert!(synthesize_scene(1, &cfg).is_err());
        let cfg = SceneConfig { duration_us: 0, ..SceneConfig::default() };
        assert!(synthesize_scene(1, &cfg).is_err());
    }

    #[test]
    fn labels_lie_inside_geometry() {
        let cfg = SceneConfig::default();
        let (_, labels) = synthesize_scene(9, &cfg).unwrap();
        for b in labels {
            assert!(b.x >= 0.0 && b.y >= 0.0);
            assert!(b.x + b.w <= cfg.width as f64 + 1e-9);
            assert!(b.y + b.h <= cfg.height as f64 + 1e-9);
        }
    }

    // Polarity-histogram oracle: a rightward mover with integral width and
    // event_rate 1 emits, per crossing, +1 events exactly one object-width
    // to the right of the -1 events.
    #[test]
    fn rightward_motion_concentrates_positive_polarity_on_leading_edge() {
        let cfg = SceneConfig {
            width: 128,
            height: 32,
            duration_us: 300_000,
            num_objects: 1,
            speed_px_per_s: (50.0, 50.0),
            event_rate: 1.0,
            fill_rate: 0.0,
            noise_rate_hz: 0.0,
            large_size: SizeRange { min_w: 10.0, max_w: 10.0, min_h: 8.0, max_h: 8.0 },
            ..SceneConfig::default()
        };
        // Find a seed whose single object moves mostly rightward.
        let mut chosen = None;
        for seed in 0..200 {
            let (s, _) = synthesize_scene(seed, &cfg).unwrap();
            if s.is_empty() {
                continue;
            }
            let pos: Vec<i64> = s
                .events()
                .iter()
                .filter(|e| e.p == 1)
                .map(|e| e.x as i64)
                .collect();
            let neg: Vec<i64> = s
                .events()
                .iter()
                .filter(|e| e.p == -1)
                .map(|e| e.x as i64)
                .collect();
            // Require pure horizontal rightward crossings: counts match and
            // every burst is column-aligned.
            if !pos.is_empty() && pos.len() == neg.len() {
                let mut shifted: Vec<i64> = pos.iter().map(|c| c - 10).collect();
                let mut neg_s = neg.clone();
                shifted.sort_unstable();
                neg_s.sort_unstable();
                if shifted == neg_s {
                    chosen = Some(seed);
                    break;
                }
            }
        }
        assert!(
            chosen.is_some(),
            "no seed produced a clean horizontal mover; generator polarity model broken"
        );
    }
}
