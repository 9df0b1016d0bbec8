//! Event-stream and ground-truth primitives.
//!
//! A sensor event is the tuple (t, x, y, p): microsecond timestamp, pixel
//! coordinates, and polarity. On disk polarity is stored as {0, 1}; in
//! memory it is {-1, +1} so signed polarity sums are direct.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One sensor event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    /// Column index.
    pub x: u16,
    /// Row index.
    pub y: u16,
    /// Polarity, exactly +1 or -1.
    pub p: i8,
}

/// Sensor geometry in pixels (width, height).
pub type Geometry = (u16, u16);

/// A time-ordered event sequence with its sensor geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub geometry: Geometry,
    events: Vec<Event>,
}

impl EventStream {
    /// Build a validated stream; out-of-order input is stably sorted by t.
    pub fn new(geometry: Geometry, mut events: Vec<Event>) -> Result<EventStream> {
        for (i, e) in events.iter().enumerate() {
            validate_event(e, geometry).map_err(|m| {
                Error::Validation(alloc::format!("event {i}: {m}"))
            })?;
        }
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(EventStream { geometry, events })
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

    /// Index of the first event with `t >= t_us`.
    pub fn partition_at(&self, t_us: u64) -> usize {
        self.events.partition_point(|e| e.t < t_us)
    }
}

fn validate_event(e: &Event, geometry: Geometry) -> core::result::Result<(), String> {
    if e.p != 1 && e.p != -1 {
        return Err(alloc::format!("polarity {} not in {{+1, -1}}", e.p));
    }
    if e.x >= geometry.0 || e.y >= geometry.1 {
        return Err(alloc::format!(
            "coordinate ({}, {}) outside geometry {}x{}",
            e.x,
            e.y,
            geometry.0,
            geometry.1
        ));
    }
    Ok(())
}

/// Ground-truth bounding box: top-left corner plus extent, class label,
/// and the label timestamp in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GtBox {
    pub t: u64,
    pub class_id: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    /// Clamp the box to the sensor geometry. Returns a note when clamping
    /// actually changed the box, or an error when extent is non-positive.
    pub fn clamped(mut self, geometry: Geometry) -> Result<(GtBox, Option<String>)> {
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(alloc::format!(
                "box at t={} has non-positive extent {}x{}",
                self.t,
                self.w,
                self.h
            )));
        }
        let (gw, gh) = (geometry.0 as f64, geometry.1 as f64);
        let orig = self;
        let x2 = (self.x + self.w).min(gw);
        let y2 = (self.y + self.h).min(gh);
        self.x = self.x.max(0.0);
        self.y = self.y.max(0.0);
        self.w = x2 - self.x;
        self.h = y2 - self.y;
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(alloc::format!(
                "box at t={} lies entirely outside the {}x{} geometry",
                self.t,
                geometry.0,
                geometry.1
            )));
        }
        let note = if self != orig {
            Some(alloc::format!(
                "box at t={} clamped to geometry ({}, {}, {}, {})",
                self.t,
                self.x,
                self.y,
                self.w,
                self.h
            ))
        } else {
            None
        };
        Ok((self, note))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn stream_sorts_out_of_order_events() {
        let events = vec![
            Event { t: 5, x: 1, y: 2, p: -1 },
            Event { t: 0, x: 1, y: 2, p: 1 },
        ];
        let s = EventStream::new((4, 4), events).unwrap();
        assert_eq!(s.events()[0].t, 0);
        assert_eq!(s.events()[1].t, 5);
    }

    #[test]
    fn stream_rejects_bad_polarity_and_geometry() {
        let bad_p = vec![Event { t: 0, x: 0, y: 0, p: 0 }];
        assert!(EventStream::new((4, 4), bad_p).is_err());
        let bad_xy = vec![Event { t: 0, x: 4, y: 0, p: 1 }];
        assert!(EventStream::new((4, 4), bad_xy).is_err());
    }

    #[test]
    fn gtbox_clamps_to_geometry_with_note() {
        let b = GtBox { t: 0, class_id: 0, x: 60.0, y: 10.0, w: 20.0, h: 12.0 };
        let (c, note) = b.clamped((64, 64)).unwrap();
        assert_eq!(c.w, 4.0);
        assert!(note.is_some());
        let inside = GtBox { t: 0, class_id: 0, x: 10.0, y: 10.0, w: 20.0, h: 12.0 };
        let (c, note) = inside.clamped((64, 64)).unwrap();
        assert_eq!(c.w, 20.0);
        assert!(note.is_none());
    }

    #[test]
    fn gtbox_rejects_non_positive_extent() {
        let b = GtBox { t: 0, class_id: 0, x: 1.0, y: 1.0, w: 0.0, h: 5.0 };
        assert!(b.clamped((64, 64)).is_err());
    }
}
