//! On-disk event and label formats.
//!
//! Events: CSV with header `t_us,x,y,p` where p is {0,1} on disk and maps
//! to {-1,+1} in memory; or the packed binary variant with magic `EVT1`
//! followed by little-endian records (u32 t_us, u16 x, u16 y, u8 p).
//! Labels: CSV with header `t_us,class_id,x,y,w,h`.

use std::fs;
use std::io::Write;
use std::path::Path;

use spikefpn_core::event::{Event, EventStream, Geometry, GtBox};

use crate::error::{CliError, Result};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
const EVENT_HEADER: &str = "t_us,x,y,p";
const LABEL_HEADER: &str = "t_us,class_id,x,y,w,h";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Load events from CSV or EVT1, sniffing the binary magic.
pub fn load_events(path: &Path, geometry: Geometry) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    if bytes.len() >= 4 && &bytes[..4] == EVT1_MAGIC {
        load_events_evt1(path, &bytes, geometry)
    } else {
        load_events_csv(path, &bytes, geometry)
    }
}

fn load_events_csv(path: &Path, bytes: &[u8], geometry: Geometry) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| parse_err(path, 1, "event file is not valid UTF-8 CSV"))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EVENT_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(path, 1, format!("expected header `{EVENT_HEADER}`, got `{h}`")))
        }
        None => return EventStream::new(geometry, Vec::new()).map_err(Into::into),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut field = |name: &str| -> Result<&str> {
            fields
                .next()
                .ok_or_else(|| parse_err(path, i + 1, format!("missing field {name}")))
        };
        let t: u64 = field("t_us")?
            .trim()
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("t_us: {e}")))?;
        let x: u16 = field("x")?
            .trim()
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("x: {e}")))?;
        let y: u16 = field("y")?
            .trim()
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("y: {e}")))?;
        let p_raw: u8 = field("p")?
            .trim()
            .parse()
            .map_err(|e| parse_err(path, i + 1, format!("p: {e}")))?;
        let p = match p_raw {
            0 => -1,
            1 => 1,
            other => return Err(parse_err(path, i + 1, format!("polarity {other} not in {{0,1}}"))),
        };
        events.push(Event { t, x, y, p });
    }
    EventStream::new(geometry, events).map_err(Into::into)
}

fn load_events_evt1(path: &Path, bytes: &[u8], geometry: Geometry) -> Result<EventStream> {
    let body = &bytes[4..];
    const REC: usize = 9; // u32 + u16 + u16 + u8
    if body.len() % REC != 0 {
        return Err(parse_err(
            path,
            0,
            format!("EVT1 body length {} is not a multiple of {REC}", body.len()),
        ));
    }
    let mut events = Vec::with_capacity(body.len() / REC);
    for (i, rec) in body.chunks_exact(REC).enumerate() {
        let t = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]) as u64;
        let x = u16::from_le_bytes([rec[4], rec[5]]);
        let y = u16::from_le_bytes([rec[6], rec[7]]);
        let p = match rec[8] {
            0 => -1,
            1 => 1,
            other => {
                return Err(parse_err(path, i, format!("record {i}: polarity {other} not in {{0,1}}")))
            }
        };
        events.push(Event { t, x, y, p });
    }
    EventStream::new(geometry, events).map_err(Into::into)
}

/// Save a stream as CSV (p mapped back to {0,1}).
pub fn save_events_csv(stream: &EventStream, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(stream.len() * 16 + 16);
    out.push_str(EVENT_HEADER);
    out.push('\n');
    for e in stream.events() {
        let p = if e.p > 0 { 1 } else { 0 };
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, p));
    }
    fs::write(path, out).map_err(CliError::io(path))
}

/// Save a stream in the packed EVT1 format.
pub fn save_events_evt1(stream: &EventStream, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(CliError::io(path))?;
    let mut buf = Vec::with_capacity(4 + stream.len() * 9);
    buf.extend_from_slice(EVT1_MAGIC);
    for e in stream.events() {
        let t = u32::try_from(e.t)
            .map_err(|_| CliError::Other(format!("timestamp {} exceeds the EVT1 u32 range", e.t)))?;
        buf.extend_from_slice(&t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(if e.p > 0 { 1 } else { 0 });
    }
    f.write_all(&buf).map_err(CliError::io(path))
}

/// Load ground-truth boxes; returns clamping warnings for the caller to
/// surface. Boxes keep file order, duplicates included.
pub fn load_labels(path: &Path, geometry: Geometry) -> Result<(Vec<GtBox>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LABEL_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(path, 1, format!("expected header `{LABEL_HEADER}`, got `{h}`")))
        }
        None => return Ok((Vec::new(), Vec::new())),
    }
    let mut boxes = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(parse_err(path, i + 1, format!("expected 6 fields, got {}", fields.len())));
        }
        let parse_f = |s: &str, name: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| parse_err(path, i + 1, format!("{name}: {e}")))
        };
        let raw = GtBox {
            t: fields[0]
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("t_us: {e}")))?,
            class_id: fields[1]
                .parse()
                .map_err(|e| parse_err(path, i + 1, format!("class_id: {e}")))?,
            x: parse_f(fields[2], "x")?,
            y: parse_f(fields[3], "y")?,
            w: parse_f(fields[4], "w")?,
            h: parse_f(fields[5], "h")?,
        };
        let (clamped, note) = raw.clamped(geometry)?;
        if let Some(n) = note {
            warnings.push(format!("{}:{}: {n}", path.display(), i + 1));
        }
        boxes.push(clamped);
    }
    Ok((boxes, warnings))
}

pub fn save_labels(boxes: &[GtBox], path: &Path) -> Result<()> {
    let mut out = String::from(LABEL_HEADER);
    out.push('\n');
    for b in boxes {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.t, b.class_id, b.x, b.y, b.w, b.h
        ));
    }
    fs::write(path, out).map_err(CliError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sfpn_event_io_tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let stream = EventStream::new(
            (8, 8),
            vec![
                Event { t: 0, x: 1, y: 2, p: 1 },
                Event { t: 5, x: 1, y: 2, p: -1 },
            ],
        )
        .unwrap();
        let p = tmp("roundtrip.csv");
        save_events_csv(&stream, &p).unwrap();
        let back = load_events(&p, (8, 8)).unwrap();
        assert_eq!(stream, back);
    }

    #[test]
    fn evt1_round_trip_is_identity() {
        let stream = EventStream::new(
            (300, 200),
            vec![
                Event { t: 12, x: 299, y: 0, p: -1 },
                Event { t: 900_000, x: 4, y: 199, p: 1 },
            ],
        )
        .unwrap();
        let p = tmp("roundtrip.evt1");
        save_events_evt1(&stream, &p).unwrap();
        let back = load_events(&p, (300, 200)).unwrap();
        assert_eq!(stream, back);
    }

    #[test]
    fn csv_zero_polarity_maps_to_minus_one() {
        let p = tmp("pol.csv");
        fs::write(&p, "t_us,x,y,p\n0,1,2,1\n5,1,2,0\n").unwrap();
        let s = load_events(&p, (8, 8)).unwrap();
        assert_eq!(s.events()[0].p, 1);
        assert_eq!(s.events()[1].p, -1);
    }

    #[test]
    fn empty_file_gives_empty_stream() {
        let p = tmp("empty.csv");
        fs::write(&p, "t_us,x,y,p\n").unwrap();
        assert_eq!(load_events(&p, (8, 8)).unwrap().len(), 0);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let p = tmp("bad.csv");
        fs::write(&p, "t_us,x,y,p\n0,1,2,1\nnot,a,row,x\n").unwrap();
        match load_events(&p, (8, 8)) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let oob = tmp("oob.csv");
        fs::write(&oob, "t_us,x,y,p\n0,99,2,1\n").unwrap();
        assert!(matches!(load_events(&oob, (8, 8)), Err(CliError::Core(_))));
    }

    #[test]
    fn out_of_order_events_are_sorted() {
        let p = tmp("unsorted.csv");
        fs::write(&p, "t_us,x,y,p\n50,1,1,1\n10,2,2,0\n").unwrap();
        let s = load_events(&p, (8, 8)).unwrap();
        assert_eq!(s.events()[0].t, 10);
    }

    #[test]
    fn labels_parse_clamp_and_keep_duplicates() {
        let p = tmp("labels.csv");
        fs::write(
            &p,
            "t_us,class_id,x,y,w,h\n60000,0,10,10,20,12\n60000,1,60,10,20,12\n60000,0,10,10,20,12\n",
        )
        .unwrap();
        let (boxes, warnings) = load_labels(&p, (64, 64)).unwrap();
        assert_eq!(boxes.len(), 3);
        assert_eq!(boxes[0].w, 20.0);
        assert_eq!(boxes[1].w, 4.0, "clamped to the right edge");
        assert_eq!(warnings.len(), 1);
        // Duplicates retained in order.
        assert_eq!(boxes[0], boxes[2]);
    }

    #[test]
    fn labels_reject_non_positive_extent() {
        let p = tmp("labels_bad.csv");
        fs::write(&p, "t_us,class_id,x,y,w,h\n0,0,1,1,0,5\n").unwrap();
        assert!(load_labels(&p, (64, 64)).is_err());
    }
}
