//! Binary layout (little-endian): `"EVT1"`, width u32, height u32, count u64,
//! then `count` records of `{x u16, y u16, t u64, p u8}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Event, EventStream};
use crate::error::{Error, Result};

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";
const HEADER_LEN: usize = 20;
const RECORD_LEN: usize = 13;

pub fn write_events(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    buf.extend_from_slice(EVENT_MAGIC);
    buf.extend_from_slice(&stream.width().to_le_bytes());
    buf.extend_from_slice(&stream.height().to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.push(e.p);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_events(&bytes)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

pub(crate) fn parse_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < 4 || &bytes[..4] != EVENT_MAGIC {
        return Err(format_err(0, "bad magic, expected EVT1"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let width = le_u32(&bytes[4..8]);
    let height = le_u32(&bytes[8..12]);
    let count = le_u64(&bytes[12..20]);
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut last_t = 0u64;
    for i in 0..count {
        let off = HEADER_LEN + i as usize * RECORD_LEN;
        let Some(rec) = bytes.get(off..off + RECORD_LEN) else {
            return Err(format_err(
                off.min(bytes.len()),
                format!("truncated record {i} of {count}"),
            ));
        };
        let e = Event {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            t: le_u64(&rec[4..12]),
            p: rec[12],
        };
        if u32::from(e.x) >= width || u32::from(e.y) >= height {
            return Err(Error::EventBounds {
                index: i,
                x: u32::from(e.x),
                y: u32::from(e.y),
                width,
                height,
            });
        }
        if e.p > 1 {
            return Err(format_err(off + 12, format!("record {i}: polarity {}", e.p)));
        }
        if e.t < last_t {
            return Err(format_err(
                off + 4,
                format!("record {i}: timestamp {} decreases from {last_t}", e.t),
            ));
        }
        last_t = e.t;
        events.push(e);
    }
    let end = HEADER_LEN + count as usize * RECORD_LEN;
    if bytes.len() != end {
        return Err(format_err(end, "trailing bytes after last record"));
    }
    EventStream::new(width, height, events)
}

pub fn write_events_csv(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "x,y,t,p")?;
        for e in stream.events() {
            writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.p)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads the CSV form; the sensor size is not stored in CSV and must be
/// supplied.
pub fn read_events_csv(path: impl AsRef<Path>, width: u32, height: u32) -> Result<EventStream> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    let mut offset = 0usize;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let start = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        if n == 0 {
            if trimmed != "x,y,t,p" {
                return Err(format_err(0, "expected header x,y,t,p"));
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let bad = || format_err(start, format!("malformed line {}", n + 1));
        if fields.len() != 4 {
            return Err(bad());
        }
        let e = Event {
            x: fields[0].trim().parse().map_err(|_| bad())?,
            y: fields[1].trim().parse().map_err(|_| bad())?,
            t: fields[2].trim().parse().map_err(|_| bad())?,
            p: fields[3].trim().parse().map_err(|_| bad())?,
        };
        if let Some(prev) = events.last().map(|p: &Event| p.t) {
            if e.t < prev {
                return Err(format_err(start, format!("line {}: timestamp decreases", n + 1)));
            }
        }
        events.push(e);
    }
    EventStream::new(width, height, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventStream {
        EventStream::new(
            4,
            3,
            vec![
                Event { x: 0, y: 0, t: 1, p: 1 },
                Event { x: 3, y: 2, t: 5, p: 0 },
                Event { x: 1, y: 1, t: 5, p: 1 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.evt");
        write_events(&sample(), &p).unwrap();
        assert_eq!(read_events(&p).unwrap(), sample());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_events_csv(&sample(), &p).unwrap();
        assert_eq!(read_events_csv(&p, 4, 3).unwrap(), sample());
    }

    fn encoded() -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.evt");
        write_events(&sample(), &p).unwrap();
        fs::read(p).unwrap()
    }

    #[test]
    fn wrong_magic_at_offset_zero() {
        let mut b = encoded();
        b[0] = b'X';
        assert!(matches!(parse_events(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_record() {
        let b = encoded();
        let cut = &b[..b.len() - 5];
        match parse_events(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (20 + 2 * 13) as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_names_record() {
        let mut b = encoded();
        // Record 1: set x = width (4).
        let off = 20 + 13;
        b[off..off + 2].copy_from_slice(&4u16.to_le_bytes());
        match parse_events(&b) {
            Err(Error::EventBounds { index, x, .. }) => assert_eq!((index, x), (1, 4)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decreasing_timestamp() {
        let mut b = encoded();
        let off = 20 + 2 * 13 + 4;
        b[off..off + 8].copy_from_slice(&0u64.to_le_bytes());
        match parse_events(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, off as u64),
            other => panic!("unexpected {other:?}"),
        }
    }
}
