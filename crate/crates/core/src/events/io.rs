//! EVS1 binary event files and the CSV alternative.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic "EVS1" | width u16 | height u16 | label i32 (-1 = none) | count u64 | reserved u32
//! count × ( t u64 | x u16 | y u16 | polarity u8 | pad u8 )
//! ```
//!
//! CSV files start with an optional `# width=W height=H label=L` line, then
//! the header `t_us,x,y,polarity`. Without the preamble the sensor size is
//! inferred from the largest coordinates.

use std::path::Path;

use super::{Event, EventError, EventStream};

const MAGIC: &[u8; 4] = b"EVS1";
const HEADER_LEN: usize = 24;
const RECORD_LEN: usize = 14;
const CSV_HEADER: &str = "t_us,x,y,polarity";

fn fmt_err(offset: usize, detail: impl Into<String>) -> EventError {
    EventError::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    let label = stream.label().map_or(-1i32, |l| l as i32);
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity);
        out.push(0);
    }
    out
}

pub fn encode_events_csv(stream: &EventStream) -> String {
    let mut out = format!(
        "# width={} height={} label={}\n{CSV_HEADER}\n",
        stream.width(),
        stream.height(),
        stream.label().map_or(-1i64, |l| l as i64)
    );
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.polarity));
    }
    out
}

/// Parses either format, chosen by the leading bytes.
pub fn decode_events(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.starts_with(MAGIC) {
        decode_binary(bytes)
    } else if bytes.starts_with(b"#") || bytes.starts_with(CSV_HEADER.as_bytes()) {
        let text = std::str::from_utf8(bytes).map_err(|e| fmt_err(e.valid_up_to(), "invalid UTF-8"))?;
        decode_csv(text)
    } else {
        Err(fmt_err(0, "unrecognized header (expected EVS1 magic or CSV header)"))
    }
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn decode_binary(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), "truncated header"));
    }
    let width = u16_at(bytes, 4);
    let height = u16_at(bytes, 6);
    let label = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l as u32),
        l => return Err(fmt_err(8, format!("invalid label {l}"))),
    };
    let body = bytes.len() - HEADER_LEN;
    let expected = (count as u128) * RECORD_LEN as u128;
    if (body as u128) < expected {
        let complete = body / RECORD_LEN;
        return Err(fmt_err(
            HEADER_LEN + complete * RECORD_LEN,
            format!("truncated record {complete} of {count}"),
        ));
    }
    if (body as u128) > expected {
        return Err(fmt_err(
            HEADER_LEN + expected as usize,
            "trailing bytes after last record",
        ));
    }
    let mut events = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let o = HEADER_LEN + i * RECORD_LEN;
        let e = Event {
            t: u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")),
            x: u16_at(bytes, o + 8),
            y: u16_at(bytes, o + 10),
            polarity: bytes[o + 12],
        };
        check_event(&e, events.last(), width, height).map_err(|d| fmt_err(o, d))?;
        events.push(e);
    }
    EventStream::new(width, height, events, label)
}

fn check_event(e: &Event, prev: Option<&Event>, width: u16, height: u16) -> Result<(), String> {
    if e.x >= width || e.y >= height {
        return Err(format!("event ({}, {}) outside {width}x{height}", e.x, e.y));
    }
    if e.polarity > 1 {
        return Err(format!("polarity {} is not 0 or 1", e.polarity));
    }
    if prev.is_some_and(|p| p.t > e.t) {
        return Err(format!("timestamp {} earlier than previous event", e.t));
    }
    Ok(())
}

fn decode_csv(text: &str) -> Result<EventStream, EventError> {
    let mut offset = 0;
    let mut dims: Option<(u16, u16)> = None;
    let mut label = None;
    let mut saw_header = false;
    let mut events: Vec<Event> = Vec::new();
    let mut event_offsets = Vec::new();
    for raw in text.split_inclusive('\n') {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if let Some(meta) = line.strip_prefix('#') {
                let (w, h, l) = parse_preamble(meta).map_err(|d| fmt_err(line_start, d))?;
                dims = Some((w, h));
                label = l;
                continue;
            }
            if line != CSV_HEADER {
                return Err(fmt_err(line_start, format!("expected header `{CSV_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(fmt_err(line_start, format!("expected 4 fields, got {}", fields.len())));
        }
        let bad = |what: &str| fmt_err(line_start, format!("invalid {what}"));
        let e = Event {
            t: fields[0].parse().map_err(|_| bad("t_us"))?,
            x: fields[1].parse().map_err(|_| bad("x"))?,
            y: fields[2].parse().map_err(|_| bad("y"))?,
            polarity: fields[3].parse().map_err(|_| bad("polarity"))?,
        };
        events.push(e);
        event_offsets.push(line_start);
    }
    if !saw_header {
        return Err(fmt_err(offset, "missing CSV header"));
    }
    let (width, height) = dims.unwrap_or_else(|| {
        let w = events.iter().map(|e| e.x).max().map_or(0, |x| x.saturating_add(1));
        let h = events.iter().map(|e| e.y).max().map_or(0, |y| y.saturating_add(1));
        (w, h)
    });
    for (i, e) in events.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| &events[p]);
        check_event(e, prev, width, height).map_err(|d| fmt_err(event_offsets[i], d))?;
    }
    EventStream::new(width, height, events, label)
}

fn parse_preamble(meta: &str) -> Result<(u16, u16, Option<u32>), String> {
    let (mut w, mut h, mut label) = (None, None, None);
    for kv in meta.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("malformed preamble entry `{kv}`"))?;
        match k {
            "width" => w = Some(v.parse::<u16>().map_err(|_| format!("invalid width `{v}`"))?),
            "height" => h = Some(v.parse::<u16>().map_err(|_| format!("invalid height `{v}`"))?),
            "label" => {
                let l: i64 = v.parse().map_err(|_| format!("invalid label `{v}`"))?;
                label = (l >= 0).then_some(l as u32);
            }
            other => return Err(format!("unknown preamble key `{other}`")),
        }
    }
    match (w, h) {
        (Some(w), Some(h)) => Ok((w, h, label)),
        _ => Err("preamble needs width and height".into()),
    }
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream, EventError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| EventError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_events(&bytes)
}

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<(), EventError> {
    let path = path.as_ref();
    std::fs::write(path, encode_events(stream)).map_err(|source| EventError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_events_csv(path: impl AsRef<Path>, stream: &EventStream) -> Result<(), EventError> {
    let path = path.as_ref();
    std::fs::write(path, encode_events_csv(stream)).map_err(|source| EventError::Io {
        path: path.display().to_string(),
        source,
    })
}
