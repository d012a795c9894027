//! Event tuples, the ordered event buffer, window slicing and event-to-frame
//! conversion.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size in bytes of one record in the binary event format.
pub const EVENT_RECORD_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("event {index} at ({x}, {y}) is outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u32,
        height: u32,
    },
    #[error("event {index} has timestamp {t} earlier than its predecessor {prev}")]
    Unsorted { index: usize, t: u64, prev: u64 },
    #[error("invalid polarity {0}, expected -1 or +1")]
    Polarity(i64),
    #[error("binary event stream length {0} is not a multiple of 16")]
    Truncated(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Off => -1,
            Polarity::On => 1,
        }
    }
}

impl TryFrom<i8> for Polarity {
    type Error = EventError;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            -1 => Ok(Polarity::Off),
            1 => Ok(Polarity::On),
            other => Err(EventError::Polarity(other as i64)),
        }
    }
}

impl From<Polarity> for i8 {
    fn from(p: Polarity) -> i8 {
        p.sign()
    }
}

/// A single polarity spike: pixel column/row, polarity and timestamp in µs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events of one sensor.
///
/// Appending keeps the buffer sorted; readers only ever see committed
/// prefixes, so slicing never observes a half-written record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventBuffer {
    width: u32,
    height: u32,
    events: Vec<Event>,
}

impl EventBuffer {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    /// Validates bounds and ordering of `events`.
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self, EventError> {
        check_bounds(&events, width, height)?;
        for (i, w) in events.windows(2).enumerate() {
            if w[1].t < w[0].t {
                return Err(EventError::Unsorted {
                    index: i + 1,
                    t: w[1].t,
                    prev: w[0].t,
                });
            }
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    /// Sorts by timestamp (stable) before validating.
    pub fn from_unsorted(width: u32, height: u32, mut events: Vec<Event>) -> Result<Self, EventError> {
        events.sort_by_key(|e| e.t);
        Self::new(width, height, events)
    }

    pub fn push(&mut self, e: Event) -> Result<(), EventError> {
        let index = self.events.len();
        if u32::from(e.x) >= self.width || u32::from(e.y) >= self.height {
            return Err(EventError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: self.width,
                height: self.height,
            });
        }
        if let Some(last) = self.events.last() {
            if e.t < last.t {
                return Err(EventError::Unsorted {
                    index,
                    t: e.t,
                    prev: last.t,
                });
            }
        }
        self.events.push(e);
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
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

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Events with `t0 < t <= t1`, in buffer order.
    ///
    /// The left-open convention makes consecutive windows partition the stream.
    pub fn slice_window(&self, t0: u64, t1: u64) -> &[Event] {
        slice_window(&self.events, t0, t1)
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<(), EventError> {
        write_binary(&self.events, w)
    }

    pub fn read_binary<R: Read>(r: R, width: u32, height: u32) -> Result<Self, EventError> {
        Self::new(width, height, read_binary(r)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EventError> {
        write_csv(&self.events, w)
    }

    pub fn read_csv<R: Read>(r: R, width: u32, height: u32) -> Result<Self, EventError> {
        Self::new(width, height, read_csv(r)?)
    }
}

/// Window slice over any time-sorted event slice; see [`EventBuffer::slice_window`].
pub fn slice_window(events: &[Event], t0: u64, t1: u64) -> &[Event] {
    debug_assert!(t0 <= t1);
    let lo = events.partition_point(|e| e.t <= t0);
    let hi = events.partition_point(|e| e.t <= t1);
    &events[lo..hi.max(lo)]
}

fn check_bounds(events: &[Event], width: u32, height: u32) -> Result<(), EventError> {
    match events
        .iter()
        .position(|e| u32::from(e.x) >= width || u32::from(e.y) >= height)
    {
        Some(index) => Err(EventError::OutOfBounds {
            index,
            x: events[index].x,
            y: events[index].y,
            width,
            height,
        }),
        None => Ok(()),
    }
}

/// How polarity enters the histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityMode {
    /// Event count per cell, max-normalized.
    #[default]
    Count,
    /// Signed polarity sum per cell, mapped affinely so that zero sits at 0.5.
    Signed,
}

/// What the values of an [`EventFrame`] encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameEncoding {
    Count,
    Signed,
    /// Output of [`ignore_polarity`].
    PolarityInvariant,
}

/// Normalized 2D event histogram, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    pub window_start: u64,
    pub window_end: u64,
    pub empty: bool,
    pub encoding: FrameEncoding,
}

impl EventFrame {
    pub fn zeros(width: u32, height: u32, encoding: FrameEncoding) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
            window_start: 0,
            window_end: 0,
            empty: true,
            encoding,
        }
    }

    pub fn with_window(mut self, start: u64, end: u64) -> Self {
        self.window_start = start;
        self.window_end = end;
        self
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        let w = self.width as usize;
        self.values[y as usize * w + x as usize] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub(crate) fn refresh_empty(&mut self) {
        self.empty = self.values.iter().all(|&v| v == 0.0);
    }
}

/// Converts an event batch to a normalized histogram.
///
/// `Count` divides per-cell counts by the maximum count; `Signed` maps the
/// per-cell polarity sum `s` to `0.5 + 0.5 * s / max|s|`. An empty batch yields
/// an all-zero frame flagged `empty` in both modes.
pub fn accumulate_frame(
    batch: &[Event],
    width: u32,
    height: u32,
    mode: PolarityMode,
) -> Result<EventFrame, EventError> {
    check_bounds(batch, width, height)?;
    let encoding = match mode {
        PolarityMode::Count => FrameEncoding::Count,
        PolarityMode::Signed => FrameEncoding::Signed,
    };
    let mut frame = EventFrame::zeros(width, height, encoding);
    if batch.is_empty() {
        return Ok(frame);
    }
    let w = width as usize;
    let mut acc = vec![0i64; frame.values.len()];
    for e in batch {
        let idx = e.y as usize * w + e.x as usize;
        acc[idx] += match mode {
            PolarityMode::Count => 1,
            PolarityMode::Signed => i64::from(e.p.sign()),
        };
    }
    match mode {
        PolarityMode::Count => {
            let max = *acc.iter().max().unwrap_or(&0) as f64;
            for (v, &c) in frame.values.iter_mut().zip(&acc) {
                *v = c as f64 / max;
            }
        }
        PolarityMode::Signed => {
            let max = acc.iter().map(|c| c.abs()).max().unwrap_or(0) as f64;
            for (v, &c) in frame.values.iter_mut().zip(&acc) {
                *v = if max > 0.0 { 0.5 + 0.5 * c as f64 / max } else { 0.5 };
            }
        }
    }
    frame.empty = false;
    Ok(frame)
}

/// Accumulates the window `(t0, t1]` of `buffer`.
pub fn accumulate_window(
    buffer: &EventBuffer,
    t0: u64,
    t1: u64,
    mode: PolarityMode,
) -> Result<EventFrame, EventError> {
    Ok(accumulate_frame(buffer.slice_window(t0, t1), buffer.width, buffer.height, mode)?
        .with_window(t0, t1))
}

/// Folds negative activity onto positive: `v' = |v - 0.5| * 2`, then
/// max-normalizes. Frames that are not signed pass through untouched, which
/// makes the transform idempotent.
pub fn ignore_polarity(frame: &EventFrame) -> EventFrame {
    if frame.encoding != FrameEncoding::Signed {
        return frame.clone();
    }
    let mut out = frame.clone();
    out.encoding = FrameEncoding::PolarityInvariant;
    if frame.empty {
        return out;
    }
    for v in out.values.iter_mut() {
        *v = ((*v - 0.5).abs() * 2.0).min(1.0);
    }
    let max = out.values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in out.values.iter_mut() {
            *v /= max;
        }
    }
    out.refresh_empty();
    out
}

pub fn write_binary<W: Write>(events: &[Event], mut w: W) -> Result<(), EventError> {
    let mut rec = [0u8; EVENT_RECORD_BYTES];
    for e in events {
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p.sign() as u8;
        rec[13..16].fill(0);
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<Event>, EventError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % EVENT_RECORD_BYTES != 0 {
        return Err(EventError::Truncated(bytes.len()));
    }
    bytes
        .chunks_exact(EVENT_RECORD_BYTES)
        .map(|rec| {
            Ok(Event {
                t: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
                x: u16::from_le_bytes(rec[8..10].try_into().unwrap()),
                y: u16::from_le_bytes(rec[10..12].try_into().unwrap()),
                p: Polarity::try_from(rec[12] as i8)?,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CsvEvent {
    t_us: u64,
    x: u16,
    y: u16,
    p: i8,
}

pub fn write_csv<W: Write>(events: &[Event], w: W) -> Result<(), EventError> {
    let mut wr = csv::Writer::from_writer(w);
    for e in events {
        wr.serialize(CsvEvent {
            t_us: e.t,
            x: e.x,
            y: e.y,
            p: e.p.sign(),
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<Event>, EventError> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize::<CsvEvent>()
        .map(|row| {
            let row = row?;
            Ok(Event::new(row.t_us, row.x, row.y, Polarity::try_from(row.p)?))
        })
        .collect()
}
