//! Standard MIDI File reading and writing, reduced to a note-event document.
//!
//! Reading accepts format 0 and format 1 files with metrical timing. Note-on
//! and note-off events (including note-on with velocity 0) are paired per
//! track and channel; tempo events and sustain-pedal controller events are
//! collected across all tracks. Everything else is skipped.
//!
//! Writing always produces a format-0 file with a single track and no running
//! status. Events at the same tick are ordered tempo, note-off, pedal,
//! note-on; note events within each group follow pitch order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MICROSECONDS_PER_BEAT: u32 = 500_000;
const SUSTAIN_CONTROLLER: u8 = 64;
const NOTE_OFF_VELOCITY: u8 = 0x40;
const MAX_DELTA: u32 = 0x0FFF_FFFF;

/// One sounding note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u32,
    pub offset: u32,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn duration(&self) -> u32 {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoEvent {
    pub tick: u32,
    pub microseconds_per_beat: u32,
}

/// Sustain pedal (controller 64) change, kept only so it survives a round trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PedalEvent {
    pub tick: u32,
    pub channel: u8,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MidiDocument {
    /// Ticks per quarter note.
    pub resolution: u16,
    /// Sorted by `(onset, pitch)`.
    pub notes: Vec<NoteEvent>,
    /// Sorted by tick, first event at tick 0.
    pub tempos: Vec<TempoEvent>,
    pub pedals: Vec<PedalEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MidiError {
    #[error("malformed header chunk at byte {offset}: {message}")]
    Header { offset: usize, message: String },
    #[error("track length mismatch at byte {offset}: {message}")]
    TrackLength { offset: usize, message: String },
    #[error("unpaired note-on (channel {channel}, pitch {pitch}) at byte {offset}")]
    UnpairedNoteOn { offset: usize, channel: u8, pitch: u8 },
    #[error("malformed event at byte {offset}: {message}")]
    Event { offset: usize, message: String },
    #[error("value out of range: {0}")]
    Range(String),
}

impl MidiDocument {
    /// Empty document with the default tempo.
    pub fn new(resolution: u16) -> Self {
        Self {
            resolution,
            notes: Vec::new(),
            tempos: vec![TempoEvent {
                tick: 0,
                microseconds_per_beat: DEFAULT_MICROSECONDS_PER_BEAT,
            }],
            pedals: Vec::new(),
        }
    }

    /// Document with the default tempo map holding `notes` in sorted order.
    pub fn with_notes(resolution: u16, mut notes: Vec<NoteEvent>) -> Self {
        sort_notes(&mut notes);
        Self {
            notes,
            ..Self::new(resolution)
        }
    }

    /// Tick of the latest note-off, or 0 for an empty document.
    pub fn end_tick(&self) -> u32 {
        self.notes.iter().map(|n| n.offset).max().unwrap_or(0)
    }

    /// Applies a monotone tick mapping to every event.
    ///
    /// The `(onset, pitch)` order of notes is kept: when two notes with
    /// distinct onsets would collapse onto one tick in an order that sorting
    /// would invert (or duplicate), the later one is pushed one tick further.
    /// Durations that would vanish are repaired to one tick.
    pub fn map_ticks(&self, f: impl Fn(u32) -> u32) -> Self {
        let mut notes = Vec::with_capacity(self.notes.len());
        let mut prev: Option<(NoteEvent, u32)> = None;
        for note in &self.notes {
            let mut onset = f(note.onset);
            if let Some((before, mapped)) = prev {
                onset = onset.max(mapped);
                if onset == mapped && note.onset > before.onset && note.pitch <= before.pitch {
                    onset = mapped + 1;
                }
            }
            let offset = f(note.offset).max(onset + 1);
            notes.push(NoteEvent {
                onset,
                offset,
                ..*note
            });
            prev = Some((*note, onset));
        }
        sort_notes(&mut notes);

        let tempos = self
            .tempos
            .iter()
            .map(|t| TempoEvent {
                tick: f(t.tick),
                ..*t
            })
            .collect();
        let pedals = self
            .pedals
            .iter()
            .map(|p| PedalEvent {
                tick: f(p.tick),
                ..*p
            })
            .collect();
        Self {
            resolution: self.resolution,
            notes,
            tempos,
            pedals,
        }
    }
}

pub(crate) fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by_key(|n| (n.onset, n.pitch));
}

/// `value * num / den` rounded half away from zero, in exact integer arithmetic.
pub(crate) fn scale_rounded(value: u32, num: u64, den: u64) -> u32 {
    let scaled = (2 * value as u128 * num as u128 + den as u128) / (2 * den as u128);
    scaled.min(u32::MAX as u128) as u32
}

/// Rescales every tick to a new resolution, rounding half away from zero.
pub fn rescale_resolution(doc: &MidiDocument, target: u16) -> MidiDocument {
    if doc.resolution == target {
        return doc.clone();
    }
    let (num, den) = (target as u64, doc.resolution as u64);
    let mut out = doc.map_ticks(|t| scale_rounded(t, num, den));
    out.resolution = target;
    out
}

/// Wall-clock position of `tick` under the document's tempo map.
pub fn ticks_to_seconds(tick: u32, doc: &MidiDocument) -> f64 {
    let resolution = doc.resolution.max(1) as f64;
    let mut seconds = 0.0;
    let mut last_tick = 0u32;
    let mut tempo = DEFAULT_MICROSECONDS_PER_BEAT;
    for change in &doc.tempos {
        if change.tick >= tick {
            break;
        }
        seconds += (change.tick - last_tick) as f64 * tempo as f64 / 1e6 / resolution;
        last_tick = change.tick;
        tempo = change.microseconds_per_beat;
    }
    seconds + (tick - last_tick) as f64 * tempo as f64 / 1e6 / resolution
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Cursor<'a> {
    fn overrun(&self, what: &str) -> MidiError {
        MidiError::TrackLength {
            offset: self.pos,
            message: format!("{what} runs past the end of the track chunk"),
        }
    }

    fn byte(&mut self, what: &str) -> Result<u8, MidiError> {
        if self.pos >= self.end {
            return Err(self.overrun(what));
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8], MidiError> {
        if self.end - self.pos < len {
            return Err(self.overrun(what));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn vlq(&mut self, what: &str) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.byte(what)?;
            value = (value << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Event {
            offset: start,
            message: format!("{what}: variable-length quantity longer than 4 bytes"),
        })
    }
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses an SMF byte stream.
pub fn read_midi(bytes: &[u8]) -> Result<MidiDocument, MidiError> {
    let header_err = |offset: usize, message: &str| MidiError::Header {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(header_err(0, "missing MThd chunk"));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 || bytes.len() < 8 + header_len {
        return Err(header_err(4, "header length shorter than 6 or truncated"));
    }
    let format = be_u16(&bytes[8..10]);
    let track_count = be_u16(&bytes[10..12]);
    let division = be_u16(&bytes[12..14]);
    if format > 1 {
        return Err(header_err(8, &format!("unsupported SMF format {format}")));
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(header_err(12, "only metrical (ticks per beat) timing is supported"));
    }

    let mut notes = Vec::new();
    let mut tempos = Vec::new();
    let mut pedals = Vec::new();
    let mut pos = 8 + header_len;
    let mut tracks_read = 0;
    while tracks_read < track_count {
        if bytes.len() - pos < 8 {
            return Err(MidiError::TrackLength {
                offset: pos,
                message: format!("expected {track_count} tracks, found {tracks_read}"),
            });
        }
        let id = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        if bytes.len() - body < len {
            return Err(MidiError::TrackLength {
                offset: pos,
                message: format!("chunk declares {len} bytes, {} available", bytes.len() - body),
            });
        }
        if id == b"MTrk" {
            read_track(bytes, body, body + len, &mut notes, &mut tempos, &mut pedals)?;
            tracks_read += 1;
        }
        pos = body + len;
    }

    sort_notes(&mut notes);
    tempos.sort_by_key(|t: &TempoEvent| t.tick);
    if tempos.first().map_or(true, |t| t.tick != 0) {
        tempos.insert(
            0,
            TempoEvent {
                tick: 0,
                microseconds_per_beat: DEFAULT_MICROSECONDS_PER_BEAT,
            },
        );
    }
    pedals.sort_by_key(|p: &PedalEvent| p.tick);
    Ok(MidiDocument {
        resolution: division,
        notes,
        tempos,
        pedals,
    })
}

fn read_track(
    bytes: &[u8],
    start: usize,
    end: usize,
    notes: &mut Vec<NoteEvent>,
    tempos: &mut Vec<TempoEvent>,
    pedals: &mut Vec<PedalEvent>,
) -> Result<(), MidiError> {
    let mut cur = Cursor {
        bytes,
        pos: start,
        end,
    };
    let mut tick = 0u32;
    let mut running: Option<u8> = None;
    // (channel, pitch) -> (onset, velocity, byte offset of the note-on)
    let mut sounding: std::collections::BTreeMap<(u8, u8), (u32, u8, usize)> = Default::default();

    let mut close = |sounding: &mut std::collections::BTreeMap<(u8, u8), (u32, u8, usize)>,
                     key: (u8, u8),
                     tick: u32| {
        if let Some((onset, velocity, _)) = sounding.remove(&key) {
            if tick > onset {
                notes.push(NoteEvent {
                    pitch: key.1,
                    onset,
                    offset: tick,
                    velocity,
                });
            }
        }
    };

    while cur.pos < cur.end {
        let delta = cur.vlq("delta time")?;
        tick = tick.saturating_add(delta);
        let event_offset = cur.pos;
        let first = cur.byte("event status")?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            cur.pos -= 1;
            running.ok_or_else(|| MidiError::Event {
                offset: event_offset,
                message: "data byte without running status".into(),
            })?
        };

        match status {
            0xFF => {
                running = None;
                let kind = cur.byte("meta type")?;
                let len = cur.vlq("meta length")? as usize;
                let data = cur.take(len, "meta data")?;
                match kind {
                    0x51 if len == 3 => tempos.push(TempoEvent {
                        tick,
                        microseconds_per_beat: u32::from_be_bytes([0, data[0], data[1], data[2]]),
                    }),
                    0x2F => break,
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq("sysex length")? as usize;
                cur.take(len, "sysex data")?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0F;
                let data_len = if matches!(status & 0xF0, 0xC0 | 0xD0) { 1 } else { 2 };
                let data = cur.take(data_len, "channel message")?;
                if data.iter().any(|&b| b & 0x80 != 0) {
                    return Err(MidiError::Event {
                        offset: event_offset,
                        message: "status byte where a data byte was expected".into(),
                    });
                }
                match status & 0xF0 {
                    0x90 if data[1] > 0 => {
                        let key = (channel, data[0]);
                        close(&mut sounding, key, tick);
                        sounding.insert(key, (tick, data[1], event_offset));
                    }
                    0x80 | 0x90 => close(&mut sounding, (channel, data[0]), tick),
                    0xB0 if data[0] == SUSTAIN_CONTROLLER => pedals.push(PedalEvent {
                        tick,
                        channel,
                        value: data[1],
                    }),
                    _ => {}
                }
            }
            _ => {
                return Err(MidiError::Event {
                    offset: event_offset,
                    message: format!("unsupported status byte {status:#04x}"),
                })
            }
        }
    }

    if let Some(((channel, pitch), (_, _, offset))) =
        sounding.iter().min_by_key(|(_, (_, _, offset))| *offset)
    {
        return Err(MidiError::UnpairedNoteOn {
            offset: *offset,
            channel: *channel,
            pitch: *pitch,
        });
    }
    Ok(())
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7F) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

fn validate(doc: &MidiDocument) -> Result<(), MidiError> {
    if doc.resolution == 0 || doc.resolution > 0x7FFF {
        return Err(MidiError::Range(format!("resolution {}", doc.resolution)));
    }
    for (i, n) in doc.notes.iter().enumerate() {
        if n.pitch > 127 {
            return Err(MidiError::Range(format!("note {i}: pitch {}", n.pitch)));
        }
        if !(1..=127).contains(&n.velocity) {
            return Err(MidiError::Range(format!("note {i}: velocity {}", n.velocity)));
        }
        if n.offset <= n.onset {
            return Err(MidiError::Range(format!(
                "note {i}: offset {} not after onset {}",
                n.offset, n.onset
            )));
        }
    }
    for t in &doc.tempos {
        if t.microseconds_per_beat == 0 || t.microseconds_per_beat > 0xFF_FFFF {
            return Err(MidiError::Range(format!(
                "tempo {} µs/beat at tick {}",
                t.microseconds_per_beat, t.tick
            )));
        }
    }
    for p in &doc.pedals {
        if p.channel > 15 || p.value > 127 {
            return Err(MidiError::Range(format!(
                "pedal channel {} value {} at tick {}",
                p.channel, p.value, p.tick
            )));
        }
    }
    Ok(())
}

/// Serializes a document as a single-track format-0 SMF.
pub fn write_midi(doc: &MidiDocument) -> Result<Vec<u8>, MidiError> {
    validate(doc)?;

    // (tick, group, pitch/sequence, bytes)
    let mut events: Vec<(u32, u8, usize, Vec<u8>)> = Vec::new();
    for (i, t) in doc.tempos.iter().enumerate() {
        let us = t.microseconds_per_beat.to_be_bytes();
        events.push((t.tick, 0, i, vec![0xFF, 0x51, 0x03, us[1], us[2], us[3]]));
    }
    for n in &doc.notes {
        events.push((n.offset, 1, n.pitch as usize, vec![0x80, n.pitch, NOTE_OFF_VELOCITY]));
    }
    for (i, p) in doc.pedals.iter().enumerate() {
        events.push((p.tick, 2, i, vec![0xB0 | p.channel, SUSTAIN_CONTROLLER, p.value]));
    }
    for n in &doc.notes {
        events.push((n.onset, 3, n.pitch as usize, vec![0x90, n.pitch, n.velocity]));
    }
    events.sort_by_key(|(tick, group, key, _)| (*tick, *group, *key));

    let mut track = Vec::new();
    let mut last = 0u32;
    for (tick, _, _, data) in &events {
        let delta = tick - last;
        if delta > MAX_DELTA {
            return Err(MidiError::Range(format!("delta time {delta} at tick {tick}")));
        }
        push_vlq(&mut track, delta);
        track.extend_from_slice(data);
        last = *tick;
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&doc.resolution.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
