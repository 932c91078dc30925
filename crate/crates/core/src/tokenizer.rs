//! Per-note token records with a fixed vocabulary geometry.
//!
//! | field    | vocabulary | meaning                                    |
//! |----------|-----------:|--------------------------------------------|
//! | pitch    |         89 | MIDI pitch − 21                            |
//! | velocity |         66 | ⌊velocity / 2⌋, plus PAD (64) and MASK (65) |
//! | duration |       4609 | ticks, clamped to 4608                     |
//! | position |       1537 | onset mod 1536, 1536 reserved for PAD      |
//! | bar      |        518 | ⌊onset / 1536⌋, capped at 517              |
//!
//! Timing assumes 384 ticks per beat and 4 beats per bar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiDocument, NoteEvent};

pub const TICKS_PER_BEAT: u16 = 384;
pub const TICKS_PER_BAR: u32 = 1536;
pub const LOWEST_PITCH: u8 = 21;
pub const HIGHEST_PITCH: u8 = 109;

pub const PITCH_VOCAB: u16 = 89;
pub const VELOCITY_VOCAB: u16 = 66;
pub const DURATION_VOCAB: u16 = 4609;
pub const POSITION_VOCAB: u16 = 1537;
pub const BAR_VOCAB: u16 = 518;

pub const MAX_DURATION: u16 = DURATION_VOCAB - 1;
pub const MAX_BAR: u16 = BAR_VOCAB - 1;
pub const VELOCITY_PAD: u16 = 64;
pub const VELOCITY_MASK: u16 = 65;
pub const POSITION_PAD: u16 = 1536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OctupleToken {
    pub pitch: u16,
    pub velocity: u16,
    pub duration: u16,
    pub position: u16,
    pub bar: u16,
}

impl OctupleToken {
    /// Filler for window tails: every field at its top value.
    pub const PAD: OctupleToken = OctupleToken {
        pitch: PITCH_VOCAB - 1,
        velocity: VELOCITY_PAD,
        duration: MAX_DURATION,
        position: POSITION_PAD,
        bar: MAX_BAR,
    };

    pub fn onset(&self) -> u32 {
        onset_time(self.bar, self.position)
    }

    pub fn is_pad(&self) -> bool {
        self.position == POSITION_PAD
    }

    fn check(&self, index: usize) -> Result<(), TokenizerError> {
        let fields = [
            ("pitch", self.pitch, PITCH_VOCAB),
            ("velocity", self.velocity, VELOCITY_VOCAB),
            ("duration", self.duration, DURATION_VOCAB),
            ("position", self.position, POSITION_VOCAB),
            ("bar", self.bar, BAR_VOCAB),
        ];
        for (field, value, vocab) in fields {
            if value >= vocab {
                return Err(TokenizerError::TokenOutOfRange { index, field, value });
            }
        }
        Ok(())
    }
}

/// Onset in ticks of a (bar, position) pair.
pub fn onset_time(bar: u16, position: u16) -> u32 {
    bar as u32 * TICKS_PER_BAR + position as u32
}

/// Latest onset a real token can express.
pub const MAX_ONSET: u32 = MAX_BAR as u32 * TICKS_PER_BAR + TICKS_PER_BAR - 1;

/// `(bar, position)` of an onset. Onsets past the last bar clamp to
/// [`MAX_ONSET`] as a whole so that token order never inverts.
pub fn onset_tokens(onset: u32) -> (u16, u16) {
    let onset = onset.min(MAX_ONSET);
    ((onset / TICKS_PER_BAR) as u16, (onset % TICKS_PER_BAR) as u16)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("note {index}: pitch {pitch} outside {LOWEST_PITCH}..={HIGHEST_PITCH}")]
    PitchOutOfRange { index: usize, pitch: u8 },
    #[error("resolution {0} ticks per beat, expected {TICKS_PER_BEAT}")]
    Resolution(u16),
    #[error("token {index}: {field} value {value} outside its vocabulary")]
    TokenOutOfRange {
        index: usize,
        field: &'static str,
        value: u16,
    },
    #[error("token {index}: onset goes backwards")]
    Order { index: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Token records whose onsets never decrease.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<OctupleToken>", into = "Vec<OctupleToken>")]
pub struct TokenSequence {
    tokens: Vec<OctupleToken>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<OctupleToken>) -> Result<Self, TokenizerError> {
        for (i, t) in tokens.iter().enumerate() {
            t.check(i)?;
            if i > 0 && t.onset() < tokens[i - 1].onset() {
                return Err(TokenizerError::Order { index: i });
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[OctupleToken] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<OctupleToken> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn onsets(&self) -> Vec<u32> {
        self.tokens.iter().map(OctupleToken::onset).collect()
    }
}

impl TryFrom<Vec<OctupleToken>> for TokenSequence {
    type Error = TokenizerError;

    fn try_from(tokens: Vec<OctupleToken>) -> Result<Self, Self::Error> {
        Self::new(tokens)
    }
}

impl From<TokenSequence> for Vec<OctupleToken> {
    fn from(seq: TokenSequence) -> Self {
        seq.tokens
    }
}

pub fn tokenize(doc: &MidiDocument) -> Result<TokenSequence, TokenizerError> {
    if doc.resolution != TICKS_PER_BEAT {
        return Err(TokenizerError::Resolution(doc.resolution));
    }
    let mut notes = doc.notes.clone();
    crate::midi::sort_notes(&mut notes);
    let mut tokens = Vec::with_capacity(notes.len());
    for (index, n) in notes.iter().enumerate() {
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&n.pitch) {
            return Err(TokenizerError::PitchOutOfRange { index, pitch: n.pitch });
        }
        let duration = n.offset.saturating_sub(n.onset).min(MAX_DURATION as u32);
        let (bar, position) = onset_tokens(n.onset);
        tokens.push(OctupleToken {
            pitch: (n.pitch - LOWEST_PITCH) as u16,
            velocity: (n.velocity / 2) as u16,
            duration: duration as u16,
            position,
            bar,
        });
    }
    Ok(TokenSequence { tokens })
}

/// Inverse velocity mapping: the centre of the width-2 bin.
pub fn velocity_from_token(token: u16) -> u8 {
    (token as u32 * 2 + 1).clamp(1, 127) as u8
}

/// Rebuilds a 384-resolution document with the default tempo map. PAD tokens
/// are skipped.
pub fn detokenize(seq: &TokenSequence) -> MidiDocument {
    let notes = seq
        .tokens
        .iter()
        .filter(|t| !t.is_pad())
        .map(|t| {
            let onset = t.onset();
            NoteEvent {
                pitch: t.pitch as u8 + LOWEST_PITCH,
                onset,
                offset: onset + (t.duration as u32).max(1),
                velocity: velocity_from_token(t.velocity),
            }
        })
        .collect();
    MidiDocument::with_notes(TICKS_PER_BEAT, notes)
}

/// One line per note: `pitch velocity duration position bar`.
pub fn format_token_dump(seq: &TokenSequence) -> String {
    let mut out = String::with_capacity(seq.len() * 16);
    for t in &seq.tokens {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            t.pitch, t.velocity, t.duration, t.position, t.bar
        ));
    }
    out
}

pub fn parse_token_dump(text: &str) -> Result<TokenSequence, TokenizerError> {
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let values = trimmed
            .split_whitespace()
            .map(|v| v.parse::<u16>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TokenizerError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let [pitch, velocity, duration, position, bar] = values[..] else {
            return Err(TokenizerError::Parse {
                line: line_no,
                message: format!("expected 5 integers, found {}", values.len()),
            });
        };
        tokens.push(OctupleToken {
            pitch,
            velocity,
            duration,
            position,
            bar,
        });
    }
    TokenSequence::new(tokens)
}
