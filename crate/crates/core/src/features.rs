//! Training pairs: length scaling, tempo augmentation, IOI and duration
//! deviation, model inputs/targets, windowing, and the inverse mapping from
//! predictions back to performance tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{scale_rounded, MidiDocument};
use crate::tokenizer::{
    onset_tokens, OctupleToken, TokenSequence, TokenizerError, MAX_DURATION, MAX_ONSET,
};

/// Input columns: pitch, velocity, duration, bar, position, IOI.
pub const INPUT_FEATURES: usize = 6;
/// Target columns: velocity, duration deviation, IOI.
pub const TARGET_FEATURES: usize = 3;
pub const DEFAULT_WINDOW: usize = 1000;
pub const AUGMENT_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("pitch mismatch at note {index}: score {score}, performance {performance}")]
    PitchMismatch {
        index: usize,
        score: u16,
        performance: u16,
    },
    #[error("{0} has no notes")]
    Empty(&'static str),
    #[error("window size must be positive")]
    WindowSize,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PianistId {
    pub index: usize,
    pub name: String,
}

/// Score and performance tokens paired note by note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub score: TokenSequence,
    pub performance: TokenSequence,
    pub pianist: PianistId,
}

/// One window of model inputs, regression targets and loss mask.
///
/// Padded positions carry zeros in both `inputs` and `targets` and a 0 mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIO {
    pub inputs: Vec<[i32; INPUT_FEATURES]>,
    pub targets: Vec<[i32; TARGET_FEATURES]>,
    pub mask: Vec<u8>,
}

impl ModelIO {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn target_column(&self, column: usize) -> Vec<f64> {
        self.targets.iter().map(|t| t[column] as f64).collect()
    }
}

/// Inter-onset intervals: `OT[i+1] − OT[i]`, with 0 for the last note.
pub fn compute_ioi(seq: &TokenSequence) -> Vec<i32> {
    ioi_of(seq.tokens())
}

fn ioi_of(tokens: &[OctupleToken]) -> Vec<i32> {
    let mut out: Vec<i32> = tokens
        .windows(2)
        .map(|w| w[1].onset() as i32 - w[0].onset() as i32)
        .collect();
    if !tokens.is_empty() {
        out.push(0);
    }
    out
}

/// Duration deviation: performance duration token minus score duration token.
pub fn compute_dd(performance: &TokenSequence, score: &TokenSequence) -> Result<Vec<i32>, FeatureError> {
    dd_of(performance.tokens(), score.tokens())
}

fn dd_of(performance: &[OctupleToken], score: &[OctupleToken]) -> Result<Vec<i32>, FeatureError> {
    if performance.len() != score.len() {
        return Err(FeatureError::LengthMismatch {
            what: "duration deviation",
            left: performance.len(),
            right: score.len(),
        });
    }
    Ok(performance
        .iter()
        .zip(score)
        .map(|(p, s)| p.duration as i32 - s.duration as i32)
        .collect())
}

/// Stretches the score so its last note-off lands on the performance's.
pub fn scale_score_to_performance(
    score: &MidiDocument,
    performance: &MidiDocument,
) -> Result<MidiDocument, FeatureError> {
    let score_end = score.end_tick();
    if score.notes.is_empty() || score_end == 0 {
        return Err(FeatureError::Empty("score"));
    }
    let perf_end = performance.end_tick();
    if performance.notes.is_empty() || perf_end == 0 {
        return Err(FeatureError::Empty("performance"));
    }
    if perf_end == score_end {
        return Ok(score.clone());
    }
    Ok(score.map_ticks(|t| scale_rounded(t, perf_end as u64, score_end as u64)))
}

/// Tempo ratios as exact fractions `(27 + 2i) / 36`, i.e. ten evenly spaced
/// points from 0.75 to 1.25 inclusive.
pub fn augmentation_fractions() -> [(u64, u64); AUGMENT_COUNT] {
    std::array::from_fn(|i| (27 + 2 * i as u64, 36))
}

pub fn augmentation_ratios() -> [f64; AUGMENT_COUNT] {
    augmentation_fractions().map(|(n, d)| n as f64 / d as f64)
}

/// A score/performance document pair after tempo scaling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPair {
    pub ratio_index: usize,
    pub score: MidiDocument,
    pub performance: MidiDocument,
}

/// Ten tempo-scaled copies of a pair. Onsets and offsets are scaled and
/// rounded; velocities are untouched.
pub fn augment(score: &MidiDocument, performance: &MidiDocument) -> Vec<AugmentedPair> {
    augmentation_fractions()
        .iter()
        .enumerate()
        .map(|(ratio_index, &(num, den))| AugmentedPair {
            ratio_index,
            score: score.map_ticks(|t| scale_rounded(t, num, den)),
            performance: performance.map_ticks(|t| scale_rounded(t, num, den)),
        })
        .collect()
}

/// Pairs notes by position, checking length and per-note pitch.
pub fn align(
    performance: &TokenSequence,
    score: &TokenSequence,
    pianist: PianistId,
) -> Result<AlignedPair, FeatureError> {
    if performance.len() != score.len() {
        return Err(FeatureError::LengthMismatch {
            what: "alignment",
            left: score.len(),
            right: performance.len(),
        });
    }
    for (index, (s, p)) in score.tokens().iter().zip(performance.tokens()).enumerate() {
        if s.pitch != p.pitch {
            return Err(FeatureError::PitchMismatch {
                index,
                score: s.pitch,
                performance: p.pitch,
            });
        }
    }
    Ok(AlignedPair {
        score: score.clone(),
        performance: performance.clone(),
        pianist,
    })
}

fn rebase(tokens: &[OctupleToken]) -> Vec<OctupleToken> {
    let first = tokens.first().map_or(0, |t| t.bar);
    tokens
        .iter()
        .map(|t| OctupleToken {
            bar: t.bar - first,
            ..*t
        })
        .collect()
}

/// Cuts a pair into consecutive non-overlapping windows of `size` notes.
///
/// Each window's bars are rebased to start at 0 and the last window is
/// filled with [`OctupleToken::PAD`].
pub fn window_pairs(pair: &AlignedPair, size: usize) -> Result<Vec<AlignedPair>, FeatureError> {
    if size == 0 {
        return Err(FeatureError::WindowSize);
    }
    let score = pair.score.tokens();
    let perf = pair.performance.tokens();
    let mut out = Vec::with_capacity(score.len().div_ceil(size));
    for start in (0..score.len()).step_by(size) {
        let end = (start + size).min(score.len());
        let mut s = rebase(&score[start..end]);
        let mut p = rebase(&perf[start..end]);
        s.resize(size, OctupleToken::PAD);
        p.resize(size, OctupleToken::PAD);
        out.push(AlignedPair {
            score: TokenSequence::new(s)?,
            performance: TokenSequence::new(p)?,
            pianist: pair.pianist.clone(),
        });
    }
    Ok(out)
}

/// Inputs from the score, targets from the performance, mask from padding.
pub fn build_model_io(pair: &AlignedPair) -> Result<ModelIO, FeatureError> {
    let score = pair.score.tokens();
    let perf = pair.performance.tokens();
    if score.len() != perf.len() {
        return Err(FeatureError::LengthMismatch {
            what: "model io",
            left: score.len(),
            right: perf.len(),
        });
    }
    let real = score.iter().take_while(|t| !t.is_pad()).count();
    let score_ioi = ioi_of(&score[..real]);
    let perf_ioi = ioi_of(&perf[..real]);
    let dd = dd_of(&perf[..real], &score[..real])?;

    let n = score.len();
    let mut inputs = vec![[0; INPUT_FEATURES]; n];
    let mut targets = vec![[0; TARGET_FEATURES]; n];
    let mut mask = vec![0u8; n];
    for i in 0..real {
        let s = &score[i];
        inputs[i] = [
            s.pitch as i32,
            s.velocity as i32,
            s.duration as i32,
            s.bar as i32,
            s.position as i32,
            score_ioi[i],
        ];
        targets[i] = [perf[i].velocity as i32, dd[i], perf_ioi[i]];
        mask[i] = 1;
    }
    Ok(ModelIO {
        inputs,
        targets,
        mask,
    })
}

/// Windows a pair and builds model I/O for each window.
pub fn window(pair: &AlignedPair, size: usize) -> Result<Vec<ModelIO>, FeatureError> {
    window_pairs(pair, size)?.iter().map(build_model_io).collect()
}

fn round_away(x: f64) -> f64 {
    if x.is_finite() {
        x.round()
    } else {
        0.0
    }
}

/// Inverse of [`build_model_io`] for the score's real notes, anchoring the
/// first onset at the score's first onset.
pub fn reconstruct_performance(
    score: &TokenSequence,
    velocity: &[f64],
    dd: &[f64],
    ioi: &[f64],
) -> Result<TokenSequence, FeatureError> {
    let anchor = score.tokens().first().map_or(0, OctupleToken::onset);
    reconstruct_performance_from(score, velocity, dd, ioi, anchor)
}

/// As [`reconstruct_performance`] with an explicit first onset.
pub fn reconstruct_performance_from(
    score: &TokenSequence,
    velocity: &[f64],
    dd: &[f64],
    ioi: &[f64],
    first_onset: u32,
) -> Result<TokenSequence, FeatureError> {
    let tokens: Vec<&OctupleToken> = score.tokens().iter().filter(|t| !t.is_pad()).collect();
    let n = tokens.len();
    for (what, len) in [("velocity", velocity.len()), ("dd", dd.len()), ("ioi", ioi.len())] {
        if len < n {
            return Err(FeatureError::LengthMismatch { what, left: n, right: len });
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut onset = first_onset.min(MAX_ONSET) as i64;
    for (i, s) in tokens.iter().enumerate() {
        if i > 0 {
            onset = (onset + round_away(ioi[i - 1]).max(0.0) as i64).min(MAX_ONSET as i64);
        }
        let (bar, position) = onset_tokens(onset as u32);
        let duration = round_away(s.duration as f64 + dd[i]).clamp(0.0, MAX_DURATION as f64);
        out.push(OctupleToken {
            pitch: s.pitch,
            velocity: round_away(velocity[i]).clamp(0.0, 63.0) as u16,
            duration: duration as u16,
            position,
            bar,
        });
    }
    Ok(TokenSequence::new(out)?)
}
