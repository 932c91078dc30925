//! Score-to-performance rendering with a trained model.

use thiserror::Error;

use crate::features::{compute_ioi, reconstruct_performance, window, AlignedPair, FeatureError, PianistId};
use crate::midi::{rescale_resolution, MidiDocument};
use crate::model::{Model, ModelError};
use crate::tokenizer::{detokenize, tokenize, TokenSequence, TokenizerError, TICKS_PER_BEAT};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("score has no notes")]
    EmptyScore,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Predicts a performance token sequence for `score`.
///
/// The score is cut into model-sized windows. Predictions are stitched
/// back together and onsets accumulate across window boundaries. The last
/// note of every window but the final one has no in-window successor, so
/// its inter-onset interval is taken from the score.
pub fn render_tokens(model: &Model<f32>, score: &TokenSequence, pianist: usize) -> Result<TokenSequence, RenderError> {
    if score.is_empty() {
        return Err(RenderError::EmptyScore);
    }
    let size = model.config().window;
    let pair = AlignedPair {
        score: score.clone(),
        performance: score.clone(),
        pianist: PianistId {
            index: pianist,
            name: String::new(),
        },
    };
    let score_ioi = compute_ioi(score);
    let n = score.len();
    let (mut velocity, mut dd, mut ioi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for io in window(&pair, size)? {
        let real = io.real_count();
        let p = model.predict(&io, pianist)?;
        velocity.extend_from_slice(&p.velocity[..real]);
        dd.extend_from_slice(&p.dd[..real]);
        ioi.extend_from_slice(&p.ioi[..real]);
        let last = ioi.len() - 1;
        ioi[last] = score_ioi[last] as f64;
    }
    Ok(reconstruct_performance(score, &velocity, &dd, &ioi)?)
}

/// Full rendering path: resolution normalization, tokenization, windowed
/// inference, reconstruction and detokenization.
pub fn render(model: &Model<f32>, score: &MidiDocument, pianist: usize) -> Result<MidiDocument, RenderError> {
    let score = rescale_resolution(score, TICKS_PER_BEAT);
    let tokens = tokenize(&score)?;
    Ok(detokenize(&render_tokens(model, &tokens, pianist)?))
}
