//! Expressive piano performance rendering from transcribed scores.
//!
//! The pipeline reads score/performance MIDI pairs, tokenizes them into
//! per-note records, builds aligned training windows, trains a transformer
//! encoder that regresses per-note velocity, duration deviation and
//! inter-onset interval conditioned on pianist identity, and renders new
//! performances from score MIDI.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod midi;
pub mod model;
pub mod render;
pub mod tokenizer;
pub mod training;
