//! Synthetic score/performance corpora shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pianoform_core::midi::{write_midi, MidiDocument, NoteEvent};

/// Velocity offsets in tokens (half MIDI steps) of the six synthetic players.
pub const OFFSETS: [i32; 6] = [-9, -6, -3, 3, 6, 9];
pub const SCORE_VELOCITY: u8 = 64;

/// A score of `n` notes. `variant` shifts the pitch pattern and rhythm so
/// different pieces differ.
pub fn score(variant: usize, n: usize) -> MidiDocument {
    let mut notes = Vec::with_capacity(n);
    let mut t = 0;
    for i in 0..n {
        let pitch = 40 + ((i * 7 + variant * 5) % 36) as u8;
        let ioi = [192, 384, 96][(i + variant) % 3];
        notes.push(NoteEvent {
            pitch,
            onset: t,
            offset: t + 100 + (i as u32 % 4) * 60,
            velocity: SCORE_VELOCITY,
        });
        t += ioi;
    }
    MidiDocument::with_notes(384, notes)
}

/// Deterministic "performance": 10% slower, notes held 20% longer and every
/// velocity shifted by the player's offset.
pub fn perform(score: &MidiDocument, offset: i32) -> MidiDocument {
    let notes = score
        .notes
        .iter()
        .map(|n| {
            let onset = n.onset * 11 / 10;
            NoteEvent {
                pitch: n.pitch,
                onset,
                offset: onset + n.duration() * 12 / 10,
                velocity: (n.velocity as i32 + 2 * offset).clamp(1, 127) as u8,
            }
        })
        .collect();
    MidiDocument::with_notes(score.resolution, notes)
}

pub fn write_doc(path: &Path, doc: &MidiDocument) {
    std::fs::write(path, write_midi(doc).unwrap()).unwrap();
}

/// Writes `pieces × players` pairs and a manifest into `dir`; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, pieces: usize, players: usize, notes: usize) -> PathBuf {
    let mut manifest = String::from("# seed=5\n");
    for piece in 0..pieces {
        let s = score(piece, notes);
        let score_name = format!("piece{piece}.score.mid");
        write_doc(&dir.join(&score_name), &s);
        for (p, &offset) in OFFSETS.iter().enumerate().take(players) {
            let perf_name = format!("piece{piece}.player{p}.mid");
            write_doc(&dir.join(&perf_name), &perform(&s, offset));
            manifest.push_str(&format!("piece{piece}\tplayer{p}\t{perf_name}\t{score_name}\n"));
        }
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).unwrap();
    path
}

/// Model and training settings small enough for quick end-to-end runs.
pub const TINY: &[&str] = &[
    "--set",
    "num_layers=1",
    "--set",
    "num_heads=2",
    "--set",
    "hidden_dim=8",
    "--set",
    "ff_dim=16",
    "--set",
    "batch_size=4",
    "--set",
    "max_epochs=3",
    "--set",
    "patience=2",
];

pub fn pianoform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pianoform"))
        .args(args)
        .env_remove("PIANOFORM_DATA_ROOT")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = pianoform(args);
    assert!(
        out.status.success(),
        "pianoform {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
