//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.
//!
//! Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 3 7`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{ok, s, write_corpus, OFFSETS, SCORE_VELOCITY, TINY};
use pianoform_core::checkpoint::Checkpoint;
use pianoform_core::dataset::prepare_pair;
use pianoform_core::eval::{
    distribution_overlap, evaluate_predictions, kde_grid, velocity_kde, ErrorUnit, FEATURE_TITLES,
};
use pianoform_core::features::{
    align, augment, augmentation_fractions, augmentation_ratios, build_model_io, compute_dd, compute_ioi,
    scale_score_to_performance, PianistId, AUGMENT_COUNT,
};
use pianoform_core::midi::{read_midi, write_midi, MidiDocument, NoteEvent, PedalEvent, TempoEvent};
use pianoform_core::model::{
    add_and_norm, feed_forward, multi_head_self_attention, prediction_heads, Activation, Attention, Linear,
    ModelConfig, PredictionValues,
};
use pianoform_core::render::render;
use pianoform_core::tokenizer::{
    detokenize, tokenize, OctupleToken, TokenSequence, BAR_VOCAB, DURATION_VOCAB, HIGHEST_PITCH, LOWEST_PITCH,
    MAX_ONSET, PITCH_VOCAB, POSITION_VOCAB, TICKS_PER_BAR, VELOCITY_VOCAB,
};
use pianoform_core::training::{
    feature_loss, feature_loss_var, gradnorm_update, total_loss, Example, FeatureLosses, LossWeights,
    TrainConfig, Trainer,
};
use pianoform_numerics::{lr_at, LrSchedule, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("MIDI round trip", criterion_01_midi_round_trip),
        ("tokenization round trip", criterion_02_tokenization),
        ("feature oracles", criterion_03_feature_oracles),
        ("loss", criterion_04_loss),
        ("gradient checks", criterion_05_gradient_checks),
        ("overfit smoke test", criterion_06_overfit),
        ("GradNorm invariants", criterion_07_gradnorm),
        ("early stopping", criterion_08_early_stopping),
        ("scheduler", criterion_09_scheduler),
        ("augmentation", criterion_10_augmentation),
        ("evaluation", criterion_11_evaluation),
        ("end-to-end determinism", criterion_12_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {number:>2} {name:<24} PASS  ({secs:.1} s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} {name:<24} FAIL  ({secs:.1} s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- MIDI

fn random_document(rng: &mut ChaCha8Rng) -> MidiDocument {
    let resolution = rng.gen_range(24..=960);
    let mut free = [0u32; 128];
    let notes = (0..rng.gen_range(0..150))
        .map(|_| {
            let pitch = rng.gen_range(0..128u8);
            let onset = free[pitch as usize] + rng.gen_range(0..4000);
            let offset = onset + rng.gen_range(1..5000);
            free[pitch as usize] = offset;
            NoteEvent {
                pitch,
                onset,
                offset,
                velocity: rng.gen_range(1..=127),
            }
        })
        .collect();
    let mut doc = MidiDocument::with_notes(resolution, notes);
    let tempo_ticks: BTreeSet<u32> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(1..200_000)).collect();
    doc.tempos = std::iter::once(0)
        .chain(tempo_ticks)
        .map(|tick| TempoEvent {
            tick,
            microseconds_per_beat: rng.gen_range(1..=0xFF_FFFF),
        })
        .collect();
    let pedal_ticks: BTreeSet<u32> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..200_000)).collect();
    doc.pedals = pedal_ticks
        .into_iter()
        .map(|tick| PedalEvent {
            tick,
            channel: rng.gen_range(0..16),
            value: rng.gen_range(0..=127),
        })
        .collect();
    doc
}

fn criterion_01_midi_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let docs: Vec<_> = (0..1000).map(|_| random_document(&mut rng)).collect();
    let start = Instant::now();
    for (i, doc) in docs.iter().enumerate() {
        let bytes = write_midi(doc).map_err(|e| format!("document {i}: {e}"))?;
        let back = read_midi(&bytes).map_err(|e| format!("document {i}: {e}"))?;
        ensure!(&back == doc, "document {i} changed in the round trip");
        ensure!(write_midi(&back).unwrap() == bytes, "document {i} re-encodes differently");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 documents in {:.2} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- tokens

fn random_score(rng: &mut ChaCha8Rng, n: usize, max_onset: u32) -> MidiDocument {
    let notes = (0..n)
        .map(|_| {
            let onset = rng.gen_range(0..=max_onset);
            NoteEvent {
                pitch: rng.gen_range(LOWEST_PITCH..=HIGHEST_PITCH),
                onset,
                offset: onset + rng.gen_range(1..=4608),
                velocity: rng.gen_range(1..=127),
            }
        })
        .collect();
    MidiDocument::with_notes(384, notes)
}

fn criterion_02_tokenization() -> Outcome {
    ensure!(
        [PITCH_VOCAB, VELOCITY_VOCAB, DURATION_VOCAB, POSITION_VOCAB, BAR_VOCAB] == [89, 66, 4609, 1537, 518],
        "vocabulary sizes"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = 0;
    for case in 0..1000 {
        let max_onset = if case % 10 == 0 { MAX_ONSET } else { 100_000 };
        let n = rng.gen_range(1..120);
        let doc = random_score(&mut rng, n, max_onset);
        let seq = tokenize(&doc).map_err(|e| format!("case {case}: {e}"))?;
        for (i, t) in seq.tokens().iter().enumerate() {
            ensure!(
                t.pitch < 89 && t.velocity < 64 && t.duration < 4609 && t.position < 1536 && t.bar < 518,
                "case {case} token {i} out of bounds: {t:?}"
            );
        }
        let back = detokenize(&seq);
        ensure!(back.notes.len() == doc.notes.len(), "case {case}: note count");
        for (a, b) in doc.notes.iter().zip(&back.notes) {
            ensure!(
                (a.pitch, a.onset, a.duration()) == (b.pitch, b.onset, b.duration()),
                "case {case}: {a:?} came back as {b:?}"
            );
            ensure!(a.velocity.abs_diff(b.velocity) <= 1, "case {case}: velocity {a:?} -> {b:?}");
        }
        notes += n;
    }
    Ok(format!("1000 documents, {notes} notes"))
}

fn random_tokens(rng: &mut ChaCha8Rng, onsets: &[u32]) -> TokenSequence {
    let tokens = onsets
        .iter()
        .map(|&onset| OctupleToken {
            pitch: rng.gen_range(0..89),
            velocity: rng.gen_range(0..64),
            duration: rng.gen_range(0..4609),
            position: (onset % 1536) as u16,
            bar: (onset / 1536) as u16,
        })
        .collect();
    TokenSequence::new(tokens).unwrap()
}

fn criterion_03_feature_oracles() -> Outcome {
    assert_eq!(TICKS_PER_BAR, 1536);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.gen_range(1..200);
        let mut onset = rng.gen_range(0..5000u32);
        let onsets: Vec<u32> = (0..n)
            .map(|_| {
                let here = onset.min(MAX_ONSET);
                onset += [0, rng.gen_range(1..50), rng.gen_range(1..3000)][rng.gen_range(0..3)];
                here
            })
            .collect();
        let score = random_tokens(&mut rng, &onsets);
        let perf = random_tokens(&mut rng, &onsets);

        let ioi = compute_ioi(&score);
        let dd = compute_dd(&perf, &score).map_err(|e| e.to_string())?;
        ensure!(ioi.len() == n && dd.len() == n, "case {case}: lengths");
        ensure!(ioi[n - 1] == 0, "case {case}: final IOI {}", ioi[n - 1]);
        let st = score.tokens();
        let pt = perf.tokens();
        for i in 0..n {
            let expected_ioi = if i + 1 < n {
                let next = st[i + 1].bar as i64 * 1536 + st[i + 1].position as i64;
                let here = st[i].bar as i64 * 1536 + st[i].position as i64;
                next - here
            } else {
                0
            };
            ensure!(ioi[i] as i64 == expected_ioi, "case {case} note {i}: IOI {} vs {expected_ioi}", ioi[i]);
            let expected_dd = pt[i].duration as i64 - st[i].duration as i64;
            ensure!(dd[i] as i64 == expected_dd, "case {case} note {i}: DD {} vs {expected_dd}", dd[i]);
        }
    }
    Ok("1000 sequences".into())
}

// ---------------------------------------------------------------- loss

fn criterion_04_loss() -> Outcome {
    let a = feature_loss(&[110.0], &[100.0], &[1], 0.001).map_err(|e| e.to_string())?;
    ensure!(a == 0.1, "(110, 100) gave {a:e}");
    let b = feature_loss(&[5.0], &[0.0], &[1], 0.001).map_err(|e| e.to_string())?;
    ensure!(b == 0.005, "(5, 0) gave {b:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let n = rng.gen_range(2..40);
        let mut mask: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.7) as u8).collect();
        mask[0] = 1;
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let target: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-50.0..100.0f64).round() })
            .collect();
        let base = feature_loss(&pred, &target, &mask, 0.001).unwrap();

        // Masked positions: arbitrary changes leave value and gradient untouched.
        let (mut p2, mut t2) = (pred.clone(), target.clone());
        for i in (0..n).filter(|&i| mask[i] == 0) {
            p2[i] = rng.gen_range(-1e6..1e6);
            t2[i] = rng.gen_range(-1e6..1e6);
        }
        let moved = feature_loss(&p2, &t2, &mask, 0.001).unwrap();
        ensure!(moved == base, "case {case}: masked edits changed the loss {base} -> {moved}");

        let count = mask.iter().filter(|&&m| m != 0).count();
        let tape = Tape::<f32>::new();
        let p = tape.param(Tensor::from_f64([n, 1], &p2).unwrap());
        let loss = feature_loss_var(p, &t2, &mask, 0.001, count).unwrap();
        ensure!(
            (loss.item().unwrap() as f64 - base).abs() <= 1e-5 * base.max(1.0),
            "case {case}: differentiable loss {} vs {base}",
            loss.item().unwrap()
        );
        tape.backward(loss).unwrap();
        let grad = p.grad().unwrap().to_f64_vec();
        for i in (0..n).filter(|&i| mask[i] == 0) {
            ensure!(grad[i] == 0.0, "case {case}: masked position {i} has gradient {}", grad[i]);
        }

        // The weighted total is linear in the weights.
        let l = FeatureLosses::from_array([rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)]);
        let w1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
        let w2: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
        let (x, y) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mixed = LossWeights::from_array(std::array::from_fn(|t| x * w1[t] + y * w2[t]));
        let lhs = total_loss(&l, &mixed);
        let rhs = x * total_loss(&l, &LossWeights::from_array(w1)) + y * total_loss(&l, &LossWeights::from_array(w2));
        ensure!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "case {case}: {lhs} vs {rhs}");
        let direct: f64 = (0..3).map(|t| w1[t] * l.as_array()[t]).sum();
        ensure!((total_loss(&l, &LossWeights::from_array(w1)) - direct).abs() <= 1e-12, "case {case}: total");
    }
    Ok("hand cases exact, 200 masked/linearity cases".into())
}

// ---------------------------------------------------------------- gradients

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

type Build = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>;

fn evaluate(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    build(&tape, &vars).item().unwrap()
}

/// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)` over the gradient
/// of all inputs together. Normalizing per input would turn the exactly-zero
/// gradient of the key bias (softmax ignores a per-row constant) into pure
/// finite-difference noise over noise.
fn gradient_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars);
    tape.backward(loss).unwrap();
    let mut diff = 0.0f64;
    let mut scale = 1e-12f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * STEP);
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
    }
    diff / scale
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn weighted_sum<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &out.shape());
    out.mul(tape.constant(w)).unwrap().sum().unwrap()
}

fn linear<'t>(v: &[Var<'t, f64>], at: usize) -> Linear<'t, f64> {
    Linear {
        weight: v[at],
        bias: v[at + 1],
    }
}

fn criterion_05_gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 4];
    let configs = 24;
    for trial in 0..configs as u64 {
        let n = rng.gen_range(1..6);
        let heads = rng.gen_range(1..4);
        let h = heads * rng.gen_range(1..4);
        let ff = rng.gen_range(1..9);
        let mask: Vec<bool> = {
            let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            m[rng.gen_range(0..n)] = true;
            m
        };

        let mut inputs = vec![random(&mut rng, &[n, h])];
        for _ in 0..4 {
            inputs.push(random(&mut rng, &[h, h]));
            inputs.push(random(&mut rng, &[h]));
        }
        let m = mask.clone();
        let err = gradient_error(&inputs, &move |tape, v| {
            let attn = Attention {
                query: linear(v, 1),
                key: linear(v, 3),
                value: linear(v, 5),
                output: linear(v, 7),
            };
            weighted_sum(tape, multi_head_self_attention(v[0], &attn, heads, &m).unwrap(), trial)
        });
        worst[0] = worst[0].max(err);

        let inputs = vec![
            random(&mut rng, &[n, h]),
            random(&mut rng, &[n, h]),
            random(&mut rng, &[h]),
            random(&mut rng, &[h]),
        ];
        let err = gradient_error(&inputs, &move |tape, v| {
            weighted_sum(tape, add_and_norm(v[0], v[1], v[2], v[3], 1e-5).unwrap(), trial)
        });
        worst[1] = worst[1].max(err);

        let activation = if trial % 2 == 0 { Activation::Gelu } else { Activation::Relu };
        let inputs = vec![
            random(&mut rng, &[n, h]),
            random(&mut rng, &[h, ff]),
            random(&mut rng, &[ff]),
            random(&mut rng, &[ff, h]),
            random(&mut rng, &[h]),
        ];
        let err = gradient_error(&inputs, &move |tape, v| {
            weighted_sum(tape, feed_forward(v[0], &linear(v, 1), &linear(v, 3), activation).unwrap(), trial)
        });
        worst[2] = worst[2].max(err);

        let pianists = rng.gen_range(1..7);
        let config = ModelConfig {
            num_pianists: pianists,
            ..ModelConfig::default()
        };
        let mut inputs = vec![random(&mut rng, &[n, h]), random(&mut rng, &[n, pianists])];
        for _ in 0..3 {
            inputs.push(random(&mut rng, &[h + pianists, 1]));
            inputs.push(random(&mut rng, &[1]));
        }
        let err = gradient_error(&inputs, &move |tape, v| {
            let heads = [linear(v, 2), linear(v, 4), linear(v, 6)];
            let p = prediction_heads(v[0], v[1], &heads, &config).unwrap();
            let joined = tape.concat_cols(&p.as_array()).unwrap();
            weighted_sum(tape, joined, trial)
        });
        worst[3] = worst[3].max(err);
    }
    let elapsed = start.elapsed();
    let names = ["attention", "add&norm", "feed-forward", "heads"];
    let summary = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(worst.iter().all(|&e| e <= TOLERANCE), "relative error above {TOLERANCE:e}: {summary}");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{configs} configurations, worst {summary}"))
}

// ---------------------------------------------------------------- overfit

fn criterion_06_overfit() -> Outcome {
    const NOTES: usize = 16;
    const EPOCHS: usize = 300;
    let start = Instant::now();
    let pianists: Vec<String> = (0..6).map(|p| format!("player{p}")).collect();
    let scores: Vec<MidiDocument> = (0..4).map(|w| common::score(w, NOTES)).collect();
    let mut examples = Vec::new();
    for score in &scores {
        for (p, &offset) in OFFSETS.iter().enumerate() {
            let id = PianistId {
                index: p,
                name: pianists[p].clone(),
            };
            let performance = common::perform(score, offset);
            for copy in prepare_pair(score, &performance, &id, NOTES).map_err(|e| e.to_string())? {
                examples.extend(copy.windows.into_iter().map(|io| Example { pianist: p, io }));
            }
        }
    }

    let model = ModelConfig {
        window: NOTES,
        num_pianists: 6,
        seed: 1,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 4,
        max_epochs: EPOCHS,
        patience: EPOCHS - 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, train, pianists).map_err(|e| e.to_string())?;
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..EPOCHS {
        let m = trainer.train_epoch(&examples).map_err(|e| e.to_string())?;
        // Unweighted so that shifting weight onto an easy feature cannot help.
        let total = m.train.sum();
        first.get_or_insert(total);
        last = total;
    }
    let first = first.unwrap();
    let reduction = 1.0 - last / first;

    let mut means = Vec::new();
    for p in 0..6 {
        let mut velocities = Vec::new();
        for score in &scores {
            let out = render(trainer.model(), score, p).map_err(|e| e.to_string())?;
            velocities.extend(out.notes.iter().map(|n| n.velocity as f64));
        }
        means.push(velocities.iter().sum::<f64>() / velocities.len() as f64);
    }
    let signs_ok = OFFSETS
        .iter()
        .zip(&means)
        .filter(|(&o, &m)| (m - SCORE_VELOCITY as f64).signum() == (o as f64).signum())
        .count();
    let elapsed = start.elapsed();
    let detail = format!(
        "{} windows, loss {first:.4} -> {last:.6} ({:.2}% reduction), mean rendered velocity {:?}, {signs_ok}/6 signs, {:.0} s",
        examples.len(),
        100.0 * reduction,
        means.iter().map(|m| (m * 10.0).round() / 10.0).collect::<Vec<_>>(),
        elapsed.as_secs_f64()
    );
    ensure!(reduction >= 0.95, "{detail}");
    ensure!(signs_ok == 6, "{detail}");
    ensure!(elapsed < Duration::from_secs(15 * 60), "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- GradNorm

fn criterion_07_gradnorm() -> Outcome {
    let floor = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut w = LossWeights::ONES;
    let mut pinned = 0;
    for step in 0..20_000 {
        let norms: [f64; 3] = std::array::from_fn(|_| if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(0.0..10.0) });
        let ratios: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.01..3.0));
        let lr = [0.025, 0.3, 2.0][rng.gen_range(0..3)];
        w = gradnorm_update(&w, norms, ratios, 1.5, lr, floor).map_err(|e| e.to_string())?;
        let a = w.as_array();
        ensure!(a[0] + a[1] + a[2] == 3.0, "step {step}: weights {a:?} sum to {}", a[0] + a[1] + a[2]);
        ensure!(a.iter().all(|&v| v >= floor), "step {step}: weights {a:?} below the floor");
        pinned += a.iter().filter(|&&v| v == floor).count();
        if step % 1000 == 999 {
            w = LossWeights::from_array(std::array::from_fn(|_| rng.gen_range(0.5..1.5)));
            w = gradnorm_update(&w, [1.0; 3], [1.0; 3], 1.5, 0.0, floor).unwrap();
        }
    }

    // Balanced norms and ratios leave the weights alone.
    for _ in 0..1000 {
        let n = rng.gen_range(0.01..10.0);
        let r = rng.gen_range(0.1..2.0);
        let out = gradnorm_update(&LossWeights::ONES, [n; 3], [r; 3], 1.5, 0.025, floor).unwrap();
        ensure!(out == LossWeights::ONES, "balanced norms moved the weights to {:?}", out.as_array());

        // Unequal, but already matching the targets `mean(G) · r^α`: with unit
        // weights that needs norms proportional to `r^α` where `mean(r^α) = 1`.
        let raw: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..2.0f64));
        let mean = raw.iter().map(|r| r.powf(1.5)).sum::<f64>() / 3.0;
        let ratios = raw.map(|r| r / mean.powf(1.0 / 1.5));
        let norms = ratios.map(|r| n * r.powf(1.5));
        let out = gradnorm_update(&LossWeights::ONES, norms, ratios, 1.5, 0.025, floor).unwrap();
        ensure!(out == LossWeights::ONES, "matched targets moved the weights to {:?}", out.as_array());
    }
    Ok(format!("20000 updates, {pinned} floored entries seen, fixed points hold"))
}

// ---------------------------------------------------------------- early stopping

fn log_records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn small_examples(pieces: usize, notes: usize, window: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for piece in 0..pieces {
        let score = common::score(piece, notes);
        for (p, &offset) in OFFSETS.iter().enumerate().take(2) {
            let id = PianistId {
                index: p,
                name: format!("player{p}"),
            };
            for copy in prepare_pair(&score, &common::perform(&score, offset), &id, window).unwrap() {
                out.extend(copy.windows.into_iter().map(|io| Example { pianist: p, io }));
            }
        }
    }
    out
}

fn criterion_08_early_stopping() -> Outcome {
    // Flat validation through the CLI: a zero learning rate freezes the model.
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 4, 2, 10);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["prepare", s(&manifest), "--out", s(&data), "--window", "8"]);
    let mut args = vec!["train", s(&data), "--out", s(&run), "--seed", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "learning_rate=0", "--set", "max_epochs=100", "--set", "patience=30"]);
    ok(&args);
    let records = log_records(&run.join("train_log.jsonl"));
    let val: Vec<f64> = records.iter().map(|r| r["val_total"].as_f64().unwrap()).collect();
    ensure!(val.windows(2).all(|w| w[0] == w[1]), "validation loss was not flat");
    let last_epoch = records.last().unwrap()["epoch"].as_u64().unwrap();
    ensure!(last_epoch == 1 + 30, "flat run stopped at epoch {last_epoch}, expected 31");
    let best = Checkpoint::load(&run.join("best.ckpt")).map_err(|e| e.to_string())?;
    let min = val.iter().copied().fold(f64::INFINITY, f64::min);
    ensure!(best.best_validation() == Some(min), "best checkpoint {:?} vs {min}", best.best_validation());
    ensure!(best.state.epoch == 1, "best checkpoint from epoch {}", best.state.epoch);

    // A run that does learn: the best checkpoint reproduces the minimum.
    let examples = small_examples(3, 12, 8);
    let (train, validation) = examples.split_at(examples.len() * 2 / 3);
    let model = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        hidden_dim: 8,
        ff_dim: 16,
        num_pianists: 2,
        window: 8,
        seed: 3,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        batch_size: 4,
        max_epochs: 60,
        patience: 4,
        learning_rate: 3e-3,
        eta_min: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config, vec!["player0".into(), "player1".into()]).unwrap();
    let outcome = trainer.fit(train, validation, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let val: Vec<f64> = outcome.records.iter().map(|r| r.val_total).collect();
    let (best_at, min) = val
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i + 1, v) } else { acc });
    let best = outcome.best.ok_or("no best checkpoint")?;
    let again = Trainer::from_checkpoint(best)
        .unwrap()
        .evaluate_losses(validation)
        .unwrap()
        .sum();
    ensure!(again == min, "best checkpoint scores {again}, logged minimum {min}");
    if outcome.stopped_early {
        ensure!(
            val.len() == best_at + 4,
            "stopped at epoch {} with best epoch {best_at} and patience 4",
            val.len()
        );
    }
    Ok(format!(
        "flat run stopped at epoch {last_epoch}; learning run best epoch {best_at} of {}",
        val.len()
    ))
}

// ---------------------------------------------------------------- scheduler

/// Closed-form cosine annealing with restarts, from an explicit list of cycle
/// boundaries.
fn annealed(base: f64, eta_min: f64, t_0: usize, t_mult: usize, epoch: usize) -> f64 {
    let (mut start, mut len) = (0, t_0);
    while epoch >= start + len {
        start += len;
        len *= t_mult;
    }
    let t = (epoch - start) as f64 / len as f64;
    eta_min + (base - eta_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

fn criterion_09_scheduler() -> Outcome {
    let base = 1e-4;
    let s = TrainConfig::default().schedule();
    ensure!(s == LrSchedule { base_lr: base, t_0: 10, t_mult: 2, eta_min: 0.0 }, "default schedule {s:?}");
    for (epoch, expected) in [(0, base), (10, base), (5, base / 2.0)] {
        let got = lr_at(&s, epoch);
        ensure!((got - expected).abs() <= 1e-12, "lr_at({epoch}) = {got:e}, expected {expected:e}");
    }
    for epoch in 0..400 {
        let got = lr_at(&s, epoch);
        let expected = annealed(base, 0.0, 10, 2, epoch);
        ensure!((got - expected).abs() <= 1e-12, "epoch {epoch}: {got:e} vs {expected:e}");
    }
    Ok("restart points and 400 epochs match".into())
}

// ---------------------------------------------------------------- augmentation

fn criterion_10_augmentation() -> Outcome {
    let ratios = augmentation_ratios();
    ensure!(ratios.len() == 10 && AUGMENT_COUNT == 10, "{} ratios", ratios.len());
    ensure!(ratios[0] == 0.75 && ratios[9] == 1.25, "endpoints {} and {}", ratios[0], ratios[9]);
    let fractions = augmentation_fractions();
    for i in 1..10 {
        let (a, b) = (fractions[i - 1], fractions[i]);
        // Equal steps of 1/18, compared as exact fractions.
        ensure!((b.0 * a.1 - a.0 * b.1) * 18 == a.1 * b.1, "uneven step between ratio {} and {i}", i - 1);
        ensure!(((ratios[i] - ratios[i - 1]) - 0.5 / 9.0).abs() < 1e-12, "step {i}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut pairs = 0;
    for case in 0..200 {
        let resolution = [96, 384, 480, 960][rng.gen_range(0..4)];
        let n = rng.gen_range(1..60);
        let mut notes = Vec::new();
        let mut t = 0;
        for _ in 0..n {
            t += [0, rng.gen_range(1..4), rng.gen_range(1..2000)][rng.gen_range(0..3)];
            notes.push(NoteEvent {
                pitch: rng.gen_range(LOWEST_PITCH..=HIGHEST_PITCH),
                onset: t,
                offset: t + rng.gen_range(1..1500),
                velocity: rng.gen_range(1..=127),
            });
        }
        let score = MidiDocument::with_notes(resolution, notes);
        let (num, den) = (rng.gen_range(70..140u64), 100u64);
        let mut performance = score.map_ticks(|t| (t as u64 * num / den) as u32 + 7);
        for n in &mut performance.notes {
            n.velocity = rng.gen_range(1..=127);
        }

        let id = PianistId {
            index: 0,
            name: "p".into(),
        };
        let copies = prepare_pair(&score, &performance, &id, 16).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(copies.len() == 10, "case {case}: {} copies", copies.len());

        let scaled = scale_score_to_performance(
            &pianoform_core::midi::rescale_resolution(&score, 384),
            &pianoform_core::midi::rescale_resolution(&performance, 384),
        )
        .map_err(|e| e.to_string())?;
        let perf384 = pianoform_core::midi::rescale_resolution(&performance, 384);
        for copy in augment(&scaled, &perf384) {
            let s_tok = tokenize(&copy.score).map_err(|e| e.to_string())?;
            let p_tok = tokenize(&copy.performance).map_err(|e| e.to_string())?;
            ensure!(s_tok.len() == n && p_tok.len() == n, "case {case}: note count changed");
            let pair = align(&p_tok, &s_tok, id.clone()).map_err(|e| format!("case {case}: {e}"))?;
            for (a, b) in pair.score.tokens().iter().zip(pair.performance.tokens()) {
                ensure!(a.pitch == b.pitch, "case {case}: pitch mismatch");
            }
            ensure!(compute_ioi(&pair.score).iter().all(|&d| d >= 0), "case {case}: negative score IOI");
            ensure!(compute_ioi(&pair.performance).iter().all(|&d| d >= 0), "case {case}: negative IOI");
            let io = build_model_io(&pair).map_err(|e| e.to_string())?;
            ensure!(io.real_count() == n, "case {case}: mask");
            pairs += 1;
        }
    }
    Ok(format!("ratios exact, {pairs} augmented pairs aligned"))
}

// ---------------------------------------------------------------- evaluation

fn trapezoid_integral(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum()
}

fn criterion_11_evaluation() -> Outcome {
    let examples = small_examples(3, 20, 8);
    let preds: Vec<PredictionValues> = examples
        .iter()
        .map(|ex| PredictionValues {
            velocity: ex.io.target_column(0),
            dd: ex.io.target_column(1),
            ioi: ex.io.target_column(2),
        })
        .collect();
    let report = evaluate_predictions(&preds, &examples, 0.001).map_err(|e| e.to_string())?;
    for f in &report.features {
        ensure!(f.loss == 0.0 && f.error == 0.0, "{}: loss {} error {}", f.feature, f.loss, f.error);
    }

    let titles: Vec<&str> = report.features.iter().map(|f| f.feature.as_str()).collect();
    ensure!(titles == FEATURE_TITLES, "rows {titles:?}");
    let units: Vec<ErrorUnit> = report.features.iter().map(|f| f.unit).collect();
    ensure!(units == [ErrorUnit::Velocity, ErrorUnit::Seconds, ErrorUnit::Seconds], "units {units:?}");
    let table = report.to_string();
    let lines: Vec<&str> = table.lines().collect();
    ensure!(lines.len() == 4, "table has {} lines", lines.len());
    for (line, title) in lines[1..].iter().zip(FEATURE_TITLES) {
        ensure!(line.starts_with(title) && line.contains('±'), "row {line:?}");
    }
    ensure!(!lines[1].ends_with(" s") && lines[2].ends_with(" s") && lines[3].ends_with(" s"), "units in {table}");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = kde_grid();
    let mut worst_mass = 0.0f64;
    let mut worst_overlap = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(2..400);
        let centre: f64 = rng.gen_range(10.0..118.0);
        let spread = [0.0, 2.0, 15.0, 40.0][rng.gen_range(0..4)];
        let samples: Vec<f64> = (0..n)
            .map(|_| (centre + rng.gen_range(-1.0..=1.0) * spread).round().clamp(1.0, 127.0))
            .collect();
        let curve = velocity_kde(&samples).map_err(|e| e.to_string())?;
        ensure!(curve.grid == grid, "case {case}: grid");
        let mass = trapezoid_integral(&curve.grid, &curve.density);
        worst_mass = worst_mass.max((mass - 1.0).abs());
        let overlap = distribution_overlap(&curve, &curve.clone()).map_err(|e| e.to_string())?;
        worst_overlap = worst_overlap.max((overlap - 1.0).abs());
    }
    ensure!(worst_mass <= 1e-3, "KDE mass off by {worst_mass:e}");
    ensure!(worst_overlap <= 1e-6, "self-overlap off by {worst_overlap:e}");
    Ok(format!("zero loss, 200 KDEs within {worst_mass:.1e} of unit mass, self-overlap within {worst_overlap:.1e}"))
}

// ---------------------------------------------------------------- determinism

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) {
    let corpus = root.join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    let manifest = write_corpus(&corpus, 4, 2, 10);
    let data = root.join("out/data");
    let run = root.join("out/run");
    ok(&["prepare", s(&manifest), "--out", s(&data), "--window", "8"]);
    let mut args = vec!["train", s(&data), "--out", s(&run), "--seed", "11"];
    args.extend_from_slice(TINY);
    ok(&args);
    let ckpt = run.join("best.ckpt");
    let score = corpus.join("piece0.score.mid");
    let rendered = root.join("out/render.mid");
    ok(&["render", s(&score), "--pianist", "player1", "--checkpoint", s(&ckpt), "--out", s(&rendered)]);
    ok(&["eval", s(&data), "--checkpoint", s(&ckpt), "--out", s(&root.join("out/eval"))]);
}

fn criterion_12_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ra, rb) = (a.path().join("out"), b.path().join("out"));
    let files = files_under(&ra);
    ensure!(files == files_under(&rb), "the two runs wrote different files");
    for required in ["run/best.ckpt", "run/last.ckpt", "run/train_log.jsonl", "render.mid", "eval/report.json"] {
        ensure!(files.contains(&PathBuf::from(required)), "missing {required}");
    }
    for f in &files {
        let (x, y) = (std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap());
        ensure!(x == y, "{} differs between runs", f.display());
    }
    Ok(format!("{} output files byte-identical", files.len()))
}
