use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pianoform_core::checkpoint::Checkpoint;
use pianoform_core::dataset::{Dataset, Manifest, Split};
use pianoform_core::eval::{
    curve_columns, distribution_overlap, evaluate_predictions, expression_curves, kde_columns, velocity_kde, KdeCurve,
    Source,
};
use pianoform_core::midi::{read_midi, rescale_resolution, write_midi, MidiDocument};
use pianoform_core::model::{ModelConfig, PredictionValues};
use pianoform_core::render::render;
use pianoform_core::tokenizer::{
    detokenize, format_token_dump, parse_token_dump, tokenize, velocity_from_token, TICKS_PER_BEAT,
};
use pianoform_core::training::{Example, TrainConfig, Trainer, TrainingError};
use serde::Serialize;

use crate::config::Overrides;
use crate::{Cli, Command, GlobalArgs};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RUN_MANIFEST: &str = "manifest.json";

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Tokenize { midi, out } => tokenize_cmd(&input(g, midi), out.as_deref()),
        Command::Detokenize { tokens, out } => detokenize_cmd(&input(g, tokens), out),
        Command::Prepare { manifest, out, window } => prepare_cmd(g, &input(g, manifest), out, *window),
        Command::Train { dataset, out, resume } => {
            train_cmd(g, &input(g, dataset), out, resume.as_ref().map(|p| input(g, p)).as_deref())
        }
        Command::Render {
            score,
            pianist,
            checkpoint,
            out,
        } => render_cmd(&input(g, score), pianist, &input(g, checkpoint), out),
        Command::Eval {
            dataset,
            checkpoint,
            out,
            split,
        } => eval_cmd(&input(g, dataset), &input(g, checkpoint), out, split),
        Command::Stats { groups, out, smoothing } => stats_cmd(g, groups, out, *smoothing),
    }
}

/// Relative input paths are taken from the data root when one is set.
fn input(g: &GlobalArgs, path: &Path) -> PathBuf {
    match &g.data_root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

fn read_document(path: &Path) -> Result<MidiDocument> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_midi(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Output files of a run directory, listed in `manifest.json` at the end.
struct RunDir {
    root: PathBuf,
    files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    bytes: u64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    files: Vec<ManifestFile>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, relative: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.root.join(relative);
        write_file(&path, contents)?;
        self.record(path);
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        if !self.files.contains(&path) {
            self.files.push(path);
        }
    }

    fn finish(self, command: &str, seed: Option<u64>) -> Result<()> {
        let mut files = Vec::new();
        for path in &self.files {
            let bytes = std::fs::metadata(path)
                .with_context(|| format!("reading {}", path.display()))?
                .len();
            let rel = path.strip_prefix(&self.root).unwrap_or(path);
            files.push(ManifestFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&RunManifest { command, seed, files })?;
        write_file(&self.root.join(RUN_MANIFEST), text + "\n")
    }
}

fn tokenize_cmd(midi: &Path, out: Option<&Path>) -> Result<()> {
    let doc = rescale_resolution(&read_document(midi)?, TICKS_PER_BEAT);
    let tokens = tokenize(&doc).with_context(|| format!("tokenizing {}", midi.display()))?;
    let dump = format_token_dump(&tokens);
    match out {
        Some(path) => write_file(path, dump)?,
        None => print!("{dump}"),
    }
    eprintln!("{} notes", tokens.len());
    Ok(())
}

fn detokenize_cmd(tokens: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(tokens).with_context(|| format!("reading {}", tokens.display()))?;
    let seq = parse_token_dump(&text).with_context(|| format!("parsing {}", tokens.display()))?;
    let doc = detokenize(&seq);
    write_file(out, write_midi(&doc)?)?;
    eprintln!("{} notes", doc.notes.len());
    Ok(())
}

fn prepare_cmd(g: &GlobalArgs, manifest_path: &Path, out: &Path, window: usize) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let seed = g.seed.or(manifest.seed).unwrap_or(0);
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let dataset = Dataset::prepare(&manifest, base, window, seed)?;
    let mut run = RunDir::create(out)?;
    for path in dataset.save(out)? {
        run.record(path);
    }
    run.finish("prepare", Some(seed))?;

    let counts = dataset.counts();
    let pieces = |s| dataset.meta.splits.values().filter(|&&v| v == s).count();
    eprintln!(
        "{} pairs, {} pianists, {} windows",
        dataset.meta.pairs,
        dataset.meta.pianists.len(),
        dataset.windows.len()
    );
    for split in Split::ALL {
        eprintln!("  {split}: {} pieces, {} windows", pieces(split), counts[&split]);
    }
    for f in &dataset.meta.failures {
        eprintln!("error: {} / {} ({}): {}", f.piece, f.pianist, f.performance, f.message);
    }
    if !dataset.meta.failures.is_empty() {
        bail!("{} of {} pairs failed", dataset.meta.failures.len(), dataset.meta.pairs);
    }
    Ok(())
}

fn overrides(g: &GlobalArgs) -> Result<Overrides> {
    let mut o = match &g.config {
        Some(path) => Overrides::load(path)?,
        None => Overrides::default(),
    };
    for s in &g.set {
        o.push_assignment(s)?;
    }
    if let Some(seed) = g.seed {
        o.push("seed", seed)?;
    }
    Ok(o)
}

fn train_cmd(g: &GlobalArgs, dataset_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let dataset = Dataset::load(dataset_dir)?;
    let train = dataset.examples(Split::Train);
    let validation = dataset.examples(Split::Validation);
    let o = overrides(g)?;
    for fixed in ["window", "num_pianists", "input_features"] {
        if o.touches(fixed) {
            bail!("{fixed} is fixed by the dataset");
        }
    }

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.pianists != dataset.meta.pianists || ckpt.model.window != dataset.meta.window {
                bail!("{} was trained on a different pianist set or window size", path.display());
            }
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            let mut model = trainer.model().config().clone();
            let before = model.clone();
            o.apply(&mut model, trainer.config_mut())?;
            if model != before {
                bail!("model settings cannot change when resuming");
            }
            trainer
        }
        None => {
            let (mut model, mut train_cfg) = (ModelConfig::default(), TrainConfig::default());
            model.window = dataset.meta.window;
            model.num_pianists = dataset.meta.pianists.len();
            o.apply(&mut model, &mut train_cfg)?;
            Trainer::new(model, train_cfg, dataset.meta.pianists.clone())?
        }
    };

    let mut run = RunDir::create(out)?;
    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    run.record(log_path.clone());
    let (best_path, last_path) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));

    let start_epoch = trainer.state().epoch;
    let outcome = trainer.fit(&train, &validation, |record, t, improved| {
        let mut step = || -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(record)?)?;
            let ckpt = t.checkpoint();
            ckpt.save(&last_path)?;
            if improved {
                ckpt.save(&best_path)?;
            }
            eprintln!(
                "epoch {:>4}  lr {:.3e}  train {:.4}  val {:.4}{}",
                record.epoch,
                record.lr,
                record.train_total,
                record.val_total,
                if improved { "  *" } else { "" }
            );
            Ok(())
        };
        step().map_err(|e| TrainingError::Callback(e.into()))
    })?;
    for path in [&last_path, &best_path] {
        if path.exists() {
            run.record(path.clone());
        }
    }
    run.finish("train", Some(trainer.config().seed))?;
    eprintln!(
        "epochs {}..{}{}; best validation {}",
        start_epoch + 1,
        trainer.state().epoch,
        if outcome.stopped_early { " (early stop)" } else { "" },
        trainer.state().early.best.map_or("n/a".into(), |b| format!("{b:.6}"))
    );
    Ok(())
}

fn lookup_pianist(ckpt: &Checkpoint, label: &str) -> Result<usize> {
    ckpt.pianist_index(label)
        .ok_or_else(|| anyhow!("unknown pianist {label:?}; known pianists: {}", ckpt.pianists.join(", ")))
}

fn render_cmd(score: &Path, pianist: &str, checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let index = lookup_pianist(&ckpt, pianist)?;
    let model = ckpt.to_model()?;
    let doc = read_document(score)?;
    let rendered = render(&model, &doc, index).with_context(|| format!("rendering {}", score.display()))?;
    write_file(out, write_midi(&rendered)?)?;
    eprintln!("{} notes rendered for {pianist}", rendered.notes.len());
    Ok(())
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn overlap_table(curves: &[KdeCurve]) -> Result<String> {
    let mut out = String::from("group");
    for c in curves {
        out.push('\t');
        out.push_str(&c.label);
    }
    out.push('\n');
    for a in curves {
        out.push_str(&a.label);
        for b in curves {
            out.push_str(&format!("\t{:.6}", distribution_overlap(a, b)?));
        }
        out.push('\n');
    }
    Ok(out)
}

fn eval_cmd(dataset_dir: &Path, checkpoint: &Path, out: &Path, split: &str) -> Result<()> {
    let split: Split = split.parse().map_err(|e: String| anyhow!(e))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::load(dataset_dir)?;
    if ckpt.model.window != dataset.meta.window {
        bail!("checkpoint window {} differs from dataset window {}", ckpt.model.window, dataset.meta.window);
    }
    let model = ckpt.to_model()?;
    let mut examples = Vec::new();
    let mut labels = Vec::new();
    for w in dataset.windows.iter().filter(|w| w.split == split) {
        examples.push(Example {
            pianist: lookup_pianist(&ckpt, &w.pianist)?,
            io: w.io.clone(),
        });
        labels.push(w.pianist.clone());
    }
    if examples.is_empty() {
        bail!("{split} split of {} is empty", dataset_dir.display());
    }
    let predictions: Vec<PredictionValues> = examples
        .iter()
        .map(|ex| model.predict(&ex.io, ex.pianist))
        .collect::<Result<_, _>>()?;
    let report = evaluate_predictions(&predictions, &examples, ckpt.train.alpha_loss)?;

    let mut run = RunDir::create(out)?;
    run.write("report.txt", report.to_string())?;
    run.write("report.json", serde_json::to_string_pretty(&report)? + "\n")?;

    let mut velocities: BTreeMap<(String, Source), Vec<f64>> = BTreeMap::new();
    for ((ex, pred), label) in examples.iter().zip(&predictions).zip(&labels) {
        for (i, &m) in ex.io.mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let human = velocity_from_token(ex.io.targets[i][0].clamp(0, 63) as u16);
            let generated = velocity_from_token(pred.velocity[i].round().clamp(0.0, 63.0) as u16);
            velocities.entry((label.clone(), Source::Performance)).or_default().push(human as f64);
            velocities
                .entry((label.clone(), Source::GeneratedTranscribed))
                .or_default()
                .push(generated as f64);
        }
    }
    let mut curves = Vec::new();
    for ((label, source), v) in velocities {
        let tagged = format!("{label}/{}", source.tag());
        match velocity_kde(&v) {
            Ok(curve) => {
                let curve = curve.labelled(tagged.clone(), Some(source));
                run.write(format!("kde/{}.tsv", file_label(&tagged)), kde_columns(&curve))?;
                curves.push(curve);
            }
            Err(e) => eprintln!("skipping {tagged}: {e}"),
        }
    }
    run.write("overlap.tsv", overlap_table(&curves)?)?;
    run.finish("eval", None)?;
    print!("{report}");
    Ok(())
}

fn midi_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no MIDI files in {}", path.display());
    }
    Ok(files)
}

fn stats_cmd(g: &GlobalArgs, groups: &[String], out: &Path, smoothing: usize) -> Result<()> {
    let mut run = RunDir::create(out)?;
    let mut curves = Vec::new();
    for spec in groups {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("expected LABEL=PATH, got {spec:?}"))?;
        let source = label.rsplit_once('/').and_then(|(_, tag)| tag.parse::<Source>().ok());
        let mut velocities = Vec::new();
        for file in midi_files(&input(g, Path::new(path)))? {
            let doc = read_document(&file)?;
            velocities.extend(doc.notes.iter().map(|n| n.velocity as f64));
            let tokens = tokenize(&rescale_resolution(&doc, TICKS_PER_BEAT))
                .with_context(|| format!("tokenizing {}", file.display()))?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("midi");
            match expression_curves(&tokens, smoothing) {
                Ok(c) => {
                    let base = format!("curves/{}/{}", file_label(label), file_label(stem));
                    run.write(format!("{base}.velocity.tsv"), curve_columns(&c.velocity))?;
                    run.write(format!("{base}.duration.tsv"), curve_columns(&c.duration))?;
                }
                Err(e) => eprintln!("no expression curves for {}: {e}", file.display()),
            }
        }
        let curve = velocity_kde(&velocities)
            .with_context(|| format!("group {label}"))?
            .labelled(label, source);
        run.write(format!("kde/{}.tsv", file_label(label)), kde_columns(&curve))?;
        eprintln!("{label}: {} notes, bandwidth {:.3}", velocities.len(), curve.bandwidth);
        curves.push(curve);
    }
    run.write("overlap.tsv", overlap_table(&curves)?)?;
    run.finish("stats", None)
}
