//! Manifests, piece-level splits and prepared window datasets.
//!
//! A manifest is a tab-separated text file with one score/performance pair
//! per line:
//!
//! ```text
//! # seed=7
//! piece   pianist   performance.mid   score.mid   [train|validation|test]
//! ```
//!
//! Blank lines and `#` comments are ignored, except for a `# seed=N`
//! directive. Paths are relative to the manifest's directory. Rows without a
//! split column get one derived from the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{align, augment, build_model_io, scale_score_to_performance, window_pairs, FeatureError, ModelIO, PianistId};
use crate::midi::{read_midi, rescale_resolution, MidiDocument, MidiError};
use crate::tokenizer::{tokenize, TokenizerError, TICKS_PER_BEAT};
use crate::training::Example;

pub const WINDOWS_FILE: &str = "windows.jsonl";
pub const META_FILE: &str = "dataset.json";
pub const SPLITS_FILE: &str = "splits.tsv";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Midi { path: String, source: MidiError },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train, validation, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub piece: String,
    pub pianist: String,
    pub performance: PathBuf,
    pub score: PathBuf,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = Manifest::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(seed) = comment.trim().strip_prefix("seed=") {
                    let seed = seed.trim().parse().map_err(|e| DatasetError::Manifest {
                        line,
                        message: format!("bad seed: {e}"),
                    })?;
                    manifest.seed = Some(seed);
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').map(str::trim).collect();
            if !(4..=5).contains(&cols.len()) || cols[..4].iter().any(|c| c.is_empty()) {
                return Err(DatasetError::Manifest {
                    line,
                    message: format!("expected 4 or 5 tab-separated columns, found {}", cols.len()),
                });
            }
            let split = match cols.get(4).filter(|c| !c.is_empty()) {
                Some(s) => Some(s.parse().map_err(|message| DatasetError::Manifest { line, message })?),
                None => None,
            };
            manifest.entries.push(ManifestEntry {
                piece: cols[0].to_string(),
                pianist: cols[1].to_string(),
                performance: PathBuf::from(cols[2]),
                score: PathBuf::from(cols[3]),
                split,
            });
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text)
    }

    /// Sorted, de-duplicated pianist labels; one-hot index = position.
    pub fn pianists(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.pianist.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Split per piece: explicit columns win, the rest are drawn from `seed`.
    pub fn splits(&self, seed: u64) -> Result<BTreeMap<String, Split>> {
        let mut fixed: BTreeMap<String, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(s) = e.split {
                if let Some(prev) = fixed.insert(e.piece.clone(), s) {
                    if prev != s {
                        return Err(DatasetError::Format(format!(
                            "piece {:?} assigned to both {prev} and {s}",
                            e.piece
                        )));
                    }
                }
            }
        }
        let free: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.piece.clone())
            .filter(|p| !fixed.contains_key(p))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = assign_splits(&free, seed);
        out.extend(fixed);
        Ok(out)
    }
}

/// Split sizes for `n` pieces in 8:1:1 proportion. Validation and test get
/// `round(n / 10)` pieces each, at least one as soon as there are three.
pub fn split_sizes(n: usize) -> [usize; 3] {
    match n {
        0 => [0, 0, 0],
        1 => [1, 0, 0],
        2 => [1, 1, 0],
        _ => {
            let held = ((n + 5) / 10).max(1);
            [n - 2 * held, held, held]
        }
    }
}

/// Seeded piece-level 8:1:1 assignment. Input order does not matter.
pub fn assign_splits(pieces: &[String], seed: u64) -> BTreeMap<String, Split> {
    let mut order: Vec<&String> = pieces.iter().collect::<BTreeSet<_>>().into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [train, val, _] = split_sizes(order.len());
    order
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Validation
            } else {
                Split::Test
            };
            (p.clone(), split)
        })
        .collect()
}

/// One augmented copy of a pair, cut into windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCopy {
    pub ratio_index: usize,
    pub windows: Vec<ModelIO>,
}

/// Resolution normalization, score-to-performance scaling, tenfold tempo
/// augmentation, tokenization, alignment and windowing for one pair.
pub fn prepare_pair(
    score: &MidiDocument,
    performance: &MidiDocument,
    pianist: &PianistId,
    window: usize,
) -> Result<Vec<PreparedCopy>> {
    let score = rescale_resolution(score, TICKS_PER_BEAT);
    let performance = rescale_resolution(performance, TICKS_PER_BEAT);
    let score = scale_score_to_performance(&score, &performance)?;
    augment(&score, &performance)
        .into_iter()
        .map(|copy| {
            let pair = align(&tokenize(&copy.performance)?, &tokenize(&copy.score)?, pianist.clone())?;
            let windows = window_pairs(&pair, window)?
                .iter()
                .map(build_model_io)
                .collect::<Result<_, _>>()?;
            Ok(PreparedCopy {
                ratio_index: copy.ratio_index,
                windows,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub piece: String,
    pub pianist: String,
    pub split: Split,
    pub ratio_index: usize,
    pub window_index: usize,
    pub io: ModelIO,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub piece: String,
    pub pianist: String,
    pub performance: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: u32,
    pub window: usize,
    pub seed: u64,
    pub pianists: Vec<String>,
    pub splits: BTreeMap<String, Split>,
    pub pairs: usize,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub windows: Vec<WindowRecord>,
}

fn read_document(path: &Path) -> Result<MidiDocument> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    read_midi(&bytes).map_err(|source| DatasetError::Midi {
        path: path.display().to_string(),
        source,
    })
}

impl Dataset {
    /// Runs [`prepare_pair`] over every manifest row in order. Rows that fail
    /// are recorded in `meta.failures` and skipped.
    pub fn prepare(manifest: &Manifest, base_dir: &Path, window: usize, seed: u64) -> Result<Self> {
        if window == 0 {
            return Err(FeatureError::WindowSize.into());
        }
        let pianists = manifest.pianists();
        let splits = manifest.splits(seed)?;
        let mut windows = Vec::new();
        let mut failures = Vec::new();
        for entry in &manifest.entries {
            let index = pianists.iter().position(|p| *p == entry.pianist).expect("label from manifest");
            let pianist = PianistId {
                index,
                name: entry.pianist.clone(),
            };
            let prepared = read_document(&base_dir.join(&entry.score)).and_then(|score| {
                let perf = read_document(&base_dir.join(&entry.performance))?;
                prepare_pair(&score, &perf, &pianist, window)
            });
            match prepared {
                Ok(copies) => {
                    for copy in copies {
                        for (window_index, io) in copy.windows.into_iter().enumerate() {
                            windows.push(WindowRecord {
                                piece: entry.piece.clone(),
                                pianist: entry.pianist.clone(),
                                split: splits[&entry.piece],
                                ratio_index: copy.ratio_index,
                                window_index,
                                io,
                            });
                        }
                    }
                }
                Err(e) => failures.push(PairFailure {
                    piece: entry.piece.clone(),
                    pianist: entry.pianist.clone(),
                    performance: entry.performance.display().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        Ok(Dataset {
            meta: DatasetMeta {
                format: FORMAT_VERSION,
                window,
                seed,
                pianists,
                splits,
                pairs: manifest.entries.len(),
                failures,
            },
            windows,
        })
    }

    pub fn pianist_index(&self, label: &str) -> Option<usize> {
        self.meta.pianists.iter().position(|p| p == label)
    }

    /// Training examples of one split, in dataset order.
    pub fn examples(&self, split: Split) -> Vec<Example> {
        self.windows
            .iter()
            .filter(|w| w.split == split)
            .map(|w| Example {
                pianist: self.pianist_index(&w.pianist).expect("pianist in vocabulary"),
                io: w.io.clone(),
            })
            .collect()
    }

    /// Window counts per split.
    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for w in &self.windows {
            *counts.get_mut(&w.split).expect("all splits present") += 1;
        }
        counts
    }

    /// Writes the dataset files into `dir` and returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        let json_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| DatasetError::Json { path, source }
        };

        let windows_path = dir.join(WINDOWS_FILE);
        let mut lines = String::new();
        for w in &self.windows {
            lines.push_str(&serde_json::to_string(w).map_err(json_err(&windows_path))?);
            lines.push('\n');
        }
        std::fs::write(&windows_path, lines).map_err(io_error(&windows_path))?;

        let meta_path = dir.join(META_FILE);
        let meta = serde_json::to_string_pretty(&self.meta).map_err(json_err(&meta_path))?;
        std::fs::write(&meta_path, meta + "\n").map_err(io_error(&meta_path))?;

        let splits_path = dir.join(SPLITS_FILE);
        let splits: String = self.meta.splits.iter().map(|(p, s)| format!("{p}\t{s}\n")).collect();
        std::fs::write(&splits_path, splits).map_err(io_error(&splits_path))?;

        Ok(vec![meta_path, splits_path, windows_path])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(io_error(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: meta_path.display().to_string(),
            source,
        })?;
        if meta.format != FORMAT_VERSION {
            return Err(DatasetError::Format(format!("unsupported dataset format {}", meta.format)));
        }
        let windows_path = dir.join(WINDOWS_FILE);
        let text = std::fs::read_to_string(&windows_path).map_err(io_error(&windows_path))?;
        let mut windows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let w: WindowRecord = serde_json::from_str(line).map_err(|source| DatasetError::Json {
                path: windows_path.display().to_string(),
                source,
            })?;
            if w.io.len() != meta.window || !meta.pianists.contains(&w.pianist) {
                return Err(DatasetError::Format(format!(
                    "window for {}/{} does not match dataset metadata",
                    w.piece, w.pianist
                )));
            }
            windows.push(w);
        }
        Ok(Dataset { meta, windows })
    }
}
