//! Test-set losses and average errors, velocity density curves and
//! expression curves.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::DEFAULT_MICROSECONDS_PER_BEAT;
use crate::model::{Model, ModelError, PredictionValues};
use crate::tokenizer::{TokenSequence, TICKS_PER_BEAT};
use crate::training::{masked_loss_sum, Example, TrainingError};

pub const KDE_GRID_MAX: f64 = 127.0;
pub const KDE_GRID_STEP: f64 = 0.5;
pub const KDE_MIN_BANDWIDTH: f64 = 0.5;
pub const DEFAULT_SMOOTHING: usize = 25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("{0} predictions for {1} examples")]
    Count(usize, usize),
    #[error("curves are evaluated on different grids")]
    GridMismatch,
    #[error("smoothing window {window} must be odd and below the sequence length {len}")]
    Window { window: usize, len: usize },
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorUnit {
    /// Raw MIDI velocity steps.
    Velocity,
    Seconds,
}

impl ErrorUnit {
    fn suffix(self) -> &'static str {
        match self {
            ErrorUnit::Velocity => "",
            ErrorUnit::Seconds => " s",
        }
    }
}

/// Average error for one feature, from its token-space error.
///
/// Velocity tokens are width-2 bins of MIDI velocity. Timing tokens are
/// ticks at 384 per beat, converted at the default tempo of 120 BPM.
pub fn token_error_to_unit(feature: usize, token_error: f64) -> (f64, ErrorUnit) {
    if feature == 0 {
        (token_error * 2.0, ErrorUnit::Velocity)
    } else {
        let seconds_per_tick = DEFAULT_MICROSECONDS_PER_BEAT as f64 / 1e6 / TICKS_PER_BEAT as f64;
        (token_error * seconds_per_tick, ErrorUnit::Seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: String,
    pub loss: f64,
    /// Mean absolute target over unmasked nonzero targets, in token units.
    pub mean_abs_target: f64,
    /// `loss × mean_abs_target`, in token units.
    pub token_error: f64,
    /// Magnitude of the ± average error in `unit`.
    pub error: f64,
    pub unit: ErrorUnit,
    pub notes: usize,
}

impl FeatureReport {
    pub fn new(feature: usize, loss: f64, mean_abs_target: f64, notes: usize) -> Self {
        let token_error = loss * mean_abs_target;
        let (error, unit) = token_error_to_unit(feature, token_error);
        FeatureReport {
            feature: FEATURE_TITLES[feature].to_string(),
            loss,
            mean_abs_target,
            token_error,
            error,
            unit,
            notes,
        }
    }
}

pub const FEATURE_TITLES: [&str; 3] = ["Velocity", "Duration Deviation", "Inter-Onset Interval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub features: Vec<FeatureReport>,
    pub windows: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>8}  {}", "Feature", "Loss", "Average error")?;
        for r in &self.features {
            writeln!(f, "{:<22} {:>8.4}  ±{:.4}{}", r.feature, r.loss, r.error, r.unit.suffix())?;
        }
        Ok(())
    }
}

/// Scores precomputed predictions against the examples' targets.
pub fn evaluate_predictions(predictions: &[PredictionValues], examples: &[Example], alpha: f64) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(EvalError::Empty("test set"));
    }
    if predictions.len() != examples.len() {
        return Err(EvalError::Count(predictions.len(), examples.len()));
    }
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut target_sums = [0.0; 3];
    let mut nonzero = [0usize; 3];
    for (p, ex) in predictions.iter().zip(examples) {
        for (t, pred) in [&p.velocity, &p.dd, &p.ioi].into_iter().enumerate() {
            let target = ex.io.target_column(t);
            let (s, c) = masked_loss_sum(pred, &target, &ex.io.mask, alpha)?;
            sums[t] += s;
            counts[t] += c;
            for (&y, &m) in target.iter().zip(&ex.io.mask) {
                if m != 0 && y != 0.0 {
                    target_sums[t] += y.abs();
                    nonzero[t] += 1;
                }
            }
        }
    }
    if counts[0] == 0 {
        return Err(EvalError::Empty("unmasked notes"));
    }
    let features = (0..3)
        .map(|t| {
            let mean_abs = if nonzero[t] == 0 { 0.0 } else { target_sums[t] / nonzero[t] as f64 };
            FeatureReport::new(t, sums[t] / counts[t] as f64, mean_abs, counts[t])
        })
        .collect();
    Ok(EvalReport {
        features,
        windows: examples.len(),
    })
}

/// Runs the model over every example and reports per-feature losses and
/// average errors.
pub fn evaluate(model: &Model<f32>, examples: &[Example], alpha: f64) -> Result<EvalReport> {
    let predictions = examples
        .iter()
        .map(|ex| model.predict(&ex.io, ex.pianist))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_predictions(&predictions, examples, alpha)
}

/// Where a velocity sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Human performance.
    #[serde(rename = "P")]
    Performance,
    /// Generated from a transcribed score.
    #[serde(rename = "G-TS")]
    GeneratedTranscribed,
    /// Generated from a canonical score.
    #[serde(rename = "G-S")]
    GeneratedScore,
    /// Transcribed score.
    #[serde(rename = "TS")]
    Transcribed,
    /// Canonical score.
    #[serde(rename = "S")]
    Score,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Performance => "P",
            Source::GeneratedTranscribed => "G-TS",
            Source::GeneratedScore => "G-S",
            Source::Transcribed => "TS",
            Source::Score => "S",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        [
            Source::Performance,
            Source::GeneratedTranscribed,
            Source::GeneratedScore,
            Source::Transcribed,
            Source::Score,
        ]
        .into_iter()
        .find(|src| src.tag() == s)
        .ok_or_else(|| format!("unknown source {s:?} (P, G-TS, G-S, TS, S)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub label: String,
    pub source: Option<Source>,
}

impl KdeCurve {
    pub fn labelled(mut self, label: impl Into<String>, source: Option<Source>) -> Self {
        self.label = label.into();
        self.source = source;
        self
    }
}

pub fn kde_grid() -> Vec<f64> {
    let points = (KDE_GRID_MAX / KDE_GRID_STEP) as usize + 1;
    (0..points).map(|i| i as f64 * KDE_GRID_STEP).collect()
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Silverman's rule `1.06 σ n^(-1/5)` with the sample standard deviation,
/// floored at [`KDE_MIN_BANDWIDTH`].
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (1.06 * var.sqrt() * n.powf(-0.2)).max(KDE_MIN_BANDWIDTH)
}

/// Gaussian kernel density of MIDI velocities on the fixed 0..127 grid,
/// normalized to unit trapezoidal area.
pub fn velocity_kde(velocities: &[f64]) -> Result<KdeCurve> {
    if velocities.len() < 2 {
        return Err(EvalError::Empty("fewer than two velocity samples"));
    }
    let h = silverman_bandwidth(velocities);
    let grid = kde_grid();
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| velocities.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum())
        .collect();
    let area = trapezoid(&grid, &density);
    if area > 0.0 {
        density.iter_mut().for_each(|d| *d /= area);
    }
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
        label: String::new(),
        source: None,
    })
}

/// Shared area under two density curves.
pub fn distribution_overlap(a: &KdeCurve, b: &KdeCurve) -> Result<f64> {
    if a.grid != b.grid || a.density.len() != a.grid.len() || b.density.len() != b.grid.len() {
        return Err(EvalError::GridMismatch);
    }
    let low: Vec<f64> = a.density.iter().zip(&b.density).map(|(x, y)| x.min(*y)).collect();
    Ok(trapezoid(&a.grid, &low).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub values: Vec<f64>,
    /// The input was constant and the curve is all zeros.
    pub zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionCurves {
    pub velocity: Curve,
    pub duration: Curve,
}

/// Z-score with the population standard deviation.
pub fn standardize(values: &[f64]) -> Curve {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Curve {
            values: vec![0.0; values.len()],
            zero_variance: true,
        };
    }
    let sd = var.sqrt();
    Curve {
        values: values.iter().map(|x| (x - mean) / sd).collect(),
        zero_variance: false,
    }
}

/// Centered moving average; near the edges the window shrinks to what fits.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Standardized and smoothed velocity and duration curves of a sequence.
pub fn expression_curves(seq: &TokenSequence, window: usize) -> Result<ExpressionCurves> {
    let tokens: Vec<_> = seq.tokens().iter().filter(|t| !t.is_pad()).collect();
    if window % 2 == 0 || tokens.len() <= window {
        return Err(EvalError::Window {
            window,
            len: tokens.len(),
        });
    }
    let smooth = |raw: Vec<f64>| {
        let z = standardize(&raw);
        Curve {
            values: moving_average(&z.values, window),
            zero_variance: z.zero_variance,
        }
    };
    Ok(ExpressionCurves {
        velocity: smooth(tokens.iter().map(|t| t.velocity as f64).collect()),
        duration: smooth(tokens.iter().map(|t| t.duration as f64).collect()),
    })
}

/// Two whitespace-separated columns, one row per point.
pub fn two_column(xs: &[f64], ys: &[f64]) -> String {
    xs.iter().zip(ys).map(|(x, y)| format!("{x}\t{y}\n")).collect()
}

pub fn kde_columns(curve: &KdeCurve) -> String {
    two_column(&curve.grid, &curve.density)
}

pub fn curve_columns(curve: &Curve) -> String {
    let index: Vec<f64> = (0..curve.values.len()).map(|i| i as f64).collect();
    two_column(&index, &curve.values)
}
