//! Masked relative-error losses, GradNorm loss balancing, early stopping and
//! the epoch loop.

use pianoform_numerics::{adam_step, lr_at, AdamState, LrSchedule, NumericsError, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::features::{ModelIO, TARGET_FEATURES};
use crate::model::{Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("every position is masked; the mean loss is undefined")]
    EmptyMask,
    #[error("prediction, target and mask lengths differ ({pred}, {target}, {mask})")]
    Length { pred: usize, target: usize, mask: usize },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("non-finite GradNorm input: {0}")]
    GradNorm(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch callback failed: {0}")]
    Callback(Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

pub const FEATURE_NAMES: [&str; TARGET_FEATURES] = ["velocity", "dd", "ioi"];

/// Per-feature loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub velocity: f64,
    pub dd: f64,
    pub ioi: f64,
}

impl LossWeights {
    pub const ONES: LossWeights = LossWeights {
        velocity: 1.0,
        dd: 1.0,
        ioi: 1.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.velocity, self.dd, self.ioi]
    }

    pub fn from_array(w: [f64; 3]) -> Self {
        Self {
            velocity: w[0],
            dd: w[1],
            ioi: w[2],
        }
    }

    pub fn sum(&self) -> f64 {
        self.velocity + self.dd + self.ioi
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ONES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureLosses {
    pub velocity: f64,
    pub dd: f64,
    pub ioi: f64,
}

impl FeatureLosses {
    pub fn as_array(&self) -> [f64; 3] {
        [self.velocity, self.dd, self.ioi]
    }

    pub fn from_array(l: [f64; 3]) -> Self {
        Self {
            velocity: l[0],
            dd: l[1],
            ioi: l[2],
        }
    }

    /// Unweighted sum, the validation metric.
    pub fn sum(&self) -> f64 {
        self.velocity + self.dd + self.ioi
    }
}

/// Relative error of one prediction: `|y − ŷ| / |ŷ|`, or `α |y − ŷ|` when the
/// target is zero.
pub fn note_loss(pred: f64, target: f64, alpha: f64) -> f64 {
    if target != 0.0 {
        (pred - target).abs() / target.abs()
    } else {
        alpha * (pred - target).abs()
    }
}

/// Sum of per-note losses and the number of unmasked notes.
pub fn masked_loss_sum(pred: &[f64], target: &[f64], mask: &[u8], alpha: f64) -> Result<(f64, usize)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(TrainingError::Length {
            pred: pred.len(),
            target: target.len(),
            mask: mask.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..pred.len() {
        if mask[i] != 0 {
            sum += note_loss(pred[i], target[i], alpha);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean relative error over unmasked positions.
pub fn feature_loss(pred: &[f64], target: &[f64], mask: &[u8], alpha: f64) -> Result<f64> {
    let (sum, count) = masked_loss_sum(pred, target, mask, alpha)?;
    if count == 0 {
        return Err(TrainingError::EmptyMask);
    }
    Ok(sum / count as f64)
}

pub fn total_loss(losses: &FeatureLosses, weights: &LossWeights) -> f64 {
    weights.velocity * losses.velocity + weights.dd * losses.dd + weights.ioi * losses.ioi
}

/// Differentiable contribution of one window to a batch loss whose mean is
/// taken over `normalizer` unmasked notes.
pub fn feature_loss_var<'t>(
    pred: Var<'t, f32>,
    target: &[f64],
    mask: &[u8],
    alpha: f64,
    normalizer: usize,
) -> Result<Var<'t, f32>> {
    let n = target.len();
    let norm = normalizer.max(1) as f64;
    let coef: Vec<f64> = (0..n)
        .map(|i| match (mask[i], target[i]) {
            (0, _) => 0.0,
            (_, t) if t != 0.0 => 1.0 / (t.abs() * norm),
            _ => alpha / norm,
        })
        .collect();
    let tape = pred.tape();
    let target = tape.constant(Tensor::from_f64([n, 1], target)?);
    let coef = tape.constant(Tensor::from_f64([n, 1], &coef)?);
    Ok(pred.sub(target)?.abs()?.mul(coef)?.sum()?)
}

/// Weights summing to exactly 3 with every entry at least `floor`.
fn renormalize(mut w: [f64; 3], floor: f64) -> [f64; 3] {
    let mut pinned = [false; 3];
    loop {
        let free: f64 = (0..3).filter(|&i| !pinned[i]).map(|i| w[i]).sum();
        let budget = 3.0 - floor * pinned.iter().filter(|&&p| p).count() as f64;
        for i in 0..3 {
            if !pinned[i] {
                w[i] *= budget / free;
            }
        }
        let mut changed = false;
        for i in 0..3 {
            if !pinned[i] && w[i] < floor {
                pinned[i] = true;
                w[i] = floor;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    // Absorb rounding in the last weight so the left-to-right sum is exactly
    // 3: `p + (3 - p)` rounds to 3 for any `p` in [0, 3]. If that would push
    // the last weight under the floor, shave the larger of the others first.
    loop {
        let p = w[0] + w[1];
        let rest = 3.0 - p;
        if rest >= floor && p + rest == 3.0 {
            w[2] = rest;
            return w;
        }
        let j = if w[0] >= w[1] { 0 } else { 1 };
        w[j] = w[j].next_down();
    }
}

/// One GradNorm step on the loss weights.
///
/// With `G_t = w_t · norms[t]` and `Ḡ` their mean, the objective
/// `Σ_t |G_t − Ḡ · ratios[t]^α|` is divided by the mean unweighted norm (so
/// `lr` is a dimensionless step size) and differentiated with the targets
/// held constant. The weights move by `lr` along the negative gradient, are
/// floored at `floor`, and renormalized to sum to 3.
pub fn gradnorm_update(
    weights: &LossWeights,
    norms: [f64; 3],
    ratios: [f64; 3],
    alpha: f64,
    lr: f64,
    floor: f64,
) -> Result<LossWeights> {
    if norms.iter().chain(&ratios).any(|v| !v.is_finite()) || norms.iter().any(|&n| n < 0.0) {
        return Err(TrainingError::GradNorm(format!("norms {norms:?}, ratios {ratios:?}")));
    }
    let w = weights.as_array();
    let g: [f64; 3] = std::array::from_fn(|t| w[t] * norms[t]);
    let mean = g.iter().sum::<f64>() / 3.0;
    let scale = norms.iter().sum::<f64>() / 3.0;
    if scale == 0.0 {
        return Ok(LossWeights::from_array(renormalize(w.map(|v| v.max(floor)), floor)));
    }
    let tolerance = 1e-9 * mean.abs().max(f64::MIN_POSITIVE);
    let stepped: [f64; 3] = std::array::from_fn(|t| {
        let diff = g[t] - mean * ratios[t].powf(alpha);
        let sign = if diff.abs() <= tolerance { 0.0 } else { diff.signum() };
        (w[t] - lr * sign * norms[t] / scale).max(floor)
    });
    Ok(LossWeights::from_array(renormalize(stepped, floor)))
}

/// Patience-based stopping on a validation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's value; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = value.is_finite() && self.best.map_or(true, |b| value < b);
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha_loss: f64,
    pub gradnorm: bool,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    pub weight_floor: f64,
    pub initial_weights: LossWeights,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub t_0: usize,
    pub t_mult: usize,
    pub eta_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 400,
            patience: 30,
            alpha_loss: 0.001,
            gradnorm: true,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            weight_floor: 1e-4,
            initial_weights: LossWeights::ONES,
            learning_rate: 1e-4,
            weight_decay: 1e-7,
            t_0: 10,
            t_mult: 2,
            eta_min: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.patience >= self.max_epochs {
            return fail("patience must be below max_epochs");
        }
        if self.t_0 == 0 || self.t_mult == 0 {
            return fail("t_0 and t_mult must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.learning_rate) {
            return fail("need 0 <= eta_min <= learning_rate");
        }
        let w = self.initial_weights.as_array();
        if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return fail("initial loss weights must be positive");
        }
        if !(self.weight_floor > 0.0 && self.weight_floor * 3.0 < 3.0) {
            return fail("weight_floor must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.learning_rate,
            t_0: self.t_0,
            t_mult: self.t_mult,
            eta_min: self.eta_min,
        }
    }
}

/// One training window and its pianist index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub pianist: usize,
    pub io: ModelIO,
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub weights: LossWeights,
    /// Per-feature training losses of the first epoch.
    pub initial_losses: Option<[f64; 3]>,
    pub adam: AdamState<f32>,
    pub early: EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Weights used during the epoch.
    pub weights: LossWeights,
    pub train: FeatureLosses,
    /// Weights after the end-of-epoch GradNorm update.
    pub next_weights: LossWeights,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub w_v: f64,
    pub w_dd: f64,
    pub w_ioi: f64,
    pub train_velocity: f64,
    pub train_dd: f64,
    pub train_ioi: f64,
    pub train_total: f64,
    pub val_velocity: f64,
    pub val_dd: f64,
    pub val_ioi: f64,
    pub val_total: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    /// Snapshot at the best validation loss reached during this call.
    pub best: Option<Checkpoint>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model<f32>,
    config: TrainConfig,
    pianists: Vec<String>,
    state: TrainState,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, pianists: Vec<String>) -> Result<Self> {
        config.validate()?;
        if pianists.len() != model_config.num_pianists {
            return Err(TrainingError::Config(format!(
                "{} pianist labels for a model with {} pianists",
                pianists.len(),
                model_config.num_pianists
            )));
        }
        let model = Model::init(model_config)?;
        let adam = AdamState::new(&model.params().tensors, config.learning_rate, config.weight_decay);
        let state = TrainState {
            epoch: 0,
            weights: config.initial_weights,
            initial_losses: None,
            adam,
            early: EarlyStopping::new(config.patience),
        };
        Ok(Self {
            model,
            config,
            pianists,
            state,
        })
    }

    /// Continues from a saved run.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let model = Model::from_params(ckpt.model, ckpt.params)?;
        Ok(Self {
            model,
            config: ckpt.train,
            pianists: ckpt.pianists,
            state: ckpt.state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            train: self.config.clone(),
            pianists: self.pianists.clone(),
            params: self.model.params().clone(),
            state: self.state.clone(),
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn pianists(&self) -> &[String] {
        &self.pianists
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    /// One pass over `data` in a freshly shuffled order, one Adam step per
    /// batch, followed by the GradNorm weight update.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(TrainingError::EmptySplit("training"));
        }
        let epoch = self.state.epoch;
        let lr = lr_at(&self.config.schedule(), epoch);
        self.state.adam.learning_rate = lr;
        let weights = self.state.weights;
        let w = weights.as_array();
        let alpha = self.config.alpha_loss;

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng(2 * epoch as u64));
        let mut dropout_rng = self.rng(2 * epoch as u64 + 1);

        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for (batch_index, batch) in order.chunks(self.config.batch_size).enumerate() {
            let normalizer: usize = batch.iter().map(|&i| data[i].io.real_count()).sum();
            if normalizer == 0 {
                return Err(TrainingError::EmptyMask);
            }
            let mut grads: Vec<Tensor<f32>> = self
                .model
                .params()
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect();
            for &i in batch {
                let ex = &data[i];
                let tape = Tape::new();
                let bound = self.model.bind(&tape);
                let preds = self.model.forward(&bound, &ex.io, ex.pianist, Some(&mut dropout_rng))?;
                let mut total: Option<Var<'_, f32>> = None;
                for (t, pred) in preds.as_array().into_iter().enumerate() {
                    let target = ex.io.target_column(t);
                    let values = pred.value().to_f64_vec();
                    let (s, c) = masked_loss_sum(&values, &target, &ex.io.mask, alpha)?;
                    sums[t] += s;
                    if t == 0 {
                        count += c;
                    }
                    let term = feature_loss_var(pred, &target, &ex.io.mask, alpha, normalizer)?.scale(w[t])?;
                    total = Some(match total {
                        Some(acc) => acc.add(term)?,
                        None => term,
                    });
                }
                let total = total.expect("three heads");
                if !total.item()?.is_finite() {
                    return Err(TrainingError::NonFinite {
                        what: "loss",
                        epoch: epoch + 1,
                        batch: batch_index,
                    });
                }
                tape.backward(total)?;
                for (acc, var) in grads.iter_mut().zip(&bound.vars) {
                    if let Some(g) = var.grad() {
                        acc.add_assign(&g)?;
                    }
                }
            }
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(TrainingError::NonFinite {
                    what: "gradient",
                    epoch: epoch + 1,
                    batch: batch_index,
                });
            }
            adam_step(&mut self.model.params_mut().tensors, &grads, &mut self.state.adam)?;
        }

        let losses = sums.map(|s| s / count as f64);
        let initial = *self.state.initial_losses.get_or_insert(losses);
        if self.config.gradnorm {
            let norms = self.shared_gradient_norms(data)?;
            let relative: [f64; 3] =
                std::array::from_fn(|t| if initial[t] > 0.0 { losses[t] / initial[t] } else { 1.0 });
            let mean = relative.iter().sum::<f64>() / 3.0;
            let ratios = relative.map(|r| if mean > 0.0 { r / mean } else { 1.0 });
            self.state.weights = gradnorm_update(
                &weights,
                norms,
                ratios,
                self.config.gradnorm_alpha,
                self.config.gradnorm_lr,
                self.config.weight_floor,
            )?;
        }
        self.state.epoch += 1;
        Ok(EpochMetrics {
            epoch: epoch + 1,
            lr,
            weights,
            train: FeatureLosses::from_array(losses),
            next_weights: self.state.weights,
        })
    }

    /// Norms of each unweighted feature loss's gradient with respect to the
    /// shared weight, measured on the first batch of `data`.
    pub fn shared_gradient_norms(&self, data: &[Example]) -> Result<[f64; 3]> {
        let probe = &data[..data.len().min(self.config.batch_size)];
        let normalizer: usize = probe.iter().map(|e| e.io.real_count()).sum();
        if normalizer == 0 {
            return Err(TrainingError::EmptyMask);
        }
        let shared = self.model.layout().shared_weight();
        let shape = self.model.params().tensors[shared].shape().to_vec();
        let mut acc: [Tensor<f32>; 3] = std::array::from_fn(|_| Tensor::zeros(shape.clone()));
        for ex in probe {
            let tape = Tape::new();
            let bound = self.model.bind_where(&tape, |slot| slot == shared);
            let preds = self.model.forward(&bound, &ex.io, ex.pianist, None)?;
            for (t, pred) in preds.as_array().into_iter().enumerate() {
                let target = ex.io.target_column(t);
                let loss = feature_loss_var(pred, &target, &ex.io.mask, self.config.alpha_loss, normalizer)?;
                if let Some(g) = tape.gradients(loss)?.get(bound.vars[shared]) {
                    acc[t].add_assign(g)?;
                }
            }
        }
        Ok(acc.map(|g| g.l2_norm()))
    }

    /// Mean per-feature loss over every unmasked note in `data`.
    pub fn evaluate_losses(&self, data: &[Example]) -> Result<FeatureLosses> {
        let mut sums = [0.0; 3];
        let mut count = 0;
        for ex in data {
            let p = self.model.predict(&ex.io, ex.pianist)?;
            for (t, pred) in [&p.velocity, &p.dd, &p.ioi].into_iter().enumerate() {
                let (s, c) = masked_loss_sum(pred, &ex.io.target_column(t), &ex.io.mask, self.config.alpha_loss)?;
                sums[t] += s;
                if t == 0 {
                    count += c;
                }
            }
        }
        if count == 0 {
            return Err(TrainingError::EmptyMask);
        }
        Ok(FeatureLosses::from_array(sums.map(|s| s / count as f64)))
    }

    /// Trains until `max_epochs` or until validation stops improving.
    ///
    /// `on_epoch` sees each log record, the trainer after the epoch, and
    /// whether the epoch set a new best validation loss.
    pub fn fit(
        &mut self,
        train: &[Example],
        validation: &[Example],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer, bool) -> Result<()>,
    ) -> Result<FitOutcome> {
        if train.is_empty() {
            return Err(TrainingError::EmptySplit("training"));
        }
        if validation.is_empty() {
            return Err(TrainingError::EmptySplit("validation"));
        }
        let mut records = Vec::new();
        let mut best = None;
        let mut stopped_early = self.state.early.should_stop();
        while !stopped_early && self.state.epoch < self.config.max_epochs {
            let m = self.train_epoch(train)?;
            let val = self.evaluate_losses(validation)?;
            let improved = self.state.early.observe(m.epoch, val.sum());
            let record = EpochRecord {
                epoch: m.epoch,
                lr: m.lr,
                w_v: m.weights.velocity,
                w_dd: m.weights.dd,
                w_ioi: m.weights.ioi,
                train_velocity: m.train.velocity,
                train_dd: m.train.dd,
                train_ioi: m.train.ioi,
                train_total: total_loss(&m.train, &m.weights),
                val_velocity: val.velocity,
                val_dd: val.dd,
                val_ioi: val.ioi,
                val_total: val.sum(),
            };
            if improved {
                best = Some(self.checkpoint());
            }
            on_epoch(&record, self, improved)?;
            records.push(record);
            stopped_early = self.state.early.should_stop();
        }
        Ok(FitOutcome {
            records,
            best,
            stopped_early,
        })
    }
}
