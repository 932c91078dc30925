//! Bi-directional transformer encoder regressing three per-note values.
//!
//! Raw input tokens are scaled into `[0, 1]` and projected to the hidden
//! width; a stack of post-norm encoder layers follows; the pianist one-hot is
//! appended to every position; three linear heads with bounded activations
//! produce velocity, duration deviation and IOI.

use pianoform_numerics::{Float, NumericsError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ModelIO, INPUT_FEATURES};

/// Divisors applied to the six input columns.
pub const INPUT_SCALES: [f64; INPUT_FEATURES] = [89.0, 66.0, 4609.0, 518.0, 1537.0, 6144.0];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("pianist index {index} out of range for {count} pianists")]
    Pianist { index: usize, count: usize },
    #[error("window length {found}, model expects {expected}")]
    Window { expected: usize, found: usize },
    #[error("parameter {name}: {message}")]
    Params { name: String, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            other => Err(format!("unknown activation {other:?} (relu, gelu)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub num_pianists: usize,
    pub window: usize,
    pub input_features: usize,
    pub velocity_range: OutputRange,
    /// Symmetric around zero.
    pub dd_range: OutputRange,
    pub ioi_range: OutputRange,
    pub positional_encoding: bool,
    pub activation: Activation,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 128,
            ff_dim: 512,
            num_pianists: 6,
            window: 1000,
            input_features: INPUT_FEATURES,
            velocity_range: OutputRange { lo: 0.0, hi: 63.0 },
            dd_range: OutputRange {
                lo: -4608.0,
                hi: 4608.0,
            },
            ioi_range: OutputRange { lo: 0.0, hi: 6144.0 },
            positional_encoding: false,
            activation: Activation::Relu,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.ff_dim == 0 || self.window == 0 || self.num_pianists == 0 {
            return fail("num_layers, ff_dim, window and num_pianists must be positive".into());
        }
        if self.input_features != INPUT_FEATURES {
            return fail(format!("input_features must be {INPUT_FEATURES}"));
        }
        for (name, r) in [
            ("velocity", self.velocity_range),
            ("dd", self.dd_range),
            ("ioi", self.ioi_range),
        ] {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                return fail(format!("{name} range [{}, {}] not finite and ordered", r.lo, r.hi));
            }
        }
        if self.dd_range.lo != -self.dd_range.hi {
            return fail("dd range must be symmetric around zero".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
    One,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSlots {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlots {
    pub query: LinearSlots,
    pub key: LinearSlots,
    pub value: LinearSlots,
    pub attn_out: LinearSlots,
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub ff_in: LinearSlots,
    pub ff_out: LinearSlots,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
}

/// Where each parameter lives in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub input: LinearSlots,
    pub layers: Vec<LayerSlots>,
    /// Velocity, duration deviation, IOI.
    pub heads: [LinearSlots; 3],
}

impl Layout {
    /// Slot of the weight GradNorm treats as the shared layer.
    pub fn shared_weight(&self) -> usize {
        self.layers.last().expect("at least one layer").ff_out.weight
    }
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.0.push(ParamSpec { name, shape, init });
        self.0.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearSlots {
        LinearSlots {
            weight: self.push(
                format!("{name}.weight"),
                vec![fan_in, fan_out],
                Init::Xavier { fan_in, fan_out },
            ),
            bias: self.push(format!("{name}.bias"), vec![fan_out], Init::Zero),
        }
    }
}

fn specs(config: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let h = config.hidden_dim;
    let mut b = SpecBuilder(Vec::new());
    let input = b.linear("input", config.input_features, h);
    let layers = (0..config.num_layers)
        .map(|l| {
            let p = format!("layer{l}");
            LayerSlots {
                query: b.linear(&format!("{p}.attn.query"), h, h),
                key: b.linear(&format!("{p}.attn.key"), h, h),
                value: b.linear(&format!("{p}.attn.value"), h, h),
                attn_out: b.linear(&format!("{p}.attn.out"), h, h),
                norm1_gain: b.push(format!("{p}.norm1.gain"), vec![h], Init::One),
                norm1_bias: b.push(format!("{p}.norm1.bias"), vec![h], Init::Zero),
                ff_in: b.linear(&format!("{p}.ff.in"), h, config.ff_dim),
                ff_out: b.linear(&format!("{p}.ff.out"), config.ff_dim, h),
                norm2_gain: b.push(format!("{p}.norm2.gain"), vec![h], Init::One),
                norm2_bias: b.push(format!("{p}.norm2.bias"), vec![h], Init::Zero),
            }
        })
        .collect();
    let head_in = h + config.num_pianists;
    let heads = [
        b.linear("head.velocity", head_in, 1),
        b.linear("head.dd", head_in, 1),
        b.linear("head.ioi", head_in, 1),
    ];
    (b.0, Layout { input, layers, heads })
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Float> ModelParams<T> {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Scaled-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params<T: Float>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let (specs, _) = specs(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let len: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| T::cast_from(rng.gen_range(-bound..bound))).collect()
            }
            Init::Zero => vec![T::zero(); len],
            Init::One => vec![T::one(); len],
        };
        names.push(spec.name);
        tensors.push(Tensor::new(spec.shape, data)?);
    }
    Ok(ModelParams { names, tensors })
}

/// Parameter count implied by a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    specs(config)
        .0
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Scales raw token inputs into `[window, 6]` reals.
pub fn normalize_inputs<T: Float>(io: &ModelIO) -> Tensor<T> {
    let data = io
        .inputs
        .iter()
        .flat_map(|row| {
            row.iter()
                .zip(INPUT_SCALES)
                .map(|(&v, s)| T::cast_from(v as f64 / s))
        })
        .collect();
    Tensor::new([io.inputs.len(), INPUT_FEATURES], data).expect("rows have six columns")
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_encoding<T: Float>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data.push(T::cast_from(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new([len, dim], data).expect("table shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear<'t, T: Float> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Float> Linear<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.matmul(self.weight)?.add_row(self.bias)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention<'t, T: Float> {
    pub query: Linear<'t, T>,
    pub key: Linear<'t, T>,
    pub value: Linear<'t, T>,
    pub output: Linear<'t, T>,
}

/// Scaled dot-product attention over all positions whose `key_mask` entry is
/// set, split into `heads` equal column groups.
pub fn multi_head_self_attention<'t, T: Float>(
    x: Var<'t, T>,
    attn: &Attention<'t, T>,
    heads: usize,
    key_mask: &[bool],
) -> Result<Var<'t, T>> {
    let hidden = attn.query.weight.shape()[1];
    if heads == 0 || hidden % heads != 0 {
        return Err(ModelError::Config(format!(
            "hidden width {hidden} not divisible by {heads} heads"
        )));
    }
    let width = hidden / heads;
    let q = attn.query.apply(x)?;
    let k = attn.key.apply(x)?;
    let v = attn.value.apply(x)?;
    let scale = 1.0 / (width as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow_cols(h * width, width)?;
        let kh = k.narrow_cols(h * width, width)?;
        let vh = v.narrow_cols(h * width, width)?;
        let weights = qh.matmul_t(kh)?.scale(scale)?.masked_softmax(key_mask)?;
        outputs.push(weights.matmul(vh)?);
    }
    let joined = x.tape().concat_cols(&outputs)?;
    attn.output.apply(joined)
}

pub fn feed_forward<'t, T: Float>(
    x: Var<'t, T>,
    inner: &Linear<'t, T>,
    outer: &Linear<'t, T>,
    activation: Activation,
) -> Result<Var<'t, T>> {
    let h = inner.apply(x)?;
    let h = match activation {
        Activation::Relu => h.relu()?,
        Activation::Gelu => h.gelu()?,
    };
    outer.apply(h)
}

/// `LayerNorm(x + residual)` with a learned per-column gain and bias.
pub fn add_and_norm<'t, T: Float>(
    x: Var<'t, T>,
    residual: Var<'t, T>,
    gain: Var<'t, T>,
    bias: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    Ok(x.add(residual)?.layer_norm(eps)?.mul_row(gain)?.add_row(bias)?)
}

/// Per-position outputs, each `[window, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Predictions<'t, T: Float> {
    pub velocity: Var<'t, T>,
    pub dd: Var<'t, T>,
    pub ioi: Var<'t, T>,
}

impl<'t, T: Float> Predictions<'t, T> {
    pub fn as_array(&self) -> [Var<'t, T>; 3] {
        [self.velocity, self.dd, self.ioi]
    }
}

/// Appends the conditioning columns and applies the three bounded heads.
pub fn prediction_heads<'t, T: Float>(
    hidden: Var<'t, T>,
    conditioning: Var<'t, T>,
    heads: &[Linear<'t, T>; 3],
    config: &ModelConfig,
) -> Result<Predictions<'t, T>> {
    let joined = hidden.tape().concat_cols(&[hidden, conditioning])?;
    let v = config.velocity_range;
    let i = config.ioi_range;
    Ok(Predictions {
        velocity: heads[0].apply(joined)?.scaled_sigmoid(v.lo, v.hi)?,
        dd: heads[1].apply(joined)?.scaled_tanh(config.dd_range.hi)?,
        ioi: heads[2].apply(joined)?.scaled_sigmoid(i.lo, i.hi)?,
    })
}

/// Plain prediction vectors for the full window.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionValues {
    pub velocity: Vec<f64>,
    pub dd: Vec<f64>,
    pub ioi: Vec<f64>,
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound<'t, T: Float> {
    pub vars: Vec<Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    fn linear(&self, slots: LinearSlots) -> Linear<'t, T> {
        Linear {
            weight: self.vars[slots.weight],
            bias: self.vars[slots.bias],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: ModelParams<T>,
}

impl<T: Float> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = specs(&config);
        if specs.len() != params.tensors.len() || specs.len() != params.names.len() {
            return Err(ModelError::Params {
                name: "*".into(),
                message: format!("expected {} tensors, found {}", specs.len(), params.tensors.len()),
            });
        }
        for ((spec, name), tensor) in specs.iter().zip(&params.names).zip(&params.tensors) {
            if &spec.name != name || spec.shape != tensor.shape() {
                return Err(ModelError::Params {
                    name: name.clone(),
                    message: format!(
                        "expected {} with shape {:?}, found shape {:?}",
                        spec.name,
                        spec.shape,
                        tensor.shape()
                    ),
                });
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind_where(tape, |_| true)
    }

    /// Records parameters, trainable only where `trainable(slot)` holds.
    pub fn bind_where<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(usize) -> bool) -> Bound<'t, T> {
        let vars = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(slot, t)| tape.leaf(t.clone(), trainable(slot)))
            .collect();
        Bound { vars }
    }

    fn check_io(&self, io: &ModelIO, pianist: usize) -> Result<()> {
        if pianist >= self.config.num_pianists {
            return Err(ModelError::Pianist {
                index: pianist,
                count: self.config.num_pianists,
            });
        }
        if io.inputs.len() != self.config.window || io.mask.len() != self.config.window {
            return Err(ModelError::Window {
                expected: self.config.window,
                found: io.inputs.len(),
            });
        }
        Ok(())
    }

    /// Forward pass on a bound parameter set. Dropout is applied only when an
    /// RNG is supplied and the configured rate is positive.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, T>,
        io: &ModelIO,
        pianist: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Predictions<'t, T>> {
        self.check_io(io, pianist)?;
        let tape = bound.vars[0].tape();
        let cfg = &self.config;
        let n = cfg.window;
        let key_mask: Vec<bool> = io.mask.iter().map(|&m| m != 0).collect();

        let mut x = bound.linear(self.layout.input).apply(tape.constant(normalize_inputs(io)))?;
        if cfg.positional_encoding {
            x = x.add(tape.constant(sinusoidal_encoding(n, cfg.hidden_dim)))?;
        }
        let mut drop = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            match dropout.as_deref_mut() {
                Some(rng) if cfg.dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - cfg.dropout);
                    let shape = v.shape();
                    let len = shape.iter().product();
                    let mask = (0..len)
                        .map(|_| {
                            if rng.gen::<f64>() < cfg.dropout {
                                T::zero()
                            } else {
                                T::cast_from(keep)
                            }
                        })
                        .collect();
                    Ok(v.mul(tape.constant(Tensor::new(shape, mask)?))?)
                }
                _ => Ok(v),
            }
        };

        for slots in &self.layout.layers {
            let attn = Attention {
                query: bound.linear(slots.query),
                key: bound.linear(slots.key),
                value: bound.linear(slots.value),
                output: bound.linear(slots.attn_out),
            };
            let a = drop(multi_head_self_attention(x, &attn, cfg.num_heads, &key_mask)?)?;
            x = add_and_norm(
                x,
                a,
                bound.vars[slots.norm1_gain],
                bound.vars[slots.norm1_bias],
                cfg.layer_norm_eps,
            )?;
            let f = drop(feed_forward(
                x,
                &bound.linear(slots.ff_in),
                &bound.linear(slots.ff_out),
                cfg.activation,
            )?)?;
            x = add_and_norm(
                x,
                f,
                bound.vars[slots.norm2_gain],
                bound.vars[slots.norm2_bias],
                cfg.layer_norm_eps,
            )?;
        }

        let mut onehot = vec![T::zero(); n * cfg.num_pianists];
        for row in 0..n {
            onehot[row * cfg.num_pianists + pianist] = T::one();
        }
        let conditioning = tape.constant(Tensor::new([n, cfg.num_pianists], onehot)?);
        let heads = self.layout.heads.map(|s| bound.linear(s));
        prediction_heads(x, conditioning, &heads, cfg)
    }

    /// Inference without dropout, returning plain vectors.
    pub fn predict(&self, io: &ModelIO, pianist: usize) -> Result<PredictionValues> {
        let tape = Tape::new();
        let bound = self.bind_where(&tape, |_| false);
        let p = self.forward(&bound, io, pianist, None)?;
        Ok(PredictionValues {
            velocity: p.velocity.value().to_f64_vec(),
            dd: p.dd.value().to_f64_vec(),
            ioi: p.ioi.value().to_f64_vec(),
        })
    }
}
