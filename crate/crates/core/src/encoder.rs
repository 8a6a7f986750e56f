//! The temporal convolutional encoder: a residual CNN with attention blocks
//! that turns a text-line image into a feature sequence, followed by a stack
//! of residual dilated causal convolution layers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block_on, hidden_width, AttnBlockVars, ChannelAttnVars, SpatialAttnVars};
use crate::ctc;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stage_widths: Vec<usize>,
    /// `(height, width)` stride of the first convolution of each stage.
    pub stage_strides: Vec<(usize, usize)>,
    pub use_ca: bool,
    pub use_sa: bool,
    /// Channel-attention bottleneck factor `r`.
    pub reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 100,
            stage_widths: vec![32, 64, 128, 256],
            stage_strides: vec![(2, 2), (2, 2), (2, 1), (2, 1)],
            use_ca: true,
            use_sa: true,
            reduction: 4,
        }
    }
}

fn strided_extent(extent: usize, stride: usize) -> usize {
    // 3x3 pad 1 and 1x1 pad 0 agree: floor((extent - 1) / stride) + 1
    (extent - 1) / stride + 1
}

impl BackboneConfig {
    /// `(height, width)` of the last stage's feature map.
    pub fn output_extent(&self) -> (usize, usize) {
        self.stage_strides.iter().fold((self.input_height, self.input_width), |(h, w), &(sh, sw)| {
            (strided_extent(h, sh), strided_extent(w, sw))
        })
    }

    /// Length of the feature sequence handed to the TCN.
    pub fn sequence_length(&self) -> usize {
        self.output_extent().1
    }

    pub fn output_channels(&self) -> usize {
        *self.stage_widths.last().expect("validated: at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_strides.len() {
            return Err(Error::InvalidArgument(format!(
                "need one stride per stage: {} widths, {} strides",
                self.stage_widths.len(),
                self.stage_strides.len()
            )));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::InvalidArgument("input extents must be positive".into()));
        }
        if self.stage_widths.contains(&0) || self.stage_strides.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::InvalidArgument("stage widths and strides must be positive".into()));
        }
        if self.use_ca {
            for &w in &self.stage_widths {
                hidden_width(w, self.reduction)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcnLayerConfig {
    pub kernel: usize,
    pub channels: usize,
    pub dilation: usize,
    pub dropout: f64,
}

impl TcnLayerConfig {
    /// The four-layer stack: kernel 3, 256 channels, dilations 1, 2, 4, 8, dropout 0.3.
    pub fn standard_stack() -> Vec<Self> {
        Self::stack(3, 256, &[1, 2, 4, 8], 0.3)
    }

    pub fn stack(kernel: usize, channels: usize, dilations: &[usize], dropout: f64) -> Vec<Self> {
        dilations.iter().map(|&dilation| Self { kernel, channels, dilation, dropout }).collect()
    }
}

/// Standard deviation rule for the Gaussian weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Every weight tensor uses `init_std`.
    Fixed,
    /// `sqrt(2 / fan_in)` per tensor, where `fan_in` is the product of all
    /// but the leading dimension.
    He,
    /// As [`Init::He`], but the last convolution of every residual branch
    /// starts at zero so each unit begins as its skip path.
    HeZeroResidual,
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Init::Fixed),
            "he" => Ok(Init::He),
            "he-zero-residual" => Ok(Init::HeZeroResidual),
            other => Err(Error::InvalidArgument(format!("unknown init {other:?} (fixed|he|he-zero-residual)"))),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Fixed => "fixed",
            Init::He => "he",
            Init::HeZeroResidual => "he-zero-residual",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tcn: Vec<TcnLayerConfig>,
    /// Alphabet size plus one for the blank.
    pub num_classes: usize,
    pub init: Init,
    /// Weight standard deviation under [`Init::Fixed`].
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            tcn: TcnLayerConfig::standard_stack(),
            num_classes: 11,
            init: Init::HeZeroResidual,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for layer in &self.tcn {
            if layer.kernel == 0 || layer.channels == 0 || layer.dilation == 0 {
                return Err(Error::InvalidArgument(format!("invalid TCN layer {layer:?}")));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", layer.dropout)));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least one symbol besides the blank".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::InvalidArgument(format!("init std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    /// Channel count of the encoder output.
    pub fn sequence_channels(&self) -> usize {
        self.tcn.last().map_or(self.backbone.output_channels(), |l| l.channels)
    }

    /// Every parameter name and shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let b = &self.backbone;
        let mut cin = 1;
        for (i, &w) in b.stage_widths.iter().enumerate() {
            let p = format!("backbone.stage{}", i + 1);
            out.push((format!("{p}.conv1.weight"), vec![w, cin, 3, 3]));
            out.push((format!("{p}.conv1.bias"), vec![w]));
            out.push((format!("{p}.conv2.weight"), vec![w, w, 3, 3]));
            out.push((format!("{p}.conv2.bias"), vec![w]));
            out.push((format!("{p}.skip.weight"), vec![w, cin, 1, 1]));
            out.push((format!("{p}.skip.bias"), vec![w]));
            if b.use_ca {
                let h = w / b.reduction.max(1);
                out.push((format!("{p}.ca.fc1.weight"), vec![h, w]));
                out.push((format!("{p}.ca.fc1.bias"), vec![h]));
                out.push((format!("{p}.ca.fc2.weight"), vec![w, h]));
                out.push((format!("{p}.ca.fc2.bias"), vec![w]));
            }
            if b.use_sa {
                out.push((format!("{p}.sa.conv.weight"), vec![1, 2, 3, 3]));
                out.push((format!("{p}.sa.conv.bias"), vec![1]));
            }
            cin = w;
        }
        for (i, layer) in self.tcn.iter().enumerate() {
            let p = format!("tcn.layer{}", i + 1);
            let c = layer.channels;
            out.push((format!("{p}.conv1.weight"), vec![c, cin, layer.kernel]));
            out.push((format!("{p}.conv1.bias"), vec![c]));
            out.push((format!("{p}.conv2.weight"), vec![c, c, layer.kernel]));
            out.push((format!("{p}.conv2.bias"), vec![c]));
            if cin != c {
                out.push((format!("{p}.skip.weight"), vec![c, cin, 1]));
                out.push((format!("{p}.skip.bias"), vec![c]));
            }
            cin = c;
        }
        out.push(("head.weight".into(), vec![self.num_classes, cin]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// How the encoder is being run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub training: bool,
    /// Dropout seed; ignored in eval mode.
    pub seed: u64,
}

impl ForwardMode {
    pub const EVAL: Self = Self { training: false, seed: 0 };

    pub fn train(seed: u64) -> Self {
        Self { training: true, seed }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Named parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Gaussian weights (mean 0, deviation per `config.init`) and zero biases. Each
    /// tensor draws from its own stream keyed by `(seed, name)`, so toggling
    /// attention leaves every other initial weight unchanged.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name_hash(&name)));
                    let std = match config.init {
                        Init::Fixed => config.init_std,
                        Init::HeZeroResidual if name.ends_with(".conv2.weight") => 0.0,
                        Init::He | Init::HeZeroResidual => {
                            (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt()
                        }
                    };
                    Tensor::randn(shape, std, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from loaded tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, mut params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = params.remove(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape { name, expected: shape, found: t.shape().to_vec() });
            }
            out.insert(name, t);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Malformed(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params: out })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars { vars: self.params.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Graph handles of a bound [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub vars: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    fn stage(&self, i: usize, cfg: &BackboneConfig) -> Result<StageVars> {
        let p = format!("backbone.stage{}", i + 1);
        let ca = if cfg.use_ca {
            Some(ChannelAttnVars {
                fc1_weight: self.get(&format!("{p}.ca.fc1.weight"))?,
                fc1_bias: self.get(&format!("{p}.ca.fc1.bias"))?,
                fc2_weight: self.get(&format!("{p}.ca.fc2.weight"))?,
                fc2_bias: self.get(&format!("{p}.ca.fc2.bias"))?,
            })
        } else {
            None
        };
        let sa = if cfg.use_sa {
            Some(SpatialAttnVars {
                conv_weight: self.get(&format!("{p}.sa.conv.weight"))?,
                conv_bias: self.get(&format!("{p}.sa.conv.bias"))?,
            })
        } else {
            None
        };
        Ok(StageVars {
            conv1: (self.get(&format!("{p}.conv1.weight"))?, self.get(&format!("{p}.conv1.bias"))?),
            conv2: (self.get(&format!("{p}.conv2.weight"))?, self.get(&format!("{p}.conv2.bias"))?),
            skip: (self.get(&format!("{p}.skip.weight"))?, self.get(&format!("{p}.skip.bias"))?),
            ca,
            sa,
        })
    }

    pub fn tcn_layer(&self, i: usize) -> Result<TcnLayerVars> {
        let p = format!("tcn.layer{}", i + 1);
        let skip = match (self.vars.get(&format!("{p}.skip.weight")), self.vars.get(&format!("{p}.skip.bias"))) {
            (Some(&w), Some(&b)) => Some((w, b)),
            _ => None,
        };
        Ok(TcnLayerVars {
            conv1: (self.get(&format!("{p}.conv1.weight"))?, self.get(&format!("{p}.conv1.bias"))?),
            conv2: (self.get(&format!("{p}.conv2.weight"))?, self.get(&format!("{p}.conv2.bias"))?),
            skip,
        })
    }
}

struct StageVars {
    conv1: (Var, Var),
    conv2: (Var, Var),
    skip: (Var, Var),
    ca: Option<ChannelAttnVars>,
    sa: Option<SpatialAttnVars>,
}

/// Graph handles of one TCN layer; `skip` is a 1x1 projection used only
/// when input and output widths differ.
#[derive(Clone, Copy, Debug)]
pub struct TcnLayerVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub skip: Option<(Var, Var)>,
}

/// Concrete weights of one TCN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnLayerParams<T> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
    pub skip: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> TcnLayerParams<T> {
    pub fn random<R: rand::Rng + ?Sized>(in_channels: usize, cfg: &TcnLayerConfig, std: f64, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            conv1_weight: Tensor::randn([c, in_channels, cfg.kernel], std, rng),
            conv1_bias: Tensor::randn([c], std, rng),
            conv2_weight: Tensor::randn([c, c, cfg.kernel], std, rng),
            conv2_bias: Tensor::randn([c], std, rng),
            skip: (in_channels != c).then(|| (Tensor::randn([c, in_channels, 1], std, rng), Tensor::randn([c], std, rng))),
        }
    }

    /// All weights one, all biases zero.
    pub fn ones(in_channels: usize, cfg: &TcnLayerConfig) -> Self {
        let c = cfg.channels;
        Self {
            conv1_weight: Tensor::ones([c, in_channels, cfg.kernel]),
            conv1_bias: Tensor::zeros([c]),
            conv2_weight: Tensor::ones([c, c, cfg.kernel]),
            conv2_bias: Tensor::zeros([c]),
            skip: (in_channels != c).then(|| (Tensor::ones([c, in_channels, 1]), Tensor::zeros([c]))),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> TcnLayerVars {
        TcnLayerVars {
            conv1: (g.param(self.conv1_weight.clone()), g.param(self.conv1_bias.clone())),
            conv2: (g.param(self.conv2_weight.clone()), g.param(self.conv2_bias.clone())),
            skip: self.skip.as_ref().map(|(w, b)| (g.param(w.clone()), g.param(b.clone()))),
        }
    }
}

/// Nonlinearity inside the TCN branch. `Identity` is the linear probe mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Records one residual TCN layer:
/// `act(x_skip + drop(act(conv_d(drop(act(conv_d(x)))))))`.
pub fn tcn_layer_on<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &TcnLayerVars,
    cfg: &TcnLayerConfig,
    activation: Activation,
    mode: ForwardMode,
) -> Result<Var> {
    let h = g.conv1d_causal(x, vars.conv1.0, vars.conv1.1, cfg.dilation)?;
    let h = activation.apply(g, h)?;
    let h = g.dropout(h, cfg.dropout, mode.training, derive_seed(mode.seed, 1))?;
    let h = g.conv1d_causal(h, vars.conv2.0, vars.conv2.1, cfg.dilation)?;
    let h = activation.apply(g, h)?;
    let h = g.dropout(h, cfg.dropout, mode.training, derive_seed(mode.seed, 2))?;
    let skip = match vars.skip {
        Some((w, b)) => g.conv1d_causal(x, w, b, 1)?,
        None => x,
    };
    let sum = g.add(skip, h)?;
    activation.apply(g, sum)
}

/// One residual TCN layer on concrete tensors.
pub fn tcn_layer<T: Scalar>(
    x: &Tensor<T>,
    cfg: &TcnLayerConfig,
    params: &TcnLayerParams<T>,
    training: bool,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.bind(&mut g);
    let out = tcn_layer_on(&mut g, xv, &vars, cfg, Activation::Relu, ForwardMode { training, seed })?;
    Ok(g.value(out).clone())
}

/// Records the backbone: `[N, 1, H, W]` images to a `[N, C, T]` sequence.
pub fn extract_features_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    cfg: &BackboneConfig,
    images: Var,
) -> Result<Var> {
    Ok(backbone_on(g, vars, cfg, images)?.0)
}

/// The backbone sequence plus the attention block of every stage.
fn backbone_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    cfg: &BackboneConfig,
    images: Var,
) -> Result<(Var, Vec<AttnBlockVars>)> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.input_height || s[3] != cfg.input_width {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), 1, cfg.input_height, cfg.input_width],
        });
    }
    let mut x = images;
    let mut blocks = Vec::with_capacity(cfg.stage_strides.len());
    for (i, &stride) in cfg.stage_strides.iter().enumerate() {
        let st = vars.stage(i, cfg)?;
        let h = g.conv2d(x, st.conv1.0, st.conv1.1, stride, (1, 1))?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, st.conv2.0, st.conv2.1, (1, 1), (1, 1))?;
        let skip = g.conv2d(x, st.skip.0, st.skip.1, stride, (0, 0))?;
        let sum = g.add(skip, h)?;
        let out = g.relu(sum)?;
        let block = attention_block_on(g, out, st.ca.as_ref(), st.sa.as_ref())?;
        x = block.f_prime;
        blocks.push(block);
    }
    Ok((g.height_mean(x)?, blocks))
}

/// Attention maps of one backbone stage; `None` where that attention is off.
#[derive(Clone, Debug, PartialEq)]
pub struct StageAttention<T> {
    /// `[N, C, 1, 1]`
    pub channel: Option<Tensor<T>>,
    /// `[N, 1, H, W]` at the stage's resolution.
    pub spatial: Option<Tensor<T>>,
}

/// Runs the backbone and returns every stage's attention maps.
pub fn stage_attention<T: Scalar>(images: &Tensor<T>, model: &Model<T>) -> Result<Vec<StageAttention<T>>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.constant(images.clone());
    let (_, blocks) = backbone_on(&mut g, &vars, &model.config.backbone, x)?;
    Ok(blocks
        .iter()
        .map(|b| StageAttention {
            channel: b.attn_c.map(|v| g.value(v).clone()),
            spatial: b.attn_s.map(|v| g.value(v).clone()),
        })
        .collect())
}

/// Graph handles of an encoder run.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Backbone output, the TCN input.
    pub features: Var,
    /// Output of each TCN layer; the last one is the encoding.
    pub per_layer: Vec<Var>,
    pub seq: Var,
}

/// Records the full encoder.
pub fn encode_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    images: Var,
    mode: ForwardMode,
) -> Result<EncoderVars> {
    let features = extract_features_on(g, vars, &config.backbone, images)?;
    let per_layer = tcn_stack_on(g, vars, config, features, mode)?;
    let seq = per_layer.last().copied().unwrap_or(features);
    Ok(EncoderVars { features, per_layer, seq })
}

/// Records the TCN stack on an existing sequence.
pub fn tcn_stack_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    seq: Var,
    mode: ForwardMode,
) -> Result<Vec<Var>> {
    let mut x = seq;
    let mut per_layer = Vec::with_capacity(config.tcn.len());
    for (i, layer) in config.tcn.iter().enumerate() {
        let lv = vars.tcn_layer(i)?;
        let layer_mode = ForwardMode { training: mode.training, seed: derive_seed(mode.seed, 100 + i as u64) };
        x = tcn_layer_on(g, x, &lv, layer, Activation::Relu, layer_mode)?;
        per_layer.push(x);
    }
    Ok(per_layer)
}

/// Records encoder plus projection head: `[N, T, num_classes]` logits.
pub fn logits_on<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    images: Var,
    mode: ForwardMode,
) -> Result<Var> {
    let enc = encode_on(g, vars, config, images, mode)?;
    ctc::project_logits_on(g, enc.seq, vars.get("head.weight")?, vars.get("head.bias")?)
}

/// Concrete encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub seq: Tensor<T>,
    pub per_layer: Vec<Tensor<T>>,
}

/// Backbone only, on concrete tensors.
pub fn extract_features<T: Scalar>(images: &Tensor<T>, model: &Model<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.constant(images.clone());
    let out = extract_features_on(&mut g, &vars, &model.config.backbone, x)?;
    Ok(g.value(out).clone())
}

/// Full encoder on concrete tensors.
pub fn encode<T: Scalar>(images: &Tensor<T>, model: &Model<T>, mode: ForwardMode) -> Result<EncoderOutput<T>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.constant(images.clone());
    let enc = encode_on(&mut g, &vars, &model.config, x, mode)?;
    Ok(EncoderOutput {
        seq: g.value(enc.seq).clone(),
        per_layer: enc.per_layer.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Span of input time steps, counted back from the last output step, that
/// can influence that step in a TCN stack. Measured by impulse perturbation of a linear probe (identity
/// activations, no dropout, unit weights, zero biases).
pub fn receptive_field_probe(layers: &[TcnLayerConfig]) -> Result<usize> {
    let probe: Vec<TcnLayerConfig> =
        layers.iter().map(|l| TcnLayerConfig { channels: 1, dropout: 0.0, ..l.clone() }).collect();
    let span: usize = probe.iter().map(|l| 2 * (l.kernel - 1) * l.dilation).sum();
    let len = span + 16;
    let params: Vec<TcnLayerParams<f64>> = probe.iter().map(|l| TcnLayerParams::ones(1, l)).collect();
    let run = |input: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let mut x = g.constant(input);
        for (cfg, p) in probe.iter().zip(&params) {
            let vars = p.bind(&mut g);
            x = tcn_layer_on(&mut g, x, &vars, cfg, Activation::Identity, ForwardMode::EVAL)?;
        }
        Ok(g.value(x).data()[len - 1])
    };
    let base = run(Tensor::zeros([1, 1, len]))?;
    // dilated taps skip positions, so measure the span to the earliest input
    // that moves the last output
    for tau in 0..len {
        let mut input = Tensor::zeros([1, 1, len]);
        input.data_mut()[tau] = 1.0;
        if run(input)? != base {
            return Ok(len - tau);
        }
    }
    Ok(0)
}

/// [`receptive_field_probe`] for every prefix `layers[..k]`, `k = 1..=len`.
pub fn receptive_field_by_prefix(layers: &[TcnLayerConfig]) -> Result<Vec<usize>> {
    (1..=layers.len()).map(|k| receptive_field_probe(&layers[..k])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_height: 8,
                input_width: 12,
                stage_widths: vec![4, 8],
                stage_strides: vec![(2, 2), (2, 1)],
                use_ca: true,
                use_sa: true,
                reduction: 2,
            },
            tcn: TcnLayerConfig::stack(3, 8, &[1, 2], 0.3),
            num_classes: 5,
            init: Init::Fixed,
            init_std: 0.3,
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.backbone.output_extent(), (2, 25));
        assert_eq!(cfg.backbone.sequence_length(), 25);
        assert_eq!(cfg.sequence_channels(), 256);
        let dil: Vec<usize> = cfg.tcn.iter().map(|l| l.dilation).collect();
        assert_eq!(dil, vec![1, 2, 4, 8]);
        assert!(cfg.tcn.iter().all(|l| l.kernel == 3 && l.channels == 256 && l.dropout == 0.3));
    }

    #[test]
    fn init_rules() {
        let rms = |t: &Tensor<f64>| (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        let fixed = Model::<f64>::init(small_config(), 1).unwrap();
        let w = fixed.param("tcn.layer1.conv1.weight").unwrap();
        assert!((rms(w) - 0.3).abs() < 0.05);

        let he = Model::<f64>::init(ModelConfig { init: Init::He, ..small_config() }, 1).unwrap();
        let zr = Model::<f64>::init(ModelConfig { init: Init::HeZeroResidual, ..small_config() }, 1).unwrap();
        // fan-in of a [8, 8, 3] kernel is 24
        let w = he.param("tcn.layer1.conv2.weight").unwrap();
        assert!((rms(w) - (2.0f64 / 24.0).sqrt()).abs() < 0.05);
        for (name, t) in &zr.params {
            if name.ends_with(".conv2.weight") || name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert_eq!(t, he.param(name).unwrap(), "{name}");
            }
        }
        assert_eq!("he-zero-residual".parse::<Init>().unwrap(), Init::HeZeroResidual);
        assert_eq!(Init::HeZeroResidual.to_string(), "he-zero-residual");
        assert!("xavier".parse::<Init>().is_err());
    }

    #[test]
    fn encode_preserves_time_and_shape() {
        let model = Model::<f64>::init(small_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([2, 1, 8, 12], -1.0, 1.0, &mut rng);
        let out = encode(&x, &model, ForwardMode::EVAL).unwrap();
        assert_eq!(out.seq.shape(), &[2, 8, 6]);
        assert!(out.per_layer.iter().all(|t| t.shape() == [2, 8, 6]));
        assert_eq!(encode(&x, &model, ForwardMode::EVAL).unwrap(), out);
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let model = Model::<f64>::init(small_config(), 1).unwrap();
        let x = Tensor::zeros([1, 1, 8, 13]);
        assert!(matches!(extract_features(&x, &model), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_image_gives_zero_sequence() {
        let model = Model::<f64>::init(small_config(), 3).unwrap();
        let out = extract_features(&Tensor::zeros([1, 1, 8, 12]), &model).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabled_attention_is_bypassed() {
        let mut with = small_config();
        with.backbone.use_ca = true;
        with.backbone.use_sa = true;
        let mut without = with.clone();
        without.backbone.use_ca = false;
        without.backbone.use_sa = false;
        let full = Model::<f64>::init(with, 4).unwrap();
        let plain = Model::<f64>::init(without.clone(), 4).unwrap();
        // Same non-attention weights, attention entries simply absent.
        for (k, v) in &plain.params {
            assert_eq!(full.params.get(k), Some(v));
        }
        // A model carrying attention weights but with toggles off ignores them.
        let toggled = Model { config: without, params: full.params.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([1, 1, 8, 12], -1.0, 1.0, &mut rng);
        assert_eq!(extract_features(&x, &toggled).unwrap(), extract_features(&x, &plain).unwrap());
    }

    #[test]
    fn zero_branch_layer_is_relu() {
        let cfg = TcnLayerConfig { kernel: 3, channels: 3, dilation: 2, dropout: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = TcnLayerParams::<f64>::random(3, &cfg, 1.0, &mut rng);
        p.conv2_weight = Tensor::zeros([3, 3, 3]);
        p.conv2_bias = Tensor::zeros([3]);
        let x = Tensor::randn([2, 3, 10], 1.0, &mut rng);
        assert_eq!(tcn_layer(&x, &cfg, &p, false, 0).unwrap(), crate::ops::relu(&x));
        // Eval mode is deterministic regardless of seed.
        let y1 = tcn_layer(&x, &cfg, &TcnLayerParams::random(3, &cfg, 1.0, &mut rng), false, 1).unwrap();
        assert_eq!(y1.shape(), x.shape());
    }

    #[test]
    fn dropout_only_acts_in_training() {
        let cfg = TcnLayerConfig { kernel: 3, channels: 4, dilation: 1, dropout: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = TcnLayerParams::<f64>::random(4, &cfg, 1.0, &mut rng);
        let x = Tensor::randn([1, 4, 12], 1.0, &mut rng);
        assert_eq!(tcn_layer(&x, &cfg, &p, false, 1).unwrap(), tcn_layer(&x, &cfg, &p, false, 2).unwrap());
        assert_eq!(tcn_layer(&x, &cfg, &p, true, 1).unwrap(), tcn_layer(&x, &cfg, &p, true, 1).unwrap());
        assert_ne!(tcn_layer(&x, &cfg, &p, true, 1).unwrap(), tcn_layer(&x, &cfg, &p, true, 2).unwrap());
    }

    #[test]
    fn impulse_reach_of_one_layer_with_dilation_eight() {
        let cfg = TcnLayerConfig { kernel: 3, channels: 1, dilation: 8, dropout: 0.0 };
        let p = TcnLayerParams::<f64>::ones(1, &cfg);
        let mut x = Tensor::zeros([1, 1, 64]);
        x.data_mut()[5] = 1.0;
        let y = tcn_layer(&x, &cfg, &p, false, 0).unwrap();
        let last = (0..64).filter(|&t| y.data()[t] != 0.0).max().unwrap();
        assert_eq!(last - 5, 32);
    }

    #[test]
    fn receptive_field_values() {
        let one = |d| vec![TcnLayerConfig { kernel: 3, channels: 256, dilation: d, dropout: 0.3 }];
        assert_eq!(receptive_field_probe(&one(1)).unwrap(), 5);
        assert_eq!(receptive_field_probe(&one(2)).unwrap(), 9);
        assert_eq!(receptive_field_probe(&[]).unwrap(), 1);
        assert_eq!(receptive_field_by_prefix(&TcnLayerConfig::standard_stack()).unwrap(), vec![5, 13, 29, 61]);
    }

    #[test]
    fn from_params_checks_names_and_shapes() {
        let model = Model::<f32>::init(small_config(), 9).unwrap();
        let mut params = model.params.clone();
        assert!(Model::from_params(small_config(), params.clone()).is_ok());
        params.insert("head.bias".into(), Tensor::zeros([4]));
        assert!(matches!(Model::from_params(small_config(), params.clone()), Err(Error::ParameterShape { .. })));
        params.remove("head.bias");
        assert!(matches!(Model::from_params(small_config(), params), Err(Error::MissingParameter(_))));
    }
}
