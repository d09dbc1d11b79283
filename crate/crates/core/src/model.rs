//! Small fully-convolutional segmentation network with one score head per
//! increment.
//!
//! The backbone is a stack of 3×3 convolutions with ReLU; strided layers
//! reduce resolution and the concatenated head scores are bilinearly
//! upsampled back to the input size.
//!
//! Checkpoint layout: `b"EDLCKPT1"`, `u32` header length, JSON header, `u32`
//! parameter count, then per parameter a `u32` name length, the UTF-8 name
//! and a tensor blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edl::{self, EvidentialOutput, Rectifier};
use crate::error::{Error, Result};
use crate::protocol::ClassId;
use crate::tensor::{io as tensor_io, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Evidence heads only; background probability is the Dirichlet uncertainty.
    #[default]
    EvidentialImplicitBg,
    /// Baseline: learned background channel and a softmax over K + 1 scores.
    SoftmaxExplicitBg,
}

impl HeadMode {
    pub fn name(self) -> &'static str {
        match self {
            HeadMode::EvidentialImplicitBg => "evidential_implicit_bg",
            HeadMode::SoftmaxExplicitBg => "softmax_explicit_bg",
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "evidential_implicit_bg" | "evidential" | "implicit" => Ok(HeadMode::EvidentialImplicitBg),
            "softmax_explicit_bg" | "softmax" | "explicit" => Ok(HeadMode::SoftmaxExplicitBg),
            other => Err(Error::InvalidArgument(format!("unknown head mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub head_mode: HeadMode,
    pub rectifier: Rectifier,
    /// Standard deviation of freshly added head weights.
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let layer = |channels, stride| LayerSpec { channels, stride };
        Self {
            in_channels: 3,
            layers: vec![layer(12, 2), layer(16, 2), layer(24, 1), layer(24, 1)],
            head_mode: HeadMode::EvidentialImplicitBg,
            rectifier: Rectifier::ExpSigmoid,
            head_init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layers.is_empty() {
            return Err(Error::InvalidArgument("model needs input channels and layers".into()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.stride == 0) {
            return Err(Error::InvalidArgument("layer channels and strides must be positive".into()));
        }
        if !(self.head_init_std >= 0.0 && self.head_init_std.is_finite()) {
            return Err(Error::InvalidArgument("head_init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn feature_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    /// `O×I×KH×KW`.
    pub weight: Tensor,
    /// `1×O×1×1`.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: ModelConfig,
    seed: u64,
    backbone: Vec<ConvLayer>,
    heads: Vec<ConvLayer>,
}

/// Parameters of one forward pass, in [`SegModel::parameters`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Probabilities from either head mode; `evidential` is set in implicit mode.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N×(K+1)×H×W`, background at channel 0.
    pub full_prob: Var,
    pub evidential: Option<EvidentialOutput>,
}

impl SegModel {
    /// A fresh model whose first head covers `first_increment` classes.
    pub fn new(config: ModelConfig, seed: u64, first_increment: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed, 0);
        let mut backbone = Vec::with_capacity(config.layers.len());
        let mut in_ch = config.in_channels;
        for (i, spec) in config.layers.iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            backbone.push(ConvLayer {
                name: format!("backbone.{i}"),
                weight: normal_tensor(&mut rng, &[spec.channels, in_ch, 3, 3], (2.0 / fan_in).sqrt())?,
                bias: Tensor::zeros(&[1, spec.channels, 1, 1])?,
                stride: spec.stride,
                padding: 1,
            });
            in_ch = spec.channels;
        }
        let mut model = Self {
            config,
            seed,
            backbone,
            heads: Vec::new(),
        };
        model.expand_head(first_increment)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_mode(&self) -> HeadMode {
        self.config.head_mode
    }

    pub fn rectifier(&self) -> Rectifier {
        self.config.rectifier
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Class counts of the learned increments.
    pub fn increment_sizes(&self) -> Vec<usize> {
        let explicit = self.head_mode() == HeadMode::SoftmaxExplicitBg;
        self.heads
            .iter()
            .enumerate()
            .map(|(i, h)| h.out_channels() - usize::from(explicit && i == 0))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.increment_sizes().iter().sum()
    }

    /// Score channels; includes the background channel in explicit mode.
    pub fn score_channels(&self) -> usize {
        self.heads.iter().map(ConvLayer::out_channels).sum()
    }

    pub fn heads(&self) -> &[ConvLayer] {
        &self.heads
    }

    pub fn backbone(&self) -> &[ConvLayer] {
        &self.backbone
    }

    /// Appends a head with `new_classes` channels; existing parameters are untouched.
    pub fn expand_head(&mut self, new_classes: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::InvalidArgument("cannot add an empty increment".into()));
        }
        let index = self.heads.len();
        let explicit_bg = self.head_mode() == HeadMode::SoftmaxExplicitBg && index == 0;
        let channels = new_classes + usize::from(explicit_bg);
        let mut rng = init_rng(self.seed, 1 + index as u64);
        let feat = self.config.feature_channels();
        self.heads.push(ConvLayer {
            name: format!("head.{index}"),
            weight: normal_tensor(&mut rng, &[channels, feat, 1, 1], self.config.head_init_std)?,
            bias: Tensor::zeros(&[1, channels, 1, 1])?,
            stride: 1,
            padding: 0,
        });
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.backbone.iter().chain(&self.heads)
    }

    /// `(name, tensor)` pairs: every layer's weight then bias, backbone first.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .flat_map(|l| [(format!("{}.weight", l.name), &l.weight), (format!("{}.bias", l.name), &l.bias)])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers parameters on `tape`. `trainable_backbone = false` binds the
    /// backbone as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, trainable_backbone: bool) -> BoundParams {
        let n_backbone = self.backbone.len();
        let vars = self
            .layers()
            .enumerate()
            .flat_map(|(i, l)| {
                let grad = trainable && (i >= n_backbone || trainable_backbone);
                [(l.weight.clone(), grad), (l.bias.clone(), grad)]
            })
            .map(|(t, grad)| tape.leaf(t, grad))
            .collect();
        BoundParams { vars }
    }

    /// Raw scores `N×C×H×W` at the input resolution.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::Shape(format!("images must be N×C×H×W, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if params.vars.len() != 2 * (self.backbone.len() + self.heads.len()) {
            return Err(Error::InvalidArgument("bound parameters do not match model".into()));
        }
        let conv = |tape: &mut Tape, x: Var, layer: &ConvLayer, i: usize| -> Result<Var> {
            let y = tape.conv2d(x, params.vars[2 * i], layer.stride, layer.padding)?;
            tape.add(y, params.vars[2 * i + 1])
        };
        let mut x = images;
        for (i, layer) in self.backbone.iter().enumerate() {
            let y = conv(tape, x, layer, i)?;
            x = tape.relu(y)?;
        }
        let offset = self.backbone.len();
        let mut scores = Vec::with_capacity(self.heads.len());
        for (j, head) in self.heads.iter().enumerate() {
            scores.push(conv(tape, x, head, offset + j)?);
        }
        let scores = if scores.len() == 1 {
            scores[0]
        } else {
            tape.concat(&scores, 1)?
        };
        tape.upsample_bilinear(scores, h, w)
    }

    /// Class probabilities for this model's head mode.
    pub fn head_output(&self, tape: &mut Tape, scores: Var) -> Result<HeadOutput> {
        match self.head_mode() {
            HeadMode::EvidentialImplicitBg => {
                let out = edl::evidential_output(tape, scores, self.rectifier())?;
                Ok(HeadOutput {
                    full_prob: out.full_prob,
                    evidential: Some(out),
                })
            }
            HeadMode::SoftmaxExplicitBg => Ok(HeadOutput {
                full_prob: softmax_channels(tape, scores)?,
                evidential: None,
            }),
        }
    }

    /// Per-pixel argmax channel (0 = background), `N×H×W`. With
    /// `balancing`, evidence is rescaled per increment before normalising;
    /// it has no effect on the softmax baseline.
    pub fn predict(&self, images: &Tensor, balancing: bool) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false, false);
        let x = tape.constant(images.clone());
        let scores = self.forward(&mut tape, &params, x)?;
        let full_prob = match self.head_mode() {
            HeadMode::EvidentialImplicitBg => {
                let evidence = edl::rectify(&mut tape, scores, self.rectifier())?;
                let evidence = if balancing {
                    let balanced = edl::apply_increment_balancing(tape.value(evidence), &self.increment_sizes())?;
                    tape.constant(balanced)
                } else {
                    evidence
                };
                edl::evidential_from_evidence(&mut tape, evidence)?.full_prob
            }
            HeadMode::SoftmaxExplicitBg => softmax_channels(&mut tape, scores)?,
        };
        Ok(argmax_channels(tape.value(full_prob)))
    }

    pub fn snapshot(&self) -> Teacher {
        Teacher { model: self.clone() }
    }
}

/// Softmax over axis 1, shifted by the (detached) channel maximum.
pub fn softmax_channels(tape: &mut Tape, scores: Var) -> Result<Var> {
    let mut probe = Tape::new();
    let s = probe.constant(tape.value(scores).clone());
    let m = probe.max(s, Some(&[1]))?;
    let shift = tape.constant(probe.value(m).clone());
    let z = tape.sub(scores, shift)?;
    let e = tape.exp(z)?;
    let total = tape.sum(e, Some(&[1]))?;
    tape.div(e, total)
}

/// Argmax over axis 1 of an `N×C×H×W` tensor; ties pick the lowest channel.
pub fn argmax_channels(prob: &Tensor) -> Vec<u8> {
    let &[n, c, h, w] = prob.shape() else {
        panic!("argmax_channels expects a rank-4 tensor");
    };
    let plane = h * w;
    let data = prob.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if data[(b * c + ch) * plane + p] > data[(b * c + best) * plane + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Frozen copy of a model used for distillation.
#[derive(Clone, Debug)]
pub struct Teacher {
    model: SegModel,
}

impl Teacher {
    pub fn model(&self) -> &SegModel {
        &self.model
    }

    /// Forward pass with every parameter bound as a constant.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<(Var, HeadOutput)> {
        let params = self.model.bind(tape, false, false);
        let scores = self.model.forward(tape, &params, images)?;
        let out = self.model.head_output(tape, scores)?;
        Ok((scores, out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub head_mode: HeadMode,
    pub rectifier: Rectifier,
    pub increments: Vec<usize>,
    pub class_order: Vec<ClassId>,
    pub step_index: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EDLCKPT1";
const CHECKPOINT_FORMAT: &str = "edl-ciss-checkpoint-v1";

pub fn encode_checkpoint(model: &SegModel, class_order: &[ClassId], step_index: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        head_mode: model.head_mode(),
        rectifier: model.rectifier(),
        increments: model.increment_sizes(),
        class_order: class_order.to_vec(),
        step_index,
        seed: model.seed,
        model: model.config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        tensor_io::encode(tensor, &mut out);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &SegModel, class_order: &[ClassId], step_index: usize) -> Result<()> {
    let bytes = encode_checkpoint(model, class_order, step_index)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, SegModel)> {
    let fail = |reason: String| Error::format(path, reason);
    let mut cursor = bytes;
    if tensor_io::take(&mut cursor, 8).map_err(fail)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(tensor_io::take(&mut cursor, 4).map_err(fail)?.try_into().unwrap());
    let json = tensor_io::take(&mut cursor, len as usize).map_err(fail)?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unsupported format `{}`", header.format)));
    }
    if header.model.head_mode != header.head_mode || header.model.rectifier != header.rectifier {
        return Err(Error::format(path, "header head mode or rectifier inconsistent"));
    }
    let first = *header
        .increments
        .first()
        .ok_or_else(|| Error::format(path, "header lists no increments"))?;
    let mut model = SegModel::new(header.model.clone(), header.seed, first)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for &k in &header.increments[1..] {
        model.expand_head(k).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let count = u32::from_le_bytes(tensor_io::take(&mut cursor, 4).map_err(fail)?.try_into().unwrap());
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    if count as usize != names.len() {
        return Err(Error::format(path, format!("expected {} parameters, found {count}", names.len())));
    }
    let mut loaded = Vec::with_capacity(names.len());
    for expected in &names {
        let n = u32::from_le_bytes(tensor_io::take(&mut cursor, 4).map_err(fail)?.try_into().unwrap());
        let name = std::str::from_utf8(tensor_io::take(&mut cursor, n as usize).map_err(fail)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if name != expected {
            return Err(Error::format(path, format!("expected parameter `{expected}`, found `{name}`")));
        }
        loaded.push(tensor_io::decode(&mut cursor).map_err(fail)?);
    }
    if !cursor.is_empty() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    for (slot, tensor) in model.parameters_mut().into_iter().zip(loaded) {
        if slot.shape() != tensor.shape() {
            return Err(Error::format(path, "parameter shape mismatch"));
        }
        *slot = tensor;
    }
    Ok((header, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, SegModel)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
