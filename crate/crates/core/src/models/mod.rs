//! Autoencoder variants and the expression predictor built on a frozen
//! encoder.
//!
//! A [`ModelBundle`] is an ordered list of [`LayerSpec`]s plus the
//! parameters and batch-norm running statistics they own. Parameter slots are
//! derived from the layer list, so the list alone fully determines layout.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION, WEIGHTS_MAGIC};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Parameter, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ENCODER_CHANNELS: [usize; 3] = [32, 64, 128];
/// Rows per forward chunk for inference helpers.
const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Batchnorm {
        channels: usize,
    },
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    Sigmoid,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
    Head,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Decoder => "decoder",
            Stage::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub stage: Stage,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(stage: Stage, kind: LayerKind) -> Self {
        LayerSpec { stage, kind }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride, .. } => {
                in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0
            }
            LayerKind::Batchnorm { channels } => channels > 0,
            LayerKind::Maxpool { window, stride } => window > 0 && stride > 0,
            LayerKind::Upsample { factor } => factor > 0,
            LayerKind::Linear { in_features, out_features } => in_features > 0 && out_features > 0,
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("incomplete layer spec {self:?}")))
        }
    }

    /// `(name suffix, shape)` of each parameter owned by this layer.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerKind::Batchnorm { channels } => vec![("gamma", vec![channels]), ("beta", vec![channels])],
            LayerKind::Linear { in_features, out_features } => vec![
                ("weight", vec![in_features, out_features]),
                ("bias", vec![out_features]),
            ],
            _ => Vec::new(),
        }
    }

    fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            LayerKind::Batchnorm { channels } => {
                vec![("running_mean", vec![channels]), ("running_var", vec![channels])]
            }
            _ => Vec::new(),
        }
    }
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoencoderVariant {
    /// Convolution and pooling only.
    Ae1,
    /// Adds ReLU after each convolution.
    Ae2,
    /// Adds batch normalization and ReLU after each convolution.
    Ae3,
}

impl AutoencoderVariant {
    pub fn tag(self) -> &'static str {
        match self {
            AutoencoderVariant::Ae1 => "ae1",
            AutoencoderVariant::Ae2 => "ae2",
            AutoencoderVariant::Ae3 => "ae3",
        }
    }

    fn relu(self) -> bool {
        !matches!(self, AutoencoderVariant::Ae1)
    }

    fn batchnorm(self) -> bool {
        matches!(self, AutoencoderVariant::Ae3)
    }
}

impl std::str::FromStr for AutoencoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae1" => Ok(AutoencoderVariant::Ae1),
            "ae2" => Ok(AutoencoderVariant::Ae2),
            "ae3" => Ok(AutoencoderVariant::Ae3),
            other => Err(Error::InvalidArgument(format!("unknown autoencoder variant `{other}`"))),
        }
    }
}

/// Shape of the regression head appended to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Second, larger head configuration: one more conv block and twice the
    /// hidden width.
    pub extended: bool,
    pub unfreeze_encoder: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 1024,
            extended: false,
            unfreeze_encoder: false,
        }
    }
}

/// Normalization behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub variant_tag: String,
    /// Spatial extent of the square input tiles.
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Parameter>,
    pub buffers: Vec<Buffer>,
}

#[derive(Debug, Clone)]
struct Slots {
    params: Range<usize>,
    buffers: Range<usize>,
}

/// A recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    pub output: Var,
    /// Tape leaf of each parameter that requires a gradient.
    pub param_vars: Vec<(usize, Var)>,
    /// Batch moments from training-mode batch norms, keyed by layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape/product agree")
}

fn conv3(in_channels: usize, out_channels: usize) -> LayerKind {
    LayerKind::Conv { in_channels, out_channels, kernel: 3, stride: 1, padding: 1 }
}

impl ModelBundle {
    /// Builds a bundle from layer specs, initializing every parameter
    /// (He-uniform weights, zero biases, unit gamma) from `seed`.
    pub fn from_layers(variant_tag: impl Into<String>, input_size: usize, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            let prefix = format!("{}.{i}", layer.stage.as_str());
            let fan_in = match layer.kind {
                LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
                LayerKind::Linear { in_features, .. } => in_features,
                _ => 1,
            };
            for (name, shape) in layer.param_shapes() {
                let t = match name {
                    "weight" => he_uniform(&mut rng, &shape, fan_in),
                    "gamma" => Tensor::full(&shape, 1.0),
                    _ => Tensor::zeros(&shape),
                };
                params.push(Parameter::new(format!("{prefix}.{name}"), t));
            }
            for (name, shape) in layer.buffer_shapes() {
                let fill = if name == "running_var" { 1.0 } else { 0.0 };
                buffers.push(Buffer { name: format!("{prefix}.{name}"), tensor: Tensor::full(&shape, fill) });
            }
        }
        let bundle = ModelBundle { variant_tag: variant_tag.into(), input_size, layers, params, buffers };
        bundle.output_shape(&bundle.stages())?;
        Ok(bundle)
    }

    fn slots(&self) -> Vec<Slots> {
        let (mut p, mut b) = (0, 0);
        self.layers
            .iter()
            .map(|l| {
                let (np, nb) = (l.param_shapes().len(), l.buffer_shapes().len());
                let s = Slots { params: p..p + np, buffers: b..b + nb };
                p += np;
                b += nb;
                s
            })
            .collect()
    }

    /// Distinct stages in layer order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for l in &self.layers {
            if out.last() != Some(&l.stage) {
                out.push(l.stage);
            }
        }
        out
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.layers.iter().any(|l| l.stage == stage)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Indices of parameters belonging to `stage`.
    pub fn stage_params(&self, stage: Stage) -> Vec<usize> {
        self.slots()
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.stage == stage)
            .flat_map(|(s, _)| s.params.clone())
            .collect()
    }

    /// Per-sample output shape after running `stages` on a `[3, S, S]` tile.
    pub fn output_shape(&self, stages: &[Stage]) -> Result<Vec<usize>> {
        let mut shape = vec![3, self.input_size, self.input_size];
        for l in self.layers.iter().filter(|l| stages.contains(&l.stage)) {
            shape = match (&l.kind, shape.as_slice()) {
                (LayerKind::Conv { in_channels, out_channels, kernel, stride, padding }, &[c, h, w]) => {
                    if c != *in_channels || *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                        return Err(shape_err(format!("{l:?} cannot consume [{c}, {h}, {w}]")));
                    }
                    vec![*out_channels, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1]
                }
                (LayerKind::Batchnorm { channels }, &[c, h, w]) if c == *channels => vec![c, h, w],
                (LayerKind::Maxpool { window, stride }, &[c, h, w]) => {
                    let oh = crate::tensor::kernels::pool_extent(h, *window, *stride)?;
                    let ow = crate::tensor::kernels::pool_extent(w, *window, *stride)?;
                    vec![c, oh, ow]
                }
                (LayerKind::Upsample { factor }, &[c, h, w]) => vec![c, h * factor, w * factor],
                (LayerKind::Relu | LayerKind::Sigmoid, s) => s.to_vec(),
                (LayerKind::Flatten, s) => vec![s.iter().product()],
                (LayerKind::Linear { in_features, out_features }, &[d]) if d == *in_features => vec![*out_features],
                (k, s) => return Err(shape_err(format!("layer {k:?} cannot consume shape {s:?}"))),
            };
        }
        Ok(shape)
    }

    /// Runs the layers of `stages` on `input`, recording onto a fresh tape.
    /// Trainable parameters become differentiable leaves when `track_grads`.
    pub fn forward(
        &self,
        input: Tensor,
        stages: &[Stage],
        phase: impl Fn(Stage) -> Phase,
        track_grads: bool,
    ) -> Result<Forward> {
        let mut graph = Graph::new();
        let mut x = graph.leaf(input);
        let mut param_vars = Vec::new();
        let mut batch_stats = Vec::new();
        for ((i, layer), slots) in self.layers.iter().enumerate().zip(self.slots()) {
            if !stages.contains(&layer.stage) {
                continue;
            }
            let mut leaves = Vec::new();
            for pi in slots.params.clone() {
                let p = &self.params[pi];
                let mut t = p.tensor.clone();
                t.grad = None;
                t.requires_grad = track_grads && p.trainable;
                let v = graph.leaf(t);
                if track_grads && p.trainable {
                    param_vars.push((pi, v));
                }
                leaves.push(v);
            }
            x = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => graph.conv2d(x, leaves[0], leaves[1], stride, padding)?,
                LayerKind::Batchnorm { .. } => {
                    let mode = match phase(layer.stage) {
                        Phase::Train => BatchNormMode::Train { eps: BN_EPS },
                        Phase::Eval => BatchNormMode::Eval {
                            eps: BN_EPS,
                            mean: self.buffers[slots.buffers.start].tensor.data().to_vec(),
                            var: self.buffers[slots.buffers.start + 1].tensor.data().to_vec(),
                        },
                    };
                    let (y, stats) = graph.batch_norm2d(x, leaves[0], leaves[1], mode)?;
                    if let Some(s) = stats {
                        batch_stats.push((i, s));
                    }
                    y
                }
                LayerKind::Relu => graph.relu(x)?,
                LayerKind::Sigmoid => graph.sigmoid(x)?,
                LayerKind::Maxpool { window, stride } => graph.maxpool2d(x, window, stride)?,
                LayerKind::Upsample { factor } => graph.upsample_nearest2d(x, factor)?,
                LayerKind::Flatten => graph.flatten(x)?,
                LayerKind::Linear { .. } => graph.linear(x, leaves[0], leaves[1])?,
            };
        }
        Ok(Forward { graph, output: x, param_vars, batch_stats })
    }

    /// Folds observed batch moments into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let slots = self.slots();
        for (layer, s) in stats {
            let b = slots[*layer].buffers.start;
            let (head, tail) = self.buffers.split_at_mut(b + 1);
            s.update_running(head[b].tensor.data_mut(), tail[0].tensor.data_mut(), BN_MOMENTUM);
        }
    }

    fn check_tiles(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(shape_err(format!(
                "expected [N, 3, {s}, {s}] tiles, got {:?}",
                batch.shape(),
                s = self.input_size
            )));
        }
        Ok(())
    }

    /// Inference-mode pass through `stages`, in fixed-size row chunks.
    pub fn infer(&self, input: &Tensor, stages: &[Stage]) -> Result<Tensor> {
        let n = input.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = input.slice_batch(start, end)?;
            let fwd = self.forward(chunk, stages, |_| Phase::Eval, false)?;
            parts.push(fwd.graph.into_value(fwd.output));
            start = end;
        }
        Tensor::concat_batch(&parts)
    }

    /// Latent feature map `[N, 128, S/8, S/8]`.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        if !self.has_stage(Stage::Encoder) {
            return Err(Error::InvalidArgument(format!("`{}` has no encoder", self.variant_tag)));
        }
        self.check_tiles(batch)?;
        self.infer(batch, &[Stage::Encoder])
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if !self.has_stage(Stage::Decoder) {
            return Err(Error::InvalidArgument(format!("`{}` has no decoder", self.variant_tag)));
        }
        self.infer(latent, &[Stage::Decoder])
    }

    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(batch)?)
    }

    /// Expression predictions `[N, n_genes]` for `[N, 3, S, S]` tiles.
    pub fn predict_expression(&self, tiles: &Tensor) -> Result<Tensor> {
        if !self.has_stage(Stage::Head) {
            return Err(Error::InvalidArgument(format!("`{}` has no expression head", self.variant_tag)));
        }
        self.check_tiles(tiles)?;
        self.infer(tiles, &[Stage::Encoder, Stage::Head])
    }

    /// Width of the final head layer.
    pub fn n_outputs(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.kind {
            LayerKind::Linear { out_features, .. } if l.stage == Stage::Head => Some(out_features),
            _ => None,
        })
    }
}

/// Three conv blocks (32, 64, 128 channels) down, the mirror image up, and a
/// sigmoid on the reconstructed pixels.
pub fn build_autoencoder(variant: AutoencoderVariant, input_size: usize, seed: u64) -> Result<ModelBundle> {
    if input_size == 0 || input_size % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "autoencoder input size must be a positive multiple of 8, got {input_size}"
        )));
    }
    let mut layers = Vec::new();
    let block = |stage: Stage, layers: &mut Vec<LayerSpec>, cin: usize, cout: usize| {
        layers.push(LayerSpec::new(stage, conv3(cin, cout)));
        if variant.batchnorm() {
            layers.push(LayerSpec::new(stage, LayerKind::Batchnorm { channels: cout }));
        }
        if variant.relu() {
            layers.push(LayerSpec::new(stage, LayerKind::Relu));
        }
    };
    let mut cin = 3;
    for &cout in &ENCODER_CHANNELS {
        block(Stage::Encoder, &mut layers, cin, cout);
        layers.push(LayerSpec::new(Stage::Encoder, LayerKind::Maxpool { window: 2, stride: 2 }));
        cin = cout;
    }
    for &cout in &[64, 32] {
        layers.push(LayerSpec::new(Stage::Decoder, LayerKind::Upsample { factor: 2 }));
        block(Stage::Decoder, &mut layers, cin, cout);
        cin = cout;
    }
    layers.push(LayerSpec::new(Stage::Decoder, LayerKind::Upsample { factor: 2 }));
    layers.push(LayerSpec::new(Stage::Decoder, conv3(cin, 3)));
    layers.push(LayerSpec::new(Stage::Decoder, LayerKind::Sigmoid));
    ModelBundle::from_layers(variant.tag(), input_size, layers, seed)
}

/// Encoder of `autoencoder` followed by conv block(s) and two fully
/// connected layers ending in `n_genes` linear outputs. Encoder parameters
/// are copied bit-for-bit and frozen unless the head config unfreezes them.
pub fn build_histospace(autoencoder: &ModelBundle, n_genes: usize, head: &HeadConfig, seed: u64) -> Result<ModelBundle> {
    if n_genes == 0 || head.hidden == 0 {
        return Err(Error::InvalidArgument("n_genes and hidden width must be positive".into()));
    }
    let latent = autoencoder.output_shape(&[Stage::Encoder])?;
    let [c, h, w] = latent[..] else {
        return Err(shape_err(format!("encoder output {latent:?} is not a feature map")));
    };
    if c != ENCODER_CHANNELS[2] {
        return Err(shape_err(format!("encoder emits {c} channels, head expects {}", ENCODER_CHANNELS[2])));
    }
    let blocks = if head.extended { 2 } else { 1 };
    let mut head_layers = Vec::new();
    let (mut sh, mut sw) = (h, w);
    for _ in 0..blocks {
        if sh % 2 != 0 || sw % 2 != 0 {
            return Err(shape_err(format!("encoder output {h}x{w} cannot feed {blocks} pooled head block(s)")));
        }
        head_layers.push(LayerSpec::new(Stage::Head, conv3(c, c)));
        head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Batchnorm { channels: c }));
        head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Relu));
        head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Maxpool { window: 2, stride: 2 }));
        sh /= 2;
        sw /= 2;
    }
    let hidden = if head.extended { head.hidden * 2 } else { head.hidden };
    head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Flatten));
    head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Linear { in_features: c * sh * sw, out_features: hidden }));
    head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Relu));
    head_layers.push(LayerSpec::new(Stage::Head, LayerKind::Linear { in_features: hidden, out_features: n_genes }));

    let enc_layers: Vec<LayerSpec> = autoencoder.layers.iter().filter(|l| l.stage == Stage::Encoder).cloned().collect();
    let n_enc_buffers: usize = enc_layers.iter().map(|l| l.buffer_shapes().len()).sum();
    let mut layers = enc_layers;
    layers.extend(head_layers);
    // Initializes the head; the encoder slots are replaced by the trained values.
    let fresh = ModelBundle::from_layers("histospace", autoencoder.input_size, layers, seed)?;

    let enc_params = autoencoder.stage_params(Stage::Encoder);
    let mut params: Vec<Parameter> = enc_params
        .iter()
        .map(|&i| {
            let mut p = autoencoder.params[i].clone();
            p.tensor.grad = None;
            p.trainable = head.unfreeze_encoder;
            p
        })
        .collect();
    params.extend(fresh.params.into_iter().skip(enc_params.len()));
    let mut buffers: Vec<Buffer> = autoencoder.buffers.iter().take(n_enc_buffers).cloned().collect();
    buffers.extend(fresh.buffers.into_iter().skip(n_enc_buffers));

    Ok(ModelBundle {
        variant_tag: format!("histospace-{}", autoencoder.variant_tag),
        input_size: autoencoder.input_size,
        layers: fresh.layers,
        params,
        buffers,
    })
}
