//! The three segmentation networks: a plain UNet, a UNet with a
//! MobileNetV2 encoder (UMBV2) and a UNet with a MobileNetV3-small encoder
//! (UMBV3). All share the same decoder shape: per level a 2x2 transposed
//! conv, concatenation with the encoder feature at that resolution and two
//! conv3x3-BN-ReLU layers, followed by a 1x1 classification head.

pub mod blocks;
pub mod graph;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use blocks::{decoder_network, mbconv_forward, mbconv_network, se_forward, se_network, MBConvSpec, NetBuilder, SESpec};
pub use graph::{Gradients, Layer, LayerKind, Mode, Network, NodeId, ParamRole, ParamSpec, Trace};
pub use weights::{decode_weights, encode_weights, init_params, load_weights, save_weights, ParamStore, WeightFileError};

use crate::tensor::{ActivationKind, ConvParams, Shape, Tensor, TensorError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input {h}x{w} is not divisible by {divisor}; both spatial dims must be multiples of {divisor}")]
    Divisibility { h: usize, w: usize, divisor: usize },
    #[error("model expects {expected} input channels, got {got}")]
    InputChannels { expected: usize, got: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("parameter {name} has shape {got}, expected {expected}")]
    ParamShape { name: String, expected: Shape, got: Shape },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    UnetBaseline,
    Umbv2,
    Umbv3Small,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::UnetBaseline => "unet",
            ModelKind::Umbv2 => "umbv2",
            ModelKind::Umbv3Small => "umbv3",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unet" | "unet_baseline" => Ok(ModelKind::UnetBaseline),
            "umbv2" => Ok(ModelKind::Umbv2),
            "umbv3" | "umbv3_small" => Ok(ModelKind::Umbv3Small),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown model {other:?} (expected unet, umbv2 or umbv3)"
            ))),
        }
    }
}

pub const DEFAULT_DECODER_WIDTHS: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    /// Baseline only: channels of the first encoder level.
    pub base_channels: usize,
    /// Baseline only: number of pooling levels.
    pub depth: usize,
    /// Decoder level widths, deepest first. Empty means the kind's default.
    pub decoder_widths: Vec<usize>,
    pub input_channels: usize,
    /// Truncates every encoder stage to at most this many blocks
    /// (MobileNet encoders only); used for small test models.
    pub max_blocks_per_stage: Option<usize>,
}

impl ModelConfig {
    pub fn unet(base_channels: usize, depth: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::UnetBaseline,
            num_classes,
            base_channels,
            depth,
            decoder_widths: Vec::new(),
            input_channels: 3,
            max_blocks_per_stage: None,
        }
    }

    pub fn umbv2(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Umbv2,
            ..Self::unet(64, 4, num_classes)
        }
    }

    pub fn umbv3_small(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Umbv3Small,
            ..Self::unet(64, 4, num_classes)
        }
    }

    pub fn for_kind(kind: ModelKind, num_classes: usize) -> Self {
        match kind {
            ModelKind::UnetBaseline => Self::unet(64, 4, num_classes),
            ModelKind::Umbv2 => Self::umbv2(num_classes),
            ModelKind::Umbv3Small => Self::umbv3_small(num_classes),
        }
    }

    /// Both input spatial dims must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        match self.kind {
            ModelKind::UnetBaseline => 1 << self.depth,
            ModelKind::Umbv2 | ModelKind::Umbv3Small => 32,
        }
    }

    /// Number of encoder features the decoder consumes (skips plus, for the
    /// MobileNet encoders, the stride-32 bottleneck).
    pub fn tap_count(&self) -> usize {
        match self.kind {
            ModelKind::UnetBaseline => self.depth,
            ModelKind::Umbv2 | ModelKind::Umbv3Small => 5,
        }
    }

    pub fn resolved_decoder_widths(&self) -> Vec<usize> {
        if !self.decoder_widths.is_empty() {
            return self.decoder_widths.clone();
        }
        match self.kind {
            ModelKind::UnetBaseline => (0..self.depth).rev().map(|i| self.base_channels << i).collect(),
            _ => DEFAULT_DECODER_WIDTHS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.kind == ModelKind::UnetBaseline {
            if self.base_channels == 0 {
                return bad("base_channels must be positive".into());
            }
            if self.depth == 0 || self.depth > 8 {
                return bad(format!("depth must be in 1..=8, got {}", self.depth));
            }
        }
        let widths = self.resolved_decoder_widths();
        if widths.len() != self.tap_count() {
            return bad(format!(
                "decoder_widths has {} entries but the {} encoder provides {} taps",
                widths.len(),
                self.kind,
                self.tap_count()
            ));
        }
        if widths.contains(&0) {
            return bad("decoder widths must be positive".into());
        }
        if self.max_blocks_per_stage == Some(0) {
            return bad("max_blocks_per_stage must be positive".into());
        }
        Ok(())
    }

    pub fn check_input_hw(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let d = self.required_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(ModelError::Divisibility { h, w, divisor: d });
        }
        Ok(())
    }
}

/// MobileNetV2 inverted-residual stages `(t, c, n, s)` after a 32-channel
/// stride-2 stem.
pub const MOBILENET_V2_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// Stage indices whose outputs feed the decoder (strides 2, 4, 8, 16, 32).
const MOBILENET_V2_TAP_STAGES: [usize; 5] = [0, 1, 2, 4, 6];

/// One MobileNetV3-small block: kernel, expanded width, output width, SE,
/// hard-swish (else ReLU), stride.
#[derive(Clone, Copy, Debug)]
pub struct V3Block {
    pub kernel: usize,
    pub expanded: usize,
    pub out: usize,
    pub se: bool,
    pub hswish: bool,
    pub stride: usize,
}

const fn v3(kernel: usize, expanded: usize, out: usize, se: bool, hswish: bool, stride: usize) -> V3Block {
    V3Block {
        kernel,
        expanded,
        out,
        se,
        hswish,
        stride,
    }
}

/// MobileNetV3-small blocks grouped by output stride (4, 8, 16, 32), after
/// a 16-channel stride-2 hard-swish stem. A 1x1 conv to 576 channels
/// follows the last stage.
pub const MOBILENET_V3_SMALL_STAGES: [&[V3Block]; 4] = [
    &[v3(3, 16, 16, true, false, 2)],
    &[v3(3, 72, 24, false, false, 2), v3(3, 88, 24, false, false, 1)],
    &[
        v3(5, 96, 40, true, true, 2),
        v3(5, 240, 40, true, true, 1),
        v3(5, 240, 40, true, true, 1),
        v3(5, 120, 48, true, true, 1),
        v3(5, 144, 48, true, true, 1),
    ],
    &[
        v3(5, 288, 96, true, true, 2),
        v3(5, 576, 96, true, true, 1),
        v3(5, 576, 96, true, true, 1),
    ],
];

pub const MOBILENET_V3_TAIL_CHANNELS: usize = 576;

/// Builds the layer graph for `config`.
pub fn build_network(config: &ModelConfig) -> Result<Network, ModelError> {
    config.validate()?;
    let mut b = NetBuilder::new(config.input_channels);
    // Encoder taps, shallowest first; the last one is the bottleneck.
    let (taps, bottleneck) = match config.kind {
        ModelKind::UnetBaseline => unet_encoder(&mut b, config),
        ModelKind::Umbv2 => mobilenet_v2_encoder(&mut b, config)?,
        ModelKind::Umbv3Small => mobilenet_v3_encoder(&mut b, config)?,
    };
    for (i, &t) in taps.iter().enumerate() {
        b.tap(format!("skip{i}"), t);
    }
    b.tap("bottleneck", bottleneck);

    let widths = config.resolved_decoder_widths();
    let mut x = bottleneck;
    let mut skips = taps.iter().rev().copied();
    for (level, &w) in widths.iter().enumerate() {
        let skip = skips.next();
        x = b.decoder_level(&format!("decoder.level{level}"), x, skip, w);
    }
    b.conv("head", x, config.num_classes, ConvParams::pointwise(), true);
    let net = b.finish();
    net.validate_names()?;
    Ok(net)
}

fn unet_encoder(b: &mut NetBuilder, config: &ModelConfig) -> (Vec<NodeId>, NodeId) {
    let c3 = ConvParams::same(3, 1, 1);
    let relu = ActivationKind::Relu;
    let mut x = b.input();
    let mut taps = Vec::new();
    for level in 0..config.depth {
        let c = config.base_channels << level;
        let p = format!("encoder.level{level}");
        x = b.conv_bn_act(&format!("{p}.block1"), x, c, c3, relu);
        x = b.conv_bn_act(&format!("{p}.block2"), x, c, c3, relu);
        taps.push(x);
        x = b.maxpool(&format!("{p}.pool"), x);
    }
    let c = config.base_channels << config.depth;
    x = b.conv_bn_act("bottleneck.block1", x, c, c3, relu);
    x = b.conv_bn_act("bottleneck.block2", x, c, c3, relu);
    (taps, x)
}

fn mobilenet_v2_encoder(b: &mut NetBuilder, config: &ModelConfig) -> Result<(Vec<NodeId>, NodeId), ModelError> {
    let act = ActivationKind::Relu6;
    let mut x = b.conv_bn_act("encoder.stem", b.input(), 32, ConvParams::same(3, 2, 1), act);
    let mut taps = Vec::new();
    for (si, &(t, c, n, s)) in MOBILENET_V2_STAGES.iter().enumerate() {
        let n = config.max_blocks_per_stage.map_or(n, |cap| n.min(cap));
        for bi in 0..n {
            let stride = if bi == 0 { s } else { 1 };
            let spec = MBConvSpec::new(b.channels(x), t, c, 3, stride, false, act);
            spec.validate()?;
            x = b.mbconv(&format!("encoder.stage{si}.block{bi}"), x, &spec);
        }
        if MOBILENET_V2_TAP_STAGES.contains(&si) {
            taps.push(x);
        }
    }
    let bottleneck = taps.pop().expect("stride-32 tap");
    Ok((taps, bottleneck))
}

fn mobilenet_v3_encoder(b: &mut NetBuilder, config: &ModelConfig) -> Result<(Vec<NodeId>, NodeId), ModelError> {
    let hs = ActivationKind::HardSwish;
    let mut x = b.conv_bn_act("encoder.stem", b.input(), 16, ConvParams::same(3, 2, 1), hs);
    let mut taps = vec![x];
    for (si, stage) in MOBILENET_V3_SMALL_STAGES.iter().enumerate() {
        let n = config.max_blocks_per_stage.map_or(stage.len(), |cap| stage.len().min(cap));
        for (bi, blk) in stage.iter().take(n).enumerate() {
            let spec = MBConvSpec {
                in_channels: b.channels(x),
                expanded_channels: blk.expanded,
                out_channels: blk.out,
                kernel: blk.kernel,
                stride: blk.stride,
                use_se: blk.se,
                activation: if blk.hswish { hs } else { ActivationKind::Relu },
            };
            spec.validate()?;
            x = b.mbconv(&format!("encoder.stage{}.block{bi}", si + 1), x, &spec);
        }
        if si < 3 {
            taps.push(x);
        }
    }
    let tail = b.conv_bn_act("encoder.tail", x, MOBILENET_V3_TAIL_CHANNELS, ConvParams::pointwise(), hs);
    Ok((taps, tail))
}

/// A network description with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Wires the graph; weights are zero and batch norm is the identity
    /// until [`Model::init_weights`] or [`Model::with_params`].
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        let network = build_network(&config)?;
        let params = ParamStore::for_network(&network);
        Ok(Self {
            config,
            network,
            params,
        })
    }

    pub fn init_weights(mut self, seed: u64) -> Self {
        self.params = init_params(&self.network, seed);
        self
    }

    pub fn with_params(mut self, params: ParamStore<f32>) -> Result<Self, ModelError> {
        params.check_against(&self.network)?;
        self.params = params;
        Ok(self)
    }

    pub fn check_input(&self, shape: Shape) -> Result<(), ModelError> {
        if shape.c != self.config.input_channels {
            return Err(ModelError::InputChannels {
                expected: self.config.input_channels,
                got: shape.c,
            });
        }
        self.config.check_input_hw(shape.h, shape.w)
    }

    /// Eval-mode logits `(N, K, H, W)`.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.check_input(input.shape())?;
        self.network.infer(&self.params, input)
    }

    pub fn learnable_params(&self) -> usize {
        self.network
            .param_specs()
            .iter()
            .filter(|s| s.role.learnable())
            .map(|s| s.shape.numel())
            .sum()
    }
}

pub fn build_model(config: ModelConfig) -> Result<Model, ModelError> {
    Model::build(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet_toy_shapes() {
        let m = Model::build(ModelConfig::unet(8, 2, 3)).unwrap();
        let shapes = m.network.infer_shapes(Shape::new(1, 3, 32, 32)).unwrap();
        let skip0 = m.network.tap("skip0").unwrap();
        let skip1 = m.network.tap("skip1").unwrap();
        let bottleneck = m.network.tap("bottleneck").unwrap();
        assert_eq!(shapes[skip0], Shape::new(1, 8, 32, 32));
        assert_eq!(shapes[skip1], Shape::new(1, 16, 16, 16));
        assert_eq!(shapes[bottleneck], Shape::new(1, 32, 8, 8));
        assert_eq!(*shapes.last().unwrap(), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn unet_decoder_concat_widths() {
        let m = Model::build(ModelConfig::unet(8, 2, 3)).unwrap();
        let shapes = m.network.infer_shapes(Shape::new(1, 3, 32, 32)).unwrap();
        for (i, layer) in m.network.layers().iter().enumerate() {
            if layer.kind == LayerKind::Concat {
                let up = shapes[layer.inputs[0]];
                let skip = shapes[layer.inputs[1]];
                assert_eq!((up.h, up.w), (skip.h, skip.w));
                assert_eq!(shapes[i + 1].c, up.c + skip.c);
            }
        }
    }

    #[test]
    fn umbv2_taps() {
        let m = Model::build(ModelConfig::umbv2(9)).unwrap();
        let shapes = m.network.infer_shapes(Shape::new(1, 3, 64, 64)).unwrap();
        let got: Vec<(usize, usize)> = ["skip0", "skip1", "skip2", "skip3", "bottleneck"]
            .iter()
            .map(|t| {
                let s = shapes[m.network.tap(t).unwrap()];
                (64 / s.h, s.c)
            })
            .collect();
        assert_eq!(got, vec![(2, 16), (4, 24), (8, 32), (16, 96), (32, 320)]);
    }

    #[test]
    fn umbv3_has_hswish_stem_and_se() {
        let m = Model::build(ModelConfig::umbv3_small(9)).unwrap();
        let layers = m.network.layers();
        assert!(matches!(
            layers[0].kind,
            LayerKind::Conv2d { params: ConvParams { stride: 2, .. }, .. }
        ));
        assert_eq!(layers[2].kind, LayerKind::Activation { kind: ActivationKind::HardSwish });
        assert!(layers.iter().any(|l| l.kind == LayerKind::ScaleChannels));
        assert!(layers
            .iter()
            .any(|l| l.name.ends_with("se.gate") && l.kind == LayerKind::Activation { kind: ActivationKind::HardSigmoid }));
    }

    #[test]
    fn config_errors() {
        let mut c = ModelConfig::umbv2(9);
        c.decoder_widths = vec![64, 32];
        assert!(matches!(Model::build(c), Err(ModelError::InvalidConfig(_))));
        let m = Model::build(ModelConfig::unet(4, 2, 3)).unwrap();
        let err = m.forward(&Tensor::zeros(Shape::new(1, 3, 18, 16))).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
        assert!(Model::build(ModelConfig::unet(4, 2, 1)).is_err());
    }

    #[test]
    fn param_names_are_hierarchical_and_unique() {
        let m = Model::build(ModelConfig::umbv2(9)).unwrap();
        assert!(m.params.contains("encoder.stage2.block1.dwconv.weight"));
        assert!(m.params.contains("head.bias"));
        m.network.validate_names().unwrap();
    }
}
