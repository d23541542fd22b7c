//! Composite blocks (conv-BN-act, inverted residual, squeeze-excitation,
//! UNet decoder level) expressed as layer-graph fragments.

use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, Mode, Network, NodeId};
use super::weights::ParamStore;
use super::ModelError;
use crate::tensor::{ActivationKind, ConvParams, Scalar, Tensor};

/// Inverted residual (MBConv) block geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MBConvSpec {
    pub in_channels: usize,
    /// Width of the depthwise stage. Equal to `in_channels` when the
    /// expansion factor is 1, in which case the expansion conv is omitted.
    pub expanded_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_se: bool,
    pub activation: ActivationKind,
}

impl MBConvSpec {
    /// Block with an integer expansion factor `t` (expanded = `t * in_channels`).
    pub fn new(
        in_channels: usize,
        t: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        use_se: bool,
        activation: ActivationKind,
    ) -> Self {
        Self {
            in_channels,
            expanded_channels: t * in_channels,
            out_channels,
            kernel,
            stride,
            use_se,
            activation,
        }
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn has_expansion(&self) -> bool {
        self.expanded_channels != self.in_channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.kernel != 3 && self.kernel != 5 {
            return bad(format!("MBConv kernel must be 3 or 5, got {}", self.kernel));
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("MBConv stride must be 1 or 2, got {}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.expanded_channels == 0 {
            return bad("MBConv channel counts must be positive".into());
        }
        if self.use_se {
            SESpec::new(self.expanded_channels, SE_REDUCTION).validate()?;
        }
        Ok(())
    }
}

pub const SE_REDUCTION: usize = 4;

/// Squeeze-and-excitation geometry: `channels -> channels/reduction -> channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SESpec {
    pub channels: usize,
    pub reduction: usize,
}

impl SESpec {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Self { channels, reduction }
    }

    pub fn squeezed(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.reduction == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(ModelError::InvalidConfig(format!(
                "SE reduction {} must divide channel count {}",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Appends layers to a [`Network`] while tracking channel counts per node.
pub struct NetBuilder {
    net: Network,
    channels: Vec<usize>,
}

impl NetBuilder {
    pub fn new(input_channels: usize) -> Self {
        Self {
            net: Network::new(input_channels),
            channels: vec![input_channels],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.channels[node]
    }

    pub fn finish(self) -> Network {
        self.net
    }

    pub fn tap(&mut self, name: impl Into<String>, node: NodeId) {
        self.net.add_tap(name, node);
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<NodeId>, out_channels: usize) -> NodeId {
        let id = self.net.push(name, kind, inputs);
        self.channels.push(out_channels);
        id
    }

    pub fn conv(&mut self, name: &str, from: NodeId, out_channels: usize, params: ConvParams, bias: bool) -> NodeId {
        let in_channels = self.channels[from];
        self.push(
            name.to_string(),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                params,
                bias,
            },
            vec![from],
            out_channels,
        )
    }

    pub fn batchnorm(&mut self, name: &str, from: NodeId) -> NodeId {
        let channels = self.channels[from];
        self.push(name.to_string(), LayerKind::BatchNorm { channels }, vec![from], channels)
    }

    pub fn activation(&mut self, name: &str, from: NodeId, kind: ActivationKind) -> NodeId {
        if kind == ActivationKind::Identity {
            return from;
        }
        let c = self.channels[from];
        self.push(name.to_string(), LayerKind::Activation { kind }, vec![from], c)
    }

    /// conv (no bias) -> batch norm -> activation.
    pub fn conv_bn_act(
        &mut self,
        prefix: &str,
        from: NodeId,
        out_channels: usize,
        params: ConvParams,
        act: ActivationKind,
    ) -> NodeId {
        let x = self.conv(&join(prefix, "conv"), from, out_channels, params, false);
        let x = self.batchnorm(&join(prefix, "bn"), x);
        self.activation(&join(prefix, act.name()), x, act)
    }

    pub fn maxpool(&mut self, name: &str, from: NodeId) -> NodeId {
        let c = self.channels[from];
        self.push(name.to_string(), LayerKind::MaxPool2x2, vec![from], c)
    }

    pub fn transpose_conv(&mut self, name: &str, from: NodeId, out_channels: usize) -> NodeId {
        let in_channels = self.channels[from];
        self.push(
            name.to_string(),
            LayerKind::TransposeConv2x2 {
                in_channels,
                out_channels,
                bias: true,
            },
            vec![from],
            out_channels,
        )
    }

    pub fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels[a] + self.channels[b];
        self.push(name.to_string(), LayerKind::Concat, vec![a, b], c)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels[a];
        self.push(name.to_string(), LayerKind::Add, vec![a, b], c)
    }

    /// Squeeze-and-excitation: global average pool, 1x1 reduce + ReLU,
    /// 1x1 expand + hard-sigmoid gate, per-channel rescale.
    pub fn squeeze_excite(&mut self, prefix: &str, from: NodeId, spec: SESpec) -> NodeId {
        let c = self.channels[from];
        let pooled = self.push(join(prefix, "pool"), LayerKind::GlobalAvgPool, vec![from], c);
        let r = self.conv(&join(prefix, "reduce"), pooled, spec.squeezed(), ConvParams::pointwise(), true);
        let r = self.activation(&join(prefix, "relu"), r, ActivationKind::Relu);
        let e = self.conv(&join(prefix, "expand"), r, c, ConvParams::pointwise(), true);
        let gate = self.activation(&join(prefix, "gate"), e, ActivationKind::HardSigmoid);
        self.push(join(prefix, "scale"), LayerKind::ScaleChannels, vec![from, gate], c)
    }

    /// Inverted residual: expand 1x1 -> depthwise kxk -> optional SE ->
    /// linear 1x1 projection, plus the identity shortcut when shapes allow.
    pub fn mbconv(&mut self, prefix: &str, from: NodeId, spec: &MBConvSpec) -> NodeId {
        assert_eq!(self.channels[from], spec.in_channels, "{prefix}: MBConv input width");
        let act = spec.activation;
        let mut x = from;
        if spec.has_expansion() {
            x = self.conv(&join(prefix, "expand"), x, spec.expanded_channels, ConvParams::pointwise(), false);
            x = self.batchnorm(&join(prefix, "expand_bn"), x);
            x = self.activation(&join(prefix, "expand_act"), x, act);
        }
        let e = spec.expanded_channels;
        x = self.conv(&join(prefix, "dwconv"), x, e, ConvParams::same(spec.kernel, spec.stride, e), false);
        x = self.batchnorm(&join(prefix, "dw_bn"), x);
        x = self.activation(&join(prefix, "dw_act"), x, act);
        if spec.use_se {
            x = self.squeeze_excite(&join(prefix, "se"), x, SESpec::new(e, SE_REDUCTION));
        }
        x = self.conv(&join(prefix, "project"), x, spec.out_channels, ConvParams::pointwise(), false);
        x = self.batchnorm(&join(prefix, "project_bn"), x);
        if spec.has_residual() {
            x = self.add(&join(prefix, "residual"), x, from);
        }
        x
    }

    /// UNet decoder level: 2x2 transposed conv to `width`, concat with the
    /// skip (if any), then two conv3x3-BN-ReLU layers at `width`.
    pub fn decoder_level(&mut self, prefix: &str, from: NodeId, skip: Option<NodeId>, width: usize) -> NodeId {
        let mut x = self.transpose_conv(&join(prefix, "up"), from, width);
        if let Some(s) = skip {
            x = self.concat(&join(prefix, "concat"), x, s);
        }
        let c3 = ConvParams::same(3, 1, 1);
        x = self.conv_bn_act(&join(prefix, "block1"), x, width, c3, ActivationKind::Relu);
        self.conv_bn_act(&join(prefix, "block2"), x, width, c3, ActivationKind::Relu)
    }
}

/// Stand-alone network for a single MBConv block with unprefixed names
/// (`expand.weight`, `dwconv.weight`, ...).
pub fn mbconv_network(spec: &MBConvSpec) -> Result<Network, ModelError> {
    spec.validate()?;
    let mut b = NetBuilder::new(spec.in_channels);
    let x = b.input();
    b.mbconv("", x, spec);
    Ok(b.finish())
}

pub fn se_network(spec: &SESpec) -> Result<Network, ModelError> {
    spec.validate()?;
    let mut b = NetBuilder::new(spec.channels);
    let x = b.input();
    b.squeeze_excite("", x, *spec);
    Ok(b.finish())
}

/// Stand-alone decoder level with a single input. The skip feature map is
/// produced from that input by an extra transposed conv (`skip_source`) so
/// gradients reach both concat branches.
pub fn decoder_network(in_channels: usize, skip_channels: usize, width: usize) -> Network {
    let mut b = NetBuilder::new(in_channels);
    let x = b.input();
    let skip = (skip_channels > 0).then(|| b.transpose_conv("skip_source", x, skip_channels));
    b.decoder_level("", x, skip, width);
    b.finish()
}

/// Runs one MBConv block; `weights` uses the names of [`mbconv_network`].
pub fn mbconv_forward<T: Scalar>(
    spec: &MBConvSpec,
    input: &Tensor<T>,
    weights: &ParamStore<T>,
    mode: Mode,
) -> Result<Tensor<T>, ModelError> {
    let net = mbconv_network(spec)?;
    Ok(net.forward(weights, input, mode)?.into_output())
}

/// Runs one squeeze-excitation block; `weights` uses the names of [`se_network`].
pub fn se_forward<T: Scalar>(spec: &SESpec, input: &Tensor<T>, weights: &ParamStore<T>) -> Result<Tensor<T>, ModelError> {
    let net = se_network(spec)?;
    net.infer(weights, input)
}
