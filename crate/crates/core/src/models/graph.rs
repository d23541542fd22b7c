//! Layer graphs: an ordered list of primitive layers whose inputs refer to
//! earlier nodes. Node 0 is the network input and layer `i` produces node
//! `i + 1`, so skip connections are plain edges to older nodes.
//!
//! The same description drives execution, backpropagation and the
//! analytical profiler.

use std::collections::BTreeMap;

use serde::Serialize;

use super::weights::ParamStore;
use super::ModelError;
use crate::tensor::grad::{
    activation_vjp, batchnorm2d_vjp, concat_channels_vjp, conv2d_vjp, global_avg_pool_vjp,
    maxpool2x2_vjp, scale_channels_vjp, transpose_conv2x2_vjp,
};
use crate::tensor::{
    self, ActivationKind, BatchNormParams, BatchNormSaved, ConvParams, Scalar, Shape, Tensor, BN_EPS,
};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        params: ConvParams,
        bias: bool,
    },
    TransposeConv2x2 {
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Activation {
        kind: ActivationKind,
    },
    MaxPool2x2,
    GlobalAvgPool,
    Concat,
    Add,
    ScaleChannels,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { params, in_channels, .. } => {
                if params.groups > 1 && params.groups == *in_channels {
                    "dwconv"
                } else {
                    "conv"
                }
            }
            LayerKind::TransposeConv2x2 { .. } => "tconv2x2",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Activation { kind } => kind.name(),
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::ScaleChannels => "scale",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Concat | LayerKind::Add | LayerKind::ScaleChannels => 2,
            _ => 1,
        }
    }

    pub fn is_convolution(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::TransposeConv2x2 { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn learnable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub role: ParamRole,
    /// Inputs feeding one output unit; drives He initialization.
    pub fan_in: usize,
}

pub fn param_name(layer: &str, role: ParamRole) -> String {
    format!("{layer}.{}", role.suffix())
}

/// Parameters owned by a single layer, in a fixed order.
pub fn layer_param_specs(layer: &Layer) -> Vec<ParamSpec> {
    let spec = |role, shape, fan_in| ParamSpec {
        name: param_name(&layer.name, role),
        shape,
        role,
        fan_in,
    };
    match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            params,
            bias,
        } => {
            let cin_g = in_channels / params.groups;
            let fan_in = cin_g * params.kernel.0 * params.kernel.1;
            let mut v = vec![spec(
                ParamRole::Weight,
                Shape::new(*out_channels, cin_g, params.kernel.0, params.kernel.1),
                fan_in,
            )];
            if *bias {
                v.push(spec(ParamRole::Bias, Shape::vector(*out_channels), fan_in));
            }
            v
        }
        LayerKind::TransposeConv2x2 {
            in_channels,
            out_channels,
            bias,
        } => {
            let mut v = vec![spec(
                ParamRole::Weight,
                Shape::new(*in_channels, *out_channels, 2, 2),
                *in_channels,
            )];
            if *bias {
                v.push(spec(ParamRole::Bias, Shape::vector(*out_channels), *in_channels));
            }
            v
        }
        LayerKind::BatchNorm { channels } => [
            ParamRole::Gamma,
            ParamRole::Beta,
            ParamRole::RunningMean,
            ParamRole::RunningVar,
        ]
        .into_iter()
        .map(|r| spec(r, Shape::vector(*channels), 1))
        .collect(),
        _ => Vec::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; activations kept for backward.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Per-layer values a backward pass needs beyond the node activations.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    MaxPool(Vec<usize>),
    BatchNorm(BatchNormSaved<T>),
}

/// Every node value of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    values: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    mode: Mode,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("trace holds the input node")
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node]
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.pop().expect("trace holds the input node")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Cotangent of every learnable parameter (zero when unreached).
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Network {
    input_channels: usize,
    layers: Vec<Layer>,
    /// Named feature maps (e.g. encoder skip taps) for inspection.
    taps: Vec<(String, NodeId)>,
}

impl Network {
    pub fn new(input_channels: usize) -> Self {
        Self {
            input_channels,
            layers: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output(&self) -> NodeId {
        self.layers.len()
    }

    pub fn taps(&self) -> &[(String, NodeId)] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub(crate) fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        assert_eq!(inputs.len(), kind.arity(), "layer {name}: wrong input count");
        assert!(
            inputs.iter().all(|&i| i <= self.layers.len()),
            "layer {name}: inputs must precede it"
        );
        self.layers.push(Layer { name, kind, inputs });
        self.layers.len()
    }

    pub(crate) fn add_tap(&mut self, name: impl Into<String>, node: NodeId) {
        self.taps.push((name.into(), node));
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(layer_param_specs).collect()
    }

    /// Checks uniqueness of layer and parameter names.
    pub fn validate_names(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(ModelError::InvalidConfig(format!("duplicate layer name {}", l.name)));
            }
        }
        let mut params = std::collections::HashSet::new();
        for p in self.param_specs() {
            if !params.insert(p.name.clone()) {
                return Err(ModelError::InvalidConfig(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(())
    }

    /// Symbolic shape propagation; entry `i` is the shape of node `i`.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>, ModelError> {
        if input.c != self.input_channels {
            return Err(ModelError::InputChannels {
                expected: self.input_channels,
                got: input.c,
            });
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(input);
        for layer in &self.layers {
            let ins: Vec<Shape> = layer.inputs.iter().map(|&i| shapes[i]).collect();
            let out = layer_output_shape(layer, &ins).map_err(|e| ModelError::Layer {
                layer: layer.name.clone(),
                source: e,
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn eval_layer<T: Scalar>(
        &self,
        layer: &Layer,
        ins: &[&Tensor<T>],
        params: &ParamStore<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Aux<T>), ModelError> {
        let name = &layer.name;
        let wrap = |e| ModelError::Layer {
            layer: name.clone(),
            source: e,
        };
        let out = match &layer.kind {
            LayerKind::Conv2d { params: cp, bias, .. } => {
                let w = params.get(&param_name(name, ParamRole::Weight))?;
                let b = if *bias {
                    Some(params.get(&param_name(name, ParamRole::Bias))?.data())
                } else {
                    None
                };
                (tensor::conv2d(ins[0], w, b, *cp).map_err(wrap)?, Aux::None)
            }
            LayerKind::TransposeConv2x2 { bias, .. } => {
                let w = params.get(&param_name(name, ParamRole::Weight))?;
                let b = if *bias {
                    Some(params.get(&param_name(name, ParamRole::Bias))?.data())
                } else {
                    None
                };
                (tensor::transpose_conv2x2(ins[0], w, b).map_err(wrap)?, Aux::None)
            }
            LayerKind::BatchNorm { .. } => {
                let p = BatchNormParams {
                    gamma: params.get(&param_name(name, ParamRole::Gamma))?.data(),
                    beta: params.get(&param_name(name, ParamRole::Beta))?.data(),
                    running_mean: params.get(&param_name(name, ParamRole::RunningMean))?.data(),
                    running_var: params.get(&param_name(name, ParamRole::RunningVar))?.data(),
                    eps: T::from_f64_lossy(BN_EPS),
                };
                let (y, saved) = tensor::batchnorm2d(ins[0], &p, mode == Mode::Train).map_err(wrap)?;
                (y, Aux::BatchNorm(saved))
            }
            LayerKind::Activation { kind } => (tensor::activation(ins[0], *kind), Aux::None),
            LayerKind::MaxPool2x2 => {
                let r = tensor::maxpool2x2(ins[0]).map_err(wrap)?;
                (r.output, Aux::MaxPool(r.argmax))
            }
            LayerKind::GlobalAvgPool => (tensor::global_avg_pool(ins[0]).map_err(wrap)?, Aux::None),
            LayerKind::Concat => (tensor::concat_channels(ins[0], ins[1]).map_err(wrap)?, Aux::None),
            LayerKind::Add => (tensor::elementwise_add(ins[0], ins[1]).map_err(wrap)?, Aux::None),
            LayerKind::ScaleChannels => (tensor::scale_channels(ins[0], ins[1]).map_err(wrap)?, Aux::None),
        };
        Ok(out)
    }

    fn check_input<T: Scalar>(&self, input: &Tensor<T>) -> Result<(), ModelError> {
        if input.shape().c != self.input_channels {
            return Err(ModelError::InputChannels {
                expected: self.input_channels,
                got: input.shape().c,
            });
        }
        Ok(())
    }

    /// Forward pass that keeps every activation for a later [`Network::backward`].
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<Trace<T>, ModelError> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        values.push(input.clone());
        for layer in &self.layers {
            let ins: Vec<&Tensor<T>> = layer.inputs.iter().map(|&i| &values[i]).collect();
            let (y, a) = self.eval_layer(layer, &ins, params, mode)?;
            values.push(y);
            aux.push(a);
        }
        Ok(Trace { values, aux, mode })
    }

    /// Eval-mode forward pass that releases each activation after its last use.
    pub fn infer<T: Scalar>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut last_use = vec![0usize; n + 1];
        for (i, layer) in self.layers.iter().enumerate() {
            for &src in &layer.inputs {
                last_use[src] = i + 1;
            }
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n + 1];
        values[0] = Some(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let node = i + 1;
            let (y, _) = {
                let ins: Vec<&Tensor<T>> = layer
                    .inputs
                    .iter()
                    .map(|&s| values[s].as_ref().expect("value alive until last use"))
                    .collect();
                self.eval_layer(layer, &ins, params, Mode::Eval)?
            };
            values[node] = Some(y);
            for &src in &layer.inputs {
                if last_use[src] == node {
                    values[src] = None;
                }
            }
        }
        Ok(values[n].take().expect("output computed"))
    }

    /// Reverse pass from `cot`, the cotangent of the output node.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        trace: &Trace<T>,
        cot: &Tensor<T>,
    ) -> Result<Gradients<T>, ModelError> {
        if cot.shape() != trace.output().shape() {
            return Err(ModelError::Layer {
                layer: "output".into(),
                source: crate::tensor::TensorError::ShapeMismatch {
                    op: "backward",
                    dim: "cotangent",
                    detail: format!("{} vs output {}", cot.shape(), trace.output().shape()),
                },
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.layers.len() + 1];
        grads[self.output()] = Some(cot.clone());
        let mut pgrads = BTreeMap::new();

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let node = i + 1;
            let Some(g) = grads[node].take() else {
                continue;
            };
            let name = &layer.name;
            let wrap = |e| ModelError::Layer {
                layer: name.clone(),
                source: e,
            };
            let x = &trace.values[layer.inputs[0]];
            let input_grads: Vec<Tensor<T>> = match &layer.kind {
                LayerKind::Conv2d { params: cp, bias, .. } => {
                    let w = params.get(&param_name(name, ParamRole::Weight))?;
                    let r = conv2d_vjp(x, w, *bias, *cp, &g).map_err(wrap)?;
                    pgrads.insert(param_name(name, ParamRole::Weight), r.weights);
                    if let Some(b) = r.bias {
                        pgrads.insert(param_name(name, ParamRole::Bias), Tensor::vector(b));
                    }
                    vec![r.input]
                }
                LayerKind::TransposeConv2x2 { bias, .. } => {
                    let w = params.get(&param_name(name, ParamRole::Weight))?;
                    let r = transpose_conv2x2_vjp(x, w, *bias, &g).map_err(wrap)?;
                    pgrads.insert(param_name(name, ParamRole::Weight), r.weights);
                    if let Some(b) = r.bias {
                        pgrads.insert(param_name(name, ParamRole::Bias), Tensor::vector(b));
                    }
                    vec![r.input]
                }
                LayerKind::BatchNorm { .. } => {
                    let Aux::BatchNorm(saved) = &trace.aux[i] else {
                        unreachable!("batch norm layers record their statistics")
                    };
                    let gamma = params.get(&param_name(name, ParamRole::Gamma))?;
                    let r = batchnorm2d_vjp(x, gamma.data(), saved, &g).map_err(wrap)?;
                    pgrads.insert(param_name(name, ParamRole::Gamma), Tensor::vector(r.gamma));
                    pgrads.insert(param_name(name, ParamRole::Beta), Tensor::vector(r.beta));
                    vec![r.input]
                }
                LayerKind::Activation { kind } => vec![activation_vjp(x, *kind, &g).map_err(wrap)?],
                LayerKind::MaxPool2x2 => {
                    let Aux::MaxPool(argmax) = &trace.aux[i] else {
                        unreachable!("max-pool layers record their argmax")
                    };
                    vec![maxpool2x2_vjp(x.shape(), argmax, &g).map_err(wrap)?]
                }
                LayerKind::GlobalAvgPool => vec![global_avg_pool_vjp(x.shape(), &g).map_err(wrap)?],
                LayerKind::Concat => {
                    let (a, b) = concat_channels_vjp(x.shape().c, &g).map_err(wrap)?;
                    vec![a, b]
                }
                LayerKind::Add => vec![g.clone(), g],
                LayerKind::ScaleChannels => {
                    let s = &trace.values[layer.inputs[1]];
                    let (dx, ds) = scale_channels_vjp(x, s, &g).map_err(wrap)?;
                    vec![dx, ds]
                }
            };
            for (&src, gi) in layer.inputs.iter().zip(input_grads) {
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&gi).map_err(wrap)?,
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        for spec in self.param_specs() {
            if spec.role.learnable() && !pgrads.contains_key(&spec.name) {
                pgrads.insert(spec.name, Tensor::zeros(spec.shape));
            }
        }
        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(trace.values[0].shape()));
        Ok(Gradients { params: pgrads, input })
    }

    /// Folds the batch statistics recorded by a training-mode pass into the
    /// running statistics.
    pub fn fold_running_stats<T: Scalar>(&self, params: &mut ParamStore<T>, trace: &Trace<T>, momentum: f64) -> Result<(), ModelError> {
        if trace.mode != Mode::Train {
            return Ok(());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let (LayerKind::BatchNorm { .. }, Aux::BatchNorm(saved)) = (&layer.kind, &trace.aux[i]) {
                let s = trace.values[layer.inputs[0]].shape();
                let count = s.n * s.plane();
                let mean_name = param_name(&layer.name, ParamRole::RunningMean);
                let var_name = param_name(&layer.name, ParamRole::RunningVar);
                let mut mean = params.get(&mean_name)?.clone();
                let mut var = params.get(&var_name)?.clone();
                tensor::update_running_stats(
                    mean.data_mut(),
                    var.data_mut(),
                    saved,
                    count,
                    T::from_f64_lossy(momentum),
                );
                params.insert(mean_name, mean);
                params.insert(var_name, var);
            }
        }
        Ok(())
    }
}

/// Output shape of one layer given its input shapes.
pub fn layer_output_shape(layer: &Layer, ins: &[Shape]) -> Result<Shape, crate::tensor::TensorError> {
    use crate::tensor::TensorError::ShapeMismatch;
    let mism = |dim: &'static str, detail: String| ShapeMismatch {
        op: "layer",
        dim,
        detail,
    };
    let x = ins[0];
    match &layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            params,
            ..
        } => {
            if x.c != *in_channels {
                return Err(mism("C_in", format!("expected {in_channels} channels, got {}", x.c)));
            }
            let w = Shape::new(*out_channels, in_channels / params.groups.max(1), params.kernel.0, params.kernel.1);
            params.output_shape(x, w)
        }
        LayerKind::TransposeConv2x2 {
            in_channels,
            out_channels,
            ..
        } => {
            if x.c != *in_channels {
                return Err(mism("C_in", format!("expected {in_channels} channels, got {}", x.c)));
            }
            Ok(Shape::new(x.n, *out_channels, 2 * x.h, 2 * x.w))
        }
        LayerKind::BatchNorm { channels } => {
            if x.c != *channels {
                return Err(mism("C", format!("expected {channels} channels, got {}", x.c)));
            }
            Ok(x)
        }
        LayerKind::Activation { .. } => Ok(x),
        LayerKind::MaxPool2x2 => {
            if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
                return Err(mism("H/W", format!("max-pool needs even dims, got {}x{}", x.h, x.w)));
            }
            Ok(Shape::new(x.n, x.c, x.h / 2, x.w / 2))
        }
        LayerKind::GlobalAvgPool => Ok(Shape::new(x.n, x.c, 1, 1)),
        LayerKind::Concat => {
            let y = ins[1];
            if (x.n, x.h, x.w) != (y.n, y.h, y.w) {
                return Err(mism("H/W", format!("cannot concat {x} with {y}")));
            }
            Ok(Shape::new(x.n, x.c + y.c, x.h, x.w))
        }
        LayerKind::Add => {
            if x != ins[1] {
                return Err(mism("shape", format!("cannot add {x} and {}", ins[1])));
            }
            Ok(x)
        }
        LayerKind::ScaleChannels => {
            if ins[1] != Shape::new(x.n, x.c, 1, 1) {
                return Err(mism("shape", format!("scale {} does not fit {x}", ins[1])));
            }
            Ok(x)
        }
    }
}
