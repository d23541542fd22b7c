//! Analytical efficiency accounting over a layer graph.
//!
//! Conventions:
//! - one MAC is one multiply plus one accumulate; operations = 2 x MACs;
//! - batch-norm, activation, pooling, concat, add and channel scaling
//!   contribute no MACs and no CIO;
//! - batch norm contributes `2 * C` learnable parameters, running
//!   statistics are excluded;
//! - CIO of a convolution is its input plus output element count;
//! - counts are per single image.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::models::{build_network, ModelConfig, LayerKind, ModelError, Network, ParamStore};
use crate::models::weights::encoded_len;
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    pub kind: String,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub params: u64,
    pub macs: u64,
    pub cio: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub cio: u64,
    /// `4 * params`: learnable parameters stored as 32-bit floats.
    pub model_size_bytes: u64,
    /// Size of the weight file, including running statistics and framing.
    pub weight_file_bytes: u64,
    pub gmacs: f64,
    /// Giga-operations with one MAC counted as two operations.
    pub gops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub model: String,
    pub input_shape: Shape,
    pub layers: Vec<LayerProfile>,
    pub totals: Totals,
}

impl ProfileReport {
    pub fn total_params(&self) -> u64 {
        self.totals.params
    }

    pub fn total_macs(&self) -> u64 {
        self.totals.macs
    }

    pub fn total_cio(&self) -> u64 {
        self.totals.cio
    }

    pub fn model_size_bytes(&self) -> u64 {
        self.totals.model_size_bytes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-layer table followed by a summary in the layout of an efficiency
    /// comparison table (parameters, MACs).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let name_w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<12}  {:>16}  {:>12}  {:>14}  {:>12}",
            "layer", "type", "output", "params", "MACs", "CIO"
        );
        for l in &self.layers {
            let o = l.output_shape;
            let _ = writeln!(
                s,
                "{:<name_w$}  {:<12}  {:>16}  {:>12}  {:>14}  {:>12}",
                l.name,
                l.kind,
                format!("{}x{}x{}", o.c, o.h, o.w),
                l.params,
                l.macs,
                l.cio
            );
        }
        let t = &self.totals;
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24}  {:>12}  {:>12}  {:>12}  {:>14}", "Model", "Parameters", "MACs", "GOPs", "Size (MB)");
        let _ = writeln!(
            s,
            "{:<24}  {:>11.2}M  {:>11.2}G  {:>11.2}G  {:>14.1}",
            format!("{} @{}x{}", self.model, self.input_shape.h, self.input_shape.w),
            t.params as f64 / 1e6,
            t.gmacs,
            t.gops,
            t.model_size_bytes as f64 / 1e6
        );
        let _ = writeln!(s, "total CIO: {}  weight file: {} bytes", t.cio, t.weight_file_bytes);
        s
    }
}

/// Learnable parameters of one layer.
pub fn layer_params(kind: &LayerKind) -> u64 {
    match kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            params,
            bias,
        } => {
            let w = params.kernel.0 * params.kernel.1 * (in_channels / params.groups) * out_channels;
            (w + if *bias { *out_channels } else { 0 }) as u64
        }
        LayerKind::TransposeConv2x2 {
            in_channels,
            out_channels,
            bias,
        } => (4 * in_channels * out_channels + if *bias { *out_channels } else { 0 }) as u64,
        LayerKind::BatchNorm { channels } => 2 * *channels as u64,
        LayerKind::Activation { .. }
        | LayerKind::MaxPool2x2
        | LayerKind::GlobalAvgPool
        | LayerKind::Concat
        | LayerKind::Add
        | LayerKind::ScaleChannels => 0,
    }
}

fn single(s: Shape) -> Shape {
    Shape::new(1, s.c, s.h, s.w)
}

fn output_shape(kind: &LayerKind, inputs: &[Shape]) -> Result<Shape, ModelError> {
    let layer = crate::models::Layer {
        name: String::new(),
        kind: kind.clone(),
        inputs: vec![0; kind.arity()],
    };
    crate::models::graph::layer_output_shape(&layer, inputs).map_err(|e| ModelError::Layer {
        layer: kind.label().to_string(),
        source: e,
    })
}

/// Multiply-accumulates of one layer for a single image of `input` shape.
pub fn layer_macs(kind: &LayerKind, input: Shape) -> Result<u64, ModelError> {
    let x = single(input);
    match kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            params,
            ..
        } => {
            let o = output_shape(kind, &[x])?;
            Ok((params.kernel.0 * params.kernel.1 * (in_channels / params.groups) * out_channels * o.plane()) as u64)
        }
        LayerKind::TransposeConv2x2 {
            in_channels,
            out_channels,
            ..
        } => {
            let o = output_shape(kind, &[x])?;
            Ok((in_channels * out_channels * o.plane()) as u64)
        }
        _ => Ok(0),
    }
}

/// Convolutional input/output element count for a single image.
pub fn layer_cio(kind: &LayerKind, input: Shape) -> Result<u64, ModelError> {
    if !kind.is_convolution() {
        return Ok(0);
    }
    let x = single(input);
    let o = output_shape(kind, &[x])?;
    Ok((x.numel() + o.numel()) as u64)
}

/// Symbolic pass over `net` for one image of spatial size `input`.
pub fn profile_network(name: &str, net: &Network, input: Shape) -> Result<ProfileReport, ModelError> {
    let input = single(input);
    let shapes = net.infer_shapes(input)?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let x = shapes[layer.inputs[0]];
        layers.push(LayerProfile {
            name: layer.name.clone(),
            kind: layer.kind.label().to_string(),
            input_shape: x,
            output_shape: shapes[i + 1],
            params: layer_params(&layer.kind),
            macs: layer_macs(&layer.kind, x)?,
            cio: layer_cio(&layer.kind, x)?,
        });
    }
    let params: u64 = layers.iter().map(|l| l.params).sum();
    let macs: u64 = layers.iter().map(|l| l.macs).sum();
    let cio: u64 = layers.iter().map(|l| l.cio).sum();
    let weight_file_bytes = encoded_len(&ParamStore::<f32>::for_network(net)) as u64;
    Ok(ProfileReport {
        model: name.to_string(),
        input_shape: input,
        layers,
        totals: Totals {
            params,
            macs,
            cio,
            model_size_bytes: 4 * params,
            weight_file_bytes,
            gmacs: macs as f64 / 1e9,
            gops: 2.0 * macs as f64 / 1e9,
        },
    })
}

/// Profiles `config` at `h x w` without allocating weights for execution.
pub fn profile_model(config: &ModelConfig, h: usize, w: usize) -> Result<ProfileReport, ModelError> {
    config.check_input_hw(h, w)?;
    let net = build_network(config)?;
    profile_network(config.kind.name(), &net, Shape::new(1, config.input_channels, h, w))
}
