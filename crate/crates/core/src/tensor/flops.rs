//! Layer descriptions and FLOP accounting.
//!
//! Convention: one multiply-accumulate is two FLOPs; activations, pooling
//! and softmax cost one FLOP per element they touch. Bias additions are
//! folded into the MAC count.

use serde::Serialize;

use crate::error::{AsdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv2d,
    CausalDilatedConv1d,
    FullyConnected,
    GlobalAvgPool,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[kh, kw]` for conv2d, `[k]` for conv1d, empty otherwise.
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub dilation: usize,
    pub activation: Activation,
    /// Resolved output extent: `[H', W']` for conv2d, `[T]` for conv1d,
    /// `[H, W]` of the *input* for pooling. `None` means unresolved.
    pub extent: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn conv2d(c_in: usize, c_out: usize, kernel: [usize; 2], stride: usize, act: Activation) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            in_channels: c_in,
            out_channels: c_out,
            kernel: kernel.to_vec(),
            stride,
            dilation: 1,
            activation: act,
            extent: None,
        }
    }

    pub fn causal_conv1d(c_in: usize, c_out: usize, kernel: usize, dilation: usize, act: Activation) -> Self {
        Self {
            kind: LayerKind::CausalDilatedConv1d,
            in_channels: c_in,
            out_channels: c_out,
            kernel: vec![kernel],
            stride: 1,
            dilation,
            activation: act,
            extent: None,
        }
    }

    pub fn fully_connected(d_in: usize, d_out: usize, act: Activation) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            in_channels: d_in,
            out_channels: d_out,
            kernel: vec![],
            stride: 1,
            dilation: 1,
            activation: act,
            extent: Some(vec![]),
        }
    }

    pub fn global_avg_pool(channels: usize, input_hw: [usize; 2]) -> Self {
        Self {
            kind: LayerKind::GlobalAvgPool,
            in_channels: channels,
            out_channels: channels,
            kernel: vec![],
            stride: 1,
            dilation: 1,
            activation: Activation::None,
            extent: Some(input_hw.to_vec()),
        }
    }

    pub fn softmax(classes: usize) -> Self {
        Self {
            kind: LayerKind::Softmax,
            in_channels: classes,
            out_channels: classes,
            kernel: vec![],
            stride: 1,
            dilation: 1,
            activation: Activation::None,
            extent: Some(vec![]),
        }
    }

    pub fn with_extent(mut self, extent: &[usize]) -> Self {
        self.extent = Some(extent.to_vec());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel.iter().all(|&k| k > 0)
            && self.stride > 0
            && self.dilation > 0;
        let kernel_rank = match self.kind {
            LayerKind::Conv2d => 2,
            LayerKind::CausalDilatedConv1d => 1,
            _ => 0,
        };
        if !positive || self.kernel.len() != kernel_rank {
            return Err(AsdError::input(format!("invalid layer spec {self:?}")));
        }
        Ok(())
    }

    /// FLOPs of this layer, or an error when the extent is unresolved.
    pub fn flops(&self) -> Result<u64> {
        self.validate()?;
        let extent = self
            .extent
            .as_ref()
            .ok_or_else(|| AsdError::input(format!("unresolved extent for {:?} layer", self.kind)))?;
        let positions: u64 = extent.iter().map(|&e| e as u64).product();
        let (ci, co) = (self.in_channels as u64, self.out_channels as u64);
        let kernel: u64 = self.kernel.iter().map(|&k| k as u64).product();
        let (macs, outputs) = match self.kind {
            LayerKind::Conv2d | LayerKind::CausalDilatedConv1d => (ci * co * kernel * positions, co * positions),
            LayerKind::FullyConnected => (ci * co, co),
            LayerKind::GlobalAvgPool => return Ok(ci * positions),
            LayerKind::Softmax => return Ok(ci),
        };
        let act = match self.activation {
            Activation::Relu => outputs,
            Activation::None => 0,
        };
        Ok(2 * macs + act)
    }
}

/// Named, shape-resolved layer list.
#[derive(Clone, Debug, Default, Serialize)]
pub struct NetworkDescription {
    pub layers: Vec<(String, LayerSpec)>,
}

impl NetworkDescription {
    pub fn push(&mut self, id: impl Into<String>, spec: LayerSpec) {
        self.layers.push((id.into(), spec));
    }

    pub fn extend(&mut self, prefix: &str, other: NetworkDescription) {
        for (id, spec) in other.layers {
            self.layers.push((format!("{prefix}{id}"), spec));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
}

pub fn count_flops(net: &NetworkDescription) -> Result<FlopReport> {
    let per_layer = net
        .layers
        .iter()
        .map(|(id, spec)| spec.flops().map(|f| (id.clone(), f)))
        .collect::<Result<Vec<_>>>()?;
    let total = per_layer.iter().map(|(_, f)| f).sum();
    Ok(FlopReport { per_layer, total })
}
