use serde::{Deserialize, Serialize};

use super::shape::TensorShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    GenericConv,
    DWConv,
    PWConv,
    MatMul,
    MsaBlock,
    ResidualAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    ReLU,
    Hardswish,
}

/// One layer of the hybrid network.
///
/// Convolution-like kinds use `kernel`/`stride`/`padding`/`groups`. A `MatMul`
/// is a 1x1 convolution whose spatial positions are tokens. An `MsaBlock`
/// describes a whole multi-scale attention module: a Q/K/V projection of
/// `3 * msa_heads * msa_dim` channels, one attention branch per entry of
/// `msa_scales` (scale 1 is the raw projection, scale k > 1 adds a depthwise
/// k x k plus grouped 1x1 aggregation), and a final projection to
/// `out_channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    #[serde(default)]
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub activation: Activation,
    pub bn_folded: bool,
    pub msa_dim: usize,
    pub msa_heads: usize,
    pub msa_scales: Vec<usize>,
}

impl LayerDesc {
    fn base(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: String::new(),
            kind,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_channels,
            out_channels,
            groups: 1,
            activation: Activation::None,
            bn_folded: false,
            msa_dim: 0,
            msa_heads: 0,
            msa_scales: Vec::new(),
        }
    }

    pub fn generic_conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            kernel,
            stride,
            padding,
            ..Self::base(LayerKind::GenericConv, in_channels, out_channels)
        }
    }

    /// Depthwise conv with "same" padding.
    pub fn dw(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: kernel / 2,
            groups: channels,
            ..Self::base(LayerKind::DWConv, channels, channels)
        }
    }

    pub fn pw(in_channels: usize, out_channels: usize) -> Self {
        Self::base(LayerKind::PWConv, in_channels, out_channels)
    }

    pub fn matmul(in_dim: usize, out_dim: usize) -> Self {
        Self::base(LayerKind::MatMul, in_dim, out_dim)
    }

    pub fn msa(
        in_channels: usize,
        out_channels: usize,
        heads: usize,
        dim: usize,
        scales: Vec<usize>,
    ) -> Self {
        Self {
            msa_dim: dim,
            msa_heads: heads,
            msa_scales: scales,
            ..Self::base(LayerKind::MsaBlock, in_channels, out_channels)
        }
    }

    pub fn residual_add(channels: usize) -> Self {
        Self::base(LayerKind::ResidualAdd, channels, channels)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Kinds that run as a (possibly grouped) convolution on the engines.
    pub fn is_conv_like(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::GenericConv | LayerKind::DWConv | LayerKind::PWConv | LayerKind::MatMul
        )
    }

    pub fn label(&self, index: usize) -> String {
        if self.name.is_empty() {
            format!("#{index} {:?}", self.kind)
        } else {
            self.name.clone()
        }
    }

    /// Output shape for the given input, or an error if the geometry is
    /// impossible (kernel larger than the padded input).
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        match self.kind {
            LayerKind::MsaBlock | LayerKind::ResidualAdd => Ok(input.with_channels(self.out_channels)),
            _ => {
                let conv = |size: usize| -> Option<usize> {
                    let padded = size + 2 * self.padding;
                    if self.stride == 0 || padded < self.kernel {
                        None
                    } else {
                        Some((padded - self.kernel) / self.stride + 1)
                    }
                };
                match (conv(input.height), conv(input.width)) {
                    (Some(h), Some(w)) => Ok(TensorShape::new(input.batch, self.out_channels, h, w)),
                    _ => Err(Error::InvalidLayer {
                        index: usize::MAX,
                        message: format!(
                            "kernel {} with padding {} does not fit input {}",
                            self.kernel, self.padding, input
                        ),
                    }),
                }
            }
        }
    }

    // ---- MSA helpers -------------------------------------------------

    /// Channels of the fused Q/K/V projection output.
    pub fn qkv_channels(&self) -> usize {
        3 * self.msa_heads * self.msa_dim
    }

    /// Channels entering the output projection (all branches concatenated).
    pub fn attention_channels(&self) -> usize {
        self.msa_scales.len() * self.msa_heads * self.msa_dim
    }

    pub fn qkv_desc(&self) -> LayerDesc {
        LayerDesc::pw(self.in_channels, self.qkv_channels()).named(format!("{}.qkv", self.name))
    }

    pub fn aggregation_dw_desc(&self, kernel: usize) -> LayerDesc {
        LayerDesc::dw(self.qkv_channels(), kernel, 1).named(format!("{}.agg{kernel}.dw", self.name))
    }

    pub fn aggregation_pw_desc(&self, kernel: usize) -> LayerDesc {
        LayerDesc::pw(self.qkv_channels(), self.qkv_channels())
            .with_groups(3 * self.msa_heads)
            .named(format!("{}.agg{kernel}.pw", self.name))
    }

    pub fn proj_desc(&self) -> LayerDesc {
        LayerDesc::pw(self.attention_channels(), self.out_channels)
            .with_activation(self.activation)
            .named(format!("{}.proj", self.name))
    }

    /// Structural invariants that do not depend on neighbouring layers.
    pub fn check(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut push = |m: String| errs.push(m);
        if self.in_channels == 0 || self.out_channels == 0 {
            push("channel counts must be >= 1".into());
        }
        match self.kind {
            LayerKind::GenericConv | LayerKind::DWConv | LayerKind::PWConv | LayerKind::MatMul => {
                if self.kernel == 0 {
                    push("kernel must be >= 1".into());
                }
                if !(self.stride == 1 || self.stride == 2) {
                    push(format!("stride must be 1 or 2, got {}", self.stride));
                }
                if self.groups == 0 {
                    push("groups must be >= 1".into());
                } else if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
                    push(format!(
                        "groups {} must divide in_channels {} and out_channels {}",
                        self.groups, self.in_channels, self.out_channels
                    ));
                }
            }
            _ => {}
        }
        match self.kind {
            LayerKind::DWConv => {
                if self.groups != self.in_channels || self.in_channels != self.out_channels {
                    push(format!(
                        "DWConv requires groups = in_channels = out_channels, got groups={} in={} out={}",
                        self.groups, self.in_channels, self.out_channels
                    ));
                }
            }
            LayerKind::PWConv | LayerKind::MatMul => {
                let kind = if self.kind == LayerKind::PWConv { "PWConv" } else { "MatMul" };
                if self.kernel != 1 {
                    push(format!("{kind} requires kernel=1"));
                }
                if self.stride != 1 {
                    push(format!("{kind} requires stride=1"));
                }
                if self.padding != 0 {
                    push(format!("{kind} requires padding=0"));
                }
            }
            LayerKind::MsaBlock => {
                if self.msa_dim == 0 || self.msa_heads == 0 {
                    push("MsaBlock requires msa_dim >= 1 and msa_heads >= 1".into());
                }
                if self.msa_scales.is_empty() {
                    push("MsaBlock requires at least one scale".into());
                }
                if self.msa_scales.iter().any(|&k| k == 0 || k % 2 == 0) {
                    push(format!("MsaBlock scales must be odd kernel sizes, got {:?}", self.msa_scales));
                }
            }
            LayerKind::ResidualAdd => {
                if self.in_channels != self.out_channels {
                    push("ResidualAdd requires in_channels = out_channels".into());
                }
            }
            LayerKind::GenericConv => {}
        }
        errs
    }
}
