//! JSON network config.
//!
//! ```json
//! {
//!   "input_shape": [1, 3, 224, 224],
//!   "layers": [
//!     {"kind": "GenericConv", "name": "stem", "kernel": 3, "stride": 2, "padding": 1,
//!      "in_channels": 3, "out_channels": 16, "activation": "Hardswish"},
//!     {"kind": "BatchNorm"},
//!     {"kind": "ResidualAdd", "skip_from": "stem"}
//!   ],
//!   "stage_tags": ["Conv", "Conv", "Conv"]
//! }
//! ```
//!
//! `stage_tags` has one entry per record in `layers`. `BatchNorm` records are
//! folded into the preceding convolution (`bn_folded = true`) and disappear
//! from the graph. `skip_from` names (or indexes, after folding) the layer
//! whose input is added by a `ResidualAdd`. Omitted fields take conv
//! defaults: kernel 1, stride 1, padding 0, groups 1 (DWConv: groups =
//! channels, padding = kernel / 2), activation None, `in_channels` from the
//! previous layer, `out_channels` = `in_channels` for DWConv/ResidualAdd/
//! MsaBlock.

use serde::{Deserialize, Serialize};

use super::graph::{NetworkGraph, Stage};
use super::layer::{Activation, LayerDesc, LayerKind};
use super::shape::TensorShape;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    input_shape: ShapeSpec,
    /// Input height and width must be multiples of this (e.g. 32 for a
    /// backbone that downsamples five times).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_multiple: Option<usize>,
    layers: Vec<LayerRecord>,
    stage_tags: Vec<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ShapeSpec {
    Array([usize; 4]),
    Object(TensorShape),
}

impl ShapeSpec {
    fn shape(&self) -> TensorShape {
        match *self {
            ShapeSpec::Array([n, c, h, w]) => TensorShape::new(n, c, h, w),
            ShapeSpec::Object(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum RecordKind {
    GenericConv,
    DWConv,
    PWConv,
    MatMul,
    MsaBlock,
    ResidualAdd,
    BatchNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SkipRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn_folded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    msa_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    msa_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    msa_scales: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip_from: Option<SkipRef>,
}

/// Parse and validate a network config.
pub fn load_network(text: &str) -> Result<NetworkGraph> {
    load_network_with_input(text, None)
}

/// [`load_network`] with the config's input shape replaced by `input`.
pub fn load_network_with_input(text: &str, input: Option<TensorShape>) -> Result<NetworkGraph> {
    let cfg: NetworkConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let input_shape = input.unwrap_or_else(|| cfg.input_shape.shape());
    if !input_shape.is_valid() {
        return Err(Error::Validation(vec![format!("input_shape {input_shape} has a zero dimension")]));
    }
    if let Some(m) = cfg.input_multiple.filter(|&m| m > 1) {
        if !input_shape.height.is_multiple_of(m) || !input_shape.width.is_multiple_of(m) {
            return Err(Error::Resolution {
                height: input_shape.height,
                width: input_shape.width,
                multiple: m,
            });
        }
    }
    if cfg.stage_tags.len() != cfg.layers.len() {
        return Err(Error::Validation(vec![format!(
            "stage_tags has {} entries but layers has {}",
            cfg.stage_tags.len(),
            cfg.layers.len()
        )]));
    }

    struct Pending {
        desc: LayerDesc,
        stage: Stage,
        skip: Option<SkipRef>,
        record: usize,
    }
    let mut pending: Vec<Pending> = Vec::new();
    let mut channels = input_shape.channels;
    for (ri, (rec, &stage)) in cfg.layers.iter().zip(&cfg.stage_tags).enumerate() {
        let field_err = |field: &'static str, message: String| Error::Field {
            index: ri,
            name: rec.name.clone().unwrap_or_default(),
            field,
            message,
        };
        if rec.kind == RecordKind::BatchNorm {
            let prev = pending
                .last_mut()
                .ok_or_else(|| field_err("kind", "BatchNorm must follow a convolution".into()))?;
            if !(prev.desc.is_conv_like() || prev.desc.kind == LayerKind::MsaBlock) {
                return Err(field_err("kind", format!("BatchNorm cannot fold into {:?}", prev.desc.kind)));
            }
            if prev.stage != stage {
                return Err(field_err("stage_tags", "BatchNorm must share the stage of its convolution".into()));
            }
            prev.desc.bn_folded = true;
            continue;
        }
        let kind = match rec.kind {
            RecordKind::GenericConv => LayerKind::GenericConv,
            RecordKind::DWConv => LayerKind::DWConv,
            RecordKind::PWConv => LayerKind::PWConv,
            RecordKind::MatMul => LayerKind::MatMul,
            RecordKind::MsaBlock => LayerKind::MsaBlock,
            RecordKind::ResidualAdd => LayerKind::ResidualAdd,
            RecordKind::BatchNorm => unreachable!(),
        };
        let index = pending.len();
        let in_channels = rec.in_channels.unwrap_or(channels);
        if in_channels != channels {
            let (producer, producer_name) = match pending.last() {
                Some(p) => (index - 1, p.desc.label(index - 1)),
                None => (0, "network input".to_string()),
            };
            return Err(Error::ShapeMismatch {
                producer,
                producer_name,
                consumer: index,
                consumer_name: rec.name.clone().unwrap_or_else(|| format!("#{index} {kind:?}")),
                message: format!("produces {channels} channels, consumer declares in_channels={in_channels}"),
            });
        }
        let out_channels = match (rec.out_channels, kind) {
            (Some(c), _) => c,
            (None, LayerKind::DWConv | LayerKind::ResidualAdd | LayerKind::MsaBlock) => in_channels,
            (None, _) => return Err(field_err("out_channels", format!("{kind:?} requires out_channels"))),
        };
        let kernel = rec.kernel.unwrap_or(1);
        let desc = LayerDesc {
            name: rec.name.clone().unwrap_or_default(),
            kind,
            kernel,
            stride: rec.stride.unwrap_or(1),
            padding: rec.padding.unwrap_or(if kind == LayerKind::DWConv { kernel / 2 } else { 0 }),
            in_channels,
            out_channels,
            groups: rec.groups.unwrap_or(if kind == LayerKind::DWConv { in_channels } else { 1 }),
            activation: rec.activation.unwrap_or_default(),
            bn_folded: rec.bn_folded.unwrap_or(false),
            msa_dim: rec.msa_dim.unwrap_or(0),
            msa_heads: rec.msa_heads.unwrap_or(0),
            msa_scales: rec.msa_scales.clone().unwrap_or_default(),
        };
        if let Some(e) = desc.check().into_iter().next() {
            return Err(Error::Field {
                index: ri,
                name: desc.name.clone(),
                field: "kind",
                message: e,
            });
        }
        if kind == LayerKind::ResidualAdd && rec.skip_from.is_none() {
            return Err(field_err("skip_from", "ResidualAdd requires skip_from".into()));
        }
        if kind != LayerKind::ResidualAdd && rec.skip_from.is_some() {
            return Err(field_err("skip_from", "only ResidualAdd takes skip_from".into()));
        }
        channels = out_channels;
        pending.push(Pending {
            desc,
            stage,
            skip: rec.skip_from.clone(),
            record: ri,
        });
    }

    let mut entries = Vec::with_capacity(pending.len());
    for (i, p) in pending.iter().enumerate() {
        let skip = match &p.skip {
            None => None,
            Some(SkipRef::Index(j)) => Some(*j),
            Some(SkipRef::Name(n)) => Some(pending.iter().position(|q| &q.desc.name == n).ok_or_else(|| {
                Error::Field {
                    index: p.record,
                    name: p.desc.name.clone(),
                    field: "skip_from",
                    message: format!("no layer named `{n}`"),
                }
            })?),
        };
        if let Some(j) = skip {
            if j >= i {
                return Err(Error::Field {
                    index: p.record,
                    name: p.desc.name.clone(),
                    field: "skip_from",
                    message: format!("skip source {j} must precede layer {i}"),
                });
            }
        }
        entries.push((p.desc.clone(), p.stage, skip));
    }
    NetworkGraph::build(input_shape, entries)
}

/// Serialize a graph in canonical form (every field explicit, folded BN
/// flags, integer `skip_from`). `load_network(&save_network(g))` reproduces `g`.
pub fn save_network(g: &NetworkGraph) -> String {
    let s = g.input_shape();
    let layers = g
        .layers()
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let d = &node.desc;
            let is_msa = d.kind == LayerKind::MsaBlock;
            LayerRecord {
                kind: match d.kind {
                    LayerKind::GenericConv => RecordKind::GenericConv,
                    LayerKind::DWConv => RecordKind::DWConv,
                    LayerKind::PWConv => RecordKind::PWConv,
                    LayerKind::MatMul => RecordKind::MatMul,
                    LayerKind::MsaBlock => RecordKind::MsaBlock,
                    LayerKind::ResidualAdd => RecordKind::ResidualAdd,
                },
                name: (!d.name.is_empty()).then(|| d.name.clone()),
                kernel: Some(d.kernel),
                stride: Some(d.stride),
                padding: Some(d.padding),
                in_channels: Some(d.in_channels),
                out_channels: Some(d.out_channels),
                groups: Some(d.groups),
                activation: Some(d.activation),
                bn_folded: Some(d.bn_folded),
                msa_dim: is_msa.then_some(d.msa_dim),
                msa_heads: is_msa.then_some(d.msa_heads),
                msa_scales: is_msa.then(|| d.msa_scales.clone()),
                skip_from: g.skip_source(i).map(SkipRef::Index),
            }
        })
        .collect();
    let cfg = NetworkConfig {
        description: None,
        input_shape: ShapeSpec::Array([s.batch, s.channels, s.height, s.width]),
        input_multiple: None,
        layers,
        stage_tags: g.stage_tags().to_vec(),
    };
    serde_json::to_string_pretty(&cfg).expect("network config serializes")
}
