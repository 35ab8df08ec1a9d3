//! Network intermediate representation: layer descriptors, the ordered
//! layer graph, the JSON config loader and the bundled EfficientViT-B1
//! topology.

mod b1;
mod config;
mod cost;
mod graph;
mod layer;
mod shape;

pub use b1::{build_efficientvit_b1, B1_TOPOLOGY};
pub use config::{load_network, load_network_with_input, save_network};
pub use cost::{layer_dram_bytes, layer_macs, layer_ops, weight_bytes};
pub use graph::{validate_graph, LayerNode, NetworkGraph, Stage};
pub use layer::{Activation, LayerDesc, LayerKind};
pub use shape::TensorShape;
