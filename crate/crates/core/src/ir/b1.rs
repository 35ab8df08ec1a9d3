use super::config::load_network_with_input;
use super::graph::NetworkGraph;
use super::shape::TensorShape;
use crate::error::{Error, Result};

/// Bundled EfficientViT-B1 backbone topology (same schema as any network
/// config; the copy under `configs/` is the editable source).
pub const B1_TOPOLOGY: &str = include_str!("../../../../configs/efficientvit-b1.json");

/// Build the B1 backbone for a `(1, 3, H, W)` input with H and W divisible by 32.
pub fn build_efficientvit_b1(input: TensorShape) -> Result<NetworkGraph> {
    if !input.height.is_multiple_of(32) || !input.width.is_multiple_of(32) || input.height == 0 || input.width == 0 {
        return Err(Error::Resolution {
            height: input.height,
            width: input.width,
            multiple: 32,
        });
    }
    if input.batch != 1 || input.channels != 3 {
        return Err(Error::Validation(vec![format!("B1 expects a (1,3,H,W) input, got {input}")]));
    }
    load_network_with_input(B1_TOPOLOGY, Some(input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{validate_graph, LayerKind, Stage};
    use std::collections::BTreeSet;

    #[test]
    fn b1_at_224() {
        let g = build_efficientvit_b1(TensorShape::chw(3, 224, 224)).unwrap();
        assert_eq!(g.layer(0).desc.kind, LayerKind::GenericConv);
        assert_eq!(g.layer(0).desc.in_channels, 3);
        assert_eq!(g.layer(0).desc.stride, 2);
        let tags: BTreeSet<Stage> = g.stage_tags().iter().copied().collect();
        assert_eq!(tags, Stage::ALL.into_iter().collect());
        assert!(validate_graph(&g).is_ok());
        assert_eq!(g.output_shape(), TensorShape::chw(256, 7, 7));
    }

    #[test]
    fn rejects_indivisible_resolution() {
        assert!(matches!(
            build_efficientvit_b1(TensorShape::chw(3, 224, 223)),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn other_resolutions() {
        let g = build_efficientvit_b1(TensorShape::chw(3, 256, 320)).unwrap();
        assert_eq!(g.output_shape(), TensorShape::chw(256, 8, 10));
    }
}
