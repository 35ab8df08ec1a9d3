use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use super::cost::layer_macs;
use super::layer::{LayerDesc, LayerKind};
use super::shape::TensorShape;
use crate::error::{Error, Result};

/// Reporting stage of a layer: the stem conv, the DSConv layer, and the four
/// backbone stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Conv,
    DSConv,
    S1,
    S2,
    S3,
    S4,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Conv, Stage::DSConv, Stage::S1, Stage::S2, Stage::S3, Stage::S4];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub desc: LayerDesc,
    pub input: TensorShape,
    pub output: TensorShape,
}

/// Ordered layer list. Layer `i` consumes the output of layer `i - 1` (the
/// network input for `i = 0`). A residual edge `(src, dst)` adds the tensor
/// entering layer `src` to the main input of the `ResidualAdd` at `dst`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    input_shape: TensorShape,
    layers: Vec<LayerNode>,
    stage_tags: Vec<Stage>,
    residual_edges: Vec<(usize, usize)>,
}

impl NetworkGraph {
    /// Infer shapes for a layer chain and validate the result.
    ///
    /// Each entry is `(desc, stage, skip_from)`, `skip_from` being the layer
    /// whose input feeds a `ResidualAdd`.
    pub fn build(input_shape: TensorShape, entries: Vec<(LayerDesc, Stage, Option<usize>)>) -> Result<Self> {
        let mut layers = Vec::with_capacity(entries.len());
        let mut stage_tags = Vec::with_capacity(entries.len());
        let mut residual_edges = Vec::new();
        let mut cur = input_shape;
        for (i, (desc, stage, skip)) in entries.into_iter().enumerate() {
            if desc.in_channels != cur.channels {
                let (producer, producer_name) = if i == 0 {
                    (0, "network input".to_string())
                } else {
                    (i - 1, layers_label(&layers, i - 1))
                };
                return Err(Error::ShapeMismatch {
                    producer,
                    producer_name,
                    consumer: i,
                    consumer_name: desc.label(i),
                    message: format!("produces {} channels, consumer expects {}", cur.channels, desc.in_channels),
                });
            }
            let output = desc.output_shape(cur).map_err(|e| match e {
                Error::InvalidLayer { message, .. } => Error::InvalidLayer { index: i, message },
                other => other,
            })?;
            if let Some(src) = skip {
                residual_edges.push((src, i));
            }
            layers.push(LayerNode { desc, input: cur, output });
            stage_tags.push(stage);
            cur = output;
        }
        let g = Self {
            input_shape,
            layers,
            stage_tags,
            residual_edges,
        };
        validate_graph(&g).map_err(Error::Validation)?;
        Ok(g)
    }

    /// Assemble a graph without any checking; pair with [`validate_graph`].
    pub fn from_parts_unchecked(
        input_shape: TensorShape,
        layers: Vec<LayerNode>,
        stage_tags: Vec<Stage>,
        residual_edges: Vec<(usize, usize)>,
    ) -> Self {
        Self {
            input_shape,
            layers,
            stage_tags,
            residual_edges,
        }
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerNode {
        &self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn stage_tags(&self) -> &[Stage] {
        &self.stage_tags
    }

    pub fn stage(&self, i: usize) -> Option<Stage> {
        self.stage_tags.get(i).copied()
    }

    pub fn residual_edges(&self) -> &[(usize, usize)] {
        &self.residual_edges
    }

    /// Layer whose input is the skip operand of the `ResidualAdd` at `dst`.
    pub fn skip_source(&self, dst: usize) -> Option<usize> {
        self.residual_edges.iter().find(|e| e.1 == dst).map(|e| e.0)
    }

    pub fn output_shape(&self) -> TensorShape {
        self.layers.last().map(|l| l.output).unwrap_or(self.input_shape)
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| layer_macs(&l.desc, l.input)).sum()
    }

    pub fn stage_macs(&self) -> BTreeMap<Stage, u64> {
        let mut m = BTreeMap::new();
        for (l, s) in self.layers.iter().zip(&self.stage_tags) {
            *m.entry(*s).or_default() += layer_macs(&l.desc, l.input);
        }
        m
    }
}

fn layers_label(layers: &[LayerNode], i: usize) -> String {
    layers[i].desc.label(i)
}

/// Check every layer invariant, the shape chain, residual edges and stage
/// tags. Returns every problem found.
pub fn validate_graph(g: &NetworkGraph) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    if !g.input_shape.is_valid() {
        errs.push(format!("input shape {} has a zero dimension", g.input_shape));
    }
    if g.input_shape.batch != 1 {
        errs.push(format!("batch must be 1, got {}", g.input_shape.batch));
    }
    for (i, node) in g.layers.iter().enumerate() {
        let label = node.desc.label(i);
        for e in node.desc.check() {
            errs.push(format!("layer {i} ({label}): {e}"));
        }
        let expected_in = if i == 0 { g.input_shape } else { g.layers[i - 1].output };
        if node.input != expected_in {
            let from = if i == 0 { "network input".to_string() } else { g.layers[i - 1].desc.label(i - 1) };
            errs.push(format!(
                "layer {i} ({label}): input {} does not match {from} output {expected_in}",
                node.input
            ));
        }
        if node.input.channels != node.desc.in_channels {
            errs.push(format!(
                "layer {i} ({label}): input has {} channels, layer expects {}",
                node.input.channels, node.desc.in_channels
            ));
        }
        match node.desc.output_shape(node.input) {
            Ok(o) if o == node.output => {}
            Ok(o) => errs.push(format!("layer {i} ({label}): recorded output {} but computes {o}", node.output)),
            Err(e) => errs.push(format!("layer {i} ({label}): {e}")),
        }
        if node.desc.kind == LayerKind::ResidualAdd {
            let n = g.residual_edges.iter().filter(|e| e.1 == i).count();
            if n != 1 {
                errs.push(format!("layer {i} ({label}): ResidualAdd needs exactly one residual edge, has {n}"));
            }
        }
    }
    for &(src, dst) in &g.residual_edges {
        if dst >= g.layers.len() || src >= dst {
            errs.push(format!("residual edge ({src}, {dst}) must point backwards inside the graph"));
            continue;
        }
        if g.layers[dst].desc.kind != LayerKind::ResidualAdd {
            errs.push(format!("residual edge ({src}, {dst}) ends at a non-ResidualAdd layer"));
            continue;
        }
        let skip = g.layers[src].input;
        let main = g.layers[dst].input;
        if skip != main {
            errs.push(format!("residual edge ({src}, {dst}) joins unequal shapes {skip} and {main}"));
        }
    }
    if g.stage_tags.len() != g.layers.len() {
        errs.push(format!(
            "stage tags cover {} layers but the graph has {}",
            g.stage_tags.len(),
            g.layers.len()
        ));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dsconv() -> NetworkGraph {
        NetworkGraph::build(
            TensorShape::chw(8, 8, 8),
            vec![
                (LayerDesc::dw(8, 3, 1), Stage::DSConv, None),
                (LayerDesc::pw(8, 8), Stage::DSConv, None),
                (LayerDesc::residual_add(8), Stage::DSConv, Some(0)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn build_infers_shapes() {
        let g = dsconv();
        assert_eq!(g.output_shape(), TensorShape::chw(8, 8, 8));
        assert_eq!(g.residual_edges(), &[(0, 2)]);
        assert_eq!(g.skip_source(2), Some(0));
    }

    #[test]
    fn residual_across_unequal_shapes_is_one_error() {
        let g = NetworkGraph::build(
            TensorShape::chw(8, 8, 8),
            vec![
                (LayerDesc::dw(8, 3, 2), Stage::S1, None),
                (LayerDesc::pw(8, 8), Stage::S1, None),
            ],
        )
        .unwrap();
        let mut layers = g.layers().to_vec();
        let last = layers[1].output;
        layers.push(LayerNode {
            desc: LayerDesc::residual_add(8),
            input: last,
            output: last,
        });
        let bad = NetworkGraph::from_parts_unchecked(g.input_shape(), layers, vec![Stage::S1; 3], vec![(0, 2)]);
        let errs = validate_graph(&bad).unwrap_err();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(errs[0].contains("unequal shapes"));
    }

    #[test]
    fn dw_groups_mismatch_is_one_error() {
        let g = dsconv();
        let mut layers = g.layers().to_vec();
        layers[0].desc.groups = 4;
        let bad = NetworkGraph::from_parts_unchecked(
            g.input_shape(),
            layers,
            g.stage_tags().to_vec(),
            g.residual_edges().to_vec(),
        );
        let errs = validate_graph(&bad).unwrap_err();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(errs[0].contains("DWConv requires groups"));
    }

    #[test]
    fn collects_every_error() {
        let g = dsconv();
        let mut layers = g.layers().to_vec();
        layers[0].desc.groups = 4;
        layers[1].desc.kernel = 3;
        let bad = NetworkGraph::from_parts_unchecked(g.input_shape(), layers, vec![Stage::S1], vec![]);
        let errs = validate_graph(&bad).unwrap_err();
        // groups, kernel, recomputed output, missing edge, stage coverage
        assert!(errs.len() >= 4, "{errs:?}");
    }
}
