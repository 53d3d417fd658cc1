//! Layers, the model graph and the bundled toy architectures.

mod arch;
mod graph;
mod layer;

pub use arch::{architecture, kaiming_linear, kaiming_conv, toy_resnet, vgg, Architecture, VggConfig, VggItem};
pub use graph::{ChannelConsumer, ChannelFlow, ModelGraph, ModelMeta, Node};
pub use layer::{BatchNorm2d, Conv2d, Layer, Linear, Pool2d};

use crate::error::Result;

/// Appends nodes in order and derives the graph structure on `build`.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    meta: ModelMeta,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, num_classes: usize) -> Self {
        GraphBuilder { meta: ModelMeta::new(name, input_shape, num_classes), nodes: Vec::new() }
    }

    /// Appends a layer fed by the previous node and returns its index.
    pub fn push(&mut self, layer: Layer) -> usize {
        self.nodes.push(Node::new(layer));
        self.nodes.len() - 1
    }

    /// Appends a layer fed by an explicit earlier node.
    pub fn push_from(&mut self, layer: Layer, input: usize) -> usize {
        self.nodes.push(Node::with_input(layer, input));
        self.nodes.len() - 1
    }

    pub fn last(&self) -> Option<usize> {
        self.nodes.len().checked_sub(1)
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::new(self.meta, self.nodes)
    }
}
