use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::layer::Layer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub layer: Layer,
    /// Source of the node's (first) input; `None` means the previous node, or the model input for node 0.
    pub input: Option<usize>,
}

impl Node {
    pub fn new(layer: Layer) -> Self {
        Node { layer, input: None }
    }

    pub fn with_input(layer: Layer, input: usize) -> Self {
        Node { layer, input: Some(input) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    /// Per-sample input shape, without the batch dimension.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl ModelMeta {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, num_classes: usize) -> Self {
        ModelMeta { name: name.into(), input_shape, num_classes, metrics: BTreeMap::new() }
    }
}

/// How the output channels of one convolution are consumed downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelConsumer {
    /// A single convolution reads the channels (possibly through channel-wise layers).
    Conv(usize),
    /// The channels are flattened into a linear layer; each channel owns `spatial` consecutive features.
    Linear { node: usize, spatial: usize },
    /// Fan-out, residual join, model output, or anything else that pins the channel count.
    Pinned,
}

/// The channel-wise layers that sit between a convolution and its consumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelFlow {
    pub conv: usize,
    pub region: Vec<usize>,
    pub consumer: ChannelConsumer,
}

/// A feed-forward CNN as an ordered node list with explicit conv dependency edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    conv_chain: Vec<Option<usize>>,
    protected: BTreeSet<usize>,
    pub meta: ModelMeta,
}

impl ModelGraph {
    /// Builds a graph, deriving conv dependencies and protected convs from the topology.
    pub fn new(meta: ModelMeta, nodes: Vec<Node>) -> Result<Self> {
        let mut g = ModelGraph {
            conv_chain: vec![None; nodes.len()],
            nodes,
            protected: BTreeSet::new(),
            meta,
        };
        g.validate_topology()?;
        let (chain, protected) = g.derive_structure();
        g.conv_chain = chain;
        g.protected = protected;
        g.validate()?;
        Ok(g)
    }

    /// Builds a graph with caller-supplied dependency edges and protected set.
    pub fn with_structure(
        meta: ModelMeta,
        nodes: Vec<Node>,
        conv_chain: Vec<Option<usize>>,
        protected: BTreeSet<usize>,
    ) -> Result<Self> {
        let g = ModelGraph { nodes, conv_chain, protected, meta };
        g.validate_topology()?;
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &Node {
        &self.nodes[index]
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Predecessor conv feeding conv node `index`, if any.
    pub fn conv_predecessor(&self, index: usize) -> Option<usize> {
        self.conv_chain.get(index).copied().flatten()
    }

    pub fn conv_chain(&self) -> &[Option<usize>] {
        &self.conv_chain
    }

    pub fn protected(&self) -> &BTreeSet<usize> {
        &self.protected
    }

    pub fn is_protected(&self, index: usize) -> bool {
        self.protected.contains(&index)
    }

    /// Node indices of all convolutions, in order.
    pub fn conv_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.layer.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_depth(&self) -> usize {
        self.nodes.iter().filter(|n| n.layer.is_conv()).count()
    }

    /// Index of the node feeding the first input of `index`; `None` is the model input.
    pub fn source_of(&self, index: usize) -> Option<usize> {
        match self.nodes[index].input {
            Some(i) => Some(i),
            None if index == 0 => None,
            None => Some(index - 1),
        }
    }

    /// Nodes reading the output of `index`, either as first input or as the second `Add` operand.
    pub fn consumers(&self, index: usize) -> Vec<usize> {
        (index + 1..self.nodes.len())
            .filter(|&j| {
                self.source_of(j) == Some(index)
                    || matches!(self.nodes[j].layer, Layer::Add { other } if other == index)
            })
            .collect()
    }

    /// All weight and bias entries (including batchnorm gamma/beta; running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.layer.params())
            .map(|t| t.len())
            .sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.layer.params())
            .map(|t| t.count_nonzero())
            .sum()
    }

    /// Entries of conv and linear weights, the tensors magnitude pruning acts on.
    pub fn prunable_count(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.layer.prunable_weight())
            .map(|t| t.len())
            .sum()
    }

    pub fn prunable_nonzero_count(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.layer.prunable_weight())
            .map(|t| t.count_nonzero())
            .sum()
    }

    /// Per-sample output shape of every node.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let input = match self.source_of(i) {
                Some(s) => shapes[s].clone(),
                None => self.meta.input_shape.clone(),
            };
            let out = match &node.layer {
                Layer::Conv2d(c) => {
                    let [ch, h, w] = expect_chw(i, &input)?;
                    if ch != c.in_channels() {
                        return Err(Error::shape(
                            i,
                            format!("conv expects {} input channels, got {ch}", c.in_channels()),
                        ));
                    }
                    let (oh, ow) = c
                        .output_hw(h, w)
                        .ok_or_else(|| Error::shape(i, format!("kernel larger than {h}x{w} input")))?;
                    vec![c.out_channels(), oh, ow]
                }
                Layer::BatchNorm2d(bn) => {
                    let [ch, _, _] = expect_chw(i, &input)?;
                    if ch != bn.channels() {
                        return Err(Error::shape(
                            i,
                            format!("batchnorm over {} channels, got {ch}", bn.channels()),
                        ));
                    }
                    input
                }
                Layer::Linear(l) => {
                    if input.len() != 1 || input[0] != l.in_features() {
                        return Err(Error::shape(
                            i,
                            format!("linear expects [{}], got {input:?}", l.in_features()),
                        ));
                    }
                    vec![l.out_features()]
                }
                Layer::ReLU => input,
                Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                    let [ch, h, w] = expect_chw(i, &input)?;
                    let (oh, ow) = p
                        .output_hw(h, w)
                        .ok_or_else(|| Error::shape(i, format!("pool window larger than {h}x{w}")))?;
                    vec![ch, oh, ow]
                }
                Layer::Flatten => vec![input.iter().product()],
                Layer::Add { other } => {
                    if shapes[*other] != input {
                        return Err(Error::shape(
                            i,
                            format!("add operands differ: {input:?} vs {:?}", shapes[*other]),
                        ));
                    }
                    input
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Channel flow of every conv: the channel-wise layers it feeds and who consumes its channels.
    pub fn channel_flows(&self) -> Vec<ChannelFlow> {
        let shapes = self.infer_shapes().ok();
        self.conv_nodes()
            .into_iter()
            .map(|c| self.channel_flow(c, shapes.as_deref()))
            .collect()
    }

    pub fn channel_flow_of(&self, conv: usize) -> ChannelFlow {
        let shapes = self.infer_shapes().ok();
        self.channel_flow(conv, shapes.as_deref())
    }

    fn channel_flow(&self, conv: usize, shapes: Option<&[Vec<usize>]>) -> ChannelFlow {
        let mut region = Vec::new();
        let mut cur = conv;
        loop {
            let consumers = self.consumers(cur);
            let next = match consumers.as_slice() {
                [k] if self.source_of(*k) == Some(cur) => *k,
                _ => {
                    return ChannelFlow { conv, region, consumer: ChannelConsumer::Pinned };
                }
            };
            let layer = &self.nodes[next].layer;
            if layer.is_channelwise() {
                region.push(next);
                cur = next;
                continue;
            }
            let consumer = match layer {
                Layer::Conv2d(_) if self.nodes[next].input.is_none() => ChannelConsumer::Conv(next),
                Layer::Flatten => {
                    let fc = self.consumers(next);
                    match (fc.as_slice(), shapes) {
                        ([l], Some(shapes))
                            if matches!(self.nodes[*l].layer, Layer::Linear(_))
                                && self.source_of(*l) == Some(next) =>
                        {
                            let s = &shapes[cur];
                            let spatial = s[1..].iter().product();
                            ChannelConsumer::Linear { node: *l, spatial }
                        }
                        _ => ChannelConsumer::Pinned,
                    }
                }
                _ => ChannelConsumer::Pinned,
            };
            return ChannelFlow { conv, region, consumer };
        }
    }

    fn derive_structure(&self) -> (Vec<Option<usize>>, BTreeSet<usize>) {
        let mut chain = vec![None; self.nodes.len()];
        let mut protected = BTreeSet::new();
        let shapes = self.infer_shapes().ok();
        for c in self.conv_nodes() {
            let flow = self.channel_flow(c, shapes.as_deref());
            match flow.consumer {
                ChannelConsumer::Conv(k) => chain[k] = Some(c),
                ChannelConsumer::Linear { .. } => {}
                ChannelConsumer::Pinned => {
                    protected.insert(c);
                }
            }
            // Convs on a side path (e.g. a downsampling shortcut) read an explicit source.
            if self.nodes[c].input.is_some() {
                protected.insert(c);
            }
        }
        (chain, protected)
    }

    fn validate_topology(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Structure("model has no nodes".into()));
        }
        if self.conv_chain.len() != self.nodes.len() {
            return Err(Error::Structure(format!(
                "conv_chain has {} entries for {} nodes",
                self.conv_chain.len(),
                self.nodes.len()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(src) = node.input {
                if src >= i {
                    return Err(Error::Structure(format!(
                        "node {i} reads node {src}, which is not earlier"
                    )));
                }
            }
            if let Layer::Add { other } = node.layer {
                if other >= i {
                    return Err(Error::Structure(format!(
                        "add node {i} references node {other}, which is not earlier"
                    )));
                }
            }
            node.layer
                .validate()
                .map_err(|e| Error::Structure(format!("node {i}: {e}")))?;
        }
        Ok(())
    }

    /// Checks every structural invariant, including the per-layer shape flow.
    pub fn validate(&self) -> Result<()> {
        self.validate_topology()?;
        if self.conv_depth() == 0 {
            return Err(Error::Structure("model contains no convolution".into()));
        }
        if self.meta.input_shape.is_empty() || self.meta.input_shape.len() > 3 {
            return Err(Error::Structure(format!(
                "input shape {:?} must have 1-3 dimensions",
                self.meta.input_shape
            )));
        }
        for (i, pred) in self.conv_chain.iter().enumerate() {
            if let Some(p) = *pred {
                if !self.nodes[i].layer.is_conv() || p >= i || !self.nodes[p].layer.is_conv() {
                    return Err(Error::Structure(format!(
                        "conv_chain edge {p} -> {i} must join two convs in node order"
                    )));
                }
            }
        }
        for &p in &self.protected {
            if p >= self.nodes.len() || !self.nodes[p].layer.is_conv() {
                return Err(Error::Structure(format!("protected index {p} is not a conv node")));
            }
        }
        self.infer_shapes()?;
        Ok(())
    }
}

fn expect_chw(node: usize, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::shape(node, format!("expected [C, H, W] input, got {shape:?}"))),
    }
}
