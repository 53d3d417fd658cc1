use serde::{Deserialize, Serialize};

use crate::model::ModelGraph;
use crate::par;

/// Zero output channels of one convolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub node: usize,
    pub out_channels: usize,
    pub zero_out_channels: Vec<usize>,
    /// Scanned but never pruned.
    pub protected: bool,
}

impl LayerSparsity {
    pub fn collapsed(&self) -> bool {
        self.zero_out_channels.len() == self.out_channels
    }
}

/// Per-conv zero channels, in node order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
}

impl SparsityReport {
    /// True when no conv has a zero output channel.
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.zero_out_channels.is_empty())
    }

    pub fn zero_channel_count(&self) -> usize {
        self.layers.iter().map(|l| l.zero_out_channels.len()).sum()
    }

    pub fn layer(&self, node: usize) -> Option<&LayerSparsity> {
        self.layers.iter().find(|l| l.node == node)
    }
}

/// Lists every conv output channel whose kernel slice is exactly zero.
pub fn analyse_sparsity(model: &ModelGraph) -> SparsityReport {
    let convs = model.conv_nodes();
    let layers = par::map_slice(&convs, |&node| {
        let w = &model.node(node).layer.as_conv().expect("conv node").weight;
        let zero_out_channels = (0..w.dim(0))
            .filter(|&o| w.outer_slice(o).iter().all(|&x| x == 0.0))
            .collect();
        LayerSparsity {
            node,
            out_channels: w.dim(0),
            zero_out_channels,
            protected: model.is_protected(node),
        }
    });
    SparsityReport { layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{architecture, Architecture, Conv2d, GraphBuilder, Layer};
    use crate::tensor::Tensor;

    #[test]
    fn dense_model_has_empty_report() {
        let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 1).unwrap();
        let r = analyse_sparsity(&m);
        assert!(r.is_empty());
        assert_eq!(r.layers.len(), m.conv_depth());
    }

    #[test]
    fn finds_constructed_zero_channels() {
        let w = Tensor::from_fn(&[4, 2, 3, 3], |i| if matches!(i / 18, 1 | 3) { 0.0 } else { 1.0 + i as f32 });
        let mut b = GraphBuilder::new("z", vec![2, 5, 5], 4);
        b.push(Layer::Conv2d(Conv2d::new(w, None, 1, 1).unwrap()));
        b.push(Layer::ReLU);
        let r = analyse_sparsity(&b.build().unwrap());
        assert_eq!(r.layers[0].zero_out_channels, vec![1, 3]);
        assert!(r.layers[0].protected, "a conv feeding the model output is pinned");
    }
}
