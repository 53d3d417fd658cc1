use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{Conv2d, Layer, ModelGraph, Node};
use crate::tensor::Tensor;

/// Folds every batchnorm into the convolution that feeds it and drops the batchnorm nodes.
///
/// With `s = gamma / sqrt(var + eps)`, the fused conv has `W' = W * s` per output channel and
/// `b' = (b - mean) * s + beta`.
pub fn fuse_conv_bn(model: &ModelGraph) -> Result<ModelGraph> {
    let nodes = model.nodes();
    let mut fused: Vec<Option<Conv2d>> = vec![None; nodes.len()];
    let mut removed = vec![false; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let Layer::BatchNorm2d(bn) = &node.layer else { continue };
        let src = model
            .source_of(i)
            .filter(|&s| nodes[s].layer.is_conv())
            .ok_or_else(|| Error::Structure(format!("batchnorm node {i} does not follow a convolution")))?;
        if model.consumers(src) != [i] {
            return Err(Error::Structure(format!(
                "conv node {src} feeds layers other than batchnorm node {i}; cannot fuse"
            )));
        }
        let conv = nodes[src].layer.as_conv().expect("checked above");
        if conv.out_channels() != bn.channels() {
            return Err(Error::Structure(format!(
                "batchnorm node {i} has {} channels, conv node {src} has {}",
                bn.channels(),
                conv.out_channels()
            )));
        }
        fused[src] = Some(fold(conv, bn));
        removed[i] = true;
    }

    // Old index -> new index; a removed batchnorm maps to its (now fused) conv.
    let mut remap = vec![0usize; nodes.len()];
    let mut next = 0usize;
    for i in 0..nodes.len() {
        if removed[i] {
            remap[i] = remap[model.source_of(i).expect("batchnorm has a source")];
        } else {
            remap[i] = next;
            next += 1;
        }
    }
    let mut out_nodes = Vec::with_capacity(next);
    let mut chain = Vec::with_capacity(next);
    for (i, node) in nodes.iter().enumerate() {
        if removed[i] {
            continue;
        }
        let layer = match (&node.layer, fused[i].take()) {
            (_, Some(conv)) => Layer::Conv2d(conv),
            (Layer::Add { other }, None) => Layer::Add { other: remap[*other] },
            (l, None) => l.clone(),
        };
        // An implicit "previous node" input stays implicit only if the previous node survived.
        let input = match (node.input, model.source_of(i)) {
            (Some(s), _) => Some(remap[s]),
            (None, Some(s)) if remap[s] + 1 != remap[i] => Some(remap[s]),
            _ => None,
        };
        out_nodes.push(Node { layer, input });
        chain.push(model.conv_predecessor(i).map(|p| remap[p]));
    }
    let protected: BTreeSet<usize> = model.protected().iter().map(|&p| remap[p]).collect();
    ModelGraph::with_structure(model.meta.clone(), out_nodes, chain, protected)
}

fn fold(conv: &Conv2d, bn: &crate::model::BatchNorm2d) -> Conv2d {
    let oc = conv.out_channels();
    let per = conv.weight.len() / oc;
    let mut weight = conv.weight.data().to_vec();
    let mut bias = vec![0.0f32; oc];
    for o in 0..oc {
        let var = bn.running_var.data()[o] as f64;
        let scale = bn.gamma.data()[o] as f64 / (var + bn.eps as f64).sqrt();
        for w in &mut weight[o * per..(o + 1) * per] {
            *w = (*w as f64 * scale) as f32;
        }
        let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
        bias[o] = ((b - bn.running_mean.data()[o] as f64) * scale + bn.beta.data()[o] as f64) as f32;
    }
    Conv2d {
        weight: Tensor::new(conv.weight.shape().to_vec(), weight).expect("same shape"),
        bias: Some(Tensor::new(vec![oc], bias).expect("one per channel")),
        stride: conv.stride,
        padding: conv.padding,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward;
    use crate::model::{BatchNorm2d, GraphBuilder};

    fn conv_bn(gamma: f32, beta: f32, mean: f32, var: f32) -> ModelGraph {
        let mut b = GraphBuilder::new("cb", vec![1, 1, 1], 1);
        b.push(Layer::Conv2d(Conv2d::new(Tensor::ones(&[1, 1, 1, 1]), Some(Tensor::zeros(&[1])), 1, 0).unwrap()));
        b.push(Layer::BatchNorm2d(BatchNorm2d {
            gamma: Tensor::full(&[1], gamma),
            beta: Tensor::full(&[1], beta),
            running_mean: Tensor::full(&[1], mean),
            running_var: Tensor::full(&[1], var),
            eps: 0.0,
        }));
        b.build().unwrap()
    }

    #[test]
    fn identity_batchnorm_leaves_conv_unchanged() {
        let m = conv_bn(1.0, 0.0, 0.0, 1.0);
        let f = fuse_conv_bn(&m).unwrap();
        assert_eq!(f.len(), 1);
        let c = f.node(0).layer.as_conv().unwrap();
        assert_eq!(c.weight.data(), &[1.0]);
        assert_eq!(c.bias.as_ref().unwrap().data(), &[0.0]);
    }

    #[test]
    fn affine_batchnorm_folds_into_bias() {
        let m = conv_bn(2.0, 3.0, 0.0, 1.0);
        let x = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(forward(&m, &x).unwrap().data(), &[5.0]);
        let f = fuse_conv_bn(&m).unwrap();
        assert_eq!(forward(&f, &x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn batchnorm_without_conv_is_rejected() {
        let mut b = GraphBuilder::new("bad", vec![1, 2, 2], 1);
        b.push(Layer::Conv2d(Conv2d::new(Tensor::ones(&[1, 1, 1, 1]), None, 1, 0).unwrap()));
        b.push(Layer::ReLU);
        b.push(Layer::BatchNorm2d(BatchNorm2d::identity(1, 1e-5)));
        let m = b.build().unwrap();
        assert!(matches!(fuse_conv_bn(&m), Err(Error::Structure(_))));
    }

    #[test]
    fn residual_references_are_remapped() {
        let m = crate::model::architecture(crate::model::Architecture::ToyResnet, [2, 8, 8], 3, 1).unwrap();
        let f = fuse_conv_bn(&m).unwrap();
        assert!(f.nodes().iter().all(|n| !matches!(n.layer, Layer::BatchNorm2d(_))));
        assert_eq!(f.conv_depth(), m.conv_depth());
        assert_eq!(f.protected().len(), m.protected().len());
        let derived = ModelGraph::new(f.meta.clone(), f.nodes().to_vec()).unwrap();
        assert_eq!(derived.protected(), f.protected());
        assert_eq!(derived.conv_chain(), f.conv_chain());
    }
}
