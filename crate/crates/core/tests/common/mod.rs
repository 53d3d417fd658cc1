#![allow(dead_code)]

use modelshift::model::{BatchNorm2d, Conv2d, GraphBuilder, Layer, Linear, ModelGraph, Pool2d};
use modelshift::Tensor;
use rand::Rng;

/// Random plain CNN: 2-4 convs, optional batchnorm and pooling, flattened into one linear layer.
pub fn random_cnn<R: Rng>(rng: &mut R) -> ModelGraph {
    let c0 = rng.random_range(1..=3);
    let mut hw = [8usize, 9, 12][rng.random_range(0..3)];
    let classes = rng.random_range(2..=5);
    let mut b = GraphBuilder::new("random", vec![c0, hw, hw], classes);
    let depth = rng.random_range(2..=4);
    let mut cin = c0;
    for d in 0..depth {
        let out = rng.random_range(3..=8);
        let k = if rng.random_bool(0.7) { 3 } else { 1 };
        let stride = if d == 0 && rng.random_bool(0.3) { 2 } else { 1 };
        let w = Tensor::randn(&[out, cin, k, k], (2.0 / (cin * k * k) as f32).sqrt(), rng);
        let bias = rng.random_bool(0.5).then(|| Tensor::randn(&[out], 0.1, rng));
        b.push(Layer::Conv2d(Conv2d::new(w, bias, stride, k / 2).unwrap()));
        hw = (hw + 2 * (k / 2) - k) / stride + 1;
        if rng.random_bool(0.7) {
            b.push(Layer::BatchNorm2d(BatchNorm2d {
                gamma: Tensor::uniform(&[out], 0.5, 1.5, rng),
                beta: Tensor::randn(&[out], 0.1, rng),
                running_mean: Tensor::randn(&[out], 0.1, rng),
                running_var: Tensor::uniform(&[out], 0.5, 1.5, rng),
                eps: 1e-5,
            }));
        }
        b.push(Layer::ReLU);
        if hw >= 6 && rng.random_bool(0.4) {
            b.push(Layer::MaxPool2d(Pool2d::new(2, 2)));
            hw /= 2;
        }
        cin = out;
    }
    if rng.random_bool(0.5) {
        b.push(Layer::AvgPool2d(Pool2d::new(hw, hw)));
        hw = 1;
    }
    b.push(Layer::Flatten);
    let inf = cin * hw * hw;
    let w = Tensor::randn(&[classes, inf], (1.0 / inf as f32).sqrt(), rng);
    b.push(Layer::Linear(Linear::new(w, Some(Tensor::randn(&[classes], 0.1, rng))).unwrap()));
    b.build().unwrap()
}

/// Zeroes a random proper subset of output channels in every conv. With `safe`, each zeroed
/// channel is also given a non-positive constant so that it is exactly 0 after its ReLU.
pub fn sparsify<R: Rng>(model: &ModelGraph, safe: bool, rng: &mut R) -> ModelGraph {
    let mut nodes = model.nodes().to_vec();
    for c in model.conv_nodes() {
        let Layer::Conv2d(conv) = &mut nodes[c].layer else { unreachable!() };
        let oc = conv.out_channels();
        let per = conv.weight.len() / oc;
        let zeroed: Vec<usize> = (0..oc).filter(|_| rng.random_bool(0.35)).collect();
        let zeroed = if zeroed.len() == oc { zeroed[1..].to_vec() } else { zeroed };
        for &o in &zeroed {
            conv.weight.data_mut()[o * per..(o + 1) * per].fill(0.0);
            if safe {
                if let Some(b) = &mut conv.bias {
                    b.data_mut()[o] = -rng.random_range(0.0..0.5f32);
                }
            }
        }
        if safe {
            if let Some(Layer::BatchNorm2d(bn)) = nodes.get_mut(c + 1).map(|n| &mut n.layer) {
                for &o in &zeroed {
                    bn.running_mean.data_mut()[o] = rng.random_range(0.0..0.3);
                    bn.beta.data_mut()[o] = -rng.random_range(0.0..0.3f32);
                }
            }
        }
    }
    ModelGraph::new(model.meta.clone(), nodes).unwrap()
}

/// Output channels whose whole kernel slice is zero, by direct scan.
pub fn scan_zero_channels(model: &ModelGraph, node: usize) -> Vec<usize> {
    let w = &model.node(node).layer.as_conv().unwrap().weight;
    let per = w.len() / w.dim(0);
    (0..w.dim(0))
        .filter(|&o| (0..per).all(|j| w.data()[o * per + j] == 0.0))
        .collect()
}

pub fn random_batch<R: Rng>(model: &ModelGraph, n: usize, rng: &mut R) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(&model.meta.input_shape);
    Tensor::randn(&shape, 1.0, rng)
}
