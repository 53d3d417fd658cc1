//! Inference-mode forward pass over a batch.

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Layer, ModelGraph};
use crate::par;
use crate::tensor::Tensor;

/// Convolution strategy. Both paths agree to within float rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Explicit zero padding and direct accumulation in f64.
    #[default]
    Direct,
    /// Column unfolding followed by a single-precision GEMM.
    Im2col,
}

/// Logits `[batch, classes]` for a batch shaped `[batch, ..input_shape]`.
pub fn forward(model: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
    forward_with(model, batch, ConvAlgo::Direct)
}

pub fn forward_with(model: &ModelGraph, batch: &Tensor, algo: ConvAlgo) -> Result<Tensor> {
    let input_shape = &model.meta.input_shape;
    if batch.rank() != input_shape.len() + 1 || &batch.shape()[1..] != input_shape.as_slice() {
        return Err(Error::shape(
            0,
            format!("batch shape {:?} does not match input {:?} with a leading batch axis", batch.shape(), input_shape),
        ));
    }
    let n = batch.dim(0);
    let shapes = model.infer_shapes()?;
    let nodes = model.nodes();

    // Drop each activation after its last reader.
    let mut last_use = vec![0usize; nodes.len()];
    for j in 0..nodes.len() {
        if let Some(s) = model.source_of(j) {
            last_use[s] = last_use[s].max(j);
        }
        if let Layer::Add { other } = nodes[j].layer {
            last_use[other] = last_use[other].max(j);
        }
    }
    let mut acts: Vec<Option<Tensor>> = vec![None; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let input = match model.source_of(i) {
            Some(s) => acts[s].as_ref().expect("activation kept until last use"),
            None => batch,
        };
        let in_shape: &[usize] = match model.source_of(i) {
            Some(s) => &shapes[s],
            None => input_shape,
        };
        let out = apply_layer(&node.layer, input, n, in_shape, &shapes[i], algo, &acts)?;
        acts[i] = Some(out);
        for j in 0..i {
            if last_use[j] == i {
                acts[j] = None;
            }
        }
    }
    let out = acts.pop().flatten().expect("last node output");
    Ok(out)
}

fn apply_layer(
    layer: &Layer,
    input: &Tensor,
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    algo: ConvAlgo,
    acts: &[Option<Tensor>],
) -> Result<Tensor> {
    let in_len: usize = in_shape.iter().product();
    let out_len: usize = out_shape.iter().product();
    let x = input.data();
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(out_shape);
    let data = match layer {
        Layer::Conv2d(conv) => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            match algo {
                ConvAlgo::Direct => {
                    let pad = conv.padding;
                    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                    let padded: Vec<Vec<f32>> = par::map_range(n, |s| {
                        kernels::pad_input(&x[s * in_len..(s + 1) * in_len], c, h, w, pad)
                    });
                    let oc = conv.out_channels();
                    let mut out = vec![0.0f32; n * out_len];
                    par::for_each_chunk_mut(&mut out, oh * ow, |idx, plane| {
                        let (s, o) = (idx / oc, idx % oc);
                        kernels::conv_plane_direct(conv, o, &padded[s], hp, wp, oh, ow, plane);
                    });
                    out
                }
                ConvAlgo::Im2col => par::map_range(n, |s| {
                    kernels::conv_sample_im2col(conv, &x[s * in_len..(s + 1) * in_len], h, w).0
                })
                .concat(),
            }
        }
        Layer::BatchNorm2d(bn) => {
            let affine = bn.affine();
            let plane = in_shape[1] * in_shape[2];
            let mut out = x.to_vec();
            for (idx, chunk) in out.chunks_mut(plane).enumerate() {
                let (scale, shift) = affine[idx % affine.len()];
                chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
            out
        }
        Layer::Linear(l) => {
            let (fo, fi) = (l.out_features(), l.in_features());
            let mut out = vec![0.0f32; n * fo];
            match algo {
                ConvAlgo::Direct => {
                    let wt = l.weight.data();
                    par::for_each_chunk_mut(&mut out, fo, |s, row| {
                        let xs = &x[s * fi..(s + 1) * fi];
                        for (o, r) in row.iter_mut().enumerate() {
                            let b = l.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                            let dot: f64 = wt[o * fi..(o + 1) * fi]
                                .iter()
                                .zip(xs)
                                .map(|(&a, &b)| a as f64 * b as f64)
                                .sum();
                            *r = (b + dot) as f32;
                        }
                    });
                }
                ConvAlgo::Im2col => {
                    if let Some(b) = &l.bias {
                        out.chunks_mut(fo).for_each(|r| r.copy_from_slice(b.data()));
                    }
                    kernels::gemm(n, fi, fo, 1.0, x, false, l.weight.data(), true, 1.0, &mut out);
                }
            }
            out
        }
        Layer::ReLU => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool2d(p) => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            par::map_range(n, |s| kernels::maxpool_sample(&x[s * in_len..(s + 1) * in_len], c, h, w, *p).0)
                .concat()
        }
        Layer::AvgPool2d(p) => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            par::map_range(n, |s| kernels::avgpool_sample(&x[s * in_len..(s + 1) * in_len], c, h, w, *p))
                .concat()
        }
        Layer::Flatten => x.to_vec(),
        Layer::Add { other } => {
            let y = acts[*other].as_ref().expect("add operand kept until last use");
            x.iter().zip(y.data()).map(|(a, b)| a + b).collect()
        }
    };
    Tensor::new(full_shape, data)
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
