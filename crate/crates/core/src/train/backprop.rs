//! Training-mode forward and reverse pass for the supported layer set.

use crate::data::Targets;
use crate::error::Result;
use crate::kernels;
use crate::model::{Layer, ModelGraph};
use crate::par;
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;

enum Cache {
    None,
    /// Batch im2col columns laid out `[k, n * p]`.
    Conv(Vec<f32>),
    Bn { xhat: Vec<f32>, inv_std: Vec<f64> },
    MaxPool(Vec<u32>),
}

pub(crate) struct Tape {
    shapes: Vec<Vec<usize>>,
    outputs: Vec<Vec<f32>>,
    caches: Vec<Cache>,
    batch: usize,
}

impl Tape {
    pub fn logits(&self) -> &[f32] {
        self.outputs.last().expect("non-empty model")
    }
}

/// Stacks per-sample `[rows, p]` blocks side by side into `[rows, n * p]`.
fn interleave(blocks: &[Vec<f32>], rows: usize, p: usize) -> Vec<f32> {
    let n = blocks.len();
    let mut out = vec![0.0f32; rows * n * p];
    for (s, b) in blocks.iter().enumerate() {
        for r in 0..rows {
            out[r * n * p + s * p..r * n * p + (s + 1) * p].copy_from_slice(&b[r * p..(r + 1) * p]);
        }
    }
    out
}

/// Inverse of [`interleave`], returning sample-major `[n, rows, p]`.
fn deinterleave(wide: &[f32], rows: usize, n: usize, p: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(wide.len());
    for s in 0..n {
        for r in 0..rows {
            out.extend_from_slice(&wide[r * n * p + s * p..r * n * p + (s + 1) * p]);
        }
    }
    out
}

/// Gradients laid out like `Layer::params()` for each node.
pub(crate) type Gradients = Vec<Vec<Vec<f32>>>;

/// Runs the batch with batch statistics in normalisation layers, updating their running estimates.
pub(crate) fn forward_train(model: &mut ModelGraph, batch: &Tensor) -> Result<Tape> {
    let shapes = model.infer_shapes()?;
    let n = batch.dim(0);
    let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(model.len());
    let mut caches = Vec::with_capacity(model.len());
    for i in 0..model.len() {
        let src = model.source_of(i);
        let in_shape: Vec<usize> = src.map_or_else(|| model.meta.input_shape.clone(), |s| shapes[s].clone());
        let in_len: usize = in_shape.iter().product();
        let x: &[f32] = match src {
            Some(s) => &outputs[s],
            None => batch.data(),
        };
        let (out, cache) = match &mut model.nodes_mut()[i].layer {
            Layer::Conv2d(conv) => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let conv = &*conv;
                let (kh, kw) = conv.kernel();
                let (oh, ow) = (shapes[i][1], shapes[i][2]);
                let (k, p, oc) = (in_shape[0] * kh * kw, oh * ow, conv.out_channels());
                let per: Vec<Vec<f32>> = par::map_range(n, |s| {
                    let xs = &x[s * in_len..(s + 1) * in_len];
                    let padded = kernels::pad_input(xs, in_shape[0], h, w, conv.padding);
                    let (hp, wp) = (h + 2 * conv.padding, w + 2 * conv.padding);
                    kernels::im2col(&padded, in_shape[0], hp, wp, kh, kw, conv.stride, oh, ow)
                });
                // One GEMM over the whole batch: columns laid out [k, n * p].
                let cols = interleave(&per, k, p);
                let mut wide = vec![0.0f32; oc * n * p];
                if let Some(b) = &conv.bias {
                    for (o, &bv) in b.data().iter().enumerate() {
                        wide[o * n * p..(o + 1) * n * p].fill(bv);
                    }
                }
                kernels::gemm(oc, k, n * p, 1.0, conv.weight.data(), false, &cols, false, 1.0, &mut wide);
                (deinterleave(&wide, oc, n, p), Cache::Conv(cols))
            }
            Layer::BatchNorm2d(bn) => {
                let c = in_shape[0];
                let plane = in_shape[1] * in_shape[2];
                let m = (n * plane) as f64;
                let mut xhat = vec![0.0f32; x.len()];
                let mut out = vec![0.0f32; x.len()];
                let mut inv_std = vec![0.0f64; c];
                for ch in 0..c {
                    let slices = (0..n).map(|s| (s * c + ch) * plane);
                    let mut sum = 0.0f64;
                    for start in slices.clone() {
                        sum += x[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0f64;
                    for start in slices.clone() {
                        sq += x[start..start + plane].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / m;
                    let inv = 1.0 / (var + bn.eps as f64).sqrt();
                    inv_std[ch] = inv;
                    let (g, b) = (bn.gamma.data()[ch], bn.beta.data()[ch]);
                    for start in slices {
                        for j in start..start + plane {
                            let xh = ((x[j] as f64 - mean) * inv) as f32;
                            xhat[j] = xh;
                            out[j] = g * xh + b;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let rm = &mut bn.running_mean.data_mut()[ch];
                    *rm = ((1.0 - BN_MOMENTUM) * *rm as f64 + BN_MOMENTUM * mean) as f32;
                    let rv = &mut bn.running_var.data_mut()[ch];
                    *rv = ((1.0 - BN_MOMENTUM) * *rv as f64 + BN_MOMENTUM * unbiased) as f32;
                }
                (out, Cache::Bn { xhat, inv_std })
            }
            Layer::Linear(l) => {
                let (fo, fi) = (l.out_features(), l.in_features());
                let mut out = vec![0.0f32; n * fo];
                if let Some(b) = &l.bias {
                    out.chunks_mut(fo).for_each(|r| r.copy_from_slice(b.data()));
                }
                kernels::gemm(n, fi, fo, 1.0, x, false, l.weight.data(), true, 1.0, &mut out);
                (out, Cache::None)
            }
            Layer::ReLU => (x.iter().map(|&v| v.max(0.0)).collect(), Cache::None),
            Layer::MaxPool2d(p) => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let p = *p;
                let per = par::map_range(n, |s| kernels::maxpool_sample(&x[s * in_len..(s + 1) * in_len], c, h, w, p));
                let mut out = Vec::new();
                let mut arg = Vec::new();
                for (o, a) in per {
                    out.extend(o);
                    arg.extend(a);
                }
                (out, Cache::MaxPool(arg))
            }
            Layer::AvgPool2d(p) => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let p = *p;
                let out = par::map_range(n, |s| kernels::avgpool_sample(&x[s * in_len..(s + 1) * in_len], c, h, w, p));
                (out.concat(), Cache::None)
            }
            Layer::Flatten => (x.to_vec(), Cache::None),
            Layer::Add { other } => {
                let y = &outputs[*other];
                (x.iter().zip(y).map(|(a, b)| a + b).collect(), Cache::None)
            }
        };
        outputs.push(out);
        caches.push(cache);
    }
    Ok(Tape { shapes, outputs, caches, batch: n })
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub(crate) fn loss_and_grad(logits: &[f32], n: usize, targets: &Targets) -> (f32, Vec<f32>) {
    let k = logits.len() / n;
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    match targets {
        Targets::Classes(labels) => {
            for (s, (row, g)) in logits.chunks(k).zip(grad.chunks_mut(k)).enumerate() {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let y = labels[s];
                total += z.ln() + max - row[y] as f64;
                for (j, gj) in g.iter_mut().enumerate() {
                    let p = exps[j] / z;
                    *gj = ((p - if j == y { 1.0 } else { 0.0 }) / n as f64) as f32;
                }
            }
        }
        Targets::Values(values) => {
            let count = logits.len() as f64;
            for ((g, &y), &t) in grad.iter_mut().zip(logits).zip(values.data()) {
                let d = y as f64 - t as f64;
                total += d * d;
                *g = (2.0 * d / count) as f32;
            }
            return ((total / count) as f32, grad);
        }
    }
    ((total / n as f64) as f32, grad)
}

/// Reverse pass from logit gradients to parameter gradients.
pub(crate) fn backward(model: &ModelGraph, batch: &Tensor, tape: &Tape, dlogits: Vec<f32>) -> Gradients {
    let n = tape.batch;
    let len = model.len();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; len];
    grads[len - 1] = Some(dlogits);
    let mut params: Gradients = model
        .nodes()
        .iter()
        .map(|node| node.layer.params().iter().map(|t| vec![0.0f32; t.len()]).collect())
        .collect();

    fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
        match slot {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    for i in (0..len).rev() {
        let Some(gy) = grads[i].take() else { continue };
        let src = model.source_of(i);
        let in_shape: &[usize] = src.map_or(&model.meta.input_shape, |s| &tape.shapes[s]);
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = tape.shapes[i].iter().product();
        let x: &[f32] = src.map_or(batch.data(), |s| &tape.outputs[s]);
        let need_dx = src.is_some();
        let dx: Option<Vec<f32>> = match (&model.node(i).layer, &tape.caches[i]) {
            (Layer::Conv2d(conv), Cache::Conv(cols)) => {
                let (kh, kw) = conv.kernel();
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (tape.shapes[i][1], tape.shapes[i][2]);
                let oc = conv.out_channels();
                let (k, p) = (c * kh * kw, oh * ow);
                let per_sample: Vec<Vec<f32>> = gy.chunks(out_len).map(|g| g.to_vec()).collect();
                let g_wide = interleave(&per_sample, oc, p);
                kernels::gemm(oc, n * p, k, 1.0, &g_wide, false, cols, true, 1.0, &mut params[i][0]);
                if conv.bias.is_some() {
                    for (o, db) in params[i][1].iter_mut().enumerate() {
                        *db += g_wide[o * n * p..(o + 1) * n * p].iter().sum::<f32>();
                    }
                }
                need_dx.then(|| {
                    let mut dcols = vec![0.0f32; k * n * p];
                    kernels::gemm(k, oc, n * p, 1.0, conv.weight.data(), true, &g_wide, false, 0.0, &mut dcols);
                    par::map_range(n, |s| {
                        let mine: Vec<f32> = (0..k)
                            .flat_map(|r| dcols[r * n * p + s * p..r * n * p + (s + 1) * p].iter().copied())
                            .collect();
                        kernels::col2im(&mine, c, h, w, conv.padding, kh, kw, conv.stride, oh, ow)
                    })
                    .concat()
                })
            }
            (Layer::BatchNorm2d(bn), Cache::Bn { xhat, inv_std }) => {
                let c = in_shape[0];
                let plane = in_shape[1] * in_shape[2];
                let m = (n * plane) as f64;
                let mut dx = vec![0.0f32; gy.len()];
                for ch in 0..c {
                    let starts: Vec<usize> = (0..n).map(|s| (s * c + ch) * plane).collect();
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for &st in &starts {
                        for j in st..st + plane {
                            sg += gy[j] as f64;
                            sgx += gy[j] as f64 * xhat[j] as f64;
                        }
                    }
                    params[i][0][ch] += sgx as f32;
                    params[i][1][ch] += sg as f32;
                    let scale = bn.gamma.data()[ch] as f64 * inv_std[ch] / m;
                    for &st in &starts {
                        for j in st..st + plane {
                            dx[j] = (scale * (m * gy[j] as f64 - sg - xhat[j] as f64 * sgx)) as f32;
                        }
                    }
                }
                need_dx.then_some(dx)
            }
            (Layer::Linear(l), _) => {
                let (fo, fi) = (l.out_features(), l.in_features());
                kernels::gemm(fo, n, fi, 1.0, &gy, true, x, false, 1.0, &mut params[i][0]);
                if l.bias.is_some() {
                    for row in gy.chunks(fo) {
                        params[i][1].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![0.0f32; n * fi];
                    kernels::gemm(n, fo, fi, 1.0, &gy, false, l.weight.data(), false, 0.0, &mut dx);
                    dx
                })
            }
            (Layer::ReLU, _) => Some(
                gy.iter()
                    .zip(&tape.outputs[i])
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            (Layer::MaxPool2d(_), Cache::MaxPool(arg)) => {
                let mut dx = vec![0.0f32; n * in_len];
                for s in 0..n {
                    for o in 0..out_len {
                        dx[s * in_len + arg[s * out_len + o] as usize] += gy[s * out_len + o];
                    }
                }
                Some(dx)
            }
            (Layer::AvgPool2d(p), _) => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (tape.shapes[i][1], tape.shapes[i][2]);
                let norm = 1.0 / (p.kernel * p.kernel) as f32;
                let mut dx = vec![0.0f32; n * in_len];
                for s in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gy[s * out_len + (ch * oh + oy) * ow + ox] * norm;
                                for ky in 0..p.kernel {
                                    let row = s * in_len + (ch * h + oy * p.stride + ky) * w + ox * p.stride;
                                    dx[row..row + p.kernel].iter_mut().for_each(|d| *d += g);
                                }
                            }
                        }
                    }
                }
                Some(dx)
            }
            (Layer::Flatten, _) => Some(gy.clone()),
            (Layer::Add { other }, _) => {
                accumulate(&mut grads[*other], gy.clone());
                Some(gy.clone())
            }
            _ => unreachable!("cache kind matches layer kind"),
        };
        if let (Some(s), Some(dx)) = (src, dx) {
            accumulate(&mut grads[s], dx);
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{architecture, Architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient on a few coordinates per tensor.
    fn check_gradients(mut model: ModelGraph, batch: Tensor, targets: Targets, tol: f64) {
        let tape = forward_train(&mut model.clone(), &batch).unwrap();
        let (_, dl) = loss_and_grad(tape.logits(), batch.dim(0), &targets);
        let grads = backward(&model, &batch, &tape, dl);
        let loss_at = |m: &ModelGraph| {
            let mut m = m.clone();
            let t = forward_train(&mut m, &batch).unwrap();
            loss_and_grad(t.logits(), batch.dim(0), &targets).0 as f64
        };
        let base = loss_at(&model);
        for node in 0..model.len() {
            let count = model.node(node).layer.params().len();
            for p in 0..count {
                let len = model.node(node).layer.params()[p].len();
                for idx in [0, len / 3, len - 1] {
                    let orig = model.node(node).layer.params()[p].data()[idx];
                    let analytic = grads[node][p][idx] as f64;
                    // kinks bias large steps and f32 noise swamps small ones; take the best of a ladder.
                    // Next to a kink the analytic value is one of the one-sided slopes, so those count too.
                    let mut best = f64::INFINITY;
                    let mut seen = Vec::new();
                    for eps in [1e-2f32, 3e-3, 1e-3, 3e-4] {
                        model.nodes_mut()[node].layer.params_mut()[p].data_mut()[idx] = orig + eps;
                        let up = loss_at(&model);
                        model.nodes_mut()[node].layer.params_mut()[p].data_mut()[idx] = orig - eps;
                        let down = loss_at(&model);
                        model.nodes_mut()[node].layer.params_mut()[p].data_mut()[idx] = orig;
                        let h = eps as f64;
                        let slopes = [(up - down) / (2.0 * h), (up - base) / h, (base - down) / h];
                        for numeric in slopes {
                            let scale = numeric.abs().max(analytic.abs()).max(1e-2);
                            best = best.min((numeric - analytic).abs() / scale);
                        }
                        seen.push(slopes);
                    }
                    assert!(
                        best <= tol,
                        "node {node} param {p} idx {idx}: numeric {seen:?} analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = architecture(Architecture::ToyCnn, [3, 32, 32], 4, 5).unwrap();
        let batch = Tensor::randn(&[6, 3, 32, 32], 1.0, &mut rng);
        check_gradients(model, batch, Targets::Classes(vec![0, 3, 1, 2, 2, 0]), 5e-2);
    }

    #[test]
    fn smooth_gradients_match_tightly() {
        use crate::model::{kaiming_conv, kaiming_linear, BatchNorm2d, Conv2d, GraphBuilder, Linear, Pool2d};
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut b = GraphBuilder::new("smooth", vec![2, 8, 8], 3);
        let bias = |n: usize, rng: &mut ChaCha8Rng| Some(Tensor::randn(&[n], 0.1, rng));
        let w = kaiming_conv(4, 2, 3, &mut rng);
        b.push(Layer::Conv2d(Conv2d::new(w, bias(4, &mut rng), 2, 1).unwrap()));
        let mut bn = BatchNorm2d::identity(4, 1e-5);
        bn.gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng);
        bn.beta = Tensor::randn(&[4], 0.2, &mut rng);
        b.push(Layer::BatchNorm2d(bn));
        let w = kaiming_conv(5, 4, 3, &mut rng);
        b.push(Layer::Conv2d(Conv2d::new(w, bias(5, &mut rng), 1, 1).unwrap()));
        b.push(Layer::AvgPool2d(Pool2d::new(2, 2)));
        b.push(Layer::Flatten);
        let w = kaiming_linear(3, 20, &mut rng);
        b.push(Layer::Linear(Linear::new(w, bias(3, &mut rng)).unwrap()));
        let model = b.build().unwrap();
        let batch = Tensor::randn(&[4, 2, 8, 8], 1.0, &mut rng);
        check_gradients(model, batch.clone(), Targets::Classes(vec![0, 2, 1, 1]), 5e-3);
        let values = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let model = {
            let mut b = GraphBuilder::new("smooth", vec![2, 8, 8], 3);
            let w = kaiming_conv(3, 2, 3, &mut rng);
            b.push(Layer::Conv2d(Conv2d::new(w, bias(3, &mut rng), 1, 1).unwrap()));
            b.push(Layer::AvgPool2d(Pool2d::new(8, 8)));
            b.push(Layer::Flatten);
            b.build().unwrap()
        };
        check_gradients(model, batch, Targets::Values(values), 5e-3);
    }

    #[test]
    fn resnet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = architecture(Architecture::ToyResnet, [2, 6, 6], 3, 9).unwrap();
        let batch = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
        check_gradients(model, batch, Targets::Classes(vec![2, 0]), 5e-2);
    }
}
