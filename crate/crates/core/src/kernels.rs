//! Per-sample compute kernels on flat `f32` buffers.

use crate::model::{Conv2d, Pool2d};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major `op(a)`: m x k, `op(b)`: k x n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Copies a `[c, h, w]` sample into a zero-bordered `[c, h + 2p, w + 2p]` buffer.
pub fn pad_input(x: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return x[..c * h * w].to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let row = (ch * hp + y + pad) * wp + pad;
            out[row..row + w].copy_from_slice(src);
        }
    }
    out
}

/// Direct convolution of one output channel over one padded sample, accumulating in f64.
pub fn conv_plane_direct(
    conv: &Conv2d,
    oc: usize,
    padded: &[f32],
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let (kh, kw) = conv.kernel();
    let ic_n = conv.in_channels();
    let s = conv.stride;
    let w = conv.weight.data();
    let bias = conv.bias.as_ref().map_or(0.0, |b| b.data()[oc] as f64);
    let mut acc = vec![bias; oh * ow];
    for ic in 0..ic_n {
        let plane = &padded[ic * hp * wp..(ic + 1) * hp * wp];
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = w[((oc * ic_n + ic) * kh + ky) * kw + kx] as f64;
                for oy in 0..oh {
                    let row = &plane[(oy * s + ky) * wp + kx..];
                    let dst = &mut acc[oy * ow..(oy + 1) * ow];
                    for (ox, a) in dst.iter_mut().enumerate() {
                        *a += wv * row[ox * s] as f64;
                    }
                }
            }
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// Unfolds a padded `[c, hp, wp]` sample into columns `[c * kh * kw, oh * ow]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    padded: &[f32],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let p = oh * ow;
    let mut cols = vec![0.0f32; c * kh * kw * p];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let src = (ch * hp + oy * stride + ky) * wp + kx;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        dst.copy_from_slice(&padded[src..src + ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = padded[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into an unpadded `[c, h, w]` gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let p = oh * ow;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ch * h + iy as usize) * w + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

/// Convolution of one sample through im2col + GEMM; returns `(output, columns)`.
pub fn conv_sample_im2col(conv: &Conv2d, x: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let (kh, kw) = conv.kernel();
    let c = conv.in_channels();
    let (oh, ow) = conv.output_hw(h, w).expect("validated shape");
    let pad = conv.padding;
    let padded = pad_input(x, c, h, w, pad);
    let cols = im2col(&padded, c, h + 2 * pad, w + 2 * pad, kh, kw, conv.stride, oh, ow);
    let oc = conv.out_channels();
    let p = oh * ow;
    let mut out = vec![0.0f32; oc * p];
    if let Some(b) = &conv.bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * p..(o + 1) * p].fill(bv);
        }
    }
    gemm(oc, c * kh * kw, p, 1.0, conv.weight.data(), false, &cols, false, 1.0, &mut out);
    (out, cols)
}

/// Max pooling of one sample; also returns the flat input index chosen for each output.
pub fn maxpool_sample(x: &[f32], c: usize, h: usize, w: usize, p: Pool2d) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = p.output_hw(h, w).expect("validated shape");
    let mut out = vec![0.0f32; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for ky in 0..p.kernel {
                    for kx in 0..p.kernel {
                        let i = (ch * h + oy * p.stride + ky) * w + ox * p.stride + kx;
                        if x[i] > best || (ky == 0 && kx == 0) {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn avgpool_sample(x: &[f32], c: usize, h: usize, w: usize, p: Pool2d) -> Vec<f32> {
    let (oh, ow) = p.output_hw(h, w).expect("validated shape");
    let norm = 1.0 / (p.kernel * p.kernel) as f64;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..p.kernel {
                    let row = (ch * h + oy * p.stride + ky) * w + ox * p.stride;
                    acc += x[row..row + p.kernel].iter().map(|&v| v as f64).sum::<f64>();
                }
                out[(ch * oh + oy) * ow + ox] = (acc * norm) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, pad, k, s) = (2, 5, 4, 1, 3, 2);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let conv = Conv2d::new(Tensor::zeros(&[1, c, k, k]), None, s, pad).unwrap();
        let (oh, ow) = conv.output_hw(h, w).unwrap();
        let padded = pad_input(&x, c, h, w, pad);
        let cols = im2col(&padded, c, h + 2 * pad, w + 2 * pad, k, k, s, oh, ow);
        let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.11).cos()).collect();
        let back = col2im(&y, c, h, w, pad, k, k, s, oh, ow);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
