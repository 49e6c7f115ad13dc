//! Channel-major (`[C, H, W]`) layer kernels with explicit backward passes.

/// Shape of a channel-major feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `c = a * b` for row-major `a: [m, k]`, `b: [k, n]`, optionally with `a`
/// read transposed from a `[k, m]` buffer and/or `b` from an `[n, k]` buffer.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_transposed: bool, b: &[f64], b_transposed: bool, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a zero-padded input into `[C * k * k, H * W]` columns.
fn im2col(input: &[f64], dims: Dims, ksize: usize) -> Vec<f64> {
    let (h, w, plane) = (dims.height, dims.width, dims.plane());
    let pad = (ksize / 2) as isize;
    let mut cols = vec![0.0; dims.channels * ksize * ksize * plane];
    for i in 0..dims.channels {
        let src = &input[i * plane..(i + 1) * plane];
        for ky in 0..ksize {
            let dy = ky as isize - pad;
            for kx in 0..ksize {
                let dx = kx as isize - pad;
                let dst = &mut cols[((i * ksize + ky) * ksize + kx) * plane..][..plane];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x1 == x0 {
                        continue;
                    }
                    let s0 = (sy as usize) * w + (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
fn col2im(cols: &[f64], dims: Dims, ksize: usize) -> Vec<f64> {
    let (h, w, plane) = (dims.height, dims.width, dims.plane());
    let pad = (ksize / 2) as isize;
    let mut out = vec![0.0; dims.len()];
    for i in 0..dims.channels {
        for ky in 0..ksize {
            let dy = ky as isize - pad;
            for kx in 0..ksize {
                let dx = kx as isize - pad;
                let src = &cols[((i * ksize + ky) * ksize + kx) * plane..][..plane];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x1 == x0 {
                        continue;
                    }
                    let d0 = i * plane + (sy as usize) * w + (x0 as isize + dx) as usize;
                    for (d, s) in out[d0..d0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded "same" convolution with an odd square kernel.
///
/// `weight` is `[out, in, k, k]`, `bias` is `[out]`.
pub fn conv2d_forward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    ksize: usize,
) -> Vec<f64> {
    let plane = dims.plane();
    let depth = dims.channels * ksize * ksize;
    let mut out = vec![0.0; out_channels * plane];
    if ksize == 1 {
        gemm(out_channels, depth, plane, weight, false, input, false, &mut out);
    } else {
        let cols = im2col(input, dims, ksize);
        gemm(out_channels, depth, plane, weight, false, &cols, false, &mut out);
    }
    for (o, b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Gradients of a convolution.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    out_channels: usize,
    ksize: usize,
    grad_out: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let plane = dims.plane();
    let depth = dims.channels * ksize * ksize;
    let grad_b = (0..out_channels).map(|o| grad_out[o * plane..(o + 1) * plane].iter().sum()).collect();

    let cols_owned;
    let cols: &[f64] = if ksize == 1 {
        input
    } else {
        cols_owned = im2col(input, dims, ksize);
        &cols_owned
    };
    // dW = dOut [O, HW] * cols^T [HW, depth]
    let mut grad_w = vec![0.0; out_channels * depth];
    gemm(out_channels, plane, depth, grad_out, false, cols, true, &mut grad_w);

    let grad_in = need_input_grad.then(|| {
        // dcols = W^T [depth, O] * dOut [O, HW]
        let mut grad_cols = vec![0.0; depth * plane];
        gemm(depth, out_channels, plane, weight, true, grad_out, false, &mut grad_cols);
        if ksize == 1 {
            grad_cols
        } else {
            col2im(&grad_cols, dims, ksize)
        }
    });
    ConvGrads { input: grad_in, weight: grad_w, bias: grad_b }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, for every
/// output cell, the flat input index of its maximum (first in row-major
/// order on ties).
pub fn maxpool2_forward(input: &[f64], dims: Dims) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (dims.height / 2, dims.width / 2);
    let mut out = Vec::with_capacity(dims.channels * oh * ow);
    let mut argmax = Vec::with_capacity(dims.channels * oh * ow);
    for c in 0..dims.channels {
        let base = c * dims.plane();
        for y in 0..oh {
            for x in 0..ow {
                let candidates = [
                    base + 2 * y * dims.width + 2 * x,
                    base + 2 * y * dims.width + 2 * x + 1,
                    base + (2 * y + 1) * dims.width + 2 * x,
                    base + (2 * y + 1) * dims.width + 2 * x + 1,
                ];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(argmax: &[usize], grad_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&idx, g) in argmax.iter().zip(grad_out) {
        grad[idx] += g;
    }
    grad
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &[f64], dims: Dims) -> Vec<f64> {
    let (oh, ow) = (dims.height * 2, dims.width * 2);
    let mut out = vec![0.0; dims.channels * oh * ow];
    for c in 0..dims.channels {
        for y in 0..oh {
            for x in 0..ow {
                out[(c * oh + y) * ow + x] = input[(c * dims.height + y / 2) * dims.width + x / 2];
            }
        }
    }
    out
}

/// `dims` are the (small) input dimensions.
pub fn upsample2_backward(grad_out: &[f64], dims: Dims) -> Vec<f64> {
    let (oh, ow) = (dims.height * 2, dims.width * 2);
    let mut grad = vec![0.0; dims.len()];
    for c in 0..dims.channels {
        for y in 0..oh {
            for x in 0..ow {
                grad[(c * dims.height + y / 2) * dims.width + x / 2] += grad_out[(c * oh + y) * ow + x];
            }
        }
    }
    grad
}
