//! Batched kernels for the layer types used by [`super::Network`].
//!
//! Activations are stored per sample in channel-major (`C × H × W`) order and
//! samples are concatenated, so a batch of `B` activations of size `n` is a
//! flat slice of length `B · n`.

use crate::tensor::{gemm, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.kernel + 1
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn in_size(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_size(&self) -> usize {
        self.out_c * self.positions()
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = g.positions();
    for ci in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = (ci * g.in_h + oy + ky) * g.in_w + kx;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = g.positions();
    for ci in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (ci * g.in_h + oy + ky) * g.in_w + kx;
                    for (d, s) in dx[base..base + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) stride-1 convolution. Returns the output and the im2col
/// buffers needed for the backward pass.
pub(crate) fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (patch, p) = (g.patch(), g.positions());
    let mut cols = vec![0.0; batch * patch * p];
    let mut out = vec![0.0; batch * g.out_size()];
    for b in 0..batch {
        let xb = &x[b * g.in_size()..(b + 1) * g.in_size()];
        let cb = &mut cols[b * patch * p..(b + 1) * patch * p];
        im2col(g, xb, cb);
        let ob = &mut out[b * g.out_size()..(b + 1) * g.out_size()];
        for (o, chunk) in ob.chunks_mut(p).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(g.out_c, patch, p, weight, Op::N, cb, Op::N, ob);
    }
    (out, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    cols: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (patch, p) = (g.patch(), g.positions());
    let mut dx = want_input.then(|| vec![0.0; batch * g.in_size()]);
    let mut dcols = vec![0.0; patch * p];
    for b in 0..batch {
        let db = &dout[b * g.out_size()..(b + 1) * g.out_size()];
        let cb = &cols[b * patch * p..(b + 1) * patch * p];
        gemm(g.out_c, p, patch, db, Op::N, cb, Op::T, dweight);
        for (o, chunk) in db.chunks(p).enumerate() {
            dbias[o] += chunk.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            gemm(patch, g.out_c, p, weight, Op::T, db, Op::N, &mut dcols);
            col2im(g, &dcols, &mut dx[b * g.in_size()..(b + 1) * g.in_size()]);
        }
    }
    dx
}

/// 2×2 stride-2 max pooling (floor). Ties resolve to the first element in
/// row-major window order. Returns outputs and the flat argmax per output.
pub(crate) fn maxpool_forward(
    channels: usize,
    h: usize,
    w: usize,
    batch: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * channels * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(in_len: usize, arg: &[u32], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&i, &g) in arg.iter().zip(dout) {
        dx[i as usize] += g;
    }
    dx
}

pub(crate) fn relu_forward(x: &mut [f64]) -> Vec<bool> {
    x.iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub(crate) fn relu_backward(mask: &[bool], dout: &mut [f64]) {
    for (g, &on) in dout.iter_mut().zip(mask) {
        if !on {
            *g = 0.0;
        }
    }
}

/// `y = x · W + b` with `W` stored `in × out`.
pub(crate) fn dense_forward(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y: Vec<f64> = bias.iter().copied().cycle().take(batch * n_out).collect();
    gemm(batch, n_in, n_out, x, Op::N, weight, Op::N, &mut y);
    y
}

pub(crate) fn dense_backward(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    gemm(n_in, batch, n_out, x, Op::T, dy, Op::N, dweight);
    for row in dy.chunks(n_out) {
        for (d, g) in dbias.iter_mut().zip(row) {
            *d += g;
        }
    }
    want_input.then(|| {
        let mut dx = vec![0.0; batch * n_in];
        gemm(batch, n_out, n_in, dy, Op::N, weight, Op::T, &mut dx);
        dx
    })
}
