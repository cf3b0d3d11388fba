//! 2-D cross-correlation (NCHW layout, square kernels) via patch matrices.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output length of one spatial axis, or `None` when the window does not tile
/// the padded input exactly.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let [batch, in_channels, height, width] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
        let [out_channels, w_in, kh, kw] = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
        if w_in != in_channels || kh != kw {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let out_height = conv_output_len(height, kh, stride, pad);
        let out_width = conv_output_len(width, kw, stride, pad);
        match (out_height, out_width) {
            (Some(out_height), Some(out_width)) => Ok(Self {
                batch,
                in_channels,
                height,
                width,
                out_channels,
                kernel: kh,
                stride,
                pad,
                out_height,
                out_width,
            }),
            _ => Err(Error::config(format!(
                "conv2d output size is not integral for input {height}x{width}, kernel {kh}, stride {stride}, pad {pad}"
            ))),
        }
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Range of output positions whose input tap `o * stride + offset - pad` is in bounds.
fn valid_range(out_len: usize, in_len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if in_len + pad <= offset {
        0
    } else {
        ((in_len - 1 + pad - offset) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Unfolds `x` into a `[C*k*k, B*OH*OW]` patch matrix (zero for padding taps).
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (oh, ow, k) = (g.out_height, g.out_width, g.kernel);
    let plane = oh * ow;
    let n = g.batch * plane;
    let in_plane = g.height * g.width;
    let mut col = vec![0.0; g.in_channels * k * k * n];
    for c in 0..g.in_channels {
        for ky in 0..k {
            let (ylo, yhi) = valid_range(oh, g.height, ky, g.stride, g.pad);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(ow, g.width, kx, g.stride, g.pad);
                let row = &mut col[((c * k + ky) * k + kx) * n..][..n];
                for b in 0..g.batch {
                    let inp = &x[(b * g.in_channels + c) * in_plane..][..in_plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut row[b * plane + oy * ow..][xlo..xhi];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = inp[iy * g.width + (xlo + j) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates patch-matrix gradients back onto `x`.
fn col2im(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (oh, ow, k) = (g.out_height, g.out_width, g.kernel);
    let plane = oh * ow;
    let n = g.batch * plane;
    let in_plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..k {
            let (ylo, yhi) = valid_range(oh, g.height, ky, g.stride, g.pad);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(ow, g.width, kx, g.stride, g.pad);
                let row = &col[((c * k + ky) * k + kx) * n..][..n];
                for b in 0..g.batch {
                    let inp = &mut dx[(b * g.in_channels + c) * in_plane..][..in_plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &row[b * plane + oy * ow..][xlo..xhi];
                        for (j, s) in src.iter().enumerate() {
                            inp[iy * g.width + (xlo + j) * g.stride + kx - g.pad] += s;
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_height * g.out_width;
    let n = g.batch * plane;
    let ck = g.in_channels * g.kernel * g.kernel;
    let col = im2col(g, x);
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let mut acc = vec![0.0; n];
    for o in 0..g.out_channels {
        acc.fill(bias[o]);
        for (r, &wv) in w[o * ck..][..ck].iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (a, c) in acc.iter_mut().zip(&col[r * n..][..n]) {
                *a += wv * c;
            }
        }
        for b in 0..g.batch {
            out[(b * g.out_channels + o) * plane..][..plane].copy_from_slice(&acc[b * plane..][..plane]);
        }
    }
    out
}

/// Gradients of a convolution. `grad_x` is only computed when requested.
pub struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(g: &ConvGeometry, x: &[f64], w: &[f64], grad_out: &[f64], need_x: bool) -> ConvGrads {
    let plane = g.out_height * g.out_width;
    let n = g.batch * plane;
    let ck = g.in_channels * g.kernel * g.kernel;
    let col = im2col(g, x);
    // grad_out regrouped as [O, B*OH*OW]
    let mut gmat = vec![0.0; g.out_channels * n];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            gmat[o * n + b * plane..][..plane].copy_from_slice(&grad_out[(b * g.out_channels + o) * plane..][..plane]);
        }
    }
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_channels];
    for o in 0..g.out_channels {
        let go = &gmat[o * n..][..n];
        db[o] = go.iter().sum();
        for (r, d) in dw[o * ck..][..ck].iter_mut().enumerate() {
            *d = dot(go, &col[r * n..][..n]);
        }
    }
    let dx = need_x.then(|| {
        let mut dcol = col;
        dcol.fill(0.0);
        for o in 0..g.out_channels {
            let go = &gmat[o * n..][..n];
            for (r, &wv) in w[o * ck..][..ck].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (d, gv) in dcol[r * n..][..n].iter_mut().zip(go) {
                    *d += wv * gv;
                }
            }
        }
        let mut dx = vec![0.0; x.len()];
        col2im(g, &dcol, &mut dx);
        dx
    });
    ConvGrads { x: dx, w: dw, bias: db }
}
