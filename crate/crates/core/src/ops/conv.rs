//! 2-D cross-correlation lowered to matrix products over unfolded inputs.

use rayon::prelude::*;

use super::{ConvGeometry, LayerParams, REDUCE_CHUNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Output extent along one spatial axis; `None` when the kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Half-open range of output positions whose tap `kpos` lands inside the input.
#[inline]
fn valid_range(kpos: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = if kpos >= pad { 0 } else { (pad - kpos).div_ceil(stride) };
    let hi = if input + pad <= kpos {
        0
    } else {
        ((input - 1 + pad - kpos) / stride + 1).min(output)
    };
    (lo, hi.max(lo))
}

struct Dims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn check(input: &Tensor4, params: &LayerParams, geom: ConvGeometry) -> Result<Dims> {
    let [_, c_in, h, w] = input.dims();
    let [c_out, wc_in, kh, kw] = params.weights.dims();
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("{wc_in} input channels"),
            format!("{c_in} input channels"),
        ));
    }
    if kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("{0}x{0} kernel", geom.kernel),
            format!("{kh}x{kw} weights"),
        ));
    }
    if params.bias.len() != c_out {
        return Err(Error::shape("conv2d", format!("bias of length {c_out}"), params.bias.len()));
    }
    let oh = conv_output_size(h, geom.kernel, geom.stride, geom.pad);
    let ow = conv_output_size(w, geom.kernel, geom.stride, geom.pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {} <= input + 2*pad with stride >= 1", geom.kernel),
            format!("input {h}x{w}, pad {}, stride {}", geom.pad, geom.stride),
        ));
    };
    Ok(Dims {
        c_in,
        h,
        w,
        c_out,
        k: geom.kernel,
        stride: geom.stride,
        pad: geom.pad,
        oh,
        ow,
    })
}

/// Unfolds one sample into a `(C_in*k*k) x (oh*ow)` column matrix.
fn im2col(d: &Dims, x: &[f32], cols: &mut [f32]) {
    let (k, s) = (d.k, d.stride);
    let out_plane = d.oh * d.ow;
    for c in 0..d.c_in {
        let xp = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, d.pad, s, d.h, d.oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, d.pad, s, d.w, d.ow);
                let row = &mut cols[((c * k + ki) * k + kj) * out_plane..][..out_plane];
                row.fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * s + ki - d.pad;
                    for ox in xlo..xhi {
                        row[oy * d.ow + ox] = xp[iy * d.w + ox * s + kj - d.pad];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample.
fn col2im(d: &Dims, cols: &[f32], gx: &mut [f32]) {
    let (k, s) = (d.k, d.stride);
    let out_plane = d.oh * d.ow;
    for c in 0..d.c_in {
        let gxp = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(ki, d.pad, s, d.h, d.oh);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(kj, d.pad, s, d.w, d.ow);
                let row = &cols[((c * k + ki) * k + kj) * out_plane..][..out_plane];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - d.pad;
                    for ox in xlo..xhi {
                        gxp[iy * d.w + ox * s + kj - d.pad] += row[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a * b` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering every index reachable through the
    // given dimensions and strides; `c` is row-major m x n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward_item(d: &Dims, x: &[f32], weights: &[f32], bias: &[f32], cols: &mut [f32], out: &mut [f32]) {
    let out_plane = d.oh * d.ow;
    let ckk = d.c_in * d.k * d.k;
    for (o, y) in out.chunks_mut(out_plane).enumerate() {
        y.fill(bias[o]);
    }
    im2col(d, x, cols);
    gemm(d.c_out, ckk, out_plane, weights, ckk, 1, cols, out_plane, 1, 1.0, out);
}

/// Cross-correlates `input` (`B x C_in x H x W`) with the layer's filters.
pub fn conv2d_forward(input: &Tensor4, params: &LayerParams, geom: ConvGeometry) -> Result<Tensor4> {
    let d = check(input, params, geom)?;
    let batch = input.dims()[0];
    let mut out = Tensor4::zeros([batch, d.c_out, d.oh, d.ow]);
    let in_len = input.item_len();
    let out_len = out.item_len();
    if in_len == 0 || out_len == 0 {
        return Ok(out);
    }
    let weights = params.weights.data();
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || vec![0.0f32; d.c_in * d.k * d.k * d.oh * d.ow],
            |cols, (y, x)| forward_item(&d, x, weights, &params.bias, cols, y),
        );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub grad_input: Tensor4,
    pub grad_weights: Tensor4,
    pub grad_bias: Vec<f32>,
}

struct Scratch {
    cols: Vec<f32>,
    gcols: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn backward_item(
    d: &Dims,
    x: &[f32],
    g: &[f32],
    weights: &[f32],
    scratch: &mut Scratch,
    gx: &mut [f32],
    gw: &mut [f32],
    gb: &mut [f32],
) {
    let out_plane = d.oh * d.ow;
    let ckk = d.c_in * d.k * d.k;
    for (b, gp) in gb.iter_mut().zip(g.chunks(out_plane)) {
        *b += gp.iter().sum::<f32>();
    }
    im2col(d, x, &mut scratch.cols);
    gemm(d.c_out, out_plane, ckk, g, out_plane, 1, &scratch.cols, 1, out_plane, 1.0, gw);
    gemm(ckk, d.c_out, out_plane, weights, 1, ckk, g, out_plane, 1, 0.0, &mut scratch.gcols);
    col2im(d, &scratch.gcols, gx);
}

/// Gradients of [`conv2d_forward`] with respect to its input, weights and bias.
pub fn conv2d_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    params: &LayerParams,
    geom: ConvGeometry,
) -> Result<ConvGrads> {
    let d = check(input, params, geom)?;
    let batch = input.dims()[0];
    let expected = [batch, d.c_out, d.oh, d.ow];
    if grad_out.dims() != expected {
        return Err(Error::shape("conv2d backward", format!("{expected:?}"), format!("{:?}", grad_out.dims())));
    }
    let in_len = input.item_len();
    let out_len = grad_out.item_len();
    let w_len = params.weights.len();
    let mut grad_input = Tensor4::zeros(input.dims());
    let weights = params.weights.data();

    // Per-chunk parameter gradients, summed afterwards in chunk order.
    let partials: Vec<(Vec<f32>, Vec<f32>)> = if in_len == 0 || out_len == 0 {
        Vec::new()
    } else {
        grad_input
            .data_mut()
            .par_chunks_mut(in_len * REDUCE_CHUNK)
            .zip(input.data().par_chunks(in_len * REDUCE_CHUNK))
            .zip(grad_out.data().par_chunks(out_len * REDUCE_CHUNK))
            .map(|((gx, x), g)| {
                let mut gw = vec![0.0f32; w_len];
                let mut gb = vec![0.0f32; d.c_out];
                let col_len = d.c_in * d.k * d.k * d.oh * d.ow;
                let mut scratch = Scratch {
                    cols: vec![0.0; col_len],
                    gcols: vec![0.0; col_len],
                };
                for ((gxi, xi), gi) in gx
                    .chunks_mut(in_len)
                    .zip(x.chunks(in_len))
                    .zip(g.chunks(out_len))
                {
                    backward_item(&d, xi, gi, weights, &mut scratch, gxi, &mut gw, &mut gb);
                }
                (gw, gb)
            })
            .collect()
    };
    let mut gw = vec![0.0f32; w_len];
    let mut gb = vec![0.0f32; d.c_out];
    for (pw, pb) in &partials {
        gw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        grad_input,
        grad_weights: Tensor4::from_vec(params.weights.dims(), gw)?,
        grad_bias: gb,
    })
}
