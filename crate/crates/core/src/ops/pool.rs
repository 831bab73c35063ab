use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
///
/// Returns the pooled tensor and, for every output element, the flat index of
/// the winning input element. Ties go to the lowest flat index.
pub fn maxpool2x2_forward(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [batch, c, h, w] = input.dims();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape("maxpool", "spatial size >= 2x2", format!("{h}x{w}")));
    }
    let mut out = Tensor4::zeros([batch, c, oh, ow]);
    let mut argmax = vec![0usize; out.len()];
    let x = input.data();
    let mut o = 0;
    for b in 0..batch {
        for j in 0..c {
            let base = (b * c + j) * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[o] = x[best];
                    argmax[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_backward(grad_out: &Tensor4, argmax: &[usize], input_dims: [usize; 4]) -> Result<Tensor4> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("maxpool backward", argmax.len(), grad_out.len()));
    }
    let mut g = Tensor4::zeros(input_dims);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    Ok(g)
}

/// Global average pooling to `B x C x 1 x 1`.
pub fn avgpool_global_forward(input: &Tensor4) -> Tensor4 {
    let [batch, c, _, _] = input.dims();
    let plane = input.plane_len();
    let mut out = Tensor4::zeros([batch, c, 1, 1]);
    if plane == 0 {
        return out;
    }
    for (o, chunk) in out.data_mut().iter_mut().zip(input.data().chunks(plane)) {
        *o = (chunk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
    }
    out
}

pub fn avgpool_global_backward(grad_out: &Tensor4, input_dims: [usize; 4]) -> Result<Tensor4> {
    let [batch, c, h, w] = input_dims;
    if grad_out.dims() != [batch, c, 1, 1] {
        return Err(Error::shape(
            "avgpool backward",
            format!("{:?}", [batch, c, 1, 1]),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let plane = h * w;
    let mut g = Tensor4::zeros(input_dims);
    let scale = 1.0 / plane as f32;
    for (chunk, &v) in g.data_mut().chunks_mut(plane.max(1)).zip(grad_out.data()) {
        chunk.fill(v * scale);
    }
    Ok(g)
}
