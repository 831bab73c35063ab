use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub grad_input: Tensor4,
    pub grad_weights: Tensor4,
    pub grad_bias: Vec<f32>,
}

fn check(input: &Tensor4, params: &LayerParams) -> Result<(usize, usize, usize)> {
    let batch = input.dims()[0];
    let features = input.item_len();
    let [out, inp, kh, kw] = params.weights.dims();
    if kh != 1 || kw != 1 || inp != features {
        return Err(Error::shape(
            "linear",
            format!("{inp} input features"),
            format!("{features} flattened features"),
        ));
    }
    if params.bias.len() != out {
        return Err(Error::shape("linear", format!("bias of length {out}"), params.bias.len()));
    }
    Ok((batch, features, out))
}

/// Fully connected layer over the flattened `C x H x W` features of each item.
/// The output is `B x out x 1 x 1`.
pub fn linear_forward(input: &Tensor4, params: &LayerParams) -> Result<Tensor4> {
    let (batch, features, out) = check(input, params)?;
    let w = params.weights.data();
    let mut y = Tensor4::zeros([batch, out, 1, 1]);
    for b in 0..batch {
        let x = input.item(b);
        let yb = y.item_mut(b);
        for o in 0..out {
            let row = &w[o * features..(o + 1) * features];
            let mut acc = params.bias[o];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            yb[o] = acc;
        }
    }
    Ok(y)
}

pub fn linear_backward(grad_out: &Tensor4, input: &Tensor4, params: &LayerParams) -> Result<LinearGrads> {
    let (batch, features, out) = check(input, params)?;
    if grad_out.dims() != [batch, out, 1, 1] {
        return Err(Error::shape(
            "linear backward",
            format!("{:?}", [batch, out, 1, 1]),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let w = params.weights.data();
    let mut gx = Tensor4::zeros(input.dims());
    let mut gw = vec![0.0f32; out * features];
    let mut gb = vec![0.0f32; out];
    for b in 0..batch {
        let x = input.item(b);
        let g = grad_out.item(b);
        let gxb = gx.item_mut(b);
        for o in 0..out {
            let gv = g[o];
            gb[o] += gv;
            let row = &w[o * features..(o + 1) * features];
            let grow = &mut gw[o * features..(o + 1) * features];
            for i in 0..features {
                grow[i] += gv * x[i];
                gxb[i] += gv * row[i];
            }
        }
    }
    Ok(LinearGrads {
        grad_input: gx,
        grad_weights: Tensor4::from_vec(params.weights.dims(), gw)?,
        grad_bias: gb,
    })
}
