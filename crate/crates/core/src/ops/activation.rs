use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor4, input: &Tensor4) -> Result<Tensor4> {
    if grad_out.dims() != input.dims() {
        return Err(Error::shape(
            "relu backward",
            format!("{:?}", input.dims()),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}
