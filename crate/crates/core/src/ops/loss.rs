use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Row-wise softmax over the flattened features of every item.
pub fn softmax(logits: &Tensor4) -> Tensor4 {
    let k = logits.item_len();
    let mut out = logits.clone();
    if k == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            sum += e;
            *v = e as f32;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    out
}

/// Mean cross-entropy of `logits` (`B x K x 1 x 1`) against integer labels,
/// together with its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let batch = logits.dims()[0];
    let k = logits.item_len();
    if labels.len() != batch {
        return Err(Error::shape("softmax_cross_entropy", format!("{batch} labels"), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape("softmax_cross_entropy", format!("labels < {k}"), bad));
    }
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0f64;
    for b in 0..batch {
        let row = logits.item(b);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[b]] as f64;
        let g = grad.item_mut(b);
        for (i, gv) in g.iter_mut().enumerate() {
            let p = (row[i] as f64 - log_z).exp();
            let target = if i == labels[b] { 1.0 } else { 0.0 };
            *gv = ((p - target) / batch as f64) as f32;
        }
    }
    Ok((loss / batch.max(1) as f64, grad))
}

/// Arg-max class per item; ties resolve to the lowest class index.
pub fn predictions(logits: &Tensor4) -> Vec<usize> {
    let k = logits.item_len();
    (0..logits.dims()[0])
        .map(|b| {
            let row = logits.item(b);
            let mut best = 0;
            for i in 1..k {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_of_class_count() {
        let logits = Tensor4::filled([3, 10, 1, 1], 0.7);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor4::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for b in 0..2 {
            assert!(g.item(b).iter().sum::<f32>().abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(softmax_cross_entropy(&Tensor4::zeros([1, 3, 1, 1]), &[3]).is_err());
    }

    #[test]
    fn argmax_and_softmax() {
        let logits = Tensor4::from_vec([1, 3, 1, 1], vec![0.0, 2.0, 2.0]).unwrap();
        assert_eq!(predictions(&logits), vec![1]);
        let p = softmax(&logits);
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
