use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch of logits and its gradient
/// with respect to the logits, `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, d) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut grad = Tensor::zeros(&[b, d]);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= d {
            return Err(Error::Domain(format!("label {y} with {d} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
        let z: T = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y];
        let g = grad.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *gk = (p - if k == y { T::one() } else { T::zero() }) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}
